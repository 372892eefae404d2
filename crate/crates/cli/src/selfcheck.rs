//! Oracle checks runnable from the command line.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use meshrecover_core::camera::{
    intersect_ray_triangle, vertex_normals, visible_vertices, CameraPose, Intrinsics, VisibilityOptions, NEAR_PLANE,
};
use meshrecover_core::matching::{match_points, LiftedPointSet, Search};
use meshrecover_core::train::gradient_check;
use meshrecover_core::{load_template, toy, Point3, Result, TemplateMesh};

#[derive(Debug, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub template_hash: String,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<Check>,
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let t0 = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    Check {
        name,
        passed,
        detail,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

/// Grid UV search against exhaustive search on random point sets.
fn nn_check(template: &TemplateMesh, seed: u64) -> Result<(bool, String)> {
    let uv = template.coarse_uv();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    let trials = 20;
    for trial in 0..trials {
        let n = rng.random_range(1..4000);
        let uvs: Vec<[f64; 2]> = (0..n).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
        let points = LiftedPointSet {
            points: vec![Point3::zeros(); n],
            uvs,
            part_id: None,
        };
        let eps = [0.002, 0.01, 0.05][trial % 3];
        let a = match_points(&points, &uv, None, eps, Search::Grid)?;
        let b = match_points(&points, &uv, None, eps, Search::BruteForce)?;
        if a != b {
            mismatches += 1;
        }
    }
    Ok((mismatches == 0, format!("{trials} random point sets, {mismatches} mismatches")))
}

/// Exhaustive ray cast over every triangle, same visibility definition.
fn visibility_oracle(cam: &[Point3], triangles: &[[usize; 3]], intr: &Intrinsics, delta_rel: f64) -> Vec<bool> {
    let normals = vertex_normals(cam, triangles);
    cam.iter()
        .zip(&normals)
        .map(|(p, n)| {
            if p.z <= NEAR_PLANE || n.dot(&(-p)) <= 0.0 {
                return false;
            }
            let (x, y) = intr.project(p);
            if intr.pixel_of(x, y).is_none() {
                return false;
            }
            let limit = 1.0 - delta_rel;
            !triangles.iter().any(|t| {
                intersect_ray_triangle(&Point3::zeros(), p, &cam[t[0]], &cam[t[1]], &cam[t[2]])
                    .is_some_and(|h| h > 0.0 && h < limit)
            })
        })
        .collect()
}

fn visibility_check(template: &TemplateMesh, builtin: bool, seed: u64) -> Result<(bool, String)> {
    let intr = Intrinsics::default();
    let opts = VisibilityOptions::default();
    let mut meshes = vec![template.vertices_full.clone()];
    if builtin {
        meshes.extend(toy::toy_pose_sequence(3, seed).iter().map(toy::toy_pose_vertices));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut differ, mut total, mut visible) = (0, 0, 0);
    for verts in &meshes {
        for _ in 0..2 {
            let pose = CameraPose::orbit(2.5, rng.random_range(0.0..std::f64::consts::TAU));
            let fast = visible_vertices(verts, &template.triangles, &pose, &intr, opts);
            let cam: Vec<Point3> = verts.iter().map(|v| pose.to_camera(v)).collect();
            let slow = visibility_oracle(&cam, &template.triangles, &intr, opts.delta_rel);
            differ += fast.iter().zip(&slow).filter(|(a, b)| a != b).count();
            total += fast.len();
            visible += slow.iter().filter(|&&v| v).count();
        }
    }
    Ok((
        differ == 0,
        format!("{total} vertex tests ({visible} visible), {differ} disagreements"),
    ))
}

fn grad_check(seed: u64) -> Result<(bool, String)> {
    let r = gradient_check(seed, 1e-5)?;
    Ok((
        r.worst_rel < 1e-4,
        format!("{} parameters, worst relative error {:.2e} at {}", r.checked, r.worst_rel, r.worst_at),
    ))
}

pub fn run(template_dir: Option<&Path>, report: Option<&Path>, seed: u64) -> Result<u8> {
    let template = match template_dir {
        Some(d) => load_template(d)?,
        None => toy::toy_template(),
    };
    let builtin = template_dir.is_none();
    let checks = vec![
        timed("uv nearest neighbour", || nn_check(&template, seed)),
        timed("visibility ray cast", || visibility_check(&template, builtin, seed)),
        timed("gradients", || grad_check(seed)),
    ];
    for c in &checks {
        println!(
            "{} {:<22} {:>6.2}s  {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.seconds,
            c.detail
        );
    }
    let r = Report {
        template_hash: template.content_hash(),
        seed,
        passed: checks.iter().all(|c| c.passed),
        checks,
    };
    if let Some(p) = report {
        let text = serde_json::to_string_pretty(&r).expect("report serializes") + "\n";
        std::fs::write(p, text).map_err(|e| meshrecover_core::Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?;
    }
    Ok(if r.passed { 0 } else { 1 })
}
