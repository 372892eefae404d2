//! Error metrics, evaluation reports, the noise sweep and the
//! optimization baseline.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::data::{noisy_visible, sample_rng, TrainingSample};
use crate::error::{Error, Result};
use crate::mae::MaeModel;
use crate::matching::PartialMesh;
use crate::mesh::{CoarseMesh, Point3, TemplateMesh};
use crate::obj::ObjMesh;

/// Mean Euclidean vertex distance in millimeters, without alignment.
pub fn pve_mm(pred: &[Point3], gt: &[Point3]) -> Result<f64> {
    mean_distance_mm("vertices", pred, gt)
}

/// Mean Euclidean joint distance in millimeters.
pub fn mpjpe_mm(pred: &[Point3], gt: &[Point3]) -> Result<f64> {
    mean_distance_mm("joints", pred, gt)
}

fn mean_distance_mm(what: &'static str, a: &[Point3], b: &[Point3]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(what, b.len(), a.len()));
    }
    if a.is_empty() {
        return Err(Error::DegenerateInput(format!("no {what} to compare")));
    }
    let total: f64 = a.iter().zip(b).map(|(p, q)| (p - q).norm()).sum();
    Ok(1000.0 * total / a.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub id: usize,
    pub pve_mm: f64,
    pub mpjpe_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pve_mm: f64,
    pub mpjpe_mm: f64,
    /// "full" or "coarse".
    pub resolution: String,
    pub per_sample: Vec<SampleEval>,
    #[serde(default)]
    pub config_hash: Option<String>,
    pub checkpoint_hash: String,
}

impl EvalReport {
    fn from_samples(per_sample: Vec<SampleEval>, full: bool, checkpoint_hash: String) -> Self {
        let n = per_sample.len().max(1) as f64;
        EvalReport {
            pve_mm: per_sample.iter().map(|s| s.pve_mm).sum::<f64>() / n,
            mpjpe_mm: per_sample.iter().map(|s| s.mpjpe_mm).sum::<f64>() / n,
            resolution: if full { "full" } else { "coarse" }.into(),
            per_sample,
            config_hash: None,
            checkpoint_hash,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Prediction for one partial input: coarse vertices, and full-resolution
/// vertices when requested.
pub struct Prediction {
    pub coarse: CoarseMesh,
    pub full: Option<Vec<Point3>>,
}

pub fn predict(model: &MaeModel, input: &PartialMesh, full: bool) -> Result<Prediction> {
    let coarse = model.forward(input)?;
    let full = if full { Some(model.upsample(&coarse)?) } else { None };
    Ok(Prediction { coarse, full })
}

fn score(
    template: &TemplateMesh,
    sample: &TrainingSample,
    pred: &Prediction,
    id: usize,
) -> Result<SampleEval> {
    let pve = match &pred.full {
        Some(f) => pve_mm(f, &sample.target_full)?,
        None => pve_mm(&pred.coarse.vertices, &sample.target_vertices.vertices)?,
    };
    let joints = template.regress_joints(&pred.coarse)?;
    Ok(SampleEval {
        id,
        pve_mm: pve,
        mpjpe_mm: mpjpe_mm(&joints, &sample.target_joints)?,
    })
}

fn check_nonempty(data: &[TrainingSample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::DegenerateInput("empty evaluation set".into()));
    }
    Ok(())
}

/// Evaluates the model on every sample's stored input.
pub fn evaluate(
    model: &MaeModel,
    template: &TemplateMesh,
    data: &[TrainingSample],
    full_resolution: bool,
) -> Result<EvalReport> {
    evaluate_inputs(model, template, data, full_resolution, |_, s| Ok(s.input.clone()))
}

fn evaluate_inputs(
    model: &MaeModel,
    template: &TemplateMesh,
    data: &[TrainingSample],
    full_resolution: bool,
    input: impl Fn(usize, &TrainingSample) -> Result<PartialMesh> + Sync,
) -> Result<EvalReport> {
    check_nonempty(data)?;
    model.check_template(template)?;
    let per_sample = data
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let pred = predict(model, &input(i, s)?, full_resolution)?;
            score(template, s, &pred, i)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_samples(per_sample, full_resolution, model.content_hash()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePoint {
    pub std_mm: f64,
    pub pve_mm: f64,
    pub mpjpe_mm: f64,
}

/// Evaluates the model with i.i.d. Gaussian noise of each standard deviation
/// (per axis, millimeters) added to the clean visible vertices. Sample `i`
/// draws its noise from stream `i` of `seed`, so every level sees the same
/// unit draws scaled by its std.
pub fn noise_sweep(
    model: &MaeModel,
    template: &TemplateMesh,
    data: &[TrainingSample],
    stds_mm: &[f64],
    seed: u64,
    full_resolution: bool,
) -> Result<Vec<NoisePoint>> {
    if stds_mm.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::Config("noise stds must be non-negative".into()));
    }
    stds_mm
        .iter()
        .map(|&std| {
            let sigma = std / 1000.0;
            let r = evaluate_inputs(model, template, data, full_resolution, |i, s| {
                let clean = &s.target_vertices.vertices;
                let v = noisy_visible(clean, &s.input.mask, sigma * sigma, &mut sample_rng(seed, i as u64))?;
                PartialMesh::new(v, s.input.mask.clone())
            })?;
            Ok(NoisePoint {
                std_mm: std,
                pve_mm: r.pve_mm,
                mpjpe_mm: r.mpjpe_mm,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineOptions {
    pub iterations: usize,
    pub lr: f64,
    pub lambda_lap: f64,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        BaselineOptions {
            iterations: 500,
            lr: 1e-2,
            lambda_lap: 0.1,
        }
    }
}

/// Optimization baseline: free coarse vertex positions fitted to the visible
/// inputs with an L1 data term and a uniform-Laplacian penalty on the
/// displacement from the rest pose.
///
/// The rest pose is mapped into the input frame with `pose` (when given) and
/// translated so that its visible vertices share the input's visible
/// centroid. Adam with a cosine-decayed step size runs from there.
pub fn baseline_fit(
    partial: &PartialMesh,
    template: &TemplateMesh,
    pose: Option<&CameraPose>,
    opts: &BaselineOptions,
) -> Result<CoarseMesh> {
    let n = template.n_coarse();
    if partial.len() != n {
        return Err(Error::dim("partial mesh vertices", n, partial.len()));
    }
    let mut rest: Vec<Point3> = template.coarse_rest().vertices;
    if let Some(p) = pose {
        rest.iter_mut().for_each(|v| *v = p.to_camera(v));
    }
    let visible: Vec<usize> = (0..n).filter(|&i| partial.mask[i]).collect();
    if !visible.is_empty() {
        let mut shift = nalgebra::Vector3::zeros();
        for &i in &visible {
            shift += partial.vertices_in[i] - rest[i];
        }
        shift /= visible.len() as f64;
        rest.iter_mut().for_each(|v| *v += shift);
    }

    let adj = template.coarse_adjacency();
    let lap = |x: &[Point3], out: &mut [nalgebra::Vector3<f64>]| {
        for i in 0..n {
            let d = x[i] - rest[i];
            let mut acc = d;
            if !adj[i].is_empty() {
                let w = 1.0 / adj[i].len() as f64;
                for &j in &adj[i] {
                    acc -= (x[j] - rest[j]) * w;
                }
            }
            out[i] = acc;
        }
    };

    let mut x = rest.clone();
    let mut m = vec![nalgebra::Vector3::zeros(); n];
    let mut v = vec![nalgebra::Vector3::zeros(); n];
    let mut lx = vec![nalgebra::Vector3::zeros(); n];
    let mut g = vec![nalgebra::Vector3::zeros(); n];
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let nv = visible.len().max(1) as f64;
    let iters = opts.iterations;
    for it in 0..iters {
        g.iter_mut().for_each(|gi| *gi = nalgebra::Vector3::zeros());
        for &i in &visible {
            let r = x[i] - partial.vertices_in[i];
            g[i] += r.map(crate::train::sign) / nv;
        }
        // d/dx of lambda/n * sum_i |L(x - rest)_i|^2
        lap(&x, &mut lx);
        let c = 2.0 * opts.lambda_lap / n as f64;
        for i in 0..n {
            g[i] += lx[i] * c;
            if !adj[i].is_empty() {
                let w = 1.0 / adj[i].len() as f64;
                for &j in &adj[i] {
                    g[j] -= lx[i] * (c * w);
                }
            }
        }
        let lr = if iters > 1 {
            0.5 * opts.lr * (1.0 + (std::f64::consts::PI * it as f64 / (iters - 1) as f64).cos())
        } else {
            opts.lr
        };
        let t = (it + 1) as i32;
        for i in 0..n {
            m[i] = m[i] * b1 + g[i] * (1.0 - b1);
            v[i] = v[i] * b2 + g[i].component_mul(&g[i]) * (1.0 - b2);
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            x[i] -= mh.zip_map(&vh, |a, b| a / (b.sqrt() + eps)) * lr;
        }
    }
    Ok(CoarseMesh::new(x))
}

/// Baseline counterpart of [`evaluate`], at coarse resolution.
pub fn evaluate_baseline(
    template: &TemplateMesh,
    data: &[TrainingSample],
    pose: Option<&CameraPose>,
    opts: &BaselineOptions,
) -> Result<EvalReport> {
    check_nonempty(data)?;
    let per_sample = data
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let coarse = baseline_fit(&s.input, template, pose, opts)?;
            score(template, s, &Prediction { coarse, full: None }, i)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_samples(per_sample, false, "baseline".into()))
}

/// Writes `gt`, `input` (visible vertices only) and `pred` OBJ files for one
/// sample into `dir` with the given stem.
pub fn dump_triple(
    dir: impl AsRef<Path>,
    stem: &str,
    template: &TemplateMesh,
    sample: &TrainingSample,
    pred: &Prediction,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let full_mesh = |v: Vec<Point3>| ObjMesh {
        positions: v,
        triangles: template.triangles.clone(),
        ..Default::default()
    };
    let coarse_points = |v: Vec<Point3>| ObjMesh {
        positions: v,
        ..Default::default()
    };
    let gt = full_mesh(sample.target_full.clone());
    let input = coarse_points(sample.input.visible().cloned().collect());
    let out = match &pred.full {
        Some(f) => full_mesh(f.clone()),
        None => coarse_points(pred.coarse.vertices.clone()),
    };
    gt.write(dir.join(format!("{stem}_gt.obj")))?;
    input.write(dir.join(format!("{stem}_input.obj")))?;
    out.write(dir.join(format!("{stem}_pred.obj")))
}
