//! Procedurally generated toy humanoid used in place of a licensed body model.
//!
//! The body is a sphere of directions mapped onto an ellipsoidal torso, with
//! the direction caps around five limb axes (head, arms, legs) extruded into
//! capsules. The coarse mesh is a latitude/longitude
//! lattice over directions (poles on the vertical axis, UV seam at the back);
//! the full mesh is its one-level midpoint subdivision, so every posed full
//! mesh lies exactly in the range of the subdivision operator and the
//! pseudoinverse-initialized upsampler reproduces it.
//!
//! Poses only change limb directions, torso girth, global rotation and scale;
//! vertex identity and connectivity are fixed.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, Rotation3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::mesh::{Point3, TemplateMesh};

pub const RINGS: usize = 12;
pub const SEGMENTS: usize = 12;

pub const JOINT_NAMES: [&str; 12] = [
    "pelvis",
    "spine",
    "neck",
    "head",
    "l_shoulder",
    "r_shoulder",
    "l_hand",
    "r_hand",
    "l_hip",
    "r_hip",
    "l_foot",
    "r_foot",
];

/// Articulation and shape parameters of the toy body. Angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyPose {
    pub yaw: f64,
    pub lean: f64,
    /// Per side (left, right): elevation of the arm above horizontal.
    pub arm_raise: [f64; 2],
    pub arm_forward: [f64; 2],
    /// Per side: angle of the leg away from vertical.
    pub leg_spread: [f64; 2],
    pub leg_forward: [f64; 2],
    pub head_tilt: f64,
    pub scale: f64,
    pub girth: f64,
}

impl ToyPose {
    pub fn rest() -> Self {
        ToyPose {
            yaw: 0.0,
            lean: 0.0,
            arm_raise: [-0.35, -0.35],
            arm_forward: [0.0, 0.0],
            leg_spread: [0.35, 0.35],
            leg_forward: [0.0, 0.0],
            head_tilt: 0.0,
            scale: 1.0,
            girth: 1.0,
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        ToyPose {
            yaw: u(-0.5, 0.5),
            lean: u(-0.15, 0.15),
            arm_raise: [u(-0.9, 0.9), u(-0.9, 0.9)],
            arm_forward: [u(-0.3, 0.9), u(-0.3, 0.9)],
            leg_spread: [u(0.2, 0.6), u(0.2, 0.6)],
            leg_forward: [u(-0.4, 0.4), u(-0.4, 0.4)],
            head_tilt: u(-0.3, 0.3),
            scale: u(0.9, 1.1),
            girth: u(0.85, 1.2),
        }
    }
}

/// A limb extruded from a cap of directions around `axis`.
struct Limb {
    axis: Vector3<f64>,
    /// Angular radius of the direction cap pulled into the limb.
    cap: f64,
    length: f64,
    thickness: f64,
}

fn limbs(p: &ToyPose) -> [Limb; 5] {
    let arm = |side: f64, raise: f64, fwd: f64| Limb {
        axis: Vector3::new(side * raise.cos() * fwd.cos(), raise.sin(), raise.cos() * fwd.sin())
            .normalize(),
        cap: 0.7,
        length: 0.5,
        thickness: 0.055,
    };
    let leg = |side: f64, spread: f64, fwd: f64| Limb {
        axis: Vector3::new(
            side * spread.sin(),
            -spread.cos() * fwd.cos(),
            spread.cos() * fwd.sin(),
        )
        .normalize(),
        cap: 0.5,
        length: 0.7,
        thickness: 0.07,
    };
    [
        Limb {
            axis: Vector3::new(0.0, p.head_tilt.cos(), p.head_tilt.sin()),
            cap: 0.6,
            length: 0.12,
            thickness: 0.1,
        },
        arm(-1.0, p.arm_raise[0], p.arm_forward[0]),
        arm(1.0, p.arm_raise[1], p.arm_forward[1]),
        leg(-1.0, p.leg_spread[0], p.leg_forward[0]),
        leg(1.0, p.leg_spread[1], p.leg_forward[1]),
    ]
}

fn torso_radius(dir: &Vector3<f64>, p: &ToyPose) -> f64 {
    let (a, b, c) = (0.17 * p.girth, 0.3, 0.12 * p.girth);
    1.0 / ((dir.x / a).powi(2) + (dir.y / b).powi(2) + (dir.z / c).powi(2)).sqrt()
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Body surface point for a lattice direction: the torso ellipsoid, with each
/// limb cap warped into a capsule (hemispherical tip, straight tube) that
/// blends back into the torso at the cap boundary.
fn surface_point(dir: &Vector3<f64>, p: &ToyPose, limbs: &[Limb]) -> Point3 {
    const TIP: f64 = 0.35;
    let torso = dir * torso_radius(dir, p);
    let mut acc = Point3::zeros();
    let mut weight = 0.0;
    for l in limbs {
        let psi = dir.dot(&l.axis).clamp(-1.0, 1.0).acos();
        if psi >= l.cap {
            continue;
        }
        let t = psi / l.cap;
        let perp = dir - l.axis * dir.dot(&l.axis);
        let side = if perp.norm() > 1e-12 { perp.normalize() } else { Vector3::zeros() };
        let (h, r) = if t < TIP {
            let beta = t / TIP * std::f64::consts::FRAC_PI_2;
            (l.length + l.thickness * beta.cos(), l.thickness * beta.sin())
        } else {
            (l.length * (1.0 - (t - TIP) / (1.0 - TIP)), l.thickness)
        };
        let base = l.axis * (torso_radius(&l.axis, p) * 0.85);
        let limb = base + l.axis * h + side * r;
        let w = 1.0 - smoothstep((t - 0.55) / 0.45);
        acc += limb * w;
        weight += w;
    }
    if weight > 1.0 {
        acc /= weight;
        weight = 1.0;
    }
    torso * (1.0 - weight) + acc
}

/// Coarse lattice index layout: north pole, `RINGS` rings of `SEGMENTS`, south pole.
pub fn coarse_count() -> usize {
    RINGS * SEGMENTS + 2
}

fn ring_index(i: usize, j: usize) -> usize {
    1 + i * SEGMENTS + (j % SEGMENTS)
}

fn lattice_angles(k: usize) -> Option<(f64, f64)> {
    let n = coarse_count();
    if k == 0 || k == n - 1 {
        return None;
    }
    let i = (k - 1) / SEGMENTS;
    let j = (k - 1) % SEGMENTS;
    let theta = PI * (i + 1) as f64 / (RINGS + 1) as f64;
    let phi = 2.0 * PI * (j as f64 + 0.5) / SEGMENTS as f64;
    Some((theta, phi))
}

fn direction(theta: f64, phi: f64) -> Vector3<f64> {
    Vector3::new(-theta.sin() * phi.sin(), theta.cos(), -theta.sin() * phi.cos())
}

fn coarse_direction(k: usize) -> Vector3<f64> {
    match lattice_angles(k) {
        Some((t, p)) => direction(t, p),
        None if k == 0 => Vector3::new(0.0, 1.0, 0.0),
        None => Vector3::new(0.0, -1.0, 0.0),
    }
}

fn coarse_uv(k: usize) -> [f64; 2] {
    match lattice_angles(k) {
        Some((t, p)) => [p / (2.0 * PI), t / PI],
        None if k == 0 => [0.5, 0.0],
        None => [0.5, 1.0],
    }
}

fn coarse_triangles() -> Vec<[usize; 3]> {
    let south = coarse_count() - 1;
    let mut tris = Vec::new();
    for j in 0..SEGMENTS {
        tris.push([0, ring_index(0, j), ring_index(0, j + 1)]);
    }
    for i in 0..RINGS - 1 {
        for j in 0..SEGMENTS {
            let a = ring_index(i, j);
            let b = ring_index(i, j + 1);
            let c = ring_index(i + 1, j);
            let d = ring_index(i + 1, j + 1);
            tris.push([a, c, d]);
            tris.push([a, d, b]);
        }
    }
    for j in 0..SEGMENTS {
        tris.push([south, ring_index(RINGS - 1, j + 1), ring_index(RINGS - 1, j)]);
    }
    // Orient outward on the unit sphere.
    for t in tris.iter_mut() {
        let (a, b, c) = (coarse_direction(t[0]), coarse_direction(t[1]), coarse_direction(t[2]));
        if (b - a).cross(&(c - a)).dot(&(a + b + c)) < 0.0 {
            t.swap(1, 2);
        }
    }
    tris
}

/// One-level midpoint subdivision of the coarse lattice.
struct Subdivision {
    /// Edge (lo, hi) for every midpoint, in full-index order after the coarse block.
    edges: Vec<(usize, usize)>,
    triangles: Vec<[usize; 3]>,
}

fn subdivision() -> Subdivision {
    let n = coarse_count();
    let coarse = coarse_triangles();
    let mut edge_ids: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for t in &coarse {
        for k in 0..3 {
            let (a, b) = (t[k], t[(k + 1) % 3]);
            edge_ids.entry((a.min(b), a.max(b))).or_insert(0);
        }
    }
    let edges: Vec<(usize, usize)> = edge_ids.keys().copied().collect();
    for (i, e) in edges.iter().enumerate() {
        edge_ids.insert(*e, n + i);
    }
    let mid = |a: usize, b: usize| edge_ids[&(a.min(b), a.max(b))];
    let mut triangles = Vec::with_capacity(coarse.len() * 4);
    for &[a, b, c] in &coarse {
        let (ab, bc, ca) = (mid(a, b), mid(b, c), mid(c, a));
        triangles.push([a, ab, ca]);
        triangles.push([ab, b, bc]);
        triangles.push([ca, bc, c]);
        triangles.push([ab, bc, ca]);
    }
    Subdivision { edges, triangles }
}

fn midpoint_uv(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let v = 0.5 * (a[1] + b[1]);
    let pole = |x: [f64; 2]| x[1] == 0.0 || x[1] == 1.0;
    let u = if pole(a) {
        b[0]
    } else if pole(b) {
        a[0]
    } else if (a[0] - b[0]).abs() > 0.5 {
        // Edge crosses the seam at u = 0 = 1.
        let m = 0.5 * (a[0] + b[0] + 1.0);
        if m > 1.0 {
            m - 1.0
        } else {
            m
        }
    } else {
        0.5 * (a[0] + b[0])
    };
    [u, v]
}

fn coarse_pose_vertices(p: &ToyPose) -> Vec<Point3> {
    let ls = limbs(p);
    let rot = Rotation3::from_axis_angle(&Vector3::y_axis(), p.yaw)
        * Rotation3::from_axis_angle(&Vector3::x_axis(), p.lean);
    (0..coarse_count())
        .map(|k| {
            let d = coarse_direction(k);
            rot * (surface_point(&d, p, &ls) * p.scale)
        })
        .collect()
}

fn subdivide_positions(coarse: &[Point3], sub: &Subdivision) -> Vec<Point3> {
    let mut out = coarse.to_vec();
    out.extend(sub.edges.iter().map(|&(a, b)| (coarse[a] + coarse[b]) * 0.5));
    out
}

/// Full-resolution vertices of the toy body in the given pose.
pub fn toy_pose_vertices(p: &ToyPose) -> Vec<Point3> {
    subdivide_positions(&coarse_pose_vertices(p), &subdivision())
}

/// The bundled toy humanoid template in its rest pose.
pub fn toy_template() -> TemplateMesh {
    let n = coarse_count();
    let sub = subdivision();
    let full = toy_pose_vertices(&ToyPose::rest());
    let f = full.len();

    let mut uv: Vec<[f64; 2]> = (0..n).map(coarse_uv).collect();
    let mids: Vec<[f64; 2]> = sub.edges.iter().map(|&(a, b)| midpoint_uv(uv[a], uv[b])).collect();
    uv.extend(mids);

    // Averaging matrix: transpose of the subdivision operator, rows normalized.
    let mut down = DMatrix::zeros(n, f);
    for i in 0..n {
        down[(i, i)] = 1.0;
    }
    for (e, &(a, b)) in sub.edges.iter().enumerate() {
        down[(a, n + e)] = 0.5;
        down[(b, n + e)] = 0.5;
    }
    for i in 0..n {
        let s: f64 = down.row(i).iter().sum();
        for c in 0..f {
            down[(i, c)] /= s;
        }
    }

    // Template files store matrices as f32; quantize so a saved and
    // reloaded template is identical to this one.
    let down = down.map(|x| x as f32 as f64);
    let coarse_rest: Vec<Point3> = crate::mesh::apply(&down, &full);
    let reg = joint_regressor(&coarse_rest).map(|x| x as f32 as f64);

    let mut t = TemplateMesh::new(full, sub.triangles, uv, down, reg, None)
        .expect("toy template satisfies its invariants");
    t.joint_names = JOINT_NAMES.iter().map(|s| s.to_string()).collect();
    t.uv_periodic_u = true;
    t
}

fn joint_sites() -> [Point3; 12] {
    let p = ToyPose::rest();
    let ls = limbs(&p);
    let along = |l: &Limb, frac: f64| surface_point(&l.axis, &p, &ls) * frac;
    [
        Point3::new(0.0, -0.22, 0.0),
        Point3::new(0.0, 0.05, 0.0),
        Point3::new(0.0, 0.32, 0.0),
        along(&ls[0], 0.8),
        Point3::new(-0.2, 0.1, 0.0),
        Point3::new(0.2, 0.1, 0.0),
        along(&ls[1], 0.85),
        along(&ls[2], 0.85),
        Point3::new(-0.1, -0.3, 0.0),
        Point3::new(0.1, -0.3, 0.0),
        along(&ls[3], 0.85),
        along(&ls[4], 0.85),
    ]
}

/// Each joint is a Gaussian-weighted average of the six coarse rest vertices
/// nearest to a hand-placed site.
fn joint_regressor(coarse_rest: &[Point3]) -> DMatrix<f64> {
    const K: usize = 6;
    const SIGMA: f64 = 0.1;
    let sites = joint_sites();
    let mut reg = DMatrix::zeros(sites.len(), coarse_rest.len());
    for (j, site) in sites.iter().enumerate() {
        let mut by_dist: Vec<(f64, usize)> = coarse_rest
            .iter()
            .enumerate()
            .map(|(i, v)| ((v - site).norm(), i))
            .collect();
        by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let picked = &by_dist[..K];
        let w: Vec<f64> = picked
            .iter()
            .map(|(d, _)| (-d * d / (2.0 * SIGMA * SIGMA)).exp())
            .collect();
        let total: f64 = w.iter().sum();
        for ((_, i), wi) in picked.iter().zip(&w) {
            reg[(j, *i)] = wi / total;
        }
    }
    reg
}

/// A seeded sequence of random toy poses.
pub fn toy_pose_sequence(count: usize, seed: u64) -> Vec<ToyPose> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| ToyPose::random(&mut rng)).collect()
}

/// Six-vertex octahedron with identity coarsening, for gradient checks.
pub fn octahedron_template() -> TemplateMesh {
    let vertices = vec![
        Point3::new(0.0, 1.0, 0.0),
        Point3::new(1.0, 0.0, 0.0),
        Point3::new(0.0, 0.0, 1.0),
        Point3::new(-1.0, 0.0, 0.0),
        Point3::new(0.0, 0.0, -1.0),
        Point3::new(0.0, -1.0, 0.0),
    ];
    let uv = vec![
        [0.5, 0.0],
        [0.375, 0.5],
        [0.625, 0.5],
        [0.875, 0.5],
        [0.125, 0.5],
        [0.5, 1.0],
    ];
    let mut triangles = Vec::new();
    let ring = [1, 2, 3, 4];
    for k in 0..4 {
        let (a, b) = (ring[k], ring[(k + 1) % 4]);
        triangles.push([0, a, b]);
        triangles.push([5, b, a]);
    }
    for t in triangles.iter_mut() {
        let (a, b, c) = (vertices[t[0]], vertices[t[1]], vertices[t[2]]);
        if (b - a).cross(&(c - a)).dot(&(a + b + c)) < 0.0 {
            t.swap(1, 2);
        }
    }
    let mut reg = DMatrix::zeros(3, 6);
    for c in 0..6 {
        reg[(0, c)] = 1.0 / 6.0;
    }
    reg[(1, 0)] = 1.0;
    reg[(2, 1)] = 0.25;
    reg[(2, 2)] = 0.75;
    let mut t = TemplateMesh::new(vertices, triangles, uv, DMatrix::identity(6, 6), reg, None)
        .expect("octahedron satisfies template invariants");
    t.joint_names = vec!["centroid".into(), "top".into(), "side".into()];
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_template_has_expected_size() {
        let t = toy_template();
        assert_eq!(t.n_coarse(), 146);
        assert_eq!(t.n_full(), 146 + 3 * 146 - 6);
        assert_eq!(t.triangles.len(), 4 * (2 * 146 - 4));
        assert_eq!(t.n_joints(), 12);
        assert_eq!(t.coarse_representatives(), &(0..146).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn surface_encloses_positive_volume() {
        let t = toy_template();
        for pose in std::iter::once(ToyPose::rest()).chain(toy_pose_sequence(20, 11)) {
            let v = toy_pose_vertices(&pose);
            let vol: f64 = t
                .triangles
                .iter()
                .map(|tri| v[tri[0]].dot(&v[tri[1]].cross(&v[tri[2]])) / 6.0)
                .sum();
            // Outward winding gives a positive signed volume.
            assert!(vol > 0.01, "volume {vol}");
        }
    }

    #[test]
    fn every_edge_is_shared_by_two_faces() {
        let t = toy_template();
        let mut count: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for tri in &t.triangles {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        assert!(count.values().all(|&c| c == 2));
    }

    #[test]
    fn posed_meshes_are_reproduced_by_upsampling() {
        let t = toy_template();
        for pose in toy_pose_sequence(5, 3) {
            let full = toy_pose_vertices(&pose);
            let up = t.upsample(&t.downsample(&full).unwrap()).unwrap();
            let worst = up
                .iter()
                .zip(&full)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            assert!(worst < 1e-9, "worst {worst}");
        }
    }

    #[test]
    fn body_is_roughly_human_sized() {
        let full = toy_pose_vertices(&ToyPose::rest());
        let (lo, hi) = full.iter().fold((f64::MAX, f64::MIN), |(lo, hi), v| {
            (lo.min(v.y), hi.max(v.y))
        });
        let height = hi - lo;
        assert!((1.2..2.0).contains(&height), "height {height}");
    }
}
