//! Template body mesh and its resolution-change operators.
//!
//! A [`TemplateMesh`] carries the full-resolution rest mesh with a single-chart
//! UV atlas, a row-stochastic `downsample` matrix (N x F) producing the coarse
//! working mesh, a learnable `upsample` matrix (F x N) and a joint regressor
//! (J x N) acting on coarse vertices.
//!
//! On disk a template is a directory:
//!
//! ```text
//! mesh.obj          full-resolution mesh, one `vt` per `v`
//! downsample.mat    rank-2 tensor N x F
//! regressor.mat     rank-2 tensor J x N
//! upsample.mat      optional rank-2 tensor F x N (pseudoinverse of downsample if absent)
//! meta.json         {"n_full", "n_coarse", "n_joints", "units", "joint_names", "uv_periodic_u"}
//! ```

use std::collections::HashSet;
use std::path::Path;

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result, TemplateError};
use crate::obj::ObjMesh;
use crate::tensor_file::Tensor;

pub type Point3 = Vector3<f64>;

const ROW_SUM_TOL: f64 = 1e-6;

/// Vertices of the coarse working mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseMesh {
    pub vertices: Vec<Point3>,
}

impl CoarseMesh {
    pub fn new(vertices: Vec<Point3>) -> Self {
        CoarseMesh { vertices }
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.vertices.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TemplateMeta {
    pub n_full: usize,
    pub n_coarse: usize,
    pub n_joints: usize,
    pub units: String,
    #[serde(default)]
    pub joint_names: Vec<String>,
    /// The atlas wraps around in `u` (cylindrical or spherical unwrap).
    #[serde(default)]
    pub uv_periodic_u: bool,
    /// Optional body-part id per coarse vertex, used to restrict UV matching.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coarse_part_id: Option<Vec<u8>>,
}

#[derive(Debug, Clone)]
pub struct TemplateMesh {
    pub vertices_full: Vec<Point3>,
    pub triangles: Vec<[usize; 3]>,
    /// Per full-resolution vertex.
    pub uv: Vec<[f64; 2]>,
    /// N x F, rows sum to one.
    pub downsample: DMatrix<f64>,
    /// F x N.
    pub upsample: DMatrix<f64>,
    /// J x N, rows sum to one.
    pub joint_regressor: DMatrix<f64>,
    pub joint_names: Vec<String>,
    pub units: String,
    pub uv_periodic_u: bool,
    pub coarse_parts: Option<Vec<u8>>,
    /// Full vertex carrying the largest downsample weight of each coarse vertex.
    coarse_rep: Vec<usize>,
}

impl TemplateMesh {
    /// Builds and validates a template. The upsample matrix defaults to the
    /// Moore-Penrose pseudoinverse of `downsample`.
    pub fn new(
        vertices_full: Vec<Point3>,
        triangles: Vec<[usize; 3]>,
        uv: Vec<[f64; 2]>,
        downsample: DMatrix<f64>,
        joint_regressor: DMatrix<f64>,
        upsample: Option<DMatrix<f64>>,
    ) -> std::result::Result<Self, TemplateError> {
        validate_geometry(&vertices_full, &triangles, &uv)?;
        let n_full = vertices_full.len();
        if downsample.ncols() != n_full {
            return Err(TemplateError::Shape {
                what: "downsample",
                expected: format!("N x {n_full}"),
                got: format!("{} x {}", downsample.nrows(), downsample.ncols()),
            });
        }
        check_stochastic("downsample", &downsample)?;
        let n = downsample.nrows();
        if joint_regressor.ncols() != n {
            return Err(TemplateError::Shape {
                what: "joint regressor",
                expected: format!("J x {n}"),
                got: format!("{} x {}", joint_regressor.nrows(), joint_regressor.ncols()),
            });
        }
        check_row_sums("joint regressor", &joint_regressor)?;

        let coarse_rep: Vec<usize> = (0..n)
            .map(|i| {
                let row = downsample.row(i);
                let mut best = 0;
                for j in 1..row.len() {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect();
        let mut seen = std::collections::HashMap::new();
        for (i, &r) in coarse_rep.iter().enumerate() {
            let key = (uv[r][0].to_bits(), uv[r][1].to_bits());
            if let Some(&prev) = seen.get(&key) {
                return Err(TemplateError::DuplicateCoarseUv(prev, i));
            }
            seen.insert(key, i);
        }

        let upsample = match upsample {
            Some(u) => {
                if u.nrows() != n_full || u.ncols() != n {
                    return Err(TemplateError::Shape {
                        what: "upsample",
                        expected: format!("{n_full} x {n}"),
                        got: format!("{} x {}", u.nrows(), u.ncols()),
                    });
                }
                u
            }
            None => pseudo_inverse(&downsample),
        };

        Ok(TemplateMesh {
            vertices_full,
            triangles,
            uv,
            downsample,
            upsample,
            joint_regressor,
            joint_names: Vec::new(),
            units: "meters".into(),
            uv_periodic_u: false,
            coarse_parts: None,
            coarse_rep,
        })
    }

    pub fn n_full(&self) -> usize {
        self.vertices_full.len()
    }

    /// Coarse vertex count N.
    pub fn n_coarse(&self) -> usize {
        self.downsample.nrows()
    }

    pub fn n_joints(&self) -> usize {
        self.joint_regressor.nrows()
    }

    /// Full-resolution vertex that anchors each coarse vertex on the surface.
    pub fn coarse_representatives(&self) -> &[usize] {
        &self.coarse_rep
    }

    /// UV coordinate of every coarse vertex.
    pub fn coarse_uv(&self) -> Vec<[f64; 2]> {
        self.coarse_rep.iter().map(|&r| self.uv[r]).collect()
    }

    /// Coarse rest pose, `downsample · vertices_full`.
    pub fn coarse_rest(&self) -> CoarseMesh {
        self.downsample(&self.vertices_full)
            .expect("template rest pose matches its own downsample map")
    }

    pub fn downsample(&self, full: &[Point3]) -> Result<CoarseMesh> {
        if full.len() != self.n_full() {
            return Err(Error::dim("downsample input vertices", self.n_full(), full.len()));
        }
        Ok(CoarseMesh::new(apply(&self.downsample, full)))
    }

    pub fn upsample(&self, coarse: &CoarseMesh) -> Result<Vec<Point3>> {
        upsample_with(&self.upsample, coarse)
    }

    pub fn regress_joints(&self, coarse: &CoarseMesh) -> Result<Vec<Point3>> {
        if coarse.len() != self.n_coarse() {
            return Err(Error::dim("joint regressor input vertices", self.n_coarse(), coarse.len()));
        }
        Ok(apply(&self.joint_regressor, &coarse.vertices))
    }

    /// Coarse vertex neighbourhoods: two coarse vertices are adjacent when
    /// their downsample rows share a full-resolution vertex.
    pub fn coarse_adjacency(&self) -> Vec<Vec<usize>> {
        let n = self.n_coarse();
        let mut owners: Vec<Vec<usize>> = vec![Vec::new(); self.n_full()];
        for i in 0..n {
            for (j, &w) in self.downsample.row(i).iter().enumerate() {
                if w != 0.0 {
                    owners[j].push(i);
                }
            }
        }
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for list in &owners {
            for &a in list {
                for &b in list {
                    if a != b {
                        adj[a].push(b);
                    }
                }
            }
        }
        for a in adj.iter_mut() {
            a.sort_unstable();
            a.dedup();
        }
        adj
    }

    pub fn render_options(&self) -> crate::camera::RenderOptions {
        crate::camera::RenderOptions {
            wrap_u: self.uv_periodic_u,
        }
    }

    pub fn mean_edge_length(&self) -> f64 {
        mean_edge_length(&self.vertices_full, &self.triangles)
    }

    /// SHA-256 over every array of the template, used to bind checkpoints.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.vertices_full {
            for x in v.iter() {
                h.update(x.to_le_bytes());
            }
        }
        for t in &self.triangles {
            for &i in t {
                h.update((i as u64).to_le_bytes());
            }
        }
        for uv in &self.uv {
            h.update(uv[0].to_le_bytes());
            h.update(uv[1].to_le_bytes());
        }
        for m in [&self.downsample, &self.joint_regressor] {
            h.update((m.nrows() as u64).to_le_bytes());
            for x in m.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn meta(&self) -> TemplateMeta {
        TemplateMeta {
            n_full: self.n_full(),
            n_coarse: self.n_coarse(),
            n_joints: self.n_joints(),
            units: self.units.clone(),
            joint_names: self.joint_names.clone(),
            uv_periodic_u: self.uv_periodic_u,
            coarse_part_id: self.coarse_parts.clone(),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let obj = ObjMesh {
            positions: self.vertices_full.clone(),
            uvs: self.uv.clone(),
            triangles: self.triangles.clone(),
            uv_triangles: None,
        };
        obj.write(dir.join("mesh.obj"))?;
        matrix_tensor(&self.downsample)?.write(dir.join("downsample.mat"))?;
        matrix_tensor(&self.joint_regressor)?.write(dir.join("regressor.mat"))?;
        let meta = serde_json::to_string_pretty(&self.meta()).expect("meta serializes");
        let path = dir.join("meta.json");
        std::fs::write(&path, meta).map_err(|e| Error::io(path, e))
    }

    /// Writes the current upsample matrix next to the template.
    pub fn save_upsample(&self, dir: impl AsRef<Path>) -> Result<()> {
        matrix_tensor(&self.upsample)?.write(dir.as_ref().join("upsample.mat"))
    }
}

/// Loads a template directory and validates every invariant.
pub fn load_template(dir: impl AsRef<Path>) -> Result<TemplateMesh> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    let meta_text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: TemplateMeta = serde_json::from_str(&meta_text)
        .map_err(|e| TemplateError::Meta(e.to_string()))?;

    let obj = ObjMesh::read(dir.join("mesh.obj"))?;
    let uv = obj.per_vertex_uv().map_err(TemplateError::MissingUv)?;
    let down = tensor_matrix(&Tensor::read(dir.join("downsample.mat"))?, "downsample")?;
    let reg = tensor_matrix(&Tensor::read(dir.join("regressor.mat"))?, "joint regressor")?;
    let up_path = dir.join("upsample.mat");
    let up = if up_path.exists() {
        Some(tensor_matrix(&Tensor::read(&up_path)?, "upsample")?)
    } else {
        None
    };

    let check = |what: &'static str, expected: usize, got: usize| {
        if expected == got {
            Ok(())
        } else {
            Err(TemplateError::Meta(format!(
                "{what} is {got} but meta.json declares {expected}"
            )))
        }
    };
    check("full vertex count", meta.n_full, obj.positions.len())?;
    check("coarse vertex count", meta.n_coarse, down.nrows())?;
    check("joint count", meta.n_joints, reg.nrows())?;

    let mut t = TemplateMesh::new(obj.positions, obj.triangles, uv, down, reg, up)?;
    t.joint_names = meta.joint_names;
    t.units = meta.units;
    t.uv_periodic_u = meta.uv_periodic_u;
    if let Some(p) = &meta.coarse_part_id {
        check("coarse part id count", t.n_coarse(), p.len())?;
    }
    t.coarse_parts = meta.coarse_part_id;
    Ok(t)
}

/// `params · coarse` for an arbitrary F x N upsampling matrix.
pub fn upsample_with(params: &DMatrix<f64>, coarse: &CoarseMesh) -> Result<Vec<Point3>> {
    if coarse.len() != params.ncols() {
        return Err(Error::dim("upsample input vertices", params.ncols(), coarse.len()));
    }
    Ok(apply(params, &coarse.vertices))
}

/// Row-major matrix applied to a list of points.
pub fn apply(m: &DMatrix<f64>, pts: &[Point3]) -> Vec<Point3> {
    debug_assert_eq!(m.ncols(), pts.len());
    (0..m.nrows())
        .map(|r| {
            let mut acc = Point3::zeros();
            for (c, p) in pts.iter().enumerate() {
                let w = m[(r, c)];
                if w != 0.0 {
                    acc += p * w;
                }
            }
            acc
        })
        .collect()
}

pub fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone()
        .pseudo_inverse(1e-12)
        .expect("non-negative epsilon never fails")
}

pub fn mean_edge_length(vertices: &[Point3], triangles: &[[usize; 3]]) -> f64 {
    let mut edges = HashSet::new();
    for t in triangles {
        for k in 0..3 {
            let (a, b) = (t[k], t[(k + 1) % 3]);
            edges.insert((a.min(b), a.max(b)));
        }
    }
    if edges.is_empty() {
        return 0.0;
    }
    edges
        .iter()
        .map(|&(a, b)| (vertices[a] - vertices[b]).norm())
        .sum::<f64>()
        / edges.len() as f64
}

pub fn matrix_tensor(m: &DMatrix<f64>) -> Result<Tensor> {
    let mut data = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            data.push(m[(r, c)] as f32);
        }
    }
    Tensor::from_f32(vec![m.nrows(), m.ncols()], data)
}

fn tensor_matrix(t: &Tensor, what: &'static str) -> std::result::Result<DMatrix<f64>, TemplateError> {
    if t.rank() != 2 {
        return Err(TemplateError::Shape {
            what,
            expected: "rank 2".into(),
            got: format!("rank {}", t.rank()),
        });
    }
    Ok(DMatrix::from_row_slice(t.dims[0], t.dims[1], &t.to_f64()))
}

fn validate_geometry(
    vertices: &[Point3],
    triangles: &[[usize; 3]],
    uv: &[[f64; 2]],
) -> std::result::Result<(), TemplateError> {
    let n = vertices.len();
    if uv.len() != n {
        return Err(TemplateError::MissingUv(format!(
            "{} uv coordinates for {n} vertices",
            uv.len()
        )));
    }
    for (i, c) in uv.iter().enumerate() {
        if !(0.0..=1.0).contains(&c[0]) || !(0.0..=1.0).contains(&c[1]) {
            return Err(TemplateError::UvOutOfRange {
                vertex: i,
                u: c[0],
                v: c[1],
            });
        }
    }
    for (ti, t) in triangles.iter().enumerate() {
        for &i in t {
            if i >= n {
                return Err(TemplateError::IndexOutOfBounds {
                    triangle: ti,
                    index: i,
                    count: n,
                });
            }
        }
    }
    let components = count_components(n, triangles);
    if components != 1 {
        return Err(TemplateError::Disconnected(components));
    }
    Ok(())
}

fn count_components(n: usize, triangles: &[[usize; 3]]) -> usize {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for t in triangles {
        for k in 1..3 {
            let a = find(&mut parent, t[0]);
            let b = find(&mut parent, t[k]);
            if a != b {
                parent[a] = b;
            }
        }
    }
    (0..n).filter(|&i| find(&mut parent, i) == i).count()
}

fn check_stochastic(matrix: &'static str, m: &DMatrix<f64>) -> std::result::Result<(), TemplateError> {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if m[(r, c)] < 0.0 {
                return Err(TemplateError::NegativeWeight { matrix, row: r, col: c });
            }
        }
    }
    check_row_sums(matrix, m)
}

fn check_row_sums(matrix: &'static str, m: &DMatrix<f64>) -> std::result::Result<(), TemplateError> {
    for r in 0..m.nrows() {
        let sum: f64 = m.row(r).iter().sum();
        if !sum.is_finite() || (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(TemplateError::NonStochasticRow { matrix, row: r, sum });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy;

    fn two_vertex_template() -> TemplateMesh {
        // A degenerate "mesh": one triangle with a repeated vertex keeps it connected.
        TemplateMesh::new(
            vec![Point3::zeros(), Point3::new(2.0, 0.0, 0.0)],
            vec![[0, 1, 1]],
            vec![[0.1, 0.1], [0.9, 0.9]],
            DMatrix::from_row_slice(1, 2, &[0.5, 0.5]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
            None,
        )
        .unwrap()
    }

    #[test]
    fn midpoint_downsample() {
        let t = two_vertex_template();
        let c = t.downsample(&t.vertices_full).unwrap();
        assert_eq!(c.vertices, vec![Point3::new(1.0, 0.0, 0.0)]);
    }

    #[test]
    fn identity_downsample_leaves_vertices() {
        let t = toy::octahedron_template();
        let c = t.downsample(&t.vertices_full).unwrap();
        assert_eq!(c.vertices, t.vertices_full);
        let up = t.upsample(&c).unwrap();
        for (a, b) in up.iter().zip(&t.vertices_full) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn origin_is_fixed() {
        let t = toy::toy_template();
        let zeros = vec![Point3::zeros(); t.n_full()];
        let c = t.downsample(&zeros).unwrap();
        assert!(c.vertices.iter().all(|v| *v == Point3::zeros()));
        let up = t.upsample(&CoarseMesh::new(vec![Point3::zeros(); t.n_coarse()])).unwrap();
        assert!(up.iter().all(|v| *v == Point3::zeros()));
    }

    #[test]
    fn downsample_rejects_wrong_count() {
        let t = toy::toy_template();
        match t.downsample(&t.vertices_full[1..]) {
            Err(Error::Dimension { expected, got, .. }) => {
                assert_eq!(expected, t.n_full());
                assert_eq!(got, t.n_full() - 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn pseudoinverse_upsample_recovers_rest_pose() {
        let t = toy::toy_template();
        let up = t.upsample(&t.coarse_rest()).unwrap();
        let mean_err: f64 = up
            .iter()
            .zip(&t.vertices_full)
            .map(|(a, b)| (a - b).norm())
            .sum::<f64>()
            / up.len() as f64;
        assert!(mean_err < 0.05 * t.mean_edge_length(), "mean error {mean_err}");
    }

    #[test]
    fn downsample_after_upsample_is_identity() {
        let t = toy::toy_template();
        let rest = t.coarse_rest();
        let again = t.downsample(&t.upsample(&rest).unwrap()).unwrap();
        for (a, b) in again.vertices.iter().zip(&rest.vertices) {
            assert!((a - b).norm() <= 1e-4 * b.norm().max(1e-3));
        }
    }

    #[test]
    fn regressor_joint_cases() {
        let t = toy::toy_template();
        let p = Point3::new(0.3, -1.2, 2.0);
        let all_p = CoarseMesh::new(vec![p; t.n_coarse()]);
        // Regressor weights are f32 values, so rows sum to 1 within ~1e-7.
        for j in t.regress_joints(&all_p).unwrap() {
            assert!((j - p).norm() < 1e-6 * p.norm());
        }

        let n = t.n_coarse();
        let rest = t.coarse_rest();
        let mut reg = DMatrix::zeros(2, n);
        reg[(0, 7)] = 1.0;
        for c in 0..n {
            reg[(1, c)] = 1.0 / n as f64;
        }
        let joints = apply(&reg, &rest.vertices);
        assert_eq!(joints[0], rest.vertices[7]);
        let mut centroid = Point3::zeros();
        for v in &rest.vertices {
            centroid += v;
        }
        centroid /= n as f64;
        assert!((joints[1] - centroid).norm() < 1e-12);
    }

    #[test]
    fn joints_are_translation_equivariant() {
        let t = toy::toy_template();
        let rest = t.coarse_rest();
        let shift = Point3::new(0.25, -0.5, 3.0);
        let moved = CoarseMesh::new(rest.vertices.iter().map(|v| v + shift).collect());
        let a = t.regress_joints(&rest).unwrap();
        let b = t.regress_joints(&moved).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x + shift - y).norm() < 1e-6 * shift.norm());
        }
    }

    #[test]
    fn operators_are_linear() {
        let t = toy::toy_template();
        let a = toy::toy_pose_vertices(&toy::ToyPose::rest());
        let mut pose = toy::ToyPose::rest();
        pose.arm_raise = [0.8, -0.2];
        let b = toy::toy_pose_vertices(&pose);
        let (s1, s2) = (0.7, -1.3);
        let mix: Vec<Point3> = a.iter().zip(&b).map(|(x, y)| x * s1 + y * s2).collect();
        let lhs = t.downsample(&mix).unwrap();
        let da = t.downsample(&a).unwrap();
        let db = t.downsample(&b).unwrap();
        for ((l, x), y) in lhs.vertices.iter().zip(&da.vertices).zip(&db.vertices) {
            let r = x * s1 + y * s2;
            assert!((l - r).norm() <= 1e-6 * r.norm().max(1.0));
        }
        let ua = t.upsample(&da).unwrap();
        let ub = t.upsample(&db).unwrap();
        let ul = t.upsample(&lhs).unwrap();
        for ((l, x), y) in ul.iter().zip(&ua).zip(&ub) {
            let r = x * s1 + y * s2;
            assert!((l - r).norm() <= 1e-6 * r.norm().max(1.0));
        }
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = toy::toy_template();
        t.save(dir.path()).unwrap();
        let back = load_template(dir.path()).unwrap();
        assert_eq!(back.n_full(), t.n_full());
        assert_eq!(back.n_coarse(), t.n_coarse());
        assert_eq!(back.triangles, t.triangles);
        assert_eq!(back.joint_names, t.joint_names);
        for (a, b) in back.vertices_full.iter().zip(&t.vertices_full) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    fn expect_template_err(dir: &Path) -> TemplateError {
        match load_template(dir) {
            Err(Error::Template(e)) => e,
            other => panic!("expected template error, got {other:?}"),
        }
    }

    #[test]
    fn uv_out_of_range_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        toy::octahedron_template().save(dir.path()).unwrap();
        let path = dir.path().join("mesh.obj");
        let text = std::fs::read_to_string(&path).unwrap();
        let first_vt = text.find("vt ").unwrap();
        let end = first_vt + text[first_vt..].find('\n').unwrap();
        let patched = format!("{}vt 1.5 0.5{}", &text[..first_vt], &text[end..]);
        std::fs::write(&path, patched).unwrap();
        let e = expect_template_err(dir.path());
        assert!(matches!(e, TemplateError::UvOutOfRange { vertex: 0, .. }), "{e}");
        assert!(e.to_string().contains("uv out of range"));
    }

    #[test]
    fn triangle_index_equal_to_count_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        toy::octahedron_template().save(dir.path()).unwrap();
        let path = dir.path().join("mesh.obj");
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, format!("{text}f 1/1 2/2 7/6\n")).unwrap();
        let e = expect_template_err(dir.path());
        assert!(matches!(e, TemplateError::IndexOutOfBounds { index: 6, count: 6, .. }), "{e}");
        assert!(e.to_string().contains("index out of bounds"));
    }

    #[test]
    fn missing_uv_channel_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        toy::octahedron_template().save(dir.path()).unwrap();
        let path = dir.path().join("mesh.obj");
        let text = std::fs::read_to_string(&path).unwrap();
        let stripped: String = text
            .lines()
            .filter(|l| !l.starts_with("vt "))
            .map(|l| {
                if l.starts_with("f ") {
                    l.split_whitespace()
                        .map(|c| c.split('/').next().unwrap())
                        .collect::<Vec<_>>()
                        .join(" ")
                } else {
                    l.to_string()
                }
            })
            .map(|l| l + "\n")
            .collect();
        std::fs::write(&path, stripped).unwrap();
        assert!(matches!(expect_template_err(dir.path()), TemplateError::MissingUv(_)));
    }

    #[test]
    fn non_stochastic_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let t = toy::octahedron_template();
        t.save(dir.path()).unwrap();
        let mut bad = t.downsample.clone();
        bad[(2, 2)] = 0.9;
        matrix_tensor(&bad)
            .unwrap()
            .write(dir.path().join("downsample.mat"))
            .unwrap();
        assert!(matches!(
            expect_template_err(dir.path()),
            TemplateError::NonStochasticRow { matrix: "downsample", row: 2, .. }
        ));
    }
}
