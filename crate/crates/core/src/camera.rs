//! Virtual pinhole depth camera.
//!
//! Camera coordinates follow the usual vision convention: x right, y down,
//! z forward. Pixel `(x, y)` has its centre at continuous image coordinate
//! `(x, y)`, so lifting uses the integer pixel index directly.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Rotation3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Point3;
use crate::tensor_file::{Archive, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Intrinsics {
            fx: 200.0,
            fy: 200.0,
            cx: 128.0,
            cy: 128.0,
            width: 256,
            height: 256,
        }
    }
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::Config("focal lengths must be positive".into()));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::Config("principal point must be finite".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image size must be at least 1x1".into()));
        }
        Ok(())
    }

    /// Continuous pixel coordinates of a camera-space point.
    pub fn project(&self, p: &Point3) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// `K⁻¹ [x, y, 1]ᵀ`: the viewing ray through a pixel, at unit depth.
    pub fn ray(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0)
    }

    /// Nearest pixel to a continuous image coordinate, if inside the image.
    pub fn pixel_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let (px, py) = (x.round(), y.round());
        if px >= 0.0 && py >= 0.0 && (px as usize) < self.width && (py as usize) < self.height {
            Some((px as usize, py as usize))
        } else {
            None
        }
    }
}

/// World-to-camera rigid transform: `p_cam = R p_world + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseJson", into = "PoseJson")]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// JSON form of a pose: row-major rotation and translation.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseJson {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl From<CameraPose> for PoseJson {
    fn from(p: CameraPose) -> Self {
        let r = &p.rotation;
        PoseJson {
            rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl TryFrom<PoseJson> for CameraPose {
    type Error = String;

    fn try_from(j: PoseJson) -> std::result::Result<Self, String> {
        let r = j.rotation;
        CameraPose::new(
            Matrix3::new(
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ),
            Vector3::from(j.translation),
        )
        .map_err(|e| e.to_string())
    }
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = CameraPose {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(ortho <= 1e-6) || !((r.determinant() - 1.0).abs() <= 1e-6) {
            return Err(Error::Config(
                "camera rotation must be orthonormal with determinant +1".into(),
            ));
        }
        if !self.translation.iter().all(|x| x.is_finite()) {
            return Err(Error::Config("camera translation must be finite".into()));
        }
        Ok(())
    }

    /// Camera on a horizontal circle of radius `distance` around the world
    /// origin, looking at it. Azimuth 0 places it on +z (facing the body front).
    pub fn orbit(distance: f64, azimuth: f64) -> Self {
        // Base orientation: world +x -> cam +x, world +y -> cam -y, world +z -> cam -z.
        let base = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
        let yaw = Rotation3::from_axis_angle(&Vector3::y_axis(), azimuth);
        let rotation = base * yaw.matrix().transpose();
        let center = yaw * Vector3::new(0.0, 0.0, distance);
        CameraPose {
            rotation,
            translation: -(rotation * center),
        }
    }

    pub fn frontal(distance: f64) -> Self {
        Self::orbit(distance, 0.0)
    }

    pub fn to_camera(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    pub fn to_world(&self, p: &Point3) -> Point3 {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn center(&self) -> Point3 {
        -(self.rotation.transpose() * self.translation)
    }
}

/// Depth and UV maps of one view. Row-major, `index = y * width + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthUVFrame {
    pub intrinsics: Intrinsics,
    pub pose: Option<CameraPose>,
    /// Camera-space z in meters, 0 where there is no body.
    pub depth: Vec<f64>,
    pub uv: Vec<[f64; 2]>,
    /// Optional body-part chart id per pixel; restricts matching when present.
    pub part_id: Option<Vec<u8>>,
}

impl DepthUVFrame {
    pub fn empty(intrinsics: Intrinsics) -> Self {
        let n = intrinsics.width * intrinsics.height;
        DepthUVFrame {
            intrinsics,
            pose: None,
            depth: vec![0.0; n],
            uv: vec![[0.0, 0.0]; n],
            part_id: None,
        }
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.intrinsics.width + x
    }

    pub fn depth_at(&self, x: usize, y: usize) -> f64 {
        self.depth[self.index(x, y)]
    }

    pub fn covered_pixels(&self) -> usize {
        self.depth.iter().filter(|&&d| d > 0.0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.covered_pixels() == 0
    }

    /// Checks the frame invariants: non-negative finite depth, UV in the unit
    /// square on the body support.
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let n = self.width() * self.height();
        if self.depth.len() != n || self.uv.len() != n {
            return Err(Error::dim("frame pixel count", n, self.depth.len()));
        }
        if let Some(p) = &self.part_id {
            if p.len() != n {
                return Err(Error::dim("part id pixel count", n, p.len()));
            }
        }
        for (i, (&d, uv)) in self.depth.iter().zip(&self.uv).enumerate() {
            if !d.is_finite() || d < 0.0 {
                return Err(if d.is_finite() { Error::format(0, format!("depth at pixel {i} is {d}")) } else { Error::NonFinite(format!("depth at pixel {i}")) });
            }
            if d > 0.0 && !(0.0..=1.0).contains(&uv[0]) | !(0.0..=1.0).contains(&uv[1]) {
                return Err(Error::format(0, format!(
                    "uv at pixel {i} is ({}, {}), outside [0,1]",
                    uv[0], uv[1]
                )));
            }
        }
        Ok(())
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let (w, h) = (self.width(), self.height());
        let mut a = Archive::new();
        a.push("depth", Tensor::f32_from_f64(vec![h, w], &self.depth)?);
        let uv: Vec<f64> = self.uv.iter().flat_map(|c| [c[0], c[1]]).collect();
        a.push("uv", Tensor::f32_from_f64(vec![h, w, 2], &uv)?);
        if let Some(p) = &self.part_id {
            a.push("part_id", Tensor::from_u8(vec![h, w], p.clone())?);
        }
        Ok(a)
    }

    /// Writes `path` (tensor archive) and a JSON sidecar with the camera.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_archive()?.write(path)?;
        let side = FrameSidecar {
            intrinsics: self.intrinsics,
            pose: self.pose,
        };
        let json = serde_json::to_string_pretty(&side).expect("sidecar serializes");
        let side_path = sidecar_path(path);
        std::fs::write(&side_path, json).map_err(|e| Error::io(side_path, e))
    }

    /// Reads a frame written by [`DepthUVFrame::write`], or produced by an
    /// external depth sensor and UV estimator in the same layout.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side_path = sidecar_path(path);
        let text = std::fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
        let side: FrameSidecar = serde_json::from_str(&text)
            .map_err(|e| Error::Format {
                offset: e.column() as u64,
                msg: format!("{}: {e}", side_path.display()),
            })?;
        Self::from_archive(&Archive::read(path)?, side.intrinsics, side.pose)
    }

    pub fn from_archive(a: &Archive, intrinsics: Intrinsics, pose: Option<CameraPose>) -> Result<Self> {
        intrinsics.validate()?;
        let (w, h) = (intrinsics.width, intrinsics.height);
        let depth_t = a.require("depth")?;
        depth_t.expect_dims("depth", &[h, w])?;
        let uv_t = a.require("uv")?;
        uv_t.expect_dims("uv", &[h, w, 2])?;
        let depth = depth_t.to_f64();
        let raw_uv = uv_t.to_f64();
        let uv = depth
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                if d > 0.0 {
                    [raw_uv[2 * i], raw_uv[2 * i + 1]]
                } else {
                    [0.0, 0.0]
                }
            })
            .collect();
        let part_id = match a.get("part_id") {
            Some(t) => {
                t.expect_dims("part_id", &[h, w])?;
                Some(
                    t.as_u8()
                        .ok_or_else(|| Error::format(0, "part_id must be u8"))?
                        .to_vec(),
                )
            }
            None => None,
        };
        let frame = DepthUVFrame {
            intrinsics,
            pose,
            depth,
            uv,
            part_id,
        };
        frame.validate()?;
        Ok(frame)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameSidecar {
    intrinsics: Intrinsics,
    #[serde(default)]
    pose: Option<CameraPose>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Back-projects pixel `(x, y)` to camera space: `D(p) K⁻¹ [x, y, 1]ᵀ`.
pub fn lift(frame: &DepthUVFrame, x: usize, y: usize) -> Result<Point3> {
    if x >= frame.width() || y >= frame.height() {
        return Err(Error::NoBodyAtPixel { x, y });
    }
    let d = frame.depth_at(x, y);
    if d <= 0.0 {
        return Err(Error::NoBodyAtPixel { x, y });
    }
    Ok(frame.intrinsics.ray(x as f64, y as f64) * d)
}

/// Triangle mesh with per-vertex UVs, borrowed for rendering.
#[derive(Debug, Clone, Copy)]
pub struct MeshView<'a> {
    pub vertices: &'a [Point3],
    pub triangles: &'a [[usize; 3]],
    pub uv: &'a [[f64; 2]],
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderOptions {
    /// Treat `u` as periodic when a triangle spans more than half the atlas
    /// width, so faces straddling a cylindrical seam interpolate correctly.
    pub wrap_u: bool,
}


/// Smallest camera-space depth a triangle vertex may have to be rasterized.
pub const NEAR_PLANE: f64 = 1e-6;

/// Z-buffer rasterization of depth and barycentric-interpolated UV.
///
/// Triangles are two-sided; the nearest surface wins. Triangles with a vertex
/// at or behind the near plane are skipped, so a mesh entirely behind the
/// camera yields an all-zero frame (check [`DepthUVFrame::is_empty`]).
pub fn render_depth_uv(
    mesh: MeshView<'_>,
    pose: &CameraPose,
    intr: &Intrinsics,
    opts: RenderOptions,
) -> DepthUVFrame {
    let mut frame = DepthUVFrame::empty(*intr);
    frame.pose = Some(*pose);
    let cam: Vec<Point3> = mesh.vertices.iter().map(|v| pose.to_camera(v)).collect();
    let (w, h) = (intr.width, intr.height);

    for tri in mesh.triangles {
        let p = [cam[tri[0]], cam[tri[1]], cam[tri[2]]];
        if p.iter().any(|v| v.z <= NEAR_PLANE) {
            continue;
        }
        let s: [(f64, f64); 3] = [intr.project(&p[0]), intr.project(&p[1]), intr.project(&p[2])];
        let area = edge(s[0], s[1], s[2]);
        if area == 0.0 {
            continue;
        }
        let normal = (p[1] - p[0]).cross(&(p[2] - p[0]));

        let xmin = s.iter().map(|q| q.0).fold(f64::INFINITY, f64::min).ceil().max(0.0);
        let xmax = s.iter().map(|q| q.0).fold(f64::NEG_INFINITY, f64::max).floor().min((w - 1) as f64);
        let ymin = s.iter().map(|q| q.1).fold(f64::INFINITY, f64::min).ceil().max(0.0);
        let ymax = s.iter().map(|q| q.1).fold(f64::NEG_INFINITY, f64::max).floor().min((h - 1) as f64);
        if xmin > xmax || ymin > ymax {
            continue;
        }

        let mut tuv = [mesh.uv[tri[0]], mesh.uv[tri[1]], mesh.uv[tri[2]]];
        let wrapped = opts.wrap_u && {
            let us = tuv.map(|c| c[0]);
            let span = us.iter().cloned().fold(f64::MIN, f64::max) - us.iter().cloned().fold(f64::MAX, f64::min);
            span > 0.5
        };
        if wrapped {
            for c in tuv.iter_mut() {
                if c[0] < 0.5 {
                    c[0] += 1.0;
                }
            }
        }

        for y in ymin as usize..=ymax as usize {
            for x in xmin as usize..=xmax as usize {
                let q = (x as f64, y as f64);
                let b0 = edge(s[1], s[2], q) / area;
                let b1 = edge(s[2], s[0], q) / area;
                let b2 = edge(s[0], s[1], q) / area;
                if b0 < 0.0 || b1 < 0.0 || b2 < 0.0 {
                    continue;
                }
                // Exact ray/plane depth along the pixel ray (its z component is 1).
                let ray = intr.ray(q.0, q.1);
                let denom = normal.dot(&ray);
                if denom == 0.0 {
                    continue;
                }
                let z = normal.dot(&p[0]) / denom;
                let idx = y * w + x;
                let cur = frame.depth[idx];
                if z <= 0.0 || (cur > 0.0 && z >= cur) {
                    continue;
                }
                // Perspective-correct interpolation: weights b_i / z_i.
                let (w0, w1, w2) = (b0 / p[0].z, b1 / p[1].z, b2 / p[2].z);
                let norm = w0 + w1 + w2;
                let mut u = (w0 * tuv[0][0] + w1 * tuv[1][0] + w2 * tuv[2][0]) / norm;
                let v = (w0 * tuv[0][1] + w1 * tuv[1][1] + w2 * tuv[2][1]) / norm;
                if wrapped && u >= 1.0 {
                    u -= 1.0;
                }
                frame.depth[idx] = z;
                frame.uv[idx] = [u.clamp(0.0, 1.0), v.clamp(0.0, 1.0)];
            }
        }
    }
    frame
}

#[inline]
fn edge(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

/// Ray/triangle intersection (Möller–Trumbore), two-sided.
///
/// Returns the ray parameter `t` of the hit, or `None` for a miss or a
/// degenerate (zero-area) triangle.
pub fn intersect_ray_triangle(
    origin: &Point3,
    dir: &Vector3<f64>,
    a: &Point3,
    b: &Point3,
    c: &Point3,
) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let pvec = dir.cross(&e2);
    let det = e1.dot(&pvec);
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    let inv = 1.0 / det;
    let tvec = origin - a;
    let u = tvec.dot(&pvec) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qvec = tvec.cross(&e1);
    let v = dir.dot(&qvec) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some(e2.dot(&qvec) * inv)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcclusionMode {
    /// Ray to each vertex.
    Vertex,
    /// Ray to each face centroid; a vertex is visible if any incident face is.
    Face,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisibilityOptions {
    /// Occlusion tolerance as a fraction of the target's distance to the camera.
    pub delta_rel: f64,
    pub mode: OcclusionMode,
}

impl Default for VisibilityOptions {
    fn default() -> Self {
        VisibilityOptions {
            delta_rel: 1e-4,
            mode: OcclusionMode::Vertex,
        }
    }
}

/// Area-weighted vertex normals (unnormalized).
pub fn vertex_normals(vertices: &[Point3], triangles: &[[usize; 3]]) -> Vec<Vector3<f64>> {
    let mut n = vec![Vector3::zeros(); vertices.len()];
    for t in triangles {
        let fnorm = (vertices[t[1]] - vertices[t[0]]).cross(&(vertices[t[2]] - vertices[t[0]]));
        for &i in t {
            n[i] += fnorm;
        }
    }
    n
}

/// Screen-space bucket grid over projected triangle bounds.
struct TriangleGrid {
    cell: f64,
    cols: usize,
    rows: usize,
    cells: Vec<Vec<u32>>,
    /// Triangles not fully in front of the camera; tested for every query.
    always: Vec<u32>,
}

impl TriangleGrid {
    const CELL_PX: f64 = 8.0;

    fn build(cam: &[Point3], triangles: &[[usize; 3]], intr: &Intrinsics) -> Self {
        let cell = Self::CELL_PX;
        let cols = (intr.width as f64 / cell).ceil() as usize + 1;
        let rows = (intr.height as f64 / cell).ceil() as usize + 1;
        let mut cells = vec![Vec::new(); cols * rows];
        let mut always = Vec::new();
        for (ti, t) in triangles.iter().enumerate() {
            let p = [cam[t[0]], cam[t[1]], cam[t[2]]];
            if p.iter().any(|v| v.z <= NEAR_PLANE) {
                always.push(ti as u32);
                continue;
            }
            let s = p.map(|v| intr.project(&v));
            let pad = 1e-6;
            let x0 = s.iter().map(|q| q.0).fold(f64::INFINITY, f64::min) - pad;
            let x1 = s.iter().map(|q| q.0).fold(f64::NEG_INFINITY, f64::max) + pad;
            let y0 = s.iter().map(|q| q.1).fold(f64::INFINITY, f64::min) - pad;
            let y1 = s.iter().map(|q| q.1).fold(f64::NEG_INFINITY, f64::max) + pad;
            let (Some((c0, r0)), Some((c1, r1))) = (
                Self::cell_of(x0, y0, cell, cols, rows),
                Self::cell_of(x1, y1, cell, cols, rows),
            ) else {
                continue;
            };
            for r in r0..=r1 {
                for c in c0..=c1 {
                    cells[r * cols + c].push(ti as u32);
                }
            }
        }
        TriangleGrid {
            cell,
            cols,
            rows,
            cells,
            always,
        }
    }

    /// Clamped cell of an image coordinate; `None` only for non-finite input.
    fn cell_of(x: f64, y: f64, cell: f64, cols: usize, rows: usize) -> Option<(usize, usize)> {
        if !x.is_finite() || !y.is_finite() {
            return None;
        }
        // Shift by one cell so coordinates slightly left/up of the image land in cell 0.
        let c = ((x / cell).floor() + 1.0).clamp(0.0, (cols - 1) as f64) as usize;
        let r = ((y / cell).floor() + 1.0).clamp(0.0, (rows - 1) as f64) as usize;
        Some((c, r))
    }

    fn candidates(&self, x: f64, y: f64) -> impl Iterator<Item = u32> + '_ {
        let cell = Self::cell_of(x, y, self.cell, self.cols, self.rows)
            .map(|(c, r)| self.cells[r * self.cols + c].as_slice())
            .unwrap_or(&[]);
        cell.iter().chain(self.always.iter()).copied()
    }
}

/// True if the open segment from the camera centre to `target` (camera
/// space) crosses a triangle more than `delta` meters before the target.
fn occluded(
    target: &Point3,
    delta_rel: f64,
    cam: &[Point3],
    triangles: &[[usize; 3]],
    candidates: impl Iterator<Item = u32>,
) -> bool {
    let origin = Point3::zeros();
    let dist = target.norm();
    let limit = (dist - delta_rel * dist) / dist;
    for ti in candidates {
        let t = &triangles[ti as usize];
        if let Some(hit) = intersect_ray_triangle(&origin, target, &cam[t[0]], &cam[t[1]], &cam[t[2]]) {
            if hit > 0.0 && hit < limit {
                return true;
            }
        }
    }
    false
}

/// Per-vertex visibility by ray casting from the camera centre.
///
/// A vertex is visible iff it is in front of the camera, projects inside the
/// image, faces the camera (area-weighted normal), and no triangle is hit
/// along its viewing ray more than `delta_rel · distance` before it.
pub fn visible_vertices(
    vertices: &[Point3],
    triangles: &[[usize; 3]],
    pose: &CameraPose,
    intr: &Intrinsics,
    opts: VisibilityOptions,
) -> Vec<bool> {
    let cam: Vec<Point3> = vertices.iter().map(|v| pose.to_camera(v)).collect();
    let grid = TriangleGrid::build(&cam, triangles, intr);
    let in_frustum = |p: &Point3| {
        if p.z <= NEAR_PLANE {
            return false;
        }
        let (x, y) = intr.project(p);
        intr.pixel_of(x, y).is_some()
    };
    let ray_clear = |target: &Point3| {
        let (x, y) = intr.project(target);
        !occluded(target, opts.delta_rel, &cam, triangles, grid.candidates(x, y))
    };

    match opts.mode {
        OcclusionMode::Vertex => {
            let normals = vertex_normals(&cam, triangles);
            (0..cam.len())
                .into_par_iter()
                .map(|i| {
                    let p = &cam[i];
                    in_frustum(p) && normals[i].dot(&(-p)) > 0.0 && ray_clear(p)
                })
                .collect()
        }
        OcclusionMode::Face => {
            let face_vis: Vec<bool> = triangles
                .par_iter()
                .map(|t| {
                    let (a, b, c) = (cam[t[0]], cam[t[1]], cam[t[2]]);
                    let centroid = (a + b + c) / 3.0;
                    let n = (b - a).cross(&(c - a));
                    in_frustum(&centroid) && n.dot(&(-centroid)) > 0.0 && ray_clear(&centroid)
                })
                .collect();
            let mut vis = vec![false; cam.len()];
            for (t, &fv) in triangles.iter().zip(&face_vis) {
                if fv {
                    for &i in t {
                        vis[i] = true;
                    }
                }
            }
            for (i, v) in vis.iter_mut().enumerate() {
                *v = *v && in_frustum(&cam[i]);
            }
            vis
        }
    }
}

/// Fast visibility from a rendered depth buffer: a front-facing in-frustum
/// vertex is visible if it is not behind the depth stored at its nearest
/// pixel by more than `tol_rel · z`.
pub fn visible_vertices_zbuffer(
    vertices: &[Point3],
    triangles: &[[usize; 3]],
    pose: &CameraPose,
    frame: &DepthUVFrame,
    tol_rel: f64,
) -> Vec<bool> {
    let intr = &frame.intrinsics;
    let cam: Vec<Point3> = vertices.iter().map(|v| pose.to_camera(v)).collect();
    let normals = vertex_normals(&cam, triangles);
    cam.iter()
        .zip(&normals)
        .map(|(p, n)| {
            if p.z <= NEAR_PLANE || n.dot(&(-p)) <= 0.0 {
                return false;
            }
            let (x, y) = intr.project(p);
            match intr.pixel_of(x, y) {
                None => false,
                Some((px, py)) => {
                    let d = frame.depth_at(px, py);
                    d == 0.0 || p.z <= d + tol_rel * p.z
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn facing_triangle(z: f64, half: f64) -> (Vec<Point3>, Vec<[usize; 3]>, Vec<[f64; 2]>) {
        // Camera-space coordinates with identity pose.
        let v = vec![
            Point3::new(-half, -half, z),
            Point3::new(half, -half, z),
            Point3::new(0.0, half, z),
        ];
        (v, vec![[0, 1, 2]], vec![[0.0, 0.0], [1.0, 0.0], [0.5, 1.0]])
    }

    fn identity_pose() -> CameraPose {
        CameraPose::new(Matrix3::identity(), Vector3::zeros()).unwrap()
    }

    #[test]
    fn principal_point_depth_of_facing_triangle() {
        let (v, t, uv) = facing_triangle(2.0, 1.0);
        let intr = Intrinsics::default();
        let f = render_depth_uv(
            MeshView { vertices: &v, triangles: &t, uv: &uv },
            &identity_pose(),
            &intr,
            RenderOptions::default(),
        );
        let d = f.depth_at(intr.cx as usize, intr.cy as usize);
        assert!((d - 2.0).abs() < 1e-5, "{d}");
    }

    #[test]
    fn nearer_triangle_wins() {
        let (mut v, mut t, mut uv) = facing_triangle(2.0, 1.0);
        let (v2, _, uv2) = facing_triangle(1.0, 0.25);
        v.extend(v2);
        uv.extend(uv2);
        t.push([3, 4, 5]);
        let intr = Intrinsics::default();
        let f = render_depth_uv(
            MeshView { vertices: &v, triangles: &t, uv: &uv },
            &identity_pose(),
            &intr,
            RenderOptions::default(),
        );
        assert!((f.depth_at(128, 128) - 1.0).abs() < 1e-9);
        // Far corner of the big triangle is only covered by the back one.
        assert!((f.depth_at(48, 38) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn mesh_behind_camera_renders_empty() {
        let (v, t, uv) = facing_triangle(-2.0, 1.0);
        let f = render_depth_uv(
            MeshView { vertices: &v, triangles: &t, uv: &uv },
            &identity_pose(),
            &Intrinsics::default(),
            RenderOptions::default(),
        );
        assert!(f.is_empty());
    }

    #[test]
    fn uv_interpolates_perspective_correctly_on_flat_triangle() {
        let (v, t, uv) = facing_triangle(3.0, 1.0);
        let intr = Intrinsics::default();
        let f = render_depth_uv(
            MeshView { vertices: &v, triangles: &t, uv: &uv },
            &identity_pose(),
            &intr,
            RenderOptions::default(),
        );
        // Pixel at the principal point lies at camera-space (0, 0, 3).
        let c = f.uv[f.index(128, 128)];
        // Barycentric of (0,0) in the triangle: u = 0.5, v = 0.5.
        assert!((c[0] - 0.5).abs() < 1e-9 && (c[1] - 0.5).abs() < 1e-9, "{c:?}");
    }

    #[test]
    fn lift_principal_point_and_one_focal_off_axis() {
        let intr = Intrinsics::default();
        let mut f = DepthUVFrame::empty(intr);
        let i = f.index(128, 128);
        f.depth[i] = 3.5;
        assert_eq!(lift(&f, 128, 128).unwrap(), Point3::new(0.0, 0.0, 3.5));

        let mut wide = Intrinsics::default();
        wide.width = 400;
        let mut g = DepthUVFrame::empty(wide);
        let k = g.index(328, 128);
        g.depth[k] = 1.0;
        assert_eq!(lift(&g, 328, 128).unwrap(), Point3::new(1.0, 0.0, 1.0));
        assert!(matches!(lift(&g, 0, 0), Err(Error::NoBodyAtPixel { x: 0, y: 0 })));
    }

    #[test]
    fn orbit_pose_is_a_rotation_looking_at_origin() {
        for az in [-0.5, 0.0, 0.3, 1.0] {
            let pose = CameraPose::orbit(2.5, az);
            pose.validate().unwrap();
            let o = pose.to_camera(&Point3::zeros());
            assert!(o.x.abs() < 1e-12 && o.y.abs() < 1e-12 && (o.z - 2.5).abs() < 1e-12);
            assert!((pose.center().norm() - 2.5).abs() < 1e-12);
        }
        // World up maps to image up (negative camera y).
        let pose = CameraPose::frontal(2.5);
        let up = pose.to_camera(&Point3::new(0.0, 1.0, 0.0)) - pose.to_camera(&Point3::zeros());
        assert!(up.y < 0.0);
    }

    #[test]
    fn invalid_rotation_is_rejected() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(CameraPose::new(m, Vector3::zeros()).is_err());
    }

    #[test]
    fn single_front_triangle_all_visible() {
        let (v, t, _) = facing_triangle(2.0, 0.5);
        // Wind so the normal faces the camera (towards -z).
        let t = vec![[t[0][0], t[0][2], t[0][1]]];
        let vis = visible_vertices(&v, &t, &identity_pose(), &Intrinsics::default(), VisibilityOptions::default());
        assert_eq!(vis, vec![true, true, true]);
    }

    fn quad(z: f64, half: f64, base: usize) -> (Vec<Point3>, Vec<[usize; 3]>) {
        let v = vec![
            Point3::new(-half, -half, z),
            Point3::new(half, -half, z),
            Point3::new(half, half, z),
            Point3::new(-half, half, z),
        ];
        // Normal towards -z (the camera).
        let t = vec![[base, base + 2, base + 1], [base, base + 3, base + 2]];
        (v, t)
    }

    #[test]
    fn fully_covered_back_quad_is_hidden() {
        let (mut v, mut t) = quad(1.5, 0.6, 0);
        let (v2, t2) = quad(2.5, 0.4, 4);
        v.extend(v2);
        t.extend(t2);
        for mode in [OcclusionMode::Vertex, OcclusionMode::Face] {
            let vis = visible_vertices(
                &v,
                &t,
                &identity_pose(),
                &Intrinsics::default(),
                VisibilityOptions { mode, ..Default::default() },
            );
            assert_eq!(vis, vec![true, true, true, true, false, false, false, false], "{mode:?}");
        }
    }

    #[test]
    fn back_facing_and_out_of_frustum_vertices_are_hidden() {
        let (v, t, _) = facing_triangle(2.0, 0.5);
        // Default winding of facing_triangle points its normal away (+z).
        let vis = visible_vertices(&v, &t, &identity_pose(), &Intrinsics::default(), VisibilityOptions::default());
        assert_eq!(vis, vec![false, false, false]);

        let far = vec![
            Point3::new(10.0, 0.0, 2.0),
            Point3::new(10.0, 1.0, 2.0),
            Point3::new(11.0, 0.0, 2.0),
        ];
        let vis = visible_vertices(&far, &[[0, 1, 2]], &identity_pose(), &Intrinsics::default(), VisibilityOptions::default());
        assert!(vis.iter().all(|v| !v));
    }

    #[test]
    fn frame_round_trips_through_archive_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let (v, t, uv) = facing_triangle(2.0, 1.0);
        let f = render_depth_uv(
            MeshView { vertices: &v, triangles: &t, uv: &uv },
            &identity_pose(),
            &Intrinsics::default(),
            RenderOptions::default(),
        );
        assert!(!f.is_empty());
        let path = dir.path().join("f.tens");
        f.write(&path).unwrap();
        let back = DepthUVFrame::read(&path).unwrap();
        assert_eq!(back.intrinsics, f.intrinsics);
        assert_eq!(back.pose, f.pose);
        for (a, b) in back.depth.iter().zip(&f.depth) {
            assert!((a - b).abs() <= 1e-6 * b.abs());
        }
    }
}
