//! Depth + UV frame to partial mesh: lift body pixels to 3D, then give every
//! coarse template vertex the point whose UV is nearest to the vertex's UV,
//! masking vertices whose nearest UV distance is not below `eps`.

use rayon::prelude::*;

use crate::camera::{lift, DepthUVFrame};
use crate::error::{Error, Result};
use crate::mesh::{Point3, TemplateMesh};
use crate::tensor_file::{Archive, Tensor};

/// Body pixels lifted to camera space, in row-major pixel order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LiftedPointSet {
    pub points: Vec<Point3>,
    pub uvs: Vec<[f64; 2]>,
    pub part_id: Option<Vec<u8>>,
}

impl LiftedPointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn lift_all(frame: &DepthUVFrame) -> LiftedPointSet {
    let mut set = LiftedPointSet {
        part_id: frame.part_id.as_ref().map(|_| Vec::new()),
        ..Default::default()
    };
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            let i = frame.index(x, y);
            if frame.depth[i] <= 0.0 {
                continue;
            }
            set.points.push(lift(frame, x, y).expect("pixel has depth"));
            set.uvs.push(frame.uv[i]);
            if let (Some(dst), Some(src)) = (set.part_id.as_mut(), frame.part_id.as_ref()) {
                dst.push(src[i]);
            }
        }
    }
    set
}

/// Template vertex positions known only where `mask` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialMesh {
    /// Zero where the mask is unset.
    pub vertices_in: Vec<Point3>,
    pub mask: Vec<bool>,
}

impl PartialMesh {
    pub fn new(vertices_in: Vec<Point3>, mask: Vec<bool>) -> Result<Self> {
        if vertices_in.len() != mask.len() {
            return Err(Error::dim("partial mesh mask", vertices_in.len(), mask.len()));
        }
        Ok(PartialMesh { vertices_in, mask })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn visible_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn visible(&self) -> impl Iterator<Item = &Point3> {
        self.vertices_in
            .iter()
            .zip(&self.mask)
            .filter_map(|(v, &m)| m.then_some(v))
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        let flat: Vec<f64> = self.vertices_in.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        a.push("vertices", Tensor::f32_from_f64(vec![self.len(), 3], &flat)?);
        a.push(
            "mask",
            Tensor::from_u8(vec![self.len()], self.mask.iter().map(|&m| m as u8).collect())?,
        );
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let v = a.require("vertices")?;
        let m = a.require("mask")?;
        if v.rank() != 2 || v.dims[1] != 3 {
            return Err(Error::format(0, format!("vertices must be N x 3, got {:?}", v.dims)));
        }
        m.expect_dims("mask", &[v.dims[0]])?;
        let flat = v.to_f64();
        let mask = m
            .as_u8()
            .ok_or_else(|| Error::format(0, "mask must be u8"))?
            .iter()
            .map(|&b| b != 0)
            .collect();
        let vertices_in = flat.chunks_exact(3).map(|c| Point3::new(c[0], c[1], c[2])).collect();
        PartialMesh::new(vertices_in, mask)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub partial: PartialMesh,
    /// Index into the point set of each vertex's UV nearest neighbour.
    pub nearest: Vec<Option<usize>>,
    /// UV distance to that neighbour (infinite when there is none).
    pub distance: Vec<f64>,
    /// The point set was empty; every vertex is masked.
    pub no_points: bool,
}

#[inline]
fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// Smallest `(distance², index)` wins; ties go to the lower point index.
#[inline]
fn better(cand: (f64, usize), best: Option<(f64, usize)>) -> bool {
    match best {
        None => true,
        Some(b) => cand.0 < b.0 || (cand.0 == b.0 && cand.1 < b.1),
    }
}

/// Uniform grid over the unit UV square with points bucketed per cell.
struct UvGrid {
    cell: f64,
    dim: usize,
    /// `starts[c]..starts[c + 1]` indexes `order` for cell `c`.
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl UvGrid {
    const MAX_DIM: usize = 512;

    fn build(uvs: &[[f64; 2]], members: &[usize], cell: f64) -> Self {
        let dim = ((1.0 / cell).ceil() as usize).clamp(1, Self::MAX_DIM);
        let cell = 1.0 / dim as f64;
        let cell_of = |p: [f64; 2]| {
            let cx = ((p[0] / cell) as usize).min(dim - 1);
            let cy = ((p[1] / cell) as usize).min(dim - 1);
            cy * dim + cx
        };
        let mut counts = vec![0usize; dim * dim + 1];
        for &i in members {
            counts[cell_of(uvs[i]) + 1] += 1;
        }
        for c in 1..counts.len() {
            counts[c] += counts[c - 1];
        }
        let starts = counts.clone();
        let mut fill = counts;
        let mut order = vec![0usize; members.len()];
        // Members are ascending, so each cell lists its points in index order.
        for &i in members {
            let c = cell_of(uvs[i]);
            order[fill[c]] = i;
            fill[c] += 1;
        }
        UvGrid {
            cell,
            dim,
            starts,
            order,
        }
    }

    /// Exact nearest neighbour by expanding square rings of cells.
    fn nearest(&self, uvs: &[[f64; 2]], q: [f64; 2]) -> Option<(f64, usize)> {
        if self.order.is_empty() {
            return None;
        }
        let dim = self.dim as isize;
        let qx = ((q[0] / self.cell).floor() as isize).clamp(0, dim - 1);
        let qy = ((q[1] / self.cell).floor() as isize).clamp(0, dim - 1);
        let mut best: Option<(f64, usize)> = None;
        let visit = |cx: isize, cy: isize, best: &mut Option<(f64, usize)>| {
            if cx < 0 || cy < 0 || cx >= dim || cy >= dim {
                return;
            }
            let c = (cy * dim + cx) as usize;
            for &i in &self.order[self.starts[c]..self.starts[c + 1]] {
                let cand = (dist2(uvs[i], q), i);
                if better(cand, *best) {
                    *best = Some(cand);
                }
            }
        };
        // The query may lie outside the unit square; measure the ring bound
        // from its clamped cell, shrunk by its distance to that cell.
        let outside = {
            let cx0 = qx as f64 * self.cell;
            let cy0 = qy as f64 * self.cell;
            let dx = (cx0 - q[0]).max(q[0] - (cx0 + self.cell)).max(0.0);
            let dy = (cy0 - q[1]).max(q[1] - (cy0 + self.cell)).max(0.0);
            (dx * dx + dy * dy).sqrt()
        };
        let mut r: isize = 0;
        loop {
            if r == 0 {
                visit(qx, qy, &mut best);
            } else {
                for dx in -r..=r {
                    visit(qx + dx, qy - r, &mut best);
                    visit(qx + dx, qy + r, &mut best);
                }
                for dy in (-r + 1)..r {
                    visit(qx - r, qy + dy, &mut best);
                    visit(qx + r, qy + dy, &mut best);
                }
            }
            // Every unvisited point is at least this far from the query.
            let reach = r as f64 * self.cell + outside;
            if let Some((d2, _)) = best {
                if reach * reach > d2 {
                    return best;
                }
            }
            if r >= dim {
                return best;
            }
            r += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Search {
    Grid,
    BruteForce,
}

/// Matches lifted points to coarse template vertices by UV nearest neighbour.
///
/// `vertex_parts`, when given together with point part ids, restricts each
/// vertex to points of the same part.
pub fn match_points(
    points: &LiftedPointSet,
    vertex_uv: &[[f64; 2]],
    vertex_parts: Option<&[u8]>,
    eps: f64,
    search: Search,
) -> Result<MatchResult> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let n = vertex_uv.len();
    if let Some(vp) = vertex_parts {
        if vp.len() != n {
            return Err(Error::dim("vertex part ids", n, vp.len()));
        }
    }
    let parts = match (vertex_parts, points.part_id.as_deref()) {
        (Some(v), Some(p)) => Some((v, p)),
        _ => None,
    };

    let nearest: Vec<Option<(f64, usize)>> = match search {
        Search::BruteForce => (0..n)
            .into_par_iter()
            .map(|i| {
                let mut best = None;
                for (j, uv) in points.uvs.iter().enumerate() {
                    if let Some((vp, pp)) = parts {
                        if vp[i] != pp[j] {
                            continue;
                        }
                    }
                    let cand = (dist2(*uv, vertex_uv[i]), j);
                    if better(cand, best) {
                        best = Some(cand);
                    }
                }
                best
            })
            .collect(),
        Search::Grid => {
            let grids: Vec<(Option<u8>, UvGrid)> = match parts {
                None => {
                    let all: Vec<usize> = (0..points.len()).collect();
                    vec![(None, UvGrid::build(&points.uvs, &all, eps))]
                }
                Some((vp, pp)) => {
                    let mut ids: Vec<u8> = vp.to_vec();
                    ids.sort_unstable();
                    ids.dedup();
                    ids.into_iter()
                        .map(|id| {
                            let members: Vec<usize> =
                                (0..points.len()).filter(|&j| pp[j] == id).collect();
                            (Some(id), UvGrid::build(&points.uvs, &members, eps))
                        })
                        .collect()
                }
            };
            (0..n)
                .into_par_iter()
                .map(|i| {
                    let grid = match parts {
                        None => &grids[0].1,
                        Some((vp, _)) => {
                            &grids
                                .iter()
                                .find(|(id, _)| *id == Some(vp[i]))
                                .expect("grid per vertex part")
                                .1
                        }
                    };
                    grid.nearest(&points.uvs, vertex_uv[i])
                })
                .collect()
        }
    };

    let eps2 = eps * eps;
    let mut vertices_in = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    let mut distance = Vec::with_capacity(n);
    let mut idx = Vec::with_capacity(n);
    for nn in nearest {
        match nn {
            Some((d2, j)) => {
                let hit = d2 < eps2;
                vertices_in.push(if hit { points.points[j] } else { Point3::zeros() });
                mask.push(hit);
                distance.push(d2.sqrt());
                idx.push(Some(j));
            }
            None => {
                vertices_in.push(Point3::zeros());
                mask.push(false);
                distance.push(f64::INFINITY);
                idx.push(None);
            }
        }
    }
    Ok(MatchResult {
        partial: PartialMesh { vertices_in, mask },
        nearest: idx,
        distance,
        no_points: points.is_empty(),
    })
}

/// [`match_points`] against a template's coarse vertex UVs, grid-accelerated.
pub fn match_to_template(
    points: &LiftedPointSet,
    template: &TemplateMesh,
    eps: f64,
) -> Result<MatchResult> {
    match_points(
        points,
        &template.coarse_uv(),
        template.coarse_parts.as_deref(),
        eps,
        Search::Grid,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Intrinsics;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn set(uvs: Vec<[f64; 2]>) -> LiftedPointSet {
        LiftedPointSet {
            points: (0..uvs.len()).map(|i| Point3::new(i as f64, 0.0, 1.0)).collect(),
            uvs,
            part_id: None,
        }
    }

    #[test]
    fn empty_frame_lifts_nothing() {
        let f = DepthUVFrame::empty(Intrinsics::default());
        assert_eq!(lift_all(&f).len(), 0);
    }

    #[test]
    fn single_pixel_lifts_to_its_point() {
        let mut f = DepthUVFrame::empty(Intrinsics::default());
        let i = f.index(40, 70);
        f.depth[i] = 2.0;
        f.uv[i] = [0.3, 0.4];
        let s = lift_all(&f);
        assert_eq!(s.len(), 1);
        assert_eq!(s.points[0], lift(&f, 40, 70).unwrap());
        assert_eq!(s.uvs[0], [0.3, 0.4]);
    }

    #[test]
    fn points_on_vertex_uvs_match_everything() {
        let vuv = vec![[0.1, 0.1], [0.5, 0.2], [0.9, 0.95]];
        let pts = set(vuv.iter().rev().cloned().collect());
        let r = match_points(&pts, &vuv, None, 0.01, Search::Grid).unwrap();
        assert!(r.partial.mask.iter().all(|&m| m));
        for (i, v) in r.partial.vertices_in.iter().enumerate() {
            assert_eq!(*v, pts.points[2 - i]);
        }
    }

    #[test]
    fn far_point_matches_nothing() {
        let vuv = vec![[0.1, 0.1], [0.2, 0.2]];
        let r = match_points(&set(vec![[0.9, 0.9]]), &vuv, None, 0.02, Search::Grid).unwrap();
        assert!(r.partial.mask.iter().all(|&m| !m));
        assert_eq!(r.nearest, vec![Some(0), Some(0)]);
    }

    #[test]
    fn no_points_is_flagged() {
        let r = match_points(&set(vec![]), &[[0.5, 0.5]], None, 0.01, Search::Grid).unwrap();
        assert!(r.no_points);
        assert_eq!(r.partial.mask, vec![false]);
    }

    #[test]
    fn non_positive_eps_is_rejected() {
        assert!(match_points(&set(vec![]), &[[0.5, 0.5]], None, 0.0, Search::Grid).is_err());
    }

    #[test]
    fn ties_go_to_lowest_point_index() {
        let vuv = vec![[0.5, 0.5]];
        let pts = set(vec![[0.6, 0.5], [0.4, 0.5], [0.5, 0.6]]);
        for s in [Search::Grid, Search::BruteForce] {
            let r = match_points(&pts, &vuv, None, 0.2, s).unwrap();
            assert_eq!(r.nearest, vec![Some(0)]);
        }
    }

    #[test]
    fn part_ids_restrict_candidates() {
        let vuv = vec![[0.5, 0.5], [0.5, 0.5]];
        let mut pts = set(vec![[0.5, 0.5], [0.505, 0.5]]);
        pts.part_id = Some(vec![1, 2]);
        for s in [Search::Grid, Search::BruteForce] {
            let r = match_points(&pts, &vuv, Some(&[2, 1]), 0.01, s).unwrap();
            assert_eq!(r.nearest, vec![Some(1), Some(0)]);
            assert_eq!(r.partial.mask, vec![true, true]);
        }
    }

    #[test]
    fn grid_matches_brute_force_on_random_instances() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.random_range(1..300);
            let m = rng.random_range(0..2000);
            let eps = rng.random_range(0.001..0.1);
            let vuv: Vec<[f64; 2]> = (0..n).map(|_| [rng.random(), rng.random()]).collect();
            let puv: Vec<[f64; 2]> = (0..m).map(|_| [rng.random(), rng.random()]).collect();
            let pts = set(puv);
            let a = match_points(&pts, &vuv, None, eps, Search::Grid).unwrap();
            let b = match_points(&pts, &vuv, None, eps, Search::BruteForce).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn partial_mesh_archive_round_trip() {
        let p = PartialMesh::new(
            vec![Point3::new(1.0, 2.0, 3.0), Point3::zeros()],
            vec![true, false],
        )
        .unwrap();
        assert_eq!(PartialMesh::from_archive(&p.to_archive().unwrap()).unwrap(), p);
    }

    proptest! {
        #[test]
        fn mask_grows_with_eps(
            seed in any::<u64>(),
            e1 in 0.001f64..0.1,
            e2 in 0.001f64..0.1,
        ) {
            let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let vuv: Vec<[f64; 2]> = (0..50).map(|_| [rng.random(), rng.random()]).collect();
            let pts = set((0..200).map(|_| [rng.random(), rng.random()]).collect());
            let a = match_points(&pts, &vuv, None, lo, Search::Grid).unwrap();
            let b = match_points(&pts, &vuv, None, hi, Search::Grid).unwrap();
            for (x, y) in a.partial.mask.iter().zip(&b.partial.mask) {
                prop_assert!(!x | y);
            }
        }

        #[test]
        fn distinct_distances_are_order_invariant(seed in any::<u64>()) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let vuv: Vec<[f64; 2]> = (0..30).map(|_| [rng.random(), rng.random()]).collect();
            let uvs: Vec<[f64; 2]> = (0..100).map(|_| [rng.random(), rng.random()]).collect();
            let mut perm: Vec<usize> = (0..uvs.len()).collect();
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let a = set(uvs.clone());
            let b = LiftedPointSet {
                points: perm.iter().map(|&j| a.points[j]).collect(),
                uvs: perm.iter().map(|&j| uvs[j]).collect(),
                part_id: None,
            };
            let ra = match_points(&a, &vuv, None, 0.05, Search::Grid).unwrap();
            let rb = match_points(&b, &vuv, None, 0.05, Search::Grid).unwrap();
            prop_assert_eq!(ra.partial, rb.partial);
        }
    }
}
