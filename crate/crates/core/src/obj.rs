//! Minimal Wavefront OBJ reader/writer for triangle meshes with per-vertex UVs.
//!
//! Only `v`, `vt` and triangular `f` records are interpreted. Every other
//! record (normals, groups, materials, comments) is skipped on read.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObjMesh {
    pub positions: Vec<Vector3<f64>>,
    /// Texture coordinates in file order; may be empty.
    pub uvs: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    /// Texture index per triangle corner when the faces carried `v/vt` pairs.
    pub uv_triangles: Option<Vec<[usize; 3]>>,
}

impl ObjMesh {
    pub fn parse(text: &str) -> Result<Self> {
        let mut mesh = ObjMesh::default();
        let mut uv_tris: Vec<[usize; 3]> = Vec::new();
        let mut faces_with_uv = 0usize;

        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let mut it = content.split_whitespace();
            let tag = it.next().unwrap_or("");
            let err = |msg: String| Error::Obj { line, msg };
            match tag {
                "v" => {
                    let xyz = parse_floats::<3>(&mut it).map_err(err)?;
                    mesh.positions.push(Vector3::new(xyz[0], xyz[1], xyz[2]));
                }
                "vt" => {
                    let uv = parse_floats::<2>(&mut it).map_err(err)?;
                    mesh.uvs.push(uv);
                }
                "f" => {
                    let corners: Vec<&str> = it.collect();
                    if corners.len() != 3 {
                        return Err(err(format!(
                            "only triangles are supported, face has {} corners",
                            corners.len()
                        )));
                    }
                    let mut tri = [0usize; 3];
                    let mut uvt = [0usize; 3];
                    let mut has_uv = 0;
                    for (k, c) in corners.iter().enumerate() {
                        let mut parts = c.split('/');
                        let v = parts.next().unwrap_or("");
                        tri[k] = resolve_index(v, mesh.positions.len()).map_err(err)?;
                        if let Some(t) = parts.next().filter(|s| !s.is_empty()) {
                            uvt[k] = resolve_index(t, mesh.uvs.len()).map_err(err)?;
                            has_uv += 1;
                        }
                    }
                    match has_uv {
                        0 => {}
                        3 => faces_with_uv += 1,
                        _ => return Err(err("face mixes corners with and without uv".into())),
                    }
                    mesh.triangles.push(tri);
                    uv_tris.push(uvt);
                }
                _ => {}
            }
        }
        if faces_with_uv > 0 {
            if faces_with_uv != mesh.triangles.len() {
                return Err(Error::Obj {
                    line: 0,
                    msg: "some faces carry uv indices and some do not".into(),
                });
            }
            mesh.uv_triangles = Some(uv_tris);
        }
        Ok(mesh)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Resolves UVs to one coordinate per position.
    ///
    /// Accepts either faces whose `vt` index equals the `v` index, or files
    /// with exactly one `vt` per `v` and no face-level uv indices.
    pub fn per_vertex_uv(&self) -> std::result::Result<Vec<[f64; 2]>, String> {
        if self.uvs.is_empty() {
            return Err("file has no vt records".into());
        }
        let n = self.positions.len();
        match &self.uv_triangles {
            None if self.uvs.len() == n => Ok(self.uvs.clone()),
            None => Err(format!("{} vt records for {} vertices", self.uvs.len(), n)),
            Some(uvt) => {
                let mut out: Vec<Option<[f64; 2]>> = vec![None; n];
                for (tri, tuv) in self.triangles.iter().zip(uvt) {
                    for k in 0..3 {
                        // Out-of-range positions are reported by template validation.
                        if tri[k] >= n {
                            continue;
                        }
                        let uv = *self
                            .uvs
                            .get(tuv[k])
                            .ok_or_else(|| format!("uv index {} out of range", tuv[k] + 1))?;
                        match out[tri[k]] {
                            None => out[tri[k]] = Some(uv),
                            Some(prev) if prev == uv => {}
                            Some(_) => {
                                return Err(format!(
                                    "vertex {} has more than one uv (seam split not supported)",
                                    tri[k]
                                ))
                            }
                        }
                    }
                }
                out.into_iter()
                    .enumerate()
                    .map(|(i, uv)| uv.ok_or_else(|| format!("vertex {i} has no uv")))
                    .collect()
            }
        }
    }

    pub fn to_obj_string(&self) -> String {
        let mut s = String::new();
        for p in &self.positions {
            let _ = writeln!(s, "v {} {} {}", p.x, p.y, p.z);
        }
        for uv in &self.uvs {
            let _ = writeln!(s, "vt {} {}", uv[0], uv[1]);
        }
        let per_vertex = !self.uvs.is_empty() && self.uvs.len() == self.positions.len();
        for t in &self.triangles {
            if per_vertex {
                let _ = writeln!(
                    s,
                    "f {0}/{0} {1}/{1} {2}/{2}",
                    t[0] + 1,
                    t[1] + 1,
                    t[2] + 1
                );
            } else {
                let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
            }
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_obj_string()).map_err(|e| Error::io(path, e))
    }
}

fn parse_floats<'a, const K: usize>(
    it: &mut impl Iterator<Item = &'a str>,
) -> std::result::Result<[f64; K], String> {
    let mut out = [0.0; K];
    for slot in out.iter_mut() {
        let tok = it.next().ok_or_else(|| format!("expected {K} numbers"))?;
        *slot = tok
            .parse::<f64>()
            .map_err(|_| format!("'{tok}' is not a number"))?;
    }
    Ok(out)
}

/// OBJ indices are 1-based; negative values count back from the end.
fn resolve_index(tok: &str, count: usize) -> std::result::Result<usize, String> {
    let i: i64 = tok
        .parse()
        .map_err(|_| format!("'{tok}' is not an index"))?;
    let idx = if i > 0 {
        i - 1
    } else if i < 0 {
        count as i64 + i
    } else {
        return Err("index 0 is invalid in OBJ".into());
    };
    if idx < 0 {
        return Err(format!("index {i} out of range"));
    }
    // Forward references are checked later against the final vertex count.
    Ok(idx as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    const QUAD: &str = "\
# two triangles
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
vt 0 0
vt 1 0
vt 1 1
vt 0 1
f 1/1 2/2 3/3
f 1/1 3/3 4/4
";

    #[test]
    fn parses_per_vertex_uv() {
        let m = ObjMesh::parse(QUAD).unwrap();
        assert_eq!(m.positions.len(), 4);
        assert_eq!(m.triangles, vec![[0, 1, 2], [0, 2, 3]]);
        assert_eq!(m.per_vertex_uv().unwrap()[2], [1.0, 1.0]);
    }

    #[test]
    fn write_then_parse_is_stable() {
        let m = ObjMesh::parse(QUAD).unwrap();
        let again = ObjMesh::parse(&m.to_obj_string()).unwrap();
        assert_eq!(again.positions, m.positions);
        assert_eq!(again.triangles, m.triangles);
        assert_eq!(again.per_vertex_uv(), m.per_vertex_uv());
    }

    #[test]
    fn missing_vt_is_reported() {
        let m = ObjMesh::parse("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
        assert!(m.per_vertex_uv().is_err());
    }

    #[test]
    fn quads_are_rejected_with_line_number() {
        match ObjMesh::parse("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf 1 2 3 4\n") {
            Err(Error::Obj { line, .. }) => assert_eq!(line, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn negative_indices_resolve_relative_to_end() {
        let m = ObjMesh::parse("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n").unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2]]);
    }
}
