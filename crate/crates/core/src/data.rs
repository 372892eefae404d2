//! Training pairs from ground-truth meshes seen by the virtual camera.
//!
//! All sample geometry is expressed in the camera frame of the view that
//! produced it, which is also the frame lifted depth points live in at
//! inference time.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::visible_vertices;
use crate::config::{CameraConfig, DataConfig};
use crate::error::{Error, Result};
use crate::matching::PartialMesh;
use crate::mesh::{CoarseMesh, Point3, TemplateMesh};
use crate::obj::ObjMesh;
use crate::tensor_file::{Archive, Tensor};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub input: PartialMesh,
    pub target_vertices: CoarseMesh,
    pub target_joints: Vec<Point3>,
    /// Full-resolution ground truth, used for PVE and the upsampler loss.
    pub target_full: Vec<Point3>,
}

/// Per-sample provenance written to the data manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Index in the dataset; `None` for rejected samples.
    pub id: Option<usize>,
    pub source: String,
    /// RNG stream of the sample under the run seed.
    pub stream: u64,
    pub azimuth_deg: f64,
    pub camera_visible: usize,
    pub visible: usize,
    pub accepted: bool,
}

/// Generator RNG for sample `stream` under `seed`; streams are independent
/// so samples can be produced in any order.
pub fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Renders `full_world` with the configured camera, keeps camera-visible
/// coarse vertices, drops a further `extra_mask_rate` share of them and adds
/// Gaussian noise to the survivors.
///
/// Visibility is ray cast on the full-resolution surface and read at each
/// coarse vertex's representative full vertex.
pub fn make_sample(
    template: &TemplateMesh,
    full_world: &[Point3],
    camera: &CameraConfig,
    train: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(TrainingSample, SampleRecord)> {
    if full_world.len() != template.n_full() {
        return Err(Error::dim("ground-truth mesh vertices", template.n_full(), full_world.len()));
    }
    let azimuth_deg = if camera.azimuth_jitter_deg > 0.0 {
        rng.random_range(-camera.azimuth_jitter_deg..=camera.azimuth_jitter_deg)
    } else {
        0.0
    };
    let pose = camera.pose(azimuth_deg.to_radians());
    let vis_full = visible_vertices(
        full_world,
        &template.triangles,
        &pose,
        &camera.intrinsics,
        camera.visibility,
    );
    let camera_vis: Vec<bool> = template
        .coarse_representatives()
        .iter()
        .map(|&r| vis_full[r])
        .collect();
    let camera_visible = camera_vis.iter().filter(|&&v| v).count();

    let full_cam: Vec<Point3> = full_world.iter().map(|v| pose.to_camera(v)).collect();
    let target_vertices = template.downsample(&full_cam)?;
    let target_joints = template.regress_joints(&target_vertices)?;

    let mut record = SampleRecord {
        id: None,
        source: String::new(),
        stream: 0,
        azimuth_deg,
        camera_visible,
        visible: 0,
        accepted: false,
    };

    let mut mask = None;
    for _ in 0..train.max_mask_retries.max(1) {
        let m: Vec<bool> = camera_vis
            .iter()
            .map(|&v| v && rng.random::<f64>() >= train.extra_mask_rate)
            .collect();
        if m.iter().filter(|&&v| v).count() >= 2 {
            mask = Some(m);
            break;
        }
    }
    let Some(mask) = mask else {
        return Err(Error::DegenerateInput(format!(
            "fewer than 2 visible vertices after extra masking ({camera_visible} camera-visible)"
        )));
    };

    let vertices_in = noisy_visible(&target_vertices.vertices, &mask, train.noise_variance, rng)?;
    record.visible = mask.iter().filter(|&&v| v).count();
    record.accepted = true;
    Ok((
        TrainingSample {
            input: PartialMesh::new(vertices_in, mask)?,
            target_vertices,
            target_joints,
            target_full: full_cam,
        },
        record,
    ))
}

/// Visible points plus i.i.d. Gaussian noise of the given per-coordinate
/// variance; masked slots become zero.
pub fn noisy_visible(
    points: &[Point3],
    mask: &[bool],
    variance: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Point3>> {
    let noise = Normal::new(0.0, variance.sqrt()).map_err(|e| Error::Config(format!("noise: {e}")))?;
    Ok(points
        .iter()
        .zip(mask)
        .map(|(v, &m)| {
            if !m {
                Point3::zeros()
            } else if variance > 0.0 {
                v + Point3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng))
            } else {
                *v
            }
        })
        .collect())
}

/// Generates `samples_per_mesh` samples per mesh. Sample `k` of mesh `i`
/// uses RNG stream `i * samples_per_mesh + k`; rejected samples are recorded
/// in the manifest and left out of the dataset.
pub fn generate(
    template: &TemplateMesh,
    meshes: &[(String, Vec<Point3>)],
    camera: &CameraConfig,
    train: &TrainConfig,
    data: &DataConfig,
) -> Result<(Dataset, Vec<SampleRecord>)> {
    if meshes.is_empty() {
        return Err(Error::DegenerateInput("no meshes".into()));
    }
    let per = data.samples_per_mesh as u64;
    let jobs: Vec<(usize, u64)> = (0..meshes.len())
        .flat_map(|i| (0..per).map(move |k| (i, i as u64 * per + k)))
        .collect();
    let results: Vec<Result<(Option<TrainingSample>, SampleRecord)>> = jobs
        .par_iter()
        .map(|&(i, stream)| {
            let mut rng = sample_rng(data.seed, stream);
            let (name, verts) = &meshes[i];
            match make_sample(template, verts, camera, train, &mut rng) {
                Ok((s, mut rec)) => {
                    rec.source = name.clone();
                    rec.stream = stream;
                    Ok((Some(s), rec))
                }
                Err(Error::DegenerateInput(_)) => Ok((
                    None,
                    SampleRecord {
                        id: None,
                        source: name.clone(),
                        stream,
                        azimuth_deg: 0.0,
                        camera_visible: 0,
                        visible: 0,
                        accepted: false,
                    },
                )),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut samples = Vec::new();
    let mut records = Vec::new();
    for r in results {
        let (s, mut rec) = r?;
        if let Some(s) = s {
            rec.id = Some(samples.len());
            samples.push(s);
        }
        records.push(rec);
    }
    if samples.is_empty() {
        return Err(Error::DegenerateInput("every sample was rejected".into()));
    }
    Ok((Dataset { samples }, records))
}

/// Reads every `*.obj` in `dir` (sorted by file name) as a ground-truth mesh
/// in world coordinates. Only vertex positions are used; meshes at coarse
/// resolution are upsampled with the template's operator.
pub fn read_mesh_dir(dir: impl AsRef<Path>, template: &TemplateMesh) -> Result<Vec<(String, Vec<Point3>)>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("obj")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::DegenerateInput(format!("no meshes in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let obj = ObjMesh::read(p)?;
            let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let verts = if obj.positions.len() == template.n_full() {
                obj.positions
            } else if obj.positions.len() == template.n_coarse() {
                template.upsample(&CoarseMesh::new(obj.positions))?
            } else {
                return Err(Error::Config(format!(
                    "{name}: {} vertices, template has {} full / {} coarse",
                    obj.positions.len(),
                    template.n_full(),
                    template.n_coarse()
                )));
            };
            Ok((name, verts))
        })
        .collect()
}

/// Writes meshes as `{index:04}.obj` files with the template topology.
pub fn write_mesh_dir(dir: impl AsRef<Path>, template: &TemplateMesh, meshes: &[Vec<Point3>]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, m) in meshes.iter().enumerate() {
        ObjMesh {
            positions: m.clone(),
            uvs: template.uv.clone(),
            triangles: template.triangles.clone(),
            uv_triangles: None,
        }
        .write(dir.join(format!("{i:04}.obj")))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<TrainingSample>,
}

pub const SAMPLES_FILE: &str = "samples.tens";

fn flat(points: impl Iterator<Item = Point3>) -> Vec<f64> {
    points.flat_map(|v| [v.x, v.y, v.z]).collect()
}

fn points(data: &[f64]) -> Vec<Point3> {
    data.chunks_exact(3).map(|c| Point3::new(c[0], c[1], c[2])).collect()
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks the samples into one archive; positions are stored as f64 so a
    /// reload reproduces them bit for bit.
    pub fn to_archive(&self) -> Result<Archive> {
        let s = self.len();
        let first = self
            .samples
            .first()
            .ok_or_else(|| Error::DegenerateInput("empty dataset".into()))?;
        let (n, j, f) = (first.input.len(), first.target_joints.len(), first.target_full.len());
        for x in &self.samples {
            if x.input.len() != n || x.target_joints.len() != j || x.target_full.len() != f {
                return Err(Error::Config("samples have inconsistent sizes".into()));
            }
        }
        let mut a = Archive::new();
        a.push(
            "inputs",
            Tensor::from_f64(vec![s, n, 3], flat(self.samples.iter().flat_map(|x| x.input.vertices_in.clone())))?,
        );
        a.push(
            "masks",
            Tensor::from_u8(
                vec![s, n],
                self.samples.iter().flat_map(|x| x.input.mask.iter().map(|&m| m as u8)).collect(),
            )?,
        );
        a.push(
            "targets",
            Tensor::from_f64(vec![s, n, 3], flat(self.samples.iter().flat_map(|x| x.target_vertices.vertices.clone())))?,
        );
        a.push(
            "joints",
            Tensor::from_f64(vec![s, j, 3], flat(self.samples.iter().flat_map(|x| x.target_joints.clone())))?,
        );
        a.push(
            "full",
            Tensor::from_f64(vec![s, f, 3], flat(self.samples.iter().flat_map(|x| x.target_full.clone())))?,
        );
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let inputs = a.require("inputs")?;
        if inputs.rank() != 3 || inputs.dims[2] != 3 {
            return Err(Error::format(0, format!("inputs must be S x N x 3, got {:?}", inputs.dims)));
        }
        let (s, n) = (inputs.dims[0], inputs.dims[1]);
        let masks = a.require("masks")?;
        masks.expect_dims("masks", &[s, n])?;
        let targets = a.require("targets")?;
        targets.expect_dims("targets", &[s, n, 3])?;
        let joints = a.require("joints")?;
        let full = a.require("full")?;
        if joints.rank() != 3 || joints.dims[0] != s || full.rank() != 3 || full.dims[0] != s {
            return Err(Error::format(0, "joints/full must be S x K x 3"));
        }
        let (j, f) = (joints.dims[1], full.dims[1]);
        let (iv, tv, jv, fv) = (inputs.to_f64(), targets.to_f64(), joints.to_f64(), full.to_f64());
        let mv = masks.as_u8().ok_or_else(|| Error::format(0, "masks must be u8"))?;
        let samples = (0..s)
            .map(|k| {
                Ok(TrainingSample {
                    input: PartialMesh::new(
                        points(&iv[k * n * 3..(k + 1) * n * 3]),
                        mv[k * n..(k + 1) * n].iter().map(|&b| b != 0).collect(),
                    )?,
                    target_vertices: CoarseMesh::new(points(&tv[k * n * 3..(k + 1) * n * 3])),
                    target_joints: points(&jv[k * j * 3..(k + 1) * j * 3]),
                    target_full: points(&fv[k * f * 3..(k + 1) * f * 3]),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { samples })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.to_archive()?.write(dir.join(SAMPLES_FILE))
    }

    /// Loads `dir/samples.tens`, or the archive itself when given a file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = if path.is_dir() { path.join(SAMPLES_FILE) } else { path.to_path_buf() };
        Self::from_archive(&Archive::read(file)?)
    }

    /// Checks sizes against a template.
    pub fn check_template(&self, template: &TemplateMesh) -> Result<()> {
        for s in &self.samples {
            if s.input.len() != template.n_coarse() {
                return Err(Error::dim("sample coarse vertices", template.n_coarse(), s.input.len()));
            }
            if s.target_joints.len() != template.n_joints() {
                return Err(Error::dim("sample joints", template.n_joints(), s.target_joints.len()));
            }
            if s.target_full.len() != template.n_full() {
                return Err(Error::dim("sample full vertices", template.n_full(), s.target_full.len()));
            }
        }
        Ok(())
    }
}

/// Posed toy meshes from the procedural pose sequence, in world coordinates.
pub fn toy_meshes(count: usize, seed: u64) -> Vec<(String, Vec<Point3>)> {
    crate::toy::toy_pose_sequence(count, seed)
        .iter()
        .enumerate()
        .map(|(i, p)| (format!("toy_{i:04}"), crate::toy::toy_pose_vertices(p)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy;

    fn clean() -> TrainConfig {
        TrainConfig {
            extra_mask_rate: 0.0,
            noise_variance: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn clean_sample_copies_visible_targets() {
        let t = toy::toy_template();
        let rest = toy::toy_pose_vertices(&toy::ToyPose::rest());
        let mut rng = sample_rng(0, 0);
        let (s, rec) = make_sample(&t, &rest, &CameraConfig::default(), &clean(), &mut rng).unwrap();
        assert_eq!(rec.visible, rec.camera_visible);
        assert!(rec.visible > 0);
        for i in 0..t.n_coarse() {
            if s.input.mask[i] {
                assert_eq!(s.input.vertices_in[i], s.target_vertices.vertices[i]);
            }
        }
    }

    #[test]
    fn full_extra_masking_is_rejected() {
        let t = toy::toy_template();
        let rest = toy::toy_pose_vertices(&toy::ToyPose::rest());
        let cfg = TrainConfig { extra_mask_rate: 1.0, ..clean() };
        let r = make_sample(&t, &rest, &CameraConfig::default(), &cfg, &mut sample_rng(0, 0));
        assert!(matches!(r, Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn drop_fraction_matches_rate() {
        let t = toy::toy_template();
        let rest = toy::toy_pose_vertices(&toy::ToyPose::rest());
        let cfg = TrainConfig { noise_variance: 0.0, ..Default::default() };
        let (mut kept, mut seen) = (0usize, 0usize);
        let mut rng = sample_rng(1, 0);
        // About 70 camera-visible vertices per sample.
        for _ in 0..150 {
            let (_, rec) = make_sample(&t, &rest, &CameraConfig::default(), &cfg, &mut rng).unwrap();
            kept += rec.visible;
            seen += rec.camera_visible;
        }
        let drop = 1.0 - kept as f64 / seen as f64;
        assert!((drop - 0.6).abs() < 0.01, "drop fraction {drop}");
    }

    #[test]
    fn noise_variance_matches_config() {
        let pts = vec![Point3::new(1.0, -2.0, 3.0); 1000];
        let mask = vec![true; 1000];
        let mut rng = sample_rng(2, 0);
        let (mut sum2, mut count) = (0.0, 0usize);
        while count < 1_000_000 {
            for (a, b) in noisy_visible(&pts, &mask, 0.0005, &mut rng).unwrap().iter().zip(&pts) {
                sum2 += (a - b).norm_squared();
                count += 3;
            }
        }
        let var = sum2 / count as f64;
        assert!((var / 0.0005 - 1.0).abs() < 0.1, "variance {var}");
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let t = toy::toy_template();
        let (ds, recs) = generate(
            &t,
            &toy_meshes(3, 4),
            &CameraConfig::default(),
            &TrainConfig::default(),
            &DataConfig { seed: 9, samples_per_mesh: 2 },
        )
        .unwrap();
        assert_eq!(recs.len(), 6);
        let back = Dataset::from_archive(&ds.to_archive().unwrap()).unwrap();
        assert_eq!(back, ds);
        back.check_template(&t).unwrap();
    }

    #[test]
    fn generation_is_deterministic_and_order_free() {
        let t = toy::toy_template();
        let meshes = toy_meshes(4, 1);
        let cam = CameraConfig { azimuth_jitter_deg: 30.0, ..Default::default() };
        let dc = DataConfig { seed: 3, samples_per_mesh: 1 };
        let (a, _) = generate(&t, &meshes, &cam, &TrainConfig::default(), &dc).unwrap();
        let (b, _) = generate(&t, &meshes[2..], &cam, &TrainConfig::default(), &dc).unwrap();
        assert_eq!(a, generate(&t, &meshes, &cam, &TrainConfig::default(), &dc).unwrap().0);
        // Streams are keyed by position, so mesh 2 alone uses stream 0, not 2.
        let mut rng = sample_rng(3, 2);
        let (s2, _) = make_sample(&t, &meshes[2].1, &cam, &TrainConfig::default(), &mut rng).unwrap();
        assert_eq!(a.samples[2], s2);
        assert_eq!(b.len(), 2);
    }

    #[test]
    fn empty_mesh_list_is_an_error() {
        let t = toy::toy_template();
        let r = generate(&t, &[], &CameraConfig::default(), &TrainConfig::default(), &DataConfig::default());
        assert!(matches!(r, Err(Error::DegenerateInput(m)) if m.contains("no meshes")));
    }
}
