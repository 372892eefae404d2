use std::path::{Path, PathBuf};

use clap::{Args, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use meshrecover_core::camera::{render_depth_uv, DepthUVFrame, MeshView};
use meshrecover_core::config::RunConfig;
use meshrecover_core::data::{generate, read_mesh_dir, toy_meshes, Dataset, SampleRecord, SAMPLES_FILE};
use meshrecover_core::eval::{
    dump_triple, evaluate, evaluate_baseline, noise_sweep, predict, BaselineOptions, EvalReport, NoisePoint,
};
use meshrecover_core::mae::MaeModel;
use meshrecover_core::matching::{lift_all, match_to_template, PartialMesh};
use meshrecover_core::obj::ObjMesh;
use meshrecover_core::tensor_file::Archive;
use meshrecover_core::train::{train, TrainOutputs};
use meshrecover_core::{load_template, toy, Error, Point3, Result, TemplateMesh};

use crate::selfcheck;

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Render ground-truth meshes and build training samples.
    GenData(GenDataArgs),
    /// Train the masked autoencoder on a sample archive.
    Train(TrainArgs),
    /// Evaluate a checkpoint (PVE, MPJPE) on a sample archive.
    Eval(EvalArgs),
    /// PVE under increasing Gaussian noise on the visible inputs.
    SweepNoise(SweepArgs),
    /// Render a depth+UV frame of a mesh.
    Render(RenderArgs),
    /// Lift a frame and match its points to template vertices.
    Match(MatchArgs),
    /// Complete a frame or partial mesh with a trained model.
    Infer(InferArgs),
    /// Run the oracle suites and report pass/fail.
    Selfcheck(SelfcheckArgs),
    /// Write the built-in toy template as a template directory.
    ExportTemplate(ExportTemplateArgs),
    /// Print the Markdown flag reference.
    #[command(hide = true)]
    HelpMarkdown,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Template directory; the built-in toy template when omitted.
    #[arg(long, value_name = "DIR")]
    pub template: Option<PathBuf>,
    /// Run configuration JSON; defaults for every missing field.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory of ground-truth OBJ meshes (world coordinates).
    #[arg(long, value_name = "DIR", conflicts_with = "toy", required_unless_present = "toy")]
    pub meshes: Option<PathBuf>,
    /// Use N procedurally posed toy meshes instead of a mesh directory.
    #[arg(long, value_name = "N")]
    pub toy: Option<usize>,
    /// Pose sequence seed for --toy.
    #[arg(long, default_value_t = 0)]
    pub toy_seed: u64,
    /// Override data.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for samples.tens and manifest.json.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Sample archive directory (or samples.tens file).
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Output directory for model.tens, metrics.jsonl and manifest.json.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long, value_name = "FILE")]
    pub init: Option<PathBuf>,
    /// Override training.steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Print a progress line every N steps (0 disables).
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint file (model.tens) or training output directory.
    #[arg(long, value_name = "PATH")]
    pub ckpt: PathBuf,
    /// Sample archive directory (or samples.tens file).
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Report JSON path.
    #[arg(long, value_name = "FILE")]
    pub report: PathBuf,
    /// Report PVE on coarse vertices instead of the upsampled mesh.
    #[arg(long)]
    pub coarse: bool,
    /// Also fit the optimization baseline and write its report here.
    #[arg(long, value_name = "FILE")]
    pub baseline_report: Option<PathBuf>,
    /// Write ground truth, input and prediction OBJ files per sample.
    #[arg(long, value_name = "DIR")]
    pub dump_obj: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint file (model.tens) or training output directory.
    #[arg(long, value_name = "PATH")]
    pub ckpt: PathBuf,
    /// Sample archive directory (or samples.tens file).
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Comma-separated noise standard deviations in millimeters.
    #[arg(long, value_delimiter = ',')]
    pub stds: Option<Vec<f64>>,
    /// Report JSON path.
    #[arg(long, value_name = "FILE")]
    pub report: PathBuf,
    /// Sweep coarse-vertex PVE instead of the upsampled mesh.
    #[arg(long)]
    pub coarse: bool,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub common: Common,
    /// Full-resolution OBJ in world coordinates.
    #[arg(long, value_name = "FILE", conflicts_with = "toy_pose")]
    pub mesh: Option<PathBuf>,
    /// Render toy pose K of the sequence seeded by --toy-seed.
    #[arg(long, value_name = "K")]
    pub toy_pose: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub toy_seed: u64,
    /// Camera azimuth in degrees around the vertical axis.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub azimuth: f64,
    /// Output frame (tensor archive; a .json sidecar is written beside it).
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Also write the ground-truth mesh in camera coordinates.
    #[arg(long, value_name = "FILE")]
    pub gt: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[command(flatten)]
    pub common: Common,
    /// Depth+UV frame archive (camera read from its .json sidecar).
    #[arg(long, value_name = "FILE")]
    pub frame: PathBuf,
    /// UV match threshold; overrides matching.eps.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Output partial mesh archive.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint file (model.tens) or training output directory.
    #[arg(long, value_name = "PATH")]
    pub ckpt: PathBuf,
    /// Depth+UV frame to lift and match.
    #[arg(long, value_name = "FILE", conflicts_with = "partial", required_unless_present = "partial")]
    pub frame: Option<PathBuf>,
    /// Pre-matched partial mesh archive.
    #[arg(long, value_name = "FILE")]
    pub partial: Option<PathBuf>,
    /// UV match threshold for --frame; overrides matching.eps.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Output OBJ (full resolution unless --coarse).
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Write the coarse mesh (coarse vertices, no faces).
    #[arg(long)]
    pub coarse: bool,
}

#[derive(Debug, Args)]
pub struct SelfcheckArgs {
    /// Template directory to validate and check against.
    #[arg(long, value_name = "DIR")]
    pub template: Option<PathBuf>,
    /// Also write the report JSON here.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ExportTemplateArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

const GIT_DESCRIBE: &str = env!("MESHRECOVER_GIT_DESCRIBE");

/// Provenance block shared by every manifest.
#[derive(Serialize)]
struct Provenance {
    tool_version: &'static str,
    git_describe: &'static str,
    command: &'static str,
    config_hash: String,
    template_hash: String,
}

impl Provenance {
    fn new(command: &'static str, cfg: &RunConfig, template: &TemplateMesh) -> Self {
        Provenance {
            tool_version: env!("CARGO_PKG_VERSION"),
            git_describe: GIT_DESCRIBE,
            command,
            config_hash: cfg.hash(),
            template_hash: template.content_hash(),
        }
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    std::fs::write(path, text).map_err(|e| io(path, e))
}

fn load_config(common: &Common) -> Result<RunConfig> {
    match &common.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn load_template_or_toy(dir: Option<&Path>) -> Result<TemplateMesh> {
    match dir {
        Some(d) => load_template(d),
        None => Ok(toy::toy_template()),
    }
}

/// Accepts either a checkpoint file or a training output directory.
fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MODEL_FILE)
    } else {
        p.to_path_buf()
    }
}

fn load_model(p: &Path, template: &TemplateMesh) -> Result<MaeModel> {
    let (model, _) = MaeModel::load(checkpoint_path(p))?;
    model.check_template(template)?;
    Ok(model)
}

pub const MODEL_FILE: &str = "model.tens";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn run(cmd: Cmd) -> Result<u8> {
    match cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Eval(a) => eval_cmd(a),
        Cmd::SweepNoise(a) => sweep(a),
        Cmd::Render(a) => render(a),
        Cmd::Match(a) => match_cmd(a),
        Cmd::Infer(a) => infer(a),
        Cmd::Selfcheck(a) => selfcheck::run(a.template.as_deref(), a.report.as_deref(), a.seed),
        Cmd::ExportTemplate(a) => {
            toy::toy_template().save(&a.out)?;
            Ok(0)
        }
        Cmd::HelpMarkdown => {
            print!("{}", crate::markdown_reference());
            Ok(0)
        }
    }
}

#[derive(Serialize)]
struct DataManifest<'a> {
    #[serde(flatten)]
    provenance: Provenance,
    data_seed: u64,
    source: String,
    samples: usize,
    rejected: usize,
    samples_sha256: String,
    records: &'a [SampleRecord],
}

fn gen_data(a: GenDataArgs) -> Result<u8> {
    let mut cfg = load_config(&a.common)?;
    if let Some(s) = a.seed {
        cfg.data.seed = s;
    }
    let template = load_template_or_toy(a.common.template.as_deref())?;
    let (meshes, source) = match (&a.meshes, a.toy) {
        (Some(dir), _) => (read_mesh_dir(dir, &template)?, "mesh directory".to_string()),
        (None, Some(n)) => {
            if a.common.template.is_some() {
                return Err(Error::Config("--toy requires the built-in toy template".into()));
            }
            (toy_meshes(n, a.toy_seed), format!("toy poses (seed {})", a.toy_seed))
        }
        (None, None) => return Err(Error::Config("either --meshes or --toy is required".into())),
    };
    let (data, records) = generate(&template, &meshes, &cfg.camera, &cfg.training, &cfg.data)?;
    data.save(&a.out)?;
    let samples_path = a.out.join(SAMPLES_FILE);
    let manifest = DataManifest {
        provenance: Provenance::new("gen-data", &cfg, &template),
        data_seed: cfg.data.seed,
        source,
        samples: data.len(),
        rejected: records.iter().filter(|r| !r.accepted).count(),
        samples_sha256: sha256_file(&samples_path)?,
        records: &records,
    };
    write_json(&a.out.join(MANIFEST_FILE), &manifest)?;
    println!(
        "wrote {} samples ({} rejected) to {}",
        manifest.samples,
        manifest.rejected,
        samples_path.display()
    );
    Ok(0)
}

#[derive(Serialize)]
struct TrainManifest {
    #[serde(flatten)]
    provenance: Provenance,
    steps: usize,
    seed: u64,
    data_sha256: String,
    checkpoint_sha256: String,
    parameter_hash: String,
    final_loss_total: Option<f64>,
}

fn train_cmd(a: TrainArgs) -> Result<u8> {
    let mut cfg = load_config(&a.common)?;
    if let Some(s) = a.steps {
        cfg.training.steps = s;
    }
    cfg.validate()?;
    let template = load_template_or_toy(a.common.template.as_deref())?;
    let data_file = if a.data.is_dir() { a.data.join(SAMPLES_FILE) } else { a.data.clone() };
    let data = Dataset::load(&a.data)?;
    data.check_template(&template)?;
    let mut model = match &a.init {
        Some(p) => load_model(p, &template)?,
        None => MaeModel::new(cfg.model, &template, cfg.training.seed)?,
    };
    let ckpt = a.out.join(MODEL_FILE);
    let outputs = TrainOutputs {
        checkpoint: Some(ckpt.clone()),
        metrics: Some(a.out.join(METRICS_FILE)),
    };
    let every = a.log_every;
    let log = train(&mut model, &data.samples, &template, &cfg.training, &outputs, |s| {
        if every > 0 && (s.step % every == 0 || s.step + 1 == cfg.training.steps) {
            eprintln!(
                "step {:>6}  lr {:.3e}  loss {:.6} (v {:.6}, 3d {:.6}, up {:.6})",
                s.step, s.lr, s.loss_total, s.loss_v, s.loss_3d, s.loss_up
            );
        }
    })?;
    let manifest = TrainManifest {
        provenance: Provenance::new("train", &cfg, &template),
        steps: cfg.training.steps,
        seed: cfg.training.seed,
        data_sha256: sha256_file(&data_file)?,
        checkpoint_sha256: sha256_file(&ckpt)?,
        parameter_hash: model.content_hash(),
        final_loss_total: log.last().map(|l| l.loss_total),
    };
    write_json(&a.out.join(MANIFEST_FILE), &manifest)?;
    println!("wrote {}", ckpt.display());
    Ok(0)
}

fn eval_cmd(a: EvalArgs) -> Result<u8> {
    let cfg = load_config(&a.common)?;
    let template = load_template_or_toy(a.common.template.as_deref())?;
    let model = load_model(&a.ckpt, &template)?;
    let data = Dataset::load(&a.data)?;
    data.check_template(&template)?;
    let full = cfg.eval.full_resolution && !a.coarse;
    let mut report = evaluate(&model, &template, &data.samples, full)?;
    report.config_hash = Some(cfg.hash());
    report.write(&a.report)?;
    println!("PVE {:.3} mm  MPJPE {:.3} mm ({} samples, {} resolution)", report.pve_mm, report.mpjpe_mm, report.per_sample.len(), report.resolution);

    if let Some(path) = &a.baseline_report {
        let opts = BaselineOptions {
            iterations: cfg.eval.baseline_iterations,
            lr: cfg.eval.baseline_lr,
            lambda_lap: cfg.eval.baseline_lambda_lap,
        };
        let pose = cfg.camera.pose(0.0);
        let mut b: EvalReport = evaluate_baseline(&template, &data.samples, Some(&pose), &opts)?;
        b.config_hash = Some(cfg.hash());
        b.write(path)?;
        println!("baseline PVE {:.3} mm  MPJPE {:.3} mm (coarse resolution)", b.pve_mm, b.mpjpe_mm);
    }
    if let Some(dir) = &a.dump_obj {
        for (i, s) in data.samples.iter().enumerate() {
            let pred = predict(&model, &s.input, full)?;
            dump_triple(dir, &format!("sample_{i:04}"), &template, s, &pred)?;
        }
    }
    Ok(0)
}

#[derive(Serialize)]
struct SweepReport {
    config_hash: String,
    checkpoint_hash: String,
    noise_seed: u64,
    resolution: &'static str,
    points: Vec<NoisePoint>,
}

fn sweep(a: SweepArgs) -> Result<u8> {
    let cfg = load_config(&a.common)?;
    let template = load_template_or_toy(a.common.template.as_deref())?;
    let model = load_model(&a.ckpt, &template)?;
    let data = Dataset::load(&a.data)?;
    data.check_template(&template)?;
    let stds = a.stds.clone().unwrap_or_else(|| cfg.eval.noise_stds_mm.clone());
    let full = cfg.eval.full_resolution && !a.coarse;
    let points = noise_sweep(&model, &template, &data.samples, &stds, cfg.eval.noise_seed, full)?;
    for p in &points {
        println!("std {:>6.1} mm  PVE {:.3} mm  MPJPE {:.3} mm", p.std_mm, p.pve_mm, p.mpjpe_mm);
    }
    write_json(
        &a.report,
        &SweepReport {
            config_hash: cfg.hash(),
            checkpoint_hash: model.content_hash(),
            noise_seed: cfg.eval.noise_seed,
            resolution: if full { "full" } else { "coarse" },
            points,
        },
    )?;
    Ok(0)
}

fn render(a: RenderArgs) -> Result<u8> {
    let cfg = load_config(&a.common)?;
    let template = load_template_or_toy(a.common.template.as_deref())?;
    let world: Vec<Point3> = match (&a.mesh, a.toy_pose) {
        (Some(p), _) => {
            let obj = ObjMesh::read(p)?;
            if obj.positions.len() != template.n_full() {
                return Err(Error::Dimension {
                    what: "mesh vertices",
                    expected: template.n_full(),
                    got: obj.positions.len(),
                });
            }
            obj.positions
        }
        (None, Some(k)) => {
            if a.common.template.is_some() {
                return Err(Error::Config("--toy-pose requires the built-in toy template".into()));
            }
            let poses = toy::toy_pose_sequence(k + 1, a.toy_seed);
            toy::toy_pose_vertices(&poses[k])
        }
        (None, None) => template.vertices_full.clone(),
    };
    let pose = cfg.camera.pose(a.azimuth.to_radians());
    let mut frame = render_depth_uv(
        MeshView {
            vertices: &world,
            triangles: &template.triangles,
            uv: &template.uv,
        },
        &pose,
        &cfg.camera.intrinsics,
        template.render_options(),
    );
    frame.pose = Some(pose);
    frame.write(&a.out)?;
    if let Some(gt) = &a.gt {
        ObjMesh {
            positions: world.iter().map(|v| pose.to_camera(v)).collect(),
            triangles: template.triangles.clone(),
            ..Default::default()
        }
        .write(gt)?;
    }
    println!("{} covered pixels", frame.covered_pixels());
    Ok(0)
}

#[derive(Serialize)]
struct MatchStats {
    points: usize,
    vertices: usize,
    visible: usize,
    no_points: bool,
}

fn match_frame(frame: &DepthUVFrame, template: &TemplateMesh, eps: f64) -> Result<(PartialMesh, MatchStats)> {
    frame.validate()?;
    let points = lift_all(frame);
    let m = match_to_template(&points, template, eps)?;
    let stats = MatchStats {
        points: points.len(),
        vertices: m.partial.len(),
        visible: m.partial.visible_count(),
        no_points: m.no_points,
    };
    Ok((m.partial, stats))
}

fn match_cmd(a: MatchArgs) -> Result<u8> {
    let cfg = load_config(&a.common)?;
    let template = load_template_or_toy(a.common.template.as_deref())?;
    let frame = DepthUVFrame::read(&a.frame)?;
    let (partial, stats) = match_frame(&frame, &template, a.eps.unwrap_or(cfg.matching.eps))?;
    partial.to_archive()?.write(&a.out)?;
    println!("{}", serde_json::to_string(&stats).expect("stats serialize"));
    Ok(0)
}

#[derive(Serialize)]
struct InferStats {
    visible: usize,
    vertices: usize,
    output_vertices: usize,
    resolution: &'static str,
    checkpoint_hash: String,
}

#[derive(Serialize)]
struct VisibilitySidecar {
    visible: usize,
    mask: Vec<u8>,
}

fn infer(a: InferArgs) -> Result<u8> {
    let cfg = load_config(&a.common)?;
    let template = load_template_or_toy(a.common.template.as_deref())?;
    let model = load_model(&a.ckpt, &template)?;
    let partial = match (&a.frame, &a.partial) {
        (Some(f), _) => {
            let frame = DepthUVFrame::read(f)?;
            match_frame(&frame, &template, a.eps.unwrap_or(cfg.matching.eps))?.0
        }
        (None, Some(p)) => PartialMesh::from_archive(&Archive::read(p)?)?,
        (None, None) => return Err(Error::Config("either --frame or --partial is required".into())),
    };
    let pred = predict(&model, &partial, !a.coarse)?;
    let obj = match &pred.full {
        Some(full) => ObjMesh {
            positions: full.clone(),
            triangles: template.triangles.clone(),
            ..Default::default()
        },
        None => ObjMesh {
            positions: pred.coarse.vertices.clone(),
            ..Default::default()
        },
    };
    obj.write(&a.out)?;
    write_json(
        &a.out.with_extension("visibility.json"),
        &VisibilitySidecar {
            visible: partial.visible_count(),
            mask: partial.mask.iter().map(|&m| m as u8).collect(),
        },
    )?;
    let stats = InferStats {
        visible: partial.visible_count(),
        vertices: partial.len(),
        output_vertices: obj.positions.len(),
        resolution: if a.coarse { "coarse" } else { "full" },
        checkpoint_hash: model.content_hash(),
    };
    println!("{}", serde_json::to_string(&stats).expect("stats serialize"));
    Ok(0)
}
