//! Losses, optimizer, learning-rate schedule and the training loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_rng, TrainingSample};
use crate::error::{Error, Result};
use crate::mae::{normalize, ForwardCache, MaeModel};
use crate::mesh::{CoarseMesh, Point3, TemplateMesh};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_v: f64,
    pub lambda_3d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_v: 1.0,
            lambda_3d: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_v >= 0.0 && self.lambda_3d >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.lambda_v == 0.0 && self.lambda_3d == 0.0 {
            return Err(Error::Config("loss weights cannot both be zero".into()));
        }
        Ok(())
    }
}

/// Reduction of the joint loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointLoss {
    /// Squared Frobenius norm of the joint residual.
    Frobenius,
    /// Squared Frobenius norm divided by the joint count.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Share of camera-visible vertices additionally hidden per sample.
    pub extra_mask_rate: f64,
    /// Per-coordinate input noise variance, square meters.
    pub noise_variance: f64,
    pub max_mask_retries: usize,
    pub loss: LossWeights,
    pub joint_loss: JointLoss,
    /// Train the upsampling matrix with an L1 loss at full resolution.
    pub upsample_loss: bool,
    pub checkpoint_every: usize,
    /// Low-rate regime for adapting a trained model: lr 1e-5, weight decay
    /// 1e-6, no warmup. Overrides the three fields it governs.
    pub fine_tune: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            seed: 0,
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 32,
            warmup_fraction: 0.15,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            extra_mask_rate: 0.6,
            noise_variance: 0.0005,
            max_mask_retries: 10,
            loss: LossWeights::default(),
            joint_loss: JointLoss::Mean,
            upsample_loss: true,
            checkpoint_every: 500,
            fine_tune: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be in [0, 1], got {v}")))
            }
        };
        unit("extra_mask_rate", self.extra_mask_rate)?;
        unit("warmup_fraction", self.warmup_fraction)?;
        unit("beta1", self.beta1)?;
        unit("beta2", self.beta2)?;
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.noise_variance >= 0.0 && self.adam_eps > 0.0) {
            return Err(Error::Config("weight_decay, noise_variance must be >= 0 and adam_eps > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.loss.validate()
    }

    /// `(lr, weight_decay, warmup_fraction)` after applying `fine_tune`.
    pub fn effective(&self) -> (f64, f64, f64) {
        if self.fine_tune {
            (1e-5, 1e-6, 0.0)
        } else {
            (self.lr, self.weight_decay, self.warmup_fraction)
        }
    }

    /// Learning rate at 0-based `step` of `total`: linear warmup from 0 over
    /// the first `warmup_fraction` of steps, then cosine decay reaching 0 at
    /// the last step.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let (base, _, warm) = self.effective();
        let w = (warm * total as f64).round() as usize;
        if step < w {
            return base * step as f64 / w as f64;
        }
        let span = total.saturating_sub(1).saturating_sub(w);
        if span == 0 {
            return base;
        }
        let t = ((step - w) as f64 / span as f64).min(1.0);
        base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

fn check_len(what: &'static str, a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::dim(what, a, b))
    }
}

/// Mean over vertices of the L1 distance.
pub fn loss_vertex(pred: &CoarseMesh, target: &CoarseMesh) -> Result<f64> {
    check_len("vertex loss", target.len(), pred.len())?;
    let s: f64 = pred
        .vertices
        .iter()
        .zip(&target.vertices)
        .map(|(p, t)| (p - t).abs().sum())
        .sum();
    Ok(s / pred.len().max(1) as f64)
}

pub fn loss_joints(
    pred: &CoarseMesh,
    target_joints: &[Point3],
    template: &TemplateMesh,
    mode: JointLoss,
) -> Result<f64> {
    let j = template.regress_joints(pred)?;
    check_len("joint loss", j.len(), target_joints.len())?;
    let s: f64 = j.iter().zip(target_joints).map(|(a, b)| (a - b).norm_squared()).sum();
    Ok(match mode {
        JointLoss::Frobenius => s,
        JointLoss::Mean => s / j.len().max(1) as f64,
    })
}

pub fn loss_total(
    pred: &CoarseMesh,
    sample: &TrainingSample,
    template: &TemplateMesh,
    weights: LossWeights,
    mode: JointLoss,
) -> Result<f64> {
    let lv = loss_vertex(pred, &sample.target_vertices)?;
    let lj = loss_joints(pred, &sample.target_joints, template, mode)?;
    Ok(weights.lambda_v * lv + weights.lambda_3d * lj)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub loss_v: f64,
    pub loss_3d: f64,
    /// Full-resolution L1 of the upsampled prediction (0 when disabled).
    pub loss_up: f64,
    pub loss_total: f64,
}

impl LossParts {
    fn add_scaled(&mut self, o: &LossParts, s: f64) {
        self.loss_v += s * o.loss_v;
        self.loss_3d += s * o.loss_3d;
        self.loss_up += s * o.loss_up;
        self.loss_total += s * o.loss_total;
    }
}

#[inline]
pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Loss of one sample and, when `grads` is given, its gradient with respect
/// to every model parameter (accumulated into `grads`).
///
/// Total = λ_V·L_V + λ_3D·L_3D (+ L_up when enabled). The upsampler loss
/// treats the coarse prediction as a constant, so it only trains the
/// upsampling matrix.
pub fn sample_loss(
    model: &MaeModel,
    sample: &TrainingSample,
    template: &TemplateMesh,
    cfg: &TrainConfig,
    grads: Option<&mut [f64]>,
    cache: Option<&mut ForwardCache>,
) -> Result<LossParts> {
    let n = model.n_vertices;
    check_len("sample vertices", n, sample.input.len())?;
    let (x, stats) = normalize(&sample.input)?;
    let mut local = None;
    let cache = match cache {
        Some(c) => c,
        None => local.insert(ForwardCache::new(model)),
    };
    model.forward_into(&x, &sample.input.mask, cache)?;
    let cache = &*cache;
    if let Some(name) = cache.first_non_finite() {
        return Err(Error::NonFinite(name));
    }
    let pred: Vec<Point3> = cache
        .out
        .chunks_exact(3)
        .map(|c| stats.invert(&Point3::new(c[0], c[1], c[2])))
        .collect();
    let w = cfg.loss;

    let mut dpred = vec![0.0; n * 3];
    let mut loss_v = 0.0;
    for (i, (p, t)) in pred.iter().zip(&sample.target_vertices.vertices).enumerate() {
        for c in 0..3 {
            let r = p[c] - t[c];
            loss_v += r.abs();
            dpred[i * 3 + c] = w.lambda_v * sign(r) / n as f64;
        }
    }
    loss_v /= n as f64;

    let reg = &template.joint_regressor;
    let nj = reg.nrows();
    check_len("sample joints", nj, sample.target_joints.len())?;
    let jscale = match cfg.joint_loss {
        JointLoss::Frobenius => 1.0,
        JointLoss::Mean => 1.0 / nj as f64,
    };
    let mut loss_3d = 0.0;
    for j in 0..nj {
        let mut joint = Point3::zeros();
        for i in 0..n {
            joint += pred[i] * reg[(j, i)];
        }
        let r = joint - sample.target_joints[j];
        loss_3d += r.norm_squared();
        let g = r * (2.0 * jscale * w.lambda_3d);
        for i in 0..n {
            let a = reg[(j, i)];
            if a != 0.0 {
                for c in 0..3 {
                    dpred[i * 3 + c] += a * g[c];
                }
            }
        }
    }
    loss_3d *= jscale;

    let mut loss_up = 0.0;
    let mut up_signs = Vec::new();
    if cfg.upsample_loss {
        let f = model.n_full;
        check_len("sample full vertices", f, sample.target_full.len())?;
        let u = model.upsample_params();
        up_signs.reserve(f);
        for r in 0..f {
            let row = &u[r * n..(r + 1) * n];
            let mut acc = [0.0; 3];
            for (wgt, p) in row.iter().zip(&pred) {
                acc[0] += wgt * p.x;
                acc[1] += wgt * p.y;
                acc[2] += wgt * p.z;
            }
            let t = &sample.target_full[r];
            let res = [acc[0] - t.x, acc[1] - t.y, acc[2] - t.z];
            loss_up += res[0].abs() + res[1].abs() + res[2].abs();
            up_signs.push([sign(res[0]), sign(res[1]), sign(res[2])]);
        }
        loss_up /= f as f64;
    }

    let parts = LossParts {
        loss_v,
        loss_3d,
        loss_up,
        loss_total: w.lambda_v * loss_v + w.lambda_3d * loss_3d + loss_up,
    };
    if !parts.loss_total.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    if let Some(grads) = grads {
        // dL/d(normalized output) = dL/d(pred) * scale
        for g in dpred.iter_mut() {
            *g *= stats.scale;
        }
        model.backward(&cache, &dpred, grads);
        let f = model.n_full as f64;
        let gu = &mut grads[model.upsample_range()];
        for (g, sg) in gu.chunks_exact_mut(n).zip(&up_signs) {
            for (gi, p) in g.iter_mut().zip(&pred) {
                *gi += (sg[0] * p.x + sg[1] * p.y + sg[2] * p.z) / f;
            }
        }
    }
    Ok(parts)
}

/// Samples per gradient work unit. Chunk boundaries depend only on the batch,
/// so the summation order is independent of the thread count.
const GRAD_CHUNK: usize = 4;

/// Mean loss and gradient over a batch. Gradients are accumulated over fixed
/// chunks of the batch and the chunk sums added in batch order.
pub fn batch_gradient(
    model: &MaeModel,
    batch: &[&TrainingSample],
    template: &TemplateMesh,
    cfg: &TrainConfig,
) -> Result<(LossParts, Vec<f64>)> {
    let per: Vec<Result<(LossParts, Vec<f64>)>> = batch
        .par_chunks(GRAD_CHUNK)
        .map_init(
            || ForwardCache::new(model),
            |cache, chunk| {
                let mut g = vec![0.0; model.params.len()];
                let mut l = LossParts::default();
                for s in chunk {
                    l.add_scaled(&sample_loss(model, s, template, cfg, Some(&mut g), Some(cache))?, 1.0);
                }
                Ok((l, g))
            },
        )
        .collect();
    let inv = 1.0 / batch.len() as f64;
    let mut total = LossParts::default();
    let mut grads = vec![0.0; model.params.len()];
    for r in per {
        let (l, g) = r?;
        total.add_scaled(&l, inv);
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += b;
        }
    }
    for g in grads.iter_mut() {
        *g *= inv;
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        let name = model
            .params_info()
            .find(|p| p.range.contains(&i))
            .map(|p| p.name.clone())
            .unwrap_or_default();
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    Ok((total, grads))
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, weight_decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + weight_decay * params[i]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss_v: f64,
    pub loss_3d: f64,
    pub loss_up: f64,
    pub loss_total: f64,
}

/// Where the training loop writes its outputs.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    /// Checkpoint path, rewritten every `checkpoint_every` steps and at the end.
    pub checkpoint: Option<PathBuf>,
    /// JSON-lines metrics log.
    pub metrics: Option<PathBuf>,
}

/// Runs `cfg.steps` optimizer steps. Batches are drawn from a per-epoch
/// shuffle seeded by `cfg.seed`; a batch at least as large as the dataset
/// uses every sample each step.
///
/// On a non-finite loss or gradient the last finite parameters are written
/// to `<checkpoint>.last_good` (when a checkpoint path is set) and the error
/// is returned.
pub fn train(
    model: &mut MaeModel,
    data: &[TrainingSample],
    template: &TemplateMesh,
    cfg: &TrainConfig,
    out: &TrainOutputs,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    model.check_template(template)?;
    if data.is_empty() {
        return Err(Error::DegenerateInput("empty training set".into()));
    }
    let (_, wd, _) = cfg.effective();
    let mut opt = AdamW::new(model.params.len(), cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut metrics = match &out.metrics {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            Some((p.clone(), std::fs::File::create(p).map_err(|e| Error::io(p, e))?))
        }
        None => None,
    };

    let bs = cfg.batch_size.min(data.len());
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut epoch = 0u64;
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(bs);
        if bs == data.len() {
            batch.extend(data.iter());
        } else {
            while batch.len() < bs {
                if cursor == order.len() {
                    order = (0..data.len()).collect();
                    order.shuffle(&mut sample_rng(cfg.seed, epoch));
                    epoch += 1;
                    cursor = 0;
                }
                batch.push(&data[order[cursor]]);
                cursor += 1;
            }
        }
        let (loss, grads) = match batch_gradient(model, &batch, template, cfg) {
            Ok(r) => r,
            Err(e @ Error::NonFinite(_)) => {
                if let Some(p) = &out.checkpoint {
                    model.save(last_good_path(p), step)?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let lr = cfg.lr_at(step, cfg.steps);
        opt.step(&mut model.params, &grads, lr, wd);
        let entry = StepLog {
            step,
            lr,
            loss_v: loss.loss_v,
            loss_3d: loss.loss_3d,
            loss_up: loss.loss_up,
            loss_total: loss.loss_total,
        };
        if let Some((p, f)) = metrics.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&entry).expect("log serializes"))
                .map_err(|e| Error::io(p.as_path(), e))?;
        }
        on_step(&entry);
        log.push(entry);
        if let Some(p) = &out.checkpoint {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
                model.save(p, step + 1)?;
            }
        }
    }
    if let Some(p) = &out.checkpoint {
        model.save(p, cfg.steps)?;
    }
    Ok(log)
}

pub fn last_good_path(p: &Path) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(".last_good");
    PathBuf::from(s)
}

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    /// `|fd - g| / max(|fd|, |g|, 1e-3)` at the worst parameter.
    pub worst_rel: f64,
    pub worst_at: String,
    pub checked: usize,
}

/// Checks every parameter of a default-config model on the octahedron
/// fixture with perturbed weights, a partial mask and shifted targets.
///
/// The upsampling loss sees the coarse prediction as a constant, so
/// upsampling entries are compared against that loss alone and all other
/// parameters against the remaining terms.
pub fn gradient_check(seed: u64, h: f64) -> Result<GradCheck> {
    use rand::{Rng, SeedableRng};
    let t = crate::toy::octahedron_template();
    let mut m = MaeModel::new(crate::mae::MaeConfig::default(), &t, seed)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for p in m.params.iter_mut() {
        *p += rng.random_range(-0.3..0.3);
    }
    let rest = t.coarse_rest();
    let input: Vec<Point3> = rest.vertices.iter().map(|v| v * 1.3 + Point3::new(0.1, -0.2, 0.05)).collect();
    let mask = vec![true, true, false, true, false, true];
    let target = CoarseMesh::new(rest.vertices.iter().map(|v| v * 0.7).collect());
    let sample = TrainingSample {
        input: crate::matching::PartialMesh::new(input, mask)?,
        target_joints: t.regress_joints(&target)?,
        target_full: t.upsample(&target)?.iter().map(|v| v + Point3::new(0.3, 0.0, 0.0)).collect(),
        target_vertices: target,
    };
    let cfg = TrainConfig::default();
    let mut g = vec![0.0; m.params.len()];
    sample_loss(&m, &sample, &t, &cfg, Some(&mut g), None)?;
    let up = m.upsample_range();
    let objective = |m: &MaeModel, i: usize| -> Result<f64> {
        let l = sample_loss(m, &sample, &t, &cfg, None, None)?;
        Ok(if up.contains(&i) { l.loss_up } else { l.loss_total - l.loss_up })
    };
    let mut out = GradCheck { worst_rel: 0.0, worst_at: String::new(), checked: 0 };
    let infos: Vec<_> = m.params_info().cloned().collect();
    for info in infos {
        for i in info.range.clone() {
            let p0 = m.params[i];
            m.params[i] = p0 + h;
            let fp = objective(&m, i)?;
            m.params[i] = p0 - h;
            let fm = objective(&m, i)?;
            m.params[i] = p0;
            let fd = (fp - fm) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-3);
            out.checked += 1;
            if !(rel <= out.worst_rel) {
                out.worst_rel = rel;
                out.worst_at = format!("{}[{}]: analytic {:e}, numeric {:e}", info.name, i - info.range.start, g[i], fd);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CameraConfig;
    use crate::data::make_sample;
    use crate::mae::MaeConfig;
    use crate::toy;
    use rand::{Rng, SeedableRng};

    fn mesh(v: &[[f64; 3]]) -> CoarseMesh {
        CoarseMesh::new(v.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect())
    }

    #[test]
    fn vertex_loss_cases() {
        let a = mesh(&[[1.0, 2.0, 3.0]]);
        assert_eq!(loss_vertex(&a, &a).unwrap(), 0.0);
        assert_eq!(loss_vertex(&a, &mesh(&[[0.0; 3]])).unwrap(), 6.0);
        assert!(loss_vertex(&a, &mesh(&[[0.0; 3], [0.0; 3]])).is_err());
    }

    #[test]
    fn vertex_loss_matches_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a: Vec<[f64; 3]> = (0..100).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let b: Vec<[f64; 3]> = (0..100).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let mut oracle = 0.0;
        for (p, q) in a.iter().zip(&b) {
            oracle += (p[0] - q[0]).abs() + (p[1] - q[1]).abs() + (p[2] - q[2]).abs();
        }
        oracle /= 100.0;
        assert!((loss_vertex(&mesh(&a), &mesh(&b)).unwrap() - oracle).abs() < 1e-7);
    }

    #[test]
    fn joint_loss_cases() {
        let t = toy::octahedron_template();
        let rest = t.coarse_rest();
        let j = t.regress_joints(&rest).unwrap();
        assert_eq!(loss_joints(&rest, &j, &t, JointLoss::Frobenius).unwrap(), 0.0);
        let mut off = j.clone();
        off[1] += Point3::new(0.0, 3.0, 4.0);
        assert!((loss_joints(&rest, &off, &t, JointLoss::Frobenius).unwrap() - 25.0).abs() < 1e-12);
        assert!((loss_joints(&rest, &off, &t, JointLoss::Mean).unwrap() - 25.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn joint_loss_matches_oracle() {
        let t = toy::toy_template();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let pred: Vec<[f64; 3]> = (0..t.n_coarse()).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let target: Vec<Point3> = (0..t.n_joints()).map(|_| Point3::new(rng.random(), rng.random(), rng.random())).collect();
        let r = &t.joint_regressor;
        let mut oracle = 0.0;
        for j in 0..t.n_joints() {
            for c in 0..3 {
                let mut s = 0.0;
                for i in 0..t.n_coarse() {
                    s += r[(j, i)] * pred[i][c];
                }
                oracle += (s - target[j][c]).powi(2);
            }
        }
        let got = loss_joints(&mesh(&pred), &target, &t, JointLoss::Frobenius).unwrap();
        assert!((got - oracle).abs() <= 1e-6 * oracle);
    }

    #[test]
    fn total_loss_weights() {
        let t = toy::octahedron_template();
        let rest = t.coarse_rest();
        let mut target = rest.clone();
        target.vertices[0].x += 0.6; // L_V = 0.6 / 6 = 0.1
        let mut joints = t.regress_joints(&rest).unwrap();
        joints[0].z += 2.0; // L_3D (Frobenius) = 4
        let s = TrainingSample {
            input: crate::matching::PartialMesh::new(rest.vertices.clone(), vec![true; 6]).unwrap(),
            target_vertices: target,
            target_joints: joints,
            target_full: rest.vertices.clone(),
        };
        let w = |v, j| LossWeights { lambda_v: v, lambda_3d: j };
        let lv = loss_total(&rest, &s, &t, w(1.0, 0.0), JointLoss::Frobenius).unwrap();
        assert!((lv - 0.1).abs() < 1e-12);
        let mix = loss_total(&rest, &s, &t, w(0.5, 2.0), JointLoss::Frobenius).unwrap();
        assert!((mix - (0.05 + 8.0)).abs() < 1e-12);
        let mut same = s.clone();
        same.target_vertices = rest.clone();
        same.target_joints = t.regress_joints(&rest).unwrap();
        assert_eq!(loss_total(&rest, &same, &t, w(1.0, 1.0), JointLoss::Mean).unwrap(), 0.0);
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::default();
        let total = 2000;
        assert_eq!(cfg.lr_at(0, total), 0.0);
        assert_eq!(cfg.lr_at(300, total), 1e-3);
        assert!(cfg.lr_at(total - 1, total) <= 1e-9);
        assert!(cfg.lr_at(150, total) < cfg.lr_at(299, total));
        assert!(cfg.lr_at(1000, total) > cfg.lr_at(1500, total));
        let ft = TrainConfig { fine_tune: true, ..Default::default() };
        assert_eq!(ft.lr_at(0, total), 1e-5);
    }

    fn fixture() -> (TemplateMesh, MaeModel, Vec<TrainingSample>) {
        let t = toy::toy_template();
        let m = MaeModel::new(MaeConfig { blocks: 2, ..Default::default() }, &t, 5).unwrap();
        let rest = toy::toy_pose_vertices(&toy::ToyPose::rest());
        let mut rng = sample_rng(0, 0);
        let s = (0..2)
            .map(|_| make_sample(&t, &rest, &CameraConfig::default(), &TrainConfig::default(), &mut rng).unwrap().0)
            .collect();
        (t, m, s)
    }

    #[test]
    fn zero_lr_step_leaves_parameters_unchanged() {
        let (t, mut m, s) = fixture();
        let before = m.params.clone();
        let refs: Vec<&TrainingSample> = s.iter().collect();
        let (_, g) = batch_gradient(&m, &refs, &t, &TrainConfig::default()).unwrap();
        let mut opt = AdamW::new(m.params.len(), 0.9, 0.999, 1e-8);
        opt.step(&mut m.params, &g, 0.0, 1e-4);
        assert!(before.iter().zip(&m.params).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn mask_token_gradient_tracks_masking() {
        let (t, m, s) = fixture();
        let r = m.mask_token_range();
        let mut g = vec![0.0; m.params.len()];
        sample_loss(&m, &s[0], &t, &TrainConfig::default(), Some(&mut g), None).unwrap();
        assert!(g[r.clone()].iter().any(|&v| v != 0.0));

        let mut all = s[0].clone();
        all.input = crate::matching::PartialMesh::new(all.target_vertices.vertices.clone(), vec![true; t.n_coarse()]).unwrap();
        let mut g = vec![0.0; m.params.len()];
        sample_loss(&m, &all, &t, &TrainConfig::default(), Some(&mut g), None).unwrap();
        assert!(g[r].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (t, m0, s) = fixture();
        let cfg = TrainConfig { steps: 30, batch_size: 2, ..Default::default() };
        let mut a = m0.clone();
        let log = train(&mut a, &s, &t, &cfg, &TrainOutputs::default(), |_| {}).unwrap();
        let mut b = m0.clone();
        train(&mut b, &s, &t, &cfg, &TrainOutputs::default(), |_| {}).unwrap();
        assert_eq!(a.params, b.params);
        assert!(log.last().unwrap().loss_total < log[0].loss_total);
    }

    #[test]
    fn non_finite_input_halts_with_diagnostic() {
        let (t, mut m, s) = fixture();
        m.param_mut("blocks.1.mlp.fc1.weight").unwrap()[0] = f64::NAN;
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("m.tens");
        let out = TrainOutputs { checkpoint: Some(ck.clone()), metrics: None };
        let cfg = TrainConfig { steps: 3, ..Default::default() };
        match train(&mut m, &s, &t, &cfg, &out, |_| {}) {
            Err(Error::NonFinite(name)) => assert!(name.contains("blocks.1"), "{name}"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(last_good_path(&ck).exists());
    }

    #[test]
    fn gradients_match_central_differences() {
        let r = gradient_check(5, 1e-5).unwrap();
        assert!(r.checked > 1000);
        assert!(r.worst_rel < 1e-6, "{r:?}");
    }
}
