//! Masked autoencoder over coarse template vertices.
//!
//! Visible vertex positions are normalized, embedded and summed with a
//! per-vertex positional embedding; masked vertices receive a shared mask
//! token instead. A stack of pre-norm transformer blocks and a linear head
//! regress normalized positions for every vertex, which are mapped back with
//! the input's statistics.

use std::ops::Range;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matching::PartialMesh;
use crate::mesh::{CoarseMesh, Point3, TemplateMesh};
use crate::nn;
use crate::tensor_file::{Archive, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaeConfig {
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for MaeConfig {
    fn default() -> Self {
        MaeConfig {
            d_model: 20,
            blocks: 6,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl MaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.blocks == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide d_model {}",
                self.heads, self.d_model
            )));
        }
        Ok(())
    }
}

/// Centroid and pooled isotropic standard deviation of the visible vertices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: Vector3<f64>,
    pub scale: f64,
}

impl NormStats {
    pub fn apply(&self, p: &Point3) -> Point3 {
        (p - self.mean) / self.scale
    }

    pub fn invert(&self, p: &Point3) -> Point3 {
        p * self.scale + self.mean
    }
}

/// Normalizes the visible vertices. Masked slots are returned as zero and
/// never read.
pub fn normalize(partial: &PartialMesh) -> Result<(Vec<Point3>, NormStats)> {
    let mut count = 0usize;
    let mut sum = Vector3::zeros();
    for v in partial.visible() {
        if !(v.x.is_finite() && v.y.is_finite() && v.z.is_finite()) {
            return Err(Error::NonFinite("visible input vertex".into()));
        }
        sum += v;
        count += 1;
    }
    if count < 2 {
        return Err(Error::DegenerateInput(format!(
            "{count} visible vertices, at least 2 are needed"
        )));
    }
    let mean = sum / count as f64;
    let var = partial
        .visible()
        .map(|v| (v - mean).norm_squared())
        .sum::<f64>()
        / (3 * count) as f64;
    let scale = var.sqrt();
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::DegenerateInput("visible vertices have zero spread".into()));
    }
    let stats = NormStats { mean, scale };
    let out = partial
        .vertices_in
        .iter()
        .zip(&partial.mask)
        .map(|(v, &m)| if m { stats.apply(v) } else { Point3::zeros() })
        .collect();
    Ok((out, stats))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
    Upsample,
}

/// Weight and bias stored back to back so both gradients can be borrowed.
#[derive(Debug, Clone)]
struct Pair {
    a: Range<usize>,
    b: Range<usize>,
}

impl Pair {
    fn split<'a>(&self, buf: &'a mut [f64]) -> (&'a mut [f64], &'a mut [f64]) {
        debug_assert_eq!(self.a.end, self.b.start);
        buf[self.a.start..self.b.end].split_at_mut(self.a.len())
    }
}

#[derive(Debug, Clone)]
struct BlockLayout {
    ln1: Pair,
    qkv: Pair,
    proj: Pair,
    ln2: Pair,
    fc1: Pair,
    fc2: Pair,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: Pair,
    mask_token: Range<usize>,
    pos: Range<usize>,
    blocks: Vec<BlockLayout>,
    norm: Pair,
    head: Pair,
    upsample: Range<usize>,
    entries: Vec<(ParamInfo, Init)>,
    total: usize,
}

struct LayoutBuilder {
    entries: Vec<(ParamInfo, Init)>,
    next: usize,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> Range<usize> {
        let len: usize = shape.iter().product();
        let range = self.next..self.next + len;
        self.next += len;
        self.entries.push((ParamInfo { name, shape, range: range.clone() }, init));
        range
    }

    fn linear(&mut self, name: &str, i: usize, o: usize) -> Pair {
        Pair {
            a: self.add(format!("{name}.weight"), vec![i, o], Init::Normal),
            b: self.add(format!("{name}.bias"), vec![o], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Pair {
        Pair {
            a: self.add(format!("{name}.gain"), vec![d], Init::Ones),
            b: self.add(format!("{name}.bias"), vec![d], Init::Zeros),
        }
    }
}

impl Layout {
    fn new(cfg: &MaeConfig, n: usize, n_full: usize) -> Self {
        let d = cfg.d_model;
        let hidden = d * cfg.mlp_ratio;
        let mut b = LayoutBuilder { entries: Vec::new(), next: 0 };
        let embed = b.linear("embed", 3, d);
        let mask_token = b.add("mask_token".into(), vec![d], Init::Zeros);
        let pos = b.add("pos_embed".into(), vec![n, d], Init::Normal);
        let blocks = (0..cfg.blocks)
            .map(|l| BlockLayout {
                ln1: b.norm(&format!("blocks.{l}.norm1"), d),
                qkv: b.linear(&format!("blocks.{l}.attn.qkv"), d, 3 * d),
                proj: b.linear(&format!("blocks.{l}.attn.proj"), d, d),
                ln2: b.norm(&format!("blocks.{l}.norm2"), d),
                fc1: b.linear(&format!("blocks.{l}.mlp.fc1"), d, hidden),
                fc2: b.linear(&format!("blocks.{l}.mlp.fc2"), hidden, d),
            })
            .collect();
        let norm = b.norm("norm", d);
        let head = b.linear("head", d, 3);
        let upsample = b.add("upsample".into(), vec![n_full, n], Init::Upsample);
        Layout {
            embed,
            mask_token,
            pos,
            blocks,
            norm,
            head,
            upsample,
            entries: b.entries,
            total: b.next,
        }
    }
}

/// Header stored next to a checkpoint archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub d_model: usize,
    pub n_vertices: usize,
    pub n_full: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub template_hash: String,
    pub seed: u64,
    #[serde(default)]
    pub step: usize,
}

#[derive(Debug, Clone)]
pub struct MaeModel {
    pub config: MaeConfig,
    pub n_vertices: usize,
    pub n_full: usize,
    /// All parameters, flattened in [`MaeModel::params_info`] order.
    pub params: Vec<f64>,
    pub template_hash: String,
    pub seed: u64,
    layout: Layout,
}

/// Activations kept for the backward pass of one sample.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    x_in: Vec<f64>,
    mask: Vec<bool>,
    blocks: Vec<BlockCache>,
    lnf_xhat: Vec<f64>,
    lnf_rstd: Vec<f64>,
    lnf_out: Vec<f64>,
    /// Normalized prediction, `n × 3`.
    pub out: Vec<f64>,
}

impl ForwardCache {
    pub fn new(model: &MaeModel) -> Self {
        let n = model.n_vertices;
        let d = model.config.d_model;
        let hidden = d * model.config.mlp_ratio;
        let heads = model.config.heads;
        let block = || BlockCache {
            ln1_xhat: vec![0.0; n * d],
            ln1_rstd: vec![0.0; n],
            ln1_out: vec![0.0; n * d],
            qkv: vec![0.0; n * 3 * d],
            probs: vec![0.0; heads * n * n],
            attn: vec![0.0; n * d],
            ln2_xhat: vec![0.0; n * d],
            ln2_rstd: vec![0.0; n],
            ln2_out: vec![0.0; n * d],
            fc1: vec![0.0; n * hidden],
            act: vec![0.0; n * hidden],
            tanh: vec![0.0; n * hidden],
        };
        ForwardCache {
            x_in: vec![0.0; n * 3],
            mask: vec![false; n],
            blocks: (0..model.config.blocks).map(|_| block()).collect(),
            lnf_xhat: vec![0.0; n * d],
            lnf_rstd: vec![0.0; n],
            lnf_out: vec![0.0; n * d],
            out: vec![0.0; n * 3],
        }
    }

    /// Name of the first activation holding a NaN or infinity, in forward order.
    pub fn first_non_finite(&self) -> Option<String> {
        let bad = |v: &[f64]| !nn::all_finite(v);
        for (l, b) in self.blocks.iter().enumerate() {
            let stages: [(&str, &[f64]); 6] = [
                ("norm1", &b.ln1_out),
                ("attn.qkv", &b.qkv),
                ("attn", &b.attn),
                ("norm2", &b.ln2_out),
                ("mlp.fc1", &b.fc1),
                ("mlp.act", &b.act),
            ];
            for (name, v) in stages {
                if bad(v) {
                    return Some(format!("blocks.{l}.{name} output"));
                }
            }
        }
        if bad(&self.lnf_out) {
            return Some("norm output".into());
        }
        if bad(&self.out) {
            return Some("head output".into());
        }
        None
    }
}

#[derive(Debug, Clone)]
struct BlockCache {
    ln1_xhat: Vec<f64>,
    ln1_rstd: Vec<f64>,
    ln1_out: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    attn: Vec<f64>,
    ln2_xhat: Vec<f64>,
    ln2_rstd: Vec<f64>,
    ln2_out: Vec<f64>,
    fc1: Vec<f64>,
    act: Vec<f64>,
    tanh: Vec<f64>,
}

impl MaeModel {
    /// Fresh model with truncated-normal weights (std 0.02), unit norm gains,
    /// zero biases and mask token, and the template's upsampling matrix.
    pub fn new(config: MaeConfig, template: &TemplateMesh, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(config, template.n_coarse(), template.n_full(), seed)?;
        m.template_hash = template.content_hash();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (info, init) in &m.layout.entries {
            let p = &mut m.params[info.range.clone()];
            match init {
                Init::Normal => p.iter_mut().for_each(|v| *v = nn::trunc_normal(&mut rng, 0.02)),
                Init::Zeros => p.fill(0.0),
                Init::Ones => p.fill(1.0),
                Init::Upsample => p.copy_from_slice(template.upsample.transpose().as_slice()),
            }
        }
        Ok(m)
    }

    /// All-zero parameters with the right shapes.
    pub fn zeros(config: MaeConfig, n_vertices: usize, n_full: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_vertices == 0 {
            return Err(Error::Config("template has no coarse vertices".into()));
        }
        let layout = Layout::new(&config, n_vertices, n_full);
        Ok(MaeModel {
            config,
            n_vertices,
            n_full,
            params: vec![0.0; layout.total],
            template_hash: String::new(),
            seed,
            layout,
        })
    }

    pub fn params_info(&self) -> impl Iterator<Item = &ParamInfo> {
        self.layout.entries.iter().map(|(p, _)| p)
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.params_info()
            .find(|p| p.name == name)
            .map(|p| &self.params[p.range.clone()])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.params_info().find(|p| p.name == name)?.range.clone();
        Some(&mut self.params[r])
    }

    pub fn upsample_range(&self) -> Range<usize> {
        self.layout.upsample.clone()
    }

    pub fn mask_token_range(&self) -> Range<usize> {
        self.layout.mask_token.clone()
    }

    /// Row-major `n_full × n_vertices` upsampling matrix.
    pub fn upsample_params(&self) -> &[f64] {
        &self.params[self.layout.upsample.clone()]
    }

    pub fn header(&self, step: usize) -> CheckpointHeader {
        CheckpointHeader {
            d_model: self.config.d_model,
            n_vertices: self.n_vertices,
            n_full: self.n_full,
            blocks: self.config.blocks,
            heads: self.config.heads,
            mlp_ratio: self.config.mlp_ratio,
            template_hash: self.template_hash.clone(),
            seed: self.seed,
            step,
        }
    }

    /// SHA-256 over the header fields and parameter bits.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.header(0)).expect("header serializes"));
        for v in &self.params {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Runs the encoder on already-normalized inputs and keeps activations.
    pub fn forward_cached(&self, x_in: &[Point3], mask: &[bool]) -> Result<ForwardCache> {
        let mut cache = ForwardCache::new(self);
        self.forward_into(x_in, mask, &mut cache)?;
        Ok(cache)
    }

    /// [`MaeModel::forward_cached`] into a reusable cache built for this model.
    pub fn forward_into(&self, x_in: &[Point3], mask: &[bool], cache: &mut ForwardCache) -> Result<()> {
        let n = self.n_vertices;
        if x_in.len() != n || mask.len() != n {
            return Err(Error::dim("model input vertices", n, x_in.len().min(mask.len())));
        }
        let d = self.config.d_model;
        let hidden = d * self.config.mlp_ratio;
        let heads = self.config.heads;
        let p = &self.params;
        let l = &self.layout;
        assert_eq!(cache.blocks.len(), l.blocks.len(), "cache built for another model");

        for (dst, v) in cache.x_in.chunks_exact_mut(3).zip(x_in) {
            dst.copy_from_slice(&[v.x, v.y, v.z]);
        }
        cache.mask.copy_from_slice(mask);

        let mut x = vec![0.0; n * d];
        let (ew, eb) = (&p[l.embed.a.clone()], &p[l.embed.b.clone()]);
        let tok = &p[l.mask_token.clone()];
        let pos = &p[l.pos.clone()];
        for i in 0..n {
            let row = &mut x[i * d..(i + 1) * d];
            if mask[i] {
                row.copy_from_slice(eb);
                for c in 0..3 {
                    nn::axpy(x_in[i][c], &ew[c * d..(c + 1) * d], row);
                }
            } else {
                row.copy_from_slice(tok);
            }
            nn::axpy(1.0, &pos[i * d..(i + 1) * d], row);
        }

        let mut tmp = vec![0.0; n * d];
        for (bl, c) in l.blocks.iter().zip(cache.blocks.iter_mut()) {
            nn::layer_norm(
                &x,
                &p[bl.ln1.a.clone()],
                &p[bl.ln1.b.clone()],
                d,
                &mut c.ln1_out,
                &mut c.ln1_xhat,
                &mut c.ln1_rstd,
            );
            nn::linear(&c.ln1_out, &p[bl.qkv.a.clone()], &p[bl.qkv.b.clone()], n, d, 3 * d, &mut c.qkv);
            nn::attention(&c.qkv, n, d, heads, &mut c.probs, &mut c.attn);
            nn::linear(&c.attn, &p[bl.proj.a.clone()], &p[bl.proj.b.clone()], n, d, d, &mut tmp);
            nn::axpy(1.0, &tmp, &mut x);
            nn::layer_norm(
                &x,
                &p[bl.ln2.a.clone()],
                &p[bl.ln2.b.clone()],
                d,
                &mut c.ln2_out,
                &mut c.ln2_xhat,
                &mut c.ln2_rstd,
            );
            nn::linear(&c.ln2_out, &p[bl.fc1.a.clone()], &p[bl.fc1.b.clone()], n, d, hidden, &mut c.fc1);
            nn::gelu(&c.fc1, &mut c.act, &mut c.tanh);
            nn::linear(&c.act, &p[bl.fc2.a.clone()], &p[bl.fc2.b.clone()], n, hidden, d, &mut tmp);
            nn::axpy(1.0, &tmp, &mut x);
        }

        nn::layer_norm(
            &x,
            &p[l.norm.a.clone()],
            &p[l.norm.b.clone()],
            d,
            &mut cache.lnf_out,
            &mut cache.lnf_xhat,
            &mut cache.lnf_rstd,
        );
        nn::linear(&cache.lnf_out, &p[l.head.a.clone()], &p[l.head.b.clone()], n, d, 3, &mut cache.out);
        Ok(())
    }

    /// Accumulates parameter gradients given `dout = dL/d(cache.out)`.
    pub fn backward(&self, cache: &ForwardCache, dout: &[f64], grads: &mut [f64]) {
        let n = self.n_vertices;
        let d = self.config.d_model;
        let hidden = d * self.config.mlp_ratio;
        let heads = self.config.heads;
        let p = &self.params;
        let l = &self.layout;
        assert_eq!(grads.len(), p.len());

        let mut dy = vec![0.0; n * d];
        {
            let (dw, db) = l.head.split(grads);
            nn::linear_backward(&cache.lnf_out, &p[l.head.a.clone()], dout, n, d, 3, dw, db, Some(&mut dy));
        }
        let mut dx = vec![0.0; n * d];
        {
            let (dg, db) = l.norm.split(grads);
            nn::layer_norm_backward(&dy, &cache.lnf_xhat, &cache.lnf_rstd, &p[l.norm.a.clone()], d, dg, db, &mut dx);
        }

        let mut dact = vec![0.0; n * hidden];
        let mut dln = vec![0.0; n * d];
        let mut dattn = vec![0.0; n * d];
        let mut dqkv = vec![0.0; n * 3 * d];
        for (bl, c) in l.blocks.iter().zip(&cache.blocks).rev() {
            // x_out = h + fc2(gelu(fc1(ln2(h))))
            {
                let (dw, db) = bl.fc2.split(grads);
                nn::linear_backward(&c.act, &p[bl.fc2.a.clone()], &dx, n, hidden, d, dw, db, Some(&mut dact));
            }
            nn::gelu_backward(&c.fc1, &c.tanh, &mut dact);
            {
                let (dw, db) = bl.fc1.split(grads);
                nn::linear_backward(&c.ln2_out, &p[bl.fc1.a.clone()], &dact, n, d, hidden, dw, db, Some(&mut dln));
            }
            {
                let (dg, db) = bl.ln2.split(grads);
                nn::layer_norm_backward(&dln, &c.ln2_xhat, &c.ln2_rstd, &p[bl.ln2.a.clone()], d, dg, db, &mut dx);
            }
            // h = x + proj(attn(ln1(x)))
            {
                let (dw, db) = bl.proj.split(grads);
                nn::linear_backward(&c.attn, &p[bl.proj.a.clone()], &dx, n, d, d, dw, db, Some(&mut dattn));
            }
            nn::attention_backward(&c.qkv, &c.probs, &dattn, n, d, heads, &mut dqkv);
            {
                let (dw, db) = bl.qkv.split(grads);
                nn::linear_backward(&c.ln1_out, &p[bl.qkv.a.clone()], &dqkv, n, d, 3 * d, dw, db, Some(&mut dln));
            }
            {
                let (dg, db) = bl.ln1.split(grads);
                nn::layer_norm_backward(&dln, &c.ln1_xhat, &c.ln1_rstd, &p[bl.ln1.a.clone()], d, dg, db, &mut dx);
            }
        }

        for i in 0..n {
            let g = &dx[i * d..(i + 1) * d];
            nn::axpy(1.0, g, &mut grads[l.pos.start + i * d..l.pos.start + (i + 1) * d]);
            if cache.mask[i] {
                let (dw, db) = l.embed.split(grads);
                nn::axpy(1.0, g, db);
                for c in 0..3 {
                    nn::axpy(cache.x_in[i * 3 + c], g, &mut dw[c * d..(c + 1) * d]);
                }
            } else {
                nn::axpy(1.0, g, &mut grads[l.mask_token.clone()]);
            }
        }
    }

    /// Completes a partial mesh at coarse resolution, in the input's frame.
    pub fn forward(&self, partial: &PartialMesh) -> Result<CoarseMesh> {
        Ok(self.forward_with_stats(partial)?.0)
    }

    pub fn forward_with_stats(&self, partial: &PartialMesh) -> Result<(CoarseMesh, NormStats)> {
        if partial.len() != self.n_vertices {
            return Err(Error::dim("partial mesh vertices", self.n_vertices, partial.len()));
        }
        let (x, stats) = normalize(partial)?;
        let cache = self.forward_cached(&x, &partial.mask)?;
        let vertices = cache
            .out
            .chunks_exact(3)
            .map(|c| stats.invert(&Point3::new(c[0], c[1], c[2])))
            .collect();
        Ok((CoarseMesh::new(vertices), stats))
    }

    /// Applies the learned upsampling matrix to a coarse mesh.
    pub fn upsample(&self, coarse: &CoarseMesh) -> Result<Vec<Point3>> {
        if coarse.len() != self.n_vertices {
            return Err(Error::dim("coarse vertices", self.n_vertices, coarse.len()));
        }
        let u = self.upsample_params();
        let n = self.n_vertices;
        Ok((0..self.n_full)
            .map(|f| {
                let row = &u[f * n..(f + 1) * n];
                let mut acc = Point3::zeros();
                for (w, v) in row.iter().zip(&coarse.vertices) {
                    acc += v * *w;
                }
                acc
            })
            .collect())
    }

    pub fn forward_full(&self, partial: &PartialMesh) -> Result<Vec<Point3>> {
        self.upsample(&self.forward(partial)?)
    }

    /// Writes `path` (tensor archive) and `path.json` (header).
    pub fn save(&self, path: impl AsRef<Path>, step: usize) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut a = Archive::new();
        for info in self.params_info() {
            a.push(
                info.name.clone(),
                Tensor::from_f64(info.shape.clone(), self.params[info.range.clone()].to_vec())?,
            );
        }
        a.write(path)?;
        let hp = header_path(path);
        let text = serde_json::to_string_pretty(&self.header(step)).expect("header serializes");
        std::fs::write(&hp, text).map_err(|e| Error::io(&hp, e))
    }

    /// Loads a checkpoint, checking every tensor against the header shapes.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, CheckpointHeader)> {
        let path = path.as_ref();
        let hp = header_path(path);
        let text = std::fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
        let h: CheckpointHeader = serde_json::from_str(&text)
            .map_err(|e| Error::format(0, format!("{}: {e}", hp.display())))?;
        let cfg = MaeConfig {
            d_model: h.d_model,
            blocks: h.blocks,
            heads: h.heads,
            mlp_ratio: h.mlp_ratio,
        };
        let mut m = Self::zeros(cfg, h.n_vertices, h.n_full, h.seed)?;
        m.template_hash = h.template_hash.clone();
        let a = Archive::read(path)?;
        if a.entries.len() != m.layout.entries.len() {
            return Err(Error::format(0, format!(
                "checkpoint has {} tensors, header implies {}",
                a.entries.len(),
                m.layout.entries.len()
            )));
        }
        for (info, _) in &m.layout.entries {
            let t = a.require(&info.name)?;
            if t.dims != info.shape {
                return Err(Error::format(0, format!(
                    "tensor {} has shape {:?}, header implies {:?}",
                    info.name, t.dims, info.shape
                )));
            }
            m.params[info.range.clone()].copy_from_slice(&t.to_f64());
        }
        Ok((m, h))
    }

    /// Fails when the model was built for a different template.
    pub fn check_template(&self, template: &TemplateMesh) -> Result<()> {
        if template.n_coarse() != self.n_vertices || template.n_full() != self.n_full {
            return Err(Error::Config(format!(
                "model expects {} coarse / {} full vertices, template has {} / {}",
                self.n_vertices,
                self.n_full,
                template.n_coarse(),
                template.n_full()
            )));
        }
        Ok(())
    }
}

pub fn header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy;
    use rand::Rng;

    fn partial_from(vs: &[[f64; 3]], mask: &[bool]) -> PartialMesh {
        PartialMesh::new(vs.iter().map(|v| Point3::new(v[0], v[1], v[2])).collect(), mask.to_vec()).unwrap()
    }

    #[test]
    fn normalize_two_points() {
        let p = partial_from(&[[1.0; 3], [3.0; 3]], &[true, true]);
        let (x, s) = normalize(&p).unwrap();
        // Pooled deviations are all +-1, so the std is 1.
        let devs: Vec<f64> = [-1.0f64, -1.0, -1.0, 1.0, 1.0, 1.0].to_vec();
        let oracle = (devs.iter().map(|d| d * d).sum::<f64>() / 6.0).sqrt();
        assert_eq!(s.mean, Vector3::new(2.0, 2.0, 2.0));
        assert!((s.scale - oracle).abs() < 1e-15);
        assert_eq!(x[0], Point3::new(-1.0, -1.0, -1.0));
        assert_eq!(x[1], Point3::new(1.0, 1.0, 1.0));
    }

    #[test]
    fn normalize_rejects_single_visible() {
        let p = partial_from(&[[1.0; 3], [3.0; 3]], &[true, false]);
        assert!(matches!(normalize(&p), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn normalize_rejects_coincident_points() {
        let p = partial_from(&[[1.0; 3], [1.0; 3]], &[true, true]);
        assert!(matches!(normalize(&p), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn normalized_cloud_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pts: Vec<Point3> = (0..50)
            .map(|_| Point3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let p = PartialMesh::new(pts.clone(), vec![true; 50]).unwrap();
        let (x, _) = normalize(&p).unwrap();
        pts = x.clone();
        let (y, s) = normalize(&PartialMesh::new(pts, vec![true; 50]).unwrap()).unwrap();
        assert!(s.mean.norm() < 1e-12 && (s.scale - 1.0).abs() < 1e-12);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn zero_head_predicts_the_mean_everywhere() {
        let t = toy::octahedron_template();
        let mut m = MaeModel::new(MaeConfig::default(), &t, 3).unwrap();
        m.param_mut("head.weight").unwrap().fill(0.0);
        m.param_mut("head.bias").unwrap().fill(0.0);
        let p = PartialMesh::new(t.coarse_rest().vertices, vec![true, true, true, false, false, false]).unwrap();
        let (_, s) = normalize(&p).unwrap();
        for v in m.forward(&p).unwrap().vertices {
            assert!((v - s.mean).norm() < 1e-15);
        }
    }

    #[test]
    fn permuting_vertex_slots_changes_the_output() {
        let t = toy::toy_template();
        let m = MaeModel::new(MaeConfig::default(), &t, 9).unwrap();
        let rest = t.coarse_rest().vertices;
        let mask: Vec<bool> = (0..rest.len()).map(|i| i % 3 == 0).collect();
        let a = m.forward(&PartialMesh::new(rest.clone(), mask.clone()).unwrap()).unwrap();
        let mut perm: Vec<usize> = (0..rest.len()).collect();
        perm.reverse();
        let pv: Vec<Point3> = perm.iter().map(|&i| rest[i]).collect();
        let pm: Vec<bool> = perm.iter().map(|&i| mask[i]).collect();
        let b = m.forward(&PartialMesh::new(pv, pm).unwrap()).unwrap();
        let unpermuted: Vec<Point3> = (0..rest.len()).map(|i| b.vertices[perm[i]]).collect();
        assert_ne!(a.vertices, unpermuted);
    }

    #[test]
    fn output_is_finite_for_dense_and_minimal_masks() {
        let t = toy::toy_template();
        let m = MaeModel::new(MaeConfig::default(), &t, 2).unwrap();
        let rest = t.coarse_rest().vertices;
        let n = rest.len();
        let mut minimal = vec![false; n];
        minimal[0] = true;
        minimal[n - 1] = true;
        for mask in [vec![true; n], minimal] {
            let out = m.forward(&PartialMesh::new(rest.clone(), mask).unwrap()).unwrap();
            assert_eq!(out.len(), n);
            assert!(out.is_finite());
        }
    }

    #[test]
    fn identity_upsample_matches_coarse_output() {
        let t = toy::octahedron_template();
        let m = MaeModel::new(MaeConfig::default(), &t, 4).unwrap();
        let p = PartialMesh::new(t.coarse_rest().vertices, vec![true; 6]).unwrap();
        let coarse = m.forward(&p).unwrap();
        let full = m.forward_full(&p).unwrap();
        for (a, b) in coarse.vertices.iter().zip(&full) {
            assert!((a - b).norm() < 1e-12);
        }
        let zero = m.upsample(&CoarseMesh::new(vec![Point3::zeros(); 6])).unwrap();
        assert!(zero.iter().all(|v| *v == Point3::zeros()));
    }

    #[test]
    fn checkpoint_round_trip_and_shape_check() {
        let t = toy::octahedron_template();
        let m = MaeModel::new(MaeConfig { blocks: 2, ..Default::default() }, &t, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tens");
        m.save(&path, 7).unwrap();
        let (back, h) = MaeModel::load(&path).unwrap();
        assert_eq!(h.step, 7);
        assert_eq!(back.params, m.params);
        assert_eq!(back.content_hash(), m.content_hash());

        let mut h2 = h.clone();
        h2.d_model = 8;
        h2.heads = 2;
        std::fs::write(header_path(&path), serde_json::to_string(&h2).unwrap()).unwrap();
        assert!(MaeModel::load(&path).is_err());
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = MaeConfig { d_model: 10, heads: 4, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
