//! The two classifier families and their shared plumbing: a patch-token
//! transformer and a denoiser-fronted CNN, both mapping a `[3, H, W]` image
//! to two logits (bona fide = class 0, morph = class 1), plus checkpointing
//! and the training loop.

mod noise_aware;
mod train;
mod vit;

use std::path::Path;

use morphguard_tensor::{checkpoint, BnBatchStats, Graph, Tensor, TensorId};

pub use noise_aware::{NoiseAware, NoiseAwareConfig};
pub use train::{train_model, EpochStats, TrainConfig};
pub use vit::{encoder_block, msa, tokenize, AttnWeights, BlockWeights, ViT, ViTConfig};

use crate::error::{CoreError, Result};

/// Layer-norm epsilon.
pub const LN_EPS: f64 = 1e-6;
/// Batch-norm and instance-norm epsilon.
pub const BN_EPS: f64 = 1e-5;

/// Whether batch norm uses per-batch statistics (`Train`) or frozen running
/// statistics (`Eval`). Attack crafting and evaluation run in `Eval` so the
/// model is a fixed deterministic function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handles into a graph after one forward pass.
pub struct Forward {
    pub logits: TensorId,
    /// Penultimate activation: the class-token representation for the
    /// transformer, pooled channels for the CNN.
    pub features: TensorId,
    /// Leaf ids for every parameter, aligned with `Model::params()` order.
    pub param_ids: Vec<TensorId>,
    /// Per-batch-norm-layer statistics collected in `Train` mode, in forward
    /// order; empty for models without batch norm or in `Eval` mode.
    pub bn_stats: Vec<BnBatchStats>,
}

/// Negative log-likelihood of class `label` under softmax logits.
pub fn cross_entropy(g: &mut Graph, logits: TensorId, label: usize) -> Result<TensorId> {
    let p = g.softmax(logits, 0)?;
    let py = g.take_index(p, label)?;
    let lp = g.log(py);
    Ok(g.mul_scalar(lp, -1.0))
}

const MAGIC: &[u8; 4] = b"MGM1";
const VERSION: u32 = 1;
const KIND_VIT: u64 = 1;
const KIND_NOISE_AWARE: u64 = 2;

#[derive(Debug, Clone)]
pub enum Model {
    ViT(ViT),
    NoiseAware(NoiseAware),
}

impl Model {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Model::ViT(_) => "vit",
            Model::NoiseAware(_) => "noise-aware",
        }
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        match self {
            Model::ViT(m) => m.params(),
            Model::NoiseAware(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor)] {
        match self {
            Model::ViT(m) => m.params_mut(),
            Model::NoiseAware(m) => m.params_mut(),
        }
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params().iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params_mut().iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn image_size(&self) -> usize {
        match self {
            Model::ViT(m) => m.cfg.image_size,
            Model::NoiseAware(m) => m.cfg.image_size,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            Model::ViT(m) => m.cfg.channels,
            Model::NoiseAware(m) => m.cfg.channels,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Model::ViT(m) => m.cfg.num_classes,
            Model::NoiseAware(m) => m.cfg.num_classes,
        }
    }

    /// Dimension of the penultimate activation fed to the linear head.
    pub fn feature_dim(&self) -> usize {
        match self {
            Model::ViT(m) => m.cfg.embed_dim,
            Model::NoiseAware(m) => m.cfg.classifier_width,
        }
    }

    pub fn forward(&self, g: &mut Graph, image: TensorId, mode: Mode) -> Result<Forward> {
        match self {
            Model::ViT(m) => m.forward(g, image, mode),
            Model::NoiseAware(m) => m.forward(g, image, mode),
        }
    }

    pub fn fold_bn_stats(&mut self, per_example: &[Vec<BnBatchStats>], momentum: f64) {
        match self {
            Model::ViT(_) => {}
            Model::NoiseAware(m) => m.fold_bn_stats(per_example, momentum),
        }
    }

    fn eval_graph(&self, image: &[f64]) -> Result<(Graph, Forward)> {
        let s = self.image_size();
        let mut g = Graph::new();
        let x = g.constant(&[self.channels(), s, s], image.to_vec())?;
        let fwd = self.forward(&mut g, x, Mode::Eval)?;
        Ok((g, fwd))
    }

    /// Logits for one image, in eval mode.
    pub fn logits_for(&self, image: &[f64]) -> Result<Vec<f64>> {
        let (g, fwd) = self.eval_graph(image)?;
        Ok(g.value(fwd.logits).to_vec())
    }

    /// Softmax class probabilities for one image, in eval mode.
    pub fn probs_for(&self, image: &[f64]) -> Result<Vec<f64>> {
        let s = self.image_size();
        let mut g = Graph::new();
        let x = g.constant(&[self.channels(), s, s], image.to_vec())?;
        let fwd = self.forward(&mut g, x, Mode::Eval)?;
        let p = g.softmax(fwd.logits, 0)?;
        Ok(g.value(p).to_vec())
    }

    /// Penultimate-layer activation for one image, in eval mode.
    pub fn features_for(&self, image: &[f64]) -> Result<Vec<f64>> {
        let (g, fwd) = self.eval_graph(image)?;
        Ok(g.value(fwd.features).to_vec())
    }

    /// FNV-1a digest over parameter names, shapes, and exact values. Two
    /// models agree on every weight iff their digests match (up to hash
    /// collisions); used to assert frozen members stay frozen.
    pub fn param_digest(&self) -> u64 {
        let mut h = Fnv::new();
        h.bytes(self.kind_name().as_bytes());
        h.u64(self.params().len() as u64);
        for (name, t) in self.params() {
            h.bytes(name.as_bytes());
            h.u64(t.shape().len() as u64);
            for &e in t.shape() {
                h.u64(e as u64);
            }
            for &v in t.data() {
                h.u64(v.to_bits());
            }
        }
        h.finish()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        match self {
            Model::ViT(m) => {
                buf.extend_from_slice(&KIND_VIT.to_le_bytes());
                let c = &m.cfg;
                for v in [
                    c.image_size,
                    c.channels,
                    c.patch_size,
                    c.embed_dim,
                    c.num_heads,
                    c.head_dim,
                    c.num_blocks,
                    c.ffn_hidden,
                    c.num_classes,
                ] {
                    buf.extend_from_slice(&(v as u64).to_le_bytes());
                }
            }
            Model::NoiseAware(m) => {
                buf.extend_from_slice(&KIND_NOISE_AWARE.to_le_bytes());
                let c = &m.cfg;
                for v in [c.image_size, c.channels, c.width, c.classifier_width, c.num_classes] {
                    buf.extend_from_slice(&(v as u64).to_le_bytes());
                }
                buf.extend_from_slice(&c.leaky_slope.to_bits().to_le_bytes());
                buf.extend_from_slice(&(c.dilations.len() as u64).to_le_bytes());
                for &d in &c.dilations {
                    buf.extend_from_slice(&(d as u64).to_le_bytes());
                }
            }
        }
        buf.extend_from_slice(&(self.params().len() as u64).to_le_bytes());
        for (name, t) in self.params() {
            checkpoint::encode_record(&mut buf, name, t);
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let bytes = std::fs::read(path)?;
        let mut r = checkpoint::Reader::new(&bytes);
        r.expect_magic(MAGIC).map_err(|e| CoreError::Format(e.to_string()))?;
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(CoreError::Format(format!("unsupported version {version}")));
        }
        let kind = r.u64("model kind")?;
        let model = match kind {
            KIND_VIT => {
                let mut ints = [0u64; 9];
                for (i, slot) in ints.iter_mut().enumerate() {
                    *slot = r.u64(VIT_FIELDS[i])?;
                }
                let cfg = ViTConfig {
                    image_size: ints[0] as usize,
                    channels: ints[1] as usize,
                    patch_size: ints[2] as usize,
                    embed_dim: ints[3] as usize,
                    num_heads: ints[4] as usize,
                    head_dim: ints[5] as usize,
                    num_blocks: ints[6] as usize,
                    ffn_hidden: ints[7] as usize,
                    num_classes: ints[8] as usize,
                };
                let params = read_params(&mut r, |_| true)?;
                Model::ViT(ViT::from_params(cfg, params)?)
            }
            KIND_NOISE_AWARE => {
                let image_size = r.u64("image size")? as usize;
                let channels = r.u64("channels")? as usize;
                let width = r.u64("width")? as usize;
                let classifier_width = r.u64("classifier width")? as usize;
                let num_classes = r.u64("class count")? as usize;
                let leaky_slope = r.f64("leaky slope")?;
                let n_layers = r.u64("layer count")? as usize;
                if n_layers > 4096 {
                    return Err(CoreError::Format(format!("implausible layer count {n_layers}")));
                }
                let mut dilations = Vec::with_capacity(n_layers);
                for _ in 0..n_layers {
                    dilations.push(r.u64("dilation")? as usize);
                }
                let cfg = NoiseAwareConfig {
                    image_size,
                    channels,
                    width,
                    dilations,
                    leaky_slope,
                    classifier_width,
                    num_classes,
                };
                let params = read_params(&mut r, |name| !noise_aware::is_running_stat(name))?;
                Model::NoiseAware(NoiseAware::from_params(cfg, params)?)
            }
            other => return Err(CoreError::Format(format!("unknown model kind {other}"))),
        };
        Ok(model)
    }
}

const VIT_FIELDS: [&str; 9] = [
    "image size",
    "channels",
    "patch size",
    "embed dim",
    "head count",
    "head dim",
    "block count",
    "ffn width",
    "class count",
];

fn read_params(
    r: &mut checkpoint::Reader,
    trainable: impl Fn(&str) -> bool,
) -> Result<Vec<(String, Tensor)>> {
    let count = r.u64("parameter count")? as usize;
    if count > 1 << 20 {
        return Err(CoreError::Format(format!("implausible parameter count {count}")));
    }
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let (name, t) = r.record()?;
        let t = if trainable(&name) { t.with_grad() } else { t };
        params.push((name, t));
    }
    if !r.at_end() {
        return Err(CoreError::Format("trailing bytes after final parameter".into()));
    }
    Ok(params)
}

/// Incremental FNV-1a over little-endian words.
struct Fnv(u64);

impl Fnv {
    fn new() -> Fnv {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn bytes(&mut self, data: &[u8]) {
        for &b in data {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    fn finish(&self) -> u64 {
        self.0
    }
}
