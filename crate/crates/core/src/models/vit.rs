//! Patch-token transformer binary classifier.
//!
//! An image is cut into non-overlapping patches, each flattened and linearly
//! projected; a learned class token is prepended and positional embeddings
//! added. Pre-norm encoder blocks (multi-head self-attention, then a GELU
//! FFN, each behind a residual connection) process the token sequence, and
//! the classification head reads the class-token row after a final layer
//! norm.

use morphguard_tensor::{Graph, Tensor, TensorId};
use rand_core::RngCore;

use super::{Forward, Mode, LN_EPS};
use crate::error::{CoreError, Result};
use crate::rng;

/// Weight scale for gaussian-initialized parameters.
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub num_blocks: usize,
    pub ffn_hidden: usize,
    pub num_classes: usize,
}

impl ViTConfig {
    /// Small configuration sized for 32x32 synthetic faces on a CPU.
    pub fn desk_default() -> ViTConfig {
        ViTConfig {
            image_size: 32,
            channels: 3,
            patch_size: 8,
            embed_dim: 64,
            num_heads: 4,
            head_dim: 16,
            num_blocks: 2,
            ffn_hidden: 128,
            num_classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |why: String| Err(CoreError::contract("ViTConfig", why));
        if self.channels == 0 || self.embed_dim == 0 || self.ffn_hidden == 0 {
            return fail("channels, embed_dim, and ffn_hidden must be positive".into());
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "patch size {} must divide image size {}",
                self.patch_size, self.image_size
            ));
        }
        if self.num_heads * self.head_dim != self.embed_dim {
            return fail(format!(
                "{} heads x {} head dim != {} embed dim",
                self.num_heads, self.head_dim, self.embed_dim
            ));
        }
        if self.num_blocks == 0 {
            return fail("at least one encoder block required".into());
        }
        if self.num_classes < 2 {
            return fail("need at least two classes".into());
        }
        Ok(())
    }

    /// Number of patch tokens (excluding the class token).
    pub fn n_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }
}

/// Flatten patches, project to the embedding dimension, prepend the class
/// token, and add positional embeddings. Returns an `[N+1, D]` token matrix.
pub fn tokenize(
    g: &mut Graph,
    image: TensorId,
    patch_size: usize,
    proj_weight: TensorId,
    proj_bias: TensorId,
    class_token: TensorId,
    pos_embed: TensorId,
) -> Result<TensorId> {
    let patches = g.img2patches(image, patch_size)?;
    let projected = g.matmul(patches, proj_weight)?;
    let projected = g.add_bias(projected, proj_bias)?;
    let tokens = g.concat(&[class_token, projected], 0)?;
    Ok(g.add(tokens, pos_embed)?)
}

pub struct AttnWeights {
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
}

/// Multi-head self-attention: per head, softmax(Q K^T / sqrt(d_k)) V; head
/// outputs are concatenated along channels and projected by `wo`. Returns
/// the block output and one attention map per head.
pub fn msa(
    g: &mut Graph,
    x: TensorId,
    w: &AttnWeights,
    num_heads: usize,
    head_dim: usize,
) -> Result<(TensorId, Vec<TensorId>)> {
    let d = *g.shape(x).last().unwrap_or(&0);
    if num_heads * head_dim != d {
        return Err(CoreError::contract(
            "msa",
            format!("{num_heads} heads x {head_dim} head dim != {d} embedding"),
        ));
    }
    let q = g.matmul(x, w.wq)?;
    let k = g.matmul(x, w.wk)?;
    let v = g.matmul(x, w.wv)?;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(num_heads);
    let mut maps = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qi = g.slice_cols(q, h * head_dim, head_dim)?;
        let ki = g.slice_cols(k, h * head_dim, head_dim)?;
        let vi = g.slice_cols(v, h * head_dim, head_dim)?;
        let kt = g.transpose(ki)?;
        let s = g.matmul(qi, kt)?;
        let s = g.mul_scalar(s, scale);
        let a = g.softmax(s, 1)?;
        maps.push(a);
        outs.push(g.matmul(a, vi)?);
    }
    let cat = g.concat(&outs, 1)?;
    let out = g.matmul(cat, w.wo)?;
    Ok((out, maps))
}

pub struct BlockWeights {
    pub ln1_gamma: TensorId,
    pub ln1_beta: TensorId,
    pub attn: AttnWeights,
    pub ln2_gamma: TensorId,
    pub ln2_beta: TensorId,
    pub ffn_w1: TensorId,
    pub ffn_b1: TensorId,
    pub ffn_w2: TensorId,
    pub ffn_b2: TensorId,
}

/// One pre-norm encoder block: x + MSA(LN(x)), then + FFN(LN(..)), with the
/// FFN being linear -> GELU -> linear.
pub fn encoder_block(
    g: &mut Graph,
    x: TensorId,
    w: &BlockWeights,
    num_heads: usize,
    head_dim: usize,
) -> Result<TensorId> {
    let h1 = g.layer_norm(x, w.ln1_gamma, w.ln1_beta, LN_EPS)?;
    let (attn_out, _) = msa(g, h1, &w.attn, num_heads, head_dim)?;
    let x1 = g.add(x, attn_out)?;
    let h2 = g.layer_norm(x1, w.ln2_gamma, w.ln2_beta, LN_EPS)?;
    let f = g.matmul(h2, w.ffn_w1)?;
    let f = g.add_bias(f, w.ffn_b1)?;
    let f = g.gelu(f);
    let f = g.matmul(f, w.ffn_w2)?;
    let f = g.add_bias(f, w.ffn_b2)?;
    Ok(g.add(x1, f)?)
}

#[derive(Debug, Clone)]
pub struct ViT {
    pub cfg: ViTConfig,
    pub(super) params: Vec<(String, Tensor)>,
}

/// Per-block parameter count in the flat parameter list.
const BLOCK_PARAMS: usize = 12;
/// Parameters before the first block: projection weight/bias, class token,
/// positional embeddings.
const STEM_PARAMS: usize = 4;

/// Names and shapes of every parameter, in storage order.
pub(super) fn param_spec(cfg: &ViTConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.embed_dim;
    let mut spec = vec![
        ("patch_proj.weight".into(), vec![cfg.patch_size * cfg.patch_size * cfg.channels, d]),
        ("patch_proj.bias".into(), vec![d]),
        ("class_token".into(), vec![1, d]),
        ("pos_embed".into(), vec![cfg.n_patches() + 1, d]),
    ];
    for b in 0..cfg.num_blocks {
        spec.push((format!("block{b}.ln1.gamma"), vec![d]));
        spec.push((format!("block{b}.ln1.beta"), vec![d]));
        for w in ["wq", "wk", "wv", "wo"] {
            spec.push((format!("block{b}.attn.{w}"), vec![d, d]));
        }
        spec.push((format!("block{b}.ln2.gamma"), vec![d]));
        spec.push((format!("block{b}.ln2.beta"), vec![d]));
        spec.push((format!("block{b}.ffn.w1"), vec![d, cfg.ffn_hidden]));
        spec.push((format!("block{b}.ffn.b1"), vec![cfg.ffn_hidden]));
        spec.push((format!("block{b}.ffn.w2"), vec![cfg.ffn_hidden, d]));
        spec.push((format!("block{b}.ffn.b2"), vec![d]));
    }
    spec.push(("final_ln.gamma".into(), vec![d]));
    spec.push(("final_ln.beta".into(), vec![d]));
    spec.push(("head.weight".into(), vec![d, cfg.num_classes]));
    spec.push(("head.bias".into(), vec![cfg.num_classes]));
    spec
}

fn init_tensor(name: &str, shape: &[usize], r: &mut (impl RngCore + ?Sized)) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = if name.ends_with(".gamma") {
        vec![1.0; n]
    } else if name.ends_with(".beta") || name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") {
        vec![0.0; n]
    } else {
        (0..n).map(|_| rng::gaussian(r) * INIT_STD).collect()
    };
    Tensor::from_vec(shape.to_vec(), data).expect("spec shapes are consistent").with_grad()
}

impl ViT {
    pub fn init(cfg: ViTConfig, seed: u64) -> Result<ViT> {
        cfg.validate()?;
        let mut r = rng::stream(seed, "vit-init", 0);
        let params = param_spec(&cfg)
            .into_iter()
            .map(|(name, shape)| {
                let t = init_tensor(&name, &shape, &mut r);
                (name, t)
            })
            .collect();
        Ok(ViT { cfg, params })
    }

    pub(super) fn from_params(cfg: ViTConfig, params: Vec<(String, Tensor)>) -> Result<ViT> {
        cfg.validate()?;
        let spec = param_spec(&cfg);
        if params.len() != spec.len() {
            return Err(CoreError::Format(format!(
                "expected {} parameters, file holds {}",
                spec.len(),
                params.len()
            )));
        }
        for ((name, tensor), (want_name, want_shape)) in params.iter().zip(&spec) {
            if name != want_name || tensor.shape() != &want_shape[..] {
                return Err(CoreError::Format(format!(
                    "parameter {name} {:?} does not match expected {want_name} {want_shape:?}",
                    tensor.shape()
                )));
            }
        }
        Ok(ViT { cfg, params })
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn forward(&self, g: &mut Graph, image: TensorId, _mode: Mode) -> Result<Forward> {
        let ids: Vec<TensorId> = self.params.iter().map(|(_, t)| g.leaf(t)).collect();
        let tokens = tokenize(g, image, self.cfg.patch_size, ids[0], ids[1], ids[2], ids[3])?;
        let mut x = tokens;
        for b in 0..self.cfg.num_blocks {
            let o = STEM_PARAMS + b * BLOCK_PARAMS;
            let w = BlockWeights {
                ln1_gamma: ids[o],
                ln1_beta: ids[o + 1],
                attn: AttnWeights { wq: ids[o + 2], wk: ids[o + 3], wv: ids[o + 4], wo: ids[o + 5] },
                ln2_gamma: ids[o + 6],
                ln2_beta: ids[o + 7],
                ffn_w1: ids[o + 8],
                ffn_b1: ids[o + 9],
                ffn_w2: ids[o + 10],
                ffn_b2: ids[o + 11],
            };
            x = encoder_block(g, x, &w, self.cfg.num_heads, self.cfg.head_dim)?;
        }
        let o = STEM_PARAMS + self.cfg.num_blocks * BLOCK_PARAMS;
        let x = g.layer_norm(x, ids[o], ids[o + 1], LN_EPS)?;
        let cls = g.slice_rows(x, 0, 1)?;
        let logits = g.matmul(cls, ids[o + 2])?;
        let logits = g.add_bias(logits, ids[o + 3])?;
        let logits = g.reshape(logits, &[self.cfg.num_classes])?;
        let features = g.reshape(cls, &[self.cfg.embed_dim])?;
        Ok(Forward { logits, features, param_ids: ids, bn_stats: Vec::new() })
    }
}
