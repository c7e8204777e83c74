//! Denoiser-fronted CNN classifier.
//!
//! A stack of dilated 3x3 convolutions estimates the clean image; the
//! residual (input minus estimate) carries the high-frequency traces that
//! morphing leaves behind, and a small residual CNN classifies that residual
//! rather than the image itself. Each denoiser layer splits the convolution
//! output into a scaled identity branch and a batch-norm branch, sums them,
//! applies a leaky ReLU, and blends the activation with its instance-
//! normalized form through two learned scalars.

use morphguard_tensor::{BnBatchStats, Graph, Tensor, TensorId};
use rand_core::RngCore;

use super::{Forward, Mode, BN_EPS};
use crate::error::{CoreError, Result};
use crate::rng;

/// Weight scale for the classification head.
const HEAD_STD: f64 = 0.02;
/// Residual blocks in the classifier.
const CLS_BLOCKS: usize = 2;
/// Parameters per denoiser layer in the flat list.
const LAYER_PARAMS: usize = 9;
/// Parameters in a batch-norm group: gamma, beta, running mean, running var.
const BN_PARAMS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseAwareConfig {
    pub image_size: usize,
    pub channels: usize,
    /// Channel width of the denoiser stack.
    pub width: usize,
    /// Per-layer dilation factors; the schedule length is the layer count.
    pub dilations: Vec<usize>,
    pub leaky_slope: f64,
    /// Channel width of the residual classifier.
    pub classifier_width: usize,
    pub num_classes: usize,
}

impl NoiseAwareConfig {
    /// Small configuration sized for 32x32 synthetic faces on a CPU.
    pub fn desk_default() -> NoiseAwareConfig {
        NoiseAwareConfig {
            image_size: 32,
            channels: 3,
            width: 16,
            dilations: vec![1, 2, 3, 4, 3, 2, 1],
            leaky_slope: 0.1,
            classifier_width: 16,
            num_classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |why: String| Err(CoreError::contract("NoiseAwareConfig", why));
        if self.image_size < 4 {
            return fail("image size must be at least 4".into());
        }
        if self.channels == 0 || self.width == 0 || self.classifier_width == 0 {
            return fail("channel widths must be positive".into());
        }
        if self.dilations.is_empty() {
            return fail("at least one denoiser layer required".into());
        }
        if self.dilations.iter().any(|&d| d == 0) {
            return fail("dilations must be positive".into());
        }
        // The receptive field must not shrink on the way to the middle layer.
        let mid = (self.dilations.len() - 1) / 2;
        for i in 0..mid {
            if self.dilations[i] > self.dilations[i + 1] {
                return fail(format!(
                    "dilation schedule {:?} shrinks before the middle layer",
                    self.dilations
                ));
            }
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return fail("leaky slope must be finite and non-negative".into());
        }
        if self.num_classes < 2 {
            return fail("need at least two classes".into());
        }
        Ok(())
    }

    fn n_layers(&self) -> usize {
        self.dilations.len()
    }
}

/// Names and shapes of every parameter, in storage order. Running statistics
/// ride along with their batch-norm layer so checkpoints capture them.
pub(super) fn param_spec(cfg: &NoiseAwareConfig) -> Vec<(String, Vec<usize>)> {
    let w = cfg.width;
    let cw = cfg.classifier_width;
    let mut spec = Vec::new();
    for i in 0..cfg.n_layers() {
        let cin = if i == 0 { cfg.channels } else { w };
        spec.push((format!("denoise.layer{i}.conv.weight"), vec![w, cin, 3, 3]));
        spec.push((format!("denoise.layer{i}.conv.bias"), vec![w]));
        spec.push((format!("denoise.layer{i}.skip_scale"), vec![w]));
        spec.push((format!("denoise.layer{i}.bn.gamma"), vec![w]));
        spec.push((format!("denoise.layer{i}.bn.beta"), vec![w]));
        spec.push((format!("denoise.layer{i}.bn.running_mean"), vec![w]));
        spec.push((format!("denoise.layer{i}.bn.running_var"), vec![w]));
        spec.push((format!("denoise.layer{i}.norm_mix.a"), vec![1]));
        spec.push((format!("denoise.layer{i}.norm_mix.b"), vec![1]));
    }
    spec.push(("denoise.project.weight".into(), vec![cfg.channels, w, 3, 3]));
    spec.push(("denoise.project.bias".into(), vec![cfg.channels]));

    let bn_group = |spec: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
        spec.push((format!("{prefix}.gamma"), vec![cw]));
        spec.push((format!("{prefix}.beta"), vec![cw]));
        spec.push((format!("{prefix}.running_mean"), vec![cw]));
        spec.push((format!("{prefix}.running_var"), vec![cw]));
    };
    spec.push(("classify.stem.conv.weight".into(), vec![cw, cfg.channels, 3, 3]));
    spec.push(("classify.stem.conv.bias".into(), vec![cw]));
    bn_group(&mut spec, "classify.stem.bn");
    for j in 0..CLS_BLOCKS {
        spec.push((format!("classify.block{j}.conv1.weight"), vec![cw, cw, 3, 3]));
        spec.push((format!("classify.block{j}.conv1.bias"), vec![cw]));
        bn_group(&mut spec, &format!("classify.block{j}.bn1"));
        spec.push((format!("classify.block{j}.conv2.weight"), vec![cw, cw, 3, 3]));
        spec.push((format!("classify.block{j}.conv2.bias"), vec![cw]));
        bn_group(&mut spec, &format!("classify.block{j}.bn2"));
    }
    spec.push(("classify.head.weight".into(), vec![cw, cfg.num_classes]));
    spec.push(("classify.head.bias".into(), vec![cfg.num_classes]));
    spec
}

pub(super) fn is_running_stat(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

fn init_tensor(name: &str, shape: &[usize], r: &mut (impl RngCore + ?Sized)) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = if name == "denoise.project.weight" {
        // Identity start: the stack predicts zero noise until trained.
        vec![0.0; n]
    } else if name.ends_with("conv.weight")
        || name.ends_with("conv1.weight")
        || name.ends_with("conv2.weight")
    {
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let std = (2.0 / fan_in).sqrt();
        (0..n).map(|_| rng::gaussian(r) * std).collect()
    } else if name == "classify.head.weight" {
        (0..n).map(|_| rng::gaussian(r) * HEAD_STD).collect()
    } else if name.ends_with(".gamma")
        || name.ends_with(".running_var")
        || name.ends_with(".skip_scale")
        || name.ends_with("norm_mix.a")
    {
        vec![1.0; n]
    } else {
        // Beta, biases, running means, and the normalization mix-in start at
        // zero.
        vec![0.0; n]
    };
    let t = Tensor::from_vec(shape.to_vec(), data).expect("spec shapes are consistent");
    if is_running_stat(name) {
        t
    } else {
        t.with_grad()
    }
}

#[derive(Debug, Clone)]
pub struct NoiseAware {
    pub cfg: NoiseAwareConfig,
    pub(super) params: Vec<(String, Tensor)>,
}

impl NoiseAware {
    pub fn init(cfg: NoiseAwareConfig, seed: u64) -> Result<NoiseAware> {
        cfg.validate()?;
        let mut r = rng::stream(seed, "noise-aware-init", 0);
        let params = param_spec(&cfg)
            .into_iter()
            .map(|(name, shape)| {
                let t = init_tensor(&name, &shape, &mut r);
                (name, t)
            })
            .collect();
        Ok(NoiseAware { cfg, params })
    }

    pub(super) fn from_params(
        cfg: NoiseAwareConfig,
        params: Vec<(String, Tensor)>,
    ) -> Result<NoiseAware> {
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
        Ok(NoiseAware { cfg, params })
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

    fn project_base(&self) -> usize {
        self.cfg.n_layers() * LAYER_PARAMS
    }

    fn stem_base(&self) -> usize {
        self.project_base() + 2
    }

    fn block_base(&self, j: usize) -> usize {
        self.stem_base() + 2 + BN_PARAMS + j * (2 + BN_PARAMS) * 2
    }

    fn head_base(&self) -> usize {
        self.block_base(CLS_BLOCKS)
    }

    /// Parameter indices of (running_mean, running_var) for each batch-norm
    /// layer, in the order the forward pass encounters them.
    fn bn_stat_indices(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.cfg.n_layers() {
            out.push((i * LAYER_PARAMS + 5, i * LAYER_PARAMS + 6));
        }
        let s = self.stem_base();
        out.push((s + 4, s + 5));
        for j in 0..CLS_BLOCKS {
            let b = self.block_base(j);
            out.push((b + 4, b + 5));
            out.push((b + 10, b + 11));
        }
        out
    }

    /// Batch norm that reads per-batch statistics while training and frozen
    /// running statistics otherwise. `gamma_idx` is the parameter index of
    /// the layer's gamma; beta and the running stats follow it.
    fn bn(
        &self,
        g: &mut Graph,
        x: TensorId,
        ids: &[TensorId],
        gamma_idx: usize,
        mode: Mode,
        stats: &mut Vec<BnBatchStats>,
    ) -> Result<TensorId> {
        match mode {
            Mode::Train => {
                let (y, st) = g.batch_norm_train(x, ids[gamma_idx], ids[gamma_idx + 1], BN_EPS)?;
                stats.push(st);
                Ok(y)
            }
            Mode::Eval => {
                let rm = self.params[gamma_idx + 2].1.data();
                let rv = self.params[gamma_idx + 3].1.data();
                Ok(g.batch_norm_running(x, ids[gamma_idx], ids[gamma_idx + 1], rm, rv, BN_EPS)?)
            }
        }
    }

    fn bind(&self, g: &mut Graph) -> Vec<TensorId> {
        self.params.iter().map(|(_, t)| g.leaf(t)).collect()
    }

    /// Denoiser stack over a bound parameter list. Returns (clean, residual),
    /// both `[1, C, H, W]`.
    fn denoise_bound(
        &self,
        g: &mut Graph,
        image: TensorId,
        ids: &[TensorId],
        mode: Mode,
        stats: &mut Vec<BnBatchStats>,
    ) -> Result<(TensorId, TensorId)> {
        let shape = g.shape(image).to_vec();
        let x4 = if shape.len() == 3 {
            g.reshape(image, &[1, shape[0], shape[1], shape[2]])?
        } else {
            image
        };
        let slope = self.cfg.leaky_slope;
        let mut u = x4;
        for (i, &dil) in self.cfg.dilations.iter().enumerate() {
            let base = i * LAYER_PARAMS;
            let c = g.conv2d(u, ids[base], dil, dil)?;
            let c = g.add_bias(c, ids[base + 1])?;
            let bn = self.bn(g, c, ids, base + 3, mode, stats)?;
            let skip = g.scale_channels(c, ids[base + 2])?;
            let merged = g.add(skip, bn)?;
            let act = g.leaky_relu(merged, slope);
            let inorm = g.instance_norm(act, BN_EPS)?;
            let plain = g.mul(ids[base + 7], act)?;
            let normed = g.mul(ids[base + 8], inorm)?;
            u = g.add(plain, normed)?;
        }
        let pb = self.project_base();
        let noise = g.conv2d(u, ids[pb], 1, 1)?;
        let noise = g.add_bias(noise, ids[pb + 1])?;
        let clean = g.sub(x4, noise)?;
        let residual = g.sub(x4, clean)?;
        Ok((clean, residual))
    }

    fn classify_bound(
        &self,
        g: &mut Graph,
        residual: TensorId,
        ids: &[TensorId],
        mode: Mode,
        stats: &mut Vec<BnBatchStats>,
    ) -> Result<(TensorId, TensorId)> {
        let slope = self.cfg.leaky_slope;
        let s = self.stem_base();
        let t = g.conv2d(residual, ids[s], 1, 1)?;
        let t = g.add_bias(t, ids[s + 1])?;
        let t = self.bn(g, t, ids, s + 2, mode, stats)?;
        let mut t = g.leaky_relu(t, slope);
        for j in 0..CLS_BLOCKS {
            let b = self.block_base(j);
            let u = g.conv2d(t, ids[b], 1, 1)?;
            let u = g.add_bias(u, ids[b + 1])?;
            let u = self.bn(g, u, ids, b + 2, mode, stats)?;
            let u = g.leaky_relu(u, slope);
            let u = g.conv2d(u, ids[b + 6], 1, 1)?;
            let u = g.add_bias(u, ids[b + 7])?;
            let u = self.bn(g, u, ids, b + 8, mode, stats)?;
            let summed = g.add(t, u)?;
            t = g.leaky_relu(summed, slope);
        }
        let pooled = g.gap_hw(t)?;
        let h = self.head_base();
        let logits = g.matmul(pooled, ids[h])?;
        let logits = g.add_bias(logits, ids[h + 1])?;
        let logits = g.reshape(logits, &[self.cfg.num_classes])?;
        let features = g.reshape(pooled, &[self.cfg.classifier_width])?;
        Ok((logits, features))
    }

    /// Clean-image estimate and residual for one `[C, H, W]` image.
    pub fn denoise(&self, g: &mut Graph, image: TensorId, mode: Mode) -> Result<(TensorId, TensorId)> {
        let ids = self.bind(g);
        let mut stats = Vec::new();
        self.denoise_bound(g, image, &ids, mode, &mut stats)
    }

    pub fn forward(&self, g: &mut Graph, image: TensorId, mode: Mode) -> Result<Forward> {
        let ids = self.bind(g);
        let mut stats = Vec::new();
        let (_, residual) = self.denoise_bound(g, image, &ids, mode, &mut stats)?;
        let (logits, features) = self.classify_bound(g, residual, &ids, mode, &mut stats)?;
        Ok(Forward { logits, features, param_ids: ids, bn_stats: stats })
    }

    /// Fold per-example batch statistics into the running statistics:
    /// running = (1 - momentum) * running + momentum * batch, where the batch
    /// value is the mean of the per-example statistics in example order.
    pub fn fold_bn_stats(&mut self, per_example: &[Vec<BnBatchStats>], momentum: f64) {
        if per_example.is_empty() {
            return;
        }
        let idxs = self.bn_stat_indices();
        let scale = 1.0 / per_example.len() as f64;
        for (layer, &(mi, vi)) in idxs.iter().enumerate() {
            let c = self.params[mi].1.numel();
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ex in per_example {
                debug_assert_eq!(ex.len(), idxs.len());
                for k in 0..c {
                    mean[k] += ex[layer].mean[k] * scale;
                    var[k] += ex[layer].var[k] * scale;
                }
            }
            for (slot, batch) in
                self.params[mi].1.data_mut().iter_mut().zip(&mean)
            {
                *slot = (1.0 - momentum) * *slot + momentum * batch;
            }
            for (slot, batch) in self.params[vi].1.data_mut().iter_mut().zip(&var) {
                *slot = (1.0 - momentum) * *slot + momentum * batch;
            }
        }
    }
}
