//! Combining per-model scores into one decision: softmax normalization,
//! soft/max voting, and the two trained super learners (one over scores, one
//! over concatenated features), plus whole-ensemble forward passes.
//!
//! The score super learner is a bare affine map over the concatenated
//! normalized scores; cross-entropy training applies softmax inside the loss
//! only. Kept linear end to end so that block-averaging weights reproduce
//! soft voting bit for bit rather than up to a monotone transform.

use std::collections::HashSet;
use std::path::Path;

use morphguard_tensor::checkpoint;
use morphguard_tensor::{AdamConfig, AdamState, Graph, Tensor, TensorId};
use rayon::prelude::*;

use crate::data::{balanced_batches, Dataset};
use crate::error::{CoreError, Result};
use crate::models::{cross_entropy, EpochStats, Mode, Model};
use crate::rng;

const INIT_STD: f64 = 0.02;
const MAGIC: &[u8; 4] = b"MGF1";
const VERSION: u32 = 1;
const KIND_SCORE: u64 = 1;
const KIND_FEATURE: u64 = 2;

/// Per-model score normalization: softmax over the two logits, with the same
/// max-subtract arithmetic as the graph kernel so both paths agree bitwise.
pub fn normalize_scores(logits: [f64; 2]) -> Result<[f64; 2]> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::contract(
            "normalize_scores",
            format!("non-finite logits [{}, {}]", logits[0], logits[1]),
        ));
    }
    let mut mx = f64::NEG_INFINITY;
    for &v in &logits {
        mx = mx.max(v);
    }
    let mut out = [0.0; 2];
    let mut z = 0.0;
    for j in 0..2 {
        let e = (logits[j] - mx).exp();
        out[j] = e;
        z += e;
    }
    for slot in &mut out {
        *slot /= z;
    }
    Ok(out)
}

/// One model's verdict on one image: raw logits and their normalized form.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub model_id: String,
    pub logits: [f64; 2],
    pub probs: [f64; 2],
}

impl ScoreVector {
    pub fn from_logits(model_id: impl Into<String>, logits: [f64; 2]) -> Result<ScoreVector> {
        Ok(ScoreVector { model_id: model_id.into(), probs: normalize_scores(logits)?, logits })
    }
}

/// Elementwise mean of the members' probabilities. Each term is scaled before
/// accumulation, matching the multiply-add order of an averaging matrix.
pub fn soft_vote(votes: &[ScoreVector]) -> Result<[f64; 2]> {
    if votes.is_empty() {
        return Err(CoreError::contract("soft_vote", "no score vectors"));
    }
    let inv = 1.0 / votes.len() as f64;
    let mut out = [0.0; 2];
    for v in votes {
        out[0] += v.probs[0] * inv;
        out[1] += v.probs[1] * inv;
    }
    Ok(out)
}

/// Majority vote over per-model argmax decisions. Ties — both across models
/// and inside a single model's scores — resolve to morph: in screening, a
/// false alarm is cheaper than a missed attack.
pub fn max_vote(votes: &[ScoreVector]) -> Result<usize> {
    if votes.is_empty() {
        return Err(CoreError::contract("max_vote", "no score vectors"));
    }
    let morph = votes.iter().filter(|v| v.probs[1] >= v.probs[0]).count();
    Ok(usize::from(2 * morph >= votes.len()))
}

/// Affine map over the concatenated normalized scores of all members.
/// `weight` is `[2·n_models, 2]`; row `2m+c` weighs member `m`'s class-`c`
/// probability. The output is not renormalized (see the module docs).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLearner {
    pub model_ids: Vec<String>,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ScoreLearner {
    pub fn new(model_ids: Vec<String>, seed: u64) -> Result<ScoreLearner> {
        if model_ids.is_empty() {
            return Err(CoreError::contract("ScoreLearner", "no member ids"));
        }
        let n = model_ids.len() * 2;
        let mut r = rng::stream(seed, "score-learner-init", 0);
        let data = (0..n * 2).map(|_| rng::gaussian(&mut r) * INIT_STD).collect();
        Ok(ScoreLearner {
            model_ids,
            weight: Tensor::from_vec(vec![n, 2], data)?.with_grad(),
            bias: Tensor::zeros(&[2]).with_grad(),
        })
    }

    /// Weights that average the members' probabilities: each class column
    /// picks up 1/n from every member's matching entry. Predicting with these
    /// weights is bitwise identical to `soft_vote`.
    pub fn averaging(model_ids: Vec<String>) -> Result<ScoreLearner> {
        if model_ids.is_empty() {
            return Err(CoreError::contract("ScoreLearner", "no member ids"));
        }
        let n = model_ids.len();
        let inv = 1.0 / n as f64;
        let mut data = vec![0.0; n * 2 * 2];
        for m in 0..n {
            for c in 0..2 {
                data[(2 * m + c) * 2 + c] = inv;
            }
        }
        Ok(ScoreLearner {
            model_ids,
            weight: Tensor::from_vec(vec![n * 2, 2], data)?.with_grad(),
            bias: Tensor::zeros(&[2]).with_grad(),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.model_ids.len() * 2
    }

    fn concat_probs(&self, votes: &[ScoreVector]) -> Result<Vec<f64>> {
        if votes.len() != self.model_ids.len() {
            return Err(CoreError::contract(
                "ScoreLearner",
                format!("{} score vectors for {} members", votes.len(), self.model_ids.len()),
            ));
        }
        for (v, id) in votes.iter().zip(&self.model_ids) {
            if v.model_id != *id {
                return Err(CoreError::contract(
                    "ScoreLearner",
                    format!("score vector from {} where {} was expected", v.model_id, id),
                ));
            }
        }
        Ok(votes.iter().flat_map(|v| v.probs).collect())
    }

    /// Fused scores for one image's member votes. Same accumulation order as
    /// the graph matmul kernel.
    pub fn predict(&self, votes: &[ScoreVector]) -> Result<[f64; 2]> {
        let s = self.concat_probs(votes)?;
        let w = self.weight.data();
        let b = self.bias.data();
        let mut out = [0.0; 2];
        for (c, slot) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, &sk) in s.iter().enumerate() {
                acc += sk * w[k * 2 + c];
            }
            *slot = acc + b[c];
        }
        Ok(out)
    }

    /// Fused scores as graph nodes, for training and ensemble attacks.
    /// `probs_cat` is the `[1, in_dim]` concatenation of member probabilities.
    fn graph_scores(&self, g: &mut Graph, probs_cat: TensorId) -> Result<TensorId> {
        let w = g.leaf(&self.weight);
        let b = g.leaf(&self.bias);
        let y = g.matmul(probs_cat, w)?;
        Ok(g.add_bias(y, b)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = header(KIND_SCORE);
        write_ids(&mut buf, &self.model_ids);
        checkpoint::encode_record(&mut buf, "weight", &self.weight);
        checkpoint::encode_record(&mut buf, "bias", &self.bias);
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ScoreLearner> {
        let bytes = std::fs::read(path)?;
        let mut r = checkpoint::Reader::new(&bytes);
        let model_ids = read_header(&mut r, KIND_SCORE)?;
        let weight = named_record(&mut r, "weight", &[model_ids.len() * 2, 2])?;
        let bias = named_record(&mut r, "bias", &[2])?;
        if !r.at_end() {
            return Err(CoreError::Format("trailing bytes after final parameter".into()));
        }
        Ok(ScoreLearner { model_ids, weight, bias })
    }
}

/// Two-layer network over the members' concatenated penultimate features,
/// with per-member score dropout during training.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLearner {
    pub model_ids: Vec<String>,
    pub feature_dims: Vec<usize>,
    /// Probability of zeroing one member's whole feature block per training
    /// example. Never applied at inference.
    pub dropout_p: f64,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FeatureLearner {
    pub fn new(
        model_ids: Vec<String>,
        feature_dims: Vec<usize>,
        hidden: usize,
        dropout_p: f64,
        seed: u64,
    ) -> Result<FeatureLearner> {
        if model_ids.is_empty() {
            return Err(CoreError::contract("FeatureLearner", "no member ids"));
        }
        if feature_dims.len() != model_ids.len() || feature_dims.contains(&0) {
            return Err(CoreError::contract(
                "FeatureLearner",
                "feature dims must be positive, one per member",
            ));
        }
        if hidden == 0 {
            return Err(CoreError::contract("FeatureLearner", "hidden width must be positive"));
        }
        if !(0.0..=1.0).contains(&dropout_p) {
            return Err(CoreError::contract("FeatureLearner", "dropout must be in [0, 1]"));
        }
        let input: usize = feature_dims.iter().sum();
        let mut r = rng::stream(seed, "feature-learner-init", 0);
        let mut gauss = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng::gaussian(&mut r) * INIT_STD).collect()
        };
        Ok(FeatureLearner {
            model_ids,
            feature_dims,
            dropout_p,
            w1: Tensor::from_vec(vec![input, hidden], gauss(input * hidden))?.with_grad(),
            b1: Tensor::zeros(&[hidden]).with_grad(),
            w2: Tensor::from_vec(vec![hidden, 2], gauss(hidden * 2))?.with_grad(),
            b2: Tensor::zeros(&[2]).with_grad(),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.feature_dims.iter().sum()
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[1]
    }

    fn concat_features(&self, features: &[Vec<f64>]) -> Result<Vec<f64>> {
        if features.len() != self.feature_dims.len() {
            return Err(CoreError::contract(
                "FeatureLearner",
                format!(
                    "{} feature blocks for {} members",
                    features.len(),
                    self.feature_dims.len()
                ),
            ));
        }
        for (m, (f, &d)) in features.iter().zip(&self.feature_dims).enumerate() {
            if f.len() != d {
                return Err(CoreError::contract(
                    "FeatureLearner",
                    format!("member {m} feature dim {} does not match expected {d}", f.len()),
                ));
            }
        }
        Ok(features.concat())
    }

    /// Pre-softmax outputs as graph nodes. `x` is `[1, in_dim]`.
    fn graph_scores(&self, g: &mut Graph, x: TensorId) -> Result<TensorId> {
        let w1 = g.leaf(&self.w1);
        let b1 = g.leaf(&self.b1);
        let w2 = g.leaf(&self.w2);
        let b2 = g.leaf(&self.b2);
        let h = g.matmul(x, w1)?;
        let h = g.add_bias(h, b1)?;
        let h = g.relu(h);
        let y = g.matmul(h, w2)?;
        Ok(g.add_bias(y, b2)?)
    }

    /// Fused probabilities for one image's member features, dropout disabled.
    pub fn predict(&self, features: &[Vec<f64>]) -> Result<[f64; 2]> {
        let cat = self.concat_features(features)?;
        let mut g = Graph::new();
        let x = g.constant(&[1, cat.len()], cat)?;
        let y = self.graph_scores(&mut g, x)?;
        let p = g.softmax(y, 1)?;
        let pv = g.value(p);
        Ok([pv[0], pv[1]])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = header(KIND_FEATURE);
        write_ids(&mut buf, &self.model_ids);
        for &d in &self.feature_dims {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.extend_from_slice(&self.dropout_p.to_bits().to_le_bytes());
        checkpoint::encode_record(&mut buf, "w1", &self.w1);
        checkpoint::encode_record(&mut buf, "b1", &self.b1);
        checkpoint::encode_record(&mut buf, "w2", &self.w2);
        checkpoint::encode_record(&mut buf, "b2", &self.b2);
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FeatureLearner> {
        let bytes = std::fs::read(path)?;
        let mut r = checkpoint::Reader::new(&bytes);
        let model_ids = read_header(&mut r, KIND_FEATURE)?;
        let mut feature_dims = Vec::with_capacity(model_ids.len());
        for _ in 0..model_ids.len() {
            feature_dims.push(r.u64("feature dim")? as usize);
        }
        if feature_dims.contains(&0) {
            return Err(CoreError::Format("zero feature dim".into()));
        }
        let dropout_p = r.f64("dropout probability")?;
        if !(0.0..=1.0).contains(&dropout_p) {
            return Err(CoreError::Format(format!("dropout {dropout_p} outside [0, 1]")));
        }
        let input: usize = feature_dims.iter().sum();
        let w1 = {
            let (name, t) = r.record()?;
            if name != "w1" || t.shape().len() != 2 || t.shape()[0] != input {
                return Err(CoreError::Format(format!("unexpected first layer {name}")));
            }
            t.with_grad()
        };
        let hidden = w1.shape()[1];
        if hidden == 0 {
            return Err(CoreError::Format("zero hidden width".into()));
        }
        let b1 = named_record(&mut r, "b1", &[hidden])?;
        let w2 = named_record(&mut r, "w2", &[hidden, 2])?;
        let b2 = named_record(&mut r, "b2", &[2])?;
        if !r.at_end() {
            return Err(CoreError::Format("trailing bytes after final parameter".into()));
        }
        Ok(FeatureLearner { model_ids, feature_dims, dropout_p, w1, b1, w2, b2 })
    }
}

fn header(kind: u64) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&kind.to_le_bytes());
    buf
}

fn write_ids(buf: &mut Vec<u8>, ids: &[String]) {
    buf.extend_from_slice(&(ids.len() as u64).to_le_bytes());
    for id in ids {
        buf.extend_from_slice(&(id.len() as u64).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
    }
}

fn read_header(r: &mut checkpoint::Reader, expect_kind: u64) -> Result<Vec<String>> {
    r.expect_magic(MAGIC).map_err(|e| CoreError::Format(e.to_string()))?;
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(CoreError::Format(format!("unsupported version {version}")));
    }
    let kind = r.u64("learner kind")?;
    if kind != expect_kind {
        return Err(CoreError::Format(format!(
            "learner kind {kind} where {expect_kind} was expected"
        )));
    }
    let n = r.u64("member count")? as usize;
    if n == 0 || n > 4096 {
        return Err(CoreError::Format(format!("implausible member count {n}")));
    }
    let mut ids = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u64("id length")? as usize;
        if len > 4096 {
            return Err(CoreError::Format(format!("implausible id length {len}")));
        }
        let raw = r.take(len, "member id")?;
        let id = String::from_utf8(raw.to_vec())
            .map_err(|_| CoreError::Format("member id is not UTF-8".into()))?;
        ids.push(id);
    }
    Ok(ids)
}

fn named_record(r: &mut checkpoint::Reader, want: &str, shape: &[usize]) -> Result<Tensor> {
    let (name, t) = r.record()?;
    if name != want || t.shape() != shape {
        return Err(CoreError::Format(format!(
            "record {name} {:?} where {want} {shape:?} was expected",
            t.shape()
        )));
    }
    Ok(t.with_grad())
}

#[derive(Debug, Clone)]
pub struct FusionTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Adam learning rate, held constant.
    pub lr: f64,
    pub seed: u64,
    /// Force every batch to an exact class balance.
    pub strict_balance: bool,
}

impl Default for FusionTrainConfig {
    fn default() -> Self {
        FusionTrainConfig { epochs: 30, batch_size: 16, lr: 1e-2, seed: 0, strict_balance: false }
    }
}

/// Everything both trainers validate before touching a learner. Members
/// correspond to the learner's ids by position.
fn check_fusion_training(
    op: &'static str,
    members: &[&Model],
    n_ids: usize,
    ds: &Dataset,
    indices: &[usize],
    cfg: &FusionTrainConfig,
) -> Result<()> {
    if members.is_empty() {
        return Err(CoreError::contract(op, "no member models"));
    }
    if members.len() != n_ids {
        return Err(CoreError::contract(
            op,
            format!("{} members for a learner wired for {n_ids}", members.len()),
        ));
    }
    if members.iter().any(|m| m.num_classes() != 2) {
        return Err(CoreError::contract(op, "members must have two-class heads"));
    }
    if indices.is_empty() {
        return Err(CoreError::contract(op, "no fusion training examples selected"));
    }
    if indices.iter().any(|&i| i >= ds.n()) {
        return Err(CoreError::contract(op, "index out of range"));
    }
    let labels = ds.labels();
    if indices.iter().all(|&i| labels[i] == labels[indices[0]]) {
        return Err(CoreError::SingleClass(op));
    }
    if members
        .iter()
        .any(|m| m.image_size() != ds.height() || m.image_size() != ds.width())
    {
        return Err(CoreError::contract(op, "dataset image size does not match members"));
    }
    if cfg.epochs == 0 {
        return Err(CoreError::contract(op, "zero epochs"));
    }
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(CoreError::contract(op, "learning rate must be >= 0"));
    }
    Ok(())
}

fn member_digests(members: &[&Model]) -> Vec<u64> {
    members.iter().map(|m| m.param_digest()).collect()
}

/// The shared Adam-over-precomputed-inputs loop. `inputs[p]` is the fused
/// input for `indices[p]`; `mask` may rewrite it per (epoch, position) before
/// the example's graph is built.
fn run_fusion_epochs(
    params: &mut [&mut Tensor],
    ds: &Dataset,
    indices: &[usize],
    inputs: &[Vec<f64>],
    cfg: &FusionTrainConfig,
    build: impl Fn(&mut Graph, TensorId, &[TensorId]) -> Result<TensorId>,
    mask: impl Fn(usize, usize, &mut [f64]),
) -> Result<Vec<EpochStats>> {
    let pos_of: std::collections::HashMap<usize, usize> =
        indices.iter().enumerate().map(|(p, &i)| (i, p)).collect();
    let mut adam: Vec<AdamState> = params.iter().map(|t| AdamState::new(t.numel())).collect();
    let adam_cfg = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let width = inputs[0].len();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut br = rng::stream(cfg.seed, "batches", epoch as u64);
        let batches =
            balanced_batches(ds.labels(), indices, cfg.batch_size, cfg.strict_balance, &mut br)?;

        let mut loss_sum = 0.0;
        let mut n_correct = 0usize;
        let mut n_seen = 0usize;

        for batch in &batches {
            let mut grads: Vec<Vec<f64>> = params.iter().map(|t| vec![0.0; t.numel()]).collect();
            let scale = 1.0 / batch.len() as f64;

            for (j, &idx) in batch.iter().enumerate() {
                let mut x = inputs[pos_of[&idx]].clone();
                mask(epoch, n_seen + j, &mut x);

                let mut g = Graph::new();
                let xid = g.constant(&[1, width], x)?;
                let leaves: Vec<TensorId> = params.iter().map(|t| g.leaf(t)).collect();
                let scores = build(&mut g, xid, &leaves)?;
                let logits = g.reshape(scores, &[2])?;
                let loss = cross_entropy(&mut g, logits, ds.label(idx) as usize)?;
                g.backward(loss)?;

                let lv = g.value(logits);
                n_correct += usize::from((lv[1] > lv[0]) == (ds.label(idx) == 1));
                loss_sum += g.value(loss)[0];
                for (acc, &leaf) in grads.iter_mut().zip(&leaves) {
                    if let Some(gv) = g.grad(leaf) {
                        for (a, v) in acc.iter_mut().zip(gv) {
                            *a += v * scale;
                        }
                    }
                }
            }
            n_seen += batch.len();

            for ((t, st), mean) in params.iter_mut().zip(&mut adam).zip(&grads) {
                t.accumulate_grad(mean)?;
                st.step(t, &adam_cfg);
                t.zero_grad();
            }
        }

        trace.push(EpochStats {
            epoch,
            mean_loss: loss_sum / n_seen as f64,
            accuracy: n_correct as f64 / n_seen as f64,
        });
    }
    Ok(trace)
}

/// Trains the affine score map with cross-entropy while the member models
/// stay frozen; their parameter digests are checked before and after.
pub fn train_score_super_learner(
    learner: &mut ScoreLearner,
    members: &[&Model],
    ds: &Dataset,
    indices: &[usize],
    cfg: &FusionTrainConfig,
) -> Result<Vec<EpochStats>> {
    const OP: &str = "train_score_super_learner";
    check_fusion_training(OP, members, learner.model_ids.len(), ds, indices, cfg)?;
    let before = member_digests(members);

    let inputs: Vec<Vec<f64>> = indices
        .par_iter()
        .map(|&i| {
            let mut s = Vec::with_capacity(learner.in_dim());
            for m in members {
                s.extend_from_slice(&m.probs_for(ds.image(i))?);
            }
            Ok(s)
        })
        .collect::<Result<_>>()?;

    let trace = run_fusion_epochs(
        &mut [&mut learner.weight, &mut learner.bias],
        ds,
        indices,
        &inputs,
        cfg,
        |g, x, leaves| {
            let y = g.matmul(x, leaves[0])?;
            Ok(g.add_bias(y, leaves[1])?)
        },
        |_, _, _| {},
    )?;

    if member_digests(members) != before {
        return Err(CoreError::contract(OP, "member parameters changed during fusion training"));
    }
    Ok(trace)
}

/// Trains the two-layer feature network with cross-entropy and per-member
/// score dropout; the member models stay frozen (digest-checked).
pub fn train_feature_super_learner(
    learner: &mut FeatureLearner,
    members: &[&Model],
    ds: &Dataset,
    indices: &[usize],
    cfg: &FusionTrainConfig,
) -> Result<Vec<EpochStats>> {
    const OP: &str = "train_feature_super_learner";
    check_fusion_training(OP, members, learner.model_ids.len(), ds, indices, cfg)?;
    for (m, (model, &d)) in members.iter().zip(&learner.feature_dims).enumerate() {
        if model.feature_dim() != d {
            return Err(CoreError::contract(
                OP,
                format!("member {m} feature dim {} does not match {d}", model.feature_dim()),
            ));
        }
    }
    let before = member_digests(members);

    let inputs: Vec<Vec<f64>> = indices
        .par_iter()
        .map(|&i| {
            let mut s = Vec::with_capacity(learner.in_dim());
            for m in members {
                s.extend_from_slice(&m.features_for(ds.image(i))?);
            }
            Ok(s)
        })
        .collect::<Result<_>>()?;

    let dims = learner.feature_dims.clone();
    let (p, seed) = (learner.dropout_p, cfg.seed);
    let trace = run_fusion_epochs(
        &mut [&mut learner.w1, &mut learner.b1, &mut learner.w2, &mut learner.b2],
        ds,
        indices,
        &inputs,
        cfg,
        |g, x, leaves| {
            let h = g.matmul(x, leaves[0])?;
            let h = g.add_bias(h, leaves[1])?;
            let h = g.relu(h);
            let y = g.matmul(h, leaves[2])?;
            Ok(g.add_bias(y, leaves[3])?)
        },
        |epoch, pos, x| {
            let mut r = rng::stream(seed, "fusion-dropout", ((epoch as u64) << 32) | pos as u64);
            let mut off = 0;
            for &d in &dims {
                if rng::coin(&mut r, p) {
                    x[off..off + d].fill(0.0);
                }
                off += d;
            }
        },
    )?;

    if member_digests(members) != before {
        return Err(CoreError::contract(OP, "member parameters changed during fusion training"));
    }
    Ok(trace)
}

#[derive(Debug, Clone)]
pub struct Member {
    pub id: String,
    pub model: Model,
}

#[derive(Debug, Clone)]
pub enum FusionStrategy {
    SoftVote,
    MaxVote,
    Score(ScoreLearner),
    Feature(FeatureLearner),
}

impl FusionStrategy {
    pub fn tag(&self) -> &'static str {
        match self {
            FusionStrategy::SoftVote => "soft-vote",
            FusionStrategy::MaxVote => "max-vote",
            FusionStrategy::Score(_) => "score-learner",
            FusionStrategy::Feature(_) => "feature-learner",
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleOut {
    pub probs: [f64; 2],
    pub scores: Vec<ScoreVector>,
}

/// A set of member models plus the fusion strategy that combines them.
#[derive(Debug, Clone)]
pub struct Ensemble {
    members: Vec<Member>,
    strategy: FusionStrategy,
}

impl Ensemble {
    pub fn new(members: Vec<Member>, strategy: FusionStrategy) -> Result<Ensemble> {
        const OP: &str = "Ensemble";
        if members.is_empty() {
            return Err(CoreError::contract(OP, "no members"));
        }
        let mut seen = HashSet::new();
        for m in &members {
            if !seen.insert(m.id.as_str()) {
                return Err(CoreError::contract(OP, format!("duplicate member id {}", m.id)));
            }
        }
        let (size, chans) = (members[0].model.image_size(), members[0].model.channels());
        for m in &members {
            if m.model.image_size() != size || m.model.channels() != chans {
                return Err(CoreError::contract(OP, "members disagree on image shape"));
            }
            if m.model.num_classes() != 2 {
                return Err(CoreError::contract(OP, "members must have two-class heads"));
            }
        }
        let ids_match = |learner_ids: &[String]| {
            learner_ids.len() == members.len()
                && learner_ids.iter().zip(&members).all(|(a, m)| *a == m.id)
        };
        match &strategy {
            FusionStrategy::Score(l) => {
                if !ids_match(&l.model_ids) {
                    return Err(CoreError::contract(OP, "score learner ids do not match members"));
                }
            }
            FusionStrategy::Feature(l) => {
                if !ids_match(&l.model_ids) {
                    return Err(CoreError::contract(
                        OP,
                        "feature learner ids do not match members",
                    ));
                }
                for (m, &d) in members.iter().zip(&l.feature_dims) {
                    if m.model.feature_dim() != d {
                        return Err(CoreError::contract(
                            OP,
                            format!(
                                "member {} feature dim {} does not match learner's {d}",
                                m.id,
                                m.model.feature_dim()
                            ),
                        ));
                    }
                }
            }
            FusionStrategy::SoftVote | FusionStrategy::MaxVote => {}
        }
        Ok(Ensemble { members, strategy })
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn strategy(&self) -> &FusionStrategy {
        &self.strategy
    }

    pub fn image_size(&self) -> usize {
        self.members[0].model.image_size()
    }

    pub fn channels(&self) -> usize {
        self.members[0].model.channels()
    }

    /// Runs every member on the image and fuses their outputs. The returned
    /// score vectors are in member order.
    pub fn forward(&self, image: &[f64]) -> Result<EnsembleOut> {
        let s = self.image_size();
        let want = self.channels() * s * s;
        if image.len() != want {
            return Err(CoreError::contract(
                "ensemble_forward",
                format!("image has {} values, members expect {want}", image.len()),
            ));
        }
        let need_features = matches!(self.strategy, FusionStrategy::Feature(_));
        let mut scores = Vec::with_capacity(self.members.len());
        let mut features = Vec::with_capacity(self.members.len());
        for m in &self.members {
            let mut g = Graph::new();
            let x = g.constant(&[self.channels(), s, s], image.to_vec())?;
            let fwd = m.model.forward(&mut g, x, Mode::Eval)?;
            let p = g.softmax(fwd.logits, 0)?;
            let (lv, pv) = (g.value(fwd.logits), g.value(p));
            scores.push(ScoreVector {
                model_id: m.id.clone(),
                logits: [lv[0], lv[1]],
                probs: [pv[0], pv[1]],
            });
            if need_features {
                features.push(g.value(fwd.features).to_vec());
            }
        }
        let probs = match &self.strategy {
            FusionStrategy::SoftVote => soft_vote(&scores)?,
            FusionStrategy::MaxVote => {
                if max_vote(&scores)? == 1 {
                    [0.0, 1.0]
                } else {
                    [1.0, 0.0]
                }
            }
            FusionStrategy::Score(l) => l.predict(&scores)?,
            FusionStrategy::Feature(l) => l.predict(&features)?,
        };
        Ok(EnsembleOut { probs, scores })
    }

    /// The fused output as a graph node over `image`, for gradient-based
    /// attacks. Soft voting and the feature learner yield probabilities; the
    /// score learner yields its affine scores. Max voting has no gradient.
    pub fn fused_graph(&self, g: &mut Graph, image: TensorId) -> Result<TensorId> {
        let n = self.members.len() as f64;
        match &self.strategy {
            FusionStrategy::MaxVote => {
                Err(CoreError::contract("fused_graph", "max voting is not differentiable"))
            }
            FusionStrategy::SoftVote => {
                let mut acc: Option<TensorId> = None;
                for m in &self.members {
                    let fwd = m.model.forward(g, image, Mode::Eval)?;
                    let p = g.softmax(fwd.logits, 0)?;
                    let term = g.mul_scalar(p, 1.0 / n);
                    acc = Some(match acc {
                        None => term,
                        Some(a) => g.add(a, term)?,
                    });
                }
                Ok(acc.expect("members is non-empty"))
            }
            FusionStrategy::Score(l) => {
                let mut parts = Vec::with_capacity(self.members.len());
                for m in &self.members {
                    let fwd = m.model.forward(g, image, Mode::Eval)?;
                    let p = g.softmax(fwd.logits, 0)?;
                    parts.push(g.reshape(p, &[1, 2])?);
                }
                let cat = g.concat(&parts, 1)?;
                let y = l.graph_scores(g, cat)?;
                Ok(g.reshape(y, &[2])?)
            }
            FusionStrategy::Feature(l) => {
                let mut parts = Vec::with_capacity(self.members.len());
                for m in &self.members {
                    let fwd = m.model.forward(g, image, Mode::Eval)?;
                    let d = g.shape(fwd.features)[0];
                    parts.push(g.reshape(fwd.features, &[1, d])?);
                }
                let cat = g.concat(&parts, 1)?;
                let y = l.graph_scores(g, cat)?;
                let p = g.softmax(y, 1)?;
                Ok(g.reshape(p, &[2])?)
            }
        }
    }
}
