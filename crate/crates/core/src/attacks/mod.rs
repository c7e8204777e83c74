//! Adversarial perturbation search against the detectors.
//!
//! Every constrained method keeps its output inside the perturbation ball
//! around the clean input and inside the [0, 1] pixel box at every step.
//! Gradient methods talk to models through [`WhiteBox`], which exposes class
//! scores as graph nodes; the score-based search uses only [`ScoreOracle`]
//! and never sees a gradient. All randomness is drawn from named streams, so
//! a (spec, seed, input) triple always reproduces the same output bit for
//! bit.

mod cw;
mod ensemble;
mod square;
mod transfer;

pub use cw::cw_l2;
pub use ensemble::ensemble_attack;
pub use square::square_attack;
pub use transfer::{transfer_matrix, AttackSource, TransferMatrix, TransferTarget};

use crate::fusion::{Ensemble, FusionStrategy};
use crate::models::{cross_entropy, Mode, Model};
use crate::rng;
use crate::{CoreError, Result};
use morphguard_tensor::{Graph, TensorId};
use serde::{Deserialize, Serialize};

const OP: &str = "attack";

/// A model the gradient attacks can differentiate through: class scores as
/// a function of an input leaf, in whatever graph the attack is building.
pub trait WhiteBox {
    fn input_shape(&self) -> Vec<usize>;
    fn num_classes(&self) -> usize;
    fn scores(&self, g: &mut Graph, x: TensorId) -> Result<TensorId>;
}

/// Inference-only access: class probabilities for a flattened input. This is
/// all the score-based search is allowed to touch, and it is the interface
/// transfer evaluation uses for its targets.
pub trait ScoreOracle {
    fn class_probs(&self, x: &[f64]) -> Result<Vec<f64>>;
}

impl WhiteBox for Model {
    fn input_shape(&self) -> Vec<usize> {
        vec![self.channels(), self.image_size(), self.image_size()]
    }

    fn num_classes(&self) -> usize {
        Model::num_classes(self)
    }

    fn scores(&self, g: &mut Graph, x: TensorId) -> Result<TensorId> {
        Ok(self.forward(g, x, Mode::Eval)?.logits)
    }
}

impl ScoreOracle for Model {
    fn class_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.probs_for(x)
    }
}

impl WhiteBox for Ensemble {
    fn input_shape(&self) -> Vec<usize> {
        vec![self.channels(), self.image_size(), self.image_size()]
    }

    fn num_classes(&self) -> usize {
        2
    }

    /// The fused output lifted back to score space. The score learner's
    /// output is already affine, while soft voting and the feature learner
    /// produce probabilities, whose logarithm is a valid score vector.
    fn scores(&self, g: &mut Graph, x: TensorId) -> Result<TensorId> {
        match self.strategy() {
            FusionStrategy::Score(_) => self.fused_graph(g, x),
            _ => {
                let p = self.fused_graph(g, x)?;
                Ok(g.log(p))
            }
        }
    }
}

impl ScoreOracle for Ensemble {
    fn class_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        let out = self.forward(x)?;
        match self.strategy() {
            FusionStrategy::Score(_) => Ok(softmax_slice(&out.probs).to_vec()),
            _ => Ok(out.probs.to_vec()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Fgsm,
    Bim,
    Rfgsm,
    Pgd,
    PgdL2,
    Tpgd,
    Mifgsm,
    Difgsm,
    Tifgsm,
    CwL2,
    Square,
    Ensemble,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Norm {
    #[serde(rename = "linf")]
    LInf,
    #[serde(rename = "l2")]
    L2,
}

fn default_norm() -> Norm {
    Norm::LInf
}
fn default_num_steps() -> usize {
    10
}
fn default_resize_lo() -> f64 {
    0.9
}
fn default_kernel_size() -> usize {
    1
}
fn default_kernel_sigma() -> f64 {
    1.0
}
fn default_cw_c() -> f64 {
    1.0
}
fn default_cw_steps() -> usize {
    100
}
fn default_cw_lr() -> f64 {
    0.01
}
fn default_queries() -> u64 {
    300
}
fn default_patch_frac() -> f64 {
    0.25
}
fn default_lambda() -> f64 {
    0.1
}

/// Full description of one attack run. [`AttackSpec::new`] fills in the
/// conventional settings for a method; anything can be overridden before
/// [`AttackSpec::validate`] pins it down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub method: Method,
    /// Perturbation budget in pixel units, measured in `norm`.
    pub epsilon: f64,
    #[serde(default = "default_norm")]
    pub norm: Norm,
    #[serde(default)]
    pub step_size: f64,
    #[serde(default = "default_num_steps")]
    pub num_steps: usize,
    #[serde(default)]
    pub random_start: bool,
    #[serde(default)]
    pub seed: u64,
    /// Gradient momentum decay; only the momentum method reads it.
    #[serde(default)]
    pub momentum: f64,
    /// Probability of routing a step's gradient through a random
    /// resize-and-pad of the input.
    #[serde(default)]
    pub diversity_prob: f64,
    /// Smallest resize fraction the diversity transform may draw.
    #[serde(default = "default_resize_lo")]
    pub resize_lo: f64,
    /// Side of the gradient-smoothing kernel; 1 disables smoothing.
    #[serde(default = "default_kernel_size")]
    pub kernel_size: usize,
    #[serde(default = "default_kernel_sigma")]
    pub kernel_sigma: f64,
    /// Weight of the margin term in the parametric-space search.
    #[serde(default = "default_cw_c")]
    pub cw_c: f64,
    /// Confidence offset: the margin must clear this before the term zeroes.
    #[serde(default)]
    pub cw_kappa: f64,
    #[serde(default = "default_cw_steps")]
    pub cw_steps: usize,
    #[serde(default = "default_cw_lr")]
    pub cw_lr: f64,
    /// Query budget for the score-based search.
    #[serde(default = "default_queries")]
    pub queries: u64,
    /// Starting fraction of the image area one proposal square covers.
    #[serde(default = "default_patch_frac")]
    pub patch_frac: f64,
    /// Per-model mixture weights for the joint attack; empty means uniform.
    #[serde(default)]
    pub weights: Vec<f64>,
    /// Distance penalty of the joint attack's objective.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

impl AttackSpec {
    pub fn new(method: Method, epsilon: f64) -> AttackSpec {
        let num_steps = if method == Method::Fgsm { 1 } else { default_num_steps() };
        let step_size = match method {
            Method::Ensemble => {
                if epsilon > 0.0 {
                    epsilon / num_steps as f64
                } else {
                    0.0
                }
            }
            _ => epsilon / 4.0,
        };
        AttackSpec {
            method,
            epsilon,
            norm: match method {
                Method::PgdL2 | Method::CwL2 => Norm::L2,
                _ => Norm::LInf,
            },
            step_size,
            num_steps,
            random_start: matches!(method, Method::Pgd | Method::PgdL2 | Method::Tpgd),
            seed: 0,
            momentum: if method == Method::Mifgsm { 1.0 } else { 0.0 },
            diversity_prob: if method == Method::Difgsm { 0.5 } else { 0.0 },
            resize_lo: default_resize_lo(),
            kernel_size: if method == Method::Tifgsm { 5 } else { 1 },
            kernel_sigma: if method == Method::Tifgsm { 1.5 } else { default_kernel_sigma() },
            cw_c: default_cw_c(),
            cw_kappa: 0.0,
            cw_steps: default_cw_steps(),
            cw_lr: default_cw_lr(),
            queries: default_queries(),
            patch_frac: default_patch_frac(),
            weights: Vec::new(),
            lambda: default_lambda(),
        }
    }

    /// Checks every field against the number of models the attack will see.
    /// All methods except the joint one expect exactly one model.
    pub fn validate(&self, n_models: usize) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(CoreError::contract(OP, format!("epsilon {} must be >= 0", self.epsilon)));
        }
        let want_l2 = matches!(self.method, Method::PgdL2 | Method::CwL2);
        if want_l2 && self.norm != Norm::L2 {
            return Err(CoreError::contract(OP, "this method is defined for the l2 ball"));
        }
        if !want_l2 && self.norm != Norm::LInf {
            return Err(CoreError::contract(OP, "this method is defined for the max-norm ball"));
        }
        let iterative = matches!(
            self.method,
            Method::Bim
                | Method::Rfgsm
                | Method::Pgd
                | Method::PgdL2
                | Method::Tpgd
                | Method::Mifgsm
                | Method::Difgsm
                | Method::Tifgsm
                | Method::Ensemble
        );
        if iterative {
            if self.num_steps == 0 {
                return Err(CoreError::contract(OP, "num_steps must be at least 1"));
            }
            if self.epsilon > 0.0 && !(self.step_size.is_finite() && self.step_size > 0.0) {
                return Err(CoreError::contract(OP, "step_size must be positive"));
            }
        }
        if !self.momentum.is_finite() || self.momentum < 0.0 {
            return Err(CoreError::contract(OP, "momentum must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.diversity_prob) {
            return Err(CoreError::contract(OP, "diversity_prob must lie in [0, 1]"));
        }
        if !(self.resize_lo > 0.0 && self.resize_lo <= 1.0) {
            return Err(CoreError::contract(OP, "resize_lo must lie in (0, 1]"));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(CoreError::contract(OP, "kernel_size must be odd"));
        }
        if !(self.kernel_sigma.is_finite() && self.kernel_sigma > 0.0) {
            return Err(CoreError::contract(OP, "kernel_sigma must be positive"));
        }
        if !(self.cw_c.is_finite() && self.cw_c > 0.0) {
            return Err(CoreError::contract(OP, "cw_c must be positive"));
        }
        if !self.cw_kappa.is_finite() || self.cw_kappa < 0.0 {
            return Err(CoreError::contract(OP, "cw_kappa must be >= 0"));
        }
        if self.method == Method::CwL2 && self.cw_steps == 0 {
            return Err(CoreError::contract(OP, "cw_steps must be at least 1"));
        }
        if !(self.cw_lr.is_finite() && self.cw_lr > 0.0) {
            return Err(CoreError::contract(OP, "cw_lr must be positive"));
        }
        if self.queries == 0 {
            return Err(CoreError::contract(OP, "query budget must be at least 1"));
        }
        if !(self.patch_frac > 0.0 && self.patch_frac <= 1.0) {
            return Err(CoreError::contract(OP, "patch_frac must lie in (0, 1]"));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(CoreError::contract(OP, "lambda must be >= 0"));
        }
        if self.method == Method::Ensemble {
            if n_models == 0 {
                return Err(CoreError::contract(OP, "the joint attack needs at least one model"));
            }
        } else if n_models != 1 {
            return Err(CoreError::contract(OP, "this method attacks exactly one model"));
        }
        if !self.weights.is_empty() {
            if self.weights.len() != n_models {
                return Err(CoreError::contract(
                    OP,
                    format!("{} weights for {} models", self.weights.len(), n_models),
                ));
            }
            if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(CoreError::contract(OP, "weights must be nonnegative"));
            }
            let total: f64 = self.weights.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(CoreError::contract(OP, format!("weights sum to {total}, want 1")));
            }
        }
        Ok(())
    }
}

/// Outcome of one attack on one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvResult {
    pub adversarial: Vec<f64>,
    /// `adversarial - clean`, coordinate by coordinate.
    pub delta: Vec<f64>,
    /// Whether the attacked model now predicts a different class.
    pub success: bool,
    /// Model evaluations spent, gradient passes included.
    pub queries: u64,
    /// The attack's own objective at the returned point.
    pub final_loss: f64,
}

/// An [`AdvResult`] plus the per-model verdicts of a joint attack. For
/// single-model methods `fooled` has one entry equal to `success`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleAdvResult {
    pub result: AdvResult,
    pub fooled: Vec<bool>,
}

/// Dispatches a validated spec to its method. Single-model methods expect
/// exactly one entry in `models`; the joint method takes any number.
pub fn run_attack(
    models: &[&dyn WhiteBox],
    x: &[f64],
    y: usize,
    spec: &AttackSpec,
) -> Result<EnsembleAdvResult> {
    spec.validate(models.len())?;
    let single = |r: Result<AdvResult>| {
        r.map(|result| EnsembleAdvResult { fooled: vec![result.success], result })
    };
    match spec.method {
        Method::Fgsm => single(fgsm(models[0], x, y, spec)),
        Method::Bim | Method::Rfgsm | Method::Pgd | Method::PgdL2 => {
            single(pgd(models[0], x, y, spec))
        }
        Method::Tpgd => single(tpgd(models[0], x, y, spec)),
        Method::Mifgsm => single(mifgsm(models[0], x, y, spec)),
        Method::Difgsm => single(difgsm(models[0], x, y, spec)),
        Method::Tifgsm => single(tifgsm(models[0], x, y, spec)),
        Method::CwL2 => single(cw_l2(models[0], x, y, spec)),
        Method::Square => {
            let oracle = GraphOracle(models[0]);
            single(square_attack(&oracle, x, y, spec, &models[0].input_shape()))
        }
        Method::Ensemble => ensemble_attack(models, x, y, spec),
    }
}

/// Forward-only adapter so the score-based search can run against any
/// differentiable model without being handed its gradients.
struct GraphOracle<'a>(&'a dyn WhiteBox);

impl ScoreOracle for GraphOracle<'_> {
    fn class_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let leaf = g.leaf_from(&self.0.input_shape(), x.to_vec(), false)?;
        let s = self.0.scores(&mut g, leaf)?;
        Ok(softmax_slice(g.value(s)))
    }
}

/// One-step signed-gradient attack.
pub fn fgsm(model: &dyn WhiteBox, x: &[f64], y: usize, spec: &AttackSpec) -> Result<AdvResult> {
    expect_method(spec, &[Method::Fgsm])?;
    spec.validate(1)?;
    signed_iterations(model, x, y, spec, 1, spec.epsilon)
}

/// The iterative signed-gradient family: plain iteration, iteration from a
/// signed-noise start, and projected descent from a uniform random start in
/// either norm. The method tag picks the initialization.
pub fn pgd(model: &dyn WhiteBox, x: &[f64], y: usize, spec: &AttackSpec) -> Result<AdvResult> {
    expect_method(spec, &[Method::Bim, Method::Rfgsm, Method::Pgd, Method::PgdL2])?;
    spec.validate(1)?;
    signed_iterations(model, x, y, spec, spec.num_steps, spec.step_size)
}

/// Momentum variant: steps follow the sign of an L1-normalized gradient
/// accumulator instead of the raw gradient.
pub fn mifgsm(model: &dyn WhiteBox, x: &[f64], y: usize, spec: &AttackSpec) -> Result<AdvResult> {
    expect_method(spec, &[Method::Mifgsm])?;
    spec.validate(1)?;
    signed_iterations(model, x, y, spec, spec.num_steps, spec.step_size)
}

/// Input-diversity variant: each step flips a coin and, on success, takes
/// the gradient through a randomly resized and padded copy of the iterate.
pub fn difgsm(model: &dyn WhiteBox, x: &[f64], y: usize, spec: &AttackSpec) -> Result<AdvResult> {
    expect_method(spec, &[Method::Difgsm])?;
    spec.validate(1)?;
    signed_iterations(model, x, y, spec, spec.num_steps, spec.step_size)
}

/// Translation-invariant variant: the gradient is blurred with a Gaussian
/// kernel before the sign is taken.
pub fn tifgsm(model: &dyn WhiteBox, x: &[f64], y: usize, spec: &AttackSpec) -> Result<AdvResult> {
    expect_method(spec, &[Method::Tifgsm])?;
    spec.validate(1)?;
    signed_iterations(model, x, y, spec, spec.num_steps, spec.step_size)
}

/// Divergence-driven attack: maximizes the divergence between the moving
/// prediction and the clean one. The clean input is a stationary point, so
/// the conventional setup starts from a small random jitter.
pub fn tpgd(model: &dyn WhiteBox, x: &[f64], y: usize, spec: &AttackSpec) -> Result<AdvResult> {
    expect_method(spec, &[Method::Tpgd])?;
    spec.validate(1)?;
    check_input(model, x, y)?;
    let eps: f64 = spec.epsilon;

    // Clean reference distribution, through the same graph ops the loop
    // uses so that an unjittered start reproduces it exactly.
    let clean_p = {
        let mut g = Graph::new();
        let leaf = g.leaf_from(&model.input_shape(), x.to_vec(), false)?;
        let s = model.scores(&mut g, leaf)?;
        let p = g.softmax(s, 0)?;
        g.value(p).to_vec()
    };
    let ln_clean: Vec<f64> = clean_p.iter().map(|v| v.ln()).collect();
    if ln_clean.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::contract(OP, "clean prediction has a zero-probability class"));
    }

    let mut xt: Vec<f64> = if spec.random_start {
        let mut r = rng::stream(spec.seed, "attack-init", 0);
        let mut v: Vec<f64> = x.iter().map(|&xv| xv + 0.001 * rng::gaussian(&mut r)).collect();
        box_ball(x, &mut v, eps, spec.norm);
        v
    } else {
        x.to_vec()
    };

    // Divergence gradient per step. The objective is rebuilt around the
    // current log-ratio (held constant), whose gradient through the softmax
    // equals the true divergence gradient and vanishes exactly on the clean
    // prediction.
    let eval = |pt: &[f64], want_grad: bool| -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let leaf = g.leaf_from(&model.input_shape(), pt.to_vec(), want_grad)?;
        let s = model.scores(&mut g, leaf)?;
        let p = g.softmax(s, 0)?;
        let pv = g.value(p).to_vec();
        let ratio: Vec<f64> = pv.iter().zip(&ln_clean).map(|(&v, &q)| v.ln() - q).collect();
        if ratio.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::contract(OP, "non-finite divergence"));
        }
        let a = g.constant(&[ratio.len()], ratio)?;
        let obj = g.mul(p, a)?;
        let obj = g.sum(obj);
        let kl = g.value(obj)[0];
        let grad = if want_grad {
            g.backward(obj)?;
            let gr = g.grad(leaf).ok_or_else(|| CoreError::contract(OP, "missing gradient"))?;
            finite_grad(gr)?;
            gr.to_vec()
        } else {
            Vec::new()
        };
        Ok((kl, pv, grad))
    };

    for _ in 0..spec.num_steps {
        let (_, _, grad) = eval(&xt, true)?;
        let dir: Vec<f64> = grad.iter().map(|&v| sign(v)).collect();
        let mut v: Vec<f64> = xt.iter().zip(&dir).map(|(&xv, &s)| xv + spec.step_size * s).collect();
        box_ball(x, &mut v, eps, spec.norm);
        xt = v;
    }

    let (kl, probs, _) = eval(&xt, false)?;
    let delta: Vec<f64> = xt.iter().zip(x).map(|(&a, &b)| a - b).collect();
    Ok(AdvResult {
        success: predicted(&probs) != y,
        adversarial: xt,
        delta,
        queries: spec.num_steps as u64 + 2,
        final_loss: kl,
    })
}

/// Normalized Gaussian blur kernel, `size` x `size`, row-major. A size of 1
/// is the identity.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    assert!(size % 2 == 1 && size > 0, "kernel side must be odd");
    assert!(sigma > 0.0, "sigma must be positive");
    let c = (size / 2) as f64;
    let mut k = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let di = i as f64 - c;
            let dj = j as f64 - c;
            k.push((-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = k.iter().sum();
    for v in &mut k {
        *v /= total;
    }
    k
}

/// Shared loop behind the signed-gradient methods.
fn signed_iterations(
    model: &dyn WhiteBox,
    x: &[f64],
    y: usize,
    spec: &AttackSpec,
    steps: usize,
    step_size: f64,
) -> Result<AdvResult> {
    check_input(model, x, y)?;
    let eps = spec.epsilon;
    let shape = model.input_shape();
    let d = x.len();

    let use_momentum = spec.method == Method::Mifgsm;
    let use_diversity = spec.method == Method::Difgsm;
    let kernel = if spec.method == Method::Tifgsm {
        Some(gaussian_kernel(spec.kernel_size, spec.kernel_sigma))
    } else {
        None
    };
    if (use_diversity || kernel.is_some()) && (shape.len() != 3 || shape[1] != shape[2]) {
        return Err(CoreError::contract(OP, "this method needs square [C, H, W] inputs"));
    }

    let mut xt: Vec<f64> = match spec.method {
        Method::Rfgsm => {
            let mut r = rng::stream(spec.seed, "attack-init", 0);
            let mut v: Vec<f64> =
                x.iter().map(|&xv| xv + eps / 2.0 * sign(rng::gaussian(&mut r))).collect();
            box_ball(x, &mut v, eps, spec.norm);
            v
        }
        Method::Pgd | Method::PgdL2 if spec.random_start => {
            let mut r = rng::stream(spec.seed, "attack-init", 0);
            let mut v: Vec<f64> =
                x.iter().map(|&xv| xv + rng::uniform(&mut r, -eps, eps)).collect();
            box_ball(x, &mut v, eps, spec.norm);
            v
        }
        _ => x.to_vec(),
    };

    let mut diversity_rng = use_diversity.then(|| rng::stream(spec.seed, "attack-diversity", 0));
    let mut momentum_acc = vec![0.0; d];

    for _ in 0..steps {
        let resize = diversity_rng.as_mut().and_then(|r| {
            if !rng::coin(r, spec.diversity_prob) {
                return None;
            }
            let h = shape[1];
            let lo = ((spec.resize_lo * h as f64).ceil() as usize).clamp(1, h);
            let rsz = lo + rng::index(r, h - lo + 1);
            let pad_t = rng::index(r, h - rsz + 1);
            let pad_l = rng::index(r, h - rsz + 1);
            Some((rsz, pad_t, pad_l))
        });

        let mut grad = ce_grad(model, &shape, &xt, y, resize)?;
        if let Some(kern) = &kernel {
            grad = smooth_gradient(&grad, &shape, kern, spec.kernel_size);
        }

        let moved: Vec<f64> = match spec.norm {
            Norm::LInf => {
                let basis: &[f64] = if use_momentum {
                    let l1: f64 = grad.iter().map(|v| v.abs()).sum();
                    for (m, &g) in momentum_acc.iter_mut().zip(&grad) {
                        let unit = if l1 > 0.0 { g / l1 } else { 0.0 };
                        *m = spec.momentum * *m + unit;
                    }
                    &momentum_acc
                } else {
                    &grad
                };
                xt.iter()
                    .zip(basis)
                    .map(|(&xv, &g)| xv + step_size * sign(g))
                    .collect()
            }
            Norm::L2 => {
                let gn = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
                if gn > 0.0 {
                    xt.iter().zip(&grad).map(|(&xv, &g)| xv + step_size * g / gn).collect()
                } else {
                    xt.clone()
                }
            }
        };
        let mut v = moved;
        box_ball(x, &mut v, eps, spec.norm);
        xt = v;
    }

    // Verification pass on the untransformed final point.
    let probs = {
        let mut g = Graph::new();
        let leaf = g.leaf_from(&shape, xt.to_vec(), false)?;
        let s = model.scores(&mut g, leaf)?;
        softmax_slice(g.value(s))
    };
    let final_loss = -probs[y].ln();
    if !final_loss.is_finite() {
        return Err(CoreError::contract(OP, "non-finite loss at the final point"));
    }
    let delta: Vec<f64> = xt.iter().zip(x).map(|(&a, &b)| a - b).collect();
    Ok(AdvResult {
        success: predicted(&probs) != y,
        adversarial: xt,
        delta,
        queries: steps as u64 + 1,
        final_loss,
    })
}

/// Cross-entropy gradient at `xt`, optionally routed through a
/// resize-and-pad of the input.
fn ce_grad(
    model: &dyn WhiteBox,
    shape: &[usize],
    xt: &[f64],
    y: usize,
    resize: Option<(usize, usize, usize)>,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let leaf = g.leaf_from(shape, xt.to_vec(), true)?;
    let inp = match resize {
        Some((rsz, pad_t, pad_l)) => g.resize_pad(leaf, rsz, rsz, pad_t, pad_l)?,
        None => leaf,
    };
    let s = model.scores(&mut g, inp)?;
    let loss = cross_entropy(&mut g, s, y)?;
    g.backward(loss)?;
    let gr = g.grad(leaf).ok_or_else(|| CoreError::contract(OP, "missing gradient"))?;
    finite_grad(gr)?;
    Ok(gr.to_vec())
}

/// Per-channel zero-padded convolution of a gradient image with a blur
/// kernel.
fn smooth_gradient(grad: &[f64], shape: &[usize], kern: &[f64], k: usize) -> Vec<f64> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let off = (k / 2) as i64;
    let mut out = vec![0.0; grad.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..h as i64 {
            for j in 0..w as i64 {
                let mut acc = 0.0;
                for a in 0..k as i64 {
                    for b in 0..k as i64 {
                        let (yy, xx) = (i + a - off, j + b - off);
                        if (0..h as i64).contains(&yy) && (0..w as i64).contains(&xx) {
                            acc += kern[(a * k as i64 + b) as usize]
                                * grad[base + (yy * w as i64 + xx) as usize];
                        }
                    }
                }
                out[base + (i * w as i64 + j) as usize] = acc;
            }
        }
    }
    out
}

fn expect_method(spec: &AttackSpec, allowed: &[Method]) -> Result<()> {
    if allowed.contains(&spec.method) {
        Ok(())
    } else {
        Err(CoreError::contract(OP, format!("spec is for {:?}", spec.method)))
    }
}

pub(crate) fn check_input(model: &dyn WhiteBox, x: &[f64], y: usize) -> Result<()> {
    let d: usize = model.input_shape().iter().product();
    if x.len() != d {
        return Err(CoreError::contract(OP, format!("input has {} values, model wants {d}", x.len())));
    }
    if !x.iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(CoreError::contract(OP, "input pixels must lie in [0, 1]"));
    }
    if model.num_classes() != 2 {
        return Err(CoreError::contract(OP, "attacks are defined for two-class models"));
    }
    if y >= 2 {
        return Err(CoreError::contract(OP, format!("label {y} out of range")));
    }
    Ok(())
}

/// Clamps `v` into the pixel box, then pulls it back onto the `eps`-ball
/// around `x`. Coordinates already inside the ball are left bit-identical;
/// the l2 pull-back rescales the whole offset and re-clamps.
pub(crate) fn box_ball(x: &[f64], v: &mut [f64], eps: f64, norm: Norm) {
    for vi in v.iter_mut() {
        *vi = vi.clamp(0.0, 1.0);
    }
    match norm {
        Norm::LInf => {
            for (vi, &xv) in v.iter_mut().zip(x) {
                let d = *vi - xv;
                if d > eps {
                    *vi = xv + eps;
                } else if d < -eps {
                    *vi = xv - eps;
                }
            }
        }
        Norm::L2 => {
            let dn = v.iter().zip(x).map(|(&a, &b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if dn > eps {
                let s = eps / dn;
                for (vi, &xv) in v.iter_mut().zip(x) {
                    *vi = (xv + (*vi - xv) * s).clamp(0.0, 1.0);
                }
            }
        }
    }
}

pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Max-subtracted softmax of a score slice.
pub(crate) fn softmax_slice(z: &[f64]) -> Vec<f64> {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|&v| v / total).collect()
}

/// Index of the largest probability; the earliest one on exact ties.
pub(crate) fn predicted(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn finite_grad(g: &[f64]) -> Result<()> {
    if g.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CoreError::contract(OP, "non-finite gradient"))
    }
}
