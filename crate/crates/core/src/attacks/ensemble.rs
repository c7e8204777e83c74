//! Joint attack on several models at once. The objective trades the
//! negative log of the weighted mixture of true-class probabilities against
//! an l2 distance penalty, climbed by signed-gradient ascent on the max-norm
//! ball. The returned point is the best-scoring iterate, so the sequence of
//! accepted objective values never decreases.

use super::{
    box_ball, check_input, finite_grad, predicted, sign, AdvResult, AttackSpec,
    EnsembleAdvResult, Method, WhiteBox, OP,
};
use crate::{CoreError, Result};
use morphguard_tensor::Graph;

pub fn ensemble_attack(
    models: &[&dyn WhiteBox],
    x: &[f64],
    y: usize,
    spec: &AttackSpec,
) -> Result<EnsembleAdvResult> {
    if spec.method != Method::Ensemble {
        return Err(CoreError::contract(OP, format!("spec is for {:?}", spec.method)));
    }
    spec.validate(models.len())?;
    let shape = models[0].input_shape();
    for m in models {
        if m.input_shape() != shape {
            return Err(CoreError::contract(OP, "models disagree on the input shape"));
        }
    }
    check_input(models[0], x, y)?;
    for m in models {
        if m.num_classes() != 2 {
            return Err(CoreError::contract(OP, "attacks are defined for two-class models"));
        }
    }

    let n = models.len();
    let alpha: Vec<f64> = if spec.weights.is_empty() {
        vec![1.0 / n as f64; n]
    } else {
        spec.weights.clone()
    };
    let eps = spec.epsilon;

    struct Iterate {
        point: Vec<f64>,
        objective: f64,
        member_probs: Vec<Vec<f64>>,
    }

    // Objective, per-member probabilities, and (optionally) the input
    // gradient at one point.
    let eval = |pt: &[f64], want_grad: bool| -> Result<(Iterate, Vec<f64>)> {
        let mut g = Graph::new();
        let leaf = g.leaf_from(&shape, pt.to_vec(), want_grad)?;
        let mut mix = None;
        let mut member_probs = Vec::with_capacity(n);
        for (m, &a) in models.iter().zip(&alpha) {
            let s = m.scores(&mut g, leaf)?;
            let p = g.softmax(s, 0)?;
            member_probs.push(g.value(p).to_vec());
            let py = g.take_index(p, y)?;
            let term = g.mul_scalar(py, a);
            mix = Some(match mix {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        let mix = mix.expect("at least one model");
        let lg = g.log(mix);
        let gain = g.mul_scalar(lg, -1.0);
        let clean = g.constant(&shape, x.to_vec())?;
        let dlt = g.sub(leaf, clean)?;
        let sq = g.mul(dlt, dlt)?;
        let d2 = g.sum(sq);
        // A vanishing guard keeps the distance differentiable at zero offset
        // without moving its value.
        let guard = g.scalar_const(1e-24);
        let guarded = g.add(d2, guard)?;
        let dist = g.sqrt(guarded);
        let penalty = g.mul_scalar(dist, spec.lambda);
        let obj = g.sub(gain, penalty)?;
        let objective = g.value(obj)[0];
        if !objective.is_finite() {
            return Err(CoreError::contract(OP, "non-finite objective"));
        }
        let grad = if want_grad {
            g.backward(obj)?;
            let gr = g.grad(leaf).ok_or_else(|| CoreError::contract(OP, "missing gradient"))?;
            finite_grad(gr)?;
            gr.to_vec()
        } else {
            Vec::new()
        };
        Ok((Iterate { point: pt.to_vec(), objective, member_probs }, grad))
    };

    fn track(best: &mut Option<Iterate>, it: Iterate) {
        if best.as_ref().is_none_or(|b| it.objective > b.objective) {
            *best = Some(it);
        }
    }

    let mut xt = x.to_vec();
    let mut best: Option<Iterate> = None;
    for _ in 0..spec.num_steps {
        let (it, grad) = eval(&xt, true)?;
        track(&mut best, it);
        let mut v: Vec<f64> =
            xt.iter().zip(&grad).map(|(&xv, &gv)| xv + spec.step_size * sign(gv)).collect();
        box_ball(x, &mut v, eps, spec.norm);
        xt = v;
    }
    let (it, _) = eval(&xt, false)?;
    track(&mut best, it);

    let best = best.expect("at least one iterate was tracked");
    let fooled: Vec<bool> = best.member_probs.iter().map(|p| predicted(p) != y).collect();
    let mut mixture = vec![0.0; 2];
    for (p, &a) in best.member_probs.iter().zip(&alpha) {
        mixture[0] += a * p[0];
        mixture[1] += a * p[1];
    }
    let delta: Vec<f64> = best.point.iter().zip(x).map(|(&a, &b)| a - b).collect();
    Ok(EnsembleAdvResult {
        result: AdvResult {
            success: predicted(&mixture) != y,
            adversarial: best.point,
            delta,
            queries: spec.num_steps as u64 + 1,
            final_loss: best.objective,
        },
        fooled,
    })
}
