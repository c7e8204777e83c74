//! Parametric-space search for the smallest perturbation that flips the
//! prediction. Pixels are parameterized through a tanh squash, so every
//! iterate automatically satisfies the [0, 1] box, and the squared distance
//! plus a hinged score margin is minimized with Adam. There is no ball
//! constraint; the distance term itself keeps the move small.

use super::{
    check_input, expect_method, finite_grad, predicted, softmax_slice, AdvResult, AttackSpec,
    Method, WhiteBox, OP,
};
use crate::{CoreError, Result};
use morphguard_tensor::{AdamConfig, AdamState, Graph, Tensor};

pub fn cw_l2(model: &dyn WhiteBox, x: &[f64], y: usize, spec: &AttackSpec) -> Result<AdvResult> {
    expect_method(spec, &[Method::CwL2])?;
    spec.validate(1)?;
    check_input(model, x, y)?;
    let shape = model.input_shape();
    let other = 1 - y;

    // atanh of the (slightly shrunk) recentered pixels; exact endpoints
    // would be infinite.
    let w0: Vec<f64> = x
        .iter()
        .map(|&v| {
            let t = (2.0 * v - 1.0).clamp(-1.0 + 1e-6, 1.0 - 1e-6);
            t.atanh()
        })
        .collect();
    let mut w = Tensor::from_vec(shape.clone(), w0).map_err(CoreError::from)?.with_grad();
    let mut adam = AdamState::new(w.numel());
    let adam_cfg = AdamConfig { lr: spec.cw_lr, ..AdamConfig::default() };

    struct Iterate {
        point: Vec<f64>,
        dist2: f64,
        total: f64,
        probs: Vec<f64>,
    }
    let mut best_hit: Option<Iterate> = None;
    let mut best_miss: Option<Iterate> = None;

    for step in 0..=spec.cw_steps {
        let mut g = Graph::new();
        let leaf = g.leaf(&w);
        let th = g.tanh(leaf);
        let ones = g.constant(&shape, vec![1.0; x.len()])?;
        let shifted = g.add(th, ones)?;
        let xadv = g.mul_scalar(shifted, 0.5);
        let clean = g.constant(&shape, x.to_vec())?;
        let dlt = g.sub(xadv, clean)?;
        let sq = g.mul(dlt, dlt)?;
        let dist2 = g.sum(sq);
        let s = model.scores(&mut g, xadv)?;
        let zy = g.take_index(s, y)?;
        let zo = g.take_index(s, other)?;
        let margin = g.sub(zy, zo)?;
        let kappa = g.scalar_const(spec.cw_kappa);
        let hinged = g.add(margin, kappa)?;
        let hinged = g.relu(hinged);
        let hinged = g.sub(hinged, kappa)?;
        let weighted = g.mul_scalar(hinged, spec.cw_c);
        let total = g.add(dist2, weighted)?;

        let it = Iterate {
            point: g.value(xadv).to_vec(),
            dist2: g.value(dist2)[0],
            total: g.value(total)[0],
            probs: softmax_slice(g.value(s)),
        };
        if !it.total.is_finite() {
            return Err(CoreError::contract(OP, "non-finite objective"));
        }
        if predicted(&it.probs) != y {
            if best_hit.as_ref().is_none_or(|b| it.dist2 < b.dist2) {
                best_hit = Some(it);
            }
        } else if best_miss.as_ref().is_none_or(|b| it.total < b.total) {
            best_miss = Some(it);
        }

        if step == spec.cw_steps {
            break;
        }
        g.backward(total)?;
        let gw = g.grad(leaf).ok_or_else(|| CoreError::contract(OP, "missing gradient"))?;
        finite_grad(gw)?;
        let gw = gw.to_vec();
        w.zero_grad();
        w.accumulate_grad(&gw).map_err(CoreError::from)?;
        adam.step(&mut w, &adam_cfg);
    }

    let (it, success) = match (best_hit, best_miss) {
        (Some(hit), _) => (hit, true),
        (None, Some(miss)) => (miss, false),
        (None, None) => unreachable!("the loop always records at least one iterate"),
    };
    let delta: Vec<f64> = it.point.iter().zip(x).map(|(&a, &b)| a - b).collect();
    Ok(AdvResult {
        adversarial: it.point,
        delta,
        success,
        queries: spec.cw_steps as u64 + 1,
        final_loss: it.total,
    })
}
