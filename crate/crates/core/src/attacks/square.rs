//! Random-search attack that only ever calls the model's inference
//! interface. Proposals overwrite axis-aligned squares of the perturbation
//! with saturated values and are kept only when the margin strictly
//! improves, so the running point is always the best one queried so far.

use super::{predicted, AdvResult, AttackSpec, Method, Norm, ScoreOracle, OP};
use crate::rng;
use crate::{CoreError, Result};

pub fn square_attack(
    oracle: &dyn ScoreOracle,
    x: &[f64],
    y: usize,
    spec: &AttackSpec,
    shape: &[usize],
) -> Result<AdvResult> {
    if spec.method != Method::Square {
        return Err(CoreError::contract(OP, format!("spec is for {:?}", spec.method)));
    }
    spec.validate(1)?;
    if spec.norm != Norm::LInf {
        return Err(CoreError::contract(OP, "the square search works on the max-norm ball"));
    }
    if shape.len() != 3 {
        return Err(CoreError::contract(OP, "the square search needs [C, H, W] inputs"));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if x.len() != c * h * w {
        return Err(CoreError::contract(OP, format!("input has {} values, shape wants {}", x.len(), c * h * w)));
    }
    if !x.iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(CoreError::contract(OP, "input pixels must lie in [0, 1]"));
    }
    if y >= 2 {
        return Err(CoreError::contract(OP, format!("label {y} out of range")));
    }
    let eps = spec.epsilon;
    let budget = spec.queries;
    let mut r = rng::stream(spec.seed, "attack-square", 0);

    let margin_of = |p: &[f64]| -> Result<f64> {
        if p.len() != 2 || p.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::contract(OP, "oracle must return two finite class scores"));
        }
        Ok(p[1 - y] - p[y])
    };

    let mut queries = 0u64;
    let ask = |pt: &[f64], queries: &mut u64| -> Result<(Vec<f64>, f64)> {
        *queries += 1;
        let p = oracle.class_probs(pt)?;
        let m = margin_of(&p)?;
        Ok((p, m))
    };

    let (mut cur_p, mut cur_m) = ask(x, &mut queries)?;
    let mut cur = x.to_vec();

    // Vertical stripe init: one signed full-strength column per channel.
    if queries < budget {
        let mut cand = x.to_vec();
        for ch in 0..c {
            for col in 0..w {
                let s = if rng::coin(&mut r, 0.5) { eps } else { -eps };
                for row in 0..h {
                    let idx = ch * h * w + row * w + col;
                    cand[idx] = (x[idx] + s).clamp(0.0, 1.0);
                }
            }
        }
        let (p, m) = ask(&cand, &mut queries)?;
        if m > cur_m {
            cur = cand;
            cur_p = p;
            cur_m = m;
        }
    }

    // Square proposals with a side that halves as the budget is spent.
    let side_limit = h.min(w);
    while queries < budget {
        let frac = queries as f64 / budget as f64;
        let crossed = [0.1, 0.25, 0.5, 0.75].iter().filter(|&&t| frac >= t).count();
        let area = spec.patch_frac / (1u64 << crossed) as f64;
        let side = ((area.sqrt() * h as f64).round() as usize).clamp(1, side_limit);

        let top = rng::index(&mut r, h - side + 1);
        let left = rng::index(&mut r, w - side + 1);
        let mut cand = cur.clone();
        for ch in 0..c {
            let s = if rng::coin(&mut r, 0.5) { eps } else { -eps };
            for row in top..top + side {
                for col in left..left + side {
                    let idx = ch * h * w + row * w + col;
                    cand[idx] = (x[idx] + s).clamp(0.0, 1.0);
                }
            }
        }
        let (p, m) = ask(&cand, &mut queries)?;
        if m > cur_m {
            cur = cand;
            cur_p = p;
            cur_m = m;
        }
    }

    let delta: Vec<f64> = cur.iter().zip(x).map(|(&a, &b)| a - b).collect();
    Ok(AdvResult {
        success: predicted(&cur_p) != y,
        adversarial: cur,
        delta,
        queries,
        final_loss: cur_m,
    })
}
