//! Finite-difference gradient checking.
//!
//! The checker never inspects the graph: it re-evaluates a black-box scalar
//! function at perturbed inputs, so it stays an independent oracle for the
//! analytic backward rules.

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut work = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let x0 = work[i];
        work[i] = x0 + h;
        let fp = f(&work);
        work[i] = x0 - h;
        let fm = f(&work);
        work[i] = x0;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Central finite-difference gradient of selected coordinates only.
pub fn fd_gradient_at(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    coords: &[usize],
    h: f64,
) -> Vec<f64> {
    let mut work = x.to_vec();
    let mut grad = vec![0.0; coords.len()];
    for (out, &i) in grad.iter_mut().zip(coords) {
        let x0 = work[i];
        work[i] = x0 + h;
        let fp = f(&work);
        work[i] = x0 - h;
        let fm = f(&work);
        work[i] = x0;
        *out = (fp - fm) / (2.0 * h);
    }
    grad
}

/// `|a - n| / max(1, |a|, |n|)`: relative where values are large, absolute
/// near zero.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0_f64.max(a.abs()).max(n.abs())
}

/// Worst pairwise error between analytic and numeric gradients.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Default step and tolerance for f64 checks.
pub const FD_H: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

use crate::graph::{Graph, TensorId};

/// Checks analytic gradients of `build` against central differences for
/// every input, using a fixed non-uniform cotangent so all output
/// components contribute. Returns the worst relative error.
///
/// `build` must be a pure function of the graph inputs (same ids, same
/// order) so the finite-difference re-evaluations see the same computation.
pub fn check_grads(
    inputs: &[(Vec<usize>, Vec<f64>)],
    build: impl Fn(&mut Graph, &[TensorId]) -> crate::Result<TensorId>,
    h: f64,
) -> crate::Result<f64> {
    let mut g = Graph::new();
    let mut ids = Vec::with_capacity(inputs.len());
    for (shape, data) in inputs {
        ids.push(g.leaf_from(shape, data.clone(), true)?);
    }
    let out = build(&mut g, &ids)?;
    let out_shape = g.shape(out).to_vec();
    let w = cotangent(g.value(out).len());
    let wid = g.constant(&out_shape, w.clone())?;
    let prod = g.mul(out, wid)?;
    let loss = g.sum(prod);
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, (_, data))| g.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; data.len()]))
        .collect();

    let mut worst = 0.0f64;
    for k in 0..inputs.len() {
        let f = |xk: &[f64]| -> f64 {
            let mut g = Graph::new();
            let mut ids = Vec::with_capacity(inputs.len());
            for (j, (shape, data)) in inputs.iter().enumerate() {
                let data = if j == k { xk.to_vec() } else { data.clone() };
                ids.push(g.leaf_from(shape, data, false).expect("leaf in fd pass"));
            }
            let out = build(&mut g, &ids).expect("forward in fd pass");
            g.value(out).iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let numeric = fd_gradient(f, &inputs[k].1, h);
        worst = worst.max(max_rel_err(&analytic[k], &numeric));
    }
    Ok(worst)
}

fn cotangent(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let u = (i.wrapping_mul(2654435761) % 1000) as f64 / 999.0;
            0.3 + 0.6 * u
        })
        .collect()
}
