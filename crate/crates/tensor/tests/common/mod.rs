//! Shared test helpers: seeded randomness and naive reference
//! implementations kept deliberately separate from the library's own loops.
#![allow(dead_code)]


use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit(r: &mut ChaCha8Rng) -> f64 {
    (r.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn uniform(r: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit(r)
}

pub fn rand_vec(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| uniform(r, lo, hi)).collect()
}

/// Plain i-j-k triple-loop matrix product.
pub fn matmul_ref(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Sliding-window convolution over an explicitly zero-padded copy of the
/// input.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_ref(
    input: &[f64],
    kernel: &[f64],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    dil: usize,
    pad: usize,
) -> Vec<f64> {
    let ph = h + 2 * pad;
    let pw = w + 2 * pad;
    let mut padded = vec![0.0; b * cin * ph * pw];
    for bi in 0..b {
        for ci in 0..cin {
            for y in 0..h {
                for x in 0..w {
                    padded[((bi * cin + ci) * ph + y + pad) * pw + x + pad] =
                        input[((bi * cin + ci) * h + y) * w + x];
                }
            }
        }
    }
    let oh = ph - (dil * (kh - 1) + 1) + 1;
    let ow = pw - (dil * (kw - 1) + 1) + 1;
    let mut out = vec![0.0; b * f * oh * ow];
    for bi in 0..b {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                acc += padded[((bi * cin + ci) * ph + oy + ky * dil) * pw + ox + kx * dil]
                                    * kernel[((fi * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((bi * f + fi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Direct softmax without max subtraction; fine for small test values.
pub fn softmax_ref(xs: &[f64]) -> Vec<f64> {
    let z: f64 = xs.iter().map(|&v| v.exp()).sum();
    xs.iter().map(|&v| v.exp() / z).collect()
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!(
            (x - y).abs() <= tol,
            "{what}: index {i}: {x} vs {y} (diff {})",
            (x - y).abs()
        );
    }
}
