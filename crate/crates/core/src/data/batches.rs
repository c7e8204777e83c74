//! Training-time input pipeline: flip augmentation and class-rebalanced
//! batch construction.

use crate::error::{CoreError, Result};
use crate::rng;
use rand_core::RngCore;

/// Mirror a [c, h, w] image along the width axis.
pub fn flip_horizontal(img: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    assert_eq!(img.len(), c * h * w, "flip_horizontal: shape mismatch");
    let mut out = vec![0.0; img.len()];
    for ch in 0..c {
        for y in 0..h {
            let row = ch * h * w + y * w;
            for x in 0..w {
                out[row + x] = img[row + w - 1 - x];
            }
        }
    }
    out
}

/// Horizontal mirror with probability one half; otherwise a plain copy.
pub fn augment_flip(img: &[f64], c: usize, h: usize, w: usize, rng: &mut (impl RngCore + ?Sized)) -> Vec<f64> {
    if rng::coin(rng, 0.5) {
        flip_horizontal(img, c, h, w)
    } else {
        img.to_vec()
    }
}

/// One epoch of class-rebalanced batches over `indices` (positions into a
/// dataset; `labels` is indexed by those positions).
///
/// The majority class is permuted once, so an epoch touches each of its
/// samples. The minority class is tiled with fresh shuffles up to the
/// majority count, giving every batch an expected 1:1 ratio. When the
/// classes are already even this degenerates to one plain shuffle of all
/// indices. `strict` interleaves the two classes so each batch's label
/// counts differ by at most one.
pub fn balanced_batches(
    labels: &[u8],
    indices: &[usize],
    batch_size: usize,
    strict: bool,
    rng: &mut (impl RngCore + ?Sized),
) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(CoreError::contract(
            "balanced_batches",
            format!("batch size {batch_size} cannot hold both classes"),
        ));
    }
    let mut class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for &i in indices {
        class[labels[i] as usize].push(i);
    }
    if class[0].is_empty() || class[1].is_empty() {
        return Err(CoreError::contract(
            "balanced_batches",
            "both classes must be present to balance",
        ));
    }

    if class[0].len() == class[1].len() && !strict {
        let mut all = indices.to_vec();
        rng::shuffle(rng, &mut all);
        return Ok(all.chunks(batch_size).map(<[usize]>::to_vec).collect());
    }

    let (mut majority, minority) = if class[0].len() >= class[1].len() {
        (class[0].clone(), &class[1])
    } else {
        (class[1].clone(), &class[0])
    };
    rng::shuffle(rng, &mut majority);

    // Tile the minority with reshuffles; each sample appears floor or ceil
    // of the imbalance ratio times.
    let mut tiled = Vec::with_capacity(majority.len());
    while tiled.len() < majority.len() {
        let mut cycle = minority.to_vec();
        rng::shuffle(rng, &mut cycle);
        let need = majority.len() - tiled.len();
        cycle.truncate(need.min(cycle.len()));
        tiled.extend(cycle);
    }

    let stream: Vec<usize> = if strict {
        majority
            .iter()
            .zip(&tiled)
            .flat_map(|(&m, &t)| [m, t])
            .collect()
    } else {
        let mut merged: Vec<usize> = majority.iter().chain(&tiled).copied().collect();
        rng::shuffle(rng, &mut merged);
        merged
    };
    Ok(stream.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
