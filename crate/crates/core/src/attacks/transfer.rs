//! Cross-model robustness accounting: craft adversarial examples against
//! each source, then measure every target's accuracy on them. Row by column,
//! the entry is the target's robust accuracy under the source's attack, so
//! transferable attacks show up as low off-diagonal values.

use super::{predicted, run_attack, AttackSpec, ScoreOracle, WhiteBox, OP};
use crate::data::Dataset;
use crate::rng;
use crate::{CoreError, Result};
use rand_core::RngCore;
use serde::{Deserialize, Serialize};

/// The models an attack is crafted against, under one shared spec. A single
/// model suits the single-model methods; several models demand the joint
/// method.
pub struct AttackSource<'a> {
    pub id: String,
    pub models: Vec<&'a dyn WhiteBox>,
    pub spec: AttackSpec,
}

/// A model evaluated on someone else's adversarial examples. Only the
/// inference interface is touched.
pub struct TransferTarget<'a> {
    pub id: String,
    pub model: &'a dyn ScoreOracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub source_ids: Vec<String>,
    pub target_ids: Vec<String>,
    /// `robust_accuracy[i][j]`: accuracy of target `j` on examples crafted
    /// against source `i`.
    pub robust_accuracy: Vec<Vec<f64>>,
}

/// Crafts adversarial versions of the chosen dataset rows against every
/// source and scores every target on them. Each example derives its own
/// attack seed from the spec seed and the row index, so the matrix is
/// reproducible row order and all.
pub fn transfer_matrix(
    sources: &[AttackSource],
    targets: &[TransferTarget],
    ds: &Dataset,
    indices: &[usize],
) -> Result<TransferMatrix> {
    if sources.is_empty() {
        return Err(CoreError::contract(OP, "no attack sources"));
    }
    if targets.is_empty() {
        return Err(CoreError::contract(OP, "no transfer targets"));
    }
    if indices.is_empty() {
        return Err(CoreError::contract(OP, "no examples selected"));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= ds.n()) {
        return Err(CoreError::contract(OP, format!("index {bad} outside the dataset")));
    }
    for src in sources {
        src.spec.validate(src.models.len())?;
    }

    let mut robust_accuracy = Vec::with_capacity(sources.len());
    for src in sources {
        let mut crafted = Vec::with_capacity(indices.len());
        for &i in indices {
            let mut seeder = rng::stream(src.spec.seed, "transfer-seed", i as u64);
            let spec = AttackSpec { seed: seeder.next_u64(), ..src.spec.clone() };
            let out = run_attack(&src.models, ds.image(i), ds.label(i) as usize, &spec)?;
            crafted.push(out.result.adversarial);
        }

        let mut row = Vec::with_capacity(targets.len());
        for tgt in targets {
            let mut correct = 0usize;
            for (adv, &i) in crafted.iter().zip(indices) {
                let p = tgt.model.class_probs(adv)?;
                if predicted(&p) == ds.label(i) as usize {
                    correct += 1;
                }
            }
            row.push(correct as f64 / indices.len() as f64);
        }
        robust_accuracy.push(row);
    }

    Ok(TransferMatrix {
        source_ids: sources.iter().map(|s| s.id.clone()).collect(),
        target_ids: targets.iter().map(|t| t.id.clone()).collect(),
        robust_accuracy,
    })
}
