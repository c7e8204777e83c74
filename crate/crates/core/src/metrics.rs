//! Detection metrics over scored examples.
//!
//! Scores are "morph-likeness": higher means more likely morph. The fixed
//! decision rule is score >= threshold => flag as morph. Under it, apcer
//! (morphs passed as bona fide) is non-decreasing in the threshold and
//! bpcer (bona fides flagged) is non-increasing.
//!
//! All threshold metrics are exact empirical sweeps over the distinct
//! scores plus two sentinels; nothing is interpolated, so every reported
//! value is attained at its reported threshold.

use crate::error::{CoreError, Result};
use crate::LABEL_MORPH;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScores {
    scores: Vec<f64>,
    labels: Vec<u8>,
    n_morph: usize,
}

impl LabeledScores {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.is_empty() {
            return Err(CoreError::contract("LabeledScores", "no scores"));
        }
        if scores.len() != labels.len() {
            return Err(CoreError::contract(
                "LabeledScores",
                format!("{} scores vs {} labels", scores.len(), labels.len()),
            ));
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(CoreError::contract(
                "LabeledScores",
                format!("non-finite score {bad}"),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > LABEL_MORPH) {
            return Err(CoreError::contract(
                "LabeledScores",
                format!("label {bad} outside {{0, 1}}"),
            ));
        }
        let n_morph = labels.iter().filter(|&&l| l == LABEL_MORPH).count();
        Ok(LabeledScores { scores, labels, n_morph })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        false // constructor rejects empty inputs
    }

    pub fn n_morph(&self) -> usize {
        self.n_morph
    }

    pub fn n_bona_fide(&self) -> usize {
        self.scores.len() - self.n_morph
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    fn require_both_classes(&self, op: &'static str) -> Result<()> {
        if self.n_morph == 0 || self.n_morph == self.scores.len() {
            return Err(CoreError::SingleClass(op));
        }
        Ok(())
    }
}

/// One operating point of the detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub apcer: f64,
    pub bpcer: f64,
}

/// A rate read off at the best threshold satisfying a budget on the other
/// rate. `granularity_warning` is set when the constrained class has fewer
/// samples than 1/target, i.e. the budget is finer than the data resolves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateAtTarget {
    pub target: f64,
    pub value: f64,
    pub threshold: f64,
    pub granularity_warning: bool,
}

/// Probability that a random morph outscores a random bona fide, ties
/// counted half (Mann-Whitney). Computed by rank sum; for modest n every
/// partial sum is a small multiple of 1/2, so this equals the pairwise
/// count bit for bit.
pub fn roc_auc(ls: &LabeledScores) -> Result<f64> {
    ls.require_both_classes("roc_auc")?;
    let n = ls.scores.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| ls.scores[i].partial_cmp(&ls.scores[j]).unwrap());

    let mut morph_rank_sum = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && ls.scores[idx[j]] == ls.scores[idx[i]] {
            j += 1;
        }
        // Tied block occupies 1-based ranks i+1 ..= j; each member gets the mean.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            if ls.labels[k] == LABEL_MORPH {
                morph_rank_sum += avg_rank;
            }
        }
        i = j;
    }
    let nm = ls.n_morph() as f64;
    let nb = ls.n_bona_fide() as f64;
    Ok((morph_rank_sum - nm * (nm + 1.0) / 2.0) / (nm * nb))
}

/// (apcer, bpcer) at one threshold: apcer = morphs scoring below t over all
/// morphs, bpcer = bona fides scoring at or above t over all bona fides.
pub fn apcer_bpcer_at_threshold(ls: &LabeledScores, t: f64) -> Result<(f64, f64)> {
    ls.require_both_classes("apcer_bpcer_at_threshold")?;
    let mut missed = 0usize;
    let mut flagged = 0usize;
    for (&s, &l) in ls.scores.iter().zip(&ls.labels) {
        if l == LABEL_MORPH {
            missed += (s < t) as usize;
        } else {
            flagged += (s >= t) as usize;
        }
    }
    Ok((
        missed as f64 / ls.n_morph() as f64,
        flagged as f64 / ls.n_bona_fide() as f64,
    ))
}

/// One point per distinct score plus sentinels at -inf (flag everything)
/// and +inf (flag nothing), in increasing threshold order.
pub fn det_curve(ls: &LabeledScores) -> Result<Vec<DetPoint>> {
    ls.require_both_classes("det_curve")?;
    let nm = ls.n_morph() as f64;
    let nb = ls.n_bona_fide() as f64;

    let n = ls.scores.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| ls.scores[i].partial_cmp(&ls.scores[j]).unwrap());

    let mut points = Vec::new();
    points.push(DetPoint { threshold: f64::NEG_INFINITY, apcer: 0.0, bpcer: 1.0 });

    // Walk distinct values; counts of samples strictly below the current
    // value give the rates at threshold = value.
    let mut morphs_below = 0usize;
    let mut bfs_below = 0usize;
    let mut i = 0;
    while i < n {
        let t = ls.scores[idx[i]];
        points.push(DetPoint {
            threshold: t,
            apcer: morphs_below as f64 / nm,
            bpcer: (ls.n_bona_fide() - bfs_below) as f64 / nb,
        });
        while i < n && ls.scores[idx[i]] == t {
            if ls.labels[idx[i]] == LABEL_MORPH {
                morphs_below += 1;
            } else {
                bfs_below += 1;
            }
            i += 1;
        }
    }

    points.push(DetPoint { threshold: f64::INFINITY, apcer: 1.0, bpcer: 0.0 });
    Ok(points)
}

/// apcer at the smallest threshold whose bpcer fits the budget. bpcer only
/// falls as the threshold grows, so the first fit flags the most morphs the
/// budget allows and therefore minimizes apcer.
pub fn apcer_at_bpcer(ls: &LabeledScores, target: f64) -> Result<RateAtTarget> {
    check_target(target)?;
    let curve = det_curve(ls)?;
    let p = curve
        .iter()
        .find(|p| p.bpcer <= target)
        .expect("bpcer reaches 0 at +inf");
    Ok(RateAtTarget {
        target,
        value: p.apcer,
        threshold: p.threshold,
        granularity_warning: (ls.n_bona_fide() as f64) * target < 1.0,
    })
}

/// Dual of `apcer_at_bpcer`: bpcer at the largest threshold whose apcer
/// fits the budget.
pub fn bpcer_at_apcer(ls: &LabeledScores, target: f64) -> Result<RateAtTarget> {
    check_target(target)?;
    let curve = det_curve(ls)?;
    let p = curve
        .iter()
        .rev()
        .find(|p| p.apcer <= target)
        .expect("apcer reaches 0 at -inf");
    Ok(RateAtTarget {
        target,
        value: p.bpcer,
        threshold: p.threshold,
        granularity_warning: (ls.n_morph() as f64) * target < 1.0,
    })
}

fn check_target(target: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&target) {
        return Err(CoreError::contract(
            "rate_at_target",
            format!("target {target} outside [0, 1]"),
        ));
    }
    Ok(())
}

/// Equal-error operating point: the sweep point minimizing |apcer - bpcer|,
/// ties broken toward the lower threshold. Returns (rate, threshold) where
/// rate is the mean of the two rates there.
pub fn deer(ls: &LabeledScores) -> Result<(f64, f64)> {
    let curve = det_curve(ls)?;
    let mut best = &curve[0];
    let mut best_gap = f64::INFINITY;
    for p in &curve {
        let gap = (p.apcer - p.bpcer).abs();
        if gap < best_gap {
            best_gap = gap;
            best = p;
        }
    }
    Ok(((best.apcer + best.bpcer) / 2.0, best.threshold))
}

/// Full evaluation bundle for a score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub apcer_at_bpcer: Vec<RateAtTarget>,
    pub bpcer_at_apcer: Vec<RateAtTarget>,
    pub deer: f64,
    pub deer_threshold: f64,
    pub n_morph: usize,
    pub n_bona_fide: usize,
    #[serde(skip)]
    pub det: Vec<DetPoint>,
}

/// Default operating-point budget: 1%.
pub const DEFAULT_RATE_TARGET: f64 = 0.01;

pub fn eval_report(ls: &LabeledScores, targets: &[f64]) -> Result<EvalReport> {
    let auc = roc_auc(ls)?;
    let mut at_bpcer = Vec::with_capacity(targets.len());
    let mut at_apcer = Vec::with_capacity(targets.len());
    for &t in targets {
        at_bpcer.push(apcer_at_bpcer(ls, t)?);
        at_apcer.push(bpcer_at_apcer(ls, t)?);
    }
    let (deer_rate, deer_t) = deer(ls)?;
    Ok(EvalReport {
        auc,
        apcer_at_bpcer: at_bpcer,
        bpcer_at_apcer: at_apcer,
        deer: deer_rate,
        deer_threshold: deer_t,
        n_morph: ls.n_morph(),
        n_bona_fide: ls.n_bona_fide(),
        det: det_curve(ls)?,
    })
}
