//! Synthetic morph-detection datasets: generation, splits, batching, and
//! the on-disk format.

mod batches;
mod io;
mod synth;

pub use batches::{augment_flip, balanced_batches, flip_horizontal};
pub use io::{load_dataset, save_dataset};
pub use synth::{
    blend, gen_bonafide, gen_morph, identity_latent, quantize_to_8bit, warp_image, IdentityLatent,
    MorphParams, SyntheticFaceSpec, WarpField,
};

use crate::error::{CoreError, Result};
use crate::rng;
use crate::{LABEL_BONA_FIDE, LABEL_MORPH};
use rand_core::RngCore;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train = 0,
    Val = 1,
    Test = 2,
}

impl Split {
    pub fn from_u8(v: u8) -> Result<Split> {
        match v {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            _ => Err(CoreError::Format(format!("unknown split tag {v}"))),
        }
    }
}

/// Where an example came from. Morph sources are indices into the same
/// dataset and always point at bona fide members of the morph's own split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Provenance {
    BonaFide { identity: u32 },
    Morph { src_a: u32, src_b: u32, alpha: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    height: usize,
    width: usize,
    images: Vec<Vec<f64>>,
    labels: Vec<u8>,
    splits: Vec<Split>,
    provenance: Vec<Provenance>,
}

impl Dataset {
    pub fn from_parts(
        height: usize,
        width: usize,
        images: Vec<Vec<f64>>,
        labels: Vec<u8>,
        splits: Vec<Split>,
        provenance: Vec<Provenance>,
    ) -> Result<Dataset> {
        let n = images.len();
        if labels.len() != n || splits.len() != n || provenance.len() != n {
            return Err(CoreError::contract("Dataset", "column lengths disagree"));
        }
        if images.iter().any(|img| img.len() != 3 * height * width) {
            return Err(CoreError::contract(
                "Dataset",
                format!("image is not [3, {height}, {width}]"),
            ));
        }
        Ok(Dataset { height, width, images, labels, splits, provenance })
    }

    pub fn n(&self) -> usize {
        self.images.len()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn split(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn provenance(&self, i: usize) -> Provenance {
        self.provenance[i]
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.splits[i] == split).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_identities: usize,
    pub bonafide_per_id: usize,
    pub n_morphs: usize,
    pub size: usize,
    pub noise_level: f64,
    pub morph: MorphParams,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl DatasetConfig {
    fn validate(&self) -> Result<()> {
        let bad = |why: String| Err(CoreError::Contract { op: "gen_dataset", why });
        if self.n_identities == 0 || self.bonafide_per_id == 0 {
            return bad("need at least one identity and one capture each".into());
        }
        if self.size < 8 {
            return bad(format!("size {} is below the minimum of 8", self.size));
        }
        if !(self.train_frac > 0.0
            && self.val_frac >= 0.0
            && self.train_frac + self.val_frac < 1.0 + 1e-9)
        {
            return bad(format!(
                "split fractions {}/{} leave no room",
                self.train_frac, self.val_frac
            ));
        }
        let m = &self.morph;
        if !(0.3..=0.7).contains(&m.alpha_lo)
            || !(0.3..=0.7).contains(&m.alpha_hi)
            || m.alpha_lo > m.alpha_hi
        {
            return bad(format!(
                "blend range [{}, {}] must sit inside [0.3, 0.7]",
                m.alpha_lo, m.alpha_hi
            ));
        }
        if m.warp_amplitude < 0.0 || m.warp_cycles == 0 {
            return bad("warp needs a nonnegative amplitude and at least one cycle".into());
        }
        Ok(())
    }
}

/// Identity counts per split: train gets at least one identity, val and
/// test round from their fractions.
fn split_identity_counts(cfg: &DatasetConfig) -> (usize, usize, usize) {
    let n = cfg.n_identities;
    let n_train = ((cfg.train_frac * n as f64).round() as usize).clamp(1, n);
    let n_val = ((cfg.val_frac * n as f64).round() as usize).min(n - n_train);
    (n_train, n_val, n - n_train - n_val)
}

/// Spread morphs over splits proportionally to identity counts, exactly,
/// by largest remainder.
fn allocate_morphs(n_morphs: usize, id_counts: (usize, usize, usize)) -> [usize; 3] {
    let counts = [id_counts.0, id_counts.1, id_counts.2];
    let total: usize = counts.iter().sum();
    let mut alloc = [0usize; 3];
    let mut fracs = [0.0f64; 3];
    let mut assigned = 0;
    for i in 0..3 {
        // A split needs two identities to source a morph pair.
        if counts[i] < 2 {
            continue;
        }
        let share = n_morphs as f64 * counts[i] as f64 / total as f64;
        alloc[i] = share.floor() as usize;
        fracs[i] = share - share.floor();
        assigned += alloc[i];
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| fracs[b].partial_cmp(&fracs[a]).unwrap().then(a.cmp(&b)));
    let mut left = n_morphs - assigned;
    for &i in order.iter().cycle().take(3 * n_morphs.max(1)) {
        if left == 0 {
            break;
        }
        if counts[i] >= 2 {
            alloc[i] += 1;
            left -= 1;
        }
    }
    alloc
}

pub fn gen_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (n_train, n_val, n_test) = split_identity_counts(cfg);

    // Assign identities to splits by one seeded shuffle.
    let mut ids: Vec<u32> = (0..cfg.n_identities as u32).collect();
    let mut split_rng = rng::stream(cfg.seed, "split-assign", 0);
    rng::shuffle(&mut split_rng, &mut ids);
    let mut split_of = vec![Split::Test; cfg.n_identities];
    for (pos, &id) in ids.iter().enumerate() {
        split_of[id as usize] = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    let split_ids = |s: Split| -> Vec<u32> {
        ids.iter()
            .copied()
            .filter(|&id| split_of[id as usize] == s)
            .collect()
    };

    let alloc = allocate_morphs(cfg.n_morphs, (n_train, n_val, n_test));
    if alloc.iter().sum::<usize>() != cfg.n_morphs {
        return Err(CoreError::contract(
            "gen_dataset",
            format!(
                "cannot place {} morphs: no split has two identities \
                 ({n_train} train / {n_val} val / {n_test} test)",
                cfg.n_morphs
            ),
        ));
    }

    // Bona fides, grouped by identity in index order. Each capture derives
    // its own stream, so parallel rendering cannot reorder draws.
    let bpi = cfg.bonafide_per_id;
    let bona_fides: Vec<Vec<f64>> = (0..cfg.n_identities * bpi)
        .into_par_iter()
        .map(|k| {
            let identity = (k / bpi) as u32;
            gen_bonafide(&SyntheticFaceSpec {
                seed: rng::stream(cfg.seed, "capture-seed", k as u64).next_u64(),
                size: cfg.size,
                latent: identity_latent(cfg.seed, identity),
                noise_level: cfg.noise_level,
            })
        })
        .collect();

    let mut images = bona_fides;
    let mut labels = vec![LABEL_BONA_FIDE; images.len()];
    let mut splits: Vec<Split> = (0..cfg.n_identities)
        .flat_map(|id| std::iter::repeat(split_of[id]).take(bpi))
        .collect();
    let mut provenance: Vec<Provenance> = (0..cfg.n_identities)
        .flat_map(|id| {
            std::iter::repeat(Provenance::BonaFide { identity: id as u32 }).take(bpi)
        })
        .collect();

    // Morphs: per-morph streams decide the pair, blend, and warp.
    let mut morph_plan: Vec<(Split, u64)> = Vec::with_capacity(cfg.n_morphs);
    let split_order = [Split::Train, Split::Val, Split::Test];
    let mut m_idx = 0u64;
    for (si, &count) in alloc.iter().enumerate() {
        for _ in 0..count {
            morph_plan.push((split_order[si], m_idx));
            m_idx += 1;
        }
    }

    let morphs: Vec<Result<(Vec<f64>, Provenance)>> = morph_plan
        .par_iter()
        .map(|&(split, m)| {
            let members = split_ids(split);
            let mut r = rng::stream(cfg.seed, "morph", m);
            let ia = members[rng::index(&mut r, members.len())];
            let ib = loop {
                let cand = members[rng::index(&mut r, members.len())];
                if cand != ia {
                    break cand;
                }
            };
            let ja = rng::index(&mut r, bpi);
            let jb = rng::index(&mut r, bpi);
            let alpha = rng::uniform(&mut r, cfg.morph.alpha_lo, cfg.morph.alpha_hi);
            let warp_seed = r.next_u64();
            let src_a = ia as usize * bpi + ja;
            let src_b = ib as usize * bpi + jb;
            let img = gen_morph(
                &images[src_a],
                ia,
                &images[src_b],
                ib,
                cfg.size,
                cfg.size,
                alpha,
                warp_seed,
                &cfg.morph,
            )?;
            Ok((
                img,
                Provenance::Morph { src_a: src_a as u32, src_b: src_b as u32, alpha },
            ))
        })
        .collect();

    for (i, res) in morphs.into_iter().enumerate() {
        let (img, prov) = res?;
        images.push(img);
        labels.push(LABEL_MORPH);
        splits.push(morph_plan[i].0);
        provenance.push(prov);
    }

    Dataset::from_parts(cfg.size, cfg.size, images, labels, splits, provenance)
}
