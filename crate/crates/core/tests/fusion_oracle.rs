//! Fusion oracles: hand-evaluated voting rules, the bitwise equivalence
//! between the averaging score learner and soft voting, brute-force convexity
//! and duplicate-member properties, dropout forcing, and finite-difference
//! gradients through every differentiable ensemble path.

use morphguard_core::data::{Dataset, Provenance, Split};
use morphguard_core::fusion::{
    max_vote, normalize_scores, soft_vote, train_feature_super_learner,
    train_score_super_learner, Ensemble, FeatureLearner, FusionStrategy, FusionTrainConfig,
    Member, ScoreLearner, ScoreVector,
};
use morphguard_core::metrics::{roc_auc, LabeledScores};
use morphguard_core::models::{train_model, Model, NoiseAware, NoiseAwareConfig, TrainConfig, ViT, ViTConfig};
use morphguard_core::rng;
use morphguard_core::CoreError;
use morphguard_tensor::Graph;
use rand_chacha::ChaCha8Rng;

fn test_rng(tag: &str) -> ChaCha8Rng {
    rng::stream(0x5EED, tag, 0)
}

fn tiny_vit_config() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        channels: 3,
        patch_size: 4,
        embed_dim: 8,
        num_heads: 2,
        head_dim: 4,
        num_blocks: 1,
        ffn_hidden: 16,
        num_classes: 2,
    }
}

fn small_noise_aware_config() -> NoiseAwareConfig {
    NoiseAwareConfig {
        image_size: 8,
        channels: 3,
        width: 4,
        dilations: vec![1, 2],
        leaky_slope: 0.1,
        classifier_width: 4,
        num_classes: 2,
    }
}

fn sv(id: &str, logits: [f64; 2]) -> ScoreVector {
    ScoreVector::from_logits(id, logits).unwrap()
}

/// A ScoreVector with hand-set probabilities, for exercising the voting
/// arithmetic on exact values that no finite logit pair can produce.
fn sv_probs(id: &str, probs: [f64; 2]) -> ScoreVector {
    ScoreVector { model_id: id.to_string(), logits: [0.0, 0.0], probs }
}

fn random_votes(r: &mut ChaCha8Rng, n: usize) -> Vec<ScoreVector> {
    (0..n)
        .map(|m| {
            let logits = [rng::uniform(r, -5.0, 5.0), rng::uniform(r, -5.0, 5.0)];
            sv(&format!("m{m}"), logits)
        })
        .collect()
}

fn argmax2(p: &[f64; 2]) -> usize {
    usize::from(p[1] > p[0])
}

#[test]
fn normalize_zero_logits_gives_exact_uniform() {
    let p = normalize_scores([0.0, 0.0]).unwrap();
    assert_eq!(p, [0.5, 0.5]);
}

#[test]
fn normalize_matches_direct_softmax() {
    // Hand evaluation of softmax([2, -1]) without the max-subtract trick.
    let (e0, e1) = (2.0f64.exp(), (-1.0f64).exp());
    let hand = [e0 / (e0 + e1), e1 / (e0 + e1)];
    let p = normalize_scores([2.0, -1.0]).unwrap();
    assert!((p[0] - hand[0]).abs() < 1e-12 && (p[1] - hand[1]).abs() < 1e-12);

    let mut r = test_rng("normalize");
    for _ in 0..200 {
        let logits = [rng::uniform(&mut r, -30.0, 30.0), rng::uniform(&mut r, -30.0, 30.0)];
        let p = normalize_scores(logits).unwrap();
        assert!((p[0] + p[1] - 1.0).abs() < 1e-9);
        assert!(p[0] > 0.0 && p[1] > 0.0);
        assert_eq!(argmax2(&p), usize::from(logits[1] > logits[0]));
    }
}

#[test]
fn normalize_rejects_non_finite_logits() {
    for bad in [[f64::NAN, 0.0], [0.0, f64::INFINITY], [f64::NEG_INFINITY, 1.0]] {
        let err = normalize_scores(bad).unwrap_err();
        assert!(err.to_string().contains("non-finite"), "unexpected error: {err}");
    }
}

#[test]
fn score_vector_carries_normalized_probs() {
    let v = sv("vit-a", [1.25, -0.5]);
    assert_eq!(v.model_id, "vit-a");
    assert_eq!(v.logits, [1.25, -0.5]);
    assert_eq!(v.probs, normalize_scores([1.25, -0.5]).unwrap());
}

#[test]
fn soft_vote_identical_members_change_nothing() {
    let v = sv("a", [0.7, -0.3]);
    let fused = soft_vote(&[v.clone(), sv("b", [0.7, -0.3])]).unwrap();
    // p/2 + p/2 is exact in binary floating point.
    assert_eq!(fused, v.probs);
}

#[test]
fn soft_vote_averages_opposed_certainties_to_half() {
    let fused = soft_vote(&[sv_probs("a", [1.0, 0.0]), sv_probs("b", [0.0, 1.0])]).unwrap();
    assert_eq!(fused, [0.5, 0.5]);
    // The nearest reachable pair through actual logits agrees to rounding.
    let fused = soft_vote(&[sv("a", [40.0, -40.0]), sv("b", [-40.0, 40.0])]).unwrap();
    assert!((fused[0] - 0.5).abs() < 1e-12 && (fused[1] - 0.5).abs() < 1e-12);
}

#[test]
fn soft_vote_three_vectors_match_hand_mean() {
    let votes =
        [sv_probs("a", [0.9, 0.1]), sv_probs("b", [0.6, 0.4]), sv_probs("c", [0.25, 0.75])];
    let fused = soft_vote(&votes).unwrap();
    // Independent arithmetic: sum first, divide once.
    let hand = [(0.9 + 0.6 + 0.25) / 3.0, (0.1 + 0.4 + 0.75) / 3.0];
    assert!((fused[0] - hand[0]).abs() < 1e-12 && (fused[1] - hand[1]).abs() < 1e-12);
    assert!((fused[0] + fused[1] - 1.0).abs() < 1e-9);
}

#[test]
fn soft_vote_requires_at_least_one_member() {
    assert!(matches!(soft_vote(&[]), Err(CoreError::Contract { .. })));
}

#[test]
fn soft_vote_stays_inside_member_bounds() {
    let mut r = test_rng("convex");
    for _ in 0..500 {
        let votes = random_votes(&mut r, 3);
        let fused = soft_vote(&votes).unwrap();
        for c in 0..2 {
            let lo = votes.iter().map(|v| v.probs[c]).fold(f64::INFINITY, f64::min);
            let hi = votes.iter().map(|v| v.probs[c]).fold(f64::NEG_INFINITY, f64::max);
            assert!(lo - 1e-12 <= fused[c] && fused[c] <= hi + 1e-12);
        }
    }
}

#[test]
fn soft_vote_duplicate_flips_argmax_only_toward_its_own_class() {
    let mut r = test_rng("duplicate");
    for _ in 0..500 {
        let votes = random_votes(&mut r, 3);
        let before = argmax2(&soft_vote(&votes).unwrap());
        for k in 0..votes.len() {
            let mut extended = votes.clone();
            extended.push(votes[k].clone());
            let after = argmax2(&soft_vote(&extended).unwrap());
            if after != before {
                assert_eq!(
                    argmax2(&votes[k].probs),
                    after,
                    "argmax moved to a class the duplicate did not vote for"
                );
            }
        }
    }
}

#[test]
fn max_vote_follows_the_majority() {
    let morph = |id: &str| sv(id, [-2.0, 2.0]);
    let bona = |id: &str| sv(id, [2.0, -2.0]);
    assert_eq!(max_vote(&[morph("a"), morph("b"), morph("c")]).unwrap(), 1);
    assert_eq!(max_vote(&[morph("a"), morph("b"), bona("c")]).unwrap(), 1);
    assert_eq!(max_vote(&[morph("a"), bona("b"), bona("c")]).unwrap(), 0);
    assert_eq!(max_vote(&[bona("a")]).unwrap(), 0);
}

#[test]
fn max_vote_two_model_tie_returns_morph() {
    let votes = [sv("a", [3.0, -1.0]), sv("b", [-1.0, 3.0])];
    assert_eq!(max_vote(&votes).unwrap(), 1);
}

#[test]
fn max_vote_requires_at_least_one_member() {
    assert!(matches!(max_vote(&[]), Err(CoreError::Contract { .. })));
}

#[test]
fn averaging_score_learner_reproduces_soft_vote_bitwise() {
    let mut r = test_rng("averaging");
    for n in [1usize, 2, 3, 5] {
        let ids: Vec<String> = (0..n).map(|m| format!("m{m}")).collect();
        let learner = ScoreLearner::averaging(ids).unwrap();
        for _ in 0..50 {
            let votes = random_votes(&mut r, n);
            let fused = learner.predict(&votes).unwrap();
            assert_eq!(fused, soft_vote(&votes).unwrap());
        }
    }
}

#[test]
fn score_learner_matches_hand_linear_map() {
    let mut learner =
        ScoreLearner::new(vec!["a".to_string(), "b".to_string()], 7).unwrap();
    let w = [[0.5, -0.25], [1.5, 0.0], [-1.0, 2.0], [0.125, 0.75]];
    for (k, row) in w.iter().enumerate() {
        for c in 0..2 {
            learner.weight.data_mut()[k * 2 + c] = row[c];
        }
    }
    learner.bias.data_mut().copy_from_slice(&[0.1, -0.2]);
    let votes = [sv_probs("a", [0.8, 0.2]), sv_probs("b", [0.3, 0.7])];
    let s = [0.8, 0.2, 0.3, 0.7];
    let mut hand = [0.1, -0.2];
    for c in 0..2 {
        for k in 0..4 {
            hand[c] += s[k] * w[k][c];
        }
    }
    let got = learner.predict(&votes).unwrap();
    assert!((got[0] - hand[0]).abs() < 1e-12 && (got[1] - hand[1]).abs() < 1e-12);
}

#[test]
fn score_learner_validates_member_order_and_count() {
    let learner = ScoreLearner::new(vec!["a".to_string(), "b".to_string()], 7).unwrap();
    assert_eq!(learner.in_dim(), 4);
    let swapped = [sv("b", [1.0, 0.0]), sv("a", [0.0, 1.0])];
    assert!(learner.predict(&swapped).is_err());
    assert!(learner.predict(&[sv("a", [1.0, 0.0])]).is_err());
}

#[test]
fn feature_learner_matches_hand_two_layer_evaluation() {
    let mut learner = FeatureLearner::new(
        vec!["a".to_string(), "b".to_string()],
        vec![2, 2],
        2,
        0.2,
        11,
    )
    .unwrap();
    assert_eq!(learner.in_dim(), 4);
    let w1 = [[0.5, -1.0], [0.25, 0.75], [-0.5, 0.5], [1.0, 0.0]];
    let b1 = [0.1, -0.1];
    let w2 = [[1.0, -1.0], [0.5, 2.0]];
    let b2 = [0.0, 0.25];
    for k in 0..4 {
        for h in 0..2 {
            learner.w1.data_mut()[k * 2 + h] = w1[k][h];
        }
    }
    learner.b1.data_mut().copy_from_slice(&b1);
    for h in 0..2 {
        for c in 0..2 {
            learner.w2.data_mut()[h * 2 + c] = w2[h][c];
        }
    }
    learner.b2.data_mut().copy_from_slice(&b2);

    let features = [vec![1.0, -2.0], vec![0.5, 3.0]];
    let x = [1.0, -2.0, 0.5, 3.0];
    let mut hidden = b1;
    for h in 0..2 {
        for k in 0..4 {
            hidden[h] += x[k] * w1[k][h];
        }
        hidden[h] = hidden[h].max(0.0);
    }
    let mut logits = b2;
    for c in 0..2 {
        for h in 0..2 {
            logits[c] += hidden[h] * w2[h][c];
        }
    }
    let hand = normalize_scores(logits).unwrap();
    let got = learner.predict(&features).unwrap();
    assert!((got[0] - hand[0]).abs() < 1e-12 && (got[1] - hand[1]).abs() < 1e-12);
    assert!((got[0] + got[1] - 1.0).abs() < 1e-9);
}

#[test]
fn feature_learner_rejects_dimension_mismatch() {
    let learner = FeatureLearner::new(
        vec!["a".to_string(), "b".to_string()],
        vec![2, 2],
        4,
        0.2,
        11,
    )
    .unwrap();
    let err = learner.predict(&[vec![1.0, 2.0], vec![1.0, 2.0, 3.0]]).unwrap_err();
    assert!(err.to_string().contains("dim"), "unexpected error: {err}");
    assert!(learner.predict(&[vec![1.0, 2.0]]).is_err());
}

#[test]
fn feature_learner_inference_ignores_dropout_probability() {
    let ids = vec!["a".to_string(), "b".to_string()];
    let low = FeatureLearner::new(ids.clone(), vec![3, 3], 4, 0.0, 5).unwrap();
    let high = FeatureLearner::new(ids, vec![3, 3], 4, 0.95, 5).unwrap();
    let features = [vec![0.3, -0.7, 1.1], vec![0.9, 0.2, -0.4]];
    let a = low.predict(&features).unwrap();
    let b = high.predict(&features).unwrap();
    let c = high.predict(&features).unwrap();
    assert_eq!(a, b);
    assert_eq!(b, c);
}

/// Two-cluster toy faces: darker images are bona fide (label 0), brighter
/// ones morphs (label 1). A per-image brightness jitter wider than the class
/// gap makes the clusters overlap, so no member can reach a perfect AUC and
/// the fusion comparisons have room to differ. Each split gets `n_per_class`
/// of each class.
fn toy_clusters(n_per_class: usize, size: usize) -> Dataset {
    let mut r = test_rng("toy-data");
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    let mut provenance = Vec::new();
    for (si, split) in [Split::Train, Split::Val, Split::Test].into_iter().enumerate() {
        for i in 0..2 * n_per_class {
            let label = (i % 2) as u8;
            let base =
                if label == 0 { 0.40 } else { 0.60 } + rng::uniform(&mut r, -0.12, 0.12);
            let img: Vec<f64> =
                (0..3 * size * size).map(|_| base + 0.05 * (rng::unit(&mut r) - 0.5)).collect();
            images.push(img);
            labels.push(label);
            splits.push(split);
            provenance.push(Provenance::BonaFide { identity: (si * 2 * n_per_class + i) as u32 });
        }
    }
    Dataset::from_parts(size, size, images, labels, splits, provenance).unwrap()
}

#[test]
fn full_dropout_training_is_input_independent() {
    let ds_a = toy_clusters(4, 8);
    // Same labels and layout, different pixel content.
    let mut r = test_rng("toy-data-b");
    let images_b: Vec<Vec<f64>> = (0..ds_a.n())
        .map(|i| ds_a.image(i).iter().map(|v| v * 0.5 + 0.2 * rng::unit(&mut r)).collect())
        .collect();
    let ds_b = Dataset::from_parts(
        8,
        8,
        images_b,
        (0..ds_a.n()).map(|i| ds_a.label(i)).collect(),
        (0..ds_a.n()).map(|i| ds_a.split(i)).collect(),
        (0..ds_a.n()).map(|i| ds_a.provenance(i)).collect(),
    )
    .unwrap();

    let vit = Model::ViT(ViT::init(tiny_vit_config(), 21).unwrap());
    let na = Model::NoiseAware(NoiseAware::init(small_noise_aware_config(), 22).unwrap());
    let members = [&vit, &na];
    let ids = vec!["vit".to_string(), "cnn".to_string()];
    let dims = vec![vit.feature_dim(), na.feature_dim()];
    let cfg = FusionTrainConfig { epochs: 3, batch_size: 4, lr: 1e-2, ..Default::default() };
    let val: Vec<usize> = ds_a.split_indices(Split::Val);

    let mut trained = Vec::new();
    for ds in [&ds_a, &ds_b] {
        let mut learner = FeatureLearner::new(ids.clone(), dims.clone(), 4, 1.0, 33).unwrap();
        let init_w1 = learner.w1.data().to_vec();
        train_feature_super_learner(&mut learner, &members, ds, &val, &cfg).unwrap();
        // Every input is zeroed, so no gradient ever reaches the first layer.
        assert_eq!(learner.w1.data(), &init_w1[..]);
        trained.push(learner);
    }
    assert_eq!(trained[0].w1.data(), trained[1].w1.data());
    assert_eq!(trained[0].b1.data(), trained[1].b1.data());
    assert_eq!(trained[0].w2.data(), trained[1].w2.data());
    assert_eq!(trained[0].b2.data(), trained[1].b2.data());
}

#[test]
fn super_learners_freeze_members_and_keep_pace_with_soft_vote() {
    let ds = toy_clusters(12, 8);
    let train_idx = ds.split_indices(Split::Train);
    let val_idx = ds.split_indices(Split::Val);
    let test_idx = ds.split_indices(Split::Test);

    // One informative member and one untrained one, so fusion has to learn
    // which scores to trust. The convolutional model is the trained one: it
    // picks up the brightness signal in a few epochs, while the tiny
    // transformer's layer norms discard it.
    let mut na = Model::NoiseAware(NoiseAware::init(small_noise_aware_config(), 62).unwrap());
    let tc = TrainConfig {
        epochs: 40,
        batch_size: 4,
        lr: 5e-3,
        augment: false,
        ..TrainConfig::default()
    };
    train_model(&mut na, &ds, &train_idx, &tc).unwrap();
    let vit = Model::ViT(ViT::init(tiny_vit_config(), 61).unwrap());
    let members = [&na, &vit];
    let ids = vec!["cnn".to_string(), "vit".to_string()];
    let digests: Vec<u64> = members.iter().map(|m| m.param_digest()).collect();

    let votes_for = |i: usize| -> Vec<ScoreVector> {
        members
            .iter()
            .zip(&ids)
            .map(|(m, id)| {
                let p = m.probs_for(ds.image(i)).unwrap();
                let l = m.logits_for(ds.image(i)).unwrap();
                ScoreVector { model_id: id.clone(), logits: [l[0], l[1]], probs: [p[0], p[1]] }
            })
            .collect()
    };
    let auc_of = |scores: Vec<f64>| -> f64 {
        let labels: Vec<u8> = test_idx.iter().map(|&i| ds.label(i)).collect();
        roc_auc(&LabeledScores::new(scores, labels).unwrap()).unwrap()
    };

    let soft_auc =
        auc_of(test_idx.iter().map(|&i| soft_vote(&votes_for(i)).unwrap()[1]).collect());

    let cfg = FusionTrainConfig { epochs: 60, batch_size: 4, lr: 5e-2, ..Default::default() };
    let mut score_learner = ScoreLearner::new(ids.clone(), 71).unwrap();
    let trace = train_score_super_learner(&mut score_learner, &members, &ds, &val_idx, &cfg)
        .unwrap();
    assert!(trace.iter().all(|e| e.mean_loss.is_finite() && e.accuracy.is_finite()));
    assert!(trace.last().unwrap().mean_loss < trace[0].mean_loss);
    let score_auc =
        auc_of(test_idx.iter().map(|&i| score_learner.predict(&votes_for(i)).unwrap()[1]).collect());
    assert!(
        score_auc >= soft_auc - 0.02,
        "trained score learner AUC {score_auc} fell behind soft vote {soft_auc}"
    );

    let dims = vec![members[0].feature_dim(), members[1].feature_dim()];
    let mut feat_learner = FeatureLearner::new(ids.clone(), dims, 8, 0.1, 72).unwrap();
    let trace =
        train_feature_super_learner(&mut feat_learner, &members, &ds, &val_idx, &cfg).unwrap();
    assert!(trace.last().unwrap().mean_loss < trace[0].mean_loss);
    let feat_auc = auc_of(
        test_idx
            .iter()
            .map(|&i| {
                let feats: Vec<Vec<f64>> =
                    members.iter().map(|m| m.features_for(ds.image(i)).unwrap()).collect();
                feat_learner.predict(&feats).unwrap()[1]
            })
            .collect(),
    );
    assert!(feat_auc >= 0.9, "feature learner AUC {feat_auc} below 0.9");

    // Fusion training must leave the member models untouched.
    let after: Vec<u64> = members.iter().map(|m| m.param_digest()).collect();
    assert_eq!(digests, after);

    // Single-class fusion data is rejected.
    let only_morphs: Vec<usize> = val_idx.iter().copied().filter(|&i| ds.label(i) == 1).collect();
    let mut l = ScoreLearner::new(ids, 73).unwrap();
    assert!(matches!(
        train_score_super_learner(&mut l, &members, &ds, &only_morphs, &cfg),
        Err(CoreError::SingleClass(_))
    ));
}

#[test]
fn ensemble_single_member_soft_vote_is_identity() {
    let vit = Model::ViT(ViT::init(tiny_vit_config(), 31).unwrap());
    let image: Vec<f64> = {
        let mut r = test_rng("single-member");
        (0..3 * 8 * 8).map(|_| rng::unit(&mut r)).collect()
    };
    let expect_probs = vit.probs_for(&image).unwrap();
    let expect_logits = vit.logits_for(&image).unwrap();
    let ens = Ensemble::new(
        vec![Member { id: "solo".to_string(), model: vit }],
        FusionStrategy::SoftVote,
    )
    .unwrap();
    let out = ens.forward(&image).unwrap();
    assert_eq!(out.probs[0], expect_probs[0]);
    assert_eq!(out.probs[1], expect_probs[1]);
    assert_eq!(out.scores.len(), 1);
    assert_eq!(out.scores[0].model_id, "solo");
    assert_eq!(out.scores[0].logits, [expect_logits[0], expect_logits[1]]);
}

fn three_member_list() -> Vec<Member> {
    vec![
        Member { id: "vit-a".to_string(), model: Model::ViT(ViT::init(tiny_vit_config(), 41).unwrap()) },
        Member { id: "vit-b".to_string(), model: Model::ViT(ViT::init(tiny_vit_config(), 42).unwrap()) },
        Member {
            id: "cnn".to_string(),
            model: Model::NoiseAware(NoiseAware::init(small_noise_aware_config(), 43).unwrap()),
        },
    ]
}

#[test]
fn ensemble_forward_reports_distribution_and_member_scores() {
    let image: Vec<f64> = {
        let mut r = test_rng("trio");
        (0..3 * 8 * 8).map(|_| rng::unit(&mut r)).collect()
    };
    let ids = vec!["vit-a".to_string(), "vit-b".to_string(), "cnn".to_string()];

    let soft = Ensemble::new(three_member_list(), FusionStrategy::SoftVote).unwrap();
    let out = soft.forward(&image).unwrap();
    assert!((out.probs[0] + out.probs[1] - 1.0).abs() < 1e-9);
    let got_ids: Vec<&str> = out.scores.iter().map(|s| s.model_id.as_str()).collect();
    assert_eq!(got_ids, ["vit-a", "vit-b", "cnn"]);
    for s in &out.scores {
        assert!((s.probs[0] + s.probs[1] - 1.0).abs() < 1e-9);
    }
    assert_eq!(out.probs, soft_vote(&out.scores).unwrap());

    let max = Ensemble::new(three_member_list(), FusionStrategy::MaxVote).unwrap();
    let out = max.forward(&image).unwrap();
    let class = max_vote(&out.scores).unwrap();
    assert_eq!(out.probs, if class == 1 { [0.0, 1.0] } else { [1.0, 0.0] });

    let feat = Ensemble::new(
        three_member_list(),
        FusionStrategy::Feature(
            FeatureLearner::new(ids.clone(), vec![8, 8, 4], 8, 0.2, 44).unwrap(),
        ),
    )
    .unwrap();
    let out = feat.forward(&image).unwrap();
    assert!((out.probs[0] + out.probs[1] - 1.0).abs() < 1e-9);

    let score = Ensemble::new(
        three_member_list(),
        FusionStrategy::Score(ScoreLearner::averaging(ids).unwrap()),
    )
    .unwrap();
    let out = score.forward(&image).unwrap();
    assert_eq!(out.probs, soft_vote(&out.scores).unwrap());
}

#[test]
fn ensemble_rejects_inconsistent_members() {
    assert!(Ensemble::new(vec![], FusionStrategy::SoftVote).is_err());

    let mut dup = three_member_list();
    dup[1].id = "vit-a".to_string();
    assert!(Ensemble::new(dup, FusionStrategy::SoftVote).is_err());

    let mut big = tiny_vit_config();
    big.image_size = 16;
    let mixed = vec![
        Member { id: "a".to_string(), model: Model::ViT(ViT::init(tiny_vit_config(), 1).unwrap()) },
        Member { id: "b".to_string(), model: Model::ViT(ViT::init(big, 2).unwrap()) },
    ];
    assert!(Ensemble::new(mixed, FusionStrategy::SoftVote).is_err());

    // Learner wired for different member names.
    let learner = ScoreLearner::new(vec!["x".to_string(), "y".to_string(), "z".to_string()], 3)
        .unwrap();
    assert!(Ensemble::new(three_member_list(), FusionStrategy::Score(learner)).is_err());

    // Learner wired for the wrong feature widths.
    let ids = vec!["vit-a".to_string(), "vit-b".to_string(), "cnn".to_string()];
    let learner = FeatureLearner::new(ids, vec![8, 8, 16], 8, 0.2, 4).unwrap();
    assert!(Ensemble::new(three_member_list(), FusionStrategy::Feature(learner)).is_err());
}

#[test]
fn fused_graph_rejects_max_vote() {
    let ens = Ensemble::new(three_member_list(), FusionStrategy::MaxVote).unwrap();
    let mut g = Graph::new();
    let x = g.leaf_from(&[3, 8, 8], vec![0.5; 3 * 8 * 8], true).unwrap();
    assert!(matches!(ens.fused_graph(&mut g, x), Err(CoreError::Contract { .. })));
}

#[test]
fn fused_graph_gradients_match_finite_differences() {
    let two_members = || {
        vec![
            Member {
                id: "vit".to_string(),
                model: Model::ViT(ViT::init(tiny_vit_config(), 51).unwrap()),
            },
            Member {
                id: "cnn".to_string(),
                model: Model::NoiseAware(NoiseAware::init(small_noise_aware_config(), 52).unwrap()),
            },
        ]
    };
    let ids = vec!["vit".to_string(), "cnn".to_string()];
    let mut score_learner = ScoreLearner::new(ids.clone(), 53).unwrap();
    {
        let mut r = test_rng("score-weights");
        for v in score_learner.weight.data_mut() {
            *v = rng::uniform(&mut r, -1.0, 1.0);
        }
    }
    let strategies = [
        FusionStrategy::SoftVote,
        FusionStrategy::Score(score_learner),
        FusionStrategy::Feature(FeatureLearner::new(ids, vec![8, 4], 6, 0.2, 54).unwrap()),
    ];

    let image: Vec<f64> = {
        let mut r = test_rng("fused-grad");
        (0..3 * 8 * 8).map(|_| 0.2 + 0.6 * rng::unit(&mut r)).collect()
    };
    let probes = [0usize, 17, 63, 100, 150, 191];

    for strategy in strategies {
        let tag = strategy.tag();
        let ens = Ensemble::new(two_members(), strategy).unwrap();

        let fused_morph = |img: &[f64]| -> f64 {
            let mut g = Graph::new();
            let x = g.constant(&[3, 8, 8], img.to_vec()).unwrap();
            let fused = ens.fused_graph(&mut g, x).unwrap();
            g.value(fused)[1]
        };

        let mut g = Graph::new();
        let x = g.leaf_from(&[3, 8, 8], image.clone(), true).unwrap();
        let fused = ens.fused_graph(&mut g, x).unwrap();
        let loss = g.take_index(fused, 1).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap().to_vec();

        let h = 1e-5;
        for &j in &probes {
            let mut up = image.clone();
            up[j] += h;
            let mut down = image.clone();
            down[j] -= h;
            let fd = (fused_morph(&up) - fused_morph(&down)) / (2.0 * h);
            let denom = fd.abs().max(grad[j].abs()).max(1e-8);
            assert!(
                (fd - grad[j]).abs() / denom < 1e-4,
                "strategy {tag}: grad mismatch at {j}: analytic {} vs fd {fd}",
                grad[j]
            );
        }
    }
}

#[test]
fn learner_checkpoints_round_trip_and_reject_malformed() {
    let dir = tempfile::tempdir().unwrap();
    let ids = vec!["vit".to_string(), "cnn".to_string()];

    let mut score = ScoreLearner::new(ids.clone(), 81).unwrap();
    {
        let mut r = test_rng("ckpt-score");
        for v in score.weight.data_mut() {
            *v = rng::gaussian(&mut r);
        }
    }
    let score_path = dir.path().join("score.mgf");
    score.save(&score_path).unwrap();
    let loaded = ScoreLearner::load(&score_path).unwrap();
    assert_eq!(loaded.model_ids, score.model_ids);
    assert_eq!(loaded.weight, score.weight);
    assert_eq!(loaded.bias, score.bias);
    let votes = [sv("vit", [0.3, -0.8]), sv("cnn", [1.1, 0.4])];
    assert_eq!(loaded.predict(&votes).unwrap(), score.predict(&votes).unwrap());

    let feat = FeatureLearner::new(ids, vec![8, 4], 6, 0.35, 82).unwrap();
    let feat_path = dir.path().join("feature.mgf");
    feat.save(&feat_path).unwrap();
    let loaded = FeatureLearner::load(&feat_path).unwrap();
    assert_eq!(loaded.model_ids, feat.model_ids);
    assert_eq!(loaded.feature_dims, feat.feature_dims);
    assert_eq!(loaded.dropout_p, feat.dropout_p);
    assert_eq!(loaded.w1, feat.w1);
    assert_eq!(loaded.b1, feat.b1);
    assert_eq!(loaded.w2, feat.w2);
    assert_eq!(loaded.b2, feat.b2);

    // Kind mismatch: a score checkpoint is not a feature checkpoint.
    assert!(FeatureLearner::load(&score_path).is_err());
    assert!(ScoreLearner::load(&feat_path).is_err());

    // Corrupted magic.
    let mut bytes = std::fs::read(&score_path).unwrap();
    bytes[0] = b'X';
    let bad = dir.path().join("bad.mgf");
    std::fs::write(&bad, &bytes).unwrap();
    assert!(matches!(ScoreLearner::load(&bad), Err(CoreError::Format(_))));

    // Truncation.
    let cut = dir.path().join("cut.mgf");
    let keep = std::fs::read(&score_path).unwrap();
    std::fs::write(&cut, &keep[..keep.len() - 7]).unwrap();
    assert!(ScoreLearner::load(&cut).is_err());
}
