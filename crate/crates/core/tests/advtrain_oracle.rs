//! Frozen behavior of adversarial training: pool sampling and crafting,
//! the all-clean reduction to plain training, scope gating, per-epoch
//! probes, and the failure modes.

use morphguard_core::advtrain::{
    adv_train, craft_batch, AdvTrainConfig, TrainScope, DEFAULT_EPS_LEVELS,
};
use morphguard_core::attacks::{run_attack, AttackSpec, Method, WhiteBox};
use morphguard_core::data::{gen_dataset, Dataset, DatasetConfig, MorphParams, Split};
use morphguard_core::fusion::{Ensemble, FeatureLearner, FusionStrategy, Member, ScoreLearner};
use morphguard_core::models::{train_model, Model, NoiseAware, NoiseAwareConfig, TrainConfig};
use morphguard_core::rng;
use rand_core::RngCore;

fn tiny_cnn(seed: u64) -> Model {
    let cfg = NoiseAwareConfig {
        image_size: 8,
        channels: 3,
        width: 3,
        dilations: vec![1],
        leaky_slope: 0.1,
        classifier_width: 4,
        num_classes: 2,
    };
    Model::NoiseAware(NoiseAware::init(cfg, seed).unwrap())
}

fn toy_data(seed: u64) -> Dataset {
    gen_dataset(&DatasetConfig {
        seed,
        n_identities: 8,
        bonafide_per_id: 2,
        n_morphs: 8,
        size: 8,
        noise_level: 0.02,
        morph: MorphParams::default(),
        train_frac: 0.5,
        val_frac: 0.25,
    })
    .unwrap()
}

fn single_member(seed: u64) -> Ensemble {
    let members = vec![Member { id: "cnn".into(), model: tiny_cnn(seed) }];
    Ensemble::new(members, FusionStrategy::SoftVote).unwrap()
}

/// Two untrained members fused by a fresh score learner; returns the
/// learner's initial weight values alongside.
fn score_pair(seed: u64) -> (Ensemble, Vec<f64>) {
    let learner = ScoreLearner::new(vec!["a".into(), "b".into()], 77).unwrap();
    let w0 = learner.weight.data().to_vec();
    let members = vec![
        Member { id: "a".into(), model: tiny_cnn(seed) },
        Member { id: "b".into(), model: tiny_cnn(seed + 50) },
    ];
    (Ensemble::new(members, FusionStrategy::Score(learner)).unwrap(), w0)
}

fn learner_weight(ens: &Ensemble) -> Vec<f64> {
    match ens.strategy() {
        FusionStrategy::Score(l) => l.weight.data().to_vec(),
        FusionStrategy::Feature(l) => l.w1.data().to_vec(),
        _ => panic!("ensemble has no learner"),
    }
}

fn member_digests(ens: &Ensemble) -> Vec<u64> {
    ens.members().iter().map(|m| m.model.param_digest()).collect()
}

/// One-epoch config with a cheap probe, batch 4, no augmentation.
fn fast_cfg(pool: Vec<AttackSpec>) -> AdvTrainConfig {
    let mut cfg = AdvTrainConfig::new(pool);
    cfg.train = TrainConfig {
        epochs: 1,
        batch_size: 4,
        lr: 5e-3,
        augment: false,
        ..TrainConfig::default()
    };
    cfg.probe.num_steps = 2;
    cfg
}

fn take_batch(ds: &Dataset, idx: &[usize], n: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let images = idx.iter().take(n).map(|&i| ds.image(i).to_vec()).collect();
    let labels = idx.iter().take(n).map(|&i| ds.label(i) as usize).collect();
    (images, labels)
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

#[test]
fn config_defaults_follow_the_documented_conventions() {
    let cfg = AdvTrainConfig::new(vec![AttackSpec::new(Method::Pgd, 2.0 / 255.0)]);
    assert_eq!(cfg.eps_levels, DEFAULT_EPS_LEVELS.to_vec());
    assert_eq!(cfg.eps_levels, vec![2.0 / 255.0, 4.0 / 255.0]);
    assert_eq!(cfg.clean_ratio, 0.5);
    assert_eq!(cfg.scope, TrainScope::Both);
    assert_eq!(cfg.probe.method, Method::Pgd);
    assert_eq!(cfg.probe.epsilon, 2.0 / 255.0);
    cfg.validate(1).unwrap();
    cfg.validate(3).unwrap();
}

#[test]
fn config_validation_rejects_bad_fields() {
    let base = || AdvTrainConfig::new(vec![AttackSpec::new(Method::Fgsm, 2.0 / 255.0)]);
    let cases: Vec<(&str, Box<dyn Fn(&mut AdvTrainConfig)>)> = vec![
        ("empty pool", Box::new(|c| c.pool.clear())),
        ("zero ratio", Box::new(|c| c.clean_ratio = 0.0)),
        ("ratio above one", Box::new(|c| c.clean_ratio = 1.5)),
        ("nan ratio", Box::new(|c| c.clean_ratio = f64::NAN)),
        ("no levels", Box::new(|c| c.eps_levels.clear())),
        ("zero level", Box::new(|c| c.eps_levels = vec![0.0])),
        ("negative level", Box::new(|c| c.eps_levels = vec![-0.1])),
        ("zero-budget template", Box::new(|c| c.pool[0].epsilon = 0.0)),
        ("even probe kernel", Box::new(|c| c.probe.kernel_size = 2)),
        (
            "template weights off count",
            Box::new(|c| c.pool[0].weights = vec![0.5, 0.5]),
        ),
    ];
    for (what, mutate) in cases {
        let mut cfg = base();
        mutate(&mut cfg);
        assert!(cfg.validate(1).is_err(), "validation accepted: {what}");
    }
}

#[test]
fn scope_tags_use_kebab_case() {
    assert_eq!(serde_json::to_string(&TrainScope::Members).unwrap(), "\"members\"");
    assert_eq!(serde_json::to_string(&TrainScope::Fusion).unwrap(), "\"fusion\"");
    assert_eq!(serde_json::to_string(&TrainScope::Both).unwrap(), "\"both\"");
    let parsed: TrainScope = serde_json::from_str("\"both\"").unwrap();
    assert_eq!(parsed, TrainScope::Both);
}

#[test]
fn single_entry_pool_crafts_every_example_with_that_attack() {
    let ds = toy_data(3);
    let model = tiny_cnn(11);
    let mut cfg = fast_cfg(vec![AttackSpec::new(Method::Fgsm, 4.0 / 255.0)]);
    cfg.eps_levels = vec![2.0 / 255.0];
    let tr = ds.split_indices(Split::Train);
    let (images, labels) = take_batch(&ds, &tr, 4);

    let mut r = rng::stream(9, "craft", 0);
    let out = craft_batch(&[&model], &images, &labels, &cfg, &mut r).unwrap();
    assert_eq!(out.len(), images.len());

    // Replay the sampling stream: one pair index and one seed per example,
    // drawn in example order before any attack runs.
    let mut replay = rng::stream(9, "craft", 0);
    let level = 2.0 / 255.0;
    for (i, img) in images.iter().enumerate() {
        assert_eq!(rng::index(&mut replay, 1), 0);
        let seed = replay.next_u64();
        let mut spec = AttackSpec::new(Method::Fgsm, 4.0 / 255.0);
        spec.step_size *= level / spec.epsilon;
        spec.epsilon = level;
        spec.seed = seed;
        let direct = run_attack(&[&model as &dyn WhiteBox], img, labels[i], &spec).unwrap();
        assert_eq!(out[i], direct.result.adversarial, "example {i} is not plain fgsm");
        assert!(linf(&out[i], img) <= level + 1e-9);
        assert!(out[i].iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn pool_and_level_sampling_replays_exactly() {
    let ds = toy_data(4);
    let model = tiny_cnn(12);
    let fgsm_t = AttackSpec::new(Method::Fgsm, 4.0 / 255.0);
    let mut pgd_t = AttackSpec::new(Method::Pgd, 4.0 / 255.0);
    pgd_t.num_steps = 3;
    pgd_t.step_size = pgd_t.epsilon / 3.0;
    let mut cfg = fast_cfg(vec![fgsm_t.clone(), pgd_t.clone()]);
    cfg.eps_levels = vec![2.0 / 255.0, 4.0 / 255.0];
    let tr = ds.split_indices(Split::Train);
    let (images, labels) = take_batch(&ds, &tr, 6);

    let mut r = rng::stream(21, "craft", 1);
    let out = craft_batch(&[&model], &images, &labels, &cfg, &mut r).unwrap();

    let templates = [fgsm_t, pgd_t];
    let mut replay = rng::stream(21, "craft", 1);
    for (i, img) in images.iter().enumerate() {
        let pair = rng::index(&mut replay, 4);
        let seed = replay.next_u64();
        let (t, l) = (pair / 2, pair % 2);
        let level = cfg.eps_levels[l];
        let mut spec = templates[t].clone();
        spec.step_size *= level / spec.epsilon;
        spec.epsilon = level;
        spec.seed = seed;
        let direct = run_attack(&[&model as &dyn WhiteBox], img, labels[i], &spec).unwrap();
        assert_eq!(out[i], direct.result.adversarial, "example {i} mismatches pair {pair}");
        assert!(linf(&out[i], img) <= level + 1e-9, "example {i} left its {level} ball");
    }
}

#[test]
fn crafting_is_deterministic_for_a_fixed_stream() {
    let ds = toy_data(5);
    let model = tiny_cnn(13);
    let cfg = fast_cfg(vec![AttackSpec::new(Method::Fgsm, 2.0 / 255.0)]);
    let tr = ds.split_indices(Split::Train);
    let (images, labels) = take_batch(&ds, &tr, 5);

    let mut r1 = rng::stream(30, "craft", 2);
    let mut r2 = rng::stream(30, "craft", 2);
    let a = craft_batch(&[&model], &images, &labels, &cfg, &mut r1).unwrap();
    let b = craft_batch(&[&model], &images, &labels, &cfg, &mut r2).unwrap();
    assert_eq!(a, b);
}

#[test]
fn multiple_models_switch_crafting_to_the_joint_objective() {
    let ds = toy_data(6);
    let m1 = tiny_cnn(21);
    let m2 = tiny_cnn(22);
    let mut template = AttackSpec::new(Method::Pgd, 4.0 / 255.0);
    template.num_steps = 4;
    template.step_size = template.epsilon / 4.0;
    let mut cfg = fast_cfg(vec![template.clone()]);
    cfg.eps_levels = vec![2.0 / 255.0];
    let tr = ds.split_indices(Split::Train);
    let (images, labels) = take_batch(&ds, &tr, 3);

    let mut r = rng::stream(40, "craft", 3);
    let out = craft_batch(&[&m1, &m2], &images, &labels, &cfg, &mut r).unwrap();

    let mut replay = rng::stream(40, "craft", 3);
    let level = 2.0 / 255.0;
    for (i, img) in images.iter().enumerate() {
        assert_eq!(rng::index(&mut replay, 1), 0);
        let seed = replay.next_u64();
        let mut spec = AttackSpec::new(Method::Ensemble, level);
        spec.num_steps = 4;
        spec.step_size = level / 4.0;
        spec.lambda = template.lambda;
        spec.seed = seed;
        let direct = run_attack(
            &[&m1 as &dyn WhiteBox, &m2 as &dyn WhiteBox],
            img,
            labels[i],
            &spec,
        )
        .unwrap();
        assert_eq!(out[i], direct.result.adversarial, "example {i} is not the joint attack");
    }
}

#[test]
fn unconstrained_attacks_are_projected_onto_the_sampled_ball() {
    let ds = toy_data(7);
    let model = tiny_cnn(23);
    let mut template = AttackSpec::new(Method::CwL2, 1.0);
    template.cw_steps = 12;
    template.cw_lr = 0.05;
    let mut cfg = fast_cfg(vec![template.clone()]);
    let level = 0.05;
    cfg.eps_levels = vec![level];
    let tr = ds.split_indices(Split::Train);
    let (images, labels) = take_batch(&ds, &tr, 2);

    let mut r = rng::stream(55, "craft", 4);
    let out = craft_batch(&[&model], &images, &labels, &cfg, &mut r).unwrap();

    let mut replay = rng::stream(55, "craft", 4);
    for (i, img) in images.iter().enumerate() {
        assert_eq!(rng::index(&mut replay, 1), 0);
        let seed = replay.next_u64();
        let mut spec = template.clone();
        spec.step_size *= level / spec.epsilon;
        spec.epsilon = level;
        spec.seed = seed;
        let direct = run_attack(&[&model as &dyn WhiteBox], img, labels[i], &spec).unwrap();

        // The crafted point is the raw attack output pulled back onto the
        // l2 ball: clamp, radially rescale an oversized offset, re-clamp.
        let mut expect = direct.result.adversarial.clone();
        for v in expect.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        let dn = expect.iter().zip(img).map(|(&a, &b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if dn > level {
            let s = level / dn;
            for (v, &xv) in expect.iter_mut().zip(img.iter()) {
                *v = (xv + (*v - xv) * s).clamp(0.0, 1.0);
            }
        }
        assert_eq!(out[i], expect, "example {i} is not the projected attack output");
        let d2 = out[i].iter().zip(img).map(|(&a, &b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!(d2 <= level + 1e-9, "example {i} has l2 distance {d2}");
    }
}

#[test]
fn all_clean_ratio_reproduces_plain_training_bit_for_bit() {
    let ds = toy_data(8);
    let tr = ds.split_indices(Split::Train);
    let va = ds.split_indices(Split::Val);
    let tcfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        lr: 5e-3,
        augment: true,
        seed: 13,
        ..TrainConfig::default()
    };

    let mut plain = tiny_cnn(7);
    let plain_trace = train_model(&mut plain, &ds, &tr, &tcfg).unwrap();

    let mut ens = single_member(7);
    let mut cfg = AdvTrainConfig::new(vec![AttackSpec::new(Method::Fgsm, 2.0 / 255.0)]);
    cfg.train = tcfg;
    cfg.clean_ratio = 1.0;
    cfg.probe.num_steps = 2;
    let trace = adv_train(&mut ens, &ds, &tr, &va, &cfg).unwrap();

    assert_eq!(trace.len(), plain_trace.len());
    for (a, p) in trace.iter().zip(&plain_trace) {
        assert_eq!(
            a.mean_loss.to_bits(),
            p.mean_loss.to_bits(),
            "epoch {} loss diverged: {} vs {}",
            a.epoch,
            a.mean_loss,
            p.mean_loss
        );
    }
    assert_eq!(ens.members()[0].model.param_digest(), plain.param_digest());
}

#[test]
fn trace_rows_satisfy_the_probe_invariants() {
    let ds = toy_data(9);
    let tr = ds.split_indices(Split::Train);
    let va = ds.split_indices(Split::Val);
    let mut ens = single_member(17);
    let mut cfg = fast_cfg(vec![AttackSpec::new(Method::Fgsm, 2.0 / 255.0)]);
    cfg.train.epochs = 2;
    let trace = adv_train(&mut ens, &ds, &tr, &va, &cfg).unwrap();

    assert_eq!(trace.len(), 2);
    for (i, row) in trace.iter().enumerate() {
        assert_eq!(row.epoch, i);
        assert!((0.0..=1.0).contains(&row.clean_acc), "clean {}", row.clean_acc);
        assert!((0.0..=1.0).contains(&row.robust_acc), "robust {}", row.robust_acc);
        assert!(
            row.robust_acc <= row.clean_acc,
            "epoch {i}: robust {} above clean {}",
            row.robust_acc,
            row.clean_acc
        );
        assert!(row.mean_loss.is_finite());
        assert!(row.wall_time >= 0.0);
    }
}

#[test]
fn adversarial_training_is_deterministic() {
    let ds = toy_data(10);
    let tr = ds.split_indices(Split::Train);
    let va = ds.split_indices(Split::Val);
    let mut cfg = fast_cfg(vec![AttackSpec::new(Method::Fgsm, 2.0 / 255.0)]);
    cfg.train.augment = true;

    let mut e1 = single_member(19);
    let mut e2 = single_member(19);
    let t1 = adv_train(&mut e1, &ds, &tr, &va, &cfg).unwrap();
    let t2 = adv_train(&mut e2, &ds, &tr, &va, &cfg).unwrap();

    assert_eq!(member_digests(&e1), member_digests(&e2));
    assert_eq!(t1.len(), t2.len());
    for (a, b) in t1.iter().zip(&t2) {
        assert_eq!(a.epoch, b.epoch);
        assert_eq!(a.clean_acc.to_bits(), b.clean_acc.to_bits());
        assert_eq!(a.robust_acc.to_bits(), b.robust_acc.to_bits());
        assert_eq!(a.mean_loss.to_bits(), b.mean_loss.to_bits());
    }
}

#[test]
fn the_attack_pool_shapes_the_learned_parameters() {
    let ds = toy_data(11);
    let tr = ds.split_indices(Split::Train);
    let va = ds.split_indices(Split::Val);

    let mut weak = single_member(29);
    let cfg_weak = fast_cfg(vec![AttackSpec::new(Method::Fgsm, 2.0 / 255.0)]);
    adv_train(&mut weak, &ds, &tr, &va, &cfg_weak).unwrap();

    let mut strong = single_member(29);
    let mut strong_pool = AttackSpec::new(Method::Pgd, 8.0 / 255.0);
    strong_pool.num_steps = 3;
    strong_pool.step_size = strong_pool.epsilon / 3.0;
    let cfg_strong = fast_cfg(vec![strong_pool]);
    adv_train(&mut strong, &ds, &tr, &va, &cfg_strong).unwrap();

    assert_ne!(member_digests(&weak), member_digests(&strong));
}

#[test]
fn fusion_scope_trains_only_the_learner() {
    let ds = toy_data(12);
    let tr = ds.split_indices(Split::Train);
    let va = ds.split_indices(Split::Val);
    let (mut ens, w0) = score_pair(31);
    let before = member_digests(&ens);

    let mut cfg = fast_cfg(vec![AttackSpec::new(Method::Fgsm, 2.0 / 255.0)]);
    cfg.clean_ratio = 1.0;
    cfg.scope = TrainScope::Fusion;
    adv_train(&mut ens, &ds, &tr, &va, &cfg).unwrap();

    assert_eq!(member_digests(&ens), before, "members moved under fusion scope");
    assert_ne!(learner_weight(&ens), w0, "learner never moved");
}

#[test]
fn members_scope_freezes_the_learner() {
    let ds = toy_data(12);
    let tr = ds.split_indices(Split::Train);
    let va = ds.split_indices(Split::Val);
    let (mut ens, w0) = score_pair(33);
    let before = member_digests(&ens);

    let mut cfg = fast_cfg(vec![AttackSpec::new(Method::Fgsm, 2.0 / 255.0)]);
    cfg.clean_ratio = 1.0;
    cfg.scope = TrainScope::Members;
    adv_train(&mut ens, &ds, &tr, &va, &cfg).unwrap();

    assert_ne!(member_digests(&ens), before, "members never moved");
    assert_eq!(learner_weight(&ens), w0, "learner moved under members scope");
}

#[test]
fn both_scope_trains_members_and_learner_together() {
    let ds = toy_data(12);
    let tr = ds.split_indices(Split::Train);
    let va = ds.split_indices(Split::Val);
    let (mut ens, w0) = score_pair(35);
    let before = member_digests(&ens);

    let mut cfg = fast_cfg(vec![AttackSpec::new(Method::Fgsm, 2.0 / 255.0)]);
    cfg.clean_ratio = 1.0;
    adv_train(&mut ens, &ds, &tr, &va, &cfg).unwrap();

    assert_ne!(member_digests(&ens), before);
    assert_ne!(learner_weight(&ens), w0);
}

#[test]
fn joint_feature_fusion_trains_end_to_end() {
    let ds = toy_data(13);
    let tr = ds.split_indices(Split::Train);
    let va = ds.split_indices(Split::Val);
    let learner =
        FeatureLearner::new(vec!["a".into(), "b".into()], vec![4, 4], 4, 0.1, 31).unwrap();
    let w0 = learner.w1.data().to_vec();
    let members = vec![
        Member { id: "a".into(), model: tiny_cnn(41) },
        Member { id: "b".into(), model: tiny_cnn(42) },
    ];
    let mut ens = Ensemble::new(members, FusionStrategy::Feature(learner)).unwrap();
    let before = member_digests(&ens);

    let cfg = fast_cfg(vec![AttackSpec::new(Method::Fgsm, 2.0 / 255.0)]);
    let trace = adv_train(&mut ens, &ds, &tr, &va, &cfg).unwrap();

    assert_eq!(trace.len(), 1);
    assert!(trace[0].mean_loss.is_finite());
    assert_ne!(member_digests(&ens), before);
    assert_ne!(learner_weight(&ens), w0);
}

#[test]
fn unusable_strategies_and_scopes_are_rejected() {
    let ds = toy_data(14);
    let tr = ds.split_indices(Split::Train);
    let va = ds.split_indices(Split::Val);
    let cfg = fast_cfg(vec![AttackSpec::new(Method::Fgsm, 2.0 / 255.0)]);

    let members = vec![Member { id: "cnn".into(), model: tiny_cnn(51) }];
    let mut ens = Ensemble::new(members, FusionStrategy::MaxVote).unwrap();
    assert!(adv_train(&mut ens, &ds, &tr, &va, &cfg).is_err(), "max voting accepted");

    let mut ens = single_member(52);
    let mut soft_fusion = cfg.clone();
    soft_fusion.scope = TrainScope::Fusion;
    assert!(
        adv_train(&mut ens, &ds, &tr, &va, &soft_fusion).is_err(),
        "fusion scope accepted without fusion parameters"
    );
}

#[test]
fn split_contracts_are_enforced() {
    let ds = toy_data(15);
    let tr = ds.split_indices(Split::Train);
    let va = ds.split_indices(Split::Val);
    let cfg = fast_cfg(vec![AttackSpec::new(Method::Fgsm, 2.0 / 255.0)]);

    let mut ens = single_member(61);
    assert!(adv_train(&mut ens, &ds, &[], &va, &cfg).is_err(), "empty train accepted");
    assert!(adv_train(&mut ens, &ds, &tr, &[], &cfg).is_err(), "empty val accepted");
    assert!(
        adv_train(&mut ens, &ds, &[0, ds.n()], &va, &cfg).is_err(),
        "out-of-range train index accepted"
    );
    assert!(
        adv_train(&mut ens, &ds, &tr, &[ds.n()], &cfg).is_err(),
        "out-of-range val index accepted"
    );

    let one_class: Vec<usize> = (0..ds.n()).filter(|&i| ds.label(i) == 0).take(4).collect();
    assert!(
        adv_train(&mut ens, &ds, &one_class, &va, &cfg).is_err(),
        "single-class training set accepted"
    );
}

#[test]
fn diverging_loss_aborts_with_diagnostics() {
    let ds = toy_data(16);
    let tr = ds.split_indices(Split::Train);
    let va = ds.split_indices(Split::Val);
    let mut ens = single_member(71);
    let mut cfg = fast_cfg(vec![AttackSpec::new(Method::Fgsm, 2.0 / 255.0)]);
    cfg.clean_ratio = 1.0;
    cfg.train.epochs = 3;
    cfg.train.lr = 1e150;

    let err = adv_train(&mut ens, &ds, &tr, &va, &cfg).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("lr"), "diagnostics missing the learning rate: {msg}");
    assert!(msg.contains("grad"), "diagnostics missing gradient norms: {msg}");
}
