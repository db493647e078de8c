use proptest::prelude::*;

use super::*;
use crate::evaluation::{rank_eval, EvalOptions};
use crate::events::DatasetSplit;
use crate::model::Checkpoint;
use crate::events::chronological_split;
use crate::model::{load_checkpoint, save_checkpoint, ProfileMode};
use crate::synthetic::{generate_synthetic, SyntheticSpec};
use crate::tokenizer::{build_vocab_from_users, Vocab};

fn corpus(users: usize, seed: u64) -> (DatasetSplit, Vocab) {
    let spec = SyntheticSpec {
        num_users: users,
        min_events: 12,
        max_events: 20,
        seed,
        ..SyntheticSpec::default()
    };
    let records = generate_synthetic(&spec).unwrap();
    let vocab = build_vocab_from_users(&records, &spec.event_schema(), 400).unwrap();
    (chronological_split(records, [0.7, 0.15, 0.15]).unwrap(), vocab)
}

fn small_model(vocab: &Vocab, seed: u64) -> Model {
    let spec = SyntheticSpec::default();
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        d_model: 16,
        layers: 1,
        heads: 2,
        prototypes: 8,
        max_len: 24,
        profile_schema: spec.profile_schema().attributes.clone(),
        profile_dim: 4,
        ..ModelConfig::default()
    };
    Model::new(cfg, seed).unwrap()
}

fn nll_of(logits: Tensor<f64>, targets: &[Option<usize>], mask: &RowMask) -> f64 {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(logits);
    let l = tape.nll_sum(x, targets, mask).unwrap();
    tape.value(l).item()
}

#[test]
fn uniform_prediction_costs_log_vocab() {
    let (split, vocab) = corpus(6, 1);
    let mut model = small_model(&vocab, 0);
    // A zero output table makes every logit zero.
    model.params.token_embedding = Tensor::zeros(model.params.token_embedding.shape());
    let mut cfg = model.config.clone();
    cfg.vocab_size = 102;
    model.params.token_embedding = Tensor::zeros(&[102, cfg.d_model]);
    let model = Model::from_params(cfg, model.params).unwrap();
    let batch: Vec<Example> = (0..3)
        .map(|u| Example {
            user_id: split.users[u].user_id.clone(),
            tokens: vec![5, 17, 40, 99],
            profile: vec![1, 2],
        })
        .collect();
    let loss = generative_loss(&model, &batch).unwrap();
    assert!((loss - 100f64.ln()).abs() < 1e-5, "{loss}");
}

#[test]
fn certain_targets_cost_nothing() {
    let mut logits = Tensor::<f64>::zeros(&[2, 5]);
    logits.data_mut()[3] = 200.0;
    logits.data_mut()[5 + 1] = 200.0;
    let loss = nll_of(logits, &[Some(3), Some(1)], &RowMask::None);
    assert!(loss.abs() < 1e-12);
}

#[test]
fn two_token_cross_entropy_by_hand() {
    let logits = Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 0.25]).unwrap();
    let loss = nll_of(logits, &[Some(0), Some(1)], &RowMask::None);
    let ce = |a: f64, b: f64| -(a.exp() / (a.exp() + b.exp())).ln();
    assert!((loss - (ce(0.5, -1.0) + ce(0.25, 2.0))).abs() < 1e-12);
}

#[test]
fn all_pad_batch_is_rejected() {
    let (_, vocab) = corpus(4, 1);
    let model = small_model(&vocab, 0);
    let batch = vec![Example {
        user_id: "u".into(),
        tokens: vec![0, 0, 0],
        profile: vec![0, 0],
    }];
    assert!(matches!(generative_loss(&model, &batch), Err(PantherError::Empty(_))));
}

fn cl_value(points: &[f64], dim: usize, mask: &[bool], tau: f64) -> Option<f64> {
    let mut tape = Tape::<f64>::new();
    let rows = points.len() / dim;
    let e = tape.param(Tensor::matrix(rows, dim, points.to_vec()).unwrap());
    contrastive_loss(&mut tape, e, mask, tau).unwrap().map(|l| tape.value(l).item())
}

fn pair_only(b: usize, i: usize, j: usize) -> Vec<bool> {
    let mut m = vec![false; b * b];
    m[i * b + j] = true;
    m
}

#[test]
fn contrastive_closed_forms() {
    let mutual = [false, true, true, false];
    assert!(cl_value(&[0.0, 0.0, 3.0, 4.0], 2, &mutual, 0.1).unwrap().abs() < 1e-12);

    // j and k equidistant from i
    let sym = cl_value(&[0.0, 0.0, 1.0, 0.0, 0.0, 1.0], 2, &pair_only(3, 0, 1), 0.7).unwrap();
    assert!((sym - 2f64.ln()).abs() < 1e-6);

    let hand = cl_value(&[0.0, 1.0, -2.0], 1, &pair_only(3, 0, 1), 1.0).unwrap();
    let want = -((-1f64).exp() / ((-1f64).exp() + (-2f64).exp())).ln();
    assert!((hand - want).abs() < 1e-12);
    assert!((hand - 0.3133).abs() < 1e-4);

    assert_eq!(cl_value(&[0.0, 1.0, 2.0], 1, &[false; 9], 1.0), None);
}

#[test]
fn non_positive_temperature_is_an_error() {
    let mut tape = Tape::<f64>::new();
    let e = tape.param(Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap());
    for tau in [0.0, -1.0, f64::NAN] {
        assert!(contrastive_loss(&mut tape, e, &[false, true, true, false], tau).is_err());
    }
    assert!(LossWeights { lambda: 0.5, temperature: 0.0 }.validate().is_err());
    assert!(LossWeights { lambda: 1.5, temperature: 0.1 }.validate().is_err());
}

#[test]
fn default_policy_matches_region_and_close_ages() {
    let spec = SyntheticSpec::default();
    let schema = spec.profile_schema().attributes.clone();
    let region = schema.iter().position(|a| a.name == "region").unwrap();
    let mut profiles = vec![vec![0; schema.len()]; 4];
    let set = |p: &mut Vec<usize>, r: usize, a: usize| {
        p[region] = r;
        p[1 - region] = a;
    };
    set(&mut profiles[0], 1, 3);
    set(&mut profiles[1], 1, 4);
    set(&mut profiles[2], 1, 6);
    set(&mut profiles[3], 0, 3);
    let m = PositivePairPolicy::default().pair_mask(&schema, &profiles).unwrap();
    assert!(m[1] && m[4]);
    assert!(!m[2] && !m[3], "age gap 3 or unknown region");
    assert!(!m[0] && !m[5]);
    let bad = PositivePairPolicy {
        rules: vec![PairRule::Exact { attribute: "nope".into() }],
    };
    assert!(bad.pair_mask(&schema, &profiles).is_err());
}

#[test]
fn zero_lambda_step_equals_generative_step() {
    let (split, vocab) = corpus(10, 2);
    let model = small_model(&vocab, 1);
    let batch = build_examples(&split, &vocab, &model).unwrap();
    let cfg = TrainConfig::default();

    let mut a = model.clone();
    let mut opt_a = Adam::new(&a.params, &cfg);
    let weights = LossWeights { lambda: 0.0, temperature: 0.1 };
    let report = combined_step(&mut a, &mut opt_a, &batch, &weights, &cfg, &PositivePairPolicy::default()).unwrap();
    assert_eq!(report.contrastive, None);

    let mut b = model.clone();
    let mut opt_b = Adam::new(&b.params, &cfg);
    let (_, grads) = generative_gradients(&b.params, &b.config, &batch, cfg.shards).unwrap();
    apply_gradients(&mut b, &mut opt_b, grads, cfg.clip_norm);
    for (x, y) in a.params.slots().iter().zip(b.params.slots()) {
        assert_eq!(x.data(), y.data());
    }
}

#[test]
fn pure_contrastive_gradient_only_reaches_profile_encoder() {
    let (split, vocab) = corpus(30, 3);
    let model = small_model(&vocab, 1);
    let batch = build_examples(&split, &vocab, &model).unwrap();
    let (_, _, grads) = contrastive_gradients(&model.params, &model.config, &batch, &PositivePairPolicy::default(), 0.1)
        .unwrap()
        .expect("30 users share at least one region and age band");
    let mut profile_norm = 0.0;
    grads.profile.visit(&mut |t| profile_norm += t.squared_norm());
    assert!(profile_norm > 0.0);
    assert_eq!(grads.token_embedding.squared_norm(), 0.0);
    let mut rest = 0.0;
    for b in &grads.blocks {
        b.visit(&mut |t| rest += t.squared_norm());
    }
    assert_eq!(rest, 0.0);
}

#[test]
fn short_run_lowers_training_loss() {
    let (split, vocab) = corpus(10, 4);
    let mut model = small_model(&vocab, 5);
    let batch = build_examples(&split, &vocab, &model).unwrap();
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        ..TrainConfig::default()
    };
    let mut opt = Adam::new(&model.params, &cfg);
    let weights = LossWeights::default();
    let policy = PositivePairPolicy::default();
    let mut losses = vec![generative_loss(&model, &batch).unwrap()];
    for _ in 0..3 {
        combined_step(&mut model, &mut opt, &batch, &weights, &cfg, &policy).unwrap();
        losses.push(generative_loss(&model, &batch).unwrap());
    }
    assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
}

#[test]
fn non_finite_loss_reports_the_batch() {
    let (split, vocab) = corpus(6, 4);
    let mut model = small_model(&vocab, 5);
    model.params.final_gain.data_mut()[0] = f32::NAN;
    let batch = build_examples(&split, &vocab, &model).unwrap();
    let cfg = TrainConfig::default();
    let mut opt = Adam::new(&model.params, &cfg);
    let err = combined_step(&mut model, &mut opt, &batch, &LossWeights::default(), &cfg, &PositivePairPolicy::default())
        .unwrap_err();
    match err {
        PantherError::NonFinite(msg) => assert!(msg.contains(&batch[0].user_id), "{msg}"),
        e => panic!("{e}"),
    }
}

#[test]
fn one_epoch_checkpoint_round_trips() {
    let (split, vocab) = corpus(20, 6);
    let model = small_model(&vocab, 2);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let mut log = Vec::new();
    let out = train(model, &split, &vocab, &cfg, &LossWeights::default(), &PositivePairPolicy::default(), Some(&mut log)).unwrap();
    let lines: Vec<EpochLog> = std::str::from_utf8(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    for (a, b) in lines.iter().zip(&out.log) {
        assert_eq!(a.epoch, b.epoch);
        assert!((a.val_hr_10.unwrap() - b.val_hr_10.unwrap()).abs() < 1e-12);
    }
    assert!(lines[1].generative_loss.unwrap().is_finite() && lines[1].val_hr_1.is_some());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &out.model, &vocab.hash()).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let tokens = vocab.encode(&split.users[0]).unwrap().ids;
    let p = out.model.forward(&tokens[..8], &split.users[0].profile).unwrap();
    let q = back.model.forward(&tokens[..8], &split.users[0].profile).unwrap();
    assert_eq!(p.probs.data(), q.probs.data());
}

#[test]
fn fine_tune_without_epochs_is_a_no_op() {
    let (split, vocab) = corpus(20, 7);
    let model = small_model(&vocab, 3);
    let ck = Checkpoint {
        model: model.clone(),
        vocab_hash: vocab.hash(),
    };
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let (w, p) = (LossWeights::default(), PositivePairPolicy::default());
    let out = fine_tune(&ck, &split, &vocab, &cfg, &w, &p, false, None).unwrap();
    let before = rank_eval(&model, &split, &vocab, EvalOptions::test()).unwrap();
    let after = rank_eval(&out.model, &split, &vocab, EvalOptions::test()).unwrap();
    assert_eq!(before, after);
}

#[test]
fn fine_tune_checks_the_vocabulary() {
    let (split, vocab) = corpus(20, 7);
    let (_, other) = corpus(20, 8);
    let model = small_model(&other, 3);
    let ck = Checkpoint {
        model,
        vocab_hash: other.hash(),
    };
    assert_ne!(vocab.hash(), other.hash());
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let (w, p) = (LossWeights::default(), PositivePairPolicy::default());
    assert!(matches!(
        fine_tune(&ck, &split, &vocab, &cfg, &w, &p, false, None),
        Err(PantherError::VocabMismatch { .. })
    ));
    let out = fine_tune(&ck, &split, &vocab, &cfg, &w, &p, true, None).unwrap();
    assert_eq!(out.model.config.vocab_size, vocab.len());
    assert_eq!(out.model.params.profile.fuse.data(), ck.model.params.profile.fuse.data());
    assert_eq!(out.model.params.blocks[0].w_q.data(), ck.model.params.blocks[0].w_q.data());
}

#[test]
fn lambda_sweep_reports_every_value() {
    let (split, vocab) = corpus(12, 9);
    let model = small_model(&vocab, 4);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 6,
        ..TrainConfig::default()
    };
    let rows = lambda_sweep(&model, &split, &vocab, &cfg, &[0.0, 0.1, 0.5, 1.0], 0.1, &PositivePairPolicy::default()).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.test.positions > 0 && (0.0..=1.0).contains(&r.test.hr_10)));
}

#[test]
fn generative_loss_ignores_batch_order() {
    let (split, vocab) = corpus(16, 10);
    let model = small_model(&vocab, 6);
    let batch = build_examples(&split, &vocab, &model).unwrap();
    let mut rev = batch.clone();
    rev.reverse();
    let (a, ga) = generative_gradients(&model.params, &model.config, &batch, 3).unwrap();
    let (b, gb) = generative_gradients(&model.params, &model.config, &rev, 2).unwrap();
    assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0));
    for (x, y) in ga.slots().iter().zip(gb.slots()) {
        for (p, q) in x.data().iter().zip(y.data()) {
            assert!((p - q).abs() <= 1e-5, "{p} vs {q}");
        }
    }
}

fn random_profiles(n: usize) -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(prop::collection::vec(0usize..5, 2), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pair_mask_is_symmetric(profiles in random_profiles(7)) {
        let schema = vec![
            AttributeDef::new("region", &["a", "b", "c", "d"]),
            AttributeDef::new("age_bucket", &["1", "2", "3", "4"]),
        ];
        let m = PositivePairPolicy::default().pair_mask(&schema, &profiles).unwrap();
        for i in 0..7 {
            prop_assert!(!m[i * 8]);
            for j in 0..7 {
                prop_assert_eq!(m[i * 7 + j], m[j * 7 + i]);
            }
        }
    }

    #[test]
    fn contrastive_loss_ignores_batch_order(
        pts in prop::collection::vec(-2.0f64..2.0, 12),
        mask_bits in prop::collection::vec(any::<bool>(), 36),
        perm_seed in any::<u64>(),
    ) {
        use rand::{seq::SliceRandom, SeedableRng};
        let b = 6;
        let mut mask = mask_bits.clone();
        for i in 0..b {
            mask[i * b + i] = false;
            for j in 0..i {
                mask[i * b + j] = mask[j * b + i];
            }
        }
        let mut perm: Vec<usize> = (0..b).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
        let moved: Vec<f64> = perm.iter().flat_map(|&i| pts[i * 2..i * 2 + 2].to_vec()).collect();
        let moved_mask: Vec<bool> = (0..b * b).map(|k| mask[perm[k / b] * b + perm[k % b]]).collect();
        let a = cl_value(&pts, 2, &mask, 0.5);
        let c = cl_value(&moved, 2, &moved_mask, 0.5);
        match (a, c) {
            (Some(a), Some(c)) => prop_assert!((a - c).abs() <= 1e-5),
            (a, c) => prop_assert_eq!(a, c),
        }
    }

    #[test]
    fn contrastive_step_pulls_positives_together(
        pts in prop::collection::vec(-1.0f64..1.0, 9),
        tau in 0.2f64..2.0,
    ) {
        let dist = |p: &[f64], a: usize, b: usize| {
            (0..3).map(|k| (p[a * 3 + k] - p[b * 3 + k]).powi(2)).sum::<f64>().sqrt()
        };
        prop_assume!(dist(&pts, 0, 1) > 1e-3 && dist(&pts, 0, 2) > 1e-3 && dist(&pts, 1, 2) > 1e-3);
        let mut mask = pair_only(3, 0, 1);
        mask[3] = true;
        let mut tape = Tape::<f64>::new();
        let e = tape.param(Tensor::matrix(3, 3, pts.clone()).unwrap());
        let loss = contrastive_loss(&mut tape, e, &mask, tau).unwrap().unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(e).unwrap();
        let step = 1e-4;
        let moved: Vec<f64> = pts.iter().zip(g).map(|(p, g)| p - step * g).collect();
        prop_assert!(dist(&moved, 0, 1) < dist(&pts, 0, 1));
    }
}

#[test]
fn positional_and_first_token_models_both_train() {
    let (split, vocab) = corpus(8, 11);
    for mode in [ProfileMode::FirstToken, ProfileMode::None] {
        let mut model = small_model(&vocab, 1);
        model.config.profile_mode = mode;
        let batch = build_examples(&split, &vocab, &model).unwrap();
        let cfg = TrainConfig::default();
        let mut opt = Adam::new(&model.params, &cfg);
        let r = combined_step(&mut model, &mut opt, &batch, &LossWeights::default(), &cfg, &PositivePairPolicy::default()).unwrap();
        assert!(r.loss.is_finite());
    }
}
