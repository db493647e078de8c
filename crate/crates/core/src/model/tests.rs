use std::collections::BTreeMap;

use super::*;
use crate::tokenizer::AttributeDef;

fn tiny(mode: ProfileMode) -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        d_model: 8,
        layers: 2,
        heads: 2,
        prototypes: 5,
        conv_branches: vec![
            ConvBranch { width: 3, dilation: 1 },
            ConvBranch { width: 2, dilation: 3 },
        ],
        max_len: 24,
        profile_mode: mode,
        profile_schema: vec![
            AttributeDef::new("region", &["north", "south"]),
            AttributeDef::new("age_bucket", &["young", "old"]),
        ],
        profile_dim: 3,
        ..ModelConfig::default()
    }
}

fn profile() -> BTreeMap<String, String> {
    [("region", "south"), ("age_bucket", "young")]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn run_sprm(cfg: &ModelConfig, params: &SprmWeights<Tensor>, x: &Tensor) -> (Tensor, Vec<Tensor>) {
    let mut tape = Tape::<f32>::new();
    let w = params.map(&mut |t| tape.constant(t.clone()));
    let xv = tape.constant(x.clone());
    let out = sprm_forward(&mut tape, xv, &w, cfg).unwrap();
    (
        tape.value(out.output).clone(),
        out.attention.iter().map(|&a| tape.value(a).clone()).collect(),
    )
}

fn random_input(rows: usize, cols: usize, seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn single_prototype_collapses_to_its_value_projection() {
    let cfg = ModelConfig {
        prototypes: 1,
        ..tiny(ProfileMode::None)
    };
    let params = ModelParams::init(&cfg, 3);
    let sprm = &params.blocks[0].sprm;
    let (out, _) = run_sprm(&cfg, sprm, &random_input(6, 8, 1));
    let p = sprm.prototypes.row(0);
    let expected: Vec<f32> = (0..8)
        .map(|j| (0..8).map(|i| p[i] * sprm.w_v.at(i, j)).sum())
        .collect();
    for t in 0..6 {
        for j in 0..8 {
            assert!((out.at(t, j) - expected[j]).abs() < 1e-6);
        }
    }
    // Every row is bitwise the same vector.
    for t in 1..6 {
        assert_eq!(out.row(t), out.row(0));
    }
}

#[test]
fn identical_context_gives_identical_rows() {
    let cfg = tiny(ProfileMode::None);
    let params = ModelParams::init(&cfg, 4);
    let period = random_input(3, 8, 2);
    let x = Tensor::from_fn(&[12, 8], |i| period.data()[i % 24]);
    let (out, att) = run_sprm(&cfg, &params.blocks[0].sprm, &x);
    // Receptive field is 3 rows back, so rows 6 and 9 see the same window.
    assert_eq!(out.row(6), out.row(9));
    assert_eq!(att[0].row(6), att[0].row(9));
}

#[test]
fn outputs_lie_in_the_prototype_hull() {
    let cfg = tiny(ProfileMode::None);
    let params = ModelParams::init(&cfg, 5);
    let sprm = &params.blocks[0].sprm;
    let (out, att) = run_sprm(&cfg, sprm, &random_input(7, 8, 3));
    let dk = cfg.head_dim();
    // Value projection P·W_V.
    let v: Vec<Vec<f32>> = (0..cfg.prototypes)
        .map(|r| {
            (0..8)
                .map(|j| (0..8).map(|i| sprm.prototypes.at(r, i) * sprm.w_v.at(i, j)).sum())
                .collect()
        })
        .collect();
    for (h, a) in att.iter().enumerate() {
        for t in 0..7 {
            let w = a.row(t);
            assert!(w.iter().all(|&x| x >= 0.0));
            assert!((w.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            for j in 0..dk {
                let combo: f32 = (0..cfg.prototypes).map(|r| w[r] * v[r][h * dk + j]).sum();
                assert!((combo - out.at(t, h * dk + j)).abs() < 1e-5);
            }
        }
    }
}

/// Two positions, two channels, two prototypes, one head; every quantity
/// worked out by hand below.
#[test]
fn hand_evaluated_two_step_example() {
    let cfg = ModelConfig {
        vocab_size: 8,
        d_model: 2,
        heads: 1,
        prototypes: 2,
        conv_branches: vec![
            ConvBranch { width: 2, dilation: 1 },
            ConvBranch { width: 1, dilation: 1 },
        ],
        ..tiny(ProfileMode::None)
    };
    let t = |r, c, d: &[f32]| Tensor::matrix(r, c, d.to_vec()).unwrap();
    let sprm = SprmWeights {
        // Channel 0: out[t] = 0.5·x[t-1] + 1·x[t]; channel 1: out[t] = 2·x[t].
        kernels: vec![t(2, 1, &[0.5, 1.0]), t(1, 1, &[2.0])],
        prototypes: t(2, 2, &[1.0, 0.0, 0.0, 1.0]),
        w_q: t(2, 2, &[1.0, 0.0, 0.0, 1.0]),
        w_k: t(2, 2, &[1.0, 0.0, 0.0, 1.0]),
        w_v: t(2, 2, &[2.0, 0.0, 0.0, -1.0]),
    };
    let x = t(2, 2, &[1.0, 0.5, 2.0, -0.5]);
    let (out, att) = run_sprm(&cfg, &sprm, &x);
    // H_p row 0 = [1, 1]; row 1 = [0.5 + 2, -1] = [2.5, -1].
    // Scores (÷√2): row 0 = [1, 1]/√2 → [0.5, 0.5].
    // Row 1 = [2.5, -1]/√2 → weights ∝ [e^{2.5/√2}, e^{-1/√2}].
    let s = 2f64.sqrt();
    let (e1, e2) = ((2.5 / s).exp(), (-1.0 / s).exp());
    let w1 = [e1 / (e1 + e2), e2 / (e1 + e2)];
    // V rows: [2, 0] and [0, -1].
    let expected = [[1.0, -0.5], [2.0 * w1[0], -w1[1]]];
    for r in 0..2 {
        for c in 0..2 {
            assert!((out.at(r, c) as f64 - expected[r][c]).abs() < 1e-6, "row {r} col {c}");
        }
    }
    assert!((att[0].at(1, 0) as f64 - w1[0]).abs() < 1e-6);
}

#[test]
fn zeroed_branch_reduces_block_to_plain_transformer() {
    let cfg = tiny(ProfileMode::None);
    let mut params = ModelParams::init(&cfg, 6);
    for k in &mut params.blocks[0].sprm.kernels {
        *k = Tensor::zeros(k.shape());
    }
    params.blocks[0].sprm.w_v = Tensor::zeros(params.blocks[0].sprm.w_v.shape());
    let x = random_input(9, 8, 4);
    let run = |cfg: &ModelConfig| {
        let mut tape = Tape::<f32>::new();
        let w = params.bind(&mut tape, false);
        let h = tape.constant(x.clone());
        let (out, _) = block_forward(&mut tape, h, &w.blocks[0], cfg).unwrap();
        tape.value(out).clone()
    };
    let plain = ModelConfig {
        use_sprm: false,
        ..cfg.clone()
    };
    assert_eq!(run(&cfg), run(&plain));
}

#[test]
fn earlier_rows_ignore_later_tokens() {
    use rand::{Rng, SeedableRng};
    for seed in 0..100u64 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mode = [ProfileMode::None, ProfileMode::FirstToken, ProfileMode::Positional][seed as usize % 3];
        let model = Model::new(tiny(mode), seed).unwrap();
        let n = rng.gen_range(2..12);
        let mut tokens: Vec<u32> = (0..n).map(|_| rng.gen_range(3..20)).collect();
        let cut = rng.gen_range(0..n);
        let a = model.forward(&tokens, &profile()).unwrap();
        tokens[cut] = if tokens[cut] == 3 { 4 } else { 3 };
        let b = model.forward(&tokens, &profile()).unwrap();
        // Row r has seen tokens 0..r, so rows 0..=cut are untouched.
        for r in 0..=cut {
            assert_eq!(a.probs.row(r), b.probs.row(r), "seed {seed} row {r}");
        }
        assert_ne!(a.probs.row(cut + 1), b.probs.row(cut + 1));
    }
}

#[test]
fn zero_profile_encoder_matches_no_profile() {
    let mut positional = Model::new(tiny(ProfileMode::Positional), 8).unwrap();
    let p = &mut positional.params.profile;
    p.fuse = Tensor::zeros(p.fuse.shape());
    p.fuse_bias = Tensor::zeros(p.fuse_bias.shape());
    let mut none = positional.clone();
    none.config.profile_mode = ProfileMode::None;
    let tokens = [3, 9, 4, 11, 3];
    let a = positional.forward(&tokens, &profile()).unwrap();
    let b = none.forward(&tokens, &profile()).unwrap();
    assert_eq!(a.probs, b.probs);
}

#[test]
fn output_rows_are_distributions_without_reserved_mass() {
    for mode in [ProfileMode::None, ProfileMode::FirstToken, ProfileMode::Positional] {
        let model = Model::new(tiny(mode), 9).unwrap();
        let pred = model.forward(&[5, 6, 7, 1, 19], &profile()).unwrap();
        assert_eq!(pred.probs.shape(), &[6, 20]);
        for r in 0..6 {
            let row = pred.probs.row(r);
            let s: f64 = row.iter().map(|&x| x as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert_eq!(row[PAD_ID as usize], 0.0);
            assert_eq!(row[PROFILE_ID as usize], 0.0);
        }
        assert_eq!(pred.profile_embedding.len(), 8);
        assert_eq!(pred.sprm_attention.len(), 2);
        assert_eq!(pred.sprm_attention[0][0].shape(), &[6, 5]);
    }
}

#[test]
fn profile_modes_differ_only_through_the_profile() {
    let model = Model::new(tiny(ProfileMode::FirstToken), 10).unwrap();
    let other: BTreeMap<String, String> = [("region".to_string(), "north".to_string())].into();
    let a = model.forward(&[4, 5], &profile()).unwrap();
    let b = model.forward(&[4, 5], &other).unwrap();
    assert_ne!(a.probs, b.probs);
    assert_eq!(model.profile_embedding(&profile()).unwrap(), a.profile_embedding);
    assert_eq!(model.profile_indices(&other), vec![1, 0]);
}

#[test]
fn overlong_input_is_rejected() {
    let model = Model::new(tiny(ProfileMode::None), 1).unwrap();
    let tokens = vec![3u32; 24];
    match model.forward(&tokens, &profile()) {
        Err(PantherError::SequenceTooLong { len: 25, max: 24 }) => {}
        other => panic!("unexpected {other:?}"),
    }
    assert!(model.forward(&[0], &profile()).is_err());
}

#[test]
fn sprm_parameter_count_does_not_depend_on_length() {
    let short = ModelParams::init(&tiny(ProfileMode::None), 1);
    let long_cfg = ModelConfig {
        max_len: 2048,
        ..tiny(ProfileMode::None)
    };
    let long = ModelParams::init(&long_cfg, 1);
    assert_eq!(short.sprm_parameters(), long.sprm_parameters());
    let cfg = tiny(ProfileMode::None);
    let d = cfg.d_model;
    let conv: usize = cfg.conv_branches.iter().map(|b| b.width * d / 2).sum();
    assert_eq!(short.sprm_parameters(), cfg.layers * (cfg.prototypes * d + conv + 3 * d * d));
}

#[test]
fn invalid_configs_are_rejected() {
    let base = tiny(ProfileMode::None);
    for bad in [
        ModelConfig { heads: 3, ..base.clone() },
        ModelConfig { prototypes: 0, ..base.clone() },
        ModelConfig {
            conv_branches: vec![ConvBranch { width: 3, dilation: 1 }; 3],
            ..base.clone()
        },
        ModelConfig { vocab_size: 3, ..base.clone() },
    ] {
        assert!(Model::new(bad, 0).is_err());
    }
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let model = Model::new(tiny(ProfileMode::Positional), 12).unwrap();
    let hash = "ab".repeat(32);
    save_checkpoint(&path, &model, &hash).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.vocab_hash, hash);
    assert_eq!(ck.model.config, model.config);
    let tokens = [3, 4, 5, 6];
    assert_eq!(
        ck.model.forward(&tokens, &profile()).unwrap().probs,
        model.forward(&tokens, &profile()).unwrap().probs
    );
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.pop();
    assert!(Checkpoint::from_bytes(&bytes).is_err());
    bytes[0] = b'X';
    assert!(Checkpoint::from_bytes(&bytes).is_err());
}

#[test]
fn forward_counter_tracks_calls_on_this_thread() {
    let model = Model::new(tiny(ProfileMode::None), 1).unwrap();
    let before = forward_passes();
    model.forward(&[3, 4], &profile()).unwrap();
    model.profile_embedding(&profile()).unwrap();
    assert_eq!(forward_passes(), before + 1);
}

#[test]
fn models_without_profile_attributes_run() {
    let cfg = ModelConfig {
        vocab_size: 12,
        d_model: 8,
        heads: 2,
        prototypes: 4,
        max_len: 8,
        conv_branches: vec![ConvBranch { width: 2, dilation: 1 }],
        profile_schema: vec![],
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, 0).unwrap();
    let pred = model.forward_indices(&[4, 5], &[]).unwrap();
    assert_eq!(pred.probs.shape(), [3, 12]);
    assert_eq!(model.profile_embedding(&BTreeMap::new()).unwrap(), vec![0.0; 8]);
}
