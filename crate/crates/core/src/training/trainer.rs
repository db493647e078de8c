use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{combined_step, Adam, Example, LossWeights, PositivePairPolicy, TrainConfig};
use crate::error::{PantherError, Result};
use crate::evaluation::{rank_eval, EvalOptions, RankingReport};
use crate::events::DatasetSplit;
use crate::model::{Checkpoint, Model, ModelParams};
use crate::tokenizer::Vocab;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub generative_loss: Option<f64>,
    pub contrastive_loss: Option<f64>,
    /// Batches whose contrastive term had no positive pair.
    pub empty_contrastive_batches: usize,
    pub val_hr_1: Option<f64>,
    pub val_hr_5: Option<f64>,
    pub val_hr_10: Option<f64>,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// The epoch with the best validation HR@1 (epoch 0 is the input model).
    pub model: Model,
    pub best_epoch: usize,
    pub best_validation: Option<RankingReport>,
    pub log: Vec<EpochLog>,
}

/// Training prefixes of every user with at least two events in train.
pub fn build_examples(split: &DatasetSplit, vocab: &Vocab, model: &Model) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for u in 0..split.len() {
        let user = &split.users[u];
        let events = split.train(u);
        if events.len() < 2 {
            continue;
        }
        out.push(Example {
            user_id: user.user_id.clone(),
            tokens: vocab.encode_events(&user.user_id, events)?.ids,
            profile: model.profile_indices(&user.profile),
        });
    }
    Ok(out)
}

fn crop(ex: &Example, max_len: usize, rng: &mut impl Rng) -> Example {
    if ex.tokens.len() <= max_len {
        return ex.clone();
    }
    let start = rng.gen_range(0..=ex.tokens.len() - max_len);
    Example {
        user_id: ex.user_id.clone(),
        tokens: ex.tokens[start..start + max_len].to_vec(),
        profile: ex.profile.clone(),
    }
}

fn validate(model: &Model, split: &DatasetSplit, vocab: &Vocab) -> Result<Option<RankingReport>> {
    match rank_eval(model, split, vocab, EvalOptions::validation()) {
        Ok(r) => Ok(Some(r)),
        Err(PantherError::Empty(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Trains `model` on the training prefixes of `split`, evaluating on the
/// validation slice after every epoch. Each epoch's [`EpochLog`] is also
/// written to `log` as one JSON line.
pub fn train(
    mut model: Model,
    split: &DatasetSplit,
    vocab: &Vocab,
    cfg: &TrainConfig,
    weights: &LossWeights,
    policy: &PositivePairPolicy,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    weights.validate()?;
    if vocab.len() != model.config.vocab_size {
        return Err(PantherError::VocabMismatch {
            expected: model.config.vocab_size.to_string(),
            found: vocab.len().to_string(),
        });
    }
    let examples = build_examples(split, vocab, &model)?;
    if examples.is_empty() {
        return Err(PantherError::Empty("no user has two training events".into()));
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&model.params, cfg);
    let mut order: Vec<usize> = (0..examples.len()).collect();

    let mut entries = Vec::new();
    let mut emit = |entry: EpochLog, log: &mut Option<&mut dyn Write>| -> Result<()> {
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &entry)?;
            w.write_all(b"\n")?;
        }
        log::info!("epoch {} gen={:?} hr@1={:?}", entry.epoch, entry.generative_loss, entry.val_hr_1);
        entries.push(entry);
        Ok(())
    };
    let initial = validate(&model, split, vocab)?;
    emit(epoch_log(0, None, None, 0, initial.as_ref(), started), &mut log)?;
    let mut best = (0, model.clone(), initial);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut gen, mut cl, mut cl_batches, mut empty) = (0.0, 0.0, 0usize, 0usize);
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = chunk
                .iter()
                .map(|&i| crop(&examples[i], model.config.max_len, &mut rng))
                .collect();
            let report = combined_step(&mut model, &mut opt, &batch, weights, cfg, policy)?;
            gen += report.generative;
            batches += 1;
            match report.contrastive {
                Some(c) => {
                    cl += c;
                    cl_batches += 1;
                }
                None if weights.lambda > 0.0 => empty += 1,
                None => {}
            }
        }
        let val = validate(&model, split, vocab)?;
        let cl_mean = (cl_batches > 0).then(|| cl / cl_batches as f64);
        emit(epoch_log(epoch, Some(gen / batches as f64), cl_mean, empty, val.as_ref(), started), &mut log)?;
        let improved = match (&val, &best.2) {
            (Some(v), Some(b)) => v.hr_1 > b.hr_1,
            (Some(_), None) => true,
            // without validation data the latest model is kept
            (None, _) => true,
        };
        if improved {
            best = (epoch, model.clone(), val);
        }
    }
    Ok(TrainOutcome {
        model: best.1,
        best_epoch: best.0,
        best_validation: best.2,
        log: entries,
    })
}

fn epoch_log(
    epoch: usize,
    gen: Option<f64>,
    cl: Option<f64>,
    empty: usize,
    val: Option<&RankingReport>,
    started: Instant,
) -> EpochLog {
    EpochLog {
        epoch,
        generative_loss: gen,
        contrastive_loss: cl,
        empty_contrastive_batches: empty,
        val_hr_1: val.map(|r| r.hr_1),
        val_hr_5: val.map(|r| r.hr_5),
        val_hr_10: val.map(|r| r.hr_10),
        wall_clock_s: started.elapsed().as_secs_f64(),
    }
}

/// Copies every parameter of `src` into `dst` whose shape matches,
/// skipping the token embedding when `skip_tokens` is set. Returns the
/// number of slots copied.
pub fn transfer_weights(dst: &mut ModelParams, src: &ModelParams, skip_tokens: bool) -> usize {
    let mut copied = 0;
    for (i, (d, s)) in dst.slots_mut().into_iter().zip(src.slots()).enumerate() {
        if (skip_tokens && i == 0) || d.shape() != s.shape() {
            continue;
        }
        *d = s.clone();
        copied += 1;
    }
    copied
}

/// Continues training a checkpoint on a new corpus. A different
/// vocabulary is an error unless `reinit_embeddings` is set, in which case
/// the token embedding is drawn fresh and all other shape-compatible
/// weights are kept.
#[allow(clippy::too_many_arguments)]
pub fn fine_tune(
    checkpoint: &Checkpoint,
    split: &DatasetSplit,
    vocab: &Vocab,
    cfg: &TrainConfig,
    weights: &LossWeights,
    policy: &PositivePairPolicy,
    reinit_embeddings: bool,
    log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    let hash = vocab.hash();
    let model = if hash == checkpoint.vocab_hash {
        checkpoint.model.clone()
    } else if reinit_embeddings {
        let mut config = checkpoint.model.config.clone();
        config.vocab_size = vocab.len();
        let mut fresh = Model::new(config, cfg.seed)?;
        transfer_weights(&mut fresh.params, &checkpoint.model.params, true);
        fresh
    } else {
        return Err(PantherError::VocabMismatch {
            expected: checkpoint.vocab_hash.clone(),
            found: hash,
        });
    };
    train(model, split, vocab, cfg, weights, policy, log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub best_epoch: usize,
    pub test: RankingReport,
}

/// Trains one copy of `init` per λ and reports test metrics of each.
pub fn lambda_sweep(
    init: &Model,
    split: &DatasetSplit,
    vocab: &Vocab,
    cfg: &TrainConfig,
    lambdas: &[f64],
    temperature: f64,
    policy: &PositivePairPolicy,
) -> Result<Vec<SweepRow>> {
    lambdas
        .iter()
        .map(|&lambda| {
            let weights = LossWeights { lambda, temperature };
            let out = train(init.clone(), split, vocab, cfg, &weights, policy, None)?;
            let test = rank_eval(&out.model, split, vocab, EvalOptions::test())?;
            Ok(SweepRow {
                lambda,
                best_epoch: out.best_epoch,
                test,
            })
        })
        .collect()
}
