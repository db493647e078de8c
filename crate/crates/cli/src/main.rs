use std::fs;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use panther::downstream::{
    build_hybrid_examples, group_by_merchant, merchant_risk_tail, train_scorer, write_deviations, write_risk,
    ContextEncoder, DeviationMode, DeviationScorer, HybridScorer, ScorerConfig, Tail,
};
use panther::evaluation::{rank_eval, EvalOptions, EvalSplit};
use panther::events::{chronological_split, load_events, load_profiles, write_events, write_profiles, DatasetSplit, SplitCut};
use panther::model::{checkpoint_digest, load_checkpoint, save_checkpoint, Model, ModelConfig};
use panther::serving::{bench_latency, build_cache, serve_lines, EmbeddingCache, ScoringRequest, ScoringService};
use panther::synthetic::{generate_synthetic, SyntheticSpec};
use panther::tokenizer::{build_vocab, AttributeSchema, Vocab};
use panther::training::{fine_tune, train, LossWeights, PositivePairPolicy, TrainConfig, TrainOutcome};

#[derive(Parser)]
#[command(name = "panther", version, about = "Behavioral sequence pretraining and fraud scoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus into a data directory.
    Synth {
        /// Generator settings as JSON; defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Record a chronological per-user split of a data directory.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "0.8,0.1,0.1")]
        ratios: String,
    },
    /// Build the token vocabulary from the training portion.
    Vocab {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        cap: usize,
        /// Defaults to `<data>/vocab.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain a model from a JSON run description.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Continue training a checkpoint on another data directory.
    Finetune {
        #[arg(long = "from")]
        from: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Vocabulary of the new data; defaults to `<data>/vocab.json`.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        /// Allow a different vocabulary by reinitializing token embeddings.
        #[arg(long)]
        reinit_embeddings: bool,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Full-ranking evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Score only each user's final held-out event.
        #[arg(long)]
        last_only: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-event deviations and per-merchant risk scores.
    Risk {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        q: f64,
        #[arg(long, default_value_t = -1.0)]
        threshold: f64,
        /// Score against whole-token probabilities instead of the
        /// merchant-category marginal.
        #[arg(long)]
        token_mode: bool,
        /// Treat high deviations as risky instead of low ones.
        #[arg(long)]
        upper_tail: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the hybrid fraud head on the training portion.
    TrainScorer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Scorer settings as JSON; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Precompute the serving cache for every user.
    CacheBuild {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 50)]
        shortlist: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Answer JSON-line scoring requests on a Unix socket or stdin.
    Serve {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        scorer: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        socket: Option<PathBuf>,
    },
    /// Measure hot-path latency over cached users.
    BenchLatency {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        scorer: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Validation,
    Test,
}

/// Attribute schemas of a data directory.
#[derive(Serialize, Deserialize)]
struct Schemas {
    events: AttributeSchema,
    profile: AttributeSchema,
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    ratios: [f64; 3],
    cuts: Vec<SplitCut>,
    skipped: Vec<String>,
}

/// A `train` run description.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    data: PathBuf,
    out: PathBuf,
    #[serde(default)]
    vocab: Option<PathBuf>,
    #[serde(default)]
    model: ModelConfig,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    loss: LossWeights,
    #[serde(default)]
    pairs: PositivePairPolicy,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    log: Option<PathBuf>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_schemas(data: &Path) -> Result<Schemas> {
    read_json(&data.join("schema.json"))
}

/// Users of a data directory cut by its recorded split.
fn load_split(data: &Path) -> Result<DatasetSplit> {
    let schemas = load_schemas(data)?;
    let mut users = load_events(&data.join("events.jsonl"), &schemas.events)?;
    let profiles = data.join("profiles.jsonl");
    if profiles.exists() {
        load_profiles(&profiles, &schemas.profile, &mut users)?;
    }
    let file: SplitFile = read_json(&data.join("split.json")).context("run `panther split` first")?;
    let split = chronological_split(users, file.ratios)?;
    if split.cuts != file.cuts {
        bail!("{} no longer matches the events; rerun `panther split`", data.join("split.json").display());
    }
    Ok(split)
}

fn default_vocab(data: &Path, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| data.join("vocab.json"))
}

fn parse_ratios(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s.split(',').map(|p| p.trim().parse()).collect::<Result<_, _>>()?;
    match parts[..] {
        [a, b, c] => Ok([a, b, c]),
        _ => bail!("expected three comma-separated ratios, got `{s}`"),
    }
}

fn log_sink(path: Option<&Path>) -> Result<Option<BufWriter<fs::File>>> {
    path.map(|p| fs::File::create(p).map(BufWriter::new).with_context(|| format!("creating {}", p.display())))
        .transpose()
}

fn val_hr(outcome: &TrainOutcome) -> String {
    outcome
        .best_validation
        .as_ref()
        .map_or(String::new(), |r| format!(", validation HR@1 {:.4}", r.hr_1))
}

fn service(cache: &Path, scorer: &Path, vocab: &Path) -> Result<ScoringService> {
    let cache = EmbeddingCache::load(cache)?;
    let scorer = HybridScorer::from_json(&fs::read(scorer)?)?;
    let vocab = Vocab::load(vocab)?;
    Ok(ScoringService::new(cache, scorer, vocab)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out } => {
            let spec: SyntheticSpec = match spec {
                Some(p) => read_json(&p)?,
                None => SyntheticSpec::default(),
            };
            let users = generate_synthetic(&spec)?;
            fs::create_dir_all(&out)?;
            write_events(&out.join("events.jsonl"), &users)?;
            write_profiles(&out.join("profiles.jsonl"), &users)?;
            let schemas = Schemas {
                events: spec.event_schema(),
                profile: spec.profile_schema(),
            };
            write_json(&out.join("schema.json"), &schemas)?;
            let events: usize = users.iter().map(|u| u.events.len()).sum();
            println!("wrote {} users, {events} events to {}", users.len(), out.display());
        }
        Command::Split { data, ratios } => {
            let ratios = parse_ratios(&ratios)?;
            let schemas = load_schemas(&data)?;
            let users = load_events(&data.join("events.jsonl"), &schemas.events)?;
            let split = chronological_split(users, ratios)?;
            println!("{} users, {} kept whole in train", split.len(), split.skipped.len());
            let file = SplitFile {
                ratios,
                cuts: split.cuts,
                skipped: split.skipped,
            };
            write_json(&data.join("split.json"), &file)?;
        }
        Command::Vocab { data, cap, out } => {
            let split = load_split(&data)?;
            let schemas = load_schemas(&data)?;
            let vocab = build_vocab(split.train_events(), &schemas.events, cap)?;
            let out = default_vocab(&data, out);
            vocab.save(&out)?;
            println!(
                "{} tokens, coverage {:.4}, compression {:.1}x -> {}",
                vocab.len(),
                vocab.coverage(),
                vocab.compression_ratio(),
                out.display()
            );
        }
        Command::Train { config } => {
            let run: RunConfig = read_json(&config)?;
            let split = load_split(&run.data)?;
            let vocab = Vocab::load(&default_vocab(&run.data, run.vocab))?;
            let mut cfg = run.model;
            cfg.vocab_size = vocab.len();
            if cfg.profile_schema.is_empty() {
                cfg.profile_schema = load_schemas(&run.data)?.profile.attributes;
            }
            let model = Model::new(cfg, run.seed)?;
            log::info!("{} parameters", model.num_parameters());
            let mut sink = log_sink(run.log.as_deref())?;
            let outcome = train(
                model,
                &split,
                &vocab,
                &run.train,
                &run.loss,
                &run.pairs,
                sink.as_mut().map(|w| w as &mut dyn Write),
            )?;
            save_checkpoint(&run.out, &outcome.model, &vocab.hash())?;
            println!("best epoch {}{} -> {}", outcome.best_epoch, val_hr(&outcome), run.out.display());
        }
        Command::Finetune {
            from,
            data,
            out,
            vocab,
            epochs,
            lr,
            lambda,
            reinit_embeddings,
            log,
        } => {
            let ck = load_checkpoint(&from)?;
            let split = load_split(&data)?;
            let vocab = Vocab::load(&default_vocab(&data, vocab))?;
            let cfg = TrainConfig {
                epochs,
                learning_rate: lr,
                ..TrainConfig::default()
            };
            let weights = LossWeights {
                lambda,
                ..LossWeights::default()
            };
            let mut sink = log_sink(log.as_deref())?;
            let outcome = fine_tune(
                &ck,
                &split,
                &vocab,
                &cfg,
                &weights,
                &PositivePairPolicy::default(),
                reinit_embeddings,
                sink.as_mut().map(|w| w as &mut dyn Write),
            )?;
            save_checkpoint(&out, &outcome.model, &vocab.hash())?;
            println!("best epoch {}{} -> {}", outcome.best_epoch, val_hr(&outcome), out.display());
        }
        Command::Eval {
            ckpt,
            data,
            split,
            last_only,
            out,
        } => {
            let ck = load_checkpoint(&ckpt)?;
            let ds = load_split(&data)?;
            let vocab = Vocab::load(&data.join("vocab.json"))?;
            if vocab.hash() != ck.vocab_hash {
                bail!("checkpoint was trained with a different vocabulary");
            }
            let opts = EvalOptions {
                split: match split {
                    SplitArg::Validation => EvalSplit::Validation,
                    SplitArg::Test => EvalSplit::Test,
                },
                last_only,
            };
            let report = rank_eval(&ck.model, &ds, &vocab, opts)?;
            let out = out.unwrap_or_else(|| data.join("report.json"));
            write_json(&out, &report)?;
            println!(
                "HR@1 {:.4} HR@5 {:.4} HR@10 {:.4} NDCG@5 {:.4} NDCG@10 {:.4} over {} positions",
                report.hr_1, report.hr_5, report.hr_10, report.ndcg_5, report.ndcg_10, report.positions
            );
        }
        Command::Risk {
            ckpt,
            data,
            q,
            threshold,
            token_mode,
            upper_tail,
            out,
        } => {
            let ck = load_checkpoint(&ckpt)?;
            let ds = load_split(&data)?;
            let vocab = Vocab::load(&data.join("vocab.json"))?;
            let mode = if token_mode { DeviationMode::Token } else { DeviationMode::default() };
            let scorer = DeviationScorer::new(&ck.model, &vocab, &mode)?;
            let scores = scorer.all_deviations(&ds.users)?;
            let tail = if upper_tail { Tail::Upper } else { Tail::Lower };
            let report = merchant_risk_tail(&group_by_merchant(&scores), q, threshold, tail)?;
            fs::create_dir_all(&out)?;
            write_deviations(&out.join("deviations.jsonl"), &scores)?;
            write_risk(&out.join("risk.json"), &report)?;
            println!(
                "{} deviations, {} merchants, {} flagged at threshold {threshold}",
                scores.len(),
                report.merchants.len(),
                report.flagged.len()
            );
            for m in report.merchants.iter().take(5) {
                println!("  {:<16} R={:+.3} users={}", m.merchant, m.risk, m.users);
            }
        }
        Command::TrainScorer { ckpt, data, config, out } => {
            let cfg: ScorerConfig = match config {
                Some(p) => read_json(&p)?,
                None => ScorerConfig::default(),
            };
            let ck = load_checkpoint(&ckpt)?;
            let ds = load_split(&data)?;
            let vocab = Vocab::load(&data.join("vocab.json"))?;
            let ctx = ContextEncoder {
                schema: vocab.schema().attributes.clone(),
            };
            let examples = build_hybrid_examples(&ck.model, &vocab, &ds.users, &ctx, cfg.shortlist, |u| {
                0..ds.cuts[u].train_end
            })?;
            let positives = examples.iter().filter(|e| e.label).count();
            log::info!("{} examples, {positives} positive", examples.len());
            let scorer = train_scorer(
                &examples,
                ck.model.params.token_embedding.clone(),
                ctx.dim(),
                ck.model.config.d_model,
                &cfg,
            )?;
            fs::write(&out, scorer.to_json()?)?;
            println!("trained on {} examples ({positives} positive) -> {}", examples.len(), out.display());
        }
        Command::CacheBuild {
            ckpt,
            data,
            shortlist,
            out,
        } => {
            let ck = load_checkpoint(&ckpt)?;
            let digest = checkpoint_digest(&ckpt)?;
            let ds = load_split(&data)?;
            let vocab = Vocab::load(&data.join("vocab.json"))?;
            let cache = build_cache(&ds.users, &vocab, &ck, &digest, shortlist)?;
            cache.save(&out)?;
            println!("{} users -> {}", cache.len(), out.display());
        }
        Command::Serve {
            cache,
            scorer,
            vocab,
            socket,
        } => {
            let svc = service(&cache, &scorer, &vocab)?;
            match socket {
                #[cfg(unix)]
                Some(path) => panther::serving::serve_unix(Arc::new(svc), &path)?,
                #[cfg(not(unix))]
                Some(_) => bail!("socket serving needs a Unix platform"),
                None => {
                    let stdin = io::stdin();
                    serve_lines(&svc, BufReader::new(stdin.lock()), io::stdout().lock())?;
                }
            }
        }
        Command::BenchLatency {
            cache,
            scorer,
            vocab,
            data,
            n,
        } => {
            let svc = service(&cache, &scorer, &vocab)?;
            let ds = load_split(&data)?;
            let events: Vec<_> = ds.users.iter().flat_map(|u| u.events.iter()).collect();
            if events.is_empty() || n == 0 {
                bail!("nothing to benchmark");
            }
            let requests: Vec<ScoringRequest> = (0..n)
                .map(|i| {
                    let e = events[(i * 7919) % events.len()];
                    ScoringRequest {
                        user_id: e.user_id.clone(),
                        attributes: e.attributes.clone(),
                        token: None,
                        deadline_us: None,
                    }
                })
                .collect();
            let report = bench_latency(&svc, &requests)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
