//! `movierec`: prepare MovieLens data, train and evaluate the dual-tower
//! model, produce recommendations, and run the verification suites.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use movierec::ingest::{Corpus, RatingTriple};
use movierec::rng::DEFAULT_SEED;
use movierec::towers::{init_params, ModelConfig, TitleEncoder};
use movierec::trainer::{
    self, evaluate, load_checkpoint, recommend, save_checkpoint, split_ratings, subsample, Catalog, CheckpointMeta,
    DataSource, TrainConfig, TrainError,
};
use movierec::verify::{self, CheckResult};

#[derive(Parser)]
#[command(name = "movierec", version, about = "Dual-tower movie rating model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a MovieLens directory and write vocabularies and counts as JSON.
    Prepare {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint and a metrics CSV.
    Train(TrainArgs),
    /// Report test-set MSE and RMSE of a checkpoint.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        /// Defaults to the directory the model was trained on.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Print the top-k unrated movies for a user.
    Recommend {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        user_id: u32,
        #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
        top_k: u64,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Run the gradient and attention verification suites.
    Check {
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// Scale every analytic gradient by 1.01 before comparison.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    out_model: PathBuf,
    #[arg(long)]
    metrics: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, value_enum, default_value_t = Encoder::Cnn)]
    title_encoder: Encoder,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    /// Train and test on a seeded sample of this many ratings.
    #[arg(long)]
    subsample: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Encoder {
    Cnn,
    AttnCnn,
}

impl From<Encoder> for TitleEncoder {
    fn from(e: Encoder) -> Self {
        match e {
            Encoder::Cnn => TitleEncoder::Cnn,
            Encoder::AttnCnn => TitleEncoder::AttnCnn,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    Gradcheck,
    Attention,
    All,
}

enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Numeric(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Data(e) | Failure::Numeric(e) => e,
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) => Failure::Usage(e.into()),
            TrainError::EmptyDataset(_) | TrainError::UnknownUser(_) => Failure::Data(e.into()),
            TrainError::NonFiniteLoss { .. } | TrainError::Tensor(_) => Failure::Numeric(e.into()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn data<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Data(e.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Prepare { data_dir, out } => cmd_prepare(&data_dir, &out),
        Command::Train(args) => cmd_train(&args),
        Command::Evaluate { model, data_dir } => cmd_evaluate(&model, data_dir.as_deref()),
        Command::Recommend { model, user_id, top_k, data_dir } => {
            cmd_recommend(&model, user_id, top_k as usize, data_dir.as_deref())
        }
        Command::Check { suite, seed, inject_fault } => cmd_check(suite, seed, inject_fault),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

fn load_corpus(dir: &Path) -> Result<Corpus, Failure> {
    Corpus::load(dir).map_err(|e| data(anyhow!(e).context(format!("loading {}", dir.display()))))
}

fn cmd_prepare(data_dir: &Path, out: &Path) -> Outcome {
    let start = Instant::now();
    let corpus = load_corpus(data_dir)?;
    let meta = corpus.vocab.to_metadata();
    let mut json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    json.push('\n');
    fs::write(out, json).with_context(|| format!("writing {}", out.display())).map_err(data)?;
    let c = meta.counts;
    println!("parsed {} users, {} movies, {} ratings", c.num_users, c.num_movies, corpus.ratings.len());
    println!("users={}", c.num_users);
    println!("movies={}", c.num_movies);
    println!("ratings={}", corpus.ratings.len());
    println!("genres={}", c.num_genres);
    println!("vocab_size={}", c.vocab_size);
    println!("occupations={}", c.num_occupations);
    println!("seconds={:.3}", start.elapsed().as_secs_f64());
    Ok(())
}

/// The train/test split recorded in a checkpoint.
fn rebuild_split(corpus: &Corpus, src: &DataSource) -> (Vec<RatingTriple>, Vec<RatingTriple>) {
    let pool = match src.subsample {
        Some(n) => subsample(&corpus.ratings, n, src.seed),
        None => corpus.ratings.clone(),
    };
    split_ratings(&pool, src.test_fraction, src.seed)
}

fn cmd_train(a: &TrainArgs) -> Outcome {
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: a.seed,
        test_fraction: a.test_fraction,
        shuffle: true,
        max_steps: a.max_steps,
    };
    config.validate()?;
    let corpus = load_corpus(&a.data_dir)?;
    let data_dir = fs::canonicalize(&a.data_dir).map_err(data)?;
    let source = DataSource {
        data_dir: data_dir.to_string_lossy().into_owned(),
        seed: a.seed,
        test_fraction: a.test_fraction,
        subsample: a.subsample,
    };
    let (train_set, test_set) = rebuild_split(&corpus, &source);
    let model = ModelConfig::default().with_title_encoder(a.title_encoder.into());
    let counts = corpus.vocab.counts();
    let (towers, params) = init_params(&model, &counts, a.seed).map_err(TrainError::from)?;
    let catalog = Catalog::of(&corpus);
    eprintln!("training on {} ratings, testing on {}", train_set.len(), test_set.len());
    let start = Instant::now();
    let (mut params, log) = trainer::train(&towers, params, catalog, &train_set, &test_set, &config)?;
    params.round_to_f32();

    let meta = CheckpointMeta { model, counts, data: Some(source) };
    save_checkpoint(&a.out_model, &meta, &params).map_err(data)?;
    log.write_csv(&a.metrics).with_context(|| format!("writing {}", a.metrics.display())).map_err(data)?;

    let steps = log.rows.last().map_or(0, |r| r.step);
    println!("train_ratings={}", train_set.len());
    println!("test_ratings={}", test_set.len());
    println!("steps={steps}");
    println!("seconds={:.3}", start.elapsed().as_secs_f64());
    if !test_set.is_empty() {
        let e = evaluate(&towers, &params, catalog, &test_set)?;
        println!("test_mse={}", e.mse);
        println!("test_rmse={}", e.rmse);
        println!("test_rmse_clamped={}", e.rmse_clamped);
    }
    Ok(())
}

struct Loaded {
    towers: movierec::towers::Towers,
    params: movierec::autograd::ParameterSet,
    corpus: Corpus,
    train: Vec<RatingTriple>,
    test: Vec<RatingTriple>,
}

fn load_model(model: &Path, data_dir: Option<&Path>) -> Result<Loaded, Failure> {
    let ck = load_checkpoint(model).with_context(|| format!("reading {}", model.display())).map_err(data)?;
    let src = ck
        .meta
        .data
        .clone()
        .ok_or_else(|| data(anyhow!("{} records no training data source", model.display())))?;
    let (towers, params) = ck.restore().map_err(data)?;
    let dir = data_dir.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&src.data_dir));
    let corpus = load_corpus(&dir)?;
    if corpus.vocab.counts() != ck.meta.counts {
        return Err(data(anyhow!(
            "{} does not match the model's vocabulary ({:?} vs {:?})",
            dir.display(),
            corpus.vocab.counts(),
            ck.meta.counts
        )));
    }
    let (train, test) = rebuild_split(&corpus, &src);
    Ok(Loaded { towers, params, corpus, train, test })
}

fn cmd_evaluate(model: &Path, data_dir: Option<&Path>) -> Outcome {
    let m = load_model(model, data_dir)?;
    let e = evaluate(&m.towers, &m.params, Catalog::of(&m.corpus), &m.test)?;
    println!("records={}", m.test.len());
    println!("mse={}", e.mse);
    println!("rmse={}", e.rmse);
    println!("rmse_clamped={}", e.rmse_clamped);
    Ok(())
}

fn cmd_recommend(model: &Path, user_id: u32, k: usize, data_dir: Option<&Path>) -> Outcome {
    let m = load_model(model, data_dir)?;
    let recs = recommend(&m.towers, &m.params, &m.corpus.vocab, Catalog::of(&m.corpus), &m.train, user_id, k)?;
    for (rank, r) in recs.iter().enumerate() {
        let title = m.corpus.movie_title(r.movie_index).unwrap_or_default();
        println!("{} {} {:.4} {}", rank + 1, r.movie_id, r.score, title);
    }
    Ok(())
}

fn cmd_check(suite: Suite, seed: u64, inject_fault: bool) -> Outcome {
    let mut results: Vec<CheckResult> = Vec::new();
    let numeric = |e: movierec::autograd::TensorError| Failure::Numeric(e.into());
    if suite != Suite::Attention {
        results.extend(verify::gradcheck_battery(seed, verify::checker(inject_fault)).map_err(numeric)?);
    }
    if suite != Suite::Gradcheck {
        results.extend(verify::attention_suite(seed).map_err(numeric)?);
    }
    let mut failed = 0;
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        failed += usize::from(!r.passed);
        println!("{status} {} value={:e} threshold={:e} ({})", r.name, r.value, r.threshold, r.detail);
    }
    let worst_grad = results.iter().filter(|r| r.name.starts_with("grad:")).map(|r| r.value).fold(None, max_opt);
    if let Some(w) = worst_grad {
        println!("worst_grad_rel_error={w:e}");
    }
    for r in results.iter().filter(|r| r.name.starts_with("attention:")) {
        println!("{}={:e}", r.name.trim_start_matches("attention:").replace('-', "_"), r.value);
    }
    println!("checks={}", results.len());
    println!("failed={failed}");
    if failed > 0 {
        return Err(Failure::Numeric(anyhow!("{failed} of {} checks failed", results.len())));
    }
    Ok(())
}

fn max_opt(acc: Option<f64>, v: f64) -> Option<f64> {
    Some(acc.map_or(v, |a| a.max(v)))
}
