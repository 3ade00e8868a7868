//! `attrib-reid` command line. Exit code 0 is success, 1 a runtime failure
//! and 2 a usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use attrib_reid::evaluation::{Direction, GalleryMode};
use attrib_reid::losses::LambdaVariant;
use attrib_reid::optim::OptimizerKind;
use attrib_reid::training::Phase;
use clap::{Args, Parser, Subcommand};

use config::RunConfig;

/// Error that maps to the usage exit code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "attrib-reid", version, about = "Attribute-guided explainable aerial-ground person re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Render a synthetic aerial-ground dataset with attribute labels.
    Synth(SynthArgs),
    /// Train Stream 1 (re-ID) or Stream 2 (explainable) on the train split.
    Train(TrainArgs),
    /// Rank the test split and report mAP and CMC.
    Eval(EvalArgs),
    /// Decompose one query-gallery distance into per-attribute shares.
    Explain(ExplainArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// JSON config; flags given on the command line override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread cap for data-parallel sections.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    threads: Option<u64>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    out: PathBuf,
    /// Number of identities, at least 2.
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    ids: Option<u64>,
    #[arg(long)]
    images_per_platform: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    gem_p: Option<f64>,
    #[arg(long)]
    activation_k: Option<f64>,
    #[arg(long)]
    activation_t: Option<f64>,
    /// Leading backbone stages shared by both streams.
    #[arg(long)]
    shared_stages: Option<usize>,
    /// Output channels per backbone stage, comma separated.
    #[arg(long, value_delimiter = ',')]
    stage_channels: Option<Vec<usize>>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
}

#[derive(Args, Debug)]
struct LossArgs {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Target share ratio of the exclusive-attribute priors.
    #[arg(long)]
    v: Option<f64>,
    /// Triplet margin of the Stream-1 loss.
    #[arg(long)]
    margin: Option<f64>,
    /// `as-printed` or `balanced`.
    #[arg(long)]
    lambda_variant: Option<LambdaVariant>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    run: Option<PathBuf>,
    /// `stream1` or `stream2`.
    #[arg(long)]
    phase: Option<Phase>,
    /// `adam` or `sgd`; the learning rate defaults per optimizer.
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    ids_per_batch: Option<usize>,
    /// Pairs kept per Stream-2 batch, 0 keeps all.
    #[arg(long)]
    pairs_per_batch: Option<usize>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    queries_per_platform: Option<usize>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    loss: LossArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    run: Option<PathBuf>,
    /// Report directory, `<run>/eval` by default.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `a2g`, `g2a` or `all`.
    #[arg(long)]
    direction: Option<Direction>,
    /// `cross` or `all`.
    #[arg(long)]
    gallery_mode: Option<GalleryMode>,
    /// Also run the brute-force evaluator and fail on any disagreement.
    #[arg(long)]
    oracle: bool,
}

#[derive(Args, Debug)]
struct ExplainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Query image id (file stem).
    #[arg(long)]
    query: Option<String>,
    /// Gallery image id (file stem).
    #[arg(long)]
    gallery: Option<String>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

impl CommonArgs {
    fn base(&self, command: &str) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        cfg.command = command.to_string();
        set(&mut cfg.seed, self.seed);
        set_opt(&mut cfg.threads, self.threads.map(|t| t as usize));
        Ok(cfg)
    }
}

impl ModelArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.gem_p, self.gem_p);
        set(&mut cfg.activation_k, self.activation_k);
        set(&mut cfg.activation_t, self.activation_t);
        set(&mut cfg.shared_stages, self.shared_stages);
        set(&mut cfg.stage_channels, self.stage_channels.clone());
        set(&mut cfg.height, self.height);
        set(&mut cfg.width, self.width);
    }
}

impl LossArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.alpha, self.alpha);
        set(&mut cfg.beta, self.beta);
        set(&mut cfg.v, self.v);
        set(&mut cfg.margin, self.margin);
        set(&mut cfg.lambda_variant, self.lambda_variant);
    }
}

impl Command {
    fn config(&self) -> anyhow::Result<RunConfig> {
        match self {
            Command::Synth(a) => {
                let mut cfg = a.common.base("synth")?;
                cfg.out = Some(a.out.clone());
                set(&mut cfg.ids, a.ids.map(|n| n as usize));
                set(&mut cfg.images_per_platform, a.images_per_platform);
                set(&mut cfg.noise, a.noise);
                set(&mut cfg.height, a.height);
                set(&mut cfg.width, a.width);
                Ok(cfg)
            }
            Command::Train(a) => {
                let mut cfg = a.common.base("train")?;
                set_opt(&mut cfg.data, a.data.clone());
                set_opt(&mut cfg.run, a.run.clone());
                set(&mut cfg.phase, a.phase);
                if let Some(kind) = a.optimizer {
                    cfg.optimizer = kind;
                    cfg.learning_rate = kind.default_learning_rate();
                }
                set(&mut cfg.learning_rate, a.lr);
                set(&mut cfg.epochs, a.epochs);
                set(&mut cfg.batch_size, a.batch_size);
                set(&mut cfg.ids_per_batch, a.ids_per_batch);
                set(&mut cfg.pairs_per_batch, a.pairs_per_batch);
                set(&mut cfg.train_fraction, a.train_fraction);
                set(&mut cfg.queries_per_platform, a.queries_per_platform);
                a.model.apply(&mut cfg);
                a.loss.apply(&mut cfg);
                Ok(cfg)
            }
            Command::Eval(a) => {
                let mut cfg = a.common.base("eval")?;
                set_opt(&mut cfg.data, a.data.clone());
                set_opt(&mut cfg.run, a.run.clone());
                set_opt(&mut cfg.out, a.out.clone());
                set(&mut cfg.direction, a.direction);
                set(&mut cfg.gallery_mode, a.gallery_mode);
                cfg.oracle |= a.oracle;
                Ok(cfg)
            }
            Command::Explain(a) => {
                let mut cfg = a.common.base("explain")?;
                set_opt(&mut cfg.data, a.data.clone());
                set_opt(&mut cfg.run, a.run.clone());
                set_opt(&mut cfg.out, a.out.clone());
                set_opt(&mut cfg.query, a.query.clone());
                set_opt(&mut cfg.gallery, a.gallery.clone());
                Ok(cfg)
            }
        }
    }
}

fn run(command: &Command) -> anyhow::Result<()> {
    let cfg = command.config()?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    log::debug!("effective config: {cfg:?}");
    match command {
        Command::Synth(_) => commands::synth(&cfg),
        Command::Train(_) => commands::train(&cfg),
        Command::Eval(_) => commands::eval(&cfg),
        Command::Explain(_) => commands::explain(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ATTRIB_REID_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", commands::describe(&err));
            if err.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
