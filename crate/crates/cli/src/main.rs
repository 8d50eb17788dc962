//! `pqlab` command-line pipelines.
//!
//! Exit codes: 0 success, 2 usage error, 3 numeric failure, 4 missing or
//! stale artifact, 1 anything else.

mod commands;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use manifest::Manifest;

#[derive(Debug, Parser)]
#[command(name = "pqlab", version, about = "Product-quantization retrieval and adversarial query experiments")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML manifest. Defaults to `<out>/manifest.toml` when that exists.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Output directory; every artifact is written below it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Global seed; each stage derives its own seed from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic labelled dataset and split it into database and queries.
    GenData(GenDataArgs),
    /// Train the feature net and codebooks.
    Train(TrainArgs),
    /// Encode the database into PQ indexes.
    BuildIndex,
    /// Rank the database for every query and report mAP.
    Query(QueryArgs),
    /// Craft adversarial queries.
    Attack(AttackArgs),
    /// White-box mAP table and PR curves.
    Eval,
    /// Attack one code length, evaluate on the others.
    TransferBits,
    /// Train several nets and evaluate attacks crafted on each against every other.
    TransferModels,
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Minimum distance between class means in units of sigma.
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Number of query records.
    #[arg(long)]
    pub queries: Option<usize>,
    /// `fvecs` or `csv`.
    #[arg(long)]
    pub format: Option<String>,
    /// Sample queries uniformly instead of per class.
    #[arg(long)]
    pub no_stratify: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct QueryArgs {
    /// Query file; defaults to the clean query set.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub top_n: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct AttackArgs {
    /// Attack loss(es); repeat for several. Defaults to the manifest list.
    #[arg(long = "loss")]
    pub losses: Vec<String>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

/// A failure with a fixed exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Numeric(String),
    Missing(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Numeric(m) => write!(f, "numeric failure: {m}"),
            Failure::Missing(m) => write!(f, "missing or stale artifact: {m}"),
        }
    }
}

impl std::error::Error for Failure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Usage(_) => 2,
                Failure::Numeric(_) => 3,
                Failure::Missing(_) => 4,
            };
        }
        if let Some(e) = cause.downcast_ref::<pqlab::Error>() {
            return match e {
                pqlab::Error::Numeric(_) | pqlab::Error::NonFinite(_) => 3,
                pqlab::Error::InvalidArgument(_) | pqlab::Error::Infeasible(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut ctx = commands::Context::resolve(&cli.global)?;
    if let Some(n) = ctx.manifest.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("--threads {n}: {e}")))?;
    }
    match cli.command {
        Command::GenData(args) => commands::gen_data(&mut ctx, &args),
        Command::Train(args) => commands::train(&mut ctx, &args),
        Command::BuildIndex => commands::build_index(&ctx),
        Command::Query(args) => commands::query(&ctx, &args),
        Command::Attack(args) => commands::attack(&mut ctx, &args),
        Command::Eval => commands::eval(&ctx),
        Command::TransferBits => commands::transfer_bits(&ctx),
        Command::TransferModels => commands::transfer_models(&ctx),
    }
}

impl commands::Context {
    fn resolve(global: &GlobalArgs) -> anyhow::Result<Self> {
        let manifest_path = match (&global.manifest, &global.out) {
            (Some(p), _) => Some(p.clone()),
            (None, Some(out)) if out.join("manifest.toml").is_file() => Some(out.join("manifest.toml")),
            _ => None,
        };
        let mut manifest = match &manifest_path {
            Some(p) => Manifest::load(p)?,
            None => Manifest::default(),
        };
        if let Some(s) = global.seed {
            manifest.seed = s;
        }
        if let Some(t) = global.threads {
            manifest.threads = Some(t);
        }
        if let Some(o) = &global.out {
            manifest.out = Some(o.clone());
        }
        let out = manifest
            .out
            .clone()
            .ok_or_else(|| Failure::Usage("no output directory: pass --out or set `out` in the manifest".into()))?;
        Ok(commands::Context { manifest, out })
    }
}
