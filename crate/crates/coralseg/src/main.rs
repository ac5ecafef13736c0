//! Command-line front end: dataset generation, training, evaluation, and the
//! component ablation grid.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use coralseg::config::RunConfig;
use coralseg::data::{self, GeneratorParams};
use coralseg::model::DualModelState;
use coralseg::trainer;

#[derive(Parser)]
#[command(
    name = "coralseg",
    about = "Dual-branch semi-supervised segmentation on a synthetic 2D task",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (PGM images/masks plus a JSON manifest)
    Generate(ConfigArgs),
    /// Run the training loop; writes a checkpoint and a loss-curve CSV
    Train(ConfigArgs),
    /// Evaluate a checkpoint on the test split; writes a metrics CSV
    Eval(EvalArgs),
    /// Train the {baseline, +CCM, +DFP, +both} grid and write one row each
    Ablate(ConfigArgs),
}

/// Flags mirror the run-config fields; a JSON config file may set any field,
/// with flags taking precedence.
#[derive(Args)]
struct ConfigArgs {
    /// JSON config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Size profile: "toy" (default) or "paper" (c'=64, j=256, i=12800)
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Output directory for checkpoints and CSVs
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Number of samples to generate
    #[arg(long)]
    count: Option<usize>,
    /// Image side length
    #[arg(long)]
    size: Option<usize>,
    /// Generator difficulty in [0, 1]
    #[arg(long)]
    difficulty: Option<f64>,
    /// Fraction of training samples that keep labels
    #[arg(long)]
    labeled_fraction: Option<f64>,
    /// Crop side length for training batches
    #[arg(long)]
    crop: Option<usize>,
    /// Hidden channels per conv layer
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    /// Projection width c'
    #[arg(long)]
    proj_dim: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Training iterations t_max
    #[arg(long)]
    iters: Option<usize>,
    /// Base weight of the cross-pseudo-supervision term
    #[arg(long)]
    lambda_c: Option<f64>,
    /// Base weight of the consistency term
    #[arg(long)]
    lambda_d: Option<f64>,
    /// Ramp ceiling scale
    #[arg(long)]
    beta: Option<f64>,
    /// Pool slots per labeled instance
    #[arg(long)]
    pool_slots: Option<usize>,
    /// Pool fusion weight
    #[arg(long)]
    alpha: Option<f64>,
    /// Anchors drawn per class (j)
    #[arg(long)]
    anchors_per_class: Option<usize>,
    /// Unlabeled features kept per class (i)
    #[arg(long)]
    top_per_class: Option<usize>,
    #[arg(long)]
    low_conf_fraction: Option<f64>,
    /// Enable the correlation-consistency module
    #[arg(long)]
    ccm_on: Option<bool>,
    /// Enable the dynamic feature pool
    #[arg(long)]
    dfp_on: Option<bool>,
    /// Consistency similarity: "coral" or "cosine"
    #[arg(long)]
    similarity: Option<String>,
    /// Labeled fractions for the ablation grid, comma separated
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Checkpoint to evaluate (default: <out_dir>/checkpoint.bin)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

/// Usage problems exit 1; runtime failures exit 2.
enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<coralseg::Error> for CliError {
    fn from(e: coralseg::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn resolve(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_json_file(path)
            .map_err(|e| CliError::Usage(format!("config file: {e}")))?,
        None => RunConfig::default(),
    };
    match args.profile.as_deref() {
        None | Some("toy") => {}
        Some("paper") => cfg = cfg.paper_profile(),
        Some(other) => {
            return Err(CliError::Usage(format!(
                "unknown profile '{other}' (expected toy or paper)"
            )))
        }
    }
    macro_rules! set {
        ($field:ident) => {
            if let Some(v) = &args.$field {
                cfg.$field = v.clone();
            }
        };
    }
    set!(seed);
    set!(data_dir);
    set!(out_dir);
    set!(count);
    set!(size);
    set!(difficulty);
    set!(labeled_fraction);
    set!(crop);
    set!(hidden);
    set!(classes);
    set!(proj_dim);
    set!(lr);
    set!(momentum);
    set!(weight_decay);
    set!(iters);
    set!(lambda_c);
    set!(lambda_d);
    set!(beta);
    set!(pool_slots);
    set!(alpha);
    set!(anchors_per_class);
    set!(top_per_class);
    set!(low_conf_fraction);
    set!(ccm_on);
    set!(dfp_on);
    if let Some(s) = &args.similarity {
        cfg.similarity = s
            .parse()
            .map_err(|e: coralseg::Error| CliError::Usage(e.to_string()))?;
    }
    if let Some(f) = &args.fractions {
        cfg.ablate_fractions = f.clone();
    }
    Ok(cfg)
}

fn cmd_generate(cfg: &RunConfig) -> Result<(), CliError> {
    let samples = data::generate_dataset(cfg.count, cfg.size, cfg.seed, cfg.difficulty)?;
    let params = GeneratorParams {
        count: cfg.count,
        size: cfg.size,
        seed: cfg.seed,
        difficulty: cfg.difficulty,
    };
    let manifest = data::write_dataset(
        &cfg.data_dir,
        &samples,
        &params,
        cfg.classes,
        cfg.labeled_fraction,
    )?;
    println!(
        "wrote {} samples ({} labeled of {} train) to {}",
        manifest.samples.len(),
        manifest.samples.iter().filter(|s| s.labeled).count(),
        manifest.samples.iter().filter(|s| s.role == "train").count(),
        cfg.data_dir.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    let manifest = data::read_manifest(&cfg.data_dir)?;
    let all_train = data::load_all_train(&cfg.data_dir, &manifest)?;
    let out = trainer::train(cfg, &all_train)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(coralseg::Error::from)?;
    trainer::write_loss_csv(&cfg.out_dir.join("loss_curve.csv"), &out.rows)?;
    out.state.save(&cfg.out_dir.join("checkpoint.bin"))?;
    if let Some(pool) = &out.pool {
        pool.save(&cfg.out_dir.join("pool.bin"))?;
    }
    let last = out.rows.last().expect("at least one iteration");
    println!(
        "trained {} iterations; final l_s={:.4} l_c={:.4} l_d={:.4} total={:.4}",
        out.rows.len(),
        last.l_s,
        last.l_c,
        last.l_d,
        last.total
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let checkpoint = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("checkpoint.bin"));
    let state = DualModelState::load(&checkpoint)?;
    let manifest = data::read_manifest(&cfg.data_dir)?;
    let test = data::load_test(&cfg.data_dir, &manifest)?;
    let (rows, mean) = trainer::evaluate(&state, &test)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(coralseg::Error::from)?;
    trainer::write_metrics_csv(&cfg.out_dir.join("metrics.csv"), &rows, &mean)?;
    println!(
        "evaluated {} samples: dice={:.4} jaccard={:.4} hd95={:.4} asd={:.4}",
        rows.len(),
        mean.dice,
        mean.jaccard,
        mean.hd95,
        mean.asd
    );
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig) -> Result<(), CliError> {
    let manifest = data::read_manifest(&cfg.data_dir)?;
    let all_train = data::load_all_train(&cfg.data_dir, &manifest)?;
    let test = data::load_test(&cfg.data_dir, &manifest)?;
    let cells = trainer::ablate(cfg, &all_train, &test)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(coralseg::Error::from)?;
    trainer::write_ablation_csv(&cfg.out_dir.join("ablation.csv"), &cells)?;
    for c in &cells {
        println!(
            "fraction={:.2} ccm={} dfp={} dice={:.4} jaccard={:.4} hd95={:.4} asd={:.4}",
            c.labeled_fraction,
            u8::from(c.ccm),
            u8::from(c.dfp),
            c.dice,
            c.jaccard,
            c.hd95,
            c.asd
        );
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Generate(args) => cmd_generate(&resolve(args)?),
        Command::Train(args) => cmd_train(&resolve(args)?),
        Command::Eval(args) => cmd_eval(args, &resolve(&args.cfg)?),
        Command::Ablate(args) => cmd_ablate(&resolve(args)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; everything else is a
            // usage error.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
