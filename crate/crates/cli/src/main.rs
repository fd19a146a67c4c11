//! Command-line front end for the transfer-risk pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use transfer_risk::activations::load_amat;
use transfer_risk::pipeline::{self, RunConfig};
use transfer_risk::similarity::{cka, kernel_from_str, similarity_csv_string, Estimator};
use transfer_risk::Error;

#[derive(Parser)]
#[command(name = "transfer-risk", version, about = "Similarity-guided surrogate selection and transfer-attack risk estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Run configuration file (flat key = value).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// M1 threshold; overrides `selection.r1`.
    #[arg(long)]
    r1: Option<f64>,
    /// M2 threshold; overrides `selection.r2`.
    #[arg(long)]
    r2: Option<f64>,
    /// Minimum |M1| + |M2|; overrides `selection.min_total`.
    #[arg(long)]
    min_total: Option<usize>,
    /// Keep only these configured attacks (comma separated names).
    #[arg(long, value_delimiter = ',')]
    attack: Vec<String>,
    /// Perturbation budget for every kept attack.
    #[arg(long)]
    eps: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage in order.
    Run(RunArgs),
    /// Train the target and surrogates.
    TrainZoo(RunArgs),
    /// Draw the probe set and capture activations.
    Capture(RunArgs),
    /// Layer-pair and whole-model CKA. With two AMAT files, prints one CSV row.
    Similarity {
        #[command(flatten)]
        files: SimilarityFiles,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the M1 and M2 pools.
    Select(RunArgs),
    /// Craft adversarial batches on pool members.
    Attack(RunArgs),
    /// Measure transfer to the target.
    Evaluate(RunArgs),
    /// Fit the risk curve and write the report.
    Report(RunArgs),
}

#[derive(Args)]
struct SimilarityFiles {
    /// First activation matrix (AMAT).
    a: Option<PathBuf>,
    /// Second activation matrix (AMAT).
    b: Option<PathBuf>,
    /// Kernel: linear, rbf or rbf:<sigma>.
    #[arg(long, default_value = "linear")]
    kernel: String,
    /// HSIC estimator: biased or unbiased.
    #[arg(long, default_value = "biased")]
    estimator: String,
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) | Error::Policy(_) | Error::Shape(_) | Error::Format { .. } => 2,
        Error::InsufficientPool { .. } | Error::InsufficientTotal { .. } => 3,
        Error::Numerical(_)
        | Error::Training { .. }
        | Error::Degenerate(_)
        | Error::RankDeficient(_)
        | Error::InsufficientData(_)
        | Error::Instability { .. } => 4,
        Error::MissingDependency(_) | Error::IncompleteCoverage(_) => 5,
        _ => 1,
    }
}

fn load_config(args: &RunArgs) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.master_seed = s;
    }
    if let Some(o) = &args.out {
        cfg.out = o.clone();
    }
    if args.r1.is_some() {
        cfg.r1 = args.r1;
    }
    if args.r2.is_some() {
        cfg.r2 = args.r2;
    }
    if let Some(m) = args.min_total {
        cfg.min_total = m;
    }
    if !args.attack.is_empty() {
        for name in &args.attack {
            if !cfg.attacks.iter().any(|a| &a.name == name) {
                return Err(Error::Config(format!("no attack named '{name}' in the config")));
            }
        }
        cfg.attacks.retain(|a| args.attack.contains(&a.name));
    }
    if let Some(eps) = args.eps {
        for a in &mut cfg.attacks {
            a.config.epsilon = eps;
        }
    }
    for w in cfg.validate()? {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

fn similarity_pair(files: &SimilarityFiles) -> Result<(), Error> {
    let (Some(a), Some(b)) = (&files.a, &files.b) else {
        return Err(Error::Config("give two AMAT files or --config".into()));
    };
    let kernel = kernel_from_str(&files.kernel)?;
    let estimator: Estimator = files.estimator.parse()?;
    let record = cka(&load_amat(a)?, &load_amat(b)?, kernel.as_ref(), estimator)?;
    print!("{}", similarity_csv_string(&[record])?);
    Ok(())
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Run(args) => {
            let cfg = load_config(&args)?;
            let report = pipeline::run(&cfg)?;
            print!("{}", report.summary_text());
            println!("wrote {}", pipeline::Layout::new(&cfg.out).report_json().display());
        }
        Command::TrainZoo(args) => {
            let models = pipeline::train_zoo(&load_config(&args)?)?;
            for m in models {
                println!(
                    "{:<16} train {:.3}  test {:.3}",
                    m.id(),
                    m.meta().train_accuracy,
                    m.meta().test_accuracy
                );
            }
        }
        Command::Capture(args) => pipeline::capture_stage(&load_config(&args)?)?,
        Command::Similarity {
            files,
            config,
            seed,
            out,
        } => match config {
            Some(config) => {
                let args = RunArgs {
                    config,
                    seed,
                    out,
                    r1: None,
                    r2: None,
                    min_total: None,
                    attack: Vec::new(),
                    eps: None,
                };
                pipeline::similarity_stage(&load_config(&args)?)?;
            }
            None => similarity_pair(&files)?,
        },
        Command::Select(args) => {
            let pools = pipeline::select_stage(&load_config(&args)?)?;
            print!("{}", transfer_risk::selection::pools_text(&pools));
        }
        Command::Attack(args) => pipeline::attack_stage(&load_config(&args)?)?,
        Command::Evaluate(args) => {
            for r in pipeline::evaluate_stage(&load_config(&args)?)? {
                println!(
                    "{:<16} {:<40} transfer {:.3}",
                    r.surrogate, r.attack.to_string(), r.transfer_restricted
                );
            }
        }
        Command::Report(args) => {
            let report = pipeline::report_stage(&load_config(&args)?)?;
            print!("{}", report.summary_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
