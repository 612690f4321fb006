use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sparsenet::experiment::{
    generate_dataset, report_bounds, report_bounds_for_sweep, run_experiment, verify, write_aggregate_csv, write_trials_csv,
    write_verify_csv, ExperimentConfig,
};
use sparsenet::{ActivationKind, Network};

const EXIT_USAGE: u8 = 1;
const EXIT_VERIFY_FAILED: u8 = 2;
const EXIT_ALL_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "sparsenet", version, about = "l1-constrained sparse network experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; omitted fields take their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides `master_seed`.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Worker threads; defaults to all cores. Outputs do not depend on it.
    #[arg(long, value_name = "N")]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Teacher-student sweep: trials.csv, aggregate.csv and bounds.json.
    Run {
        #[command(flatten)]
        common: Common,
        /// Overrides `repeats`.
        #[arg(long, value_name = "N")]
        repeats: Option<usize>,
    },
    /// Closed-form bound report for every depth and n in the grid.
    Bounds {
        #[command(flatten)]
        common: Common,
        /// Trained network JSON used to estimate b0.
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
    },
    /// Finite-difference, bound-audit and integration-by-parts suites.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true, default_value_t = 1.0)]
        inject_grad_bound_scale: f64,
    },
    /// One synthetic dataset plus its teacher.
    Datagen {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "N")]
        n: usize,
        #[arg(long, value_name = "L", default_value_t = 2)]
        depth: usize,
        #[arg(long, default_value = "softplus")]
        activation: ActivationKind,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Verify(usize),
    AllDiverged(String),
}

impl From<sparsenet::Error> for Failure {
    fn from(e: sparsenet::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            ExperimentConfig::from_json(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    Ok(cfg)
}

fn setup(common: &Common) -> Result<(), Failure> {
    if let Some(jobs) = common.jobs {
        if jobs == 0 {
            return Err(Failure::Usage("--jobs must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    fs::create_dir_all(&common.out)?;
    Ok(())
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, Failure> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Usage(e.to_string()))?;
    fs::write(dir.join(name), text + "\n")?;
    Ok(())
}

fn run(common: Common, repeats: Option<usize>) -> Result<(), Failure> {
    let mut cfg = load_config(&common)?;
    if let Some(r) = repeats {
        cfg.repeats = r;
    }
    cfg.validate()?;
    setup(&common)?;
    let out = run_experiment(&cfg)?;
    write_trials_csv(&out.trials, create(&common.out, "trials.csv")?)?;
    write_aggregate_csv(&out.aggregates, create(&common.out, "aggregate.csv")?)?;
    write_json(&common.out, "config.json", &cfg)?;
    let diverged = out.fully_diverged_cells();
    if diverged.len() == out.aggregates.len() {
        return Err(Failure::AllDiverged("every trial diverged; no bound report written".into()));
    }
    let missing_depth = cfg.depths.iter().any(|&l| out.b0_estimate(l).is_none());
    if cfg.b0.is_some() || !missing_depth {
        write_json(&common.out, "bounds.json", &report_bounds_for_sweep(&cfg, &out)?)?;
    }
    let n_div = out.trials.iter().filter(|t| t.diverged).count();
    eprintln!("{} trials, {} diverged, written to {}", out.trials.len(), n_div, common.out.display());
    if !diverged.is_empty() {
        let cells: Vec<String> = diverged.iter().map(|(n, a, l)| format!("(n={n}, {a}, L={l})")).collect();
        return Err(Failure::AllDiverged(format!("all trials diverged in {}", cells.join(", "))));
    }
    Ok(())
}

fn bounds(common: Common, model: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = load_config(&common)?;
    setup(&common)?;
    let trained = match model {
        Some(path) => {
            let text = fs::read_to_string(&path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            Some(Network::from_json(&text)?)
        }
        None => None,
    };
    let entries = report_bounds(&cfg, trained.as_ref())?;
    write_json(&common.out, "bounds.json", &entries)?;
    Ok(())
}

fn verify_cmd(common: Common, scale: f64) -> Result<(), Failure> {
    let mut cfg = load_config(&common)?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Failure::Usage("grad bound scale must be positive".into()));
    }
    cfg.verify.grad_bound_scale = scale;
    setup(&common)?;
    let rows = verify(&cfg)?;
    write_verify_csv(&rows, create(&common.out, "verify.csv")?)?;
    let mut failed = 0;
    for r in &rows {
        if !r.passed() {
            failed += 1;
            eprintln!(
                "FAIL {} L={} d={}: {} of {} violated (worst ratio {:.3e})",
                r.suite, r.depth, r.input_dim, r.violations, r.trials, r.worst_ratio
            );
        }
    }
    eprintln!("{} suites, {} failed", rows.len(), failed);
    if failed > 0 {
        return Err(Failure::Verify(failed));
    }
    Ok(())
}

fn datagen(common: Common, n: usize, depth: usize, activation: ActivationKind) -> Result<(), Failure> {
    let cfg = load_config(&common)?;
    cfg.validate()?;
    if n == 0 {
        return Err(Failure::Usage("--n must be >= 1".into()));
    }
    setup(&common)?;
    let (teacher, data) = generate_dataset(&cfg, n, depth, activation)?;
    data.write_csv(create(&common.out, "dataset.csv")?)?;
    fs::write(common.out.join("teacher.json"), teacher.to_json()? + "\n")?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run { common, repeats } => run(common, repeats),
        Command::Bounds { common, model } => bounds(common, model),
        Command::Verify { common, inject_grad_bound_scale } => verify_cmd(common, inject_grad_bound_scale),
        Command::Datagen { common, n, depth, activation } => datagen(common, n, depth, activation),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Verify(n)) => {
            eprintln!("verification failed in {n} suite(s)");
            ExitCode::from(EXIT_VERIFY_FAILED)
        }
        Err(Failure::AllDiverged(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_ALL_DIVERGED)
        }
    }
}
