use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use fedapc::data::parse_idx;
use fedapc::federation::TransportKind;
use fedapc::gradcheck::{run_suite, LossKind, TOLERANCE};
use fedapc::harness::{run_ablation, run_experiment, ExperimentConfig, HarnessError, Method, Summary};

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Federated prototype-contrastive learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv and summary.json.
    Run(RunArgs),
    /// Run the config with and without augmentation and print the delta.
    Ablate(RunArgs),
    /// Finite-difference check of every loss gradient.
    Gradcheck {
        /// Random configurations per loss.
        #[arg(long, default_value_t = 20)]
        cases: u64,
    },
    /// Print the header of an IDX file.
    InspectIdx { file: PathBuf },
    /// Print the built-in synthetic benchmark config as JSON.
    DefaultConfig {
        #[arg(long, default_value = "fedapc")]
        method: String,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON). Defaults to the built-in synthetic benchmark.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for metrics.csv, timings.csv, summary.json and config.json.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Replace the config's seed list, e.g. `--seed-override 4,5`.
    #[arg(long, value_delimiter = ',')]
    seed_override: Option<Vec<u64>>,
    /// Override the config's transport: `inproc` or `tcp`.
    #[arg(long)]
    transport: Option<TransportKind>,
    /// Only warnings and errors; no summary on stdout.
    #[arg(long)]
    quiet: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default_synthetic(Method::Fedapc),
        };
        if let Some(seeds) = &self.seed_override {
            config.seeds = seeds.clone();
        }
        if let Some(t) = self.transport {
            config.transport = t;
        }
        config.validate()?;
        Ok(config)
    }
}

fn init_logging(quiet: bool) {
    let default = if quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDSIM_LOG", default))
        .format_timestamp(None)
        .init();
}

fn print_summary(label: &str, s: &Summary) {
    let domains: Vec<String> = s.domains.iter().map(|d| format!("{}={:.4}", d.domain, d.accuracy)).collect();
    println!("{label}: average {:.4} [{}]", s.average, domains.join(" "));
}

fn run(args: &RunArgs) -> Result<(), HarnessError> {
    let config = args.resolve()?;
    let start = Instant::now();
    let result = run_experiment(&config, Some(&args.out_dir))?;
    if !args.quiet {
        print_summary(result.summary.method.as_str(), &result.summary);
        println!(
            "wrote {} ({:.1} s)",
            args.out_dir.join("metrics.csv").display(),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

fn ablate(args: &RunArgs) -> Result<(), HarnessError> {
    let config = args.resolve()?;
    let ab = run_ablation(&config, Some(&args.out_dir))?;
    print_summary("augmented", &ab.augmented.summary);
    print_summary("no_augmentation", &ab.plain.summary);
    println!("delta {:+.4}", ab.delta());
    Ok(())
}

fn gradcheck(cases: u64) -> Result<bool, String> {
    let start = Instant::now();
    let report = run_suite(cases).map_err(|e| e.to_string())?;
    for kind in LossKind::ALL {
        println!("{kind:<14} max_rel_error {:.3e}", report.worst(kind));
    }
    let ok = report.passed();
    println!(
        "{} ({} checks, tolerance {TOLERANCE:e}, {:.2} s)",
        if ok { "PASS" } else { "FAIL" },
        report.results.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(ok)
}

fn inspect_idx(file: &Path) -> Result<(), String> {
    let bytes = std::fs::read(file).map_err(|e| format!("{}: {e}", file.display()))?;
    let arr = parse_idx(&bytes).map_err(|e| format!("{}: {e}", file.display()))?;
    let dims: Vec<String> = arr.dims.iter().map(usize::to_string).collect();
    println!("magic 0x{:08x}", arr.magic);
    println!("count {}", arr.count());
    println!("dims {}", dims.join("x"));
    Ok(())
}

fn default_config(method: &str) -> Result<(), String> {
    let method: Method = serde_json::from_value(serde_json::Value::String(method.to_string()))
        .map_err(|_| format!("unknown method {method:?} (expected fedavg, fedproto or fedapc)"))?;
    let text = ExperimentConfig::default_synthetic(method).to_json();
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.to_string()),
        _ => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let quiet = matches!(&cli.command, Command::Run(a) | Command::Ablate(a) if a.quiet);
    init_logging(quiet);
    let outcome = match &cli.command {
        Command::Run(args) => run(args).map_err(|e| e.to_string()),
        Command::Ablate(args) => ablate(args).map_err(|e| e.to_string()),
        Command::Gradcheck { cases } => match gradcheck(*cases) {
            Ok(true) => Ok(()),
            Ok(false) => Err("gradient check failed".to_string()),
            Err(e) => Err(e),
        },
        Command::InspectIdx { file } => inspect_idx(file),
        Command::DefaultConfig { method } => default_config(method),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
