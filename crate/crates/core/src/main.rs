use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mmimpact::config::ExperimentConfig;
use mmimpact::error::ModelError;
use mmimpact::experiment::{self, RunOptions};
use mmimpact::policy::Policy;
use mmimpact::simulator::Strategy;
use mmimpact::verify::{self, PropertyReport};

#[derive(Parser)]
#[command(
    name = "mmimpact",
    version,
    about = "Option market making with price impact on the underlying"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Full training scale: 250 steps, 10 000 paths, 500 epochs.
    #[arg(long, global = true)]
    paper_scale: bool,
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Policy checkpoint to load, or to write after training.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a policy (checkpoint or untrained) and write trajectories.
    Simulate {
        #[arg(long)]
        paths: Option<usize>,
    },
    /// Train a policy and write its learning curve and checkpoint.
    Train,
    /// Run the property suites; exits with status 2 on any violation.
    Verify {
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 10_000)]
        paths: usize,
    },
    /// Run one of the shipped scenarios end to end.
    Experiment {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(experiment::SCENARIOS))]
        name: String,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    Arbitrage,
    Moments,
    All,
}

enum Failure {
    Model(ModelError),
    Properties(usize),
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure::Model(e)
    }
}

fn exit_code(e: &ModelError) -> u8 {
    match e {
        ModelError::Config(_) | ModelError::InvalidParameter(_) | ModelError::Usage(_) | ModelError::Domain(_) => 1,
        ModelError::SimulationFault { .. }
        | ModelError::TrainingAborted { .. }
        | ModelError::Io(_)
        | ModelError::LiquidityExceeded { .. }
        | ModelError::InfeasibleState(_) => 3,
    }
}

fn load_config(common: &Common, default: &str) -> Result<ExperimentConfig, ModelError> {
    let path = common
        .config
        .clone()
        .unwrap_or_else(|| Path::new("configs").join(format!("{default}.toml")));
    let mut cfg = ExperimentConfig::load(&path)?;
    if common.paper_scale {
        cfg = cfg.with_paper_scale();
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &ExperimentConfig) -> PathBuf {
    common
        .out_dir
        .clone()
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| Path::new("out").join(&cfg.name))
}

fn print_reports(reports: &[PropertyReport]) -> usize {
    for r in reports {
        println!("{}", r.line());
    }
    reports.iter().filter(|r| !r.passed()).count()
}

fn run(cli: Cli) -> Result<(), Failure> {
    let common = &cli.common;
    match cli.command {
        Command::Simulate { paths } => {
            let cfg = load_config(common, "baseline")?;
            let env = cfg.environment()?;
            let policy = match &common.checkpoint {
                Some(p) => Policy::load(p)?,
                None => cfg.initial_policy(&env),
            };
            let dir = out_dir(common, &cfg);
            let n = paths.unwrap_or(cfg.training.eval_paths);
            let eval = experiment::run_simulation(&cfg, &policy, n, experiment::eval_seed(cfg.seed), &dir)?;
            println!("{}", serde_json::to_string(&eval).unwrap_or_default());
        }
        Command::Train => {
            let cfg = load_config(common, "baseline")?;
            let dir = out_dir(common, &cfg);
            let ck = common.checkpoint.clone().unwrap_or_else(|| dir.join("policy.json"));
            let curve = experiment::run_training(&cfg, &dir, &ck)?;
            if let Some(last) = curve.0.last() {
                println!("{}", serde_json::to_string(last).unwrap_or_default());
            }
        }
        Command::Verify { suite, trials, paths } => {
            let cfg = load_config(common, "baseline")?;
            let env = cfg.environment()?;
            let seed = cfg.seed;
            let mut reports = Vec::new();
            if matches!(suite, Suite::Arbitrage | Suite::All) {
                let model = &env.underlying;
                reports.push(verify::check_instant_roundtrip(
                    &model.book,
                    model.impact.delta,
                    model.fee,
                    trials * 10,
                    seed,
                ));
                reports.push(verify::check_roundtrip_bound(&env, trials, seed)?);
                reports.push(verify::check_ttpm(&env, trials, seed)?);
                reports.push(verify::check_terminal_bound(&env, (trials / 10).max(1), seed, 10)?);
                let hedger = Strategy::Fixed {
                    bid_offset: 0.05,
                    ask_offset: 0.05,
                    gamma: -0.5,
                };
                reports.extend(verify::check_quote_positivity(&env, &hedger, paths, seed)?);
                let cases: Vec<(u64, f64)> = (0..100u64)
                    .map(|k| (seed.wrapping_add(k), (k as f64 - 50.0) * 1.0e4 + 0.125 * k as f64))
                    .collect();
                reports.push(verify::check_cash_additivity(&env, &hedger, &cases)?);
            }
            if matches!(suite, Suite::Moments | Suite::All) {
                reports.extend(verify::check_moment_bounds(&env, paths, seed)?);
            }
            if let Some(dir) = &common.out_dir {
                std::fs::create_dir_all(dir).map_err(|e| ModelError::Io(e.to_string()))?;
                let text: String = reports.iter().map(|r| r.line() + "\n").collect();
                std::fs::write(dir.join("verify.jsonl"), text).map_err(|e| ModelError::Io(e.to_string()))?;
            }
            let failed = print_reports(&reports);
            if failed > 0 {
                return Err(Failure::Properties(failed));
            }
        }
        Command::Experiment { name } => {
            let cfg = load_config(common, &name)?;
            let opts = RunOptions {
                out_dir: out_dir(common, &cfg),
                checkpoint: common.checkpoint.clone(),
            };
            let out = experiment::run_experiment(&cfg, &opts)?;
            println!("{}", serde_json::to_string(&out.summary).unwrap_or_default());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Properties(n)) => {
            eprintln!("{n} properties failed");
            ExitCode::from(2)
        }
        Err(Failure::Model(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
