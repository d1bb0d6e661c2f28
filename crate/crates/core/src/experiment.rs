//! Experiment orchestration: train (or load) a policy, evaluate it, and write
//! CSV tables, a JSON summary, a checkpoint and SVG charts.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::charts;
use crate::config::ExperimentConfig;
use crate::error::{ModelError, Result};
use crate::policy::Policy;
use crate::simulator::{
    io_err, simulate_batch, summarize, train, Environment, LearningCurve, ObjectiveEstimate, PathOutput, Strategy,
    Trajectory,
};

pub const SCENARIOS: [&str; 4] = ["baseline", "neg_inventory", "shifted_intensities", "low_liquidity"];

const EVAL_STREAM: u64 = 0xE7A1_0000_0000_0001;

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Load this checkpoint instead of training when it exists.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InventoryStats {
    /// Time average over the grid of `|E[I_t]|`.
    pub time_avg_abs_mean: f64,
    /// Time average over the grid of `E[|I_t|]`.
    pub time_avg_mean_abs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub objective: ObjectiveEstimate,
    pub inventory: InventoryStats,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainingSummary {
    pub trained: bool,
    pub epochs: usize,
    pub paths: usize,
    pub lr: f64,
    pub smoothed_first: Option<[f64; 3]>,
    pub smoothed_last: Option<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    pub steps: usize,
    pub sigma_eff: f64,
    pub reference_price: f64,
    pub reference_delta: f64,
    pub training: TrainingSummary,
    pub trained: Evaluation,
    pub untrained: Evaluation,
    pub files: Vec<String>,
}

pub struct ExperimentOutput {
    pub summary: Summary,
    pub policy: Policy,
    pub curve: LearningCurve,
}

pub fn inventory_stats(outs: &[PathOutput<f64>]) -> InventoryStats {
    let Some(first) = outs.first() else {
        return InventoryStats {
            time_avg_abs_mean: 0.0,
            time_avg_mean_abs: 0.0,
        };
    };
    let m = outs.len() as f64;
    let points = first.trajectory.states.len();
    let (mut abs_mean, mut mean_abs) = (0.0, 0.0);
    for k in 0..points {
        let mean = outs.iter().map(|o| o.trajectory.states[k].i).sum::<f64>() / m;
        abs_mean += mean.abs();
        mean_abs += outs.iter().map(|o| o.trajectory.states[k].i.abs()).sum::<f64>() / m;
    }
    InventoryStats {
        time_avg_abs_mean: abs_mean / points as f64,
        time_avg_mean_abs: mean_abs / points as f64,
    }
}

pub fn eval_seed(seed: u64) -> u64 {
    seed ^ EVAL_STREAM
}

pub fn evaluate(
    env: &Environment,
    strategy: &Strategy,
    paths: usize,
    seed: u64,
) -> Result<(Evaluation, Vec<PathOutput<f64>>)> {
    if paths == 0 {
        return Err(ModelError::InvalidParameter(
            "evaluation needs at least one path".into(),
        ));
    }
    let outs = simulate_batch(env, strategy, paths, seed)?;
    let eval = Evaluation {
        objective: summarize(env.init.x, &outs),
        inventory: inventory_stats(&outs),
    };
    Ok((eval, outs))
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

pub const MEAN_TRAJECTORY_HEADER: [&str; 11] = [
    "t",
    "p",
    "s",
    "reference",
    "beta",
    "alpha",
    "i",
    "q",
    "x",
    "pnl",
    "abs_i",
];

/// Cross-path averages on the grid. The P&L marks the hedge at the mid and
/// the options at the reference price.
pub fn write_mean_trajectory(outs: &[PathOutput<f64>], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(io_err(path))?;
    w.write_record(MEAN_TRAJECTORY_HEADER).map_err(io_err(path))?;
    if let Some(first) = outs.first() {
        let m = outs.len() as f64;
        let n = first.trajectory.steps.len();
        for k in 0..=n {
            let avg = |f: &dyn Fn(&Trajectory) -> f64| outs.iter().map(|o| f(&o.trajectory)).sum::<f64>() / m;
            let reference = |tr: &Trajectory| tr.steps.get(k).map_or(tr.terminal_reference, |r| r.reference);
            let step = |f: fn(&crate::simulator::StepRecord) -> f64| {
                if k < n {
                    avg(&|tr| f(&tr.steps[k]))
                } else {
                    f64::NAN
                }
            };
            let row = [
                first.trajectory.states[k].t,
                avg(&|tr| tr.states[k].p),
                avg(&|tr| tr.states[k].s),
                avg(&reference),
                step(|r| r.beta),
                step(|r| r.alpha),
                avg(&|tr| tr.states[k].i),
                avg(&|tr| tr.states[k].q),
                avg(&|tr| tr.states[k].x),
                avg(&|tr| {
                    let s = &tr.states[k];
                    s.x - tr.x0 + s.q * s.p + s.i * reference(tr)
                }),
                avg(&|tr| tr.states[k].i.abs()),
            ];
            w.write_record(row.map(num)).map_err(io_err(path))?;
        }
    }
    w.flush().map_err(|e| io_err(path)(e.into()))?;
    Ok(())
}

/// The first paths in full, prefixed by a path index.
pub fn write_sample_paths(outs: &[PathOutput<f64>], count: usize, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(io_err(path))?;
    let mut header = vec!["path"];
    header.extend(Trajectory::CSV_HEADER);
    w.write_record(&header).map_err(io_err(path))?;
    for (idx, o) in outs.iter().take(count).enumerate() {
        for mut row in o.trajectory.csv_rows() {
            row.insert(0, idx.to_string());
            w.write_record(&row).map_err(io_err(path))?;
        }
    }
    w.flush().map_err(|e| io_err(path)(e.into()))?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| ModelError::Io(format!("cannot create {}: {e}", dir.display())))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| ModelError::Io(e.to_string()))? + "\n";
    std::fs::write(path, text).map_err(|e| ModelError::Io(format!("cannot write {}: {e}", path.display())))
}

fn smoothed_point(curve: &LearningCurve, idx: usize) -> Option<[f64; 3]> {
    if curve.0.is_empty() {
        return None;
    }
    let r = curve.smoothed(5, |m| m.ret);
    let h = curve.smoothed(5, |m| m.hedge_penalty);
    let a = curve.smoothed(5, |m| m.activity_penalty);
    let k = idx.min(r.len() - 1);
    Some([r[k], h[k], a[k]])
}

/// Trains (or loads) the policy, evaluates trained and untrained policies on
/// common random numbers, and writes every artifact into `opts.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentOutput> {
    let env = cfg.environment()?;
    ensure_dir(&opts.out_dir)?;
    let fresh = cfg.initial_policy(&env);

    let loaded = match &opts.checkpoint {
        Some(p) if p.exists() => Some(Policy::load(p)?),
        _ => None,
    };
    let trained_here = loaded.is_none();
    let (policy, curve) = match loaded {
        Some(p) => (p, LearningCurve::default()),
        None => train(&env, fresh.clone(), &cfg.train_config())?,
    };

    let mut files = Vec::new();
    let dir = &opts.out_dir;
    let mut record = |name: &str| files.push(name.to_string());

    policy.save(&dir.join("policy.json"))?;
    record("policy.json");
    if let Some(p) = &opts.checkpoint {
        if trained_here {
            policy.save(p)?;
        }
    }
    curve.write_csv(&dir.join("learning_curve.csv"))?;
    record("learning_curve.csv");

    let seed = eval_seed(cfg.seed);
    let paths = cfg.training.eval_paths;
    let (trained, outs) = evaluate(&env, &Strategy::Network(policy.clone()), paths, seed)?;
    write_mean_trajectory(&outs, &dir.join("mean_trajectory.csv"))?;
    record("mean_trajectory.csv");
    write_sample_paths(&outs, cfg.training.sample_paths, &dir.join("sample_paths.csv"))?;
    record("sample_paths.csv");
    drop(outs);
    let (untrained, base_outs) = evaluate(&env, &Strategy::Network(fresh), paths, seed)?;
    write_mean_trajectory(&base_outs, &dir.join("mean_trajectory_untrained.csv"))?;
    record("mean_trajectory_untrained.csv");
    drop(base_outs);

    for p in charts::emit_charts(dir)? {
        if let Some(name) = p.file_name().and_then(|n| n.to_str()) {
            record(name);
        }
    }
    record("summary.json");

    let r0 = env.pricer().evaluate(0.0, &env.init.market);
    let summary = Summary {
        experiment: cfg.name.clone(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        steps: env.grid.steps,
        sigma_eff: r0.sigma,
        reference_price: r0.price,
        reference_delta: r0.delta,
        training: TrainingSummary {
            trained: trained_here,
            epochs: cfg.training.epochs,
            paths: cfg.training.paths,
            lr: cfg.training.lr,
            smoothed_first: smoothed_point(&curve, 0),
            smoothed_last: smoothed_point(&curve, usize::MAX),
        },
        trained,
        untrained,
        files,
    };
    write_json(&summary, &dir.join("summary.json"))?;
    Ok(ExperimentOutput { summary, policy, curve })
}

/// Evaluates a policy without training and writes trajectory tables.
pub fn run_simulation(
    cfg: &ExperimentConfig,
    policy: &Policy,
    paths: usize,
    seed: u64,
    dir: &Path,
) -> Result<Evaluation> {
    let env = cfg.environment()?;
    ensure_dir(dir)?;
    let (eval, outs) = evaluate(&env, &Strategy::Network(policy.clone()), paths, seed)?;
    write_mean_trajectory(&outs, &dir.join("mean_trajectory.csv"))?;
    write_sample_paths(&outs, cfg.training.sample_paths, &dir.join("sample_paths.csv"))?;
    write_json(&eval, &dir.join("simulation.json"))?;
    Ok(eval)
}

/// Trains a policy and writes the learning curve and checkpoint.
pub fn run_training(cfg: &ExperimentConfig, dir: &Path, checkpoint: &Path) -> Result<LearningCurve> {
    let env = cfg.environment()?;
    ensure_dir(dir)?;
    let (policy, curve) = train(&env, cfg.initial_policy(&env), &cfg.train_config())?;
    curve.write_csv(&dir.join("learning_curve.csv"))?;
    policy.save(checkpoint)?;
    Ok(curve)
}
