//! Experiment configuration: one TOML file per experiment.
//!
//! ```toml
//! name = "baseline"
//! seed = 7
//!
//! [grid]
//! steps = 50
//!
//! [book.bid]            # either a linear side ...
//! density = 100.0
//! cutoff = 0.5
//! [book.ask]            # ... or explicit pieces [u_start, u_end, density]
//! segments = [[0.0, 0.5, 100.0]]
//!
//! [impact]   eta, r, rho, delta, fee
//! [hawkes.bid] / [hawkes.ask]   mu, theta, kappa
//! [marks.bid] / [marks.ask]     a, b  (Beta) or fixed
//! [option]   strike, maturity
//! [flow.bid] / [flow.ask]       lambda_bar, k, mu
//! [penalty]  kappa_hedge, theta_flow, kappa_act
//! [initial]  p, d, s, lambda_bid, lambda_ask, i, q, x
//! [training] paths, epochs, lr, beta1, beta2, eps, hidden, eval_paths, sample_paths
//! [paper_scale] steps, paths, epochs
//! ```
//!
//! Bid segments live on the price axis `u <= 0`, ask segments on `u >= 0`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{ImpactParams, MarketState, UnderlyingModel};
use crate::error::{ModelError, Result};
use crate::flows::{HawkesParams, MarkDistribution, OptionIntensityParams, SigmoidIntensity};
use crate::orderbook::{OrderBookShape, Segment};
use crate::policy::{ActionScales, Policy};
use crate::simulator::{Environment, GridSpec, InitialState, TrainConfig};
use crate::valuation::{OptionSpec, PenaltyParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<String>,
    pub grid: GridConfig,
    pub book: Sides<BookSideConfig>,
    pub impact: ImpactConfig,
    pub hawkes: Sides<HawkesParams>,
    pub marks: Sides<MarkDistribution>,
    pub option: OptionSpec,
    pub flow: Sides<SigmoidIntensity>,
    pub penalty: PenaltyParams,
    pub initial: InitialConfig,
    pub training: TrainingConfig,
    #[serde(default)]
    pub paper_scale: PaperScale,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sides<T> {
    pub bid: T,
    pub ask: T,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BookSideConfig {
    pub density: Option<f64>,
    pub cutoff: Option<f64>,
    pub segments: Option<Vec<[f64; 3]>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpactConfig {
    pub eta: f64,
    pub r: f64,
    pub rho: f64,
    pub delta: f64,
    #[serde(default)]
    pub fee: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub p: f64,
    #[serde(default)]
    pub d: f64,
    pub s: f64,
    pub lambda_bid: f64,
    pub lambda_ask: f64,
    #[serde(default)]
    pub i: f64,
    #[serde(default)]
    pub q: f64,
    #[serde(default)]
    pub x: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub paths: usize,
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub hidden: Vec<usize>,
    pub eval_paths: usize,
    #[serde(default = "default_sample_paths")]
    pub sample_paths: usize,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_sample_paths() -> usize {
    5
}

/// Overrides applied by `--paper-scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaperScale {
    pub steps: usize,
    pub paths: usize,
    pub epochs: usize,
}

impl Default for PaperScale {
    fn default() -> Self {
        PaperScale {
            steps: 250,
            paths: 10_000,
            epochs: 500,
        }
    }
}

impl BookSideConfig {
    /// Pieces on the price axis; `bid` flips the sign of a linear side.
    fn segments(&self, bid: bool) -> std::result::Result<Vec<Segment>, String> {
        match (self.density, self.cutoff, &self.segments) {
            (Some(c), Some(u), None) => {
                if !(c > 0.0 && u > 0.0) {
                    return Err(format!("linear side needs density > 0 and cutoff > 0, got {c}, {u}"));
                }
                let (start, end) = if bid { (-u, 0.0) } else { (0.0, u) };
                Ok(vec![Segment { start, end, density: c }])
            }
            (None, None, Some(segs)) => Ok(segs
                .iter()
                .map(|&[start, end, density]| Segment { start, end, density })
                .collect()),
            _ => Err("a book side takes either density and cutoff, or segments".into()),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ModelError::Config(vec![e.to_string()]))?;
        cfg.environment()?;
        cfg.check_training()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ModelError::Config(vec![format!("{}: {e}", path.display())]))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canon);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn with_paper_scale(mut self) -> Self {
        self.grid.steps = self.paper_scale.steps;
        self.training.paths = self.paper_scale.paths;
        self.training.epochs = self.paper_scale.epochs;
        self
    }

    fn check_training(&self) -> Result<()> {
        let t = &self.training;
        let mut problems = Vec::new();
        if t.paths == 0 || t.eval_paths == 0 {
            problems.push("training.paths and training.eval_paths must be positive".into());
        }
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            problems.push(format!("training.lr must be finite and >= 0, got {}", t.lr));
        }
        if !((0.0..1.0).contains(&t.beta1) && (0.0..1.0).contains(&t.beta2) && t.eps > 0.0) {
            problems.push("adam needs beta1, beta2 in [0,1) and eps > 0".into());
        }
        if t.hidden.contains(&0) {
            problems.push("hidden layer widths must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Config(problems))
        }
    }

    /// Builds the environment, reporting every violated gate at once.
    pub fn environment(&self) -> Result<Environment> {
        let mut problems: Vec<String> = Vec::new();
        let mut gate = |label: &str, r: Result<()>| {
            if let Err(e) = r {
                problems.push(format!("{label}: {e}"));
            }
        };

        let bid = self.book.bid.segments(true);
        let ask = self.book.ask.segments(false);
        let book = match (bid, ask) {
            (Ok(b), Ok(a)) => match OrderBookShape::from_segments(&b, &a) {
                Ok(book) => Some(book),
                Err(e) => {
                    gate("book", Err(e));
                    None
                }
            },
            (b, a) => {
                for e in [b.err(), a.err()].into_iter().flatten() {
                    gate("book", Err(ModelError::InvalidParameter(e)));
                }
                None
            }
        };

        let impact = ImpactParams {
            eta: self.impact.eta,
            r: self.impact.r,
            rho: self.impact.rho,
            delta: self.impact.delta,
        };
        gate("impact", impact.validate());
        if !(self.impact.fee >= 0.0) {
            gate(
                "impact.fee",
                Err(ModelError::InvalidParameter("fee must be >= 0".into())),
            );
        }
        gate("hawkes.bid (subcriticality)", self.hawkes.bid.validate());
        gate("hawkes.ask (subcriticality)", self.hawkes.ask.validate());
        gate("marks.bid", self.marks.bid.validate());
        gate("marks.ask", self.marks.ask.validate());
        gate("option", self.option.validate());
        let flow = OptionIntensityParams {
            bid: self.flow.bid,
            ask: self.flow.ask,
        };
        gate("flow", flow.validate());
        gate("penalty", self.penalty.validate());
        let grid = GridSpec {
            maturity: self.option.maturity,
            steps: self.grid.steps,
        };
        gate("grid", grid.validate());

        let market = MarketState {
            p: self.initial.p,
            d: self.initial.d,
            s: self.initial.s,
            lambda_bid: self.initial.lambda_bid,
            lambda_ask: self.initial.lambda_ask,
        };
        let init = InitialState {
            market,
            x: self.initial.x,
            q: self.initial.q,
            i: self.initial.i,
        };
        if !(market.p > 0.0) {
            gate(
                "initial.p",
                Err(ModelError::InvalidParameter("initial mid must be > 0".into())),
            );
        }
        if market.best_bid() < market.d {
            gate(
                "initial (quote positivity hypothesis)",
                Err(ModelError::InvalidParameter(format!(
                    "best bid {} is below the impact {}",
                    market.best_bid(),
                    market.d
                ))),
            );
        }

        let Some(book) = book else {
            return Err(ModelError::Config(problems));
        };
        let underlying = UnderlyingModel {
            book,
            impact,
            hawkes_bid: self.hawkes.bid,
            hawkes_ask: self.hawkes.ask,
            marks_bid: self.marks.bid,
            marks_ask: self.marks.ask,
            fee: self.impact.fee,
        };
        if impact.validate().is_ok() {
            gate("initial", underlying.validate_initial(&market));
        }
        if !problems.is_empty() {
            problems.dedup();
            return Err(ModelError::Config(problems));
        }
        Environment::new(underlying, self.option, flow, self.penalty, grid, init)
            .map_err(|e| ModelError::Config(vec![e.to_string()]))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.training.epochs,
            paths: self.training.paths,
            lr: self.training.lr,
            beta1: self.training.beta1,
            beta2: self.training.beta2,
            eps: self.training.eps,
            seed: self.seed,
        }
    }

    /// Freshly initialized policy for this experiment.
    pub fn initial_policy(&self, env: &Environment) -> Policy {
        Policy::new(
            &self.training.hidden,
            env.normalizer(),
            ActionScales::default(),
            self.seed,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn configs_dir() -> std::path::PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
    }

    fn baseline() -> ExperimentConfig {
        ExperimentConfig::load(&configs_dir().join("baseline.toml")).unwrap()
    }

    #[test]
    fn shipped_baseline_loads_table_values() {
        let c = baseline();
        assert_eq!(c.initial.p, 100.0);
        assert_eq!(c.initial.s, 0.10);
        assert_eq!(c.impact.delta, 0.02);
        assert_eq!(c.book.bid.cutoff, Some(0.5));
        assert_eq!(c.book.ask.density, Some(100.0));
        assert_eq!(c.hawkes.bid.mu, 7560.0);
        assert_eq!(c.marks.ask, MarkDistribution::Beta { a: 2.0, b: 5.0 });
        assert_eq!(c.impact.eta, 0.3);
        assert_eq!(c.impact.r, 15_120.0);
        assert_eq!(c.impact.rho, 50_400.0);
        assert!((c.option.maturity - 25.0 / 252.0).abs() < 1e-15);
        assert_eq!(c.option.strike, 98.0);
        assert_eq!(c.flow.bid.lambda_bar, 50_400.0);
        assert_eq!(c.flow.ask.k, 50.0);
        assert_eq!(c.penalty.kappa_hedge, 4.0);
        assert_eq!(c.penalty.theta_flow, 0.05);
        assert_eq!(c.penalty.kappa_act, 0.1);
        assert_eq!(c.grid.steps, 50);
        let p = c.clone().with_paper_scale();
        assert_eq!((p.grid.steps, p.training.paths, p.training.epochs), (250, 10_000, 500));
    }

    #[test]
    fn scenario_configs_differ_from_baseline_as_described() {
        let b = baseline();
        let load = |n: &str| ExperimentConfig::load(&configs_dir().join(format!("{n}.toml"))).unwrap();
        let mut neg = load("neg_inventory");
        assert_eq!(neg.initial.i, -100.0);
        neg.initial.i = 0.0;
        neg.name = b.name.clone();
        assert_eq!(neg, b);

        let sh = load("shifted_intensities");
        assert_eq!((sh.flow.bid.mu, sh.flow.ask.mu), (1.5, -0.5));
        assert!((sh.flow.ask.lambda_bar - 0.8 * 50_400.0).abs() < 1e-9);

        let low = load("low_liquidity");
        assert_eq!(low.book.bid.density, Some(2.5));
        assert_eq!(low.book.ask.cutoff, Some(2.0));
        assert_eq!(low.initial.i, -100.0);
    }

    #[test]
    fn gates_reject_supercritical_and_crossed_states() {
        let mut c = baseline();
        c.hawkes.bid = HawkesParams {
            mu: 10.0,
            theta: 1.0,
            kappa: 1.0,
        };
        c.initial.d = 500.0;
        let err = c.environment().unwrap_err();
        let ModelError::Config(list) = err else { panic!() };
        assert!(list.iter().any(|m| m.contains("subcritical")), "{list:?}");
        assert!(list.iter().any(|m| m.contains("quote positivity")), "{list:?}");
    }

    #[test]
    fn parse_errors_and_unknown_keys_are_reported() {
        assert!(matches!(
            ExperimentConfig::from_toml("name = ").unwrap_err(),
            ModelError::Config(_)
        ));
        let text = baseline().to_toml() + "\nbogus = 1\n";
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = baseline();
        let b = ExperimentConfig::from_toml(&a.to_toml()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let mut c = a.clone();
        c.seed += 1;
        assert_ne!(a.hash(), c.hash());
    }
}
