//! Order flow: self-exciting arrivals on the underlying and quote-driven
//! arrivals on the option.

use rand::Rng;
use rand_distr::{Beta, Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::ad::Real;
use crate::error::{ModelError, Result};

/// Exponential-kernel Hawkes intensity parameters for one side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HawkesParams {
    /// Baseline intensity (events/year).
    pub mu: f64,
    /// Mean-reversion rate (1/year).
    pub theta: f64,
    /// Jump of the intensity per event.
    #[serde(default)]
    pub kappa: f64,
}

impl HawkesParams {
    pub fn poisson(rate: f64) -> Self {
        HawkesParams {
            mu: rate,
            theta: 1.0,
            kappa: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0 && self.theta > 0.0 && self.kappa >= 0.0) {
            return Err(ModelError::InvalidParameter(format!(
                "hawkes parameters need mu >= 0, theta > 0, kappa >= 0: {self:?}"
            )));
        }
        if self.kappa / self.theta >= 1.0 {
            return Err(ModelError::InvalidParameter(format!(
                "hawkes process must be subcritical (kappa/theta < 1), got kappa={} theta={}",
                self.kappa, self.theta
            )));
        }
        Ok(())
    }

    /// Long-run mean intensity without interventions, `θμ/(θ-κ)`.
    pub fn stationary_mean(&self) -> f64 {
        self.theta * self.mu / (self.theta - self.kappa)
    }
}

/// Exact solution of the inter-event drift: `μ + (λ-μ)e^{-θ dt}`.
pub fn decay_intensity<R: Real>(p: &HawkesParams, lambda: R, dt: f64) -> R {
    (lambda - p.mu) * (-p.theta * dt).exp() + p.mu
}

/// Intensity after `n_events` arrivals (exogenous or interventions alike).
pub fn excite_intensity<R: Real>(p: &HawkesParams, lambda: R, n_events: u64) -> R {
    if n_events == 0 || p.kappa == 0.0 {
        lambda
    } else {
        lambda + p.kappa * n_events as f64
    }
}

/// Poisson count over a step with intensity frozen at the left endpoint.
pub fn sample_arrival_count<G: Rng + ?Sized>(lambda: f64, dt: f64, rng: &mut G) -> u64 {
    let mean = lambda * dt;
    if !(mean > 0.0) {
        return 0;
    }
    match Poisson::new(mean) {
        Ok(d) => d.sample(rng) as u64,
        Err(_) => 0,
    }
}

/// Law of the fraction of available depth consumed by one exogenous trade.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MarkDistribution {
    Beta { a: f64, b: f64 },
    Constant { fixed: f64 },
}

impl MarkDistribution {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MarkDistribution::Beta { a, b } if a > 0.0 && b > 0.0 => Ok(()),
            MarkDistribution::Constant { fixed } if (0.0..=1.0).contains(&fixed) => Ok(()),
            other => Err(ModelError::InvalidParameter(format!("invalid mark law {other:?}"))),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            MarkDistribution::Beta { a, b } => a / (a + b),
            MarkDistribution::Constant { fixed } => fixed,
        }
    }

    /// `E[M²]`.
    pub fn second_moment(&self) -> f64 {
        match *self {
            MarkDistribution::Beta { a, b } => a * (a + 1.0) / ((a + b) * (a + b + 1.0)),
            MarkDistribution::Constant { fixed } => fixed * fixed,
        }
    }

    /// Unnormalized density on `(0,1)`; `None` for a point mass.
    pub fn unnormalized_density(&self, m: f64) -> Option<f64> {
        match *self {
            MarkDistribution::Beta { a, b } => Some(m.powf(a - 1.0) * (1.0 - m).powf(b - 1.0)),
            MarkDistribution::Constant { .. } => None,
        }
    }

    pub fn sample<G: Rng + ?Sized>(&self, rng: &mut G) -> f64 {
        match *self {
            MarkDistribution::Beta { a, b } => {
                let d = Beta::new(a, b).expect("validated beta parameters");
                d.sample(rng).clamp(0.0, 1.0)
            }
            MarkDistribution::Constant { fixed } => fixed,
        }
    }
}

/// Parameters of one logistic option-flow intensity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmoidIntensity {
    pub lambda_bar: f64,
    pub k: f64,
    #[serde(default)]
    pub mu: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptionIntensityParams {
    pub bid: SigmoidIntensity,
    pub ask: SigmoidIntensity,
}

impl OptionIntensityParams {
    pub fn validate(&self) -> Result<()> {
        for s in [&self.bid, &self.ask] {
            if !(s.lambda_bar > 0.0 && s.k > 0.0 && s.mu.is_finite()) {
                return Err(ModelError::InvalidParameter(format!(
                    "option intensity needs lambda_bar > 0, k > 0: {s:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn max_total(&self) -> f64 {
        self.bid.lambda_bar + self.ask.lambda_bar
    }
}

/// Client arrival intensities `(λ^b, λ^a)` at option quotes `(β, α)`.
pub fn option_intensities<R: Real>(p: &OptionIntensityParams, alpha: R, beta: R, reference: R) -> (R, R) {
    let bid = ((beta - reference) * p.bid.k + p.bid.mu).sigmoid() * p.bid.lambda_bar;
    let ask = ((reference - alpha) * p.ask.k + p.ask.mu).sigmoid() * p.ask.lambda_bar;
    (bid, ask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Channel};
    use proptest::prelude::*;

    fn rk4_decay(p: &HawkesParams, l0: f64, t: f64) -> f64 {
        let n = 10_000;
        let h = t / n as f64;
        let f = |l: f64| p.theta * (p.mu - l);
        let mut l = l0;
        for _ in 0..n {
            let k1 = f(l);
            let k2 = f(l + 0.5 * h * k1);
            let k3 = f(l + 0.5 * h * k2);
            let k4 = f(l + h * k3);
            l += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        l
    }

    #[test]
    fn decay_examples() {
        let p = HawkesParams {
            mu: 5.0,
            theta: 2.0,
            kappa: 0.0,
        };
        let got = decay_intensity(&p, 10.0, 1.0);
        assert!((got - rk4_decay(&p, 10.0, 1.0)).abs() < 1e-10);
        assert!((got - 5.676_676_416_183_064).abs() < 1e-12);
        assert_eq!(decay_intensity(&p, 5.0, 3.7), 5.0);
        assert_eq!(decay_intensity(&p, 10.0, 0.0), 10.0);
    }

    #[test]
    fn excite_examples() {
        let p = HawkesParams {
            mu: 5.0,
            theta: 2.0,
            kappa: 0.5,
        };
        assert_eq!(excite_intensity(&p, 5.0, 2), 6.0);
        assert_eq!(excite_intensity(&p, 5.0, 0), 5.0);
        let p0 = HawkesParams { kappa: 0.0, ..p };
        assert_eq!(excite_intensity(&p0, 5.0, 9), 5.0);
    }

    #[test]
    fn subcriticality_gate() {
        let p = HawkesParams {
            mu: 1.0,
            theta: 2.0,
            kappa: 2.0,
        };
        assert!(p.validate().is_err());
        assert!(HawkesParams { kappa: 1.9, ..p }.validate().is_ok());
    }

    #[test]
    fn arrival_counts() {
        let mut rng = stream(3, 0, 0, Channel::ExoAsk);
        assert_eq!(sample_arrival_count(0.0, 1.0, &mut rng), 0);
        let n = 1_000_000;
        let total: u64 = (0..n)
            .map(|_| sample_arrival_count(7560.0, 1.0 / 2520.0, &mut rng))
            .sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 3.0).abs() < 0.01, "mean {mean}");
        let tiny: u64 = (0..200_000)
            .map(|_| sample_arrival_count(1e-6, 1.0, &mut rng))
            .max()
            .unwrap();
        assert!(tiny <= 1);
    }

    #[test]
    fn beta_mark_moments() {
        let d = MarkDistribution::Beta { a: 2.0, b: 5.0 };
        let mut rng = stream(11, 0, 0, Channel::AskMarks);
        let n = 1_000_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let m = d.sample(&mut rng);
            assert!((0.0..=1.0).contains(&m));
            s1 += m;
            s2 += m * m;
        }
        assert!((s1 / n as f64 - 2.0 / 7.0).abs() < 1e-3);
        assert!((s2 / n as f64 - 3.0 / 28.0).abs() < 1e-3);
        assert!((d.second_moment() - 3.0 / 28.0).abs() < 1e-15);
    }

    fn flow() -> OptionIntensityParams {
        let s = SigmoidIntensity {
            lambda_bar: 50_400.0,
            k: 50.0,
            mu: 0.0,
        };
        OptionIntensityParams { bid: s, ask: s }
    }

    #[test]
    fn option_intensity_examples() {
        let p = flow();
        let (lb, _) = option_intensities(&p, 3.0, 2.5, 2.5);
        assert!((lb - 25_200.0).abs() < 1e-9);
        let mut q = p;
        q.bid.mu = 1.5;
        let (lb, _) = option_intensities(&q, 3.0, 2.5, 2.5);
        assert!((lb / 50_400.0 - 0.817_574_476_193_643_7).abs() < 1e-12);
        let (_, la) = option_intensities(&p, 1e6, 2.5, 2.5);
        assert!(la < 1e-9);
    }

    proptest! {
        #[test]
        fn intensities_bounded_and_monotone(r in 0.0f64..10.0, o1 in 0.0f64..1.0, o2 in 0.0f64..1.0, mu in -3.0f64..3.0) {
            let mut p = flow();
            p.bid.mu = mu;
            p.ask.mu = -mu;
            let (lo, hi) = (o1.min(o2), o1.max(o2));
            let (b1, a1) = option_intensities(&p, r + lo, r - lo, r);
            let (b2, a2) = option_intensities(&p, r + hi, r - hi, r);
            for l in [b1, a1, b2, a2] {
                prop_assert!((0.0..=50_400.0).contains(&l));
            }
            prop_assert!(b2 <= b1 && a2 <= a1);
        }

        #[test]
        fn decay_and_excite_keep_intensity_nonnegative(l0 in 0.0f64..100.0, events in prop::collection::vec((0u64..4, 0.0f64..1.0), 0..30)) {
            let p = HawkesParams { mu: 3.0, theta: 10.0, kappa: 4.0 };
            let mut l = l0;
            for (n, dt) in events {
                l = excite_intensity(&p, decay_intensity(&p, l, dt), n);
                prop_assert!(l >= 0.0);
            }
        }
    }
}
