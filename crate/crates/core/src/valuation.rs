//! Option reference price, delta, payoff, liquidation value and running penalties.
//!
//! The reference price is the zero-rate Black–Scholes call value under an
//! effective volatility that matches the expected quadratic variation of the
//! jump-driven mid price:
//!
//! `σ_eff = sqrt(λ⁺ E[x⁺²] + λ⁻ E[x⁻²]) / (2P)`,
//!
//! where `x±` is the book-walk depth of one exogenous trade. For a linear
//! book `x = M·U`, so `E[x²] = U² E[M²]`.

use serde::{Deserialize, Serialize};

use crate::ad::Real;
use crate::dynamics::{MarketState, UnderlyingModel};
use crate::error::{ModelError, Result};
use crate::flows::{MarkDistribution, OptionIntensityParams};
use crate::math;
use crate::orderbook::{OrderBookShape, Side, SideDepth};

/// European call.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptionSpec {
    pub strike: f64,
    pub maturity: f64,
}

impl OptionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.strike > 0.0 && self.maturity > 0.0) {
            return Err(ModelError::InvalidParameter(format!(
                "option needs strike > 0 and maturity > 0: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn payoff<R: Real>(&self, p: R) -> R {
        (p - self.strike).pos_part()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyParams {
    pub kappa_hedge: f64,
    pub theta_flow: f64,
    pub kappa_act: f64,
}

impl PenaltyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa_hedge >= 0.0 && self.kappa_act >= 0.0) {
            return Err(ModelError::InvalidParameter(format!(
                "penalty coefficients must be >= 0: {self:?}"
            )));
        }
        if !(self.theta_flow > 0.0 && self.theta_flow < 1.0) {
            return Err(ModelError::InvalidParameter(format!(
                "theta_flow must lie in (0,1), got {}",
                self.theta_flow
            )));
        }
        Ok(())
    }

    /// Activity target `Λ = θ_flow (λ̄^a + λ̄^b)`.
    pub fn target_flow(&self, flow: &OptionIntensityParams) -> f64 {
        self.theta_flow * flow.max_total()
    }
}

/// `E[(Φ^{-1}(M Φ(+∞)))²]`: mean squared book-walk depth of one exogenous trade.
pub fn mean_square_jump(side: &SideDepth, marks: &MarkDistribution) -> f64 {
    let total = side.total();
    if let MarkDistribution::Constant { fixed } = marks {
        return side.inverse(fixed * total).powi(2);
    }
    if side.is_linear() {
        return side.cutoff().powi(2) * marks.second_moment();
    }
    // midpoint rule keeps away from integrable endpoint singularities
    let n = 200_000;
    let h = 1.0 / n as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..n {
        let m = (k as f64 + 0.5) * h;
        let w = marks.unnormalized_density(m).unwrap_or(0.0);
        let x = side.inverse(m * total);
        num += w * x * x;
        den += w;
    }
    num / den
}

/// Effective volatility from the flow intensities and the book.
pub fn effective_volatility(model: &UnderlyingModel, lambda_bid: f64, lambda_ask: f64, mid: f64) -> Result<f64> {
    if !(mid > 0.0) {
        return Err(ModelError::Domain(format!("mid price must be > 0, got {mid}")));
    }
    let jb = mean_square_jump(&model.book.bid, &model.marks_bid);
    let ja = mean_square_jump(&model.book.ask, &model.marks_ask);
    Ok((lambda_ask * ja + lambda_bid * jb).sqrt() / (2.0 * mid))
}

/// Zero-rate Black–Scholes call value.
pub fn bs_call<R: Real>(p: R, strike: f64, tau: f64, sigma: R) -> R {
    let vol = sigma * tau.max(0.0).sqrt();
    if tau <= 0.0 || vol.value() < 1e-12 || p.value() <= 0.0 {
        return (p - strike).pos_part();
    }
    let d1 = ((p / strike).ln() + vol.sq() * 0.5) / vol;
    let d2 = d1 - vol;
    p * d1.norm_cdf() - d2.norm_cdf() * strike
}

/// Black–Scholes call delta `N(d1)` at fixed volatility.
pub fn bs_delta<R: Real>(p: R, strike: f64, tau: f64, sigma: R) -> R {
    let vol = sigma * tau.max(0.0).sqrt();
    if tau <= 0.0 || vol.value() < 1e-12 || p.value() <= 0.0 {
        let pv = p.value();
        return R::cst(if pv > strike {
            1.0
        } else if pv < strike {
            0.0
        } else {
            0.5
        });
    }
    let d1 = ((p / strike).ln() + vol.sq() * 0.5) / vol;
    d1.norm_cdf()
}

/// Reference price, its delta and the effective volatility, bundled for the simulator.
#[derive(Clone, Debug)]
pub struct ReferencePricer {
    pub spec: OptionSpec,
    jump_sq_bid: f64,
    jump_sq_ask: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct Reference<R> {
    pub price: R,
    pub delta: R,
    pub sigma: R,
}

impl ReferencePricer {
    pub fn new(spec: OptionSpec, model: &UnderlyingModel) -> Self {
        ReferencePricer {
            spec,
            jump_sq_bid: mean_square_jump(&model.book.bid, &model.marks_bid),
            jump_sq_ask: mean_square_jump(&model.book.ask, &model.marks_ask),
        }
    }

    pub fn sigma<R: Real>(&self, state: &MarketState<R>) -> R {
        let var = state.lambda_ask * self.jump_sq_ask + state.lambda_bid * self.jump_sq_bid;
        if var.value() <= 0.0 {
            return R::cst(0.0);
        }
        var.sqrt() / (state.p * 2.0)
    }

    pub fn evaluate<R: Real>(&self, t: f64, state: &MarketState<R>) -> Reference<R> {
        let tau = (self.spec.maturity - t).max(0.0);
        let sigma = self.sigma(state);
        Reference {
            price: bs_call(state.p, self.spec.strike, tau, sigma),
            delta: bs_delta(state.p, self.spec.strike, tau, sigma),
            sigma,
        }
    }

    /// `b(t, e)`; errors past maturity or for a nonpositive mid.
    pub fn reference_price(&self, t: f64, state: &MarketState<f64>) -> Result<f64> {
        self.check(t, state)?;
        Ok(self.evaluate(t, state).price)
    }

    /// `∂_p b(t, e)` at frozen effective volatility.
    pub fn reference_delta(&self, t: f64, state: &MarketState<f64>) -> Result<f64> {
        self.check(t, state)?;
        Ok(self.evaluate(t, state).delta)
    }

    fn check(&self, t: f64, state: &MarketState<f64>) -> Result<()> {
        if t > self.spec.maturity {
            return Err(ModelError::Domain(format!(
                "time {t} is past maturity {}",
                self.spec.maturity
            )));
        }
        if !(state.p > 0.0) {
            return Err(ModelError::Domain(format!("mid price must be > 0, got {}", state.p)));
        }
        Ok(())
    }
}

/// `g = κ_hedge (q + i ∂_p b)²`.
pub fn hedge_penalty<R: Real>(kappa_hedge: f64, q: R, i: R, delta: R) -> R {
    (q + i * delta).sq() * kappa_hedge
}

/// `h = κ_act (Λ - (λ^a + λ^b))₊²`.
pub fn activity_penalty<R: Real>(kappa_act: f64, target: f64, lambda_bid: R, lambda_ask: R) -> R {
    (-(lambda_bid + lambda_ask) + target).pos_part().sq() * kappa_act
}

/// Terminal liquidation value `L(T, q, i, p, s)`.
///
/// Long inventory beyond the bid depth is worthless; short inventory must be
/// coverable from the ask side.
pub fn liquidation_value(book: &OrderBookShape, spec: &OptionSpec, q: f64, i: f64, p: f64, s: f64) -> Result<f64> {
    if q < -book.ask.total() {
        return Err(ModelError::InfeasibleState(format!(
            "short position {q} exceeds total ask depth {}",
            book.ask.total()
        )));
    }
    Ok(liquidation_r(book, spec, q, i, p, s))
}

/// Unchecked liquidation value; callers keep `q >= -Φ_A(+∞)`.
pub fn liquidation_r<R: Real>(book: &OrderBookShape, spec: &OptionSpec, q: R, i: R, p: R, s: R) -> R {
    let half = s * 0.5;
    let underlying = if q.value() >= 0.0 {
        let bid = p - half;
        let sellable = q.min_r(book.available(Side::Bid, bid));
        book.execution_value_r(Side::Bid, bid, sellable)
    } else {
        -book.execution_value_r(Side::Ask, p + half, -q)
    };
    underlying + i * spec.payoff(p)
}

/// Black–Scholes call via direct quadrature of the lognormal expectation.
/// Test oracle only; independent of the closed form.
#[doc(hidden)]
pub fn bs_call_quadrature(p: f64, strike: f64, tau: f64, sigma: f64) -> f64 {
    let vol = sigma * tau.sqrt();
    let n = 400_000;
    let (lo, hi) = (-12.0, 12.0);
    let h = (hi - lo) / n as f64;
    let mut acc = 0.0;
    for k in 0..=n {
        let z = lo + k as f64 * h;
        let w = if k == 0 || k == n { 0.5 } else { 1.0 };
        let st = p * (vol * z - 0.5 * vol * vol).exp();
        acc += w * (st - strike).max(0.0) * math::norm_pdf(z);
    }
    acc * h
}
