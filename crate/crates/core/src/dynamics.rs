//! Mid-price, transient impact, spread and intensity dynamics of the underlying.
//!
//! Every trade that walks the book to depth `x` moves the mid by `x/2`
//! (up for ask-side buys, down for bid-side sells), of which the share
//! `(1-η)x/2` is recorded in the transient component `D`, and widens the
//! spread by `x`. Between events `D` decays at rate `r` and drags the mid
//! with it; the spread relaxes towards its floor `δ` at rate `ρ`.

use serde::{Deserialize, Serialize};

use crate::ad::Real;
use crate::error::{ModelError, Result};
use crate::flows::{decay_intensity, excite_intensity, HawkesParams, MarkDistribution};
use crate::orderbook::{OrderBookShape, Side};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpactParams {
    /// Permanent fraction of each impact.
    pub eta: f64,
    /// Resilience rate of the transient component (1/year).
    pub r: f64,
    /// Spread reversion rate (1/year).
    pub rho: f64,
    /// Spread floor.
    pub delta: f64,
}

impl ImpactParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(ModelError::InvalidParameter(format!(
                "eta must lie in [0,1], got {}",
                self.eta
            )));
        }
        if !(self.r > 0.0 && self.rho > 0.0 && self.delta >= 0.0) {
            return Err(ModelError::InvalidParameter(format!(
                "impact needs r > 0, rho > 0, delta >= 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Observable state of the underlying market.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarketState<R> {
    pub p: R,
    pub d: R,
    pub s: R,
    pub lambda_bid: R,
    pub lambda_ask: R,
}

impl<R: Real> MarketState<R> {
    pub fn best_bid(&self) -> R {
        self.p - self.s * 0.5
    }

    pub fn best_ask(&self) -> R {
        self.p + self.s * 0.5
    }

    pub fn value(&self) -> MarketState<f64> {
        MarketState {
            p: self.p.value(),
            d: self.d.value(),
            s: self.s.value(),
            lambda_bid: self.lambda_bid.value(),
            lambda_ask: self.lambda_ask.value(),
        }
    }
}

impl MarketState<f64> {
    pub fn lift<R: Real>(&self) -> MarketState<R> {
        MarketState {
            p: R::cst(self.p),
            d: R::cst(self.d),
            s: R::cst(self.s),
            lambda_bid: R::cst(self.lambda_bid),
            lambda_ask: R::cst(self.lambda_ask),
        }
    }
}

/// `(B, A) = (P - S/2, P + S/2)`.
pub fn best_quotes<R: Real>(state: &MarketState<R>) -> (R, R) {
    (state.best_bid(), state.best_ask())
}

/// Everything that drives the underlying market.
#[derive(Clone, Debug)]
pub struct UnderlyingModel {
    pub book: OrderBookShape,
    pub impact: ImpactParams,
    pub hawkes_bid: HawkesParams,
    pub hawkes_ask: HawkesParams,
    pub marks_bid: MarkDistribution,
    pub marks_ask: MarkDistribution,
    /// Fixed cost per intervention.
    pub fee: f64,
}

impl UnderlyingModel {
    pub fn validate(&self) -> Result<()> {
        self.impact.validate()?;
        self.hawkes_bid.validate()?;
        self.hawkes_ask.validate()?;
        self.marks_bid.validate()?;
        self.marks_ask.validate()?;
        if !(self.fee >= 0.0) {
            return Err(ModelError::InvalidParameter(format!(
                "fee must be >= 0, got {}",
                self.fee
            )));
        }
        Ok(())
    }

    /// Gates on the initial state under which quotes provably stay nonnegative.
    pub fn validate_initial(&self, s: &MarketState<f64>) -> Result<()> {
        let b0 = s.best_bid();
        if !(b0 >= 0.0) {
            return Err(ModelError::InvalidParameter(format!(
                "initial best bid must be >= 0 (quote positivity hypothesis), got {b0}"
            )));
        }
        if b0 < s.d {
            return Err(ModelError::InvalidParameter(format!(
                "initial best bid {b0} must be >= initial transient impact {} (quote positivity hypothesis)",
                s.d
            )));
        }
        if s.s < self.impact.delta {
            return Err(ModelError::InvalidParameter(format!(
                "initial spread {} below floor {}",
                s.s, self.impact.delta
            )));
        }
        if !(s.lambda_bid >= 0.0 && s.lambda_ask >= 0.0) {
            return Err(ModelError::InvalidParameter("initial intensities must be >= 0".into()));
        }
        Ok(())
    }

    /// Book-walk jump of depth `x` on `side`.
    pub fn apply_jump<R: Real>(&self, state: &MarketState<R>, side: Side, x: R) -> MarketState<R> {
        let half = x * 0.5;
        let transient = half * (1.0 - self.impact.eta);
        let mut out = *state;
        match side {
            Side::Ask => {
                out.p = state.p + half;
                out.d = state.d + transient;
            }
            Side::Bid => {
                out.p = state.p - half;
                out.d = state.d - transient;
            }
        }
        out.s = state.s + x;
        out
    }

    /// Exogenous market order consuming the fraction `mark` of the available depth.
    pub fn apply_exogenous_trade<R: Real>(&self, state: &MarketState<R>, side: Side, mark: f64) -> MarketState<R> {
        if mark <= 0.0 {
            return *state;
        }
        let avail = self.book.available(side, state.best_bid());
        let x = self.book.side(side).inverse(avail * mark);
        self.apply_jump(state, side, x)
    }

    /// All exogenous arrivals of one step: bid-side sells first, then ask-side
    /// buys, then the Hawkes excitation from their counts.
    pub fn apply_exogenous_flow<R: Real>(
        &self,
        state: &MarketState<R>,
        bid_marks: &[f64],
        ask_marks: &[f64],
    ) -> MarketState<R> {
        let mut s = *state;
        for &m in bid_marks {
            s = self.apply_exogenous_trade(&s, Side::Bid, m);
        }
        for &m in ask_marks {
            s = self.apply_exogenous_trade(&s, Side::Ask, m);
        }
        s.lambda_bid = excite_intensity(&self.hawkes_bid, s.lambda_bid, bid_marks.len() as u64);
        s.lambda_ask = excite_intensity(&self.hawkes_ask, s.lambda_ask, ask_marks.len() as u64);
        s
    }

    /// Agent market order of volume `xi` against `side` (bid = sell, ask = buy).
    ///
    /// Returns the post-trade state, the signed execution cash (sale revenue
    /// or negative purchase cost) and the fee charged.
    pub fn apply_impulse(&self, state: &MarketState<f64>, side: Side, xi: f64) -> Result<(MarketState<f64>, f64, f64)> {
        if !(xi >= 0.0) {
            return Err(ModelError::Domain(format!("impulse volume must be >= 0, got {xi}")));
        }
        let avail = self.book.available(side, state.best_bid());
        if xi > avail {
            return Err(ModelError::LiquidityExceeded {
                requested: xi,
                available: avail,
            });
        }
        Ok(self.impulse_unchecked(state, side, xi))
    }

    /// Impulse without the depth check; callers clip `xi` to the available depth.
    pub fn impulse_unchecked<R: Real>(&self, state: &MarketState<R>, side: Side, xi: R) -> (MarketState<R>, R, f64) {
        if xi.value() <= 0.0 {
            return (*state, R::cst(0.0), 0.0);
        }
        let x = self.book.side(side).inverse(xi);
        let cash = match side {
            Side::Bid => self.book.execution_value_r(Side::Bid, state.best_bid(), xi),
            Side::Ask => -self.book.execution_value_r(Side::Ask, state.best_ask(), xi),
        };
        let mut out = self.apply_jump(state, side, x);
        match side {
            Side::Bid => out.lambda_bid = excite_intensity(&self.hawkes_bid, out.lambda_bid, 1),
            Side::Ask => out.lambda_ask = excite_intensity(&self.hawkes_ask, out.lambda_ask, 1),
        }
        (out, cash, self.fee)
    }

    /// First-order response to a hedge order `dq` of value exactly zero, where
    /// buying and selling meet at a kink. Takes the mean of the two one-sided
    /// derivatives: cash `-P dq`, mid and transient impact move linearly, and
    /// the spread by the difference of the touch slopes. Values are unchanged.
    pub fn zero_impulse<R: Real>(&self, state: &MarketState<R>, dq: R) -> (MarketState<R>, R) {
        let (ka, kb) = (self.book.ask.touch_slope(), self.book.bid.touch_slope());
        let half = dq * ((ka + kb) * 0.25);
        let mut out = *state;
        out.p = state.p + half;
        out.d = state.d + half * (1.0 - self.impact.eta);
        out.s = state.s + dq * ((ka - kb) * 0.5);
        (out, -(state.p * dq))
    }

    /// Inter-event evolution over `dt`.
    pub fn decay<R: Real>(&self, state: &MarketState<R>, dt: f64) -> MarketState<R> {
        let er = (-self.impact.r * dt).exp();
        let es = (-self.impact.rho * dt).exp();
        let delta = self.impact.delta;
        MarketState {
            p: state.p - state.d * (1.0 - er),
            d: state.d * er,
            s: (state.s - delta) * es + delta,
            lambda_bid: decay_intensity(&self.hawkes_bid, state.lambda_bid, dt),
            lambda_ask: decay_intensity(&self.hawkes_ask, state.lambda_ask, dt),
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::orderbook::LinearBookParams;
    use proptest::prelude::*;

    pub(crate) fn baseline_underlying() -> UnderlyingModel {
        UnderlyingModel {
            book: OrderBookShape::linear(LinearBookParams {
                c_bid: 100.0,
                c_ask: 100.0,
                cutoff_bid: 0.5,
                cutoff_ask: 0.5,
            })
            .unwrap(),
            impact: ImpactParams {
                eta: 0.3,
                r: 15_120.0,
                rho: 50_400.0,
                delta: 0.02,
            },
            hawkes_bid: HawkesParams::poisson(7560.0),
            hawkes_ask: HawkesParams::poisson(7560.0),
            marks_bid: MarkDistribution::Beta { a: 2.0, b: 5.0 },
            marks_ask: MarkDistribution::Beta { a: 2.0, b: 5.0 },
            fee: 0.0,
        }
    }

    fn state(p: f64, d: f64, s: f64) -> MarketState<f64> {
        MarketState {
            p,
            d,
            s,
            lambda_bid: 7560.0,
            lambda_ask: 7560.0,
        }
    }

    #[test]
    fn exogenous_buy_accounting() {
        let m = baseline_underlying();
        let s0 = state(100.0, 0.0, 0.1);
        let s1 = m.apply_exogenous_trade(&s0, Side::Ask, 0.4);
        assert!((s1.p - s0.p - 0.1).abs() < 1e-12);
        assert!((s1.d - 0.07).abs() < 1e-12);
        assert!((s1.s - s0.s - 0.2).abs() < 1e-12);
        assert!((s1.best_bid() - s0.best_bid()).abs() < 1e-12);
        assert!((s1.best_ask() - s0.best_ask() - 0.2).abs() < 1e-12);
        let same = m.apply_exogenous_trade(&s0, Side::Ask, 0.0);
        assert_eq!((same.p, same.d, same.s), (s0.p, s0.d, s0.s));
    }

    #[test]
    fn exogenous_full_sell_accounting() {
        let m = baseline_underlying();
        let s0 = state(100.05, 0.0, 0.1);
        let s1 = m.apply_exogenous_trade(&s0, Side::Bid, 1.0);
        assert!((s1.best_bid() - (s0.best_bid() - 0.5)).abs() < 1e-12);
        assert!((s1.best_ask() - s0.best_ask()).abs() < 1e-12);
    }

    #[test]
    fn zero_impulse_averages_one_sided_slopes() {
        let mut m = baseline_underlying();
        m.book = OrderBookShape::linear(LinearBookParams {
            c_bid: 50.0,
            c_ask: 200.0,
            cutoff_bid: 0.5,
            cutoff_ask: 0.5,
        })
        .unwrap();
        let s0 = state(100.0, 0.01, 0.1);
        let (same, cash) = m.zero_impulse(&s0, 0.0);
        assert_eq!((same, cash), (s0, -0.0));

        let h = 1e-7;
        let (up, c_up, _) = m.impulse_unchecked(&s0, Side::Ask, h);
        let (dn, c_dn, _) = m.impulse_unchecked(&s0, Side::Bid, h);
        let (lin, c_lin) = m.zero_impulse(&s0, 1.0);
        let mean = |a: f64, b: f64, base: f64| ((a - base) / h + (b - base) / -h) / 2.0;
        assert!((mean(up.p, dn.p, s0.p) - (lin.p - s0.p)).abs() < 1e-6);
        assert!((mean(up.d, dn.d, s0.d) - (lin.d - s0.d)).abs() < 1e-6);
        assert!((mean(up.s, dn.s, s0.s) - (lin.s - s0.s)).abs() < 1e-6);
        assert!((mean(c_up, c_dn, 0.0) - c_lin).abs() < 1e-5);
    }

    #[test]
    fn impulse_buy_example() {
        let m = baseline_underlying();
        let s0 = state(100.0, 0.0, 0.1);
        let (s1, cash, fee) = m.apply_impulse(&s0, Side::Ask, 10.0).unwrap();
        assert!((s1.p - s0.p - 0.05).abs() < 1e-12);
        assert!((s1.d - 0.035).abs() < 1e-12);
        assert!((s1.s - s0.s - 0.1).abs() < 1e-12);
        assert!((cash + 1001.0).abs() < 1e-9);
        assert_eq!(fee, 0.0);
        let (s2, cash, fee) = m.apply_impulse(&s0, Side::Ask, 0.0).unwrap();
        assert_eq!((s2.p, cash, fee), (s0.p, 0.0, 0.0));
        assert!(m.apply_impulse(&s0, Side::Ask, 50.5).is_err());
    }

    #[test]
    fn impulse_excites_traded_side() {
        let mut m = baseline_underlying();
        m.hawkes_ask = HawkesParams {
            mu: 7560.0,
            theta: 100.0,
            kappa: 10.0,
        };
        let s0 = state(100.0, 0.0, 0.1);
        let (s1, _, _) = m.apply_impulse(&s0, Side::Ask, 1.0).unwrap();
        assert_eq!(s1.lambda_ask, 7570.0);
        assert_eq!(s1.lambda_bid, 7560.0);
    }

    #[test]
    fn decay_examples() {
        let m = baseline_underlying();
        let s0 = state(100.0, 0.05, 0.1);
        let s1 = m.decay(&s0, 1.0 / 2520.0);
        assert!((s1.d - 0.05 * (-6.0f64).exp()).abs() < 1e-15);
        assert!((s1.d - 1.239_376_088_333_179e-4).abs() < 1e-12);
        let s0 = state(100.0, 0.0, 0.1);
        let s1 = m.decay(&s0, 1.0 / 2520.0);
        assert_eq!(s1.p, 100.0);
        assert!(s1.s < 0.1 && s1.s > 0.02);
        let floor = m.decay(&state(100.0, 0.0, 0.02), 0.3);
        assert_eq!(floor.s, 0.02);
    }

    #[test]
    fn best_quotes_examples() {
        let (b, a) = best_quotes(&state(100.0, 0.0, 0.1));
        assert!((b - 99.95).abs() < 1e-12 && (a - 100.05).abs() < 1e-12);
        let (b, a) = best_quotes(&state(100.0, 0.0, 0.02));
        assert!((b - 99.99).abs() < 1e-12 && (a - 100.01).abs() < 1e-12);
    }

    #[test]
    fn initial_state_gates() {
        let m = baseline_underlying();
        assert!(m.validate_initial(&state(100.0, 0.0, 0.1)).is_ok());
        assert!(m.validate_initial(&state(0.5, 0.6, 0.1)).is_err());
        assert!(m.validate_initial(&state(100.0, 0.0, 0.01)).is_err());
    }

    proptest! {
        #[test]
        fn inter_jump_bid_matches_closed_form(d in -0.3f64..0.3, s in 0.02f64..1.0, dts in prop::collection::vec(0.0f64..1e-3, 1..20)) {
            let m = baseline_underlying();
            let s0 = state(100.0, d, s);
            let mut st = s0;
            let mut t = 0.0;
            for dt in dts {
                st = m.decay(&st, dt);
                t += dt;
            }
            let (r, rho, delta) = (m.impact.r, m.impact.rho, m.impact.delta);
            let closed = s0.best_bid() - d * (1.0 - (-r * t).exp()) + 0.5 * (s - delta) * (1.0 - (-rho * t).exp());
            prop_assert!((st.best_bid() - closed).abs() < 1e-12);
        }

        #[test]
        fn spread_is_monotone_in_initial_condition(s in 0.02f64..1.0, extra in 0.0f64..1.0, marks in prop::collection::vec((0.0f64..1.0, any::<bool>(), 0.0f64..1e-3), 0..40)) {
            let m = baseline_underlying();
            let mut a = state(100.0, 0.0, s);
            let mut b = state(100.0, 0.0, s + extra);
            for (mark, ask, dt) in marks {
                let side = if ask { Side::Ask } else { Side::Bid };
                a = m.decay(&m.apply_exogenous_trade(&a, side, mark), dt);
                b = m.decay(&m.apply_exogenous_trade(&b, side, mark), dt);
                prop_assert!(b.s >= a.s);
                prop_assert!(a.s >= m.impact.delta);
            }
        }

        #[test]
        fn jumps_only_move_their_own_side(mark in 0.0f64..1.0, p in 10.0f64..200.0, s in 0.02f64..1.0) {
            let m = baseline_underlying();
            let s0 = state(p, 0.0, s);
            let up = m.apply_exogenous_trade(&s0, Side::Ask, mark);
            let down = m.apply_exogenous_trade(&s0, Side::Bid, mark);
            prop_assert!((up.best_bid() - s0.best_bid()).abs() < 1e-9);
            prop_assert!((down.best_ask() - s0.best_ask()).abs() < 1e-9);
        }
    }
}
