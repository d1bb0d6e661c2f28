//! Discrete-time environment: one market maker quoting an option and hedging
//! it in the underlying, simulated on a uniform grid.
//!
//! Within step `k` the order of events is:
//! 1. reference price and option intensities at the pre-step state, option
//!    arrivals drawn with those intensities;
//! 2. option inventory update `I' = I + ΔN^b - ΔN^a`;
//! 3. decay of the underlying over `dt`;
//! 4. exogenous trades on the underlying (intensity frozen at `t_k`);
//! 5. hedge `ΔQ = clip(γ I' - Q)` executed against the post-flow book;
//! 6. cash update and penalties `g, h` accrued at `t_{k+1}`.
//!
//! Everything is generic over [`Real`]: on `f64` it is a plain simulator, on
//! [`Var`] it records the pathwise derivative of the objective. Sampled counts
//! enter the tape straight-through: their value is the draw and their
//! derivative is `dt · ∂λ`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ad::{self, Real, Var};
use crate::dynamics::{MarketState, UnderlyingModel};
use crate::error::{ModelError, Result};
use crate::flows::{option_intensities, sample_arrival_count, OptionIntensityParams};
use crate::orderbook::Side;
use crate::policy::{Adam, BlockCaches, Normalizer, Observation, Policy, PolicyAction};
use crate::rng::{stream, Channel};
use crate::valuation::{activity_penalty, hedge_penalty, liquidation_r, OptionSpec, PenaltyParams, ReferencePricer};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub maturity: f64,
    pub steps: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(ModelError::InvalidParameter("grid needs at least one step".into()));
        }
        if !(self.maturity > 0.0) {
            return Err(ModelError::InvalidParameter(format!(
                "grid maturity must be > 0, got {}",
                self.maturity
            )));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.maturity / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.maturity
        } else {
            k as f64 * self.dt()
        }
    }
}

/// Agent holdings. `x` is cash accumulated since `t = 0`; the initial cash is
/// kept apart so that it enters every objective additively.
#[derive(Clone, Copy, Debug)]
pub struct AgentState<R> {
    pub x: R,
    pub q: R,
    pub i: R,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitialState {
    pub market: MarketState<f64>,
    pub x: f64,
    pub q: f64,
    pub i: f64,
}

/// Model, option contract, flow, penalties, grid and initial state.
#[derive(Clone, Debug)]
pub struct Environment {
    pub underlying: UnderlyingModel,
    pub option: OptionSpec,
    pub flow: OptionIntensityParams,
    pub penalty: PenaltyParams,
    pub grid: GridSpec,
    pub init: InitialState,
    pricer: ReferencePricer,
}

impl Environment {
    pub fn new(
        underlying: UnderlyingModel,
        option: OptionSpec,
        flow: OptionIntensityParams,
        penalty: PenaltyParams,
        grid: GridSpec,
        init: InitialState,
    ) -> Result<Self> {
        underlying.validate()?;
        underlying.validate_initial(&init.market)?;
        option.validate()?;
        flow.validate()?;
        penalty.validate()?;
        grid.validate()?;
        if (grid.maturity - option.maturity).abs() > 1e-12 * option.maturity {
            return Err(ModelError::InvalidParameter(format!(
                "grid horizon {} differs from option maturity {}",
                grid.maturity, option.maturity
            )));
        }
        if !(init.market.p > 0.0) {
            return Err(ModelError::InvalidParameter("initial mid must be > 0".into()));
        }
        if init.q < -underlying.book.ask.total() {
            return Err(ModelError::InvalidParameter(format!(
                "initial hedge {} is shorter than the total ask depth",
                init.q
            )));
        }
        let pricer = ReferencePricer::new(option, &underlying);
        Ok(Environment {
            underlying,
            option,
            flow,
            penalty,
            grid,
            init,
            pricer,
        })
    }

    pub fn pricer(&self) -> &ReferencePricer {
        &self.pricer
    }

    pub fn activity_target(&self) -> f64 {
        self.penalty.target_flow(&self.flow)
    }

    /// Feature normalization anchored at the initial state.
    pub fn normalizer(&self) -> Normalizer {
        let b0 = self.pricer.evaluate(0.0, &self.init.market).price;
        Normalizer::new(self.grid.maturity, self.init.market.p, b0, self.underlying.impact.delta)
    }

    pub fn with_initial(&self, init: InitialState) -> Result<Self> {
        let mut env = self.clone();
        env.underlying.validate_initial(&init.market)?;
        env.init = init;
        Ok(env)
    }
}

/// Who sets the quotes and the hedge.
#[derive(Clone, Debug)]
pub enum Strategy {
    Network(Policy),
    /// Constant offsets from the reference price and a constant hedge ratio.
    Fixed {
        bid_offset: f64,
        ask_offset: f64,
        gamma: f64,
    },
    /// No option flow and no hedging: the pure underlying model.
    Inert,
    /// Quotes at the reference but clients arrive at the maximal intensities.
    MaxFlow {
        gamma: f64,
    },
}

impl Strategy {
    fn act<R: Real>(&self, obs: &Observation<R>, caches: &mut BlockCaches) -> Result<PolicyAction<R>> {
        match self {
            Strategy::Network(p) => p.act(obs, caches),
            &Strategy::Fixed {
                bid_offset,
                ask_offset,
                gamma,
            } => {
                let beta = (obs.reference - bid_offset).max_r(R::cst(0.0));
                let alpha = (obs.reference + ask_offset).max_r(beta);
                Ok(PolicyAction {
                    beta,
                    alpha,
                    gamma: R::cst(gamma.clamp(-1.0, 1.0)),
                })
            }
            Strategy::Inert => Ok(PolicyAction {
                beta: obs.reference,
                alpha: obs.reference,
                gamma: R::cst(0.0),
            }),
            &Strategy::MaxFlow { gamma } => Ok(PolicyAction {
                beta: obs.reference,
                alpha: obs.reference,
                gamma: R::cst(gamma.clamp(-1.0, 1.0)),
            }),
        }
    }

    fn intensities<R: Real>(&self, flow: &OptionIntensityParams, a: &PolicyAction<R>, b: R) -> (R, R) {
        match self {
            Strategy::Inert => (R::cst(0.0), R::cst(0.0)),
            Strategy::MaxFlow { .. } => (R::cst(flow.bid.lambda_bar), R::cst(flow.ask.lambda_bar)),
            _ => option_intensities(flow, a.alpha, a.beta, b),
        }
    }

    fn hedges(&self) -> bool {
        !matches!(self, Strategy::Inert)
    }
}

/// Random inputs consumed by one step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepArrivals {
    pub option_ask: u64,
    pub option_bid: u64,
    /// Option intensities the counts were drawn with.
    pub option_lambda_ask: f64,
    pub option_lambda_bid: f64,
    pub exo_bid_marks: Vec<f64>,
    pub exo_ask_marks: Vec<f64>,
}

/// All random inputs of one path, for replay under common randomness.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ArrivalRecord(pub Vec<StepArrivals>);

#[derive(Clone, Copy, Debug)]
pub enum CountMode<'a> {
    /// Fresh draws from the `(seed, path)` streams.
    Sample { seed: u64, path: u64 },
    /// Replays recorded counts and marks. Option counts are kept as a
    /// first-order surrogate `n + dt (λ - λ_recorded)`.
    Replay(&'a ArrivalRecord),
}

/// Exogenous arrivals for step `k` drawn from the given intensities.
pub fn draw_exogenous(
    model: &UnderlyingModel,
    lambda_bid: f64,
    lambda_ask: f64,
    dt: f64,
    seed: u64,
    path: u64,
    k: u64,
) -> (Vec<f64>, Vec<f64>) {
    let nb = sample_arrival_count(lambda_bid, dt, &mut stream(seed, path, k, Channel::ExoBid));
    let na = sample_arrival_count(lambda_ask, dt, &mut stream(seed, path, k, Channel::ExoAsk));
    let mut rb = stream(seed, path, k, Channel::BidMarks);
    let mut ra = stream(seed, path, k, Channel::AskMarks);
    let bid = (0..nb).map(|_| model.marks_bid.sample(&mut rb)).collect();
    let ask = (0..na).map(|_| model.marks_ask.sample(&mut ra)).collect();
    (bid, ask)
}

/// Market and agent state at a grid point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StateRow {
    pub t: f64,
    pub p: f64,
    pub d: f64,
    pub s: f64,
    pub best_bid: f64,
    pub best_ask: f64,
    pub lambda_bid: f64,
    pub lambda_ask: f64,
    pub i: f64,
    pub q: f64,
    pub x: f64,
}

/// What happened during one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub reference: f64,
    pub delta: f64,
    pub sigma: f64,
    pub beta: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub option_lambda_ask: f64,
    pub option_lambda_bid: f64,
    pub dn_a: u64,
    pub dn_b: u64,
    pub dn_minus: u64,
    pub dn_plus: u64,
    pub dq: f64,
    pub option_cash: f64,
    pub exec_cash: f64,
    pub fee: f64,
    pub g: f64,
    pub h: f64,
}

/// One simulated path.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub x0: f64,
    pub dt: f64,
    pub states: Vec<StateRow>,
    pub steps: Vec<StepRecord>,
    pub liquidation: f64,
    pub terminal_reference: f64,
    pub terminal_delta: f64,
}

impl Trajectory {
    /// `X_T - X_0` recomputed from the step records.
    pub fn ledger_cash(&self) -> f64 {
        self.steps
            .iter()
            .fold(0.0, |x, r| x + r.option_cash + r.exec_cash - r.fee)
    }

    /// `dt Σ (g + h)` recomputed from the step records.
    pub fn ledger_penalty(&self) -> f64 {
        self.steps.iter().fold(0.0, |acc, r| acc + (r.g + r.h) * self.dt)
    }

    /// Objective in excess of the initial cash.
    pub fn excess(&self) -> f64 {
        self.ledger_cash() + self.liquidation - self.ledger_penalty()
    }

    pub fn trades(&self) -> usize {
        self.steps.iter().filter(|r| r.dq != 0.0).count()
    }

    pub const CSV_HEADER: [&'static str; 21] = [
        "time", "P", "D", "S", "B", "A", "b_ref", "delta", "beta", "alpha", "gamma", "dN_a", "dN_b", "dN_minus",
        "dN_plus", "I", "Q", "dQ", "X", "g", "h",
    ];

    /// One row per grid point; step fields are blank on the terminal row.
    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        let num = |v: f64| format!("{v}");
        self.states
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let mut row: Vec<String> = Vec::with_capacity(Self::CSV_HEADER.len());
                row.extend([s.t, s.p, s.d, s.s, s.best_bid, s.best_ask].map(num));
                match self.steps.get(k) {
                    Some(r) => {
                        row.extend([r.reference, r.delta, r.beta, r.alpha, r.gamma].map(num));
                        row.extend([r.dn_a, r.dn_b, r.dn_minus, r.dn_plus].map(|c| c.to_string()));
                        row.extend([s.i, s.q, r.dq, s.x, r.g, r.h].map(num));
                    }
                    None => {
                        row.extend([num(self.terminal_reference), num(self.terminal_delta)]);
                        row.extend(std::iter::repeat_n(String::new(), 7));
                        row.extend([num(s.i), num(s.q), String::new(), num(s.x)]);
                        row.extend([String::new(), String::new()]);
                    }
                }
                row
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(io_err(path))?;
        w.write_record(Self::CSV_HEADER).map_err(io_err(path))?;
        for row in self.csv_rows() {
            w.write_record(&row).map_err(io_err(path))?;
        }
        w.flush().map_err(|e| io_err(path)(e.into()))?;
        Ok(())
    }
}

pub(crate) fn io_err(path: &Path) -> impl Fn(csv::Error) -> ModelError + '_ {
    move |e| ModelError::Io(format!("cannot write {}: {e}", path.display()))
}

/// Differentiable totals of one path.
#[derive(Clone, Copy, Debug)]
pub struct PathTotals<R> {
    /// `X_T - X_0`.
    pub cash: R,
    /// `Σ dt (α λ^a - β λ^b)`: compensated option revenue.
    pub compensated_revenue: R,
    /// Hedge execution cash net of fees.
    pub execution: R,
    pub hedge_penalty: R,
    pub activity_penalty: R,
    pub liquidation: R,
    /// Second-order count term of the hedge penalty; zero-valued, gradient only.
    pub count_curvature: R,
}

impl<R: Real> PathTotals<R> {
    /// Realized objective in excess of the initial cash.
    pub fn realized(&self) -> R {
        self.cash + self.liquidation - self.hedge_penalty - self.activity_penalty
    }

    /// Training objective: option revenue replaced by its compensator.
    pub fn training(&self) -> R {
        self.compensated_revenue + self.execution + self.liquidation
            - self.hedge_penalty
            - self.activity_penalty
            - self.count_curvature
    }
}

pub struct PathOutput<R> {
    pub trajectory: Trajectory,
    pub arrivals: ArrivalRecord,
    pub totals: PathTotals<R>,
}

const FAULT_TOL: f64 = 1e-9;

/// Simulates one path of `env` under `strategy`.
pub fn simulate_path<R: Real>(
    env: &Environment,
    strategy: &Strategy,
    mode: CountMode<'_>,
    caches: &mut BlockCaches,
) -> Result<PathOutput<R>> {
    let grid = env.grid;
    let dt = grid.dt();
    let model = &env.underlying;
    let book = &model.book;
    let pricer = env.pricer();
    let target = env.activity_target();
    let zero = R::cst(0.0);

    let mut m: MarketState<R> = env.init.market.lift();
    let mut ag = AgentState {
        x: zero,
        q: R::cst(env.init.q),
        i: R::cst(env.init.i),
    };
    let mut tot = PathTotals {
        cash: zero,
        compensated_revenue: zero,
        execution: zero,
        hedge_penalty: zero,
        activity_penalty: zero,
        liquidation: zero,
        count_curvature: zero,
    };
    // Σ_j (λ_j - λ̄_j) dt: intensity moved off its sampling anchor so far
    let mut excess_flow = zero;
    let mut states = Vec::with_capacity(grid.steps + 1);
    let mut steps = Vec::with_capacity(grid.steps);
    let mut arrivals = Vec::with_capacity(grid.steps);
    states.push(state_row(0.0, &m, &ag, env.init.x));
    let mut reference = pricer.evaluate(0.0, &m);

    for k in 0..grid.steps {
        let t = grid.time(k);
        let obs = Observation {
            t,
            p: m.p,
            d: m.d,
            s: m.s,
            i: ag.i,
            q: ag.q,
            reference: reference.price,
            delta: reference.delta,
        };
        let act = strategy.act(&obs, caches)?;
        let (lam_b, lam_a) = strategy.intensities(&env.flow, &act, reference.price);

        let draws = match mode {
            CountMode::Sample { seed, path } => {
                let na = sample_arrival_count(lam_a.value(), dt, &mut stream(seed, path, k as u64, Channel::OptionAsk));
                let nb = sample_arrival_count(lam_b.value(), dt, &mut stream(seed, path, k as u64, Channel::OptionBid));
                let (bid, ask) = draw_exogenous(
                    model,
                    m.lambda_bid.value(),
                    m.lambda_ask.value(),
                    dt,
                    seed,
                    path,
                    k as u64,
                );
                StepArrivals {
                    option_ask: na,
                    option_bid: nb,
                    option_lambda_ask: lam_a.value(),
                    option_lambda_bid: lam_b.value(),
                    exo_bid_marks: bid,
                    exo_ask_marks: ask,
                }
            }
            CountMode::Replay(rec) => rec.0.get(k).cloned().ok_or_else(|| ModelError::SimulationFault {
                step: k,
                reason: "replay record shorter than the grid".into(),
            })?,
        };

        // option flow
        let dn_a = (lam_a * dt - draws.option_lambda_ask * dt) + draws.option_ask as f64;
        let dn_b = (lam_b * dt - draws.option_lambda_bid * dt) + draws.option_bid as f64;
        let i_next = ag.i + dn_b - dn_a;
        excess_flow = excess_flow + (lam_a + lam_b - (draws.option_lambda_ask + draws.option_lambda_bid)) * dt;
        let option_cash = act.alpha * dn_a - act.beta * dn_b;
        tot.compensated_revenue = tot.compensated_revenue + (act.alpha * lam_a - act.beta * lam_b) * dt;

        // underlying
        let decayed = model.decay(&m, dt);
        let flowed = model.apply_exogenous_flow(&decayed, &draws.exo_bid_marks, &draws.exo_ask_marks);

        // hedge
        let mut tracks = false;
        let (m_next, dq, exec, fee) = if strategy.hedges() {
            let ask_total = book.ask.total();
            let lo = (-book.available(Side::Bid, flowed.best_bid())).max_r(-ag.q - ask_total);
            let want = act.gamma * i_next - ag.q;
            tracks = want.value() >= lo.value() && want.value() <= ask_total;
            let dq = want.max_r(lo).min_r(R::cst(ask_total));
            let (m2, exec, fee) = if dq.value() > 0.0 {
                model.impulse_unchecked(&flowed, Side::Ask, dq)
            } else if dq.value() < 0.0 {
                model.impulse_unchecked(&flowed, Side::Bid, -dq)
            } else {
                let (m2, exec) = model.zero_impulse(&flowed, dq);
                (m2, exec, 0.0)
            };
            (m2, dq, exec, fee)
        } else {
            (flowed, zero, zero, 0.0)
        };

        let q_next = ag.q + dq;
        ag = AgentState {
            x: ag.x + option_cash + exec - fee,
            q: q_next,
            i: i_next,
        };
        m = m_next;
        check_state(k, &m, &ag, model)?;

        // penalties at t_{k+1}
        let t1 = grid.time(k + 1);
        let next_ref = pricer.evaluate(t1, &m);
        let g = hedge_penalty(env.penalty.kappa_hedge, ag.q, ag.i, next_ref.delta);
        let h = activity_penalty(env.penalty.kappa_act, target, lam_b, lam_a);
        tot.hedge_penalty = tot.hedge_penalty + g * dt;
        // d²g/dn² = 2κ a² for one more arrival, a = ∂(q + iΔ)/∂i
        let a = if tracks {
            act.gamma + next_ref.delta
        } else {
            next_ref.delta
        };
        tot.count_curvature = tot.count_curvature + a.sq() * excess_flow * (env.penalty.kappa_hedge * dt);
        tot.activity_penalty = tot.activity_penalty + h * dt;
        tot.execution = tot.execution + exec - fee;

        steps.push(StepRecord {
            reference: reference.price.value(),
            delta: reference.delta.value(),
            sigma: reference.sigma.value(),
            beta: act.beta.value(),
            alpha: act.alpha.value(),
            gamma: act.gamma.value(),
            option_lambda_ask: lam_a.value(),
            option_lambda_bid: lam_b.value(),
            dn_a: draws.option_ask,
            dn_b: draws.option_bid,
            dn_minus: draws.exo_bid_marks.len() as u64,
            dn_plus: draws.exo_ask_marks.len() as u64,
            dq: dq.value(),
            option_cash: option_cash.value(),
            exec_cash: exec.value(),
            fee,
            g: g.value(),
            h: h.value(),
        });
        states.push(state_row(t1, &m, &ag, env.init.x));
        arrivals.push(draws);
        reference = next_ref;
    }

    tot.cash = ag.x;
    tot.liquidation = liquidation_r(book, &env.option, ag.q, ag.i, m.p, m.s);
    let trajectory = Trajectory {
        x0: env.init.x,
        dt,
        states,
        steps,
        liquidation: tot.liquidation.value(),
        terminal_reference: reference.price.value(),
        terminal_delta: reference.delta.value(),
    };
    Ok(PathOutput {
        trajectory,
        arrivals: ArrivalRecord(arrivals),
        totals: tot,
    })
}

fn state_row<R: Real>(t: f64, m: &MarketState<R>, ag: &AgentState<R>, x0: f64) -> StateRow {
    StateRow {
        t,
        p: m.p.value(),
        d: m.d.value(),
        s: m.s.value(),
        best_bid: m.best_bid().value(),
        best_ask: m.best_ask().value(),
        lambda_bid: m.lambda_bid.value(),
        lambda_ask: m.lambda_ask.value(),
        i: ag.i.value(),
        q: ag.q.value(),
        x: x0 + ag.x.value(),
    }
}

fn check_state<R: Real>(k: usize, m: &MarketState<R>, ag: &AgentState<R>, model: &UnderlyingModel) -> Result<()> {
    let fault = |reason: String| Err(ModelError::SimulationFault { step: k, reason });
    let vals = [m.p, m.d, m.s, m.lambda_bid, m.lambda_ask, ag.x, ag.q, ag.i].map(|v| v.value());
    if vals.iter().any(|v| !v.is_finite()) {
        return fault(format!("non-finite state {vals:?}"));
    }
    let total = model.book.ask.total();
    if ag.q.value() < -total * (1.0 + FAULT_TOL) {
        return fault(format!("hedge {} below admissible bound {}", ag.q.value(), -total));
    }
    let scale = m.p.value().abs().max(1.0);
    if m.best_bid().value() < -FAULT_TOL * scale {
        return fault(format!("negative best bid {}", m.best_bid().value()));
    }
    Ok(())
}

/// Loss (negative training objective), its gradient with respect to the policy
/// weights, and the path output.
pub fn path_gradient(
    env: &Environment,
    policy: &Policy,
    mode: CountMode<'_>,
) -> Result<(f64, Vec<f64>, PathOutput<f64>)> {
    ad::reset();
    let mut caches = BlockCaches::default();
    let strategy = Strategy::Network(policy.clone());
    let out = simulate_path::<Var>(env, &strategy, mode, &mut caches)?;
    let loss = -out.totals.training();
    let mut grad = vec![0.0; policy.net.n_params()];
    let mut fault = None;
    ad::backward(loss, |tag, up| {
        match policy.block_backward(&caches, tag, up, &mut grad) {
            Ok(v) => v,
            Err(e) => {
                fault = Some(e);
                vec![0.0; crate::policy::N_FEATURES]
            }
        }
    });
    ad::reset();
    if let Some(e) = fault {
        return Err(e);
    }
    let totals = PathTotals {
        cash: out.totals.cash.value(),
        compensated_revenue: out.totals.compensated_revenue.value(),
        execution: out.totals.execution.value(),
        hedge_penalty: out.totals.hedge_penalty.value(),
        activity_penalty: out.totals.activity_penalty.value(),
        liquidation: out.totals.liquidation.value(),
        count_curvature: out.totals.count_curvature.value(),
    };
    Ok((
        loss.value(),
        grad,
        PathOutput {
            trajectory: out.trajectory,
            arrivals: out.arrivals,
            totals,
        },
    ))
}

/// Evaluates `-training objective` on `f64` (finite-difference counterpart of [`path_gradient`]).
pub fn path_loss(env: &Environment, policy: &Policy, mode: CountMode<'_>) -> Result<f64> {
    let strategy = Strategy::Network(policy.clone());
    let out = simulate_path::<f64>(env, &strategy, mode, &mut BlockCaches::default())?;
    Ok(-out.totals.training())
}

/// Monte Carlo estimate of the objective.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ObjectiveEstimate {
    pub paths: usize,
    pub x0: f64,
    /// Mean of `J - X_0`.
    pub mean_excess: f64,
    pub mean: f64,
    pub std_error: f64,
    pub mean_hedge_penalty: f64,
    pub mean_activity_penalty: f64,
    pub mean_liquidation: f64,
    pub mean_abs_terminal_inventory: f64,
    pub mean_trades: f64,
}

/// Simulates `paths` paths in parallel (results independent of the thread count).
pub fn simulate_batch(env: &Environment, strategy: &Strategy, paths: usize, seed: u64) -> Result<Vec<PathOutput<f64>>> {
    (0..paths as u64)
        .into_par_iter()
        .map(|p| {
            simulate_path::<f64>(
                env,
                strategy,
                CountMode::Sample { seed, path: p },
                &mut BlockCaches::default(),
            )
        })
        .collect()
}

pub fn objective_estimate(
    env: &Environment,
    strategy: &Strategy,
    paths: usize,
    seed: u64,
) -> Result<ObjectiveEstimate> {
    if paths == 0 {
        return Err(ModelError::InvalidParameter(
            "objective estimate needs at least one path".into(),
        ));
    }
    let outs = simulate_batch(env, strategy, paths, seed)?;
    Ok(summarize(env.init.x, &outs))
}

pub fn summarize(x0: f64, outs: &[PathOutput<f64>]) -> ObjectiveEstimate {
    let n = outs.len() as f64;
    let mean_of = |f: &dyn Fn(&PathOutput<f64>) -> f64| outs.iter().map(f).sum::<f64>() / n;
    let mean_excess = mean_of(&|o| o.totals.realized());
    let var = if outs.len() > 1 {
        outs.iter()
            .map(|o| (o.totals.realized() - mean_excess).powi(2))
            .sum::<f64>()
            / (n - 1.0)
    } else {
        0.0
    };
    ObjectiveEstimate {
        paths: outs.len(),
        x0,
        mean_excess,
        mean: x0 + mean_excess,
        std_error: (var / n).sqrt(),
        mean_hedge_penalty: mean_of(&|o| o.totals.hedge_penalty),
        mean_activity_penalty: mean_of(&|o| o.totals.activity_penalty),
        mean_liquidation: mean_of(&|o| o.totals.liquidation),
        mean_abs_terminal_inventory: mean_of(&|o| o.trajectory.states.last().unwrap().i.abs()),
        mean_trades: mean_of(&|o| o.trajectory.trades() as f64),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub paths: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

/// Per-epoch batch means.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub hedge_penalty: f64,
    pub activity_penalty: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LearningCurve(pub Vec<EpochMetrics>);

impl LearningCurve {
    /// Trailing moving average of one metric over `window` epochs.
    pub fn smoothed(&self, window: usize, f: impl Fn(&EpochMetrics) -> f64) -> Vec<f64> {
        let v: Vec<f64> = self.0.iter().map(f).collect();
        (0..v.len())
            .map(|k| {
                let lo = (k + 1).saturating_sub(window);
                v[lo..=k].iter().sum::<f64>() / (k + 1 - lo) as f64
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(io_err(path))?;
        for m in &self.0 {
            w.serialize(m).map_err(io_err(path))?;
        }
        if self.0.is_empty() {
            w.write_record(["epoch", "return", "hedge_penalty", "activity_penalty", "loss"])
                .map_err(io_err(path))?;
        }
        w.flush().map_err(|e| io_err(path)(e.into()))?;
        Ok(())
    }
}

/// Seed of the batch drawn in `epoch`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Policy-gradient training with Adam. Gradients are reduced in path order.
pub fn train(env: &Environment, mut policy: Policy, cfg: &TrainConfig) -> Result<(Policy, LearningCurve)> {
    if cfg.paths == 0 {
        return Err(ModelError::InvalidParameter(
            "training needs at least one path per epoch".into(),
        ));
    }
    let n = policy.net.n_params();
    let mut opt = Adam::new(n, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let mut curve = LearningCurve::default();
    for epoch in 0..cfg.epochs {
        let seed = epoch_seed(cfg.seed, epoch);
        let results: Vec<(f64, Vec<f64>, PathTotals<f64>)> = (0..cfg.paths as u64)
            .into_par_iter()
            .map(|p| path_gradient(env, &policy, CountMode::Sample { seed, path: p }).map(|(l, g, o)| (l, g, o.totals)))
            .collect::<Result<_>>()
            .map_err(|e| ModelError::TrainingAborted {
                epoch,
                reason: e.to_string(),
            })?;
        let m = cfg.paths as f64;
        let mut grad = vec![0.0; n];
        let (mut loss, mut ret, mut hp, mut ap) = (0.0, 0.0, 0.0, 0.0);
        for (l, g, t) in &results {
            for (acc, gi) in grad.iter_mut().zip(g) {
                *acc += gi;
            }
            loss += l;
            ret += t.realized();
            hp += t.hedge_penalty;
            ap += t.activity_penalty;
        }
        grad.iter_mut().for_each(|g| *g /= m);
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            ret: env.init.x + ret / m,
            hedge_penalty: hp / m,
            activity_penalty: ap / m,
            loss: loss / m,
        };
        if !metrics.loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(ModelError::TrainingAborted {
                epoch: epoch + 1,
                reason: format!(
                    "non-finite loss or gradient (loss {}, return {}, hedge {}, activity {})",
                    metrics.loss, metrics.ret, metrics.hedge_penalty, metrics.activity_penalty
                ),
            });
        }
        curve.0.push(metrics);
        opt.step(&mut policy.net.params, &mut grad);
    }
    Ok((policy, curve))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dynamics::tests::baseline_underlying;
    use crate::flows::SigmoidIntensity;
    use crate::policy::ActionScales;

    pub(crate) fn baseline_env(steps: usize) -> Environment {
        let t = 25.0 / 252.0;
        let s = SigmoidIntensity {
            lambda_bar: 50_400.0,
            k: 50.0,
            mu: 0.0,
        };
        Environment::new(
            baseline_underlying(),
            OptionSpec {
                strike: 98.0,
                maturity: t,
            },
            OptionIntensityParams { bid: s, ask: s },
            PenaltyParams {
                kappa_hedge: 4.0,
                theta_flow: 0.05,
                kappa_act: 0.1,
            },
            GridSpec { maturity: t, steps },
            InitialState {
                market: MarketState {
                    p: 100.0,
                    d: 0.0,
                    s: 0.1,
                    lambda_bid: 7560.0,
                    lambda_ask: 7560.0,
                },
                x: 0.0,
                q: 0.0,
                i: 0.0,
            },
        )
        .unwrap()
    }

    fn sample(env: &Environment, strategy: &Strategy, seed: u64) -> PathOutput<f64> {
        simulate_path(
            env,
            strategy,
            CountMode::Sample { seed, path: 0 },
            &mut BlockCaches::default(),
        )
        .unwrap()
    }

    #[test]
    fn inert_agent_keeps_holdings() {
        let mut env = baseline_env(20);
        env.init.i = 5.0;
        env.init.q = 3.0;
        env.init.x = 7.0;
        let out = sample(&env, &Strategy::Inert, 1);
        let last = out.trajectory.states.last().unwrap();
        assert_eq!((last.x, last.q, last.i), (7.0, 3.0, 5.0));
        assert_eq!(out.trajectory.trades(), 0);
        for r in &out.trajectory.steps {
            assert_eq!((r.dn_a, r.dn_b), (0, 0));
        }
    }

    #[test]
    fn quiescent_step_only_decays() {
        let mut env = baseline_env(10);
        env.underlying.hawkes_bid.mu = 0.0;
        env.underlying.hawkes_ask.mu = 0.0;
        env.init.market.lambda_bid = 0.0;
        env.init.market.lambda_ask = 0.0;
        env.init.market.s = 0.02;
        let out = sample(&env, &Strategy::Inert, 2);
        for s in &out.trajectory.states {
            assert_eq!((s.p, s.s, s.x), (100.0, 0.02, 0.0));
        }
    }

    #[test]
    fn ledger_is_consistent_and_deterministic() {
        let env = baseline_env(50);
        let strategy = Strategy::Fixed {
            bid_offset: 0.05,
            ask_offset: 0.05,
            gamma: -0.5,
        };
        let a = sample(&env, &strategy, 11);
        let b = sample(&env, &strategy, 11);
        assert_eq!(a.trajectory, b.trajectory);
        let tr = &a.trajectory;
        assert_eq!(tr.states.len(), 51);
        assert_eq!(tr.steps.len(), 50);
        assert_eq!(tr.states.last().unwrap().x - tr.x0, tr.ledger_cash());
        assert!((tr.excess() - a.totals.realized()).abs() < 1e-10);
        for (k, r) in tr.steps.iter().enumerate() {
            assert!(r.beta >= 0.0 && r.beta <= r.alpha);
            let di = tr.states[k + 1].i - tr.states[k].i;
            assert_eq!(di, r.dn_b as f64 - r.dn_a as f64);
            let expect = r.alpha * r.dn_a as f64 - r.beta * r.dn_b as f64;
            assert!((r.option_cash - expect).abs() < 1e-12);
        }
        assert!(tr.trades() > 0);
    }

    #[test]
    fn hedge_is_clipped_to_bid_depth() {
        let mut env = baseline_env(1);
        env.init.q = 60.0;
        env.init.i = 0.0;
        let strategy = Strategy::Fixed {
            bid_offset: 10.0,
            ask_offset: 10.0,
            gamma: 0.0,
        };
        // silence the market so the book is untouched before the hedge
        env.underlying.hawkes_bid.mu = 0.0;
        env.underlying.hawkes_ask.mu = 0.0;
        env.init.market.lambda_bid = 0.0;
        env.init.market.lambda_ask = 0.0;
        let out = sample(&env, &strategy, 3);
        let r = out.trajectory.steps[0];
        assert_eq!(r.dn_a + r.dn_b, 0);
        assert!((r.dq + 50.0).abs() < 1e-12, "dq {}", r.dq);
        assert!((out.trajectory.states[1].q - 10.0).abs() < 1e-12);
    }

    #[test]
    fn ask_arrival_ledger() {
        let env = baseline_env(50);
        let strategy = Strategy::Fixed {
            bid_offset: 1.0,
            ask_offset: 0.08,
            gamma: 0.0,
        };
        let out = sample(&env, &strategy, 5);
        let r = out
            .trajectory
            .steps
            .iter()
            .find(|r| r.dn_a == 1 && r.dn_b == 0)
            .expect("a step with a single ask arrival");
        assert!((r.option_cash - r.alpha).abs() < 1e-12);
    }

    #[test]
    fn replay_reproduces_sampled_path() {
        let env = baseline_env(30);
        let pol = Policy::new(&[8], env.normalizer(), ActionScales::default(), 4);
        let strategy = Strategy::Network(pol.clone());
        let base = sample(&env, &strategy, 9);
        let replay = simulate_path::<f64>(
            &env,
            &strategy,
            CountMode::Replay(&base.arrivals),
            &mut BlockCaches::default(),
        )
        .unwrap();
        assert_eq!(base.trajectory, replay.trajectory);
        let (loss, _, out) = path_gradient(&env, &pol, CountMode::Sample { seed: 9, path: 0 }).unwrap();
        assert_eq!(out.trajectory, base.trajectory);
        assert_eq!(loss, -base.totals.training());
    }

    #[test]
    fn tape_gradient_matches_replayed_finite_differences() {
        let env = baseline_env(10);
        let mut pol = Policy::new(&[6], env.normalizer(), ActionScales::default(), 8);
        for (k, p) in pol.net.params.iter_mut().enumerate() {
            *p += 0.05 * ((k * 37 % 11) as f64 - 5.0) / 5.0;
        }
        let (_, grad, base) = path_gradient(&env, &pol, CountMode::Sample { seed: 4, path: 0 }).unwrap();
        let replay = CountMode::Replay(&base.arrivals);
        let n = pol.net.n_params();
        for k in (0..n).step_by(n / 10) {
            let eps = 1e-6 * pol.net.params[k].abs().max(1.0);
            let mut up = pol.clone();
            up.net.params[k] += eps;
            let mut dn = pol.clone();
            dn.net.params[k] -= eps;
            let fd = (path_loss(&env, &up, replay).unwrap() - path_loss(&env, &dn, replay).unwrap()) / (2.0 * eps);
            let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-8);
            assert!(rel < 1e-4, "param {k}: fd {fd} tape {}", grad[k]);
        }
    }

    #[test]
    fn zero_learning_rate_leaves_policy_unchanged() {
        let env = baseline_env(5);
        let pol = Policy::new(&[4], env.normalizer(), ActionScales::default(), 1);
        let cfg = TrainConfig {
            epochs: 3,
            paths: 4,
            lr: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 1,
        };
        let (trained, curve) = train(&env, pol.clone(), &cfg).unwrap();
        assert_eq!(trained, pol);
        assert_eq!(curve.0.len(), 3);
    }

    #[test]
    fn smoothing_window() {
        let curve = LearningCurve(
            (1..=4)
                .map(|e| EpochMetrics {
                    epoch: e,
                    ret: e as f64,
                    hedge_penalty: 0.0,
                    activity_penalty: 0.0,
                    loss: 0.0,
                })
                .collect(),
        );
        assert_eq!(curve.smoothed(2, |m| m.ret), vec![1.0, 1.5, 2.5, 3.5]);
    }

    #[test]
    fn std_error_shrinks_with_paths() {
        let env = baseline_env(10);
        let strategy = Strategy::Fixed {
            bid_offset: 0.05,
            ask_offset: 0.05,
            gamma: -0.5,
        };
        let se: Vec<f64> = [100, 1000, 10_000]
            .iter()
            .map(|&m| objective_estimate(&env, &strategy, m, 3).unwrap().std_error)
            .collect();
        for w in se.windows(2) {
            let ratio = w[0] / w[1];
            assert!((ratio / 10f64.sqrt() - 1.0).abs() < 0.2, "ratio {ratio}");
        }
    }
}
