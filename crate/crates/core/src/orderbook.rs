//! Static order-book shapes and book-walk execution values.
//!
//! Each side is a piecewise-constant density on the depth axis (price
//! distance from the best quote, `x >= 0`). Cumulative depth `Φ` is then
//! piecewise linear, and both its generalized inverse and the integral of the
//! inverse have exact closed forms, so no quadrature is needed on the hot path.

use serde::{Deserialize, Serialize};

use crate::ad::Real;
use crate::error::{ModelError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Bid,
    Ask,
}

/// One constant-density piece of a book side, in depth coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub density: f64,
}

/// Linear book with constant density up to a finite cutoff on each side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearBookParams {
    pub c_bid: f64,
    pub c_ask: f64,
    pub cutoff_bid: f64,
    pub cutoff_ask: f64,
}

#[derive(Clone, Copy, Debug)]
struct Piece {
    start: f64,
    end: f64,
    density: f64,
    cum_start: f64,
    cum_end: f64,
}

/// Cumulative depth of one side of the book.
#[derive(Clone, Debug)]
pub struct SideDepth {
    pieces: Vec<Piece>,
    cutoff: f64,
    total: f64,
}

impl SideDepth {
    pub fn new(segments: &[Segment]) -> Result<Self> {
        let mut segs: Vec<Segment> = segments.to_vec();
        for s in &segs {
            if !(s.start.is_finite() && s.end.is_finite() && s.density.is_finite()) {
                return Err(ModelError::InvalidParameter(format!("non-finite segment {s:?}")));
            }
            if s.start < 0.0 || s.end <= s.start {
                return Err(ModelError::InvalidParameter(format!(
                    "segment must satisfy 0 <= start < end, got {s:?}"
                )));
            }
            if s.density < 0.0 {
                return Err(ModelError::InvalidParameter(format!("negative density in {s:?}")));
            }
        }
        segs.sort_by(|a, b| a.start.total_cmp(&b.start));
        for w in segs.windows(2) {
            if w[1].start < w[0].end {
                return Err(ModelError::InvalidParameter(format!(
                    "overlapping segments {:?} and {:?}",
                    w[0], w[1]
                )));
            }
        }
        let mut pieces = Vec::with_capacity(segs.len());
        let mut cum = 0.0;
        for s in segs.iter().filter(|s| s.density > 0.0) {
            let mass = s.density * (s.end - s.start);
            pieces.push(Piece {
                start: s.start,
                end: s.end,
                density: s.density,
                cum_start: cum,
                cum_end: cum + mass,
            });
            cum += mass;
        }
        if pieces.is_empty() {
            return Err(ModelError::InvalidParameter("book side has no liquidity".into()));
        }
        let cutoff = pieces.last().map(|p| p.end).unwrap_or(0.0);
        Ok(SideDepth {
            pieces,
            cutoff,
            total: cum,
        })
    }

    pub fn linear(density: f64, cutoff: f64) -> Result<Self> {
        Self::new(&[Segment {
            start: 0.0,
            end: cutoff,
            density,
        }])
    }

    /// Depth beyond which the density vanishes.
    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    /// `Φ(+∞)`.
    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn max_density(&self) -> f64 {
        self.pieces.iter().map(|p| p.density).fold(0.0, f64::max)
    }

    /// Right derivative of `Φ^{-1}` at zero volume.
    pub fn touch_slope(&self) -> f64 {
        1.0 / self.pieces[0].density
    }

    /// Single segment starting at the touch, i.e. a linear book side.
    pub fn is_linear(&self) -> bool {
        self.pieces.len() == 1 && self.pieces[0].start == 0.0
    }

    pub fn segments(&self) -> Vec<Segment> {
        self.pieces
            .iter()
            .map(|p| Segment {
                start: p.start,
                end: p.end,
                density: p.density,
            })
            .collect()
    }

    /// `Φ(x)` for `x >= 0`.
    pub fn depth<R: Real>(&self, x: R) -> R {
        let xv = x.value();
        let mut out = R::cst(0.0);
        for p in &self.pieces {
            if xv < p.start {
                break;
            }
            out = if xv >= p.end {
                R::cst(p.cum_end)
            } else {
                (x - p.start) * p.density + p.cum_start
            };
        }
        out
    }

    /// `inf { x >= 0 : Φ(x) >= y }`; saturates at the cutoff for `y` above total depth.
    pub fn inverse<R: Real>(&self, y: R) -> R {
        let yv = y.value();
        if yv <= 0.0 {
            return R::cst(0.0);
        }
        for p in &self.pieces {
            if p.cum_end >= yv {
                return (y - p.cum_start) / p.density + p.start;
            }
        }
        R::cst(self.cutoff)
    }

    /// `∫_0^q Φ^{-1}(y) dy` for `0 <= q <= Φ(+∞)`.
    pub fn inverse_integral<R: Real>(&self, q: R) -> R {
        let qv = q.value();
        if qv <= 0.0 {
            return R::cst(0.0);
        }
        let mut full = 0.0;
        for p in &self.pieces {
            if p.cum_end >= qv {
                let r = q - p.cum_start;
                return r * p.start + r.sq() / (2.0 * p.density) + full;
            }
            let w = p.cum_end - p.cum_start;
            full += p.start * w + w * w / (2.0 * p.density);
        }
        // beyond total depth: the extra volume walks to the cutoff
        (q - self.total) * self.cutoff + full
    }
}

/// Time-invariant two-sided book shape.
#[derive(Clone, Debug)]
pub struct OrderBookShape {
    pub bid: SideDepth,
    pub ask: SideDepth,
}

impl OrderBookShape {
    /// Bid segments are given on the price axis `u <= 0`, ask segments on `u >= 0`.
    pub fn from_segments(bid_u: &[Segment], ask_u: &[Segment]) -> Result<Self> {
        let mut bid = Vec::with_capacity(bid_u.len());
        for s in bid_u {
            if s.end > 0.0 || s.start >= s.end {
                return Err(ModelError::InvalidParameter(format!(
                    "bid segments must satisfy u_start < u_end <= 0, got {s:?}"
                )));
            }
            bid.push(Segment {
                start: -s.end,
                end: -s.start,
                density: s.density,
            });
        }
        Ok(OrderBookShape {
            bid: SideDepth::new(&bid)?,
            ask: SideDepth::new(ask_u)?,
        })
    }

    pub fn linear(p: LinearBookParams) -> Result<Self> {
        if p.c_bid <= 0.0 || p.c_ask <= 0.0 || p.cutoff_bid <= 0.0 || p.cutoff_ask <= 0.0 {
            return Err(ModelError::InvalidParameter(format!(
                "linear book needs positive densities and cutoffs, got {p:?}"
            )));
        }
        Ok(OrderBookShape {
            bid: SideDepth::linear(p.c_bid, p.cutoff_bid)?,
            ask: SideDepth::linear(p.c_ask, p.cutoff_ask)?,
        })
    }

    pub fn side(&self, side: Side) -> &SideDepth {
        match side {
            Side::Bid => &self.bid,
            Side::Ask => &self.ask,
        }
    }

    /// Largest density level on either side.
    pub fn max_density(&self) -> f64 {
        self.bid.max_density().max(self.ask.max_density())
    }

    /// Volume executable against `side`: `Φ_B(B)` on the bid, `Φ_A(+∞)` on the ask.
    pub fn available<R: Real>(&self, side: Side, best_bid: R) -> R {
        match side {
            Side::Bid => self.bid.depth(best_bid.max_r(R::cst(0.0))),
            Side::Ask => R::cst(self.ask.total),
        }
    }

    /// `Φ_side(x)`; on the bid side the depth axis is capped at the best bid.
    pub fn cumulative_depth(&self, side: Side, x: f64, best_bid: f64) -> Result<f64> {
        if !(x >= 0.0) {
            return Err(ModelError::Domain(format!("depth distance must be >= 0, got {x}")));
        }
        Ok(match side {
            Side::Bid => self.bid.depth(x.min(best_bid.max(0.0))),
            Side::Ask => self.ask.depth(x),
        })
    }

    /// Generalized inverse of the cumulative depth.
    pub fn inverse_depth(&self, side: Side, y: f64, best_bid: f64) -> Result<f64> {
        if !(y >= 0.0) {
            return Err(ModelError::Domain(format!("volume must be >= 0, got {y}")));
        }
        let avail = self.available(side, best_bid);
        if y > avail {
            return Err(ModelError::LiquidityExceeded {
                requested: y,
                available: avail,
            });
        }
        Ok(self.side(side).inverse(y))
    }

    /// Revenue of selling `q` into the bid (`P_B`) or cost of buying `q` from the ask (`P_A`).
    pub fn execution_value(&self, side: Side, best_quote: f64, q: f64) -> Result<f64> {
        if !(q >= 0.0) {
            return Err(ModelError::Domain(format!("volume must be >= 0, got {q}")));
        }
        let avail = self.available(side, best_quote);
        if q > avail {
            return Err(ModelError::LiquidityExceeded {
                requested: q,
                available: avail,
            });
        }
        Ok(self.execution_value_r(side, best_quote, q))
    }

    /// Unchecked execution value; callers guarantee `0 <= q <= available`.
    pub fn execution_value_r<R: Real>(&self, side: Side, best_quote: R, q: R) -> R {
        match side {
            Side::Bid => best_quote * q - self.bid.inverse_integral(q),
            Side::Ask => best_quote * q + self.ask.inverse_integral(q),
        }
    }
}
