//! Scalar reverse-mode differentiation.
//!
//! The simulator is written once against the [`Real`] trait and runs either
//! on plain `f64` (evaluation, property checks) or on [`Var`], a handle into a
//! thread-local tape (training). Constants never touch the tape, so `Var`
//! arithmetic against configuration values costs one node at most.
//!
//! Besides scalar nodes the tape supports opaque *blocks*: a multi-input,
//! multi-output sub-computation whose backward pass is supplied by the caller
//! at sweep time. The policy network is recorded this way, one block per
//! decision, instead of as thousands of scalar nodes.

use std::cell::RefCell;
use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::math;

/// Numeric type the simulator is generic over.
pub trait Real:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    /// True when values are recorded on the tape.
    const TAPED: bool;

    fn cst(v: f64) -> Self;
    fn value(self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn softplus(self) -> Self;
    fn sigmoid(self) -> Self;
    fn norm_cdf(self) -> Self;

    /// Records an opaque block. For `f64` this just returns `outputs`.
    fn block(inputs: &[Self], outputs: &[f64], tag: usize) -> Vec<Self>;

    fn max_r(self, other: Self) -> Self {
        if self.value() >= other.value() {
            self
        } else {
            other
        }
    }

    fn min_r(self, other: Self) -> Self {
        if self.value() <= other.value() {
            self
        } else {
            other
        }
    }

    fn pos_part(self) -> Self {
        if self.value() > 0.0 {
            self
        } else {
            Self::cst(0.0)
        }
    }

    fn sq(self) -> Self {
        self * self
    }

    fn rsub(self, lhs: f64) -> Self {
        -self + lhs
    }
}

impl Real for f64 {
    const TAPED: bool = false;

    fn cst(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn softplus(self) -> Self {
        math::softplus(self)
    }
    fn sigmoid(self) -> Self {
        math::sigmoid(self)
    }
    fn norm_cdf(self) -> Self {
        math::norm_cdf(self)
    }
    fn block(_inputs: &[Self], outputs: &[f64], _tag: usize) -> Vec<Self> {
        outputs.to_vec()
    }
}

const NONE: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
}

struct Block {
    inputs: Vec<u32>,
    first_out: u32,
    n_out: u32,
    tag: usize,
}

#[derive(Default)]
struct Tape {
    nodes: Vec<Node>,
    blocks: Vec<Block>,
}

thread_local! {
    static TAPE: RefCell<Tape> = RefCell::new(Tape::default());
}

fn push(parents: [u32; 2], partials: [f64; 2]) -> u32 {
    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        let idx = t.nodes.len() as u32;
        t.nodes.push(Node { parents, partials });
        idx
    })
}

/// Clears the current thread's tape. Outstanding `Var`s become invalid.
pub fn reset() {
    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        t.nodes.clear();
        t.blocks.clear();
    });
}

/// Number of nodes recorded on the current thread's tape.
pub fn len() -> usize {
    TAPE.with(|t| t.borrow().nodes.len())
}

/// A value recorded on the thread-local tape.
#[derive(Clone, Copy, Debug)]
pub struct Var {
    idx: u32,
    val: f64,
}

impl Var {
    /// New independent variable.
    pub fn leaf(val: f64) -> Self {
        let idx = push([NONE, NONE], [0.0, 0.0]);
        Var { idx, val }
    }

    pub fn is_constant(&self) -> bool {
        self.idx == NONE
    }

    fn unary(self, val: f64, d: f64) -> Var {
        if self.idx == NONE {
            return Var { idx: NONE, val };
        }
        Var {
            idx: push([self.idx, NONE], [d, 0.0]),
            val,
        }
    }

    fn binary(a: Var, b: Var, val: f64, da: f64, db: f64) -> Var {
        match (a.idx == NONE, b.idx == NONE) {
            (true, true) => Var { idx: NONE, val },
            (false, true) => Var {
                idx: push([a.idx, NONE], [da, 0.0]),
                val,
            },
            (true, false) => Var {
                idx: push([b.idx, NONE], [db, 0.0]),
                val,
            },
            (false, false) => Var {
                idx: push([a.idx, b.idx], [da, db]),
                val,
            },
        }
    }
}

/// Adjoints produced by [`backward`].
pub struct Adjoints(Vec<f64>);

impl Adjoints {
    pub fn wrt(&self, v: Var) -> f64 {
        if v.idx == NONE {
            0.0
        } else {
            self.0[v.idx as usize]
        }
    }
}

/// Reverse sweep from `output`.
///
/// `block_backward(tag, output_adjoints)` is called once per recorded block,
/// after all of the block's outputs have received their adjoints, and must
/// return the adjoints of the block inputs (same order as recorded).
pub fn backward<F>(output: Var, mut block_backward: F) -> Adjoints
where
    F: FnMut(usize, &[f64]) -> Vec<f64>,
{
    TAPE.with(|t| {
        let t = t.borrow();
        let mut adj = vec![0.0; t.nodes.len()];
        if output.idx == NONE {
            return Adjoints(adj);
        }
        adj[output.idx as usize] = 1.0;
        let mut next_block = t.blocks.len();
        for i in (0..=output.idx as usize).rev() {
            let a = adj[i];
            let node = t.nodes[i];
            if a != 0.0 {
                for k in 0..2 {
                    let p = node.parents[k];
                    if p != NONE {
                        adj[p as usize] += a * node.partials[k];
                    }
                }
            }
            while next_block > 0 && t.blocks[next_block - 1].first_out as usize >= i {
                let b = &t.blocks[next_block - 1];
                if b.first_out as usize == i {
                    let lo = b.first_out as usize;
                    let out_adj = &adj[lo..lo + b.n_out as usize];
                    if out_adj.iter().any(|&x| x != 0.0) {
                        let in_adj = block_backward(b.tag, out_adj);
                        debug_assert_eq!(in_adj.len(), b.inputs.len());
                        for (&inp, g) in b.inputs.iter().zip(in_adj) {
                            if inp != NONE {
                                adj[inp as usize] += g;
                            }
                        }
                    }
                    next_block -= 1;
                } else if (b.first_out as usize) > i {
                    // block recorded after the output node; irrelevant
                    next_block -= 1;
                } else {
                    break;
                }
            }
        }
        Adjoints(adj)
    })
}

impl Real for Var {
    const TAPED: bool = true;

    fn cst(v: f64) -> Self {
        Var { idx: NONE, val: v }
    }
    fn value(self) -> f64 {
        self.val
    }
    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }
    fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }
    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.unary(s, 0.5 / s)
    }
    fn tanh(self) -> Self {
        let th = self.val.tanh();
        self.unary(th, 1.0 - th * th)
    }
    fn softplus(self) -> Self {
        self.unary(math::softplus(self.val), math::sigmoid(self.val))
    }
    fn sigmoid(self) -> Self {
        let s = math::sigmoid(self.val);
        self.unary(s, s * (1.0 - s))
    }
    fn norm_cdf(self) -> Self {
        self.unary(math::norm_cdf(self.val), math::norm_pdf(self.val))
    }
    fn block(inputs: &[Self], outputs: &[f64], tag: usize) -> Vec<Self> {
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            let first_out = t.nodes.len() as u32;
            for _ in outputs {
                t.nodes.push(Node {
                    parents: [NONE, NONE],
                    partials: [0.0, 0.0],
                });
            }
            t.blocks.push(Block {
                inputs: inputs.iter().map(|v| v.idx).collect(),
                first_out,
                n_out: outputs.len() as u32,
                tag,
            });
            outputs
                .iter()
                .enumerate()
                .map(|(k, &val)| Var {
                    idx: first_out + k as u32,
                    val,
                })
                .collect()
        })
    }
}

impl Add for Var {
    type Output = Var;
    fn add(self, rhs: Var) -> Var {
        Var::binary(self, rhs, self.val + rhs.val, 1.0, 1.0)
    }
}

impl Sub for Var {
    type Output = Var;
    fn sub(self, rhs: Var) -> Var {
        Var::binary(self, rhs, self.val - rhs.val, 1.0, -1.0)
    }
}

impl Mul for Var {
    type Output = Var;
    fn mul(self, rhs: Var) -> Var {
        Var::binary(self, rhs, self.val * rhs.val, rhs.val, self.val)
    }
}

impl Div for Var {
    type Output = Var;
    fn div(self, rhs: Var) -> Var {
        let q = self.val / rhs.val;
        Var::binary(self, rhs, q, 1.0 / rhs.val, -q / rhs.val)
    }
}

impl Neg for Var {
    type Output = Var;
    fn neg(self) -> Var {
        self.unary(-self.val, -1.0)
    }
}

impl Add<f64> for Var {
    type Output = Var;
    fn add(self, rhs: f64) -> Var {
        self.unary(self.val + rhs, 1.0)
    }
}

impl Sub<f64> for Var {
    type Output = Var;
    fn sub(self, rhs: f64) -> Var {
        self.unary(self.val - rhs, 1.0)
    }
}

impl Mul<f64> for Var {
    type Output = Var;
    fn mul(self, rhs: f64) -> Var {
        self.unary(self.val * rhs, rhs)
    }
}

impl Div<f64> for Var {
    type Output = Var;
    fn div(self, rhs: f64) -> Var {
        self.unary(self.val / rhs, 1.0 / rhs)
    }
}
