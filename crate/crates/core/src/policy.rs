//! Feed-forward quoting/hedging policy with a hand-written backward pass and Adam.
//!
//! The network maps eight normalized features to three raw outputs which are
//! turned into an option bid `β`, an ask `α = β + width` and a hedge ratio
//! `γ ∈ [-1, 1]`. Inside the simulator the network is recorded on the tape as
//! a single block per decision; [`Mlp::backward`] supplies its adjoints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ad::Real;
use crate::error::{ModelError, Result};

pub const N_FEATURES: usize = 8;
pub const N_OUTPUTS: usize = 3;
const CHECKPOINT_VERSION: u32 = 1;

/// Dense ReLU network stored as one flat parameter vector.
///
/// Layer `l` occupies `W_l` (row-major, `out × in`) followed by `b_l`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    pub params: Vec<f64>,
}

/// Activations kept from a forward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    acts: Vec<Vec<f64>>,
}

impl Mlp {
    /// He-initialized hidden layers and a zero output layer.
    pub fn new(n_in: usize, hidden: &[usize], n_out: usize, seed: u64) -> Self {
        let mut sizes = vec![n_in];
        sizes.extend_from_slice(hidden);
        sizes.push(n_out);
        let n_layers = sizes.len() - 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for l in 0..n_layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let last = l + 1 == n_layers;
            for _ in 0..fan_in * fan_out {
                let z: f64 = rng.sample(StandardNormal);
                params.push(if last { 0.0 } else { z * std });
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Mlp { sizes, params }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn layer_offsets(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut off = 0;
        self.sizes.windows(2).map(move |w| {
            let o = off;
            off += w[0] * w[1] + w[1];
            (o, w[0], w[1])
        })
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, MlpCache) {
        assert_eq!(x.len(), self.sizes[0], "input width");
        let n_layers = self.sizes.len() - 1;
        let mut acts = vec![x.to_vec()];
        for (l, (off, n_in, n_out)) in self.layer_offsets().enumerate() {
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let prev = acts.last().unwrap();
            let mut next: Vec<f64> = (0..n_out)
                .map(|j| {
                    let row = &w[j * n_in..(j + 1) * n_in];
                    b[j] + row.iter().zip(prev).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            if l + 1 < n_layers {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(next);
        }
        (acts.last().unwrap().clone(), MlpCache { acts })
    }

    /// Accumulates `∂(upstream·out)/∂θ` into `grad` and returns the input adjoints.
    pub fn backward(&self, cache: &MlpCache, upstream: &[f64], grad: &mut [f64]) -> Vec<f64> {
        assert_eq!(grad.len(), self.params.len(), "gradient buffer shape");
        let layers: Vec<_> = self.layer_offsets().collect();
        let mut delta = upstream.to_vec();
        for (l, &(off, n_in, n_out)) in layers.iter().enumerate().rev() {
            let input = &cache.acts[l];
            for j in 0..n_out {
                let dj = delta[j];
                if dj == 0.0 {
                    continue;
                }
                let gw = &mut grad[off + j * n_in..off + (j + 1) * n_in];
                for (g, a) in gw.iter_mut().zip(input) {
                    *g += dj * a;
                }
                grad[off + n_in * n_out + j] += dj;
            }
            let w = &self.params[off..off + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for j in 0..n_out {
                let dj = delta[j];
                if dj != 0.0 {
                    for (p, wij) in prev.iter_mut().zip(&w[j * n_in..(j + 1) * n_in]) {
                        *p += dj * wij;
                    }
                }
            }
            if l > 0 {
                for (p, a) in prev.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        delta
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One descent step on `params` along `grad`; clears `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &mut [f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for k in 0..params.len() {
            let g = grad[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            params[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            grad[k] = 0.0;
        }
    }
}

/// Affine feature normalization, fixed at configuration time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub horizon: f64,
    pub p0: f64,
    pub b0: f64,
    pub delta: f64,
    pub price_scale: f64,
    pub impact_scale: f64,
    pub spread_scale: f64,
    pub option_scale: f64,
    pub hedge_scale: f64,
}

impl Normalizer {
    pub fn new(horizon: f64, p0: f64, b0: f64, delta: f64) -> Self {
        Normalizer {
            horizon,
            p0,
            b0,
            delta,
            price_scale: 1.0,
            impact_scale: 0.1,
            spread_scale: 0.1,
            option_scale: 100.0,
            hedge_scale: 50.0,
        }
    }
}

/// Raw observation handed to a policy.
#[derive(Clone, Copy, Debug)]
pub struct Observation<R> {
    pub t: f64,
    pub p: R,
    pub d: R,
    pub s: R,
    pub i: R,
    pub q: R,
    pub reference: R,
    pub delta: R,
}

impl<R: Real> Observation<R> {
    pub fn features(&self, n: &Normalizer) -> [R; N_FEATURES] {
        [
            R::cst((n.horizon - self.t) / n.horizon),
            (self.p - n.p0) / n.price_scale,
            self.d / n.impact_scale,
            (self.s - n.delta) / n.spread_scale,
            self.i / n.option_scale,
            self.q / n.hedge_scale,
            (self.reference - n.b0) / n.price_scale,
            self.delta,
        ]
    }
}

/// Option quotes and hedge ratio for one step.
#[derive(Clone, Copy, Debug)]
pub struct PolicyAction<R> {
    pub beta: R,
    pub alpha: R,
    pub gamma: R,
}

/// Price scales of the quote head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionScales {
    pub quote: f64,
    pub width: f64,
}

impl Default for ActionScales {
    fn default() -> Self {
        // symmetric around the reference at init: offset = width/2
        ActionScales { quote: 0.1, width: 0.2 }
    }
}

/// Maps raw network outputs to a feasible action.
pub fn action_from_raw<R: Real>(raw: &[R], reference: R, scales: &ActionScales) -> PolicyAction<R> {
    let offset = raw[0].softplus() * scales.quote;
    let beta = (reference - offset).max_r(R::cst(0.0));
    let alpha = beta + raw[1].softplus() * scales.width;
    PolicyAction {
        beta,
        alpha,
        gamma: raw[2].tanh(),
    }
}

/// Network policy together with its normalization and scales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub net: Mlp,
    pub normalizer: Normalizer,
    pub scales: ActionScales,
}

/// Forward caches recorded while the simulator runs on the tape.
#[derive(Default)]
pub struct BlockCaches(Vec<MlpCache>);

impl BlockCaches {
    pub fn clear(&mut self) {
        self.0.clear();
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Policy {
    pub fn new(hidden: &[usize], normalizer: Normalizer, scales: ActionScales, seed: u64) -> Self {
        Policy {
            net: Mlp::new(N_FEATURES, hidden, N_OUTPUTS, seed),
            normalizer,
            scales,
        }
    }

    pub fn act<R: Real>(&self, obs: &Observation<R>, caches: &mut BlockCaches) -> Result<PolicyAction<R>> {
        let feats = obs.features(&self.normalizer);
        let x: Vec<f64> = feats.iter().map(|f| f.value()).collect();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Domain(format!("non-finite policy features {x:?}")));
        }
        let (out, cache) = self.net.forward(&x);
        let raw = if R::TAPED {
            caches.0.push(cache);
            R::block(&feats, &out, caches.0.len() - 1)
        } else {
            out.iter().map(|&v| R::cst(v)).collect()
        };
        Ok(action_from_raw(&raw, obs.reference, &self.scales))
    }

    /// Backward through the block recorded under `tag`.
    pub fn block_backward(
        &self,
        caches: &BlockCaches,
        tag: usize,
        upstream: &[f64],
        grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        let cache = caches
            .0
            .get(tag)
            .ok_or_else(|| ModelError::Usage(format!("backward for block {tag} without a recorded forward pass")))?;
        Ok(self.net.backward(cache, upstream, grad))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            sizes: self.net.sizes.clone(),
            activation: "relu".into(),
            policy: self.clone(),
        };
        let text =
            serde_json::to_string_pretty(&ck).map_err(|e| ModelError::Usage(format!("checkpoint encode: {e}")))?;
        std::fs::write(path, text)
            .map_err(|e| ModelError::Io(format!("cannot write checkpoint {}: {e}", path.display())))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ModelError::Io(format!("cannot read checkpoint {}: {e}", path.display())))?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| ModelError::Usage(format!("checkpoint decode: {e}")))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(ModelError::Usage(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        let expected: usize = ck.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if ck.sizes != ck.policy.net.sizes || ck.policy.net.params.len() != expected {
            return Err(ModelError::Usage(
                "checkpoint architecture does not match its weights".into(),
            ));
        }
        if ck.policy.net.params.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Usage("checkpoint contains non-finite weights".into()));
        }
        Ok(ck.policy)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    sizes: Vec<usize>,
    activation: String,
    policy: Policy,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::{self, Var};
    use proptest::prelude::*;

    fn randomized(mut net: Mlp, seed: u64) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in net.params.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *p += 0.3 * z;
        }
        net
    }

    fn loss(net: &Mlp, x: &[f64], w: &[f64]) -> f64 {
        net.forward(x).0.iter().zip(w).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn zero_output_layer_gives_symmetric_flat_action() {
        let pol = Policy::new(
            &[16, 16],
            Normalizer::new(0.1, 100.0, 2.5, 0.02),
            ActionScales::default(),
            1,
        );
        let obs = Observation {
            t: 0.0,
            p: 101.0,
            d: 0.01,
            s: 0.1,
            i: -7.0,
            q: 3.0,
            reference: 2.5,
            delta: 0.7,
        };
        let a = pol.act(&obs, &mut BlockCaches::default()).unwrap();
        let off = std::f64::consts::LN_2 * 0.1;
        assert!((a.beta - (2.5 - off)).abs() < 1e-15);
        assert!((a.alpha - (2.5 + off)).abs() < 1e-15);
        assert_eq!(a.gamma, 0.0);
    }

    #[test]
    fn linear_network_gradient_is_the_input() {
        let mut net = Mlp::new(3, &[], 1, 0);
        net.params = vec![0.5, -1.0, 2.0, 0.1];
        let x = [1.5, -2.0, 0.25];
        let (_, cache) = net.forward(&x);
        let mut grad = vec![0.0; 4];
        let dx = net.backward(&cache, &[1.0], &mut grad);
        assert_eq!(&grad[..3], &x);
        assert_eq!(grad[3], 1.0);
        assert_eq!(dx, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn tanh_head_gradient_at_zero() {
        let (_, g) = {
            ad::reset();
            let r = Var::leaf(0.0);
            let raw = [Var::cst(0.0), Var::cst(0.0), r];
            let a = action_from_raw(&raw, Var::cst(1.0), &ActionScales::default());
            let adj = ad::backward(a.gamma * 3.0, |_, _| unreachable!());
            ((), adj.wrt(r))
        };
        assert!((g - 3.0).abs() < 1e-15);
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let net = randomized(Mlp::new(5, &[7, 6], 3, 4), 9);
        let x = [0.3, -1.2, 0.8, 0.05, 2.0];
        let w = [0.7, -1.1, 0.4];
        let (_, cache) = net.forward(&x);
        let mut grad = vec![0.0; net.n_params()];
        let dx = net.backward(&cache, &w, &mut grad);
        let eps = 1e-6;
        for k in (0..net.n_params()).step_by(7) {
            let mut up = net.clone();
            up.params[k] += eps;
            let mut dn = net.clone();
            dn.params[k] -= eps;
            let fd = (loss(&up, &x, &w) - loss(&dn, &x, &w)) / (2.0 * eps);
            assert!(
                (fd - grad[k]).abs() <= 1e-5 * fd.abs().max(1e-3),
                "param {k}: {fd} vs {}",
                grad[k]
            );
        }
        for j in 0..x.len() {
            let mut xp = x;
            xp[j] += eps;
            let mut xm = x;
            xm[j] -= eps;
            let fd = (loss(&net, &xp, &w) - loss(&net, &xm, &w)) / (2.0 * eps);
            assert!((fd - dx[j]).abs() <= 1e-5 * fd.abs().max(1e-3));
        }
    }

    #[test]
    fn block_backward_without_forward_is_a_usage_error() {
        let pol = Policy::new(&[4], Normalizer::new(1.0, 100.0, 2.5, 0.02), ActionScales::default(), 0);
        let mut g = vec![0.0; pol.net.n_params()];
        let err = pol.block_backward(&BlockCaches::default(), 0, &[1.0, 0.0, 0.0], &mut g);
        assert!(matches!(err, Err(ModelError::Usage(_))));
    }

    #[test]
    fn adam_examples() {
        let mut p = vec![1.0, -2.0];
        let mut g = vec![0.0, 0.0];
        let mut opt = Adam::new(2, 0.1, 0.9, 0.999, 1e-8);
        opt.step(&mut p, &mut g);
        assert_eq!(p, vec![1.0, -2.0]);

        let mut frozen = Adam::new(2, 0.0, 0.9, 0.999, 1e-8);
        let mut g = vec![3.0, -4.0];
        frozen.step(&mut p, &mut g);
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(g, vec![0.0, 0.0]);

        let mut opt = Adam::new(2, 1e-3, 0.9, 0.999, 1e-8);
        for _ in 0..200 {
            let before = p.clone();
            let mut g = vec![2.5, -0.01];
            opt.step(&mut p, &mut g);
            assert!(((before[0] - p[0]) - 1e-3).abs() < 1e-8);
            assert!(((p[1] - before[1]) - 1e-3).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let pol = Policy::new(
            &[5, 3],
            Normalizer::new(0.1, 100.0, 2.5, 0.02),
            ActionScales::default(),
            3,
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        pol.save(&path).unwrap();
        assert_eq!(Policy::load(&path).unwrap(), pol);
        std::fs::write(&path, "{}").unwrap();
        assert!(Policy::load(&path).is_err());
    }

    #[test]
    fn rejects_non_finite_features() {
        let pol = Policy::new(&[4], Normalizer::new(1.0, 100.0, 2.5, 0.02), ActionScales::default(), 0);
        let obs = Observation {
            t: 0.0,
            p: f64::NAN,
            d: 0.0,
            s: 0.1,
            i: 0.0,
            q: 0.0,
            reference: 2.5,
            delta: 0.5,
        };
        assert!(pol.act(&obs, &mut BlockCaches::default()).is_err());
    }

    proptest! {
        #[test]
        fn actions_are_feasible(seed in 0u64..1000, f in prop::collection::vec(-50.0f64..50.0, 6), r in 0.0f64..20.0, d in 0.0f64..1.0) {
            let mut pol = Policy::new(&[8, 8], Normalizer::new(1.0, 100.0, 2.5, 0.02), ActionScales::default(), seed);
            pol.net = randomized(pol.net, seed + 1);
            let obs = Observation { t: 0.5, p: 100.0 + f[0], d: f[1] * 0.01, s: 0.02 + f[2].abs() * 0.01, i: f[3], q: f[4], reference: r, delta: d };
            let a = pol.act(&obs, &mut BlockCaches::default()).unwrap();
            prop_assert!(a.beta >= 0.0 && a.beta <= a.alpha);
            prop_assert!((-1.0..=1.0).contains(&a.gamma));
        }

        #[test]
        fn forward_is_deterministic(seed in 0u64..100) {
            let a = Mlp::new(8, &[16], 3, seed);
            let b = Mlp::new(8, &[16], 3, seed);
            prop_assert_eq!(&a, &b);
            let x = [0.1; 8];
            prop_assert_eq!(a.forward(&x).0, b.forward(&x).0);
        }
    }
}
