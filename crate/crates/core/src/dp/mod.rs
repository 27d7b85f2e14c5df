//! DP-SGD: per-sample clipping, Gaussian noise and Renyi accounting.
//!
//! By default the mechanism is applied to the generator, where one "sample"
//! is the gradient contribution of one noise vector. That placement does not
//! by itself give the training data a formal (epsilon, delta) guarantee,
//! because the generator only sees the data through the discriminator; the
//! accountant reports what the mechanics would give if it did. The
//! conventional discriminator-side placement is available through
//! [`DpSide::Discriminator`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

mod rdp;

pub use rdp::{default_orders, rdp_step, rdp_to_epsilon};

/// Bisection range for the noise multiplier.
pub const SIGMA_MIN: f64 = 0.3;
pub const SIGMA_MAX: f64 = 100.0;
const SIGMA_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DpSide {
    #[default]
    Generator,
    Discriminator,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpConfig {
    pub epsilon_target: f64,
    /// Defaults to `1 / n^1.1` for a training set of `n` trajectories.
    pub delta: Option<f64>,
    pub clip_norm: f64,
    /// Calibrated from the target when unset.
    pub noise_multiplier: Option<f64>,
    /// Batch size multiplier relative to the non-private configuration.
    pub scale_factor: usize,
    pub side: DpSide,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            epsilon_target: 10.0,
            delta: None,
            clip_norm: 0.1,
            noise_multiplier: None,
            scale_factor: 10,
            side: DpSide::Generator,
        }
    }
}

pub fn default_delta(n: usize) -> f64 {
    1.0 / (n as f64).powf(1.1)
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("dp: {m}")));
        if !(self.epsilon_target > 0.0) {
            return bad("epsilon_target must be positive");
        }
        if let Some(d) = self.delta {
            if !(d > 0.0 && d < 1.0) {
                return bad("delta must lie in (0, 1)");
            }
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if self.clip_norm.is_infinite() && self.noise_multiplier != Some(0.0) {
            return bad("an unbounded clip_norm requires noise_multiplier = 0");
        }
        if let Some(s) = self.noise_multiplier {
            if !(s >= 0.0 && s.is_finite()) {
                return bad("noise_multiplier must be finite and non-negative");
            }
        }
        if self.scale_factor == 0 {
            return bad("scale_factor must be at least 1");
        }
        Ok(())
    }

    pub fn delta_for(&self, n: usize) -> f64 {
        self.delta.unwrap_or_else(|| default_delta(n))
    }

    /// Fixes delta and sigma for a run with sampling rate `q` over `steps`
    /// noisy updates on `n` records.
    pub fn resolve(&self, n: usize, q: f64, steps: u64) -> Result<ResolvedDp> {
        self.validate()?;
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::Config(format!("dp: sampling rate {q} outside (0, 1]")));
        }
        let delta = self.delta_for(n);
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Config(format!("dp: delta {delta} outside (0, 1)")));
        }
        let sigma = match self.noise_multiplier {
            Some(s) => s,
            None => calibrate_sigma(self.epsilon_target, delta, q, steps)?,
        };
        Ok(ResolvedDp {
            clip_norm: self.clip_norm,
            sigma,
            delta,
            q,
            side: self.side,
        })
    }
}

/// DP parameters fixed for one training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedDp {
    pub clip_norm: f64,
    pub sigma: f64,
    pub delta: f64,
    pub q: f64,
    pub side: DpSide,
}

/// Clipping factor `min(1, C / |g|)`.
pub fn clip_factor(norm: f64, clip: f64) -> f64 {
    if norm > clip {
        clip / norm
    } else {
        1.0
    }
}

/// Scales every gradient to norm at most `clip` and returns the resulting norms.
pub fn clip_per_sample(grads: &mut [Vec<f64>], clip: f64) -> Result<Vec<f64>> {
    let mut norms = Vec::with_capacity(grads.len());
    for (i, g) in grads.iter_mut().enumerate() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training(format!("non-finite per-sample gradient {i}")));
        }
        let w = clip_factor(l2(g), clip);
        g.iter_mut().for_each(|v| *v *= w);
        norms.push(l2(g));
    }
    Ok(norms)
}

pub fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Adds `N(0, (sigma * clip)^2)` noise to every coordinate of `sum`, drawing
/// in coordinate order. Does nothing when `sigma` is zero.
pub fn add_noise(sum: &mut [f64], sigma: f64, clip: f64, rng: &mut ChaCha8Rng) {
    if sigma == 0.0 {
        return;
    }
    let std = sigma * clip;
    let normal = Normal::new(0.0, std).expect("finite positive std");
    sum.iter_mut().for_each(|v| *v += normal.sample(rng));
}

/// `(sum of clipped + N(0, sigma^2 C^2 I)) / batch`.
pub fn noisy_aggregate(clipped: &[Vec<f64>], sigma: f64, clip: f64, seed: u64) -> Result<Vec<f64>> {
    let first = clipped
        .first()
        .ok_or_else(|| Error::arg("noisy_aggregate needs at least one gradient"))?;
    if clipped.iter().any(|g| g.len() != first.len()) {
        return Err(Error::arg("per-sample gradients differ in length"));
    }
    let mut sum = vec![0.0; first.len()];
    for g in clipped {
        sum.iter_mut().zip(g).for_each(|(s, v)| *s += v);
    }
    add_noise(&mut sum, sigma, clip, &mut ChaCha8Rng::seed_from_u64(seed));
    let b = clipped.len() as f64;
    sum.iter_mut().for_each(|s| *s /= b);
    Ok(sum)
}

/// Accounting state of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    pub q: f64,
    pub sigma: f64,
    pub steps: u64,
    pub orders: Vec<f64>,
}

impl PrivacyLedger {
    pub fn new(q: f64, sigma: f64) -> Result<Self> {
        if !(q > 0.0 && q <= 1.0) || !(sigma >= 0.0) {
            return Err(Error::arg(format!("invalid ledger q={q}, sigma={sigma}")));
        }
        Ok(PrivacyLedger {
            q,
            sigma,
            steps: 0,
            orders: default_orders(),
        })
    }

    pub fn record(&mut self, steps: u64) {
        self.steps += steps;
    }
}

/// Epsilon spent at `delta`. Infinite when no order gives a finite bound.
pub fn account(ledger: &PrivacyLedger, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::arg(format!("delta {delta} outside (0, 1)")));
    }
    let (eps, _) = rdp_to_epsilon(ledger.q, ledger.sigma, ledger.steps, delta, &ledger.orders);
    if !eps.is_finite() {
        log::warn!(
            "no finite privacy bound for q={}, sigma={}, steps={} on the order grid",
            ledger.q,
            ledger.sigma,
            ledger.steps
        );
        return Ok(f64::INFINITY);
    }
    Ok(eps)
}

/// Smallest noise multiplier in `[0.3, 100]` (to within `1e-4`) whose
/// accounted epsilon does not exceed `epsilon_target`.
pub fn calibrate_sigma(epsilon_target: f64, delta: f64, q: f64, steps: u64) -> Result<f64> {
    let eps_at = |sigma: f64| -> Result<f64> {
        let mut ledger = PrivacyLedger::new(q, sigma)?;
        ledger.record(steps);
        account(&ledger, delta)
    };
    if eps_at(SIGMA_MAX)? > epsilon_target {
        return Err(Error::Config(format!(
            "epsilon {epsilon_target} is unreachable with sigma <= {SIGMA_MAX} (q={q}, steps={steps}, delta={delta})"
        )));
    }
    if eps_at(SIGMA_MIN)? <= epsilon_target {
        return Ok(SIGMA_MIN);
    }
    let (mut lo, mut hi) = (SIGMA_MIN, SIGMA_MAX);
    while hi - lo > SIGMA_TOL {
        let mid = 0.5 * (lo + hi);
        if eps_at(mid)? <= epsilon_target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}
