//! Utility and privacy measurements.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::mechanism::{sample_laplace, PrivacyParams};
use crate::model::{HouseholdSpec, StateVector};
use crate::rng::{self, StreamRng};

/// Root mean squared relative error as `(1/T) * sqrt(sum_t ((p_t - o_t) / o_t)^2)`.
///
/// The `1/T` sits outside the square root. Comparisons between mechanisms
/// are unaffected by where it sits.
pub fn rmsre(optimal: &[f64], published: &[f64]) -> Result<f64> {
    if optimal.len() != published.len() {
        return Err(Error::shape(format!(
            "{} optimal rates, {} published rates",
            optimal.len(),
            published.len()
        )));
    }
    if optimal.is_empty() {
        return Err(Error::domain("rmsre needs at least one step"));
    }
    let mut sum = 0.0;
    for (&o, &p) in optimal.iter().zip(published) {
        if !(o > 0.0) {
            return Err(Error::domain(format!("optimal rate {o} must be positive")));
        }
        let rel = (p - o) / o;
        sum += rel * rel;
    }
    Ok(sum.sqrt() / optimal.len() as f64)
}

/// Cumulative guarantee after `t_elapsed` releases at `epsilon` each.
pub fn privacy_budget(epsilon: f64, t_elapsed: usize) -> f64 {
    epsilon * t_elapsed as f64
}

/// Running total of the sequential guarantee.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetAccountant {
    pub epsilon_per_step: f64,
    pub steps: usize,
}

impl BudgetAccountant {
    pub fn new(epsilon_per_step: f64) -> Self {
        Self {
            epsilon_per_step,
            steps: 0,
        }
    }

    pub fn record_release(&mut self) {
        self.steps += 1;
    }

    pub fn spent(&self) -> f64 {
        privacy_budget(self.epsilon_per_step, self.steps)
    }
}

pub const DEFAULT_MIN_BIN_COUNT: u64 = 50;
pub const DEFAULT_AUDIT_DELTA: f64 = 0.01;
const AUDIT_BLOCK: usize = 1 << 14;

/// One empirical audit of a neighbor pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditSpec {
    pub a: StateVector,
    pub b: StateVector,
    pub samples: usize,
    pub bins: usize,
    pub clip_lo: f64,
    pub clip_hi: f64,
    /// Bins below this count on either side are ignored.
    pub min_count: u64,
    /// Family-wise error rate of the per-bin confidence bounds.
    pub delta: f64,
}

impl AuditSpec {
    pub fn new(a: StateVector, b: StateVector, samples: usize, bins: usize, clip: (f64, f64)) -> Result<Self> {
        let spec = Self {
            a,
            b,
            samples,
            bins,
            clip_lo: clip.0,
            clip_hi: clip.1,
            min_count: DEFAULT_MIN_BIN_COUNT,
            delta: DEFAULT_AUDIT_DELTA,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.a.len() != self.b.len() || self.a.hamming(&self.b) > 1 {
            return Err(Error::config(format!(
                "audit states {} and {} are not Blowfish neighbors",
                self.a, self.b
            )));
        }
        if self.samples == 0 || self.bins == 0 {
            return Err(Error::config("audit needs samples and bins"));
        }
        if !(self.clip_lo < self.clip_hi) {
            return Err(Error::config("audit clip range is empty"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("audit delta must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Output range covering all but `e^-8` of the published-rate mass.
pub fn default_clip(specs: &[HouseholdSpec], params: &PrivacyParams, lambda: f64) -> (f64, f64) {
    let total: f64 = specs.iter().map(HouseholdSpec::bound).sum();
    let tail = 8.0 * lambda / params.epsilon;
    (params.beta - tail, params.beta + params.alpha * total + tail)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditEstimate {
    /// Largest per-bin lower confidence bound on `|log(p_a / p_b)|`.
    pub epsilon_hat: f64,
    /// Largest raw per-bin `|log(count_a / count_b)|`.
    pub epsilon_point: f64,
    pub bins_used: usize,
}

fn histogram<F>(spec: &AuditSpec, side: u64, state: &StateVector, mechanism: &F, seed: u64) -> Vec<u64>
where
    F: Fn(&StateVector, &mut StreamRng) -> f64 + Sync,
{
    let blocks = spec.samples.div_ceil(AUDIT_BLOCK);
    let width = (spec.clip_hi - spec.clip_lo) / spec.bins as f64;
    (0..blocks)
        .into_par_iter()
        .map(|block| {
            let mut rng = rng::stream(seed, rng::domain::AUDIT, side, block as u64);
            let n = AUDIT_BLOCK.min(spec.samples - block * AUDIT_BLOCK);
            let mut counts = vec![0u64; spec.bins];
            for _ in 0..n {
                let x = mechanism(state, &mut rng);
                let k = ((x - spec.clip_lo) / width).floor();
                let k = if k.is_nan() { 0 } else { k.clamp(0.0, (spec.bins - 1) as f64) as usize };
                counts[k] += 1;
            }
            counts
        })
        .reduce(
            || vec![0u64; spec.bins],
            |mut acc, c| {
                acc.iter_mut().zip(c).for_each(|(a, b)| *a += b);
                acc
            },
        )
}

/// Empirical privacy loss between the two sides of `spec`.
///
/// Published outputs are binned over the clip range (samples beyond it land
/// in the edge bins). For every bin with at least `min_count` samples on both
/// sides the absolute log count ratio is lowered by a Bonferroni-corrected
/// normal bound on its sampling error; the estimate is the largest such lower
/// bound, floored at zero.
pub fn audit_epsilon<F>(spec: &AuditSpec, mechanism: F, seed: u64) -> Result<AuditEstimate>
where
    F: Fn(&StateVector, &mut StreamRng) -> f64 + Sync,
{
    spec.validate()?;
    let ca = histogram(spec, 0, &spec.a, &mechanism, seed);
    let cb = histogram(spec, 1, &spec.b, &mechanism, seed);
    let z = Normal::standard().inverse_cdf(1.0 - spec.delta / (2.0 * spec.bins as f64));
    let mut epsilon_hat: f64 = 0.0;
    let mut epsilon_point: f64 = 0.0;
    let mut bins_used = 0;
    for (&a, &b) in ca.iter().zip(&cb) {
        if a < spec.min_count || b < spec.min_count {
            continue;
        }
        bins_used += 1;
        let (a, b) = (a as f64, b as f64);
        let ratio = (a / b).ln().abs();
        let se = (1.0 / a + 1.0 / b).sqrt();
        epsilon_point = epsilon_point.max(ratio);
        epsilon_hat = epsilon_hat.max(ratio - z * se);
    }
    if bins_used == 0 {
        return Err(Error::AuditInconclusive(format!(
            "no bin holds {} samples on both sides",
            spec.min_count
        )));
    }
    Ok(AuditEstimate {
        epsilon_hat,
        epsilon_point,
        bins_used,
    })
}

/// One-step mechanism for a fixed occupancy state: draw every household's
/// consumption from `U(0, u_h(S_h))`, then publish with noise `Lap(lambda / epsilon)`.
pub fn rate_sampler<'a, R: Rng + ?Sized>(
    specs: &'a [HouseholdSpec],
    params: PrivacyParams,
    lambda: f64,
) -> impl Fn(&StateVector, &mut R) -> f64 + Sync + 'a {
    let b = lambda / params.epsilon;
    move |state: &StateVector, rng: &mut R| {
        let z: f64 = specs
            .iter()
            .enumerate()
            .map(|(h, s)| s.bound_in(state.is_occupied(h)) * rng.random::<f64>())
            .sum();
        let noise = sample_laplace(b, rng).expect("scale checked by caller");
        params.alpha * z + params.beta + noise
    }
}

/// Serialized outcome of an audit run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub epsilon_target: f64,
    pub epsilon_hat: f64,
    pub samples: usize,
    pub bins: usize,
    pub pass: bool,
    pub epsilon_point: f64,
    pub bins_used: usize,
    pub slack: f64,
    pub lambda: f64,
}
