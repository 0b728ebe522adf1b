//! The observer who knows the model and watches published rates.
//!
//! Given a joint occupancy state, aggregate consumption is a sum of
//! independent uniforms `U(0, u_h(S_h))`. Its density is built on a uniform
//! grid by repeated convolution with uniform kernels; convolving a density
//! with `U(0, w)` is the scaled CDF difference `(G(z) - G(z - w)) / w`, so
//! only cumulative sums and interpolation are needed. The likelihood of a
//! published rate integrates the Laplace noise density against that grid.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mechanism::{PosteriorRule, PrivacyParams, RateRecord};
use crate::model::{propagate_prior, Belief, BeliefKind, HouseholdSpec, ModelMode, OccupancyModel, StateVector};

pub const DEFAULT_GRID_POINTS: usize = 1024;
pub const MIN_GRID_POINTS: usize = 64;

/// Density samples on a uniform grid over `[lo, hi]`. A grid with
/// `lo == hi` is a point mass.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    lo: f64,
    hi: f64,
    values: Vec<f64>,
}

impl DensityGrid {
    pub fn point_mass(at: f64) -> Self {
        Self {
            lo: at,
            hi: at,
            values: vec![1.0],
        }
    }

    pub fn is_point_mass(&self) -> bool {
        self.lo == self.hi
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_points(&self) -> usize {
        self.values.len()
    }

    pub fn spacing(&self) -> f64 {
        if self.is_point_mass() {
            0.0
        } else {
            (self.hi - self.lo) / (self.values.len() - 1) as f64
        }
    }

    pub fn point(&self, k: usize) -> f64 {
        self.lo + k as f64 * self.spacing()
    }

    /// Trapezoidal integral; a point mass integrates to one.
    pub fn integral(&self) -> f64 {
        if self.is_point_mass() {
            return 1.0;
        }
        trapezoid(&self.values, self.spacing())
    }

    /// Linear interpolation, zero outside `[lo, hi]`.
    pub fn density_at(&self, z: f64) -> f64 {
        if self.is_point_mass() || z < self.lo || z > self.hi {
            return 0.0;
        }
        interpolate(&self.values, (z - self.lo) / self.spacing())
    }
}

fn trapezoid(values: &[f64], h: f64) -> f64 {
    match values {
        [] | [_] => 0.0,
        [first, inner @ .., last] => h * (0.5 * (first + last) + inner.iter().sum::<f64>()),
    }
}

/// Value at fractional index `x`, clamped to the ends of `values`.
fn interpolate(values: &[f64], x: f64) -> f64 {
    if x <= 0.0 {
        return values[0];
    }
    let last = values.len() - 1;
    if x >= last as f64 {
        return values[last];
    }
    let k = x.floor() as usize;
    let frac = x - k as f64;
    values[k] + frac * (values[k + 1] - values[k])
}

fn cumulative_trapezoid(values: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    out.push(0.0);
    for w in values.windows(2) {
        acc += 0.5 * h * (w[0] + w[1]);
        out.push(acc);
    }
    out
}

/// Density of total consumption for a fixed occupancy state.
pub fn aggregate_density(state: &StateVector, specs: &[HouseholdSpec], n_points: usize) -> Result<DensityGrid> {
    if n_points < MIN_GRID_POINTS {
        return Err(Error::domain(format!("need at least {MIN_GRID_POINTS} grid points, got {n_points}")));
    }
    if state.len() != specs.len() {
        return Err(Error::shape(format!(
            "state over {} households, {} specs",
            state.len(),
            specs.len()
        )));
    }
    let widths: Vec<f64> = specs
        .iter()
        .enumerate()
        .map(|(h, s)| s.bound_in(state.is_occupied(h)))
        .filter(|&w| w > 0.0)
        .collect();
    uniform_sum_density(&widths, n_points)
}

/// Density of `sum_i U(0, widths[i])` on `n_points` grid points over
/// `[0, sum widths]`.
pub fn uniform_sum_density(widths: &[f64], n_points: usize) -> Result<DensityGrid> {
    if let Some(w) = widths.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
        return Err(Error::domain(format!("uniform width {w} is not a finite non-negative number")));
    }
    let widths: Vec<f64> = widths.iter().copied().filter(|&w| w > 0.0).collect();
    let Some((&first, rest)) = widths.split_first() else {
        return Ok(DensityGrid::point_mass(0.0));
    };
    let total: f64 = widths.iter().sum();
    let h = total / (n_points - 1) as f64;
    let grid: Vec<f64> = (0..n_points).map(|k| k as f64 * h).collect();

    let mut density = vec![1.0 / first; n_points];
    // The first factor's CDF is known exactly, which keeps its jump out of
    // the interpolation error.
    let mut cdf: Option<Vec<f64>> = None;
    for &w in rest {
        let eval = |z: f64| -> f64 {
            if z <= 0.0 {
                return 0.0;
            }
            match &cdf {
                None => (z / first).min(1.0),
                Some(values) => interpolate(values, z / h),
            }
        };
        density = grid.iter().map(|&z| ((eval(z) - eval(z - w)) / w).max(0.0)).collect();
        cdf = Some(cumulative_trapezoid(&density, h));
    }
    if rest.is_empty() {
        // A single uniform on the whole grid: a constant, already exact.
        return Ok(DensityGrid {
            lo: 0.0,
            hi: total,
            values: density,
        });
    }
    let mass = trapezoid(&density, h);
    for v in &mut density {
        *v /= mass;
    }
    Ok(DensityGrid {
        lo: 0.0,
        hi: total,
        values: density,
    })
}

pub fn laplace_pdf(x: f64, scale_b: f64) -> f64 {
    (-x.abs() / scale_b).exp() / (2.0 * scale_b)
}

/// Density of observing `r_hat` when aggregate consumption has density
/// `density` and the noise parameter is `lambda`.
///
/// Returns `+inf` for an exactly matching point mass observed without noise.
pub fn likelihood_from_density(r_hat: f64, density: &DensityGrid, lambda: f64, params: &PrivacyParams) -> Result<f64> {
    if !(params.alpha > 0.0) {
        return Err(Error::domain(format!("alpha must be positive, got {}", params.alpha)));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::domain(format!("noise parameter must be >= 0, got {lambda}")));
    }
    let (alpha, beta) = (params.alpha, params.beta);
    if lambda == 0.0 {
        let z = (r_hat - beta) / alpha;
        if density.is_point_mass() {
            return Ok(if z == density.lo() { f64::INFINITY } else { 0.0 });
        }
        return Ok(density.density_at(z) / alpha);
    }
    let b = lambda / params.epsilon;
    if density.is_point_mass() {
        return Ok(laplace_pdf(r_hat - alpha * density.lo() - beta, b));
    }
    let h = density.spacing();
    let integrand: Vec<f64> = density
        .values()
        .iter()
        .enumerate()
        .map(|(k, &f)| laplace_pdf(r_hat - alpha * density.point(k) - beta, b) * f)
        .collect();
    Ok(trapezoid(&integrand, h))
}

/// `Pr[r_hat | state]` as a density in `r_hat`.
pub fn rate_likelihood(
    r_hat: f64,
    state: &StateVector,
    lambda: f64,
    params: &PrivacyParams,
    specs: &[HouseholdSpec],
    n_points: usize,
) -> Result<f64> {
    let density = aggregate_density(state, specs, n_points)?;
    likelihood_from_density(r_hat, &density, lambda, params)
}

/// Bayes rule over joint states.
pub fn posterior_update(prior: &Belief, likelihoods: &[f64]) -> Result<Belief> {
    let (Some(probs), Some(support)) = (prior.probs(), prior.joint_support()) else {
        return Err(Error::shape("posterior updates are only defined for joint beliefs"));
    };
    if likelihoods.len() != probs.len() {
        return Err(Error::shape(format!(
            "{} likelihoods for {} states",
            likelihoods.len(),
            probs.len()
        )));
    }
    if let Some(l) = likelihoods.iter().find(|l| !(**l >= 0.0)) {
        return Err(Error::domain(format!("likelihood {l} is negative or NaN")));
    }
    // A noiseless point-mass match dominates every finite density.
    let certain = support
        .iter()
        .zip(likelihoods)
        .any(|(&s, &l)| s && l == f64::INFINITY);
    let mut weights = vec![0.0; probs.len()];
    let mut post_support = vec![false; probs.len()];
    for i in 0..probs.len() {
        if !support[i] {
            continue;
        }
        let l = likelihoods[i];
        let keep = if certain { l == f64::INFINITY } else { l > 0.0 };
        if keep {
            post_support[i] = true;
            weights[i] = if certain { probs[i] } else { probs[i] * l };
        }
    }
    let denom: f64 = weights.iter().sum();
    if !(denom > 0.0 && denom.is_finite()) {
        return Err(Error::Inconsistent(format!(
            "observation at t={} has zero likelihood under every supported state",
            prior.t
        )));
    }
    for w in &mut weights {
        *w /= denom;
    }
    Belief::joint_with_support(prior.t, BeliefKind::Posterior, weights, post_support)
}

/// A published rate together with the noise parameter it was released under.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservedRate {
    pub r_hat: f64,
    pub lambda: f64,
}

/// Exact joint posterior updates, with consumption densities precomputed for
/// every state.
#[derive(Debug, Clone)]
pub struct BayesRule {
    densities: Vec<DensityGrid>,
}

impl BayesRule {
    pub fn new(specs: &[HouseholdSpec], n_points: usize, joint_limit: usize) -> Result<Self> {
        let n = specs.len();
        if n > joint_limit {
            return Err(Error::Capacity { n, limit: joint_limit });
        }
        let states: Vec<StateVector> = StateVector::all(n)?.collect();
        let densities = states
            .par_iter()
            .map(|s| aggregate_density(s, specs, n_points))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { densities })
    }

    pub fn likelihoods(&self, obs: ObservedRate, params: &PrivacyParams) -> Result<Vec<f64>> {
        self.densities
            .par_iter()
            .map(|d| likelihood_from_density(obs.r_hat, d, obs.lambda, params))
            .collect()
    }

    pub fn update(&self, prior: &Belief, obs: ObservedRate, params: &PrivacyParams) -> Result<Belief> {
        posterior_update(prior, &self.likelihoods(obs, params)?)
    }
}

impl PosteriorRule for BayesRule {
    fn posterior(&self, prior: &Belief, record: &RateRecord, _: &[HouseholdSpec], params: &PrivacyParams) -> Result<Belief> {
        let obs = ObservedRate {
            r_hat: record.r_published,
            lambda: record.lambda,
        };
        self.update(prior, obs, params)
    }
}

/// Prior and posterior at one step of a tracked run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackStep {
    pub prior: Belief,
    pub posterior: Belief,
}

/// Alternate prior propagation and Bayes updates over a rate sequence,
/// keeping both halves of every step.
pub fn track_steps(
    rates: &[ObservedRate],
    model: &OccupancyModel,
    specs: &[HouseholdSpec],
    params: &PrivacyParams,
    n_points: usize,
    joint_limit: usize,
) -> Result<Vec<TrackStep>> {
    if model.mode() != ModelMode::Joint {
        return Err(Error::shape("tracking needs a joint model"));
    }
    if model.n_households() != specs.len() {
        return Err(Error::shape(format!(
            "model over {} households, {} specs",
            model.n_households(),
            specs.len()
        )));
    }
    let rule = BayesRule::new(specs, n_points, joint_limit)?;
    let mut out: Vec<TrackStep> = Vec::with_capacity(rates.len());
    for (t, obs) in rates.iter().enumerate() {
        let prior = match out.last() {
            None => model.initial_belief(),
            Some(prev) => propagate_prior(&prev.posterior, model.transitions(), t - 1)?,
        };
        let posterior = rule.update(&prior, *obs, params)?;
        out.push(TrackStep { prior, posterior });
    }
    Ok(out)
}

/// Posterior trajectory of the observer.
pub fn track(
    rates: &[ObservedRate],
    model: &OccupancyModel,
    specs: &[HouseholdSpec],
    params: &PrivacyParams,
    n_points: usize,
    joint_limit: usize,
) -> Result<Vec<Belief>> {
    Ok(track_steps(rates, model, specs, params, n_points, joint_limit)?
        .into_iter()
        .map(|s| s.posterior)
        .collect())
}

/// CSV with header `t,state_index,probability`, one row per state per step.
pub fn write_trajectory_csv<W: Write>(out: &mut W, beliefs: &[Belief]) -> Result<()> {
    writeln!(out, "t,state_index,probability")?;
    for b in beliefs {
        let probs = b
            .probs()
            .ok_or_else(|| Error::shape("trajectory export needs joint beliefs"))?;
        for (i, p) in probs.iter().enumerate() {
            writeln!(out, "{},{},{}", b.t, i, p)?;
        }
    }
    Ok(())
}
