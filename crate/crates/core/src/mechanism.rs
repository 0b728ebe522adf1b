//! Rate publication under Blowfish privacy, and the group-DP baseline.
//!
//! Each step the curator forms the prior under every candidate model, keeps
//! the states with non-zero prior, finds the Blowfish neighbor pairs among
//! them (states differing in one household's occupancy), and sizes the
//! Laplace noise by the largest consumption bound among the households that
//! discriminate some pair. The baseline ignores the model and always uses the
//! largest bound over all households.

use std::collections::{BTreeSet, HashSet};

use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    propagate_prior, support_states, Belief, BeliefKind, HouseholdSpec, MarginalSupport, ModelClass,
    StateVector, SupportSet,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    pub epsilon: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl PrivacyParams {
    pub fn new(epsilon: f64, alpha: f64, beta: f64) -> Result<Self> {
        let params = Self { epsilon, alpha, beta };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::domain(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::domain(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::domain(format!("beta must be non-negative, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Two supported states that differ in exactly one household. `a` is the
/// state with that household empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NeighborPair {
    pub a: StateVector,
    pub b: StateVector,
    pub differing_household: usize,
}

/// Per-step output of either mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateRecord {
    pub t: usize,
    pub z: f64,
    pub r_opt: f64,
    pub lambda: f64,
    pub noise: f64,
    pub r_published: f64,
}

/// First-order optimal rate `alpha * z + beta`.
pub fn optimal_rate(z: f64, params: &PrivacyParams) -> Result<f64> {
    if !(z >= 0.0 && z.is_finite()) {
        return Err(Error::domain(format!("aggregate consumption must be >= 0, got {z}")));
    }
    Ok(params.alpha * z + params.beta)
}

/// States with non-zero prior probability.
pub fn nonzero_prior_states(prior: &Belief) -> Result<SupportSet> {
    if prior.kind != BeliefKind::Prior {
        return Err(Error::domain("non-zero prior states need a prior belief"));
    }
    Ok(support_states(prior))
}

/// All unordered pairs in `mu` at Hamming distance one.
pub fn blowfish_neighbors(mu: &[StateVector]) -> Vec<NeighborPair> {
    let present: HashSet<StateVector> = mu.iter().copied().collect();
    let mut pairs = Vec::new();
    for s in mu {
        for h in 0..s.len() {
            if s.is_occupied(h) {
                continue;
            }
            let up = s.with_household(h, true);
            if present.contains(&up) {
                pairs.push(NeighborPair {
                    a: *s,
                    b: up,
                    differing_household: h,
                });
            }
        }
    }
    pairs.sort();
    pairs.dedup();
    pairs
}

pub fn discriminating_households(nu: &[NeighborPair]) -> BTreeSet<usize> {
    nu.iter().map(|p| p.differing_household).collect()
}

/// Under independent chains the joint support is the product of the marginal
/// supports, so a household discriminates a pair exactly when both of its
/// states are supported.
pub fn discriminating_households_factorized(support: &[MarginalSupport]) -> BTreeSet<usize> {
    support
        .iter()
        .enumerate()
        .filter(|(_, s)| **s == MarginalSupport::Both)
        .map(|(h, _)| h)
        .collect()
}

/// Discriminating households of a support set; joint sets go through explicit
/// neighbor enumeration.
pub fn kappa(mu: &SupportSet) -> BTreeSet<usize> {
    match mu {
        SupportSet::Joint { states, .. } => discriminating_households(&blowfish_neighbors(states)),
        SupportSet::Factorized(support) => discriminating_households_factorized(support),
    }
}

/// `alpha * max u_h` over the discriminating households, or 0 when there are
/// none (no pair to protect, so the exact rate is released).
pub fn noise_scale(kappa: &BTreeSet<usize>, specs: &[HouseholdSpec], params: &PrivacyParams) -> Result<f64> {
    let mut max_bound: f64 = 0.0;
    for &h in kappa {
        let spec = specs.get(h).ok_or(Error::UnknownHousehold(h))?;
        max_bound = max_bound.max(spec.bound());
    }
    Ok(params.alpha * max_bound)
}

pub fn scale_over_models(scales: &[f64]) -> Result<f64> {
    if scales.is_empty() {
        return Err(Error::config("model class is empty"));
    }
    Ok(scales.iter().copied().fold(0.0, f64::max))
}

/// Noise parameter one model demands from its prior.
pub fn model_noise_scale(prior: &Belief, specs: &[HouseholdSpec], params: &PrivacyParams) -> Result<f64> {
    let mu = nonzero_prior_states(prior)?;
    noise_scale(&kappa(&mu), specs, params)
}

/// Inverse-CDF Laplace transform of `u` in `(-1/2, 1/2)`.
pub fn laplace_from_uniform(scale_b: f64, u: f64) -> f64 {
    if scale_b == 0.0 {
        return 0.0;
    }
    -scale_b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// One uniform on the open interval `(-1/2, 1/2)`.
pub fn centered_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.sample(Open01);
    u - 0.5
}

/// Draw from `Lap(scale_b)`. Exactly one uniform is consumed even when the
/// scale is zero, so stream positions do not depend on the scale.
pub fn sample_laplace<R: Rng + ?Sized>(scale_b: f64, rng: &mut R) -> Result<f64> {
    if !(scale_b >= 0.0 && scale_b.is_finite()) {
        return Err(Error::domain(format!("Laplace scale must be >= 0, got {scale_b}")));
    }
    Ok(laplace_from_uniform(scale_b, centered_uniform(rng)))
}

/// Publish using a pre-drawn centered uniform. Lets two mechanisms share a
/// uniform for paired comparisons.
pub fn publish_with_uniform(t: usize, z: f64, lambda: f64, params: &PrivacyParams, u: f64) -> Result<RateRecord> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::domain(format!("noise parameter must be >= 0, got {lambda}")));
    }
    if !(u > -0.5 && u < 0.5) {
        return Err(Error::domain(format!("uniform {u} outside (-1/2, 1/2)")));
    }
    let r_opt = optimal_rate(z, params)?;
    let noise = laplace_from_uniform(lambda / params.epsilon, u);
    Ok(RateRecord {
        t,
        z,
        r_opt,
        lambda,
        noise,
        r_published: r_opt + noise,
    })
}

pub fn publish_rate<R: Rng + ?Sized>(
    t: usize,
    z: f64,
    lambda: f64,
    params: &PrivacyParams,
    rng: &mut R,
) -> Result<RateRecord> {
    publish_with_uniform(t, z, lambda, params, centered_uniform(rng))
}

/// Noise parameter over the whole model class given one prior per model.
pub fn blowfish_lambda(priors: &[Belief], specs: &[HouseholdSpec], params: &PrivacyParams) -> Result<f64> {
    let scales = priors
        .iter()
        .map(|p| model_noise_scale(p, specs, params))
        .collect::<Result<Vec<_>>>()?;
    scale_over_models(&scales)
}

/// One Blowfish step from the current priors.
pub fn step_blowfish<R: Rng + ?Sized>(
    priors: &[Belief],
    specs: &[HouseholdSpec],
    params: &PrivacyParams,
    z: f64,
    rng: &mut R,
) -> Result<(RateRecord, f64)> {
    let lambda = blowfish_lambda(priors, specs, params)?;
    let t = priors.first().map_or(0, |p| p.t);
    Ok((publish_rate(t, z, lambda, params, rng)?, lambda))
}

/// The baseline's fixed noise parameter, `alpha * max_h u_h`.
pub fn naive_lambda(specs: &[HouseholdSpec], params: &PrivacyParams) -> f64 {
    params.alpha * specs.iter().map(HouseholdSpec::bound).fold(0.0, f64::max)
}

pub fn step_naive<R: Rng + ?Sized>(
    t: usize,
    specs: &[HouseholdSpec],
    params: &PrivacyParams,
    z: f64,
    rng: &mut R,
) -> Result<RateRecord> {
    publish_rate(t, z, naive_lambda(specs, params), params, rng)
}

/// How the curator turns a prior and a published rate into a posterior.
pub trait PosteriorRule {
    fn posterior(
        &self,
        prior: &Belief,
        record: &RateRecord,
        specs: &[HouseholdSpec],
        params: &PrivacyParams,
    ) -> Result<Belief>;
}

/// Carries the prior forward unchanged.
///
/// Laplace noise has full support, so with `lambda > 0` no supported state is
/// ever ruled out by an observation; with `lambda = 0` a factorized prior has
/// a single supported state. In both cases the support, which is all the
/// noise parameter depends on, is exact. The numeric values are the
/// observation-free marginals.
#[derive(Debug, Clone, Copy, Default)]
pub struct SupportPreserving;

impl PosteriorRule for SupportPreserving {
    fn posterior(&self, prior: &Belief, _: &RateRecord, _: &[HouseholdSpec], _: &PrivacyParams) -> Result<Belief> {
        Ok(prior.clone().with_kind(BeliefKind::Posterior))
    }
}

/// Per-run state of the rate publication loop: current step and one belief
/// per candidate model.
#[derive(Debug, Clone)]
pub struct Curator<P: PosteriorRule = SupportPreserving> {
    class: ModelClass,
    specs: Vec<HouseholdSpec>,
    params: PrivacyParams,
    rule: P,
    t: usize,
    posteriors: Option<Vec<Belief>>,
    priors: Option<Vec<Belief>>,
}

impl<P: PosteriorRule> Curator<P> {
    pub fn new(class: ModelClass, specs: Vec<HouseholdSpec>, params: PrivacyParams, rule: P) -> Result<Self> {
        params.validate()?;
        if specs.len() != class.n_households() {
            return Err(Error::shape(format!(
                "{} household specs for a model over {} households",
                specs.len(),
                class.n_households()
            )));
        }
        Ok(Self {
            class,
            specs,
            params,
            rule,
            t: 0,
            posteriors: None,
            priors: None,
        })
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn specs(&self) -> &[HouseholdSpec] {
        &self.specs
    }

    pub fn params(&self) -> &PrivacyParams {
        &self.params
    }

    /// Priors for the current step, one per model.
    pub fn priors(&mut self) -> Result<&[Belief]> {
        if self.priors.is_none() {
            let priors = match &self.posteriors {
                None => self.class.models().iter().map(|m| m.initial_belief()).collect(),
                Some(posts) => posts
                    .iter()
                    .zip(self.class.models())
                    .map(|(post, m)| propagate_prior(post, m.transitions(), self.t - 1))
                    .collect::<Result<Vec<_>>>()?,
            };
            self.priors = Some(priors);
        }
        Ok(self.priors.as_deref().unwrap_or_default())
    }

    /// Noise parameter for the current step.
    pub fn noise_parameter(&mut self) -> Result<f64> {
        self.priors()?;
        let priors = self.priors.as_deref().unwrap_or_default();
        blowfish_lambda(priors, &self.specs, &self.params)
    }

    /// Fold the published record into the beliefs and advance one step.
    pub fn observe(&mut self, record: &RateRecord) -> Result<()> {
        self.priors()?;
        let priors = self.priors.take().unwrap_or_default();
        let posts = priors
            .iter()
            .map(|p| self.rule.posterior(p, record, &self.specs, &self.params))
            .collect::<Result<Vec<_>>>()?;
        self.posteriors = Some(posts);
        self.t += 1;
        Ok(())
    }

    /// Full step: size the noise, publish, update beliefs.
    pub fn step<R: Rng + ?Sized>(&mut self, z: f64, rng: &mut R) -> Result<RateRecord> {
        self.step_with_uniform(z, centered_uniform(rng))
    }

    pub fn step_with_uniform(&mut self, z: f64, u: f64) -> Result<RateRecord> {
        let lambda = self.noise_parameter()?;
        let record = publish_with_uniform(self.t, z, lambda, &self.params, u)?;
        self.observe(&record)?;
        Ok(record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{OccupancyModel, TransitionSpec, IDENTITY2};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn default_params() -> PrivacyParams {
        PrivacyParams::new(0.5, 1.0, 62.5).unwrap()
    }

    fn states(names: &[&str]) -> Vec<StateVector> {
        names.iter().map(|s| s.parse().unwrap()).collect()
    }

    fn specs(bounds: &[f64]) -> Vec<HouseholdSpec> {
        bounds
            .iter()
            .enumerate()
            .map(|(i, &u)| HouseholdSpec::new(i, u, u / 2.0).unwrap())
            .collect()
    }

    #[test]
    fn optimal_rate_examples() {
        assert_eq!(optimal_rate(0.0, &default_params()).unwrap(), 62.5);
        assert_eq!(optimal_rate(437.5, &default_params()).unwrap(), 500.0);
        let p = PrivacyParams::new(0.5, 2.0, 5.0).unwrap();
        assert_eq!(optimal_rate(100.0, &p).unwrap(), 205.0);
        assert!(matches!(optimal_rate(-1.0, &p), Err(Error::Domain(_))));
    }

    #[test]
    fn params_validation() {
        assert!(PrivacyParams::new(0.0, 1.0, 0.0).is_err());
        assert!(PrivacyParams::new(0.5, -1.0, 0.0).is_err());
        assert!(PrivacyParams::new(0.5, 1.0, -0.1).is_err());
    }

    #[test]
    fn nonzero_prior_examples() {
        let full = Belief::joint(0, BeliefKind::Prior, vec![0.25; 4]).unwrap();
        assert_eq!(nonzero_prior_states(&full).unwrap().expand(8).unwrap().len(), 4);
        let split = Belief::joint(0, BeliefKind::Prior, vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        assert_eq!(nonzero_prior_states(&split).unwrap().expand(8).unwrap(), states(&["00", "11"]));
        let post = split.clone().with_kind(BeliefKind::Posterior);
        assert!(nonzero_prior_states(&post).is_err());
    }

    #[test]
    fn neighbors_of_square() {
        let pairs = blowfish_neighbors(&states(&["00", "01", "10", "11"]));
        let names: Vec<(String, String)> = pairs.iter().map(|p| (p.a.to_string(), p.b.to_string())).collect();
        let expected = [("00", "01"), ("00", "10"), ("01", "11"), ("10", "11")];
        assert_eq!(names.len(), 4);
        for (a, b) in expected {
            assert!(names.contains(&(a.to_owned(), b.to_owned())));
        }
    }

    #[test]
    fn neighbors_distance_two_and_single_edge() {
        assert!(blowfish_neighbors(&states(&["00", "11"])).is_empty());
        let pairs = blowfish_neighbors(&states(&["00", "01"]));
        assert_eq!(pairs.len(), 1);
        // household "1" in one-based naming is index 0
        assert_eq!(pairs[0].differing_household, 0);
    }

    #[test]
    fn kappa_examples() {
        assert!(discriminating_households(&[]).is_empty());
        let nu = vec![
            NeighborPair { a: "00".parse().unwrap(), b: "01".parse().unwrap(), differing_household: 0 },
            NeighborPair { a: "01".parse().unwrap(), b: "11".parse().unwrap(), differing_household: 1 },
        ];
        assert_eq!(discriminating_households(&nu), BTreeSet::from([0, 1]));

        let belief = Belief::factorized(0, BeliefKind::Prior, vec![0.3, 0.0, 1.0]).unwrap();
        let mu = nonzero_prior_states(&belief).unwrap();
        let fast = kappa(&mu);
        assert_eq!(fast, BTreeSet::from([0]));
        let joint = mu.expand(8).unwrap();
        assert_eq!(discriminating_households(&blowfish_neighbors(&joint)), fast);
    }

    #[test]
    fn noise_scale_examples() {
        let p = default_params();
        assert_eq!(noise_scale(&BTreeSet::from([0, 1]), &specs(&[0.5, 1.0]), &p).unwrap(), 1.0);
        assert_eq!(noise_scale(&BTreeSet::new(), &specs(&[0.5, 1.0]), &p).unwrap(), 0.0);
        let p2 = PrivacyParams::new(0.5, 2.0, 0.0).unwrap();
        assert_abs_diff_eq!(
            noise_scale(&BTreeSet::from([2]), &specs(&[0.1, 0.2, 0.7]), &p2).unwrap(),
            1.4,
            epsilon = 1e-15
        );
        assert!(matches!(
            noise_scale(&BTreeSet::from([5]), &specs(&[1.0]), &p),
            Err(Error::UnknownHousehold(5))
        ));
    }

    #[test]
    fn scale_over_models_examples() {
        assert_eq!(scale_over_models(&[0.7, 1.0]).unwrap(), 1.0);
        assert_eq!(scale_over_models(&[0.3]).unwrap(), 0.3);
        assert_eq!(scale_over_models(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(scale_over_models(&[]), Err(Error::Config(_))));
    }

    #[test]
    fn laplace_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_laplace(0.0, &mut rng).unwrap(), 0.0);
        assert_eq!(laplace_from_uniform(2.0, 0.0), 0.0);
        assert!(sample_laplace(-1.0, &mut rng).is_err());
        // quartiles of Lap(b) are at -b ln 2 and b ln 2
        assert_abs_diff_eq!(laplace_from_uniform(2.0, 0.25), 2.0 * 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(laplace_from_uniform(2.0, -0.25), -2.0 * 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn laplace_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_laplace(2.0, &mut rng).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() <= 0.02, "mean {mean}");
        assert!((var - 8.0).abs() <= 0.4, "variance {var}");
    }

    #[test]
    fn publish_examples() {
        let p = default_params();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let exact = publish_rate(0, 437.5, 0.0, &p, &mut rng).unwrap();
        assert_eq!(exact.r_published, exact.r_opt);
        assert_eq!(exact.r_opt, 500.0);

        let noisy = publish_rate(0, 437.5, 1.0, &p, &mut rng).unwrap();
        assert_eq!(noisy.r_published, noisy.r_opt + noisy.noise);
        assert!((noisy.r_published - 500.0).abs() < 20.0);

        let a = publish_rate(4, 10.0, 1.0, &p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = publish_rate(4, 10.0, 1.0, &p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn step_examples() {
        let p = default_params();
        let u = specs(&[0.5, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);

        let full = Belief::joint(0, BeliefKind::Prior, vec![0.25; 4]).unwrap();
        let (_, lambda) = step_blowfish(&[full], &u, &p, 10.0, &mut rng).unwrap();
        assert_eq!(lambda, 1.0);

        let point = Belief::joint(0, BeliefKind::Prior, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let (rec, lambda) = step_blowfish(&[point], &u, &p, 10.0, &mut rng).unwrap();
        assert_eq!(lambda, 0.0);
        assert_eq!(rec.r_published, 72.5);

        // kappa {0} under one model, {1} under the other
        let m1 = Belief::factorized(0, BeliefKind::Prior, vec![0.5, 1.0]).unwrap();
        let m2 = Belief::factorized(0, BeliefKind::Prior, vec![0.0, 0.5]).unwrap();
        let (_, lambda) = step_blowfish(&[m1, m2], &u, &p, 10.0, &mut rng).unwrap();
        assert_eq!(lambda, 1.0);
    }

    #[test]
    fn naive_examples() {
        let p = default_params();
        let u = specs(&[0.3, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rec = step_naive(0, &u, &p, 1.0, &mut rng).unwrap();
        assert_eq!(rec.lambda, 1.0);
        assert_eq!(rec.lambda / p.epsilon, 2.0);

        let single = specs(&[0.8]);
        let both = Belief::factorized(0, BeliefKind::Prior, vec![0.4]).unwrap();
        assert_eq!(blowfish_lambda(&[both], &single, &p).unwrap(), naive_lambda(&single, &p));
    }

    #[test]
    fn curator_collapses_for_deterministic_start() {
        let steps = vec![vec![[[0.9, 0.1], [0.2, 0.8]]; 2]];
        let model = OccupancyModel::new("m", 2, vec![1.0, 1.0], TransitionSpec::factorized(steps).unwrap()).unwrap();
        let mut curator =
            Curator::new(ModelClass::single(model), specs(&[0.5, 1.0]), default_params(), SupportPreserving).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let first = curator.step(100.0, &mut rng).unwrap();
        assert_eq!(first.lambda, 0.0);
        let second = curator.step(100.0, &mut rng).unwrap();
        assert_eq!(second.lambda, 1.0);
        assert_eq!(second.t, 1);
    }

    #[test]
    fn curator_identity_chain_keeps_lambda_zero() {
        let model = OccupancyModel::new(
            "frozen",
            1,
            vec![0.0],
            TransitionSpec::factorized(vec![vec![IDENTITY2]]).unwrap(),
        )
        .unwrap();
        let mut curator =
            Curator::new(ModelClass::single(model), specs(&[1.0]), default_params(), SupportPreserving).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            assert_eq!(curator.step(0.2, &mut rng).unwrap().lambda, 0.0);
        }
    }
}
