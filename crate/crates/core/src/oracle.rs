//! Cross-check of the factorized discriminating-household computation
//! against explicit enumeration over the joint state space.

use std::collections::BTreeSet;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::mechanism::{blowfish_neighbors, discriminating_households, kappa, nonzero_prior_states};
use crate::model::{
    expand_factorized, propagate_prior, support_states, Belief, BeliefKind, Matrix2, OccupancyModel, TransitionSpec,
};
use crate::rng::{self, domain, StreamRng};

/// A probability that is structurally 0, structurally 1, or anything between.
fn structured_probability(rng: &mut StreamRng) -> f64 {
    match rng.random_range(0..8) {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => rng.random(),
    }
}

/// Random factorized model with frequent structural zeros, so supports
/// shrink and regrow over time.
pub fn random_factorized_model(n: usize, steps: usize, rng: &mut StreamRng) -> Result<OccupancyModel> {
    let initial = (0..n).map(|_| structured_probability(rng)).collect();
    let transitions = (0..steps)
        .map(|_| {
            (0..n)
                .map(|_| {
                    let arrive = structured_probability(rng);
                    let leave = structured_probability(rng);
                    [[1.0 - arrive, arrive], [leave, 1.0 - leave]] as Matrix2
                })
                .collect()
        })
        .collect();
    OccupancyModel::new("random", n, initial, TransitionSpec::factorized(transitions)?)
}

/// Production path: discriminating households from factorized marginal supports.
pub fn factorized_kappa(prior: &Belief) -> Result<BTreeSet<usize>> {
    Ok(kappa(&nonzero_prior_states(prior)?))
}

/// Reference path: enumerate the joint support and its neighbor pairs.
pub fn joint_kappa(prior: &Belief, limit: usize) -> Result<BTreeSet<usize>> {
    let mu = support_states(prior).expand(limit)?;
    Ok(discriminating_households(&blowfish_neighbors(&mu)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleMismatch {
    pub trial: usize,
    pub t: usize,
    pub factorized: BTreeSet<usize>,
    pub joint: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleReport {
    pub n_households: usize,
    pub trials: usize,
    pub steps: usize,
    pub seed: u64,
    pub comparisons: usize,
    pub mismatch: Option<OracleMismatch>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.mismatch.is_none()
    }
}

fn run_trial<F>(n: usize, steps: usize, seed: u64, trial: usize, limit: usize, fast: &F) -> Result<Option<OracleMismatch>>
where
    F: Fn(&Belief) -> Result<BTreeSet<usize>>,
{
    let mut rng = rng::stream(seed, domain::ORACLE_MODEL, n as u64, trial as u64);
    let model = random_factorized_model(n, steps, &mut rng)?;
    let joint = expand_factorized(&model, limit)?;
    let mut fprior = model.initial_belief();
    let mut jprior = joint.initial_belief();
    for t in 0..steps {
        let f = fast(&fprior)?;
        let j = joint_kappa(&jprior, limit)?;
        if f != j {
            return Ok(Some(OracleMismatch {
                trial,
                t,
                factorized: f,
                joint: j,
            }));
        }
        fprior = propagate_prior(&fprior.with_kind(BeliefKind::Posterior), model.transitions(), t)?;
        jprior = propagate_prior(&jprior.with_kind(BeliefKind::Posterior), joint.transitions(), t)?;
    }
    Ok(None)
}

/// Compare `fast_path` with the joint enumeration at every step of `trials`
/// random models. Reports the first disagreement in trial order.
pub fn oracle_check<F>(n: usize, trials: usize, steps: usize, seed: u64, limit: usize, fast_path: F) -> Result<OracleReport>
where
    F: Fn(&Belief) -> Result<BTreeSet<usize>> + Sync,
{
    let outcomes: Vec<Option<OracleMismatch>> = (0..trials)
        .into_par_iter()
        .map(|trial| run_trial(n, steps, seed, trial, limit, &fast_path))
        .collect::<Result<_>>()?;
    let mismatch = outcomes.into_iter().flatten().next();
    let comparisons = match &mismatch {
        Some(m) => m.trial * steps + m.t + 1,
        None => trials * steps,
    };
    Ok(OracleReport {
        n_households: n,
        trials,
        steps,
        seed,
        comparisons,
        mismatch,
    })
}
