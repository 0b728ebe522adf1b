//! Synthetic day of real-time pricing: a population of independent
//! household occupancy chains with individually perturbed habits, uniform
//! consumption, and both mechanisms publishing from the same aggregate.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mechanism::{centered_uniform, naive_lambda, publish_with_uniform, Curator, PrivacyParams, RateRecord, SupportPreserving};
use crate::metrics::rmsre;
use crate::model::{HouseholdSpec, Matrix2, ModelClass, OccupancyModel, TransitionSpec, DEFAULT_JOINT_LIMIT};
use crate::rng::{self, domain};

/// A block of the day with constant transition probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayIntervalSpec {
    pub name: String,
    /// Half-open `[start, end)` in steps from the start of the day.
    pub step_range: [usize; 2],
    /// Chance an occupied household leaves.
    pub p_leave_interval: f64,
    /// Chance an empty household becomes occupied.
    pub p_arrive_interval: f64,
}

impl DayIntervalSpec {
    pub fn new(name: &str, start: usize, end: usize, p_leave: f64, p_arrive: f64) -> Self {
        Self {
            name: name.to_owned(),
            step_range: [start, end],
            p_leave_interval: p_leave,
            p_arrive_interval: p_arrive,
        }
    }

    pub fn len(&self) -> usize {
        self.step_range[1].saturating_sub(self.step_range[0])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How an interval's probability becomes a per-step transition probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalConversion {
    /// The interval probability is the per-step probability.
    PerStep,
    /// Spread geometrically so the whole interval carries the stated chance.
    Geometric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MechanismMode {
    Blowfish,
    Naive,
    Both,
}

impl MechanismMode {
    pub fn blowfish(self) -> bool {
        matches!(self, MechanismMode::Blowfish | MechanismMode::Both)
    }

    pub fn naive(self) -> bool {
        matches!(self, MechanismMode::Naive | MechanismMode::Both)
    }
}

/// The four-interval day, starting at 7 AM: morning 7-8, noon 8-16,
/// evening 16-23, night 23-7.
pub fn default_intervals(steps_per_hour: usize) -> Vec<DayIntervalSpec> {
    let s = steps_per_hour;
    vec![
        DayIntervalSpec::new("morning", 0, s, 0.05, 0.98),
        DayIntervalSpec::new("noon", s, 9 * s, 0.95, 0.05),
        DayIntervalSpec::new("evening", 9 * s, 16 * s, 0.05, 0.99),
        DayIntervalSpec::new("night", 16 * s, 24 * s, 0.01, 0.995),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub n_households: usize,
    pub steps: usize,
    pub epsilon: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Constant term of the generation cost. It never enters the rate.
    pub gamma: f64,
    pub u_max_occupied: f64,
    pub u_max_empty: f64,
    pub initial_occupied_probability: f64,
    pub intervals: Vec<DayIntervalSpec>,
    pub interval_conversion: IntervalConversion,
    pub matrix_noise_sigma: f64,
    pub seed: u64,
    pub joint_oracle_limit: usize,
    pub mode: MechanismMode,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_households: 1000,
            steps: 96,
            epsilon: 0.5,
            alpha: 1.0,
            beta: 62.5,
            gamma: 0.0,
            u_max_occupied: 1.0,
            u_max_empty: 0.5,
            initial_occupied_probability: 1.0,
            intervals: default_intervals(4),
            interval_conversion: IntervalConversion::PerStep,
            matrix_noise_sigma: 0.05,
            seed: 0,
            joint_oracle_limit: DEFAULT_JOINT_LIMIT,
            mode: MechanismMode::Both,
        }
    }
}

impl SimulationConfig {
    pub fn params(&self) -> Result<PrivacyParams> {
        PrivacyParams::new(self.epsilon, self.alpha, self.beta)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_households == 0 || self.steps == 0 {
            return Err(Error::config("need at least one household and one step"));
        }
        self.params()?;
        if !(self.matrix_noise_sigma >= 0.0 && self.matrix_noise_sigma.is_finite()) {
            return Err(Error::config("matrix_noise_sigma must be >= 0"));
        }
        if !(self.u_max_occupied > 0.0 && self.u_max_occupied.is_finite()) {
            return Err(Error::config("u_max_occupied must be positive"));
        }
        if !(0.0..=self.u_max_occupied).contains(&self.u_max_empty) {
            return Err(Error::config("need 0 <= u_max_empty <= u_max_occupied"));
        }
        if !(0.0..=1.0).contains(&self.initial_occupied_probability) {
            return Err(Error::config("initial_occupied_probability must lie in [0, 1]"));
        }
        day_length(&self.intervals)?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Length of the day the intervals tile, checking that they tile `[0, D)`
/// without gaps or overlap.
pub fn day_length(intervals: &[DayIntervalSpec]) -> Result<usize> {
    if intervals.is_empty() {
        return Err(Error::config("no day intervals"));
    }
    let mut sorted: Vec<&DayIntervalSpec> = intervals.iter().collect();
    sorted.sort_by_key(|iv| iv.step_range[0]);
    let mut next = 0;
    for iv in sorted {
        let [start, end] = iv.step_range;
        if start != next || end <= start {
            return Err(Error::config(format!(
                "interval {:?} [{start}, {end}) does not continue the partition at step {next}",
                iv.name
            )));
        }
        for p in [iv.p_leave_interval, iv.p_arrive_interval] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("interval {:?}: probability {p} outside [0, 1]", iv.name)));
            }
        }
        next = end;
    }
    Ok(next)
}

/// Interval index for every step of the day.
pub fn interval_of_step(intervals: &[DayIntervalSpec]) -> Result<Vec<usize>> {
    let d = day_length(intervals)?;
    let mut out = vec![0; d];
    for (i, iv) in intervals.iter().enumerate() {
        out[iv.step_range[0]..iv.step_range[1]].fill(i);
    }
    Ok(out)
}

/// Per-step probability whose `k`-step escape chance is `p_interval`.
pub fn per_step_probability(p_interval: f64, k_steps: usize) -> f64 {
    debug_assert!(k_steps >= 1);
    1.0 - (1.0 - p_interval).powf(1.0 / k_steps as f64)
}

fn two_state(leave: f64, arrive: f64) -> Matrix2 {
    [[1.0 - arrive, arrive], [leave, 1.0 - leave]]
}

/// One base matrix per interval, in the order given.
pub fn interval_matrices(intervals: &[DayIntervalSpec], conversion: IntervalConversion) -> Result<Vec<Matrix2>> {
    day_length(intervals)?;
    Ok(intervals
        .iter()
        .map(|iv| {
            let convert = |p: f64| match conversion {
                IntervalConversion::PerStep => p,
                IntervalConversion::Geometric => per_step_probability(p, iv.len()),
            };
            two_state(convert(iv.p_leave_interval), convert(iv.p_arrive_interval))
        })
        .collect())
}

/// Per-step base matrices over one day.
pub fn build_base_matrices(intervals: &[DayIntervalSpec], conversion: IntervalConversion) -> Result<Vec<Matrix2>> {
    let mats = interval_matrices(intervals, conversion)?;
    Ok(interval_of_step(intervals)?.into_iter().map(|i| mats[i]).collect())
}

/// Add `N(0, sigma^2)` to both off-diagonal entries, clamp to `[0, 1]`, and
/// restore the diagonals as complements.
pub fn perturb_matrix<R: Rng + ?Sized>(base: &Matrix2, sigma: f64, rng: &mut R) -> Matrix2 {
    if sigma == 0.0 {
        return *base;
    }
    let noise = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    let arrive = (base[0][1] + noise.sample(rng)).clamp(0.0, 1.0);
    let leave = (base[1][0] + noise.sample(rng)).clamp(0.0, 1.0);
    two_state(leave, arrive)
}

/// Household bounds, individual habits, and initial occupancy.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub specs: Vec<HouseholdSpec>,
    /// `[household][interval]`.
    pub habits: Vec<Vec<Matrix2>>,
    pub initial: Vec<bool>,
}

/// Draw the population. Each household's bounds share one uniform quantile,
/// so each bound is uniform on its own range and the empty bound never
/// exceeds the occupied one.
pub fn sample_households(config: &SimulationConfig) -> Result<Population> {
    config.validate()?;
    let base = interval_matrices(&config.intervals, config.interval_conversion)?;
    let drawn: Vec<(HouseholdSpec, Vec<Matrix2>, bool)> = (0..config.n_households)
        .into_par_iter()
        .map(|h| {
            let mut rng = rng::stream(config.seed, domain::HOUSEHOLD_SETUP, h as u64, 0);
            let q: f64 = rng.random();
            let spec = HouseholdSpec::new(h, q * config.u_max_occupied, q * config.u_max_empty)?;
            let habits = base
                .iter()
                .map(|m| perturb_matrix(m, config.matrix_noise_sigma, &mut rng))
                .collect();
            let occupied = rng.random::<f64>() < config.initial_occupied_probability;
            Ok((spec, habits, occupied))
        })
        .collect::<Result<_>>()?;
    let mut pop = Population {
        specs: Vec::with_capacity(drawn.len()),
        habits: Vec::with_capacity(drawn.len()),
        initial: Vec::with_capacity(drawn.len()),
    };
    for (s, m, o) in drawn {
        pop.specs.push(s);
        pop.habits.push(m);
        pop.initial.push(o);
    }
    Ok(pop)
}

/// The curator's single model: every household follows the unperturbed base
/// chain.
pub fn curator_model(config: &SimulationConfig) -> Result<OccupancyModel> {
    let schedule = build_base_matrices(&config.intervals, config.interval_conversion)?;
    let steps = schedule.iter().map(|m| vec![*m; config.n_households]).collect();
    OccupancyModel::new(
        "base",
        config.n_households,
        vec![config.initial_occupied_probability; config.n_households],
        TransitionSpec::factorized(steps)?,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub mean_occupancy: f64,
    pub z: f64,
    pub r_opt: f64,
    pub blowfish: Option<RateRecord>,
    pub naive: Option<RateRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsreSummary {
    pub blowfish: Option<f64>,
    pub naive: Option<f64>,
    /// Naive over Blowfish, when both ran.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub seed: u64,
    pub config_hash: String,
    pub naive_lambda: f64,
    pub records: Vec<StepRecord>,
}

pub const CSV_HEADER: &str = "t,mean_occupancy,z,r_opt,r_blowfish,r_naive,lambda_blowfish,lambda_naive";

impl SimulationResult {
    fn series(&self, pick: impl Fn(&StepRecord) -> Option<&RateRecord>) -> Option<(Vec<f64>, Vec<f64>)> {
        self.records
            .iter()
            .map(|r| pick(r).map(|rec| (rec.r_opt, rec.r_published)))
            .collect::<Option<Vec<_>>>()
            .map(|v| v.into_iter().unzip())
    }

    pub fn rmsre_blowfish(&self) -> Result<Option<f64>> {
        self.series(|r| r.blowfish.as_ref()).map(|(o, p)| rmsre(&o, &p)).transpose()
    }

    pub fn rmsre_naive(&self) -> Result<Option<f64>> {
        self.series(|r| r.naive.as_ref()).map(|(o, p)| rmsre(&o, &p)).transpose()
    }

    pub fn summary(&self) -> Result<RmsreSummary> {
        let blowfish = self.rmsre_blowfish()?;
        let naive = self.rmsre_naive()?;
        let ratio = match (blowfish, naive) {
            (Some(b), Some(n)) if b > 0.0 => Some(n / b),
            _ => None,
        };
        Ok(RmsreSummary { blowfish, naive, ratio })
    }

    /// One row per step under [`CSV_HEADER`]; columns of a mechanism that did
    /// not run are left empty.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.t,
                r.mean_occupancy,
                r.z,
                r.r_opt,
                opt(r.blowfish.map(|b| b.r_published)),
                opt(r.naive.map(|b| b.r_published)),
                opt(r.blowfish.map(|b| b.lambda)),
                opt(r.naive.map(|b| b.lambda)),
            )?;
        }
        Ok(())
    }
}

/// Advance household `h` into step `t` (for `t > 0`) and draw its consumption.
fn household_step(
    config: &SimulationConfig,
    pop: &Population,
    slot_of_step: &[usize],
    h: usize,
    t: usize,
    occupied: bool,
) -> (bool, f64) {
    let mut rng = rng::stream(config.seed, domain::HOUSEHOLD_DYNAMICS, h as u64, t as u64);
    let occupied = if t == 0 {
        occupied
    } else {
        let a = &pop.habits[h][slot_of_step[(t - 1) % slot_of_step.len()]];
        let u: f64 = rng.random();
        if occupied {
            u >= a[1][0]
        } else {
            u < a[0][1]
        }
    };
    let x = pop.specs[h].bound_in(occupied) * rng.random::<f64>();
    (occupied, x)
}

/// Run the full pricing loop. Output depends only on the config, never on
/// the size of the rayon pool it runs in.
pub fn run(config: &SimulationConfig) -> Result<SimulationResult> {
    config.validate()?;
    let params = config.params()?;
    let pop = sample_households(config)?;
    let slot_of_step = interval_of_step(&config.intervals)?;
    let mut curator = if config.mode.blowfish() {
        let class = ModelClass::single(curator_model(config)?);
        Some(Curator::new(class, pop.specs.clone(), params, SupportPreserving)?)
    } else {
        None
    };
    let lambda_naive = naive_lambda(&pop.specs, &params);

    let mut states = pop.initial.clone();
    let mut records = Vec::with_capacity(config.steps);
    for t in 0..config.steps {
        let stepped: Vec<(bool, f64)> = states
            .par_iter()
            .enumerate()
            .map(|(h, &occ)| household_step(config, &pop, &slot_of_step, h, t, occ))
            .collect();
        let mut z = 0.0;
        let mut occupied = 0usize;
        for (h, &(occ, x)) in stepped.iter().enumerate() {
            states[h] = occ;
            occupied += occ as usize;
            z += x;
        }

        // Both mechanisms invert the same uniform: a paired comparison.
        let u = centered_uniform(&mut rng::stream(config.seed, domain::RATE_NOISE, t as u64, 0));
        let blowfish = match curator.as_mut() {
            Some(c) => Some(c.step_with_uniform(z, u)?),
            None => None,
        };
        let naive = if config.mode.naive() {
            Some(publish_with_uniform(t, z, lambda_naive, &params, u)?)
        } else {
            None
        };
        records.push(StepRecord {
            t,
            mean_occupancy: occupied as f64 / config.n_households as f64,
            z,
            r_opt: params.alpha * z + params.beta,
            blowfish,
            naive,
        });
    }
    Ok(SimulationResult {
        seed: config.seed,
        config_hash: config.hash(),
        naive_lambda: lambda_naive,
        records,
    })
}
