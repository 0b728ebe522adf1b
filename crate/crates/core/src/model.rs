//! Occupancy model: household consumption bounds, joint occupancy states,
//! time-indexed transition structure, and the belief recursion shared by the
//! curator and the adversary.
//!
//! Two representations coexist. The joint form carries a distribution over
//! all `2^N` occupancy states and exists as a brute-force reference for small
//! `N`. The factorized form carries one independent two-state chain per
//! household and is what scales to realistic populations.
//!
//! State ordering: household `0` is the least-significant bit of the joint
//! state index, and a cleared bit means the household is empty.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Largest `N` for which the joint `2^N` representation may be built.
pub const DEFAULT_JOINT_LIMIT: usize = 12;

const STOCHASTIC_TOL: f64 = 1e-12;
const BELIEF_TOL: f64 = 1e-9;

/// Consumption bounds of one household, known to the curator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HouseholdSpec {
    pub id: usize,
    pub u_occupied: f64,
    pub u_empty: f64,
}

impl HouseholdSpec {
    pub fn new(id: usize, u_occupied: f64, u_empty: f64) -> Result<Self> {
        let spec = Self {
            id,
            u_occupied,
            u_empty,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.u_occupied.is_finite() || !self.u_empty.is_finite() {
            return Err(Error::domain(format!(
                "household {}: bounds must be finite",
                self.id
            )));
        }
        if self.u_empty < 0.0 || self.u_empty > self.u_occupied {
            return Err(Error::domain(format!(
                "household {}: need 0 <= u_empty ({}) <= u_occupied ({})",
                self.id, self.u_empty, self.u_occupied
            )));
        }
        Ok(())
    }

    /// The single per-household bound the mechanism uses. It dominates
    /// consumption in both occupancy states.
    pub fn bound(&self) -> f64 {
        self.u_occupied
    }

    pub fn bound_in(&self, occupied: bool) -> f64 {
        if occupied {
            self.u_occupied
        } else {
            self.u_empty
        }
    }
}

/// Occupancy of every household at one time step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateVector {
    n: u8,
    bits: u64,
}

impl StateVector {
    pub const MAX_HOUSEHOLDS: usize = 63;

    pub fn new(n: usize, bits: u64) -> Result<Self> {
        if n > Self::MAX_HOUSEHOLDS {
            return Err(Error::Capacity {
                n,
                limit: Self::MAX_HOUSEHOLDS,
            });
        }
        if bits >> n != 0 {
            return Err(Error::shape(format!(
                "state bits {bits:#b} do not fit in {n} households"
            )));
        }
        Ok(Self { n: n as u8, bits })
    }

    pub fn from_index(n: usize, index: usize) -> Result<Self> {
        Self::new(n, index as u64)
    }

    pub fn from_occupancy(occupied: &[bool]) -> Result<Self> {
        let bits = occupied
            .iter()
            .enumerate()
            .fold(0u64, |acc, (h, &o)| acc | ((o as u64) << h));
        Self::new(occupied.len(), bits)
    }

    /// Every state over `n` households in index order.
    pub fn all(n: usize) -> Result<impl Iterator<Item = StateVector>> {
        let first = Self::new(n, 0)?;
        let count = 1u64 << n;
        Ok((0..count).map(move |bits| StateVector { n: first.n, bits }))
    }

    pub fn len(&self) -> usize {
        self.n as usize
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn index(&self) -> usize {
        self.bits as usize
    }

    pub fn is_occupied(&self, household: usize) -> bool {
        household < self.len() && (self.bits >> household) & 1 == 1
    }

    pub fn occupancy(&self) -> Vec<bool> {
        (0..self.len()).map(|h| self.is_occupied(h)).collect()
    }

    pub fn occupied_count(&self) -> u32 {
        self.bits.count_ones()
    }

    /// L1 distance between the two occupancy vectors.
    pub fn hamming(&self, other: &StateVector) -> u32 {
        (self.bits ^ other.bits).count_ones()
    }

    /// The single household on which the two states differ, if they differ on
    /// exactly one.
    pub fn differing_household(&self, other: &StateVector) -> Option<usize> {
        let diff = self.bits ^ other.bits;
        (self.n == other.n && diff.count_ones() == 1).then(|| diff.trailing_zeros() as usize)
    }

    pub fn with_household(&self, household: usize, occupied: bool) -> StateVector {
        let mask = 1u64 << household;
        let bits = if occupied {
            self.bits | mask
        } else {
            self.bits & !mask
        };
        StateVector { n: self.n, bits }
    }
}

/// Written with household 0 as the rightmost character, e.g. `"01"` has only
/// household 0 occupied.
impl fmt::Display for StateVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for h in (0..self.len()).rev() {
            f.write_str(if self.is_occupied(h) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for StateVector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut occupied = Vec::with_capacity(s.len());
        for c in s.chars().rev() {
            match c {
                '0' => occupied.push(false),
                '1' => occupied.push(true),
                _ => return Err(Error::shape(format!("invalid state string {s:?}"))),
            }
        }
        Self::from_occupancy(&occupied)
    }
}

impl Serialize for StateVector {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StateVector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-household two-state transition matrix, `[from][to]` with index 0 =
/// empty and 1 = occupied.
pub type Matrix2 = [[f64; 2]; 2];

pub const IDENTITY2: Matrix2 = [[1.0, 0.0], [0.0, 1.0]];

fn check_probability_row(row: &[f64], what: &str) -> Result<()> {
    let mut sum = 0.0;
    for &p in row {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::shape(format!("{what}: entry {p} outside [0, 1]")));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::shape(format!("{what}: row sums to {sum}")));
    }
    Ok(())
}

pub fn validate_matrix2(m: &Matrix2) -> Result<()> {
    check_probability_row(&m[0], "2x2 transition")?;
    check_probability_row(&m[1], "2x2 transition")
}

/// Dense row-stochastic matrix over joint occupancy states.
#[derive(Debug, Clone, PartialEq)]
pub struct JointMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl JointMatrix {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(Error::shape(format!(
                "joint matrix of dimension {dim} needs {} entries, got {}",
                dim * dim,
                data.len()
            )));
        }
        let matrix = Self { dim, data };
        for i in 0..dim {
            check_probability_row(matrix.row(i), "joint transition")?;
        }
        Ok(matrix)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::shape("joint matrix must be square"));
        }
        Self::new(dim, rows.concat())
    }

    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        Self { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.data[from * self.dim + to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.data[from * self.dim..(from + 1) * self.dim]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }

    /// Kronecker expansion of independent per-household chains.
    pub fn from_factors(factors: &[Matrix2]) -> Self {
        let n = factors.len();
        let dim = 1usize << n;
        let mut data = vec![0.0; dim * dim];
        for from in 0..dim {
            for to in 0..dim {
                data[from * dim + to] = factors
                    .iter()
                    .enumerate()
                    .map(|(h, m)| m[(from >> h) & 1][(to >> h) & 1])
                    .product();
            }
        }
        Self { dim, data }
    }
}

/// Time-indexed transition structure. The schedule is periodic: step `t`
/// uses entry `t % period`.
#[derive(Debug, Clone, PartialEq)]
pub enum TransitionSpec {
    Joint(Vec<JointMatrix>),
    /// Indexed `[t][household]`.
    Factorized(Vec<Vec<Matrix2>>),
}

impl TransitionSpec {
    pub fn joint(steps: Vec<JointMatrix>) -> Result<Self> {
        let dim = steps
            .first()
            .ok_or_else(|| Error::shape("transition schedule is empty"))?
            .dim();
        if steps.iter().any(|m| m.dim() != dim) {
            return Err(Error::shape("joint matrices differ in dimension"));
        }
        Ok(TransitionSpec::Joint(steps))
    }

    pub fn factorized(steps: Vec<Vec<Matrix2>>) -> Result<Self> {
        let n = steps
            .first()
            .ok_or_else(|| Error::shape("transition schedule is empty"))?
            .len();
        for step in &steps {
            if step.len() != n {
                return Err(Error::shape("factorized step has wrong household count"));
            }
            step.iter().try_for_each(validate_matrix2)?;
        }
        Ok(TransitionSpec::Factorized(steps))
    }

    pub fn period(&self) -> usize {
        match self {
            TransitionSpec::Joint(s) => s.len(),
            TransitionSpec::Factorized(s) => s.len(),
        }
    }

    /// Number of households implied by the schedule.
    pub fn n_households(&self) -> usize {
        match self {
            TransitionSpec::Joint(s) => s[0].dim().trailing_zeros() as usize,
            TransitionSpec::Factorized(s) => s[0].len(),
        }
    }

    pub fn is_joint(&self) -> bool {
        matches!(self, TransitionSpec::Joint(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelMode {
    Joint,
    Factorized,
}

/// One candidate data-generating model: initial distribution plus
/// transitions.
///
/// `initial` holds the joint distribution over `2^N` states in joint mode and
/// the per-household occupancy probabilities in factorized mode.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyModel {
    label: String,
    n_households: usize,
    initial: Vec<f64>,
    transitions: TransitionSpec,
}

impl OccupancyModel {
    pub fn new(
        label: impl Into<String>,
        n_households: usize,
        initial: Vec<f64>,
        transitions: TransitionSpec,
    ) -> Result<Self> {
        if n_households == 0 {
            return Err(Error::shape("model needs at least one household"));
        }
        match &transitions {
            TransitionSpec::Joint(steps) => {
                if n_households > StateVector::MAX_HOUSEHOLDS {
                    return Err(Error::Capacity {
                        n: n_households,
                        limit: StateVector::MAX_HOUSEHOLDS,
                    });
                }
                let m = 1usize << n_households;
                if steps[0].dim() != m || initial.len() != m {
                    return Err(Error::shape(format!(
                        "joint model over {n_households} households needs {m} states"
                    )));
                }
                check_probability_row(&initial, "initial distribution")?;
            }
            TransitionSpec::Factorized(steps) => {
                if steps[0].len() != n_households || initial.len() != n_households {
                    return Err(Error::shape(format!(
                        "factorized model needs {n_households} marginals and matrices"
                    )));
                }
                if let Some(p) = initial.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                    return Err(Error::shape(format!("initial marginal {p} outside [0, 1]")));
                }
            }
        }
        Ok(Self {
            label: label.into(),
            n_households,
            initial,
            transitions,
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn n_households(&self) -> usize {
        self.n_households
    }

    pub fn mode(&self) -> ModelMode {
        if self.transitions.is_joint() {
            ModelMode::Joint
        } else {
            ModelMode::Factorized
        }
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn transitions(&self) -> &TransitionSpec {
        &self.transitions
    }

    /// Prior before any rate has been published.
    pub fn initial_belief(&self) -> Belief {
        let repr = match self.mode() {
            ModelMode::Joint => BeliefRepr::Joint {
                support: self.initial.iter().map(|&p| p > 0.0).collect(),
                probs: self.initial.clone(),
            },
            ModelMode::Factorized => BeliefRepr::Factorized {
                support: self
                    .initial
                    .iter()
                    .map(|&p| MarginalSupport::from_probability(p))
                    .collect(),
                occupied: self.initial.clone(),
            },
        };
        Belief {
            t: 0,
            kind: BeliefKind::Prior,
            repr,
        }
    }
}

/// Finite set of candidate models the curator hedges over.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelClass {
    models: Vec<OccupancyModel>,
}

impl ModelClass {
    pub fn new(models: Vec<OccupancyModel>) -> Result<Self> {
        let n = models
            .first()
            .ok_or_else(|| Error::config("model class is empty"))?
            .n_households();
        if models.iter().any(|m| m.n_households() != n) {
            return Err(Error::config("models in a class must share N"));
        }
        Ok(Self { models })
    }

    pub fn single(model: OccupancyModel) -> Self {
        Self {
            models: vec![model],
        }
    }

    pub fn models(&self) -> &[OccupancyModel] {
        &self.models
    }

    pub fn n_households(&self) -> usize {
        self.models[0].n_households()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BeliefKind {
    Prior,
    Posterior,
}

/// Exact support of one household's occupancy marginal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MarginalSupport {
    AlwaysEmpty,
    AlwaysOccupied,
    Both,
}

impl MarginalSupport {
    pub fn from_flags(empty: bool, occupied: bool) -> Option<Self> {
        match (empty, occupied) {
            (true, true) => Some(MarginalSupport::Both),
            (true, false) => Some(MarginalSupport::AlwaysEmpty),
            (false, true) => Some(MarginalSupport::AlwaysOccupied),
            (false, false) => None,
        }
    }

    /// Support implied by an exact probability value.
    pub fn from_probability(p_occupied: f64) -> Self {
        if p_occupied <= 0.0 {
            MarginalSupport::AlwaysEmpty
        } else if p_occupied >= 1.0 {
            MarginalSupport::AlwaysOccupied
        } else {
            MarginalSupport::Both
        }
    }

    pub fn allows(&self, occupied: bool) -> bool {
        match self {
            MarginalSupport::Both => true,
            MarginalSupport::AlwaysEmpty => !occupied,
            MarginalSupport::AlwaysOccupied => occupied,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BeliefRepr {
    Joint {
        probs: Vec<f64>,
        support: Vec<bool>,
    },
    Factorized {
        occupied: Vec<f64>,
        support: Vec<MarginalSupport>,
    },
}

/// Prior or posterior over occupancy states, with support flags carried
/// symbolically next to the numeric values.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    pub t: usize,
    pub kind: BeliefKind,
    repr: BeliefRepr,
}

impl Belief {
    /// Joint belief with support read off exact zeros of `probs`.
    pub fn joint(t: usize, kind: BeliefKind, probs: Vec<f64>) -> Result<Self> {
        let support = probs.iter().map(|&p| p > 0.0).collect();
        Self::joint_with_support(t, kind, probs, support)
    }

    pub fn joint_with_support(
        t: usize,
        kind: BeliefKind,
        probs: Vec<f64>,
        support: Vec<bool>,
    ) -> Result<Self> {
        if !probs.len().is_power_of_two() || support.len() != probs.len() {
            return Err(Error::shape("joint belief length must be 2^N"));
        }
        if probs.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(Error::domain("joint belief has a negative or non-finite entry"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > BELIEF_TOL {
            return Err(Error::domain(format!("joint belief sums to {sum}")));
        }
        if probs.iter().zip(&support).any(|(&p, &s)| !s && p != 0.0) {
            return Err(Error::domain("unsupported state carries probability mass"));
        }
        Ok(Self {
            t,
            kind,
            repr: BeliefRepr::Joint { probs, support },
        })
    }

    /// Factorized belief with support read off exact values of the marginals.
    pub fn factorized(t: usize, kind: BeliefKind, occupied: Vec<f64>) -> Result<Self> {
        let support = occupied
            .iter()
            .map(|&p| MarginalSupport::from_probability(p))
            .collect();
        Self::factorized_with_support(t, kind, occupied, support)
    }

    pub fn factorized_with_support(
        t: usize,
        kind: BeliefKind,
        occupied: Vec<f64>,
        support: Vec<MarginalSupport>,
    ) -> Result<Self> {
        if support.len() != occupied.len() {
            return Err(Error::shape("support and marginals differ in length"));
        }
        for (&p, s) in occupied.iter().zip(&support) {
            let ok = match s {
                MarginalSupport::AlwaysEmpty => p == 0.0,
                MarginalSupport::AlwaysOccupied => p == 1.0,
                MarginalSupport::Both => (0.0..=1.0).contains(&p),
            };
            if !ok {
                return Err(Error::domain(format!(
                    "marginal {p} contradicts support {s:?}"
                )));
            }
        }
        Ok(Self {
            t,
            kind,
            repr: BeliefRepr::Factorized { occupied, support },
        })
    }

    pub fn repr(&self) -> &BeliefRepr {
        &self.repr
    }

    pub fn n_households(&self) -> usize {
        match &self.repr {
            BeliefRepr::Joint { probs, .. } => probs.len().trailing_zeros() as usize,
            BeliefRepr::Factorized { occupied, .. } => occupied.len(),
        }
    }

    pub fn is_joint(&self) -> bool {
        matches!(self.repr, BeliefRepr::Joint { .. })
    }

    pub fn with_kind(mut self, kind: BeliefKind) -> Self {
        self.kind = kind;
        self
    }

    /// Joint probabilities, if this is a joint belief.
    pub fn probs(&self) -> Option<&[f64]> {
        match &self.repr {
            BeliefRepr::Joint { probs, .. } => Some(probs),
            BeliefRepr::Factorized { .. } => None,
        }
    }

    pub fn joint_support(&self) -> Option<&[bool]> {
        match &self.repr {
            BeliefRepr::Joint { support, .. } => Some(support),
            BeliefRepr::Factorized { .. } => None,
        }
    }

    /// Probability that each household is occupied.
    pub fn occupancy_marginals(&self) -> Vec<f64> {
        match &self.repr {
            BeliefRepr::Factorized { occupied, .. } => occupied.clone(),
            BeliefRepr::Joint { probs, .. } => {
                let n = self.n_households();
                let mut out = vec![0.0; n];
                for (idx, &p) in probs.iter().enumerate() {
                    for (h, o) in out.iter_mut().enumerate() {
                        if (idx >> h) & 1 == 1 {
                            *o += p;
                        }
                    }
                }
                out
            }
        }
    }
}

/// One step of the prior recursion: the posterior at `t` pushed through the
/// transition for step `t` gives the prior at `t + 1`.
pub fn propagate_prior(posterior: &Belief, transitions: &TransitionSpec, t: usize) -> Result<Belief> {
    if posterior.kind != BeliefKind::Posterior {
        return Err(Error::domain("propagation expects a posterior belief"));
    }
    let repr = match (&posterior.repr, transitions) {
        (BeliefRepr::Joint { probs, support }, TransitionSpec::Joint(steps)) => {
            let a = &steps[t % steps.len()];
            if a.dim() != probs.len() {
                return Err(Error::shape(format!(
                    "belief over {} states, matrix of dimension {}",
                    probs.len(),
                    a.dim()
                )));
            }
            let m = probs.len();
            let mut next = vec![0.0; m];
            let mut next_support = vec![false; m];
            for i in (0..m).filter(|&i| support[i]) {
                let p = probs[i];
                for (j, &aij) in a.row(i).iter().enumerate() {
                    if aij > 0.0 {
                        next_support[j] = true;
                        next[j] += p * aij;
                    }
                }
            }
            BeliefRepr::Joint {
                probs: next,
                support: next_support,
            }
        }
        (BeliefRepr::Factorized { occupied, support }, TransitionSpec::Factorized(steps)) => {
            let mats = &steps[t % steps.len()];
            if mats.len() != occupied.len() {
                return Err(Error::shape(format!(
                    "belief over {} households, transitions for {}",
                    occupied.len(),
                    mats.len()
                )));
            }
            let mut next = Vec::with_capacity(occupied.len());
            let mut next_support = Vec::with_capacity(occupied.len());
            for ((&p, s), a) in occupied.iter().zip(support).zip(mats) {
                let from_empty = s.allows(false);
                let from_occupied = s.allows(true);
                let reach_occupied = (from_empty && a[0][1] > 0.0) || (from_occupied && a[1][1] > 0.0);
                let reach_empty = (from_empty && a[0][0] > 0.0) || (from_occupied && a[1][0] > 0.0);
                let ns = MarginalSupport::from_flags(reach_empty, reach_occupied)
                    .expect("row-stochastic matrix keeps some state reachable");
                let q = match ns {
                    MarginalSupport::AlwaysEmpty => 0.0,
                    MarginalSupport::AlwaysOccupied => 1.0,
                    MarginalSupport::Both => ((1.0 - p) * a[0][1] + p * a[1][1]).clamp(0.0, 1.0),
                };
                next.push(q);
                next_support.push(ns);
            }
            BeliefRepr::Factorized {
                occupied: next,
                support: next_support,
            }
        }
        _ => return Err(Error::shape("belief and transitions use different representations")),
    };
    Ok(Belief {
        t: posterior.t + 1,
        kind: BeliefKind::Prior,
        repr,
    })
}

/// Joint counterpart of a factorized model: tensor-product initial
/// distribution and Kronecker-product transitions.
pub fn expand_factorized(model: &OccupancyModel, limit: usize) -> Result<OccupancyModel> {
    let n = model.n_households();
    let steps = match model.transitions() {
        TransitionSpec::Factorized(steps) => steps,
        TransitionSpec::Joint(_) => return Err(Error::shape("model is already joint")),
    };
    if n > limit {
        return Err(Error::Capacity { n, limit });
    }
    let m = 1usize << n;
    let initial = (0..m)
        .map(|idx| {
            model
                .initial()
                .iter()
                .enumerate()
                .map(|(h, &p)| if (idx >> h) & 1 == 1 { p } else { 1.0 - p })
                .product()
        })
        .collect();
    let joint_steps = steps.iter().map(|s| JointMatrix::from_factors(s)).collect();
    // Products of exact rows only drift by rounding, so skip re-validation.
    Ok(OccupancyModel {
        label: model.label().to_owned(),
        n_households: n,
        initial,
        transitions: TransitionSpec::Joint(joint_steps),
    })
}

/// The states a belief assigns non-zero probability to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SupportSet {
    Joint { n: usize, states: Vec<StateVector> },
    Factorized(Vec<MarginalSupport>),
}

impl SupportSet {
    pub fn n_households(&self) -> usize {
        match self {
            SupportSet::Joint { n, .. } => *n,
            SupportSet::Factorized(s) => s.len(),
        }
    }

    /// Enumerate as explicit joint states. Factorized sets expand to the
    /// Cartesian product of the per-household supports.
    pub fn expand(&self, limit: usize) -> Result<Vec<StateVector>> {
        match self {
            SupportSet::Joint { states, .. } => Ok(states.clone()),
            SupportSet::Factorized(marginals) => {
                let n = marginals.len();
                if n > limit {
                    return Err(Error::Capacity { n, limit });
                }
                Ok(StateVector::all(n)?
                    .filter(|s| marginals.iter().enumerate().all(|(h, m)| m.allows(s.is_occupied(h))))
                    .collect())
            }
        }
    }
}

pub fn support_states(belief: &Belief) -> SupportSet {
    match &belief.repr {
        BeliefRepr::Joint { support, .. } => {
            let n = belief.n_households();
            let states = support
                .iter()
                .enumerate()
                .filter(|(_, &s)| s)
                .map(|(idx, _)| StateVector { n: n as u8, bits: idx as u64 })
                .collect();
            SupportSet::Joint { n, states }
        }
        BeliefRepr::Factorized { support, .. } => SupportSet::Factorized(support.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn posterior(probs: Vec<f64>) -> Belief {
        Belief::joint(0, BeliefKind::Posterior, probs).unwrap()
    }

    fn example_matrix() -> TransitionSpec {
        TransitionSpec::joint(vec![JointMatrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap()]).unwrap()
    }

    #[test]
    fn propagate_selects_row() {
        let prior = propagate_prior(&posterior(vec![1.0, 0.0]), &example_matrix(), 0).unwrap();
        assert_eq!(prior.probs().unwrap(), &[0.9, 0.1]);
        assert_eq!(prior.kind, BeliefKind::Prior);
        assert_eq!(prior.t, 1);
    }

    #[test]
    fn propagate_identity_is_noop() {
        let p = vec![0.125, 0.375, 0.0, 0.5];
        let a = TransitionSpec::joint(vec![JointMatrix::identity(4)]).unwrap();
        let prior = propagate_prior(&posterior(p.clone()), &a, 3).unwrap();
        assert_eq!(prior.probs().unwrap(), &p[..]);
        assert_eq!(prior.joint_support().unwrap(), &[true, true, false, true]);
    }

    #[test]
    fn propagate_mixture() {
        let prior = propagate_prior(&posterior(vec![0.5, 0.5]), &example_matrix(), 0).unwrap();
        let p = prior.probs().unwrap();
        assert_abs_diff_eq!(p[0], 0.55, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.45, epsilon = 1e-15);
    }

    #[test]
    fn propagate_rejects_mismatch() {
        let err = propagate_prior(&posterior(vec![0.25; 4]), &example_matrix(), 0).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        let prior = Belief::joint(0, BeliefKind::Prior, vec![1.0, 0.0]).unwrap();
        assert!(propagate_prior(&prior, &example_matrix(), 0).is_err());
    }

    #[test]
    fn row_stochastic_validation() {
        assert!(JointMatrix::from_rows(&[vec![0.5, 0.4], vec![0.0, 1.0]]).is_err());
        assert!(JointMatrix::from_rows(&[vec![1.2, -0.2], vec![0.0, 1.0]]).is_err());
        assert!(validate_matrix2(&[[0.3, 0.7], [0.5, 0.5]]).is_ok());
    }

    fn factorized_model(initial: Vec<f64>, steps: Vec<Vec<Matrix2>>) -> OccupancyModel {
        let n = initial.len();
        OccupancyModel::new("f", n, initial, TransitionSpec::factorized(steps).unwrap()).unwrap()
    }

    #[test]
    fn expand_single_household() {
        let model = factorized_model(vec![0.3], vec![vec![IDENTITY2]]);
        let joint = expand_factorized(&model, DEFAULT_JOINT_LIMIT).unwrap();
        assert_abs_diff_eq!(joint.initial()[0], 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(joint.initial()[1], 0.3, epsilon = 1e-15);
    }

    #[test]
    fn expand_deterministic_pair() {
        let model = factorized_model(vec![1.0, 1.0], vec![vec![IDENTITY2; 2]]);
        let joint = expand_factorized(&model, DEFAULT_JOINT_LIMIT).unwrap();
        assert_eq!(joint.initial(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn expand_respects_limit() {
        let model = factorized_model(vec![0.5; 13], vec![vec![IDENTITY2; 13]]);
        assert!(matches!(
            expand_factorized(&model, DEFAULT_JOINT_LIMIT),
            Err(Error::Capacity { n: 13, limit: 12 })
        ));
    }

    fn random_matrix(rng: &mut impl Rng) -> Matrix2 {
        let leave: f64 = rng.random();
        let arrive: f64 = rng.random();
        [[1.0 - arrive, arrive], [leave, 1.0 - leave]]
    }

    #[test]
    fn expanded_propagation_matches_marginals() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let initial = vec![rng.random(), rng.random()];
            let steps = (0..5).map(|_| vec![random_matrix(&mut rng), random_matrix(&mut rng)]).collect();
            let model = factorized_model(initial, steps);
            let joint = expand_factorized(&model, DEFAULT_JOINT_LIMIT).unwrap();
            let mut f = model.initial_belief().with_kind(BeliefKind::Posterior);
            let mut j = joint.initial_belief().with_kind(BeliefKind::Posterior);
            for t in 0..5 {
                f = propagate_prior(&f, model.transitions(), t).unwrap().with_kind(BeliefKind::Posterior);
                j = propagate_prior(&j, joint.transitions(), t).unwrap().with_kind(BeliefKind::Posterior);
                for (a, b) in f.occupancy_marginals().iter().zip(j.occupancy_marginals()) {
                    assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn joint_support_states() {
        let belief = Belief::joint(0, BeliefKind::Prior, vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        let set = support_states(&belief);
        let names: Vec<String> = set.expand(DEFAULT_JOINT_LIMIT).unwrap().iter().map(|s| s.to_string()).collect();
        assert_eq!(names, ["00", "11"]);
    }

    #[test]
    fn factorized_support_tristate() {
        let belief = Belief::factorized(0, BeliefKind::Prior, vec![0.3, 0.0, 1.0]).unwrap();
        assert_eq!(
            support_states(&belief),
            SupportSet::Factorized(vec![
                MarginalSupport::Both,
                MarginalSupport::AlwaysEmpty,
                MarginalSupport::AlwaysOccupied
            ])
        );
        let expanded = support_states(&belief).expand(8).unwrap();
        let names: Vec<String> = expanded.iter().map(|s| s.to_string()).collect();
        assert_eq!(names, ["100", "101"]);
    }

    #[test]
    fn support_flags_survive_rounding() {
        // A tiny leave probability would round the marginal to exactly 1.0,
        // but the empty state must remain reachable.
        let a = [[1.0, 0.0], [1e-17, 1.0 - 1e-17]];
        let spec = TransitionSpec::factorized(vec![vec![a]]).unwrap();
        let post = Belief::factorized(0, BeliefKind::Posterior, vec![1.0]).unwrap();
        let prior = propagate_prior(&post, &spec, 0).unwrap();
        assert_eq!(support_states(&prior), SupportSet::Factorized(vec![MarginalSupport::Both]));
    }

    #[test]
    fn state_vector_text() {
        let s: StateVector = "01".parse().unwrap();
        assert!(s.is_occupied(0));
        assert!(!s.is_occupied(1));
        assert_eq!(s.index(), 1);
        let t: StateVector = "11".parse().unwrap();
        assert_eq!(s.differing_household(&t), Some(1));
        assert_eq!(s.hamming(&"10".parse().unwrap()), 2);
        assert!("0a1".parse::<StateVector>().is_err());
    }

    #[test]
    fn household_spec_bounds() {
        assert!(HouseholdSpec::new(0, 1.0, 0.5).is_ok());
        assert!(HouseholdSpec::new(0, 0.4, 0.5).is_err());
        assert!(HouseholdSpec::new(0, f64::INFINITY, 0.5).is_err());
        assert_eq!(HouseholdSpec::new(0, 1.0, 0.5).unwrap().bound(), 1.0);
    }
}
