//! Core data model: allocation spaces, linear costs, utilities and the
//! Bradley–Terry preference model.
//!
//! Allocations are referred to by their index inside an agent's
//! [`AllocationSet`]. Labels are `1` when the first allocation of a queried
//! pair is preferred.

use nalgebra::DVector;
use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::math::sigmoid;

pub type Vector = DVector<f64>;

/// Default cap on the number of joint allocations a brute-force walk may visit.
pub const DEFAULT_ENUMERATION_CAP: u128 = 10_000_000;

/// Default slack (kWh) on the total-flexibility equality constraint.
pub const DEFAULT_FEASIBILITY_TOLERANCE: f64 = 1e-9;

/// Finite allocation set of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationSet {
    allocations: Vec<Vec<f64>>,
    zero_index: usize,
}

impl AllocationSet {
    pub fn new(allocations: Vec<Vec<f64>>, zero_index: usize) -> Result<Self> {
        if allocations.is_empty() {
            return Err(Error::InvalidInput("allocation set is empty".into()));
        }
        if zero_index >= allocations.len() {
            return Err(Error::InvalidInput(format!(
                "zero index {zero_index} out of range for {} allocations",
                allocations.len()
            )));
        }
        let width = allocations[0].len();
        for (i, a) in allocations.iter().enumerate() {
            if a.len() != width {
                return Err(Error::InvalidInput(format!(
                    "allocation {i} has length {} but expected {width}",
                    a.len()
                )));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("allocation {i} is not finite")));
            }
            if allocations[..i].iter().any(|b| b == a) {
                return Err(Error::InvalidInput(format!("allocation {i} is a duplicate")));
            }
        }
        Ok(Self {
            allocations,
            zero_index,
        })
    }

    /// All vectors of length `d` with components drawn from `levels` whose
    /// component sum is at most `max_total`, in lexicographic order of level
    /// indices. `levels` must contain `0`, which provides the zero allocation.
    ///
    /// With `d = 2`, levels `0..=4` and `max_total = 4` this yields 15 allocations.
    pub fn grid(d: usize, levels: &[f64], max_total: f64) -> Result<Self> {
        if d == 0 || levels.is_empty() {
            return Err(Error::InvalidInput("grid needs d ≥ 1 and at least one level".into()));
        }
        let mut out = Vec::new();
        let mut idx = vec![0usize; d];
        loop {
            let a: Vec<f64> = idx.iter().map(|&i| levels[i]).collect();
            if a.iter().sum::<f64>() <= max_total + 1e-12 {
                out.push(a);
            }
            let mut pos = d;
            loop {
                if pos == 0 {
                    let zero_index = out
                        .iter()
                        .position(|a| a.iter().all(|&v| v == 0.0))
                        .ok_or_else(|| Error::InvalidInput("grid has no zero allocation".into()))?;
                    return Self::new(out, zero_index);
                }
                pos -= 1;
                idx[pos] += 1;
                if idx[pos] < levels.len() {
                    break;
                }
                idx[pos] = 0;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.allocations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allocations.is_empty()
    }

    pub fn get(&self, idx: usize) -> &[f64] {
        &self.allocations[idx]
    }

    pub fn allocations(&self) -> &[Vec<f64>] {
        &self.allocations
    }

    pub fn zero_index(&self) -> usize {
        self.zero_index
    }

    /// Total energy of an allocation (sum over rooms).
    pub fn total(&self, idx: usize) -> f64 {
        self.allocations[idx].iter().sum()
    }
}

/// Per-agent allocation sets.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationSpace {
    sets: Vec<AllocationSet>,
}

impl AllocationSpace {
    pub fn new(sets: Vec<AllocationSet>) -> Result<Self> {
        if sets.is_empty() {
            return Err(Error::InvalidInput("allocation space has no agents".into()));
        }
        Ok(Self { sets })
    }

    /// Same allocation set for every agent.
    pub fn uniform(set: AllocationSet, n_agents: usize) -> Result<Self> {
        Self::new(vec![set; n_agents])
    }

    pub fn n_agents(&self) -> usize {
        self.sets.len()
    }

    pub fn set(&self, agent: usize) -> &AllocationSet {
        &self.sets[agent]
    }

    pub fn sets(&self) -> &[AllocationSet] {
        &self.sets
    }

    /// Number of joint allocations, saturating.
    pub fn product_size(&self) -> u128 {
        self.sets
            .iter()
            .fold(1u128, |acc, s| acc.saturating_mul(s.len() as u128))
    }

    pub fn zero_joint(&self) -> JointAllocation {
        JointAllocation(self.sets.iter().map(|s| s.zero_index()).collect())
    }

    pub fn joint_total(&self, joint: &JointAllocation) -> f64 {
        joint
            .0
            .iter()
            .enumerate()
            .map(|(i, &j)| self.sets[i].total(j))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureMap {
    /// `(a_1, …, a_d) ↦ (a_1², …, a_d²)`.
    Quadratic,
    /// Explicit feature vector per allocation index.
    Table(Vec<Vector>),
}

impl FeatureMap {
    pub fn features(&self, set: &AllocationSet, idx: usize) -> Vector {
        match self {
            FeatureMap::Quadratic => Vector::from_iterator(
                set.get(idx).len(),
                set.get(idx).iter().map(|a| a * a),
            ),
            FeatureMap::Table(rows) => rows[idx].clone(),
        }
    }

    /// Feature bound `L = max_a ‖φ(a)‖`, recomputed from the set.
    pub fn bound(&self, set: &AllocationSet) -> f64 {
        (0..set.len())
            .map(|i| self.features(set, i).norm())
            .fold(0.0, f64::max)
    }
}

/// An agent's private cost model and rationality.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSpec {
    theta_star: Vector,
    feature_map: FeatureMap,
    norm_bound: f64,
    rationality_beta: f64,
}

impl AgentSpec {
    pub fn new(
        theta_star: Vector,
        feature_map: FeatureMap,
        norm_bound: f64,
        rationality_beta: f64,
    ) -> Result<Self> {
        if theta_star.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("theta_star is not finite".into()));
        }
        if !(norm_bound > 0.0) || !norm_bound.is_finite() {
            return Err(Error::InvalidInput(format!("norm bound {norm_bound} must be positive")));
        }
        if theta_star.norm() > norm_bound * (1.0 + 1e-12) {
            return Err(Error::InvalidInput(format!(
                "‖theta_star‖ = {} exceeds the norm bound {norm_bound}",
                theta_star.norm()
            )));
        }
        if !(rationality_beta > 0.0) {
            return Err(Error::InvalidInput(format!(
                "rationality parameter {rationality_beta} must be positive"
            )));
        }
        Ok(Self {
            theta_star,
            feature_map,
            norm_bound,
            rationality_beta,
        })
    }

    /// Quadratic-cost agent with unit rationality.
    pub fn quadratic(theta_star: Vector, norm_bound: f64) -> Result<Self> {
        Self::new(theta_star, FeatureMap::Quadratic, norm_bound, 1.0)
    }

    pub fn with_beta(mut self, beta: f64) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::InvalidInput(format!("rationality parameter {beta} must be positive")));
        }
        self.rationality_beta = beta;
        Ok(self)
    }

    pub fn theta_star(&self) -> &Vector {
        &self.theta_star
    }

    pub fn feature_map(&self) -> &FeatureMap {
        &self.feature_map
    }

    pub fn norm_bound(&self) -> f64 {
        self.norm_bound
    }

    pub fn beta(&self) -> f64 {
        self.rationality_beta
    }

    pub fn dim(&self) -> usize {
        self.theta_star.len()
    }

    pub fn features(&self, set: &AllocationSet, idx: usize) -> Vector {
        self.feature_map.features(set, idx)
    }

    /// Checks dimensions and that the zero allocation has zero features.
    pub fn check_compatible(&self, set: &AllocationSet) -> Result<()> {
        if let FeatureMap::Table(rows) = &self.feature_map {
            if rows.len() != set.len() {
                return Err(Error::InvalidInput(format!(
                    "feature table has {} rows for {} allocations",
                    rows.len(),
                    set.len()
                )));
            }
        }
        for i in 0..set.len() {
            if self.features(set, i).len() != self.dim() {
                return Err(Error::InvalidInput(format!(
                    "feature dimension at allocation {i} differs from theta dimension {}",
                    self.dim()
                )));
            }
        }
        if self.features(set, set.zero_index()).iter().any(|&v| v != 0.0) {
            return Err(Error::InvalidInput(
                "the zero allocation does not have a zero feature vector".into(),
            ));
        }
        Ok(())
    }
}

/// Validates a full agent population against a space.
pub fn check_population(agents: &[AgentSpec], space: &AllocationSpace) -> Result<()> {
    if agents.len() != space.n_agents() {
        return Err(Error::InvalidInput(format!(
            "{} agents for a space with {} agents",
            agents.len(),
            space.n_agents()
        )));
    }
    for (agent, set) in agents.iter().zip(space.sets()) {
        agent.check_compatible(set)?;
    }
    Ok(())
}

/// One allocation index per agent.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct JointAllocation(pub Vec<usize>);

impl JointAllocation {
    pub fn new(indices: Vec<usize>, space: &AllocationSpace) -> Result<Self> {
        if indices.len() != space.n_agents() {
            return Err(Error::InvalidInput(format!(
                "joint allocation has {} entries for {} agents",
                indices.len(),
                space.n_agents()
            )));
        }
        for (i, &j) in indices.iter().enumerate() {
            if j >= space.set(i).len() {
                return Err(Error::InvalidInput(format!(
                    "index {j} out of range for agent {i}"
                )));
            }
        }
        Ok(Self(indices))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }
}

/// Total-flexibility constraint `Σ_i Σ_l a_{i,l} = P`, within a tolerance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeasibleSet {
    pub total: f64,
    pub tolerance: f64,
}

impl FeasibleSet {
    pub fn new(total: f64, tolerance: f64) -> Result<Self> {
        if !total.is_finite() || !(tolerance >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "invalid feasibility constraint total={total} tolerance={tolerance}"
            )));
        }
        Ok(Self { total, tolerance })
    }

    pub fn exact(total: f64) -> Self {
        Self {
            total,
            tolerance: DEFAULT_FEASIBILITY_TOLERANCE,
        }
    }

    pub fn admits(&self, total: f64) -> bool {
        (total - self.total).abs() <= self.tolerance
    }
}

/// One preference observation. `x = φ(a′) − φ(a)` for the pair `(a, a′)`, so
/// under truthful feedback `P(y = 1) = σ(β⟨θ*, x⟩)` when the pair carries no
/// payment difference.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceRecord {
    pub x: Vector,
    pub y: u8,
    pub pair: (usize, usize),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PreferenceDataset {
    pub records: Vec<PreferenceRecord>,
}

/// Regressor of a queried pair.
pub fn pair_difference(agent: &AgentSpec, set: &AllocationSet, pair: (usize, usize)) -> Vector {
    agent.features(set, pair.1) - agent.features(set, pair.0)
}

impl PreferenceDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, agent: &AgentSpec, set: &AllocationSet, pair: (usize, usize), y: u8) {
        self.records.push(PreferenceRecord {
            x: pair_difference(agent, set, pair),
            y,
            pair,
        });
    }

    pub fn extend(&mut self, other: PreferenceDataset) {
        self.records.extend(other.records);
    }

    /// True when every stored regressor recomputes exactly from its pair.
    pub fn is_consistent(&self, agent: &AgentSpec, set: &AllocationSet) -> bool {
        self.records
            .iter()
            .all(|r| r.x == pair_difference(agent, set, r.pair))
    }
}

/// `⟨θ*, φ(a)⟩`.
pub fn cost(agent: &AgentSpec, set: &AllocationSet, idx: usize) -> f64 {
    agent.theta_star.dot(&agent.features(set, idx))
}

/// Sum of true costs at a joint allocation.
pub fn social_cost(agents: &[AgentSpec], space: &AllocationSpace, joint: &JointAllocation) -> f64 {
    agents
        .iter()
        .zip(joint.indices())
        .enumerate()
        .map(|(i, (agent, &j))| cost(agent, space.set(i), j))
        .sum()
}

/// Payment minus true cost.
pub fn utility(payment: f64, agent: &AgentSpec, set: &AllocationSet, idx: usize) -> f64 {
    payment - cost(agent, set, idx)
}

fn bt_prob_with(
    theta: &Vector,
    beta: f64,
    agent: &AgentSpec,
    set: &AllocationSet,
    pair: (usize, usize),
    payment_diff: f64,
) -> f64 {
    let cost_first = theta.dot(&agent.features(set, pair.0));
    let cost_second = theta.dot(&agent.features(set, pair.1));
    sigmoid(beta * (payment_diff - cost_first + cost_second))
}

/// Probability that the agent prefers `pair.0` over `pair.1` when the first
/// allocation pays `payment_diff` more than the second.
pub fn bt_prob(agent: &AgentSpec, set: &AllocationSet, pair: (usize, usize), payment_diff: f64) -> f64 {
    bt_prob_with(&agent.theta_star, agent.beta(), agent, set, pair, payment_diff)
}

fn draw(p: f64, rng: &mut dyn RngCore) -> u8 {
    let u: f64 = rng.gen();
    u8::from(u < p)
}

/// Source of preference labels. Every implementation consumes exactly one
/// uniform draw per label so that labelers can be swapped without shifting
/// the random stream.
pub trait Labeler: Send + Sync {
    fn prob_first(&self, agent: &AgentSpec, set: &AllocationSet, pair: (usize, usize), payment_diff: f64) -> f64;

    fn label(
        &self,
        agent: &AgentSpec,
        set: &AllocationSet,
        pair: (usize, usize),
        payment_diff: f64,
        rng: &mut dyn RngCore,
    ) -> u8 {
        draw(self.prob_first(agent, set, pair, payment_diff), rng)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TruthfulLabeler;

impl Labeler for TruthfulLabeler {
    fn prob_first(&self, agent: &AgentSpec, set: &AllocationSet, pair: (usize, usize), payment_diff: f64) -> f64 {
        bt_prob(agent, set, pair, payment_diff)
    }
}

/// Answers as if the cost parameter were `θ* + Δθ`.
#[derive(Debug, Clone)]
pub struct StrategicLabeler {
    pub delta_theta: Vector,
}

impl StrategicLabeler {
    pub fn new(delta_theta: Vector) -> Self {
        Self { delta_theta }
    }

    /// Same deviation on every component.
    pub fn broadcast(delta: f64, d: usize) -> Self {
        Self::new(Vector::from_element(d, delta))
    }
}

impl Labeler for StrategicLabeler {
    fn prob_first(&self, agent: &AgentSpec, set: &AllocationSet, pair: (usize, usize), payment_diff: f64) -> f64 {
        let biased = agent.theta_star() + &self.delta_theta;
        bt_prob_with(&biased, agent.beta(), agent, set, pair, payment_diff)
    }
}

pub fn sample_truthful_label(
    agent: &AgentSpec,
    set: &AllocationSet,
    pair: (usize, usize),
    payment_diff: f64,
    rng: &mut dyn RngCore,
) -> u8 {
    TruthfulLabeler.label(agent, set, pair, payment_diff, rng)
}

pub fn sample_strategic_label(
    agent: &AgentSpec,
    set: &AllocationSet,
    pair: (usize, usize),
    payment_diff: f64,
    delta_theta: &Vector,
    rng: &mut dyn RngCore,
) -> u8 {
    StrategicLabeler::new(delta_theta.clone()).label(agent, set, pair, payment_diff, rng)
}

/// Visits every feasible joint allocation in lexicographic order.
///
/// `pinned[i] = Some(j)` restricts agent `i` to allocation `j`. Branches whose
/// remaining totals cannot reach the target are skipped.
pub(crate) fn for_each_feasible<F: FnMut(&[usize])>(
    space: &AllocationSpace,
    feas: &FeasibleSet,
    pinned: &[Option<usize>],
    mut visit: F,
) {
    let n = space.n_agents();
    let choices: Vec<Vec<usize>> = (0..n)
        .map(|i| match pinned.get(i).copied().flatten() {
            Some(j) => vec![j],
            None => (0..space.set(i).len()).collect(),
        })
        .collect();
    let mut suffix_min = vec![0.0; n + 1];
    let mut suffix_max = vec![0.0; n + 1];
    for i in (0..n).rev() {
        let totals = choices[i].iter().map(|&j| space.set(i).total(j));
        let (lo, hi) = totals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| {
            (lo.min(t), hi.max(t))
        });
        suffix_min[i] = suffix_min[i + 1] + lo;
        suffix_max[i] = suffix_max[i + 1] + hi;
    }
    let mut current = vec![0usize; n];
    fn rec<F: FnMut(&[usize])>(
        depth: usize,
        partial: f64,
        space: &AllocationSpace,
        feas: &FeasibleSet,
        choices: &[Vec<usize>],
        suffix_min: &[f64],
        suffix_max: &[f64],
        current: &mut Vec<usize>,
        visit: &mut F,
    ) {
        let slack = feas.tolerance + 1e-9 * (1.0 + feas.total.abs());
        if partial + suffix_min[depth] > feas.total + slack
            || partial + suffix_max[depth] < feas.total - slack
        {
            return;
        }
        if depth == choices.len() {
            let total: f64 = current
                .iter()
                .enumerate()
                .map(|(i, &j)| space.set(i).total(j))
                .sum();
            if feas.admits(total) {
                visit(current);
            }
            return;
        }
        for &j in &choices[depth] {
            current[depth] = j;
            rec(
                depth + 1,
                partial + space.set(depth).total(j),
                space,
                feas,
                choices,
                suffix_min,
                suffix_max,
                current,
                visit,
            );
        }
    }
    rec(
        0,
        0.0,
        space,
        feas,
        &choices,
        &suffix_min,
        &suffix_max,
        &mut current,
        &mut visit,
    );
}

/// All feasible joint allocations in lexicographic order.
pub fn enumerate_feasible(
    space: &AllocationSpace,
    feas: &FeasibleSet,
    cap: u128,
) -> Result<Vec<JointAllocation>> {
    let size = space.product_size();
    if size > cap {
        return Err(Error::CapExceeded { size, cap });
    }
    let mut out = Vec::new();
    for_each_feasible(space, feas, &[], |j| out.push(JointAllocation(j.to_vec())));
    if out.is_empty() {
        return Err(Error::EmptyFeasibleSet);
    }
    Ok(out)
}
