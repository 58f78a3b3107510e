//! One-shot and multi-round games, plus rationality (β) estimation.
//!
//! Randomness is split into independent streams derived from a single run
//! seed: one for the instance and one per agent for its labels. Two runs that
//! differ only in one agent's reporting behaviour therefore see identical data
//! for every other agent.

use crate::design::{build_design_space, optimal_design, round_design, DesignDistribution, DesignOptions, DesignSpace, QueryPlan};
use crate::domain::{
    cost, AgentSpec, AllocationSet, AllocationSpace, FeasibleSet, JointAllocation, Labeler, PreferenceDataset,
    StrategicLabeler, TruthfulLabeler, Vector,
};
use crate::error::{Error, Result};
use crate::estimation::{epsilon_bound, fit_mle, BoundParams, MLEstimate, MleOptions};
use crate::math::{log_sigmoid, support_bound};
use crate::mechanism::{pay_as_bid_outcome, solve_min, vcg_outcome, CostTable, MechanismOutcome, SolveOptions};
use crate::seed::{derive_seed, rng_from_seed, tag};
use rand::Rng;

/// Parameters of a randomly drawn population.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceConfig {
    pub n_agents: usize,
    pub dim: usize,
    /// Per-dimension allocation levels (kWh); must contain 0.
    pub grid_levels: Vec<f64>,
    /// Largest total an agent may be allocated.
    pub grid_max_total: f64,
    /// Total flexibility `P` that the joint allocation must supply.
    pub total_flex: f64,
    pub theta_lo: f64,
    pub theta_hi: f64,
    /// Parameter norm bound; defaults to `theta_hi · √d`.
    pub norm_bound: Option<f64>,
    pub beta: f64,
    pub feasibility_tolerance: f64,
}

impl Default for InstanceConfig {
    fn default() -> Self {
        Self {
            n_agents: 5,
            dim: 2,
            grid_levels: vec![0.0, 1.0, 2.0, 3.0, 4.0],
            grid_max_total: 4.0,
            total_flex: 15.0,
            theta_lo: 0.1,
            theta_hi: 0.5,
            norm_bound: None,
            beta: 1.0,
            feasibility_tolerance: crate::domain::DEFAULT_FEASIBILITY_TOLERANCE,
        }
    }
}

impl InstanceConfig {
    pub fn norm_bound(&self) -> f64 {
        self.norm_bound
            .unwrap_or(self.theta_hi * (self.dim as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 || self.dim == 0 {
            return Err(Error::InvalidInput("n_agents and dim must be positive".into()));
        }
        if !(self.theta_lo > 0.0 && self.theta_lo <= self.theta_hi) {
            return Err(Error::InvalidInput(format!(
                "theta range [{}, {}] must be positive and ordered",
                self.theta_lo, self.theta_hi
            )));
        }
        let b = self.norm_bound();
        if self.theta_hi * (self.dim as f64).sqrt() > b * (1.0 + 1e-12) {
            return Err(Error::InvalidInput(format!(
                "theta_hi {} exceeds B/√d with B = {b}",
                self.theta_hi
            )));
        }
        if !(self.beta > 0.0) {
            return Err(Error::InvalidInput("beta must be positive".into()));
        }
        Ok(())
    }
}

/// A drawn population with everything that does not depend on the data.
#[derive(Debug, Clone)]
pub struct Instance {
    pub agents: Vec<AgentSpec>,
    pub space: AllocationSpace,
    pub feasible: FeasibleSet,
    pub design_spaces: Vec<DesignSpace>,
    pub designs: Vec<DesignDistribution>,
    pub bound_params: Vec<BoundParams>,
    /// True-cost optimum `a*` and `J(a*)`.
    pub optimum: JointAllocation,
    pub optimal_cost: f64,
}

impl Instance {
    /// Builds an instance from explicit agents.
    pub fn new(
        agents: Vec<AgentSpec>,
        space: AllocationSpace,
        feasible: FeasibleSet,
        design: &DesignOptions,
        solve: &SolveOptions,
    ) -> Result<Self> {
        crate::domain::check_population(&agents, &space)?;
        let mut design_spaces: Vec<DesignSpace> = Vec::with_capacity(agents.len());
        let mut designs: Vec<DesignDistribution> = Vec::with_capacity(agents.len());
        let mut bound_params = Vec::with_capacity(agents.len());
        for (i, agent) in agents.iter().enumerate() {
            let set = space.set(i);
            let ds = build_design_space(agent, set)?;
            // Agents sharing a feature map and allocation set share the design.
            let reuse = (0..i).find(|&j| design_spaces[j] == ds);
            let dist = match reuse {
                Some(j) => designs[j].clone(),
                None => optimal_design(&ds, design)?,
            };
            bound_params.push(BoundParams::for_agent(agent, set, &ds));
            design_spaces.push(ds);
            designs.push(dist);
        }
        let truth = CostTable::truthful(&agents, &space)?;
        let best = solve_min(&truth, &space, &feasible, None, None, solve)?;
        Ok(Self {
            agents,
            space,
            feasible,
            design_spaces,
            designs,
            bound_params,
            optimum: best.allocation,
            optimal_cost: best.value,
        })
    }

    /// Draws `θ*_i` componentwise uniform in `[theta_lo, theta_hi]`.
    pub fn generate(cfg: &InstanceConfig, seed: u64, design: &DesignOptions, solve: &SolveOptions) -> Result<Self> {
        cfg.validate()?;
        let set = AllocationSet::grid(cfg.dim, &cfg.grid_levels, cfg.grid_max_total)?;
        let space = AllocationSpace::uniform(set, cfg.n_agents)?;
        let mut rng = rng_from_seed(derive_seed(seed, &[tag::INSTANCE]));
        let b = cfg.norm_bound();
        let agents = (0..cfg.n_agents)
            .map(|_| {
                let theta = Vector::from_fn(cfg.dim, |_, _| rng.gen_range(cfg.theta_lo..=cfg.theta_hi));
                AgentSpec::quadratic(theta, b)?.with_beta(cfg.beta)
            })
            .collect::<Result<Vec<_>>>()?;
        let feasible = FeasibleSet::new(cfg.total_flex, cfg.feasibility_tolerance)?;
        Self::new(agents, space, feasible, design, solve)
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn dim(&self) -> usize {
        self.agents[0].dim()
    }

    /// Rounded `k`-query plan of every agent.
    pub fn plans(&self, k: usize) -> Result<Vec<QueryPlan>> {
        self.design_spaces
            .iter()
            .zip(&self.designs)
            .map(|(ds, dist)| round_design(ds, dist, k))
            .collect()
    }

    /// Largest cost `B·L` of agent `i`.
    pub fn max_cost(&self, agent: usize) -> f64 {
        let p = &self.bound_params[agent];
        p.b * p.l
    }

    pub fn true_cost(&self, agent: usize, idx: usize) -> f64 {
        cost(&self.agents[agent], self.space.set(agent), idx)
    }

    pub fn social_cost(&self, joint: &JointAllocation) -> f64 {
        crate::domain::social_cost(&self.agents, &self.space, joint)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MechanismKind {
    #[default]
    Vcg,
    PayAsBid,
}

/// One agent answering as if its parameter were `θ* + Δθ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Deviation {
    pub agent: usize,
    pub delta_theta: Vector,
}

#[derive(Debug, Clone)]
pub struct OneShotConfig {
    pub k: usize,
    pub mechanism: MechanismKind,
    pub deviation: Option<Deviation>,
    pub delta: f64,
    pub mle: MleOptions,
    pub solve: SolveOptions,
    /// Skip sampling and use `θ̂ = θ*` (noiseless limit).
    pub oracle_costs: bool,
}

impl OneShotConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            mechanism: MechanismKind::Vcg,
            deviation: None,
            delta: 0.1,
            mle: MleOptions::default(),
            solve: SolveOptions::default(),
            oracle_costs: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OneShotResult {
    pub estimates: Vec<MLEstimate>,
    pub datasets: Vec<PreferenceDataset>,
    pub outcome: MechanismOutcome,
    /// Payment minus true cost.
    pub realized_utilities: Vec<f64>,
    pub social_cost_true: f64,
    pub social_cost_optimal: f64,
    pub epsilon_reported: f64,
}

impl OneShotResult {
    /// `(J(â) − J(a*)) / J(a*)`.
    pub fn normalized_gap(&self) -> f64 {
        (self.social_cost_true - self.social_cost_optimal) / self.social_cost_optimal
    }
}

fn labeler_for(agent: usize, deviation: Option<&Deviation>) -> Box<dyn Labeler> {
    match deviation {
        Some(dev) if dev.agent == agent => Box::new(StrategicLabeler::new(dev.delta_theta.clone())),
        _ => Box::new(TruthfulLabeler),
    }
}

/// Appends labelled answers to `queries` (zero payment difference).
fn collect_labels(
    inst: &Instance,
    agent: usize,
    queries: &[(usize, usize)],
    labeler: &dyn Labeler,
    rng: &mut dyn rand::RngCore,
    data: &mut PreferenceDataset,
) {
    let spec = &inst.agents[agent];
    let set = inst.space.set(agent);
    for &pair in queries {
        let y = labeler.label(spec, set, pair, 0.0, rng);
        data.push(spec, set, pair, y);
    }
}

/// MLE with the rationality `β` known: fits `βθ` on the ball of radius `βB`
/// and rescales.
pub fn fit_known_beta(data: &PreferenceDataset, agent: &AgentSpec, opts: &MleOptions) -> Result<MLEstimate> {
    let beta = agent.beta();
    let mut est = fit_mle(data, beta * agent.norm_bound(), opts)?;
    est.theta_hat /= beta;
    Ok(est)
}

fn oracle_estimate(agent: &AgentSpec, data: &PreferenceDataset) -> MLEstimate {
    let d = agent.dim();
    MLEstimate {
        theta_hat: agent.theta_star().clone(),
        design_matrix: crate::estimation::empirical_design_matrix(data, d),
        k: 0,
        converged: true,
        final_gradient_norm: 0.0,
        iterations: 0,
    }
}

fn run_mechanism(
    inst: &Instance,
    thetas: &[Vector],
    kind: MechanismKind,
    solve: &SolveOptions,
) -> Result<MechanismOutcome> {
    let tables = CostTable::from_parameters(thetas, &inst.agents, &inst.space)?;
    match kind {
        MechanismKind::Vcg => vcg_outcome(&tables, &inst.space, &inst.feasible, solve),
        MechanismKind::PayAsBid => pay_as_bid_outcome(&tables, &inst.space, &inst.feasible, solve),
    }
}

fn realized_utilities(inst: &Instance, outcome: &MechanismOutcome) -> Vec<f64> {
    outcome
        .allocation
        .indices()
        .iter()
        .enumerate()
        .map(|(i, &j)| outcome.payments[i] - inst.true_cost(i, j))
        .collect()
}

/// Query selection, estimation and the mechanism, once.
pub fn run_one_shot(inst: &Instance, cfg: &OneShotConfig, seed: u64) -> Result<OneShotResult> {
    let min = support_bound(inst.dim());
    if cfg.k <= min {
        return Err(Error::BadK { k: cfg.k, min });
    }
    if let Some(dev) = &cfg.deviation {
        if dev.agent >= inst.n_agents() || dev.delta_theta.len() != inst.dim() {
            return Err(Error::InvalidInput("deviation does not match the instance".into()));
        }
    }
    let epsilon = epsilon_bound(cfg.k, cfg.delta, &inst.bound_params)?;
    let mut estimates = Vec::with_capacity(inst.n_agents());
    let mut datasets = Vec::with_capacity(inst.n_agents());
    if cfg.oracle_costs {
        for agent in &inst.agents {
            let data = PreferenceDataset::new();
            estimates.push(oracle_estimate(agent, &data));
            datasets.push(data);
        }
    } else {
        let plans = inst.plans(cfg.k)?;
        for (i, plan) in plans.iter().enumerate() {
            let mut rng = rng_from_seed(derive_seed(seed, &[tag::LABELS, i as u64]));
            let labeler = labeler_for(i, cfg.deviation.as_ref());
            let mut data = PreferenceDataset::new();
            collect_labels(inst, i, &plan.queries, labeler.as_ref(), &mut rng, &mut data);
            estimates.push(fit_known_beta(&data, &inst.agents[i], &cfg.mle)?);
            datasets.push(data);
        }
    }
    let thetas: Vec<Vector> = estimates.iter().map(|e| e.theta_hat.clone()).collect();
    let outcome = run_mechanism(inst, &thetas, cfg.mechanism, &cfg.solve)?;
    Ok(OneShotResult {
        realized_utilities: realized_utilities(inst, &outcome),
        social_cost_true: inst.social_cost(&outcome.allocation),
        social_cost_optimal: inst.optimal_cost,
        epsilon_reported: epsilon,
        estimates,
        datasets,
        outcome,
    })
}

/// Exploitation length of stage `s ≥ 1`: `⌊(5/6) K √s⌋`.
pub fn stage_length(k: usize, s: usize) -> usize {
    // The epsilon keeps exact integers such as s = 36 from rounding down.
    (5.0 * k as f64 * (s as f64).sqrt() / 6.0 + 1e-9).floor() as usize
}

/// Explore/exploit phase lengths of every stage, truncated at the horizon.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageSchedule {
    pub k: usize,
    /// `(explore_len, exploit_len)` per stage after truncation.
    pub stages: Vec<(usize, usize)>,
}

impl StageSchedule {
    pub fn new(k: usize, horizon: usize) -> Self {
        let mut stages = Vec::new();
        let mut remaining = horizon;
        let mut s = 1;
        while remaining > 0 {
            let explore = k.min(remaining);
            remaining -= explore;
            let exploit = stage_length(k, s).min(remaining);
            remaining -= exploit;
            stages.push((explore, exploit));
            s += 1;
        }
        Self { k, stages }
    }

    pub fn total(&self) -> usize {
        self.stages.iter().map(|&(e, x)| e + x).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Explore,
    Exploit,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Explore => "explore",
            Phase::Exploit => "exploit",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    /// 1-based round index.
    pub t: usize,
    pub phase: Phase,
    /// 1-based stage index.
    pub stage: usize,
    pub social_cost: f64,
    pub utilities: Vec<f64>,
    pub payments: Vec<f64>,
    pub regret: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiRoundTrace {
    pub rounds: Vec<RoundRecord>,
    pub optimal_cost: f64,
    /// Number of preference queries per agent available at the start of each
    /// stage's exploitation phase.
    pub queries_at_exploit: Vec<usize>,
}

impl MultiRoundTrace {
    /// `R^w(T) = Σ_t r_t`.
    pub fn cumulative_regret(&self) -> f64 {
        self.rounds.iter().map(|r| r.regret).sum()
    }

    /// `R^w(t)` over the first `t` rounds.
    pub fn regret_until(&self, t: usize) -> f64 {
        self.rounds.iter().take(t).map(|r| r.regret).sum()
    }

    pub fn horizon(&self) -> usize {
        self.rounds.len()
    }
}

/// Per-agent utility summed over all rounds of a trace.
pub fn cumulative_utilities(trace: &MultiRoundTrace) -> Vec<f64> {
    let Some(first) = trace.rounds.first() else {
        return Vec::new();
    };
    let mut totals = vec![0.0; first.utilities.len()];
    for r in &trace.rounds {
        for (acc, u) in totals.iter_mut().zip(&r.utilities) {
            *acc += u;
        }
    }
    totals
}

#[derive(Debug, Clone)]
pub struct MultiRoundConfig {
    /// Exploration rounds (queries per agent) per stage.
    pub k: usize,
    pub horizon: usize,
    pub mechanism: MechanismKind,
    pub deviation: Option<Deviation>,
    /// When false, exploration queries are treated as questionnaires and
    /// contribute neither cost nor regret.
    pub count_exploration_cost: bool,
    pub mle: MleOptions,
    pub solve: SolveOptions,
}

impl MultiRoundConfig {
    pub fn new(k: usize, horizon: usize) -> Self {
        Self {
            k,
            horizon,
            mechanism: MechanismKind::Vcg,
            deviation: None,
            count_exploration_cost: true,
            mle: MleOptions::default(),
            solve: SolveOptions::default(),
        }
    }
}

/// Repeated explore-then-exploit stages with growing exploitation phases.
///
/// Every exploration round asks each agent one query from its rounded `K`-plan
/// and pays `2·c_max` (the stage payment `2K·c_max` spread over its `K`
/// rounds). After each exploration phase all data collected so far is refit
/// and the resulting outcome is applied for the whole exploitation phase.
pub fn run_multi_round(inst: &Instance, cfg: &MultiRoundConfig, seed: u64) -> Result<MultiRoundTrace> {
    let min = support_bound(inst.dim());
    if cfg.k <= min {
        return Err(Error::BadK { k: cfg.k, min });
    }
    if cfg.horizon == 0 {
        return Err(Error::InvalidInput("horizon must be at least 1".into()));
    }
    let n = inst.n_agents();
    let plans = inst.plans(cfg.k)?;
    let labelers: Vec<Box<dyn Labeler>> = (0..n).map(|i| labeler_for(i, cfg.deviation.as_ref())).collect();
    let mut rngs: Vec<_> = (0..n)
        .map(|i| rng_from_seed(derive_seed(seed, &[tag::LABELS, i as u64])))
        .collect();
    let mut data = vec![PreferenceDataset::new(); n];
    let schedule = StageSchedule::new(cfg.k, cfg.horizon);
    let explore_pay: Vec<f64> = (0..n).map(|i| 2.0 * inst.max_cost(i)).collect();
    let j_star = inst.optimal_cost;

    let mut rounds = Vec::with_capacity(cfg.horizon);
    let mut queries_at_exploit = Vec::new();
    for (s_idx, &(explore, exploit)) in schedule.stages.iter().enumerate() {
        let stage = s_idx + 1;
        for q in 0..explore {
            let mut social = 0.0;
            let mut utilities = Vec::with_capacity(n);
            for i in 0..n {
                let pair = plans[i].queries[q];
                collect_labels(inst, i, &[pair], labelers[i].as_ref(), &mut rngs[i], &mut data[i]);
                let experienced = if cfg.count_exploration_cost {
                    inst.true_cost(i, pair.0) + inst.true_cost(i, pair.1)
                } else {
                    0.0
                };
                social += experienced;
                utilities.push(explore_pay[i] - experienced);
            }
            let regret = if cfg.count_exploration_cost { social - j_star } else { 0.0 };
            rounds.push(RoundRecord {
                t: rounds.len() + 1,
                phase: Phase::Explore,
                stage,
                social_cost: social,
                utilities,
                payments: explore_pay.clone(),
                regret,
            });
        }
        if exploit == 0 {
            continue;
        }
        queries_at_exploit.push(data[0].len());
        let thetas = data
            .iter()
            .zip(&inst.agents)
            .map(|(d, a)| fit_known_beta(d, a, &cfg.mle).map(|e| e.theta_hat))
            .collect::<Result<Vec<_>>>()?;
        let outcome = run_mechanism(inst, &thetas, cfg.mechanism, &cfg.solve)?;
        let utilities = realized_utilities(inst, &outcome);
        let social = inst.social_cost(&outcome.allocation);
        for _ in 0..exploit {
            rounds.push(RoundRecord {
                t: rounds.len() + 1,
                phase: Phase::Exploit,
                stage,
                social_cost: social,
                utilities: utilities.clone(),
                payments: outcome.payments.clone(),
                regret: social - j_star,
            });
        }
    }
    Ok(MultiRoundTrace {
        rounds,
        optimal_cost: j_star,
        queries_at_exploit,
    })
}

/// Default upper end of the β search interval.
pub const DEFAULT_BETA_MAX: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaEstimate {
    pub beta_hat: f64,
    /// All labels were identical, so the likelihood has no interior optimum.
    pub saturated: bool,
    pub queries: usize,
}

/// Negative log-likelihood of `β` for labels observed at payment offsets.
pub fn beta_nll(beta: f64, observations: &[(f64, u8)]) -> f64 {
    observations
        .iter()
        .map(|&(dp, y)| {
            let z = beta * dp;
            if y == 1 {
                -log_sigmoid(z)
            } else {
                -log_sigmoid(-z)
            }
        })
        .sum()
}

/// Maximizes the (concave) log-likelihood over `β ∈ [0, beta_max]` by ternary search.
pub fn fit_beta(observations: &[(f64, u8)], beta_max: f64) -> Result<BetaEstimate> {
    if observations.iter().all(|&(dp, _)| dp == 0.0) {
        return Err(Error::NonIdentifiable);
    }
    if !(beta_max > 0.0) {
        return Err(Error::InvalidInput("beta_max must be positive".into()));
    }
    let first = observations[0].1;
    let saturated = observations.iter().all(|&(_, y)| y == first);
    // All answers agree with the sign of the offset: likelihood increases in β.
    let monotone = observations
        .iter()
        .all(|&(dp, y)| dp == 0.0 || (dp > 0.0) == (y == 1));
    if saturated && monotone {
        return Ok(BetaEstimate {
            beta_hat: beta_max,
            saturated,
            queries: observations.len(),
        });
    }
    let (mut lo, mut hi) = (0.0, beta_max);
    for _ in 0..200 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if beta_nll(m1, observations) <= beta_nll(m2, observations) {
            hi = m2;
        } else {
            lo = m1;
        }
        if hi - lo <= 1e-12 * beta_max {
            break;
        }
    }
    Ok(BetaEstimate {
        beta_hat: 0.5 * (lo + hi),
        saturated,
        queries: observations.len(),
    })
}

/// Asks `k2` identical-pair questions (`a = a′ = a⁰`) whose first element
/// carries the payment offset `payment_offsets[q mod len]`, then fits `β`.
pub fn estimate_beta(
    agent: &AgentSpec,
    set: &AllocationSet,
    payment_offsets: &[f64],
    k2: usize,
    beta_max: f64,
    rng: &mut dyn rand::RngCore,
) -> Result<BetaEstimate> {
    if payment_offsets.is_empty() || payment_offsets.iter().all(|&dp| dp == 0.0) {
        return Err(Error::NonIdentifiable);
    }
    if k2 == 0 {
        return Err(Error::InvalidInput("K2 must be at least 1".into()));
    }
    let zero = set.zero_index();
    let observations: Vec<(f64, u8)> = (0..k2)
        .map(|q| {
            let dp = payment_offsets[q % payment_offsets.len()];
            (dp, TruthfulLabeler.label(agent, set, (zero, zero), dp, rng))
        })
        .collect();
    fit_beta(&observations, beta_max)
}

/// `θ̃ / β̂`.
pub fn rescale_theta(theta_tilde: &Vector, beta_hat: f64) -> Result<Vector> {
    if !(beta_hat > 0.0) {
        return Err(Error::InvalidInput(format!("beta estimate {beta_hat} must be positive")));
    }
    Ok(theta_tilde / beta_hat)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BetaPipelineResult {
    pub beta: BetaEstimate,
    /// `θ̃/β̂` from `k1` preference queries plus `k2` β queries.
    pub theta_unknown_beta: Vector,
    /// Known-β estimate from `k1 + k2` preference queries.
    pub theta_known_beta: Vector,
    pub error_unknown_beta: f64,
    pub error_known_beta: f64,
}

/// Upper confidence limit `β̂ + z·se(β̂)` from the Fisher information of the
/// β queries; `beta_max` when the labels are saturated.
pub fn beta_upper_limit(est: &BetaEstimate, offsets: &[f64], beta_max: f64, z: f64) -> f64 {
    if est.saturated || offsets.is_empty() {
        return beta_max;
    }
    let info: f64 = (0..est.queries)
        .map(|q| {
            let dp = offsets[q % offsets.len()];
            dp * dp * crate::math::sigmoid_derivative(est.beta_hat * dp)
        })
        .sum();
    if info <= 0.0 {
        return beta_max;
    }
    (est.beta_hat + z / info.sqrt()).min(beta_max)
}

/// Compares estimating `θ*` with and without knowledge of `β*` at an equal
/// query budget, for agent `agent` of the instance.
///
/// Without `β*`, the `k2` identical-pair queries come first; the scaled
/// parameter `θ̃ ≈ β*θ*` is then fit from `k1` preference queries on the ball
/// of radius `B·β_up`, with `β_up` a three-standard-error upper limit on `β̂`,
/// and rescaled by `β̂`. With `β*` known, all `k1 + k2` queries are preference
/// queries.
#[allow(clippy::too_many_arguments)]
pub fn run_beta_pipeline(
    inst: &Instance,
    agent: usize,
    k1: usize,
    k2: usize,
    payment_offsets: &[f64],
    beta_max: f64,
    mle: &MleOptions,
    seed: u64,
) -> Result<BetaPipelineResult> {
    let spec = &inst.agents[agent];
    let set = inst.space.set(agent);
    let mut beta_rng = rng_from_seed(derive_seed(seed, &[tag::BETA, agent as u64]));
    let beta = estimate_beta(spec, set, payment_offsets, k2, beta_max, &mut beta_rng)?;
    let beta_up = beta_upper_limit(&beta, payment_offsets, beta_max, 3.0);

    let mut label_rng = rng_from_seed(derive_seed(seed, &[tag::LABELS, agent as u64]));
    let plan = round_design(&inst.design_spaces[agent], &inst.designs[agent], k1)?;
    let mut data = PreferenceDataset::new();
    collect_labels(inst, agent, &plan.queries, &TruthfulLabeler, &mut label_rng, &mut data);
    let tilde = fit_mle(&data, spec.norm_bound() * beta_up, mle)?;
    let theta_unknown_beta = rescale_theta(&tilde.theta_hat, beta.beta_hat)?;

    let full_plan = round_design(&inst.design_spaces[agent], &inst.designs[agent], k1 + k2)?;
    let mut full = PreferenceDataset::new();
    let mut known_rng = rng_from_seed(derive_seed(seed, &[tag::LABELS, agent as u64]));
    collect_labels(inst, agent, &full_plan.queries, &TruthfulLabeler, &mut known_rng, &mut full);
    let theta_known_beta = fit_known_beta(&full, spec, mle)?.theta_hat;

    let truth = spec.theta_star();
    Ok(BetaPipelineResult {
        error_unknown_beta: (&theta_unknown_beta - truth).norm(),
        error_known_beta: (&theta_known_beta - truth).norm(),
        beta,
        theta_unknown_beta,
        theta_known_beta,
    })
}
