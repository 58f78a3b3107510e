//! Allocation and payment rules over tabulated (estimated or true) costs.

use crate::domain::{
    for_each_feasible, AgentSpec, AllocationSpace, FeasibleSet, JointAllocation, Vector,
    DEFAULT_ENUMERATION_CAP,
};
use crate::error::{Error, Result};

/// Cost of every allocation of every agent.
#[derive(Debug, Clone, PartialEq)]
pub struct CostTable {
    tables: Vec<Vec<f64>>,
}

impl CostTable {
    pub fn new(tables: Vec<Vec<f64>>, space: &AllocationSpace) -> Result<Self> {
        if tables.len() != space.n_agents() {
            return Err(Error::InvalidInput(format!(
                "{} cost rows for {} agents",
                tables.len(),
                space.n_agents()
            )));
        }
        for (i, row) in tables.iter().enumerate() {
            if row.len() != space.set(i).len() {
                return Err(Error::InvalidInput(format!(
                    "agent {i} has {} costs for {} allocations",
                    row.len(),
                    space.set(i).len()
                )));
            }
            if row.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidInput(format!("agent {i} has a non-finite cost")));
            }
        }
        Ok(Self { tables })
    }

    /// Tabulates `⟨θ_i, φ_i(a)⟩` for the given parameters.
    pub fn from_parameters(thetas: &[Vector], agents: &[AgentSpec], space: &AllocationSpace) -> Result<Self> {
        if thetas.len() != agents.len() {
            return Err(Error::InvalidInput("one parameter vector per agent required".into()));
        }
        let tables = thetas
            .iter()
            .zip(agents)
            .enumerate()
            .map(|(i, (theta, agent))| {
                let set = space.set(i);
                (0..set.len()).map(|j| theta.dot(&agent.features(set, j))).collect()
            })
            .collect();
        Self::new(tables, space)
    }

    /// True costs.
    pub fn truthful(agents: &[AgentSpec], space: &AllocationSpace) -> Result<Self> {
        let thetas: Vec<Vector> = agents.iter().map(|a| a.theta_star().clone()).collect();
        Self::from_parameters(&thetas, agents, space)
    }

    pub fn get(&self, agent: usize, idx: usize) -> f64 {
        self.tables[agent][idx]
    }

    pub fn row(&self, agent: usize) -> &[f64] {
        &self.tables[agent]
    }

    pub fn n_agents(&self) -> usize {
        self.tables.len()
    }

    pub fn with_row(&self, agent: usize, row: Vec<f64>) -> Self {
        let mut tables = self.tables.clone();
        tables[agent] = row;
        Self { tables }
    }

    /// `Σ_i c_i(a_i)`, skipping `exclude`.
    pub fn total(&self, joint: &JointAllocation, exclude: Option<usize>) -> f64 {
        joint
            .indices()
            .iter()
            .enumerate()
            .filter(|&(i, _)| Some(i) != exclude)
            .map(|(i, &j)| self.tables[i][j])
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    BruteForce,
    SeparableDp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverChoice {
    /// Brute force when the enumeration fits under the cap, otherwise the DP.
    #[default]
    Auto,
    BruteForce,
    SeparableDp,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub cap: u128,
    pub choice: SolverChoice,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            cap: DEFAULT_ENUMERATION_CAP,
            choice: SolverChoice::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub allocation: JointAllocation,
    pub value: f64,
    pub solver: Solver,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MechanismOutcome {
    pub allocation: JointAllocation,
    pub payments: Vec<f64>,
    pub social_cost_estimated: f64,
    pub solver_used: Solver,
}

fn pinned_vector(space: &AllocationSpace, pin_zero: Option<usize>) -> Vec<Option<usize>> {
    (0..space.n_agents())
        .map(|i| (Some(i) == pin_zero).then(|| space.set(i).zero_index()))
        .collect()
}

fn check_agent(space: &AllocationSpace, agent: Option<usize>) -> Result<()> {
    match agent {
        Some(i) if i >= space.n_agents() => Err(Error::InvalidInput(format!("no agent {i}"))),
        _ => Ok(()),
    }
}

fn solve_brute_force(
    tables: &CostTable,
    space: &AllocationSpace,
    feas: &FeasibleSet,
    exclude: Option<usize>,
    pin_zero: Option<usize>,
) -> Result<Solution> {
    let pinned = pinned_vector(space, pin_zero);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for_each_feasible(space, feas, &pinned, |joint| {
        let value: f64 = joint
            .iter()
            .enumerate()
            .filter(|&(i, _)| Some(i) != exclude)
            .map(|(i, &j)| tables.get(i, j))
            .sum();
        if best.as_ref().map_or(true, |b| value < b.0) {
            best = Some((value, joint.to_vec()));
        }
    });
    let (value, joint) = best.ok_or(Error::EmptyFeasibleSet)?;
    Ok(Solution {
        allocation: JointAllocation(joint),
        value,
        solver: Solver::BruteForce,
    })
}

/// Minimizes the summed table cost over the feasible set.
///
/// `exclude` drops an agent's cost from the objective while leaving its
/// allocation free; `pin_zero` fixes an agent to its zero allocation. Ties go
/// to the lexicographically smallest joint allocation.
pub fn solve_min(
    tables: &CostTable,
    space: &AllocationSpace,
    feas: &FeasibleSet,
    exclude: Option<usize>,
    pin_zero: Option<usize>,
    opts: &SolveOptions,
) -> Result<Solution> {
    check_agent(space, exclude)?;
    check_agent(space, pin_zero)?;
    if tables.n_agents() != space.n_agents() {
        return Err(Error::InvalidInput("cost table does not match the space".into()));
    }
    let size = match pin_zero {
        Some(i) => space.product_size() / space.set(i).len() as u128,
        None => space.product_size(),
    };
    match opts.choice {
        SolverChoice::BruteForce => {
            if size > opts.cap {
                return Err(Error::CapExceeded { size, cap: opts.cap });
            }
            solve_brute_force(tables, space, feas, exclude, pin_zero)
        }
        SolverChoice::SeparableDp => solve_min_separable_dp(tables, space, feas, exclude, pin_zero),
        SolverChoice::Auto => {
            if size <= opts.cap {
                solve_brute_force(tables, space, feas, exclude, pin_zero)
            } else {
                match solve_min_separable_dp(tables, space, feas, exclude, pin_zero) {
                    Err(Error::NotOnGrid) => Err(Error::CapExceeded { size, cap: opts.cap }),
                    other => other,
                }
            }
        }
    }
}

fn float_gcd(mut a: f64, mut b: f64, eps: f64) -> f64 {
    while b > eps {
        let r = a % b;
        a = b;
        b = if r > b - eps { 0.0 } else { r };
    }
    a
}

/// Common step `g` such that every allocation total and the target are
/// integer multiples of `g`.
fn detect_grid(totals: &[f64], target: f64) -> Option<f64> {
    let scale = totals
        .iter()
        .chain(std::iter::once(&target))
        .fold(0.0f64, |m, t| m.max(t.abs()));
    if scale == 0.0 {
        return Some(1.0);
    }
    let eps = 1e-9 * scale;
    let mut g = 0.0;
    for &t in totals.iter().chain(std::iter::once(&target)) {
        let t = t.abs();
        if t > eps {
            g = if g == 0.0 { t } else { float_gcd(g.max(t), g.min(t), eps) };
        }
    }
    if g <= eps {
        return None;
    }
    let on_grid = |t: f64| ((t / g) - (t / g).round()).abs() <= 1e-6;
    (totals.iter().all(|&t| on_grid(t)) && on_grid(target)).then_some(g)
}

/// Exact minimization by dynamic programming over agents and integer budget
/// units. Requires all allocation totals to lie on a common grid.
pub fn solve_min_separable_dp(
    tables: &CostTable,
    space: &AllocationSpace,
    feas: &FeasibleSet,
    exclude: Option<usize>,
    pin_zero: Option<usize>,
) -> Result<Solution> {
    check_agent(space, exclude)?;
    check_agent(space, pin_zero)?;
    let n = space.n_agents();
    let pinned = pinned_vector(space, pin_zero);
    let choices: Vec<Vec<usize>> = (0..n)
        .map(|i| match pinned[i] {
            Some(j) => vec![j],
            None => (0..space.set(i).len()).collect(),
        })
        .collect();
    let totals: Vec<f64> = choices
        .iter()
        .enumerate()
        .flat_map(|(i, js)| js.iter().map(move |&j| space.set(i).total(j)))
        .collect();
    let g = detect_grid(&totals, feas.total).ok_or(Error::NotOnGrid)?;
    if feas.tolerance >= g / 2.0 {
        return Err(Error::NotOnGrid);
    }
    let units = |i: usize, j: usize| (space.set(i).total(j) / g).round() as i64;
    let target = (feas.total / g).round() as i64;
    let cost = |i: usize, j: usize| if Some(i) == exclude { 0.0 } else { tables.get(i, j) };

    // best[i][s - lo[i]]: min cost of agents i.. with unit sum s.
    let mut lo = vec![0i64; n + 1];
    let mut hi = vec![0i64; n + 1];
    for i in (0..n).rev() {
        let u: Vec<i64> = choices[i].iter().map(|&j| units(i, j)).collect();
        lo[i] = lo[i + 1] + u.iter().min().copied().unwrap_or(0);
        hi[i] = hi[i + 1] + u.iter().max().copied().unwrap_or(0);
    }
    let mut best: Vec<Vec<f64>> = (0..=n)
        .map(|i| vec![f64::INFINITY; (hi[i] - lo[i] + 1) as usize])
        .collect();
    best[n][0] = 0.0;
    for i in (0..n).rev() {
        let (head, tail) = best.split_at_mut(i + 1);
        let next = &tail[0];
        let cur = &mut head[i];
        for (offset, &rest) in next.iter().enumerate() {
            if !rest.is_finite() {
                continue;
            }
            let s = lo[i + 1] + offset as i64;
            for &j in &choices[i] {
                let slot = (s + units(i, j) - lo[i]) as usize;
                let v = cost(i, j) + rest;
                if v < cur[slot] {
                    cur[slot] = v;
                }
            }
        }
    }
    if target < lo[0] || target > hi[0] || !best[0][(target - lo[0]) as usize].is_finite() {
        return Err(Error::EmptyFeasibleSet);
    }
    let mut joint = Vec::with_capacity(n);
    let mut remaining = target;
    for i in 0..n {
        let here = best[i][(remaining - lo[i]) as usize];
        let slack = 1e-12 * (1.0 + here.abs());
        let mut chosen = None;
        for &j in &choices[i] {
            let rest_sum = remaining - units(i, j);
            if rest_sum < lo[i + 1] || rest_sum > hi[i + 1] {
                continue;
            }
            let rest = best[i + 1][(rest_sum - lo[i + 1]) as usize];
            if rest.is_finite() && cost(i, j) + rest <= here + slack {
                chosen = Some(j);
                break;
            }
        }
        let j = chosen.expect("dp table is consistent");
        joint.push(j);
        remaining -= units(i, j);
    }
    let allocation = JointAllocation(joint);
    Ok(Solution {
        value: tables.total(&allocation, exclude),
        allocation,
        solver: Solver::SeparableDp,
    })
}

/// VCG with the Clarke pivot taken at the agent's zero allocation:
/// `p_i = min_{a ∈ F, a_i = a⁰} Ĵ_{−i}(a) − Ĵ_{−i}(â)`.
pub fn vcg_outcome(
    tables: &CostTable,
    space: &AllocationSpace,
    feas: &FeasibleSet,
    opts: &SolveOptions,
) -> Result<MechanismOutcome> {
    let main = solve_min(tables, space, feas, None, None, opts)?;
    let mut payments = Vec::with_capacity(space.n_agents());
    for i in 0..space.n_agents() {
        let pivot = match solve_min(tables, space, feas, Some(i), Some(i), opts) {
            Err(Error::EmptyFeasibleSet) => return Err(Error::PivotInfeasible(i)),
            other => other?,
        };
        payments.push(pivot.value - tables.total(&main.allocation, Some(i)));
    }
    Ok(MechanismOutcome {
        social_cost_estimated: main.value,
        allocation: main.allocation,
        payments,
        solver_used: main.solver,
    })
}

/// First-price rule: each agent is paid its tabulated cost at the chosen allocation.
pub fn pay_as_bid_outcome(
    tables: &CostTable,
    space: &AllocationSpace,
    feas: &FeasibleSet,
    opts: &SolveOptions,
) -> Result<MechanismOutcome> {
    let main = solve_min(tables, space, feas, None, None, opts)?;
    let payments = main
        .allocation
        .indices()
        .iter()
        .enumerate()
        .map(|(i, &j)| tables.get(i, j))
        .collect();
    Ok(MechanismOutcome {
        social_cost_estimated: main.value,
        allocation: main.allocation,
        payments,
        solver_used: main.solver,
    })
}
