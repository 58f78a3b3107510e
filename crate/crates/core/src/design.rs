//! D-optimal design over pairwise feature differences.
//!
//! A design is a probability vector `π` over the finite set of differences
//! `X = {φ(a′) − φ(a)}`. It is D-optimal when it maximizes `log det V(π)` with
//! `V(π) = Σ π(x) x xᵀ`, which by Kiefer–Wolfowitz is equivalent to the worst
//! prediction variance `g(π) = max_x xᵀ V(π)⁻¹ x` being equal to `d`. The gap
//! `g(π)` is the convergence certificate used everywhere below.

use std::fmt;

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::domain::{AgentSpec, AllocationSet, Vector};
use crate::error::{Error, Result};
use crate::math::support_bound;

/// Componentwise tolerance when deduplicating difference vectors.
const DEDUP_TOL: f64 = 1e-12;
/// Relative eigenvalue threshold for the rank check.
const RANK_TOL: f64 = 1e-10;
/// Weights below this are treated as zero when pruning.
const NEGLIGIBLE_WEIGHT: f64 = 1e-9;
/// Target relative gap of the support-restricted re-solve after pruning.
pub const POLISH_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesignOptions {
    /// Relative Kiefer–Wolfowitz gap: stop once `g(π) ≤ d (1 + tol)`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for DesignOptions {
    fn default() -> Self {
        Self {
            tol: 1e-3,
            max_iter: 100_000,
        }
    }
}

/// Deduplicated, nonzero difference vectors with one realizing pair each.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignSpace {
    points: Vec<Vector>,
    origin_pairs: Vec<(usize, usize)>,
    dim: usize,
}

impl DesignSpace {
    /// Builds a space from candidate points, dropping zeros and duplicates
    /// (first occurrence wins) and checking that the points span `ℝ^d`.
    pub fn from_points(points: Vec<Vector>, origin_pairs: Vec<(usize, usize)>) -> Result<Self> {
        if points.len() != origin_pairs.len() {
            return Err(Error::InvalidInput("points and pairs differ in length".into()));
        }
        let dim = points
            .first()
            .map(|p| p.len())
            .ok_or(Error::DegenerateDesign { rank: 0, dim: 0 })?;
        if dim == 0 || points.iter().any(|p| p.len() != dim) {
            return Err(Error::InvalidInput("design points differ in dimension".into()));
        }
        let mut kept: Vec<Vector> = Vec::new();
        let mut kept_pairs = Vec::new();
        for (p, pair) in points.into_iter().zip(origin_pairs) {
            if p.iter().all(|v| v.abs() <= DEDUP_TOL) {
                continue;
            }
            let duplicate = kept
                .iter()
                .any(|q| q.iter().zip(p.iter()).all(|(a, b)| (a - b).abs() <= DEDUP_TOL));
            if !duplicate {
                kept.push(p);
                kept_pairs.push(pair);
            }
        }
        let rank = rank_of(&kept, dim);
        if rank < dim {
            return Err(Error::DegenerateDesign { rank, dim });
        }
        Ok(Self {
            points: kept,
            origin_pairs: kept_pairs,
            dim,
        })
    }

    pub fn points(&self) -> &[Vector] {
        &self.points
    }

    pub fn point(&self, idx: usize) -> &Vector {
        &self.points[idx]
    }

    pub fn origin_pairs(&self) -> &[(usize, usize)] {
        &self.origin_pairs
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `max_x ‖x‖`.
    pub fn max_norm(&self) -> f64 {
        self.points.iter().map(|p| p.norm()).fold(0.0, f64::max)
    }
}

fn rank_of(points: &[Vector], dim: usize) -> usize {
    if points.is_empty() {
        return 0;
    }
    let mut m = DMatrix::zeros(dim, dim);
    for p in points {
        m += p * p.transpose();
    }
    let eig = m.symmetric_eigen();
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    if top <= 0.0 {
        return 0;
    }
    eig.eigenvalues.iter().filter(|&&l| l > RANK_TOL * top).count()
}

/// All ordered-pair differences `φ(a′) − φ(a)` of an agent's allocation set.
pub fn build_design_space(agent: &AgentSpec, set: &AllocationSet) -> Result<DesignSpace> {
    if set.len() < 2 {
        return Err(Error::DegenerateDesign {
            rank: 0,
            dim: agent.dim(),
        });
    }
    let features: Vec<Vector> = (0..set.len()).map(|i| agent.features(set, i)).collect();
    let mut points = Vec::with_capacity(set.len() * (set.len() - 1));
    let mut pairs = Vec::with_capacity(points.capacity());
    for a in 0..set.len() {
        for b in 0..set.len() {
            if a != b {
                points.push(&features[b] - &features[a]);
                pairs.push((a, b));
            }
        }
    }
    DesignSpace::from_points(points, pairs)
}

/// A design restricted to its support.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignDistribution {
    /// Indices into the design space.
    pub support: Vec<usize>,
    pub weights: Vec<f64>,
    pub design_matrix: DMatrix<f64>,
    /// `max_x xᵀ V(π)⁻¹ x` over the full space.
    pub gap: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `log det V(π)` after every iteration, starting with the initial design.
    pub log_det_trace: Vec<f64>,
}

impl DesignDistribution {
    pub fn dim(&self) -> usize {
        self.design_matrix.nrows()
    }

    pub fn log_det(&self) -> f64 {
        log_det(&self.design_matrix).unwrap_or(f64::NEG_INFINITY)
    }

    /// Support indices ordered by decreasing weight, lowest index first on ties.
    pub fn by_weight(&self) -> Vec<(usize, f64)> {
        let mut pairs: Vec<(usize, f64)> =
            self.support.iter().copied().zip(self.weights.iter().copied()).collect();
        pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        pairs
    }
}

/// `Σ_k w_k x_k x_kᵀ` over the given point indices.
pub fn weighted_design_matrix(space: &DesignSpace, indices: &[usize], weights: &[f64]) -> DMatrix<f64> {
    let d = space.dim();
    let mut v = DMatrix::zeros(d, d);
    for (&i, &w) in indices.iter().zip(weights) {
        if w != 0.0 {
            let x = space.point(i);
            v.ger(w, x, x, 1.0);
        }
    }
    v
}

fn log_det(v: &DMatrix<f64>) -> Option<f64> {
    let chol = Cholesky::new(v.clone())?;
    Some(2.0 * chol.l().diagonal().iter().map(|l| l.ln()).sum::<f64>())
}

fn variances(space: &DesignSpace, candidates: &[usize], chol: &Cholesky<f64, Dyn>) -> Vec<f64> {
    candidates
        .iter()
        .map(|&i| {
            let x = space.point(i);
            x.dot(&chol.solve(x))
        })
        .collect()
}

/// Worst-case prediction variance `max_x xᵀ V⁻¹ x` and its lowest-index argmax.
pub fn max_prediction_variance(space: &DesignSpace, v: &DMatrix<f64>) -> Result<(f64, usize)> {
    if v.nrows() != space.dim() || v.ncols() != space.dim() {
        return Err(Error::InvalidInput("matrix dimension does not match the design space".into()));
    }
    let chol = Cholesky::new(v.clone()).ok_or(Error::SingularMatrix)?;
    let all: Vec<usize> = (0..space.len()).collect();
    let vars = variances(space, &all, &chol);
    Ok(argmax(&vars))
}

fn argmax(values: &[f64]) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, &v) in values.iter().enumerate() {
        if v > best.0 {
            best = (v, i);
        }
    }
    best
}

/// Greedy spanning subset: largest point first, then repeatedly the point with
/// the largest component orthogonal to the span chosen so far.
fn greedy_basis(space: &DesignSpace) -> Result<Vec<usize>> {
    let d = space.dim();
    let mut basis: Vec<Vector> = Vec::with_capacity(d);
    let mut chosen = Vec::with_capacity(d);
    let scale = space.max_norm();
    while chosen.len() < d {
        let mut best: Option<(f64, usize, Vector)> = None;
        for (i, x) in space.points().iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let mut r = x.clone();
            for q in &basis {
                let c = q.dot(&r);
                r.axpy(-c, q, 1.0);
            }
            let norm = r.norm();
            if best.as_ref().map_or(true, |b| norm > b.0) {
                best = Some((norm, i, r));
            }
        }
        match best {
            Some((norm, i, r)) if norm > RANK_TOL.sqrt() * scale => {
                basis.push(r / norm);
                chosen.push(i);
            }
            _ => {
                return Err(Error::DegenerateDesign {
                    rank: chosen.len(),
                    dim: d,
                })
            }
        }
    }
    Ok(chosen)
}

struct FwRun {
    weights: Vec<f64>,
    iterations: usize,
    converged: bool,
    log_det_trace: Vec<f64>,
}

/// Frank–Wolfe over `candidates` (indices into the space) with dense weights.
///
/// Each iteration moves mass toward the candidate with the largest variance `g`
/// using the exact line-search step `(g/d − 1)/(g − 1)`. With `away_steps`, when
/// the smallest-variance support point is further below `d` than the largest is
/// above it, mass is moved away from that point instead (same closed form,
/// negative step, clipped so the weight stays non-negative).
fn frank_wolfe_on(
    space: &DesignSpace,
    candidates: &[usize],
    mut weights: Vec<f64>,
    tol: f64,
    max_iter: usize,
    away_steps: bool,
) -> Result<FwRun> {
    let d = space.dim() as f64;
    let limit = d * (1.0 + tol);
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        let v = weighted_design_matrix(space, candidates, &weights);
        let chol = Cholesky::new(v.clone()).ok_or(Error::SingularMatrix)?;
        trace.push(2.0 * chol.l().diagonal().iter().map(|l| l.ln()).sum::<f64>());
        let vars = variances(space, candidates, &chol);
        let (g, j) = argmax(&vars);
        if g <= limit || iterations >= max_iter {
            return Ok(FwRun {
                weights,
                iterations,
                converged: g <= limit,
                log_det_trace: trace,
            });
        }
        iterations += 1;

        let mut target = j;
        let mut alpha = (g / d - 1.0) / (g - 1.0);
        if away_steps {
            let mut low = (f64::INFINITY, usize::MAX);
            for (k, (&w, &var)) in weights.iter().zip(&vars).enumerate() {
                if w > 0.0 && var < low.0 {
                    low = (var, k);
                }
            }
            let (g_low, k) = low;
            if k != usize::MAX && d - g_low > g - d {
                let w = weights[k];
                let floor = if w >= 1.0 { 0.0 } else { -w / (1.0 - w) };
                let step = if g_low > 1.0 {
                    (g_low / d - 1.0) / (g_low - 1.0)
                } else {
                    floor
                };
                target = k;
                alpha = step.max(floor);
            }
        }
        for w in weights.iter_mut() {
            *w *= 1.0 - alpha;
        }
        weights[target] += alpha;
        if weights[target] < 0.0 {
            weights[target] = 0.0;
        }
        let total: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= total;
        }
    }
}

fn distribution_from(
    space: &DesignSpace,
    candidates: &[usize],
    run: FwRun,
) -> Result<DesignDistribution> {
    let mut support = Vec::new();
    let mut weights = Vec::new();
    for (&i, &w) in candidates.iter().zip(&run.weights) {
        if w > 0.0 {
            support.push(i);
            weights.push(w);
        }
    }
    let design_matrix = weighted_design_matrix(space, &support, &weights);
    let (gap, _) = max_prediction_variance(space, &design_matrix)?;
    Ok(DesignDistribution {
        support,
        weights,
        design_matrix,
        gap,
        iterations: run.iterations,
        converged: run.converged,
        log_det_trace: run.log_det_trace,
    })
}

/// Frank–Wolfe for the D-optimal design on the full space.
///
/// Starts from the uniform design on a greedily chosen spanning subset. If
/// `max_iter` is reached first, the last iterate is returned with
/// `converged = false`.
pub fn frank_wolfe_doptimal(space: &DesignSpace, tol: f64, max_iter: usize) -> Result<DesignDistribution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("tolerance {tol} must be positive")));
    }
    let basis = greedy_basis(space)?;
    let mut weights = vec![0.0; space.len()];
    for &i in &basis {
        weights[i] = 1.0 / basis.len() as f64;
    }
    let candidates: Vec<usize> = (0..space.len()).collect();
    let run = frank_wolfe_on(space, &candidates, weights, tol, max_iter, false)?;
    distribution_from(space, &candidates, run)
}

/// Restricts a design to at most `max_support` points.
///
/// Keeps the heaviest points (weights below 1e-9 are dropped first),
/// renormalizes and re-solves on that support until the support gap is below
/// `d (1 + POLISH_TOL)`. The result is then checked against the full space and
/// rejected if its gap exceeds `d (1 + 10 tol)`.
pub fn prune_support(
    space: &DesignSpace,
    dist: &DesignDistribution,
    max_support: usize,
    opts: &DesignOptions,
) -> Result<DesignDistribution> {
    let d = space.dim() as f64;
    let limit = d * (1.0 + 10.0 * opts.tol);
    let mut ranked: Vec<(usize, f64)> = dist
        .by_weight()
        .into_iter()
        .filter(|&(_, w)| w >= NEGLIGIBLE_WEIGHT)
        .collect();
    ranked.truncate(max_support);
    ranked.sort_by_key(|&(i, _)| i);
    let candidates: Vec<usize> = ranked.iter().map(|&(i, _)| i).collect();
    let total: f64 = ranked.iter().map(|&(_, w)| w).sum();
    let weights: Vec<f64> = ranked.iter().map(|&(_, w)| w / total).collect();

    let v = weighted_design_matrix(space, &candidates, &weights);
    let Some(chol) = Cholesky::new(v) else {
        return Err(Error::PruneFailed {
            gap: f64::INFINITY,
            limit,
        });
    };
    let support_gap = argmax(&variances(space, &candidates, &chol)).0;
    let run = if support_gap <= d * (1.0 + POLISH_TOL) {
        FwRun {
            weights,
            iterations: 0,
            converged: true,
            log_det_trace: vec![2.0 * chol.l().diagonal().iter().map(|l| l.ln()).sum::<f64>()],
        }
    } else {
        frank_wolfe_on(space, &candidates, weights, POLISH_TOL, opts.max_iter, true)?
    };
    let pruned = distribution_from(space, &candidates, run)?;
    if pruned.gap > limit {
        return Err(Error::PruneFailed {
            gap: pruned.gap,
            limit,
        });
    }
    Ok(pruned)
}

/// Frank–Wolfe followed by pruning to `d(d+1)/2` support points.
pub fn optimal_design(space: &DesignSpace, opts: &DesignOptions) -> Result<DesignDistribution> {
    let full = frank_wolfe_doptimal(space, opts.tol, opts.max_iter)?;
    prune_support(space, &full, support_bound(space.dim()), opts)
}

/// K concrete queries realizing a rounded design.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryPlan {
    /// `(a, a′)` allocation-index pairs, grouped by support point.
    pub queries: Vec<(usize, usize)>,
    /// Design-space point of each query.
    pub point_indices: Vec<usize>,
    /// `(point index, count)` for each support point, in support order.
    pub counts: Vec<(usize, usize)>,
}

impl QueryPlan {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Empirical design matrix `V_K = Σ_k x_k x_kᵀ`.
    pub fn empirical_matrix(&self, space: &DesignSpace) -> DMatrix<f64> {
        let (idx, w): (Vec<usize>, Vec<f64>) =
            self.counts.iter().map(|&(i, c)| (i, c as f64)).unzip();
        weighted_design_matrix(space, &idx, &w)
    }
}

/// Rounds a design into exactly `k` queries.
///
/// With `n = k − d(d+1)/2`, each support point receives `⌈n π(x)⌉` queries. A
/// shortfall is padded one query at a time, cycling through the support in
/// order of decreasing weight. An excess (only possible when the support is
/// larger than `d(d+1)/2`) is removed one query at a time from the point with
/// the largest over-allocation `count − n π(x)`, never below one query.
pub fn round_design(space: &DesignSpace, dist: &DesignDistribution, k: usize) -> Result<QueryPlan> {
    let min = support_bound(space.dim());
    if k <= min {
        return Err(Error::BadK { k, min });
    }
    let n = (k - min) as f64;
    let order = dist.by_weight();
    let mut counts: Vec<(usize, usize, f64)> = order
        .iter()
        .map(|&(i, w)| {
            let target = n * w;
            (i, ((target - 1e-9).ceil().max(0.0)) as usize, target)
        })
        .collect();
    let mut total: usize = counts.iter().map(|c| c.1).sum();
    let mut cursor = 0;
    while total < k {
        let len = counts.len();
        counts[cursor % len].1 += 1;
        cursor += 1;
        total += 1;
    }
    while total > k {
        let mut pick: Option<(usize, f64)> = None;
        for (pos, &(_, c, target)) in counts.iter().enumerate() {
            if c > 1 {
                let over = c as f64 - target;
                if pick.map_or(true, |(_, best)| over > best) {
                    pick = Some((pos, over));
                }
            }
        }
        let Some((pos, _)) = pick else {
            return Err(Error::BadK { k, min: counts.len() });
        };
        counts[pos].1 -= 1;
        total -= 1;
    }
    counts.sort_by_key(|c| c.0);
    let mut queries = Vec::with_capacity(k);
    let mut point_indices = Vec::with_capacity(k);
    for &(i, c, _) in &counts {
        for _ in 0..c {
            queries.push(space.origin_pairs()[i]);
            point_indices.push(i);
        }
    }
    Ok(QueryPlan {
        queries,
        point_indices,
        counts: counts.iter().filter(|c| c.1 > 0).map(|c| (c.0, c.1)).collect(),
    })
}

/// Diagnostic summary of a design and one rounded plan.
#[derive(Debug, Clone)]
pub struct DesignDiagnostics {
    pub dim: usize,
    pub space_size: usize,
    pub support: Vec<(Vector, f64)>,
    pub gap: f64,
    pub k: usize,
    pub empirical_max_variance: f64,
    pub variance_bound: f64,
}

impl DesignDiagnostics {
    pub fn compute(space: &DesignSpace, dist: &DesignDistribution, k: usize) -> Result<Self> {
        let plan = round_design(space, dist, k)?;
        let (empirical_max_variance, _) = max_prediction_variance(space, &plan.empirical_matrix(space))?;
        let d = space.dim();
        Ok(Self {
            dim: d,
            space_size: space.len(),
            support: dist
                .support
                .iter()
                .zip(&dist.weights)
                .map(|(&i, &w)| (space.point(i).clone(), w))
                .collect(),
            gap: dist.gap,
            k,
            empirical_max_variance,
            variance_bound: d as f64 / (k - support_bound(d)) as f64,
        })
    }

    /// Bound check with a relative allowance for floating-point evaluation.
    pub fn passes(&self) -> bool {
        self.empirical_max_variance <= self.variance_bound * (1.0 + 1e-9)
    }
}

impl fmt::Display for DesignDiagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "dimension: {}", self.dim)?;
        writeln!(f, "design points: {}", self.space_size)?;
        writeln!(f, "support size: {}", self.support.len())?;
        for (x, w) in &self.support {
            let coords: Vec<String> = x.iter().map(|v| format!("{v}")).collect();
            writeln!(f, "  x = ({})  weight = {:.6}", coords.join(", "), w)?;
        }
        writeln!(f, "kiefer-wolfowitz gap: {:.9} (d = {})", self.gap, self.dim)?;
        writeln!(
            f,
            "K = {}: max prediction variance {:.6e} vs bound {:.6e}",
            self.k, self.empirical_max_variance, self.variance_bound
        )?;
        write!(f, "status: {}", if self.passes() { "PASS" } else { "FAIL" })
    }
}
