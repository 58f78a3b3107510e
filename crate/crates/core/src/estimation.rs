//! Norm-constrained Bradley–Terry maximum likelihood and the confidence
//! quantities that go with it.

use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::design::DesignSpace;
use crate::domain::{AgentSpec, AllocationSet, PreferenceDataset, Vector};
use crate::error::{Error, Result};
use crate::math::{log_sigmoid, sigmoid, sigmoid_derivative, support_bound};

const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 80;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MleOptions {
    /// Stop once the projected-gradient norm is at most this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for MleOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MLEstimate {
    pub theta_hat: Vector,
    /// Empirical design matrix `V_K = Σ_k x_k x_kᵀ`.
    pub design_matrix: DMatrix<f64>,
    pub k: usize,
    pub converged: bool,
    /// `‖θ − Π(θ − ∇L(θ))‖` at the returned point.
    pub final_gradient_norm: f64,
    pub iterations: usize,
}

/// `−Σ_k [y_k log σ(⟨θ, x_k⟩) + (1 − y_k) log σ(−⟨θ, x_k⟩)]`.
pub fn nll(theta: &Vector, data: &PreferenceDataset) -> f64 {
    -data
        .records
        .iter()
        .map(|r| {
            let z = theta.dot(&r.x);
            if r.y == 1 {
                log_sigmoid(z)
            } else {
                log_sigmoid(-z)
            }
        })
        .sum::<f64>()
}

/// `Σ_k (σ(⟨θ, x_k⟩) − y_k) x_k`.
pub fn nll_gradient(theta: &Vector, data: &PreferenceDataset) -> Vector {
    let mut g = Vector::zeros(theta.len());
    for r in &data.records {
        let z = theta.dot(&r.x);
        g.axpy(sigmoid(z) - f64::from(r.y), &r.x, 1.0);
    }
    g
}

/// Records with identical regressors collapsed into label counts.
struct Aggregated {
    xs: Vec<Vector>,
    ones: Vec<f64>,
    zeros: Vec<f64>,
}

impl Aggregated {
    fn new(data: &PreferenceDataset) -> Self {
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut agg = Self {
            xs: Vec::new(),
            ones: Vec::new(),
            zeros: Vec::new(),
        };
        for r in &data.records {
            let key: Vec<u64> = r.x.iter().map(|v| v.to_bits()).collect();
            let slot = *index.entry(key).or_insert_with(|| {
                agg.xs.push(r.x.clone());
                agg.ones.push(0.0);
                agg.zeros.push(0.0);
                agg.xs.len() - 1
            });
            if r.y == 1 {
                agg.ones[slot] += 1.0;
            } else {
                agg.zeros[slot] += 1.0;
            }
        }
        agg
    }

    fn value(&self, theta: &Vector) -> f64 {
        let mut f = 0.0;
        for ((x, &n1), &n0) in self.xs.iter().zip(&self.ones).zip(&self.zeros) {
            let z = theta.dot(x);
            if n1 > 0.0 {
                f -= n1 * log_sigmoid(z);
            }
            if n0 > 0.0 {
                f -= n0 * log_sigmoid(-z);
            }
        }
        f
    }

    fn gradient(&self, theta: &Vector) -> Vector {
        let mut g = Vector::zeros(theta.len());
        for ((x, &n1), &n0) in self.xs.iter().zip(&self.ones).zip(&self.zeros) {
            let z = theta.dot(x);
            g.axpy((n1 + n0) * sigmoid(z) - n1, x, 1.0);
        }
        g
    }

    fn curvature_bound(&self) -> f64 {
        self.xs
            .iter()
            .zip(self.ones.iter().zip(&self.zeros))
            .map(|(x, (a, b))| 0.25 * (a + b) * x.norm_squared())
            .sum()
    }
}

/// Euclidean projection onto the ball of radius `bound`.
pub fn project_ball(theta: &Vector, bound: f64) -> Vector {
    let norm = theta.norm();
    if norm > bound {
        theta * (bound / norm)
    } else {
        theta.clone()
    }
}

fn projected_gradient_norm(theta: &Vector, grad: &Vector, bound: f64) -> f64 {
    (theta - project_ball(&(theta - grad), bound)).norm()
}

/// `Σ_k x_k x_kᵀ` of a dataset.
pub fn empirical_design_matrix(data: &PreferenceDataset, d: usize) -> DMatrix<f64> {
    let mut v = DMatrix::zeros(d, d);
    for r in &data.records {
        v.ger(1.0, &r.x, &r.x, 1.0);
    }
    v
}

/// Minimizes the negative log-likelihood over `‖θ‖ ≤ bound`.
///
/// Projected gradient descent from `θ = 0`. Trial steps use the
/// Barzilai–Borwein length and are halved until the Armijo condition holds
/// along the projection arc.
pub fn fit_mle(data: &PreferenceDataset, bound: f64, opts: &MleOptions) -> Result<MLEstimate> {
    let Some(first) = data.records.first() else {
        return Err(Error::InvalidInput("cannot fit an empty dataset".into()));
    };
    if !(bound > 0.0) {
        return Err(Error::InvalidInput(format!("norm bound {bound} must be positive")));
    }
    let d = first.x.len();
    let agg = Aggregated::new(data);
    let mut theta = Vector::zeros(d);
    let mut f = agg.value(&theta);
    let mut grad = agg.gradient(&theta);
    let mut step = 1.0 / agg.curvature_bound().max(f64::MIN_POSITIVE);
    let mut pg_norm = projected_gradient_norm(&theta, &grad, bound);
    let mut iterations = 0;

    while pg_norm > opts.tol && iterations < opts.max_iter {
        iterations += 1;
        let slack = 4.0 * f64::EPSILON * (f.abs() + 1.0);
        let mut accepted = None;
        let mut trial = step;
        for _ in 0..MAX_HALVINGS {
            let candidate = project_ball(&(&theta - &grad * trial), bound);
            let f_new = agg.value(&candidate);
            if f_new <= f + ARMIJO * grad.dot(&(&candidate - &theta)) + slack {
                accepted = Some((candidate, f_new));
                break;
            }
            trial *= 0.5;
        }
        let Some((next, f_next)) = accepted else { break };
        let grad_next = agg.gradient(&next);
        let s = &next - &theta;
        let y = &grad_next - &grad;
        let sy = s.dot(&y);
        step = if sy > 0.0 { s.norm_squared() / sy } else { trial * 2.0 };
        let stalled = s.norm() == 0.0;
        theta = next;
        grad = grad_next;
        f = f_next;
        pg_norm = projected_gradient_norm(&theta, &grad, bound);
        if stalled {
            break;
        }
    }

    Ok(MLEstimate {
        design_matrix: empirical_design_matrix(data, d),
        theta_hat: theta,
        k: data.len(),
        converged: pg_norm <= opts.tol,
        final_gradient_norm: pg_norm,
        iterations,
    })
}

/// `⟨θ̂, φ(a)⟩`.
pub fn estimated_cost(est: &MLEstimate, agent: &AgentSpec, set: &AllocationSet, idx: usize) -> f64 {
    est.theta_hat.dot(&agent.features(set, idx))
}

/// Largest prediction error of a parameter estimate over a design space,
/// `max_x |⟨θ̂ − θ*, x⟩|`, i.e. the worst pairwise cost-difference error.
pub fn worst_pair_error(theta_hat: &Vector, theta_star: &Vector, space: &DesignSpace) -> f64 {
    let diff = theta_hat - theta_star;
    space
        .points()
        .iter()
        .map(|x| diff.dot(x).abs())
        .fold(0.0, f64::max)
}

/// Constants entering the confidence radius of one agent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundParams {
    /// Parameter norm bound `B`.
    pub b: f64,
    /// Feature norm bound `L`.
    pub l: f64,
    pub d: usize,
    pub kappa: f64,
}

impl BoundParams {
    pub fn for_agent(agent: &AgentSpec, set: &AllocationSet, space: &DesignSpace) -> Self {
        Self {
            b: agent.norm_bound(),
            l: agent.feature_map().bound(set),
            d: agent.dim(),
            kappa: kappa(space, agent.norm_bound()),
        }
    }
}

/// `max_{‖θ‖ ≤ B, x ∈ X} 1/σ̇(⟨θ, x⟩)`, attained at `|⟨θ, x⟩| = B max_x ‖x‖`.
pub fn kappa(space: &DesignSpace, bound: f64) -> f64 {
    1.0 / sigmoid_derivative(bound * space.max_norm())
}

/// Confidence radius `γ_K(δ) = √(κ [log(1/δ) + d log(max{e, 4eBL(K−1)/d})])`.
pub fn gamma_bound(k: usize, delta: f64, params: &BoundParams) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidInput("K must be at least 1".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidInput(format!("delta {delta} must lie in (0, 1)")));
    }
    let e = std::f64::consts::E;
    let d = params.d as f64;
    let inner = (4.0 * e * params.b * params.l * (k - 1) as f64 / d).max(e);
    Ok((params.kappa * ((1.0 / delta).ln() + d * inner.ln())).sqrt())
}

/// Pairwise cost-difference error bound `ε_K(δ) = γ_K(δ) √(d / (K − d(d+1)/2))`
/// with `γ_K` the largest radius over the given agents.
pub fn epsilon_bound(k: usize, delta: f64, params: &[BoundParams]) -> Result<f64> {
    let Some(first) = params.first() else {
        return Err(Error::InvalidInput("no agents given".into()));
    };
    let d = first.d;
    if params.iter().any(|p| p.d != d) {
        return Err(Error::InvalidInput("agents differ in dimension".into()));
    }
    let min = support_bound(d);
    if k <= min {
        return Err(Error::BadK { k, min });
    }
    let mut gamma: f64 = 0.0;
    for p in params {
        gamma = gamma.max(gamma_bound(k, delta, p)?);
    }
    Ok(gamma * (d as f64 / (k - min) as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::PreferenceRecord;

    fn rec(x: &[f64], y: u8) -> PreferenceRecord {
        PreferenceRecord {
            x: Vector::from_vec(x.to_vec()),
            y,
            pair: (0, 0),
        }
    }

    fn data(records: Vec<PreferenceRecord>) -> PreferenceDataset {
        PreferenceDataset { records }
    }

    #[test]
    fn nll_examples() {
        let d = data(vec![rec(&[1.0, 0.0], 1), rec(&[0.0, 2.0], 0), rec(&[1.0, 1.0], 1)]);
        let zero = Vector::zeros(2);
        assert!((nll(&zero, &d) - 3.0 * 2f64.ln()).abs() < 1e-12);

        let single = data(vec![rec(&[1.0], 1)]);
        assert!(nll(&Vector::from_vec(vec![50.0]), &single) < 1e-20);

        let pair = data(vec![rec(&[1.0, 0.0], 1), rec(&[-1.0, 0.0], 1)]);
        let theta = Vector::from_vec(vec![1.0, 0.0]);
        assert!((nll(&theta, &pair) - 1.626_523_375_036_445_6).abs() < 1e-12);
    }

    #[test]
    fn nll_is_finite_for_extreme_margins() {
        let d = data(vec![rec(&[1e3], 0), rec(&[-1e3], 1)]);
        let v = nll(&Vector::from_vec(vec![10.0]), &d);
        assert!(v.is_finite());
        assert!((v - 2e4).abs() < 1e-6);
    }

    #[test]
    fn gradient_examples() {
        let balanced = data(vec![rec(&[1.0, 2.0], 1), rec(&[1.0, 2.0], 0)]);
        assert_eq!(nll_gradient(&Vector::zeros(2), &balanced).norm(), 0.0);

        let saturated = data(vec![rec(&[3.0, 1.0], 1), rec(&[2.0, 2.0], 1)]);
        let theta = Vector::from_vec(vec![10.0, 10.0]);
        let total: f64 = saturated.records.iter().map(|r| r.x.norm()).sum();
        assert!(nll_gradient(&theta, &saturated).norm() <= 1e-3 * total);
    }

    #[test]
    fn symmetric_data_fits_zero() {
        let d = data(vec![
            rec(&[1.0, 0.5], 1),
            rec(&[1.0, 0.5], 0),
            rec(&[-0.5, 1.0], 1),
            rec(&[-0.5, 1.0], 0),
        ]);
        let est = fit_mle(&d, 1.0, &MleOptions::default()).unwrap();
        assert!(est.theta_hat.norm() < 1e-12);
        assert!(est.converged);
    }

    #[test]
    fn one_dimensional_logit_recovery() {
        // 7 of 10 labels are 1: unconstrained optimum logit(0.7).
        let mut records = Vec::new();
        for k in 0..10 {
            records.push(rec(&[1.0], u8::from(k < 7)));
        }
        let d = data(records);
        let est = fit_mle(&d, 10.0, &MleOptions::default()).unwrap();
        assert!(est.converged);
        assert!((est.theta_hat[0] - (0.7f64 / 0.3).ln()).abs() < 1e-6);

        let clipped = fit_mle(&d, 0.1, &MleOptions::default()).unwrap();
        assert!((clipped.theta_hat.norm() - 0.1).abs() < 1e-12);
        // The unconstrained descent direction points out of the ball.
        assert!(nll_gradient(&clipped.theta_hat, &d)[0] < 0.0);
    }

    #[test]
    fn fit_rejects_bad_input() {
        assert!(fit_mle(&PreferenceDataset::new(), 1.0, &MleOptions::default()).is_err());
        let d = data(vec![rec(&[1.0], 1)]);
        assert!(fit_mle(&d, 0.0, &MleOptions::default()).is_err());
    }

    #[test]
    fn kappa_examples() {
        let pts = vec![Vector::from_vec(vec![1.0]), Vector::from_vec(vec![-0.5])];
        let space = DesignSpace::from_points(pts, vec![(0, 1), (1, 0)]).unwrap();
        assert_eq!(kappa(&space, 0.0), 4.0);
        assert!((kappa(&space, 1.0) - 5.086_161_269_630_487).abs() < 1e-9);
        assert!(kappa(&space, 2.0) > kappa(&space, 1.0));
    }

    #[test]
    fn gamma_examples() {
        let p = BoundParams {
            b: 1.0,
            l: 1.0,
            d: 2,
            kappa: 4.0,
        };
        let g1 = gamma_bound(1, 0.1, &p).unwrap();
        assert!((g1 * g1 - 4.0 * ((10f64).ln() + 2.0)).abs() < 1e-12);

        // κ at z* = 2, K = 10: 4e·9/2 > e so the max picks the second branch.
        let p2 = BoundParams {
            kappa: 9.524_391_382_167_265,
            ..p
        };
        let g = gamma_bound(10, 0.1, &p2).unwrap();
        assert!((g - 9.799_875_922_943_391).abs() < 1e-9);

        assert!(gamma_bound(20, 0.1, &p2).unwrap() >= g);
        assert!(gamma_bound(10, 0.01, &p2).unwrap() >= g);
        assert!(gamma_bound(0, 0.1, &p2).is_err());
        assert!(gamma_bound(10, 1.0, &p2).is_err());
    }

    #[test]
    fn epsilon_examples() {
        let p = BoundParams {
            b: 1.0,
            l: 1.0,
            d: 2,
            kappa: 4.0,
        };
        assert!(matches!(epsilon_bound(3, 0.1, &[p]), Err(Error::BadK { k: 3, min: 3 })));
        assert!(epsilon_bound(4, 0.1, &[p]).is_ok());

        let mut prev = f64::INFINITY;
        for k in [100, 1_000, 10_000, 100_000, 1_000_000] {
            let eps = epsilon_bound(k, 0.1, &[p]).unwrap();
            assert!(eps < prev);
            let rate = eps / ((k as f64).ln() / k as f64).sqrt();
            assert!(rate > 1.0 && rate < 20.0, "rate {rate}");
            prev = eps;
        }

        let p3 = BoundParams { d: 4, ..p };
        assert!(epsilon_bound(10_000, 0.1, &[p3]).unwrap() > epsilon_bound(10_000, 0.1, &[p]).unwrap());

        let loose = BoundParams { kappa: 8.0, ..p };
        assert_eq!(
            epsilon_bound(100, 0.1, &[p, loose]).unwrap(),
            epsilon_bound(100, 0.1, &[loose]).unwrap()
        );
    }
}
