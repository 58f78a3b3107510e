//! Experiment configuration (JSON).
//!
//! Every field is optional and falls back to the defaults below; unknown keys
//! are rejected.

use std::path::Path;

use prefvcg::design::DesignOptions;
use prefvcg::estimation::MleOptions;
use prefvcg::math::support_bound;
use prefvcg::protocol::{InstanceConfig, MechanismKind};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MechanismName {
    Vcg,
    Payasbid,
}

impl From<MechanismName> for MechanismKind {
    fn from(m: MechanismName) -> Self {
        match m {
            MechanismName::Vcg => MechanismKind::Vcg,
            MechanismName::Payasbid => MechanismKind::PayAsBid,
        }
    }
}

/// Either an explicit list of query budgets or an inclusive range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KSweep {
    List(Vec<usize>),
    Range { start: usize, stop: usize, step: usize },
}

impl KSweep {
    pub fn values(&self) -> Vec<usize> {
        match self {
            KSweep::List(v) => v.clone(),
            KSweep::Range { start, stop, step } => (*start..=*stop).step_by((*step).max(1)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub n_agents: usize,
    pub dim: usize,
    pub grid_levels: Vec<f64>,
    pub grid_max_total: f64,
    pub total_flex: f64,
    pub theta_range: [f64; 2],
    /// `B`; defaults to `theta_range[1]·√d`.
    pub norm_bound: Option<f64>,
    /// `L`; defaults to the largest feature norm of the allocation set.
    pub feature_bound: Option<f64>,
    pub beta: f64,
    /// One-shot query budgets.
    pub k: KSweep,
    /// Queries per stage in the multi-round game.
    pub multiround_k: usize,
    pub horizon: usize,
    /// Rounds at which the multi-round summary is reported; empty means
    /// `T/4, T/2, T`.
    pub checkpoints: Vec<usize>,
    pub repetitions: usize,
    pub seed: u64,
    pub mechanism: MechanismName,
    pub deviations: Vec<f64>,
    pub designated_agent: usize,
    pub delta: f64,
    pub count_exploration_cost: bool,
    /// Keep every `thin`-th round in the trace CSV (the last round is always kept).
    pub thin: usize,
    pub design_tol: f64,
    pub mle_tol: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_agents: 5,
            dim: 2,
            grid_levels: vec![0.0, 1.0, 2.0, 3.0, 4.0],
            grid_max_total: 4.0,
            total_flex: 15.0,
            theta_range: [0.1, 0.5],
            norm_bound: None,
            feature_bound: None,
            beta: 1.0,
            k: KSweep::Range {
                start: 10,
                stop: 1910,
                step: 100,
            },
            multiround_k: 5,
            horizon: 2000,
            checkpoints: Vec::new(),
            repetitions: 10,
            seed: 2024,
            mechanism: MechanismName::Vcg,
            deviations: vec![-0.2, -0.1, 0.1, 0.2],
            designated_agent: 0,
            delta: 0.1,
            count_exploration_cost: true,
            thin: 1,
            design_tol: 1e-3,
            mle_tol: 1e-8,
        }
    }
}

fn invalid(field: &str, message: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("field `{field}`: {message}"))
}

/// Shipped configurations.
pub const PRESETS: &[(&str, &str)] = &[
    ("fig1", include_str!("../presets/fig1.json")),
    ("fig1-payasbid", include_str!("../presets/fig1-payasbid.json")),
    ("fig2a", include_str!("../presets/fig2a.json")),
    ("fig2b", include_str!("../presets/fig2b.json")),
];

impl ExperimentConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| CliError::Config(format!("line {}, column {}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn preset(name: &str) -> CliResult<Self> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| CliError::Config(format!("unknown preset `{name}`")))?;
        Self::from_json(text)
    }

    pub fn k_values(&self) -> Vec<usize> {
        self.k.values()
    }

    pub fn checkpoint_values(&self) -> Vec<usize> {
        let mut cps = if self.checkpoints.is_empty() {
            vec![self.horizon / 4, self.horizon / 2, self.horizon]
        } else {
            self.checkpoints.clone()
        };
        cps.retain(|&t| t >= 1);
        cps.sort_unstable();
        cps.dedup();
        cps
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.n_agents == 0 {
            return Err(invalid("n_agents", "must be positive"));
        }
        if self.dim == 0 {
            return Err(invalid("dim", "must be positive"));
        }
        if !self.grid_levels.contains(&0.0) {
            return Err(invalid("grid_levels", "must contain 0"));
        }
        if self.grid_levels.iter().any(|v| !v.is_finite()) {
            return Err(invalid("grid_levels", "must be finite"));
        }
        let [lo, hi] = self.theta_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(invalid("theta_range", "must satisfy 0 < lo ≤ hi"));
        }
        if let Some(b) = self.norm_bound {
            if hi * (self.dim as f64).sqrt() > b {
                return Err(invalid("theta_range", format!("upper end exceeds B/√d = {}", b / (self.dim as f64).sqrt())));
            }
        }
        if matches!(self.feature_bound, Some(l) if !(l > 0.0)) {
            return Err(invalid("feature_bound", "must be positive"));
        }
        if !(self.beta > 0.0) {
            return Err(invalid("beta", "must be positive"));
        }
        let min = support_bound(self.dim);
        let ks = self.k_values();
        if ks.is_empty() {
            return Err(invalid("k", "no query budgets given"));
        }
        if let Some(&k) = ks.iter().find(|&&k| k <= min) {
            return Err(invalid("k", format!("{k} must exceed d(d+1)/2 = {min}")));
        }
        if self.multiround_k <= min {
            return Err(invalid("multiround_k", format!("must exceed d(d+1)/2 = {min}")));
        }
        if self.horizon == 0 {
            return Err(invalid("horizon", "must be positive"));
        }
        if let Some(&t) = self.checkpoints.iter().find(|&&t| t == 0 || t > self.horizon) {
            return Err(invalid("checkpoints", format!("{t} outside 1..={}", self.horizon)));
        }
        if self.designated_agent >= self.n_agents {
            return Err(invalid("designated_agent", "no such agent"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid("delta", "must lie in (0, 1)"));
        }
        if self.thin == 0 {
            return Err(invalid("thin", "must be positive"));
        }
        if !(self.design_tol > 0.0) {
            return Err(invalid("design_tol", "must be positive"));
        }
        if !(self.mle_tol > 0.0) {
            return Err(invalid("mle_tol", "must be positive"));
        }
        if self.deviations.iter().any(|v| !v.is_finite()) {
            return Err(invalid("deviations", "must be finite"));
        }
        Ok(())
    }

    /// Desk-scale variant: at most 10 repetitions and every other query budget.
    pub fn quick(&self) -> Self {
        let ks: Vec<usize> = self.k_values().into_iter().step_by(2).collect();
        Self {
            repetitions: self.repetitions.min(10),
            k: KSweep::List(ks),
            ..self.clone()
        }
    }

    pub fn instance_config(&self) -> InstanceConfig {
        InstanceConfig {
            n_agents: self.n_agents,
            dim: self.dim,
            grid_levels: self.grid_levels.clone(),
            grid_max_total: self.grid_max_total,
            total_flex: self.total_flex,
            theta_lo: self.theta_range[0],
            theta_hi: self.theta_range[1],
            norm_bound: self.norm_bound,
            beta: self.beta,
            ..InstanceConfig::default()
        }
    }

    pub fn design_options(&self) -> DesignOptions {
        DesignOptions {
            tol: self.design_tol,
            ..DesignOptions::default()
        }
    }

    pub fn mle_options(&self) -> MleOptions {
        MleOptions {
            tol: self.mle_tol,
            ..MleOptions::default()
        }
    }
}
