//! Seeded sweeps behind the `oneshot`, `multiround` and `design-check` commands.
//!
//! Repetition `r` uses the seed `derive_seed(root, [r])` for both its instance
//! and its labels, so every query budget and deviation in a sweep is evaluated
//! on the same population, and a deviating run differs from its truthful
//! counterpart only in the designated agent's answers.

use prefvcg::design::{build_design_space, optimal_design, DesignDiagnostics};
use prefvcg::domain::{AgentSpec, AllocationSet, Vector};
use prefvcg::mechanism::SolveOptions;
use prefvcg::protocol::{run_multi_round, run_one_shot, Deviation, Instance, MultiRoundConfig, OneShotConfig};
use prefvcg::seed::derive_seed;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    #[serde(rename = "K")]
    pub k: usize,
    pub delta_theta: f64,
    pub seed: u64,
    pub gain: f64,
    pub epsilon_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub gap_normalized: f64,
}

/// One statistic of one sweep cell. Gap statistics leave `delta_theta` empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    #[serde(rename = "K")]
    pub k: usize,
    pub delta_theta: Option<f64>,
    pub statistic: String,
    pub value: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub seed: u64,
    pub t: usize,
    pub phase: String,
    pub stage: usize,
    pub regret: f64,
    pub social_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretRow {
    pub seed: u64,
    #[serde(rename = "T")]
    pub t: usize,
    pub avg_regret_normalized: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OneShotOutput {
    pub gains: Vec<GainRow>,
    pub gaps: Vec<GapRow>,
    pub summary: Vec<SummaryRow>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MultiRoundOutput {
    pub trace: Vec<TraceRow>,
    pub summary: Vec<RegretRow>,
}

pub fn rep_seed(root: u64, rep: usize) -> u64 {
    derive_seed(root, &[rep as u64])
}

/// Runs `f` on a pool of `jobs` threads (all cores when `jobs` is 0).
pub fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Io(e.to_string()))?;
    Ok(pool.install(f))
}

pub fn build_instance(cfg: &ExperimentConfig, seed: u64) -> CliResult<Instance> {
    let mut inst = Instance::generate(
        &cfg.instance_config(),
        seed,
        &cfg.design_options(),
        &SolveOptions::default(),
    )
    .map_err(|e| CliError::numerical(format!("instance for seed {seed}"), e))?;
    if let Some(l) = cfg.feature_bound {
        for p in &mut inst.bound_params {
            p.l = l;
        }
    }
    Ok(inst)
}

struct RepOneShot {
    gains: Vec<(usize, GainRow)>,
    gaps: Vec<(usize, GapRow)>,
}

fn one_shot_rep(cfg: &ExperimentConfig, ks: &[usize], rep: usize) -> CliResult<RepOneShot> {
    let seed = rep_seed(cfg.seed, rep);
    let inst = build_instance(cfg, seed)?;
    let mut out = RepOneShot {
        gains: Vec::new(),
        gaps: Vec::new(),
    };
    for &k in ks {
        let base = OneShotConfig {
            mechanism: cfg.mechanism.into(),
            delta: cfg.delta,
            mle: cfg.mle_options(),
            ..OneShotConfig::new(k)
        };
        let context = |what: &str| format!("{what} run, K = {k}, seed {seed}");
        let truthful = run_one_shot(&inst, &base, seed).map_err(|e| CliError::numerical(context("truthful"), e))?;
        out.gaps.push((
            rep,
            GapRow {
                k,
                seed,
                gap_normalized: truthful.normalized_gap(),
            },
        ));
        for &dt in &cfg.deviations {
            let lying = OneShotConfig {
                deviation: Some(Deviation {
                    agent: cfg.designated_agent,
                    delta_theta: Vector::from_element(cfg.dim, dt),
                }),
                ..base.clone()
            };
            let dev = run_one_shot(&inst, &lying, seed).map_err(|e| CliError::numerical(context("deviating"), e))?;
            let i = cfg.designated_agent;
            out.gains.push((
                rep,
                GainRow {
                    k,
                    delta_theta: dt,
                    seed,
                    gain: dev.realized_utilities[i] - truthful.realized_utilities[i],
                    epsilon_bound: truthful.epsilon_reported,
                },
            ));
        }
    }
    Ok(out)
}

/// Max, standard deviation and mean of the gains per `(K, Δθ)`, and mean and
/// max of the normalized gap per `K`. Inputs must be sorted by cell.
pub fn summarize(gains: &[GainRow], gaps: &[GapRow]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < gains.len() {
        let (k, dt) = (gains[start].k, gains[start].delta_theta);
        let end = start + gains[start..].iter().take_while(|r| r.k == k && r.delta_theta == dt).count();
        let values: Vec<f64> = gains[start..end].iter().map(|r| r.gain).collect();
        for (name, value) in [
            ("max_gain", stats::max(&values)),
            ("std", stats::std_dev(&values)),
            ("mean_gain", stats::mean(&values)),
        ] {
            out.push(SummaryRow {
                k,
                delta_theta: Some(dt),
                statistic: name.into(),
                value,
                count: values.len(),
            });
        }
        start = end;
    }
    let mut start = 0;
    while start < gaps.len() {
        let k = gaps[start].k;
        let end = start + gaps[start..].iter().take_while(|r| r.k == k).count();
        let values: Vec<f64> = gaps[start..end].iter().map(|r| r.gap_normalized).collect();
        for (name, value) in [("mean_gap", stats::mean(&values)), ("max_gap", stats::max(&values))] {
            out.push(SummaryRow {
                k,
                delta_theta: None,
                statistic: name.into(),
                value,
                count: values.len(),
            });
        }
        start = end;
    }
    out
}

/// Utility gains of the designated agent and efficiency gaps over the `K` sweep.
pub fn run_oneshot(cfg: &ExperimentConfig) -> CliResult<OneShotOutput> {
    let ks = cfg.k_values();
    let reps: Vec<RepOneShot> = (0..cfg.repetitions)
        .into_par_iter()
        .map(|rep| one_shot_rep(cfg, &ks, rep))
        .collect::<CliResult<_>>()?;
    let mut gains: Vec<(usize, GainRow)> = reps.iter().flat_map(|r| r.gains.clone()).collect();
    let mut gaps: Vec<(usize, GapRow)> = reps.iter().flat_map(|r| r.gaps.clone()).collect();
    gains.sort_by(|(ra, a), (rb, b)| {
        a.k.cmp(&b.k)
            .then(a.delta_theta.total_cmp(&b.delta_theta))
            .then(ra.cmp(rb))
    });
    gaps.sort_by(|(ra, a), (rb, b)| a.k.cmp(&b.k).then(ra.cmp(rb)));
    let gains: Vec<GainRow> = gains.into_iter().map(|(_, r)| r).collect();
    let gaps: Vec<GapRow> = gaps.into_iter().map(|(_, r)| r).collect();
    let summary = summarize(&gains, &gaps);
    Ok(OneShotOutput { gains, gaps, summary })
}

/// Welfare-regret traces of the multi-round game.
pub fn run_multiround(cfg: &ExperimentConfig) -> CliResult<MultiRoundOutput> {
    let checkpoints = cfg.checkpoint_values();
    let reps: Vec<(Vec<TraceRow>, Vec<RegretRow>)> = (0..cfg.repetitions)
        .into_par_iter()
        .map(|rep| {
            let seed = rep_seed(cfg.seed, rep);
            let inst = build_instance(cfg, seed)?;
            let mr = MultiRoundConfig {
                mechanism: cfg.mechanism.into(),
                count_exploration_cost: cfg.count_exploration_cost,
                mle: cfg.mle_options(),
                ..MultiRoundConfig::new(cfg.multiround_k, cfg.horizon)
            };
            let trace = run_multi_round(&inst, &mr, seed)
                .map_err(|e| CliError::numerical(format!("multi-round run, seed {seed}"), e))?;
            let rows = trace
                .rounds
                .iter()
                .filter(|r| r.t % cfg.thin == 0 || r.t == cfg.horizon)
                .map(|r| TraceRow {
                    seed,
                    t: r.t,
                    phase: r.phase.as_str().into(),
                    stage: r.stage,
                    regret: r.regret,
                    social_cost: r.social_cost,
                })
                .collect();
            let summary = checkpoints
                .iter()
                .map(|&t| RegretRow {
                    seed,
                    t,
                    avg_regret_normalized: trace.regret_until(t) / t as f64 / trace.optimal_cost,
                })
                .collect();
            Ok((rows, summary))
        })
        .collect::<CliResult<_>>()?;
    let mut out = MultiRoundOutput::default();
    for (rows, summary) in reps {
        out.trace.extend(rows);
        out.summary.extend(summary);
    }
    Ok(out)
}

/// Design diagnostics for each agent and query budget. The design depends
/// only on the feature map and allocation set, not on `θ*`.
pub fn run_design_check(cfg: &ExperimentConfig) -> CliResult<(String, bool)> {
    let set = AllocationSet::grid(cfg.dim, &cfg.grid_levels, cfg.grid_max_total)
        .map_err(|e| CliError::Config(format!("allocation grid: {e}")))?;
    let theta = Vector::from_element(cfg.dim, cfg.theta_range[1]);
    let agent = AgentSpec::quadratic(theta, cfg.instance_config().norm_bound())
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mut report = String::new();
    let mut all_pass = true;
    for i in 0..cfg.n_agents {
        let context = |e| CliError::numerical(format!("agent {i}"), e);
        let space = build_design_space(&agent, &set).map_err(context)?;
        let dist = optimal_design(&space, &cfg.design_options()).map_err(context)?;
        for k in cfg.k_values() {
            let diag = DesignDiagnostics::compute(&space, &dist, k).map_err(context)?;
            all_pass &= diag.passes();
            report.push_str(&format!("agent {i}, K = {k}\n{diag}\n\n"));
        }
    }
    report.push_str(if all_pass { "overall: PASS\n" } else { "overall: FAIL\n" });
    Ok((report, all_pass))
}
