//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits with a
//! non-zero status when any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use expcli::config::KSweep;
use expcli::experiments::{rep_seed, run_multiround, run_oneshot};
use expcli::stats::{fit_loglog_slope, group_means, max};
use expcli::ExperimentConfig;
use prefvcg::design::{build_design_space, optimal_design, DesignDiagnostics, DesignOptions, DesignSpace};
use prefvcg::domain::{AgentSpec, AllocationSet, AllocationSpace, FeasibleSet, PreferenceDataset, PreferenceRecord, Vector};
use prefvcg::estimation::{fit_mle, nll, nll_gradient, worst_pair_error, MleOptions};
use prefvcg::math::support_bound;
use prefvcg::mechanism::{vcg_outcome, CostTable, SolveOptions};
use prefvcg::protocol::{run_beta_pipeline, run_one_shot, Instance, InstanceConfig, OneShotConfig};
use prefvcg::seed::{derive_seed, rng_from_seed, SimRng};
use rand::Rng;
use rayon::prelude::*;

const ROOT_SEED: u64 = 2024;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

// 1. Exact-cost VCG: truthfulness and individual rationality by enumeration.

fn random_vcg_instance(rng: &mut SimRng) -> (AllocationSpace, CostTable, FeasibleSet) {
    loop {
        let n = rng.gen_range(2..=4);
        let mut sets = Vec::new();
        let mut rows = Vec::new();
        for _ in 0..n {
            let size = rng.gen_range(2..=5);
            let mut levels = vec![0.0];
            while levels.len() < size {
                let v = rng.gen_range(1..=4) as f64;
                if !levels.contains(&v) {
                    levels.push(v);
                }
            }
            let row: Vec<f64> = levels
                .iter()
                .map(|&v| if v == 0.0 { 0.0 } else { rng.gen_range(1..=10) as f64 * 0.5 })
                .collect();
            sets.push(AllocationSet::new(levels.iter().map(|&v| vec![v]).collect(), 0).unwrap());
            rows.push(row);
        }
        let space = AllocationSpace::new(sets).unwrap();
        let total: f64 = (0..n)
            .map(|i| space.set(i).total(rng.gen_range(0..space.set(i).len())))
            .sum();
        let tables = CostTable::new(rows, &space).unwrap();
        let feas = FeasibleSet::exact(total);
        if vcg_outcome(&tables, &space, &feas, &SolveOptions::default()).is_ok() {
            return (space, tables, feas);
        }
    }
}

/// Every reported row with a⁰ at zero and other costs from `grid`.
fn misreports(len: usize, grid: &[f64]) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0]];
    for _ in 1..len {
        out = out
            .into_iter()
            .flat_map(|row| {
                grid.iter().map(move |&c| {
                    let mut r = row.clone();
                    r.push(c);
                    r
                })
            })
            .collect();
    }
    out
}

fn criterion_exact_vcg() -> Verdict {
    let mut rng = rng_from_seed(derive_seed(ROOT_SEED, &[1]));
    let instances: Vec<_> = (0..100).map(|_| random_vcg_instance(&mut rng)).collect();
    let grid = [0.0, 1.0, 2.5, 4.0, 5.5];
    let results: Vec<(f64, f64, usize)> = instances
        .par_iter()
        .map(|(space, truth, feas)| {
            let opts = SolveOptions::default();
            let honest = vcg_outcome(truth, space, feas, &opts).unwrap();
            let mut worst_gain = f64::NEG_INFINITY;
            let mut worst_utility = f64::INFINITY;
            let mut checked = 0;
            for i in 0..space.n_agents() {
                let u_true = honest.payments[i] - truth.get(i, honest.allocation.indices()[i]);
                worst_utility = worst_utility.min(u_true);
                for row in misreports(space.set(i).len(), &grid) {
                    let reported = truth.with_row(i, row);
                    let out = vcg_outcome(&reported, space, feas, &opts).unwrap();
                    let u = out.payments[i] - truth.get(i, out.allocation.indices()[i]);
                    worst_gain = worst_gain.max(u - u_true);
                    checked += 1;
                }
            }
            (worst_gain, worst_utility, checked)
        })
        .collect();
    let gain = results.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
    let utility = results.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let checked: usize = results.iter().map(|r| r.2).sum();
    verdict(
        gain <= 1e-9 && utility >= -1e-9,
        format!("100 instances, {checked} misreports: max gain {gain:e}, min utility {utility:e}"),
    )
}

// 2. Kiefer–Wolfowitz certificate and rounded-plan variance bound.

fn design_ok(space: &DesignSpace, ks: &[usize]) -> Result<(f64, f64), String> {
    let d = space.dim() as f64;
    let dist = optimal_design(space, &DesignOptions::default()).map_err(|e| e.to_string())?;
    if dist.gap > d * 1.01 {
        return Err(format!("gap {} > {}", dist.gap, d * 1.01));
    }
    let mut worst_ratio: f64 = 0.0;
    for &k in ks {
        let diag = DesignDiagnostics::compute(space, &dist, k).map_err(|e| e.to_string())?;
        if !diag.passes() {
            return Err(format!(
                "K = {k}: variance {} > bound {}",
                diag.empirical_max_variance, diag.variance_bound
            ));
        }
        worst_ratio = worst_ratio.max(diag.empirical_max_variance / diag.variance_bound);
    }
    Ok((dist.gap / d, worst_ratio))
}

fn budgets(d: usize) -> Vec<usize> {
    let m = support_bound(d);
    let mut ks: Vec<usize> = (m + 1..=m + 25).collect();
    ks.extend([50, 100, 200, 500, 1000, 1910]);
    ks.retain(|&k| k > m);
    ks
}

fn criterion_design() -> Verdict {
    let set = AllocationSet::grid(2, &[0.0, 1.0, 2.0, 3.0, 4.0], 4.0).unwrap();
    let agent = AgentSpec::quadratic(Vector::from_vec(vec![0.3, 0.3]), 1.0).unwrap();
    let default_space = build_design_space(&agent, &set).unwrap();
    let mut spaces = vec![default_space];
    let mut rng = rng_from_seed(derive_seed(ROOT_SEED, &[2]));
    while spaces.len() < 51 {
        let d = rng.gen_range(1..=4);
        let n = rng.gen_range(d + 1..=40);
        let points: Vec<Vector> = (0..n).map(|_| Vector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0))).collect();
        let pairs = (0..n).map(|i| (0, i)).collect();
        if let Ok(space) = DesignSpace::from_points(points, pairs) {
            spaces.push(space);
        }
    }
    let results: Vec<Result<(f64, f64), String>> = spaces.par_iter().map(|s| design_ok(s, &budgets(s.dim()))).collect();
    let failures: Vec<String> = results
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.as_ref().err().map(|e| format!("space {i}: {e}")))
        .collect();
    let worst_gap = results.iter().flatten().map(|r| r.0).fold(0.0, f64::max);
    let worst_ratio = results.iter().flatten().map(|r| r.1).fold(0.0, f64::max);
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            format!("51 spaces: max gap/d {worst_gap:.6}, max variance/bound {worst_ratio:.6}")
        } else {
            failures.join("; ")
        },
    )
}

// 3. MLE: gradient, closed-form recovery, convexity.

fn random_dataset(rng: &mut SimRng, d: usize, n: usize) -> PreferenceDataset {
    PreferenceDataset {
        records: (0..n)
            .map(|_| PreferenceRecord {
                x: Vector::from_fn(d, |_, _| rng.gen_range(-4.0..4.0)),
                y: rng.gen_range(0..=1),
                pair: (0, 0),
            })
            .collect(),
    }
}

fn criterion_mle() -> Verdict {
    let mut rng = rng_from_seed(derive_seed(ROOT_SEED, &[3]));
    let mut worst_fd: f64 = 0.0;
    for _ in 0..100 {
        let d = rng.gen_range(1..=4);
        let n = rng.gen_range(1..=60);
        let data = random_dataset(&mut rng, d, n);
        let theta = Vector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
        let g = nll_gradient(&theta, &data);
        let h = 1e-5;
        let fd = Vector::from_fn(d, |k, _| {
            let mut up = theta.clone();
            up[k] += h;
            let mut down = theta.clone();
            down[k] -= h;
            (nll(&up, &data) - nll(&down, &data)) / (2.0 * h)
        });
        worst_fd = worst_fd.max((&fd - &g).norm() / g.norm().max(1.0));
    }

    let mut worst_logit: f64 = 0.0;
    for (ones, zeros) in [(7, 3), (1, 9), (50, 50), (999, 1), (13, 29)] {
        let mut records = vec![
            PreferenceRecord {
                x: Vector::from_vec(vec![1.0]),
                y: 1,
                pair: (0, 0)
            };
            ones
        ];
        records.extend(vec![
            PreferenceRecord {
                x: Vector::from_vec(vec![1.0]),
                y: 0,
                pair: (0, 0)
            };
            zeros
        ]);
        let p = ones as f64 / (ones + zeros) as f64;
        let est = fit_mle(&PreferenceDataset { records }, 100.0, &MleOptions::default()).unwrap();
        worst_logit = worst_logit.max((est.theta_hat[0] - (p / (1.0 - p)).ln()).abs());
    }

    let mut convex_violations = 0;
    for _ in 0..200 {
        let d = rng.gen_range(1..=4);
        let data = random_dataset(&mut rng, d, 30);
        let a = Vector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0));
        let b = Vector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0));
        let t: f64 = rng.gen_range(0.0..1.0);
        let mix = &a * t + &b * (1.0 - t);
        let rhs = t * nll(&a, &data) + (1.0 - t) * nll(&b, &data);
        if nll(&mix, &data) > rhs + 1e-9 * (1.0 + rhs.abs()) {
            convex_violations += 1;
        }
    }
    verdict(
        worst_fd <= 1e-6 && worst_logit <= 1e-6 && convex_violations == 0,
        format!("gradient rel err {worst_fd:e}, logit err {worst_logit:e}, convexity violations {convex_violations}/200"),
    )
}

// 4. Confidence coverage of the worst-pair cost-difference error.

fn criterion_coverage() -> Verdict {
    let cfg = InstanceConfig::default();
    let covered: Vec<bool> = (0..200u64)
        .into_par_iter()
        .map(|rep| {
            let seed = derive_seed(ROOT_SEED, &[4, rep]);
            let inst = Instance::generate(&cfg, seed, &DesignOptions::default(), &SolveOptions::default()).unwrap();
            let res = run_one_shot(&inst, &OneShotConfig::new(200), seed).unwrap();
            res.estimates
                .iter()
                .zip(&inst.agents)
                .zip(&inst.design_spaces)
                .all(|((e, a), ds)| worst_pair_error(&e.theta_hat, a.theta_star(), ds) <= res.epsilon_reported)
        })
        .collect();
    let rate = covered.iter().filter(|&&c| c).count() as f64 / covered.len() as f64;
    verdict(rate >= 0.95, format!("coverage {:.3} over 200 runs (need ≥ 0.95)", rate))
}

// 5. One-shot efficiency rate.

fn criterion_gap_rate() -> Verdict {
    let cfg = ExperimentConfig::preset("fig2a").unwrap().quick();
    let out = run_oneshot(&cfg).unwrap();
    let means: Vec<(f64, f64)> = out
        .summary
        .iter()
        .filter(|r| r.statistic == "mean_gap")
        .map(|r| (r.k as f64, r.value))
        .collect();
    let worst: Vec<(f64, f64)> = out
        .summary
        .iter()
        .filter(|r| r.statistic == "max_gap")
        .map(|r| (r.k as f64, r.value))
        .collect();
    let shown: Vec<String> = means.iter().map(|(k, v)| format!("{k}:{v:.2e}")).collect();
    let positive: Vec<(f64, f64)> = means.iter().copied().filter(|p| p.1 > 0.0).collect();
    let info = match fit_loglog_slope(&positive) {
        Ok(f) => format!("slope over positive means {:.3}", f.slope),
        Err(e) => e.to_string(),
    };
    let worst_info = match fit_loglog_slope(&worst.iter().copied().filter(|p| p.1 > 0.0).collect::<Vec<_>>()) {
        Ok(f) => format!("max-gap slope {:.3}", f.slope),
        Err(e) => e.to_string(),
    };
    match fit_loglog_slope(&means) {
        Ok(fit) => verdict(
            (-0.65..=-0.35).contains(&fit.slope),
            format!("mean-gap slope {:.3} (need [-0.65, -0.35]); {worst_info}; means {}", fit.slope, shown.join(" ")),
        ),
        Err(e) => verdict(
            false,
            format!("mean-gap slope undefined ({e}); {info}; {worst_info}; means {}", shown.join(" ")),
        ),
    }
}

// 6. Truthfulness separation between pay-as-bid and VCG.

fn criterion_truthfulness() -> Verdict {
    let base = ExperimentConfig {
        k: KSweep::List(vec![1000]),
        repetitions: 10,
        deviations: vec![0.2],
        ..ExperimentConfig::default()
    };
    let max_gain = |mechanism| {
        let cfg = ExperimentConfig {
            mechanism,
            ..base.clone()
        };
        let out = run_oneshot(&cfg).unwrap();
        max(&out.gains.iter().map(|g| g.gain).collect::<Vec<_>>())
    };
    let pab = max_gain(expcli::config::MechanismName::Payasbid);
    let vcg = max_gain(expcli::config::MechanismName::Vcg);
    verdict(
        pab > 0.0 && vcg.abs() <= 0.1,
        format!("max gain pay-as-bid {pab:.4} (need > 0), VCG {vcg:.4} (need |.| ≤ 0.1)"),
    )
}

// 7. Multi-round welfare-regret rate.

fn criterion_regret_rate() -> Verdict {
    let cfg = ExperimentConfig {
        checkpoints: vec![500, 1000, 2000],
        ..ExperimentConfig::preset("fig2b").unwrap().quick()
    };
    let out = run_multiround(&cfg).unwrap();
    let points = group_means(
        &out.summary
            .iter()
            .map(|r| (r.t as f64, r.avg_regret_normalized))
            .collect::<Vec<_>>(),
    );
    let decreasing = points.windows(2).all(|w| w[1].1 < w[0].1);
    let shown: Vec<String> = points.iter().map(|(t, v)| format!("{t}:{v:.4}")).collect();
    match fit_loglog_slope(&points) {
        Ok(fit) => verdict(
            decreasing && (-0.5..=-0.18).contains(&fit.slope),
            format!(
                "R/T {} decreasing={decreasing}, slope {:.3} (need [-0.5, -0.18])",
                shown.join(" "),
                fit.slope
            ),
        ),
        Err(e) => verdict(false, format!("slope undefined: {e}")),
    }
}

// 8. Rationality recovery and end-to-end parameter error.

fn criterion_beta() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for (b_idx, beta) in [0.5, 1.0, 2.0].into_iter().enumerate() {
        let cfg = InstanceConfig {
            beta,
            ..InstanceConfig::default()
        };
        let runs: Vec<_> = (0..50u64)
            .into_par_iter()
            .map(|rep| {
                let seed = derive_seed(ROOT_SEED, &[8, b_idx as u64, rep]);
                let inst = Instance::generate(&cfg, seed, &DesignOptions::default(), &SolveOptions::default()).unwrap();
                run_beta_pipeline(&inst, 0, 5000, 5000, &[1.0], 100.0, &MleOptions::default(), seed).unwrap()
            })
            .collect();
        let within = runs.iter().filter(|r| (r.beta.beta_hat - beta).abs() <= 0.1 * beta).count();
        let err_unknown = runs.iter().map(|r| r.error_unknown_beta).sum::<f64>() / 50.0;
        let err_known = runs.iter().map(|r| r.error_known_beta).sum::<f64>() / 50.0;
        let ok = within >= 45 && err_unknown <= 2.0 * err_known;
        pass &= ok;
        parts.push(format!(
            "β*={beta}: {within}/50 within 10%, θ error {err_unknown:.4} vs known {err_known:.4} (ratio {:.2})",
            err_unknown / err_known
        ));
    }
    verdict(pass, parts.join("; "))
}

// 9. Determinism of every command.

fn run_cli(args: &[&str], out: &Path) -> Vec<u8> {
    let res = Command::new(env!("CARGO_BIN_EXE_prefvcg"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("PREFVCG_OUT")
        .output()
        .unwrap();
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    res.stdout
}

fn criterion_determinism() -> Verdict {
    let tmp = tempfile::TempDir::new().unwrap();
    let commands: [(&[&str], &[&str]); 3] = [
        (&["oneshot", "--preset", "fig1", "--quick"], &["oneshot_gain.csv", "oneshot_gap.csv", "oneshot_summary.csv"]),
        (&["multiround", "--preset", "fig2b", "--quick"], &["multiround_trace.csv", "multiround_summary.csv"]),
        (&["design-check", "--preset", "fig2a", "--quick"], &[]),
    ];
    let mut compared = 0;
    for (i, (args, files)) in commands.iter().enumerate() {
        let a = tmp.path().join(format!("{i}a"));
        let b = tmp.path().join(format!("{i}b"));
        let out_a = String::from_utf8_lossy(&run_cli(args, &a)).replace(a.to_str().unwrap(), "OUT");
        let out_b = String::from_utf8_lossy(&run_cli(args, &b)).replace(b.to_str().unwrap(), "OUT");
        if out_a != out_b {
            return verdict(false, format!("`{}` printed different output", args.join(" ")));
        }
        for f in *files {
            let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
            if x != y {
                return verdict(false, format!("{f} differs between runs"));
            }
            compared += 1;
        }
    }
    verdict(true, format!("{compared} CSV files byte-identical across repeated runs"))
}

fn main() {
    // The library seeds repetitions from the configured root.
    assert_eq!(rep_seed(ROOT_SEED, 0), derive_seed(ROOT_SEED, &[0]));
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("exact-cost VCG truthfulness and individual rationality", criterion_exact_vcg),
        ("Kiefer-Wolfowitz certificate and rounded-plan bound", criterion_design),
        ("MLE gradient, closed form and convexity", criterion_mle),
        ("confidence coverage of pairwise cost errors", criterion_coverage),
        ("one-shot efficiency gap rate", criterion_gap_rate),
        ("truthfulness separation at K = 1000", criterion_truthfulness),
        ("multi-round welfare regret rate", criterion_regret_rate),
        ("rationality recovery", criterion_beta),
        ("determinism", criterion_determinism),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let label = format!("criterion {}", i + 1);
        if let Some(f) = &filter {
            if !label.contains(f.as_str()) && !name.contains(f.as_str()) {
                continue;
            }
        }
        ran += 1;
        let start = Instant::now();
        let v = run();
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!(
            "{status} {label}: {name} [{:.1}s] {}",
            start.elapsed().as_secs_f64(),
            v.detail
        );
        if !v.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
