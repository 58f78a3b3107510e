//! CSV emission.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::experiments::{GainRow, GapRow, MultiRoundOutput, OneShotOutput, RegretRow, SummaryRow, TraceRow};

pub const GAIN_FILE: &str = "oneshot_gain.csv";
pub const GAP_FILE: &str = "oneshot_gap.csv";
pub const ONESHOT_SUMMARY_FILE: &str = "oneshot_summary.csv";
pub const TRACE_FILE: &str = "multiround_trace.csv";
pub const REGRET_FILE: &str = "multiround_summary.csv";

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "PREFVCG_OUT";

pub fn resolve_out_dir(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

trait Finite {
    fn all_finite(&self) -> bool;
}

impl Finite for GainRow {
    fn all_finite(&self) -> bool {
        self.delta_theta.is_finite() && self.gain.is_finite() && self.epsilon_bound.is_finite()
    }
}

impl Finite for GapRow {
    fn all_finite(&self) -> bool {
        self.gap_normalized.is_finite()
    }
}

impl Finite for SummaryRow {
    fn all_finite(&self) -> bool {
        self.value.is_finite() && self.delta_theta.map_or(true, f64::is_finite)
    }
}

impl Finite for TraceRow {
    fn all_finite(&self) -> bool {
        self.regret.is_finite() && self.social_cost.is_finite()
    }
}

impl Finite for RegretRow {
    fn all_finite(&self) -> bool {
        self.avg_regret_normalized.is_finite()
    }
}

/// Writes `rows` with a header line, even when empty. Refuses non-finite values.
fn write_rows<T: Serialize + Finite>(path: &Path, header: &[&str], rows: &[T]) -> CliResult<()> {
    if let Some(pos) = rows.iter().position(|r| !r.all_finite()) {
        return Err(CliError::Numerical(format!(
            "non-finite value in row {} of {}",
            pos + 1,
            path.display()
        )));
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_oneshot(dir: &Path, out: &OneShotOutput) -> CliResult<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let files = [GAIN_FILE, GAP_FILE, ONESHOT_SUMMARY_FILE].map(|f| dir.join(f));
    write_rows(&files[0], &["K", "delta_theta", "seed", "gain", "epsilon_bound"], &out.gains)?;
    write_rows(&files[1], &["K", "seed", "gap_normalized"], &out.gaps)?;
    write_rows(&files[2], &["K", "delta_theta", "statistic", "value", "count"], &out.summary)?;
    Ok(files.to_vec())
}

pub fn write_multiround(dir: &Path, out: &MultiRoundOutput) -> CliResult<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let files = [TRACE_FILE, REGRET_FILE].map(|f| dir.join(f));
    write_rows(&files[0], &["seed", "t", "phase", "stage", "regret", "social_cost"], &out.trace)?;
    write_rows(&files[1], &["seed", "T", "avg_regret_normalized"], &out.summary)?;
    Ok(files.to_vec())
}

/// Reads `(x, y)` pairs from a CSV with headers, keeping rows whose columns
/// match every `filter` (`column`, `value`) pair exactly.
pub fn read_xy(path: &Path, x: &str, y: &str, filters: &[(String, String)]) -> CliResult<Vec<(f64, f64)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Config(format!("{}: no column `{name}`", path.display())))
    };
    let xi = column(x)?;
    let yi = column(y)?;
    let fi = filters
        .iter()
        .map(|(c, v)| Ok((column(c)?, v.as_str())))
        .collect::<CliResult<Vec<_>>>()?;
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if fi.iter().any(|&(i, v)| rec.get(i) != Some(v)) {
            continue;
        }
        let parse = |i: usize| -> CliResult<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| CliError::Config(format!("{}: bad number on data line {}", path.display(), line + 1)))
        };
        out.push((parse(xi)?, parse(yi)?));
    }
    Ok(out)
}
