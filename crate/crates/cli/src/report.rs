//! Output files: tables, per-step series and atomic writes.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};

use gridmpc::mpc::StepOutcome;
use gridmpc::ocd::median;

pub const COMPARE_HEADER: &str = "horizon,method,partition,steps,converged_steps,avg_iterations,median_iterations,max_iterations,avg_convergence_time";
pub const COMPARE_STEPS_HEADER: &str =
    "horizon,method,partition,step,converged,iterations,convergence_time,objective";
pub const SOLVE_HEADER: &str = "horizon,method,partition,converged,iterations,objective,residual_norm,convergence_time,scalars_exchanged";

/// Write through a sibling temporary file and rename, so a reader never sees
/// a half-written file.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, contents).with_context(|| format!("writing {}", path.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// Aggregate of one configuration over all benchmarked steps. Iteration and
/// time statistics cover the converged steps only; `converged_steps` says
/// how many that is.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub horizon: usize,
    pub method: String,
    pub partition: String,
    pub steps: usize,
    pub converged_steps: usize,
    pub avg_iterations: f64,
    pub median_iterations: f64,
    pub max_iterations: usize,
    pub avg_convergence_time: f64,
}

impl CompareRow {
    pub fn new(horizon: usize, method: &str, partition: &str, outcomes: &[StepOutcome]) -> Self {
        let ok: Vec<&StepOutcome> = outcomes.iter().filter(|o| o.converged).collect();
        let iters: Vec<f64> = ok.iter().map(|o| o.iterations as f64).collect();
        let mean = |v: &[f64]| {
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let times: Vec<f64> = ok.iter().map(|o| o.convergence_time).collect();
        CompareRow {
            horizon,
            method: method.to_string(),
            partition: partition.to_string(),
            steps: outcomes.len(),
            converged_steps: ok.len(),
            avg_iterations: mean(&iters),
            median_iterations: if iters.is_empty() {
                f64::NAN
            } else {
                median(&iters)
            },
            max_iterations: ok.iter().map(|o| o.iterations).max().unwrap_or(0),
            avg_convergence_time: mean(&times),
        }
    }

    pub fn all_converged(&self) -> bool {
        self.converged_steps == self.steps
    }
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = format!("{COMPARE_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{:e}",
            r.horizon,
            r.method,
            r.partition,
            r.steps,
            r.converged_steps,
            r.avg_iterations,
            r.median_iterations,
            r.max_iterations,
            r.avg_convergence_time
        )
        .unwrap();
    }
    out
}

pub fn compare_steps_csv(
    out: &mut String,
    horizon: usize,
    method: &str,
    partition: &str,
    outcomes: &[StepOutcome],
) {
    for o in outcomes {
        writeln!(
            out,
            "{horizon},{method},{partition},{},{},{},{:e},{}",
            o.interval, o.converged, o.iterations, o.convergence_time, o.objective
        )
        .unwrap();
    }
}

/// Fixed-width rendering of the comparison table for the terminal.
pub fn compare_text(rows: &[CompareRow]) -> String {
    let mut out = format!(
        "{:>3} {:<12} {:<12} {:>9} {:>9} {:>9} {:>6} {:>12}\n",
        "N", "method", "partition", "converged", "avg it", "median", "max", "avg time [s]"
    );
    for r in rows {
        writeln!(
            out,
            "{:>3} {:<12} {:<12} {:>9} {:>9.1} {:>9.1} {:>6} {:>12.4e}",
            r.horizon,
            r.method,
            r.partition,
            format!("{}/{}", r.converged_steps, r.steps),
            r.avg_iterations,
            r.median_iterations,
            r.max_iterations,
            r.avg_convergence_time
        )
        .unwrap();
    }
    out
}
