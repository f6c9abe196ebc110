//! Receding-horizon loop: solve N steps ahead, apply the first, shift.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::central::{solve_centralized, SolveError, SolveReport};
use crate::formulation::{FormulationError, HorizonProblem};
use crate::ocd::{
    convergence_time, flops_to_seconds, solve_distributed, DistributedError, DistributedReport,
    Method, Termination, Timing,
};
use crate::partition::{
    compute_affinity, spectral_partition, AffinityMatrix, Partition, PartitionError,
};
use crate::system::{PowerSystem, TimeSeries};

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Formulation(#[from] FormulationError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error("reference solve at interval {interval} failed: {reason}")]
    Reference { interval: usize, reason: String },
    #[error("step {step} failed: {reason}")]
    Step {
        step: usize,
        reason: String,
        partial: Box<MpcResult>,
    },
}

/// Which solver runs each horizon problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    Centralized,
    Distributed(Method),
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Solver::Centralized => f.write_str("centralized"),
            Solver::Distributed(m) => m.fmt(f),
        }
    }
}

impl Serialize for Solver {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl FromStr for Solver {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "centralized" | "central" => Ok(Solver::Centralized),
            other => other
                .parse::<Method>()
                .map(Solver::Distributed)
                .map_err(|_| format!("unknown method {s:?} (centralized, ocd, ocd-c)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MpcConfig {
    pub horizon: usize,
    pub solver: Solver,
    /// Used by the distributed solvers; when absent a spectral partition is
    /// computed at `reference_interval` with `regions` and `seed`.
    pub partition: Option<Partition>,
    pub regions: usize,
    pub seed: u64,
    pub reference_interval: usize,
    pub start_step: usize,
    pub steps: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl MpcConfig {
    pub fn new(horizon: usize, solver: Solver, steps: usize) -> Self {
        Self {
            horizon,
            solver,
            partition: None,
            regions: 2,
            seed: 7,
            reference_interval: 0,
            start_step: 0,
            steps,
            tol: crate::central::DEFAULT_TOL,
            max_iter: crate::central::DEFAULT_MAX_ITER,
        }
    }

    pub fn validate(&self, series: &TimeSeries) -> Result<(), MpcError> {
        if self.horizon == 0 {
            return Err(MpcError::Config("horizon must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(MpcError::Config("step budget must be at least 1".into()));
        }
        if self.start_step + self.steps + self.horizon > series.len() {
            return Err(MpcError::Config(format!(
                "start {} + {} steps + horizon {} exceeds the {} intervals of the series",
                self.start_step,
                self.steps,
                self.horizon,
                series.len()
            )));
        }
        if self.reference_interval >= series.len() {
            return Err(MpcError::Config(format!(
                "reference interval {} is outside the series",
                self.reference_interval
            )));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(MpcError::Config(
                "tolerance and iteration limit must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Report of one horizon solve, whichever solver produced it.
#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum StepReport {
    Centralized(SolveReport),
    Distributed(DistributedReport),
}

impl StepReport {
    pub fn converged(&self) -> bool {
        match self {
            StepReport::Centralized(r) => r.converged,
            StepReport::Distributed(r) => r.converged,
        }
    }

    pub fn iterations(&self) -> usize {
        match self {
            StepReport::Centralized(r) => r.iterations,
            StepReport::Distributed(r) => r.iterations,
        }
    }

    pub fn objective(&self) -> f64 {
        match self {
            StepReport::Centralized(r) => r.objective,
            StepReport::Distributed(r) => r.objective,
        }
    }

    pub fn solution(&self) -> &[f64] {
        match self {
            StepReport::Centralized(r) => &r.solution,
            StepReport::Distributed(r) => &r.solution,
        }
    }

    /// Iterations times the slowest region's median per-iteration time; the
    /// centralized solver counts as a single region.
    pub fn convergence_time(&self, timing: Timing) -> f64 {
        match self {
            StepReport::Centralized(r) => {
                let samples = match timing {
                    Timing::Wall => r.per_iteration_seconds.clone(),
                    Timing::Ops => r
                        .per_iteration_flops
                        .iter()
                        .map(|&f| flops_to_seconds(f))
                        .collect(),
                };
                convergence_time(r.iterations, &[samples])
            }
            StepReport::Distributed(r) => r.convergence_time(timing),
        }
    }

    fn failure(&self) -> String {
        match self {
            StepReport::Centralized(r) => format!(
                "no convergence in {} iterations (residual {:e})",
                r.iterations, r.residual_norm
            ),
            StepReport::Distributed(r) => match r.termination {
                Termination::Diverged => format!("diverged after {} iterations", r.iterations),
                _ => format!(
                    "no convergence in {} iterations (residual {:e})",
                    r.iterations, r.residual_norm
                ),
            },
        }
    }
}

/// First-step decisions actually applied at one interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AppliedStep {
    /// Absolute interval index in the series.
    pub interval: usize,
    pub p_gen: Vec<f64>,
    pub q_gen: Vec<f64>,
    pub p_in: Vec<f64>,
    pub p_out: Vec<f64>,
    /// Energy at the end of the interval, from the storage dynamics.
    pub energy: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MpcResult {
    pub horizon: usize,
    pub solver: Solver,
    #[serde(skip)]
    pub partition: Option<Partition>,
    pub per_step: Vec<StepReport>,
    pub schedule: Vec<AppliedStep>,
    /// Energy before the first applied step.
    pub initial_energy: Vec<f64>,
    pub total_cost: f64,
    pub total_ramping: f64,
}

impl MpcResult {
    /// `step,entity,variable,value`, one row per applied quantity.
    pub fn schedule_csv(&self) -> String {
        let mut out = String::from("step,entity,variable,value\n");
        for s in &self.schedule {
            let mut row = |entity: String, var: &str, v: f64| {
                out.push_str(&format!("{},{entity},{var},{v}\n", s.interval));
            };
            for (k, (&p, &q)) in s.p_gen.iter().zip(&s.q_gen).enumerate() {
                row(format!("gen{k}"), "P_G", p);
                row(format!("gen{k}"), "Q_G", q);
            }
            for d in 0..s.energy.len() {
                row(format!("storage{d}"), "P_in", s.p_in[d]);
                row(format!("storage{d}"), "P_out", s.p_out[d]);
                row(format!("storage{d}"), "E", s.energy[d]);
            }
        }
        out
    }

    /// `step,iterations,convergence_time,converged`.
    pub fn timing_csv(&self, timing: Timing) -> String {
        let mut out = String::from("step,iterations,convergence_time,converged\n");
        for (s, rep) in self.schedule.iter().zip(&self.per_step) {
            out.push_str(&format!(
                "{},{},{:e},{}\n",
                s.interval,
                rep.iterations(),
                rep.convergence_time(timing),
                rep.converged()
            ));
        }
        out
    }
}

/// Σ over generators and consecutive applied steps of |ΔP_G|.
pub fn total_ramping(schedule: &[AppliedStep]) -> f64 {
    schedule
        .windows(2)
        .map(|w| {
            w[0].p_gen
                .iter()
                .zip(&w[1].p_gen)
                .map(|(a, b)| (b - a).abs())
                .sum::<f64>()
        })
        .sum()
}

/// Generation cost of the applied decisions, summed over steps.
pub fn total_cost(schedule: &[AppliedStep], system: &PowerSystem) -> f64 {
    schedule
        .iter()
        .map(|s| {
            system
                .generators
                .iter()
                .zip(&s.p_gen)
                .map(|(g, &p)| g.cost(p))
                .sum::<f64>()
        })
        .sum()
}

/// Spectral partition from the single-step solution at `interval`.
pub fn reference_partition(
    system: &Arc<PowerSystem>,
    series: &TimeSeries,
    interval: usize,
    e_start: &[f64],
    k: usize,
    seed: u64,
    tol: f64,
    max_iter: usize,
) -> Result<(Partition, AffinityMatrix), MpcError> {
    let mut problem = HorizonProblem::new(system.clone(), series, interval, 1, e_start)?;
    let y0 = problem.flat_start();
    let report =
        solve_centralized(&mut problem, &y0, tol, max_iter).map_err(|e| MpcError::Reference {
            interval,
            reason: e.to_string(),
        })?;
    if !report.converged {
        return Err(MpcError::Reference {
            interval,
            reason: format!("no convergence in {} iterations", report.iterations),
        });
    }
    let kkt = problem.assemble_hessian(&report.solution);
    let affinity = compute_affinity(&kkt, &system.admittance(), &problem.layout);
    let partition = spectral_partition(&affinity, system, k, seed)?;
    Ok((partition, affinity))
}

fn solve_step(
    problem: &mut HorizonProblem,
    solver: Solver,
    partition: Option<&Partition>,
    y0: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<StepReport, String> {
    match solver {
        Solver::Centralized => solve_centralized(problem, y0, tol, max_iter)
            .map(StepReport::Centralized)
            .map_err(|e: SolveError| e.to_string()),
        Solver::Distributed(method) => {
            let part = partition.expect("distributed runs carry a partition");
            solve_distributed(problem, part, method, y0, tol, max_iter)
                .map(StepReport::Distributed)
                .map_err(|e: DistributedError| e.to_string())
        }
    }
}

pub fn run_mpc(
    system: Arc<PowerSystem>,
    series: &TimeSeries,
    config: &MpcConfig,
) -> Result<MpcResult, MpcError> {
    config.validate(series)?;
    let e_init: Vec<f64> = system.storages.iter().map(|s| s.e_init).collect();
    let partition = match (config.solver, &config.partition) {
        (Solver::Centralized, p) => p.clone(),
        (Solver::Distributed(_), Some(p)) => Some(p.clone()),
        (Solver::Distributed(_), None) => Some(
            reference_partition(
                &system,
                series,
                config.reference_interval,
                &e_init,
                config.regions,
                config.seed,
                config.tol,
                config.max_iter,
            )?
            .0,
        ),
    };

    let mut result = MpcResult {
        horizon: config.horizon,
        solver: config.solver,
        partition,
        per_step: Vec::with_capacity(config.steps),
        schedule: Vec::with_capacity(config.steps),
        initial_energy: e_init.clone(),
        total_cost: 0.0,
        total_ramping: 0.0,
    };
    let mut energy = e_init;
    let mut previous: Option<Vec<f64>> = None;
    for i in 0..config.steps {
        let interval = config.start_step + i;
        let mut problem =
            HorizonProblem::new(system.clone(), series, interval, config.horizon, &energy)?;
        let y0 = warm_start(&mut problem, previous.as_deref());
        let outcome = solve_step(
            &mut problem,
            config.solver,
            result.partition.as_ref(),
            &y0,
            config.tol,
            config.max_iter,
        );
        let report = match outcome {
            Ok(r) if r.converged() => r,
            Ok(r) => {
                let reason = r.failure();
                result.per_step.push(r);
                return Err(fail(result, interval, reason, &system));
            }
            Err(reason) => return Err(fail(result, interval, reason, &system)),
        };

        let lay = &problem.layout;
        let y = report.solution();
        let p_in: Vec<f64> = (0..lay.n_storage).map(|d| y[lay.charge(d, 0)]).collect();
        let p_out: Vec<f64> = (0..lay.n_storage).map(|d| y[lay.discharge(d, 0)]).collect();
        energy = system
            .storages
            .iter()
            .zip(&energy)
            .enumerate()
            .map(|(d, (s, &e))| s.advance(e, p_in[d], p_out[d]))
            .collect();
        result.schedule.push(AppliedStep {
            interval,
            p_gen: (0..lay.n_gen).map(|k| y[lay.p_gen(k, 0)]).collect(),
            q_gen: (0..lay.n_gen).map(|k| y[lay.q_gen(k, 0)]).collect(),
            p_in,
            p_out,
            energy: energy.clone(),
        });
        log::debug!(
            "step {interval}: {} iterations, objective {:.6}",
            report.iterations(),
            report.objective()
        );
        previous = Some(report.solution().to_vec());
        result.per_step.push(report);
    }
    result.total_cost = total_cost(&result.schedule, &system);
    result.total_ramping = total_ramping(&result.schedule);
    Ok(result)
}

/// Barrier parameter a warm-started solve begins from.
pub const WARM_START_MU: f64 = 1e-2;
const WARM_START_SLACK_FLOOR: f64 = 1e-2;

/// Shifted previous solution when there is one, flat start otherwise.
///
/// Primal values and equality multipliers carry over. The barrier restarts
/// at [`WARM_START_MU`] rather than its cold value, with each slack set to
/// `max(h(x), 1e-2)` so it agrees with the shifted point on inactive
/// constraints and `z = -mu/s`. Resetting slacks to half the bound width
/// instead was no better than a flat start: it breaks `h(x) = s` on the
/// constraints that were active.
pub fn warm_start(problem: &mut HorizonProblem, previous: Option<&[f64]>) -> Vec<f64> {
    let Some(prev) = previous else {
        return problem.flat_start();
    };
    problem.barrier_mu = WARM_START_MU;
    let mut y = problem.shifted_start(prev);
    for ineq in &problem.layout.inequalities {
        let s = problem
            .inequality_value(&y, ineq)
            .max(WARM_START_SLACK_FLOOR);
        y[ineq.slack] = s;
        y[ineq.multiplier] = -WARM_START_MU / s;
    }
    y
}

/// One solver configuration in a benchmark.
#[derive(Debug, Clone)]
pub struct BenchmarkEntry {
    pub label: String,
    pub solver: Solver,
    pub partition: Option<Partition>,
}

/// Result of one configuration on one step's problem.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepOutcome {
    pub interval: usize,
    pub converged: bool,
    pub iterations: usize,
    pub convergence_time: f64,
    pub objective: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Solve every step of a centralized receding-horizon run with each entry.
///
/// The centralized run fixes the operating trajectory (starting energy and
/// warm start of every step), so all entries face identical problems and a
/// failing entry is recorded instead of aborting. Returns one outcome list
/// per entry, in entry order.
pub fn benchmark_steps(
    system: Arc<PowerSystem>,
    series: &TimeSeries,
    config: &MpcConfig,
    entries: &[BenchmarkEntry],
    timing: Timing,
) -> Result<Vec<Vec<StepOutcome>>, MpcError> {
    let mut central_cfg = config.clone();
    central_cfg.solver = Solver::Centralized;
    let trajectory = run_mpc(system.clone(), series, &central_cfg)?;
    let mut out = vec![Vec::with_capacity(config.steps); entries.len()];
    let mut energy = trajectory.initial_energy.clone();
    let mut previous: Option<&[f64]> = None;
    for (i, applied) in trajectory.schedule.iter().enumerate() {
        let interval = applied.interval;
        let mut base =
            HorizonProblem::new(system.clone(), series, interval, config.horizon, &energy)?;
        let y0 = warm_start(&mut base, previous);
        for (e, entry) in entries.iter().enumerate() {
            let outcome = match entry.solver {
                // the trajectory already holds this solve
                Solver::Centralized => Ok(trajectory.per_step[i].clone()),
                solver => {
                    let mut problem = base.clone();
                    solve_step(
                        &mut problem,
                        solver,
                        entry.partition.as_ref(),
                        &y0,
                        config.tol,
                        config.max_iter,
                    )
                }
            };
            out[e].push(match outcome {
                Ok(rep) => StepOutcome {
                    interval,
                    converged: rep.converged(),
                    iterations: rep.iterations(),
                    convergence_time: rep.convergence_time(timing),
                    objective: rep.objective(),
                    error: (!rep.converged()).then(|| rep.failure()),
                },
                Err(reason) => {
                    log::warn!("{} at step {interval}: {reason}", entry.label);
                    StepOutcome {
                        interval,
                        converged: false,
                        iterations: 0,
                        convergence_time: f64::NAN,
                        objective: f64::NAN,
                        error: Some(reason),
                    }
                }
            });
        }
        energy = applied.energy.clone();
        previous = Some(trajectory.per_step[i].solution());
    }
    Ok(out)
}

fn fail(mut partial: MpcResult, step: usize, reason: String, system: &PowerSystem) -> MpcError {
    partial.total_cost = total_cost(&partial.schedule, system);
    partial.total_ramping = total_ramping(&partial.schedule);
    MpcError::Step {
        step,
        reason,
        partial: Box::new(partial),
    }
}
