use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use gridmpc::cases;
use gridmpc::central::solve_centralized;
use gridmpc::formulation::HorizonProblem;
use gridmpc::mpc::{
    benchmark_steps, reference_partition, run_mpc, BenchmarkEntry, MpcConfig, MpcError, MpcResult,
    Solver, StepReport,
};
use gridmpc::ocd::solve_distributed;
use gridmpc::partition::{AffinityMatrix, Partition};
use gridmpc::system::{PowerSystem, TimeSeries};

use crate::config::{ExperimentConfig, PartitionSource, PartitionSpec};
use crate::report::{self, write_atomic, CompareRow};

/// Loaded inputs plus the partitions resolved so far.
struct Inputs {
    cfg: ExperimentConfig,
    system: Arc<PowerSystem>,
    series: TimeSeries,
    computed: Option<(Partition, AffinityMatrix)>,
}

impl Inputs {
    fn load(cfg: ExperimentConfig) -> Result<Self> {
        let system = Arc::new(cfg.load_system()?);
        let series = cfg.load_series(&system)?;
        Ok(Self {
            cfg,
            system,
            series,
            computed: None,
        })
    }

    fn e_init(&self) -> Vec<f64> {
        self.system.storages.iter().map(|s| s.e_init).collect()
    }

    fn spectral(&mut self) -> Result<&(Partition, AffinityMatrix)> {
        if self.computed.is_none() {
            let cfg = &self.cfg;
            let computed = reference_partition(
                &self.system,
                &self.series,
                cfg.ref_interval,
                &self.e_init(),
                cfg.regions,
                cfg.seed,
                cfg.tol,
                cfg.max_iter,
            )?;
            self.computed = Some(computed);
        }
        Ok(self.computed.as_ref().unwrap())
    }

    fn partition(&mut self, spec: &PartitionSpec) -> Result<Partition> {
        match &spec.source {
            PartitionSource::Computed => Ok(self.spectral()?.0.clone()),
            PartitionSource::Committed => {
                let Some(name) = self.cfg.bundled_name() else {
                    bail!("committed partitions exist only for the bundled cases");
                };
                cases::arbitrary_partition(name, self.cfg.regions).with_context(|| {
                    format!(
                        "no committed partition of {name} into {} regions",
                        self.cfg.regions
                    )
                })
            }
            PartitionSource::File(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                Partition::from_json(&text, &self.system)
                    .with_context(|| format!("parsing {}", path.display()))
            }
        }
    }

    /// One entry per centralized method and per (distributed method, partition).
    fn entries(&mut self) -> Result<Vec<(String, String, BenchmarkEntry)>> {
        let mut out = Vec::new();
        for &solver in &self.cfg.methods.clone() {
            match solver {
                Solver::Centralized => out.push((
                    solver.to_string(),
                    "-".to_string(),
                    BenchmarkEntry {
                        label: solver.to_string(),
                        solver,
                        partition: None,
                    },
                )),
                Solver::Distributed(_) => {
                    for spec in &self.cfg.partitions.clone() {
                        let partition = self.partition(spec)?;
                        out.push((
                            solver.to_string(),
                            spec.name.clone(),
                            BenchmarkEntry {
                                label: format!("{solver}_{}", spec.name),
                                solver,
                                partition: Some(partition),
                            },
                        ));
                    }
                }
            }
        }
        Ok(out)
    }

    fn mpc_config(&self, horizon: usize, entry: &BenchmarkEntry) -> MpcConfig {
        let cfg = &self.cfg;
        let mut m = MpcConfig::new(horizon, entry.solver, cfg.steps);
        m.partition = entry.partition.clone();
        m.regions = cfg.regions;
        m.seed = cfg.seed;
        m.reference_interval = cfg.ref_interval;
        m.start_step = cfg.start;
        m.tol = cfg.tol;
        m.max_iter = cfg.max_iter;
        m
    }
}

/// Every command returns whether all requested solves converged.
pub fn solve(cfg: ExperimentConfig) -> Result<bool> {
    let mut ctx = Inputs::load(cfg)?;
    let entries = ctx.entries()?;
    let mut table = format!("{}\n", report::SOLVE_HEADER);
    let mut all = true;
    for &n in &ctx.cfg.horizons.clone() {
        for (method, part_name, entry) in &entries {
            let mut problem = HorizonProblem::new(
                ctx.system.clone(),
                &ctx.series,
                ctx.cfg.start,
                n,
                &ctx.e_init(),
            )?;
            let y0 = problem.flat_start();
            let (report, scalars) = match entry.solver {
                Solver::Centralized => {
                    let r = solve_centralized(&mut problem, &y0, ctx.cfg.tol, ctx.cfg.max_iter)?;
                    (StepReport::Centralized(r), 0)
                }
                Solver::Distributed(m) => {
                    let part = entry.partition.as_ref().unwrap();
                    let r = solve_distributed(
                        &mut problem,
                        part,
                        m,
                        &y0,
                        ctx.cfg.tol,
                        ctx.cfg.max_iter,
                    )?;
                    let path = ctx
                        .cfg
                        .output_dir
                        .join(format!("trace_{}_N{n}.csv", entry.label));
                    write_atomic(&path, &r.trace_csv(ctx.cfg.timing))?;
                    let s = r.total_scalars_exchanged;
                    (StepReport::Distributed(r), s)
                }
            };
            all &= report.converged();
            let residual = match &report {
                StepReport::Centralized(r) => r.residual_norm,
                StepReport::Distributed(r) => r.residual_norm,
            };
            writeln!(
                table,
                "{n},{method},{part_name},{},{},{},{:e},{:e},{scalars}",
                report.converged(),
                report.iterations(),
                report.objective(),
                residual,
                report.convergence_time(ctx.cfg.timing)
            )
            .unwrap();
            println!(
                "N={n} {method:<12} {part_name:<10} converged={} iterations={} objective={:.6}",
                report.converged(),
                report.iterations(),
                report.objective()
            );
        }
    }
    write_atomic(&ctx.cfg.output_dir.join("solve.csv"), &table)?;
    Ok(all)
}

pub fn partition(cfg: ExperimentConfig) -> Result<bool> {
    let mut ctx = Inputs::load(cfg)?;
    let nb = ctx.system.n_buses();
    if ctx.cfg.regions > nb {
        bail!("cannot split {nb} buses into {} regions", ctx.cfg.regions);
    }
    if ctx.cfg.regions == nb {
        log::warn!("K equals the number of buses: every region is a single bus");
    }
    let (part, affinity) = ctx.spectral()?.clone();
    let dir = &ctx.cfg.output_dir;
    write_atomic(&dir.join("partition.json"), &part.to_json())?;
    write_atomic(&dir.join("affinity.csv"), &affinity.to_csv(&ctx.system))?;
    for (r, members) in part.members().iter().enumerate() {
        println!("region {r}: buses {members:?}");
    }
    Ok(true)
}

pub fn compare(cfg: ExperimentConfig) -> Result<bool> {
    let mut ctx = Inputs::load(cfg)?;
    let entries = ctx.entries()?;
    if entries.len() < 2 {
        log::warn!("only one configuration to compare");
    }
    let bench: Vec<BenchmarkEntry> = entries.iter().map(|e| e.2.clone()).collect();
    let mut rows = Vec::new();
    let mut steps_csv = format!("{}\n", report::COMPARE_STEPS_HEADER);
    for &n in &ctx.cfg.horizons.clone() {
        let mcfg = ctx.mpc_config(n, &bench[0]);
        let outcomes = benchmark_steps(
            ctx.system.clone(),
            &ctx.series,
            &mcfg,
            &bench,
            ctx.cfg.timing,
        )?;
        for ((method, part, _), o) in entries.iter().zip(&outcomes) {
            rows.push(CompareRow::new(n, method, part, o));
            report::compare_steps_csv(&mut steps_csv, n, method, part, o);
        }
    }
    let dir = &ctx.cfg.output_dir;
    write_atomic(&dir.join("compare.csv"), &report::compare_csv(&rows))?;
    write_atomic(&dir.join("compare_steps.csv"), &steps_csv)?;
    print!("{}", report::compare_text(&rows));
    Ok(rows.iter().all(CompareRow::all_converged))
}

#[derive(Serialize)]
struct RunSummary {
    horizon: usize,
    method: String,
    partition: String,
    steps_requested: usize,
    steps_completed: usize,
    completed: bool,
    total_cost: f64,
    total_ramping: f64,
    total_iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

pub fn mpc(cfg: ExperimentConfig) -> Result<bool> {
    let mut ctx = Inputs::load(cfg)?;
    let entries = ctx.entries()?;
    let mut runs = Vec::new();
    let dir = ctx.cfg.output_dir.clone();
    for &n in &ctx.cfg.horizons.clone() {
        for (method, part, entry) in &entries {
            let mcfg = ctx.mpc_config(n, entry);
            let (result, error): (MpcResult, Option<String>) =
                match run_mpc(ctx.system.clone(), &ctx.series, &mcfg) {
                    Ok(r) => (r, None),
                    Err(MpcError::Step {
                        step,
                        reason,
                        partial,
                    }) => {
                        log::warn!("{} N={n}: step {step} failed: {reason}", entry.label);
                        (*partial, Some(format!("step {step}: {reason}")))
                    }
                    Err(e) => return Err(e.into()),
                };
            let stem = format!("{}_N{n}", entry.label);
            write_atomic(
                &dir.join(format!("schedule_{stem}.csv")),
                &result.schedule_csv(),
            )?;
            write_atomic(
                &dir.join(format!("timing_{stem}.csv")),
                &result.timing_csv(ctx.cfg.timing),
            )?;
            println!(
                "N={n} {method:<12} {part:<10} cost={:.4} ramping={:.4} steps={}/{}",
                result.total_cost,
                result.total_ramping,
                result.schedule.len(),
                ctx.cfg.steps
            );
            runs.push(RunSummary {
                horizon: n,
                method: method.clone(),
                partition: part.clone(),
                steps_requested: ctx.cfg.steps,
                steps_completed: result.schedule.len(),
                completed: error.is_none(),
                total_cost: result.total_cost,
                total_ramping: result.total_ramping,
                total_iterations: result.per_step.iter().map(|r| r.iterations()).sum(),
                error,
            });
        }
    }
    let mut doc = BTreeMap::new();
    doc.insert("runs", &runs);
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    write_atomic(&dir.join("summary.json"), &text)?;
    Ok(runs.iter().all(|r| r.completed))
}
