//! Distributed Newton steps: optimality condition decomposition (OCD) and its
//! corrected variant (OCD-C).
//!
//! The KKT matrix is split by region into `H = D + O`, `D` holding the
//! diagonal blocks `H_kk`. OCD takes `Δy_k = -H_kk⁻¹ KKT_k`; OCD-C adds the
//! first-order correction `r̂_k = Σ_m H_km H_mm⁻¹ KKT_m` computed by the
//! neighbors, giving `Δy_k = H_kk⁻¹ (-KKT_k + r̂_k)`. Every iteration is
//! synchronous: all regions see the same iterate, the step length is the
//! minimum of the regional fraction-to-boundary values, and the barrier
//! parameter moves globally.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::central::{
    is_converged, regularization_ladder, settle_barrier, SolveError, StepControl, REFINE_STEPS,
};
use crate::formulation::{HorizonProblem, Inequality, KktSystem};
use crate::partition::Partition;
use crate::sparse::{CscMatrix, FactorError, SparseLu};

/// Nominal machine speed used to turn operation counts into seconds.
pub const NOMINAL_FLOPS_PER_SECOND: f64 = 1e9;
// Transient growth of a few hundred percent to ~50× is common on badly cut
// partitions before the step cap settles, so only sustained blow-up counts.
const DIVERGENCE_FACTOR: f64 = 1e4;
const DIVERGENCE_PATIENCE: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Method {
    #[serde(rename = "ocd")]
    Ocd,
    #[serde(rename = "ocd-c")]
    OcdC,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ocd => "ocd",
            Method::OcdC => "ocd-c",
        })
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ocd" => Ok(Method::Ocd),
            "ocd-c" | "ocdc" => Ok(Method::OcdC),
            other => Err(format!("unknown method {other:?} (expected ocd or ocd-c)")),
        }
    }
}

/// How step times are reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Timing {
    /// Operation counts at [`NOMINAL_FLOPS_PER_SECOND`]; reproducible.
    #[default]
    Ops,
    /// Measured wall-clock time.
    Wall,
}

impl FromStr for Timing {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ops" => Ok(Timing::Ops),
            "wall" => Ok(Timing::Wall),
            other => Err(format!(
                "unknown timing mode {other:?} (expected ops or wall)"
            )),
        }
    }
}

#[derive(Debug, Error)]
pub enum DistributedError {
    #[error("iterate has length {got}, layout needs {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("partition does not cover the system: {0}")]
    Partition(String),
    #[error("region {region}: {source}")]
    Region {
        region: usize,
        #[source]
        source: SolveError,
    },
}

/// Ownership of iterate positions by region.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMap {
    /// Sorted variable indices of each region.
    pub vars: Vec<Vec<usize>>,
    /// Region of every variable.
    pub region_of_var: Vec<usize>,
    /// Inequalities whose slack lives in each region.
    pub inequalities: Vec<Vec<Inequality>>,
}

impl RegionMap {
    pub fn new(problem: &HorizonProblem, partition: &Partition) -> Result<Self, DistributedError> {
        let sys = &problem.system;
        let mut labels = Vec::with_capacity(sys.n_buses());
        for bus in &sys.buses {
            match partition.assignments().get(&bus.id) {
                Some(&r) => labels.push(r),
                None => {
                    return Err(DistributedError::Partition(format!(
                        "bus {} has no region",
                        bus.id
                    )))
                }
            }
        }
        let k = partition.k();
        let mut vars = vec![Vec::new(); k];
        let mut region_of_var = Vec::with_capacity(problem.dim());
        for i in 0..problem.dim() {
            let r = labels[problem.layout.bus_of(i)];
            vars[r].push(i);
            region_of_var.push(r);
        }
        let mut inequalities = vec![Vec::new(); k];
        for ineq in &problem.layout.inequalities {
            inequalities[region_of_var[ineq.slack]].push(*ineq);
        }
        Ok(RegionMap {
            vars,
            region_of_var,
            inequalities,
        })
    }

    pub fn k(&self) -> usize {
        self.vars.len()
    }
}

/// Region-local view of one KKT system.
#[derive(Debug, Clone)]
pub struct RegionSubproblem {
    pub region: usize,
    pub var_indices: Vec<usize>,
    pub local_block: CscMatrix,
    pub local_residual: Vec<f64>,
    /// `(m, H_km)` for every region `m` with a structurally nonzero coupling;
    /// rows index `y_k`, columns index `y_m`, both local.
    pub neighbor_coupling: Vec<(usize, CscMatrix)>,
}

pub fn split_kkt_blocks(kkt: &KktSystem, regions: &RegionMap) -> Vec<RegionSubproblem> {
    let k = regions.k();
    (0..k)
        .map(|r| {
            let rows = &regions.vars[r];
            let neighbor_coupling = (0..k)
                .filter(|&m| m != r)
                .map(|m| (m, kkt.hessian.submatrix(rows, &regions.vars[m])))
                .filter(|(_, h)| h.nnz() > 0)
                .collect();
            RegionSubproblem {
                region: r,
                var_indices: rows.clone(),
                local_block: kkt.hessian.submatrix(rows, rows),
                local_residual: rows.iter().map(|&i| kkt.residual[i]).collect(),
                neighbor_coupling,
            }
        })
        .collect()
}

/// Factorization of one `H_kk`, reusable for several right-hand sides.
#[derive(Debug, Clone)]
pub struct BlockFactor {
    lu: SparseLu,
    matrix: CscMatrix,
    pub delta: f64,
    pub flops: u64,
}

impl BlockFactor {
    /// Factor `H_kk` with the same regularization ladder as the centralized
    /// solver (`primal` flags the positions that may be regularized) and
    /// return it together with `w_k = H_kk⁻¹ KKT_k`.
    pub fn new(
        sub: &RegionSubproblem,
        primal: &[bool],
    ) -> Result<(Self, Vec<f64>), DistributedError> {
        let mut last = None;
        for delta in regularization_ladder() {
            let matrix = if delta == 0.0 {
                sub.local_block.clone()
            } else {
                let d: Vec<f64> = primal
                    .iter()
                    .map(|&p| if p { delta } else { 0.0 })
                    .collect();
                sub.local_block.add_diagonal(&d)
            };
            match SparseLu::factor(&matrix) {
                Ok(lu) => {
                    let flops = lu.factor_flops;
                    let factor = BlockFactor {
                        lu,
                        matrix,
                        delta,
                        flops,
                    };
                    let (w, f) = factor.solve(&sub.local_residual);
                    if w.iter().all(|v| v.is_finite()) {
                        return Ok((
                            BlockFactor {
                                flops: flops + f,
                                ..factor
                            },
                            w,
                        ));
                    }
                    last = Some(FactorError::Singular { column: 0 });
                }
                Err(e) => last = Some(e),
            }
        }
        Err(DistributedError::Region {
            region: sub.region,
            source: SolveError::Singular {
                delta: 1e-2,
                source: last.expect("ladder is non-empty"),
            },
        })
    }

    /// `H_kk⁻¹ b` and its operation count.
    pub fn solve(&self, b: &[f64]) -> (Vec<f64>, u64) {
        self.lu.solve_refined(&self.matrix, b, REFINE_STEPS)
    }
}

/// OCD direction `-H_kk⁻¹ KKT_k`.
pub fn ocd_step(sub: &RegionSubproblem, factor: &BlockFactor) -> Vec<f64> {
    factor
        .solve(&sub.local_residual)
        .0
        .iter()
        .map(|v| -v)
        .collect()
}

/// `H_km H_mm⁻¹ KKT_m` for every region `k` coupled to `m`, computed by `m`
/// from `w_m = H_mm⁻¹ KKT_m`. Returns `(k, summand)` pairs; summands are
/// dense in `y_k` local coordinates.
pub fn correction_summands(
    subs: &[RegionSubproblem],
    m: usize,
    w_m: &[f64],
) -> Vec<(usize, Vec<f64>)> {
    subs.iter()
        .filter(|s| s.region != m)
        .filter_map(|s| {
            s.neighbor_coupling
                .iter()
                .find(|(n, _)| *n == m)
                .map(|(_, h_km)| (s.region, h_km.mul_vec(w_m)))
        })
        .collect()
}

/// `r̂_k = Σ_m H_km H_mm⁻¹ KKT_m` given the solved `w_m` of every region.
pub fn correction_term(subs: &[RegionSubproblem], k: usize, w: &[Vec<f64>]) -> Vec<f64> {
    let mut r = vec![0.0; subs[k].var_indices.len()];
    for (m, h_km) in &subs[k].neighbor_coupling {
        for (ri, v) in r.iter_mut().zip(h_km.mul_vec(&w[*m])) {
            *ri += v;
        }
    }
    r
}

/// OCD-C direction `H_kk⁻¹ (-KKT_k + r̂_k)`.
pub fn ocdc_step(sub: &RegionSubproblem, factor: &BlockFactor, r_hat: &[f64]) -> Vec<f64> {
    let rhs: Vec<f64> = sub
        .local_residual
        .iter()
        .zip(r_hat)
        .map(|(k, r)| -k + r)
        .collect();
    factor.solve(&rhs).0
}

/// What region `from_region` sends to `to_region` in one iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExchangeMessage {
    pub from_region: usize,
    pub to_region: usize,
    pub iteration: usize,
    /// `(global index, value)` of the sender's variables the receiver's
    /// equations depend on.
    pub boundary_values: Vec<(usize, f64)>,
    /// `(global index, value)` of `H_km H_mm⁻¹ KKT_m`; empty for OCD.
    pub correction_summand: Vec<(usize, f64)>,
    pub payload_scalars: usize,
}

/// Messages of one iteration. Boundary values are the structurally nonzero
/// columns of `H_km`; the correction summand is carried on the structurally
/// nonzero rows of `H_km`; one extra scalar carries the sender's step bound.
pub fn exchange_messages(
    subs: &[RegionSubproblem],
    iteration: usize,
    y: &[f64],
    summands: Option<&[Vec<(usize, Vec<f64>)>]>,
) -> Vec<ExchangeMessage> {
    let mut out = Vec::new();
    for sub in subs {
        let k = sub.region;
        for (m, h_km) in &sub.neighbor_coupling {
            let sender = &subs[*m];
            let boundary_values: Vec<(usize, f64)> = h_km
                .nonzero_cols()
                .into_iter()
                .map(|c| {
                    let g = sender.var_indices[c];
                    (g, y[g])
                })
                .collect();
            let correction_summand: Vec<(usize, f64)> = match summands {
                Some(all) => {
                    let dense = &all[*m]
                        .iter()
                        .find(|(to, _)| *to == k)
                        .expect("summand for every coupled pair")
                        .1;
                    h_km.nonzero_rows()
                        .into_iter()
                        .map(|r| (sub.var_indices[r], dense[r]))
                        .collect()
                }
                None => Vec::new(),
            };
            let payload_scalars = boundary_values.len() + correction_summand.len() + 1;
            out.push(ExchangeMessage {
                from_region: *m,
                to_region: k,
                iteration,
                boundary_values,
                correction_summand,
                payload_scalars,
            });
        }
    }
    out.sort_by_key(|m| (m.from_region, m.to_region));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIterations,
    Diverged,
}

/// One line of the iteration trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub region: usize,
    pub residual_norm: f64,
    pub step_seconds: f64,
    pub step_flops: u64,
    pub scalars_sent: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct DistributedReport {
    pub method: Method,
    pub regions: usize,
    pub converged: bool,
    pub termination: Termination,
    pub iterations: usize,
    #[serde(skip)]
    pub solution: Vec<f64>,
    pub objective: f64,
    pub residual_norm: f64,
    pub final_mu: f64,
    /// Wall time of each region's local work, per iteration (`t_k` samples).
    pub per_region_step_seconds: Vec<Vec<f64>>,
    /// Operation count of the same work.
    pub per_region_step_flops: Vec<Vec<u64>>,
    pub total_scalars_exchanged: usize,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
}

impl DistributedReport {
    /// `t = n · max_k median(t_k)` in the requested timing mode.
    pub fn convergence_time(&self, timing: Timing) -> f64 {
        convergence_time(self.iterations, &self.step_seconds(timing))
    }

    /// Per-region step times in the requested timing mode.
    pub fn step_seconds(&self, timing: Timing) -> Vec<Vec<f64>> {
        match timing {
            Timing::Wall => self.per_region_step_seconds.clone(),
            Timing::Ops => self
                .per_region_step_flops
                .iter()
                .map(|f| f.iter().map(|&x| flops_to_seconds(x)).collect())
                .collect(),
        }
    }

    /// `iteration,region,residual_norm,step_seconds,scalars_sent`
    pub fn trace_csv(&self, timing: Timing) -> String {
        let mut out = String::from("iteration,region,residual_norm,step_seconds,scalars_sent\n");
        for row in &self.trace {
            let secs = match timing {
                Timing::Wall => row.step_seconds,
                Timing::Ops => flops_to_seconds(row.step_flops),
            };
            out.push_str(&format!(
                "{},{},{:e},{:e},{}\n",
                row.iteration, row.region, row.residual_norm, secs, row.scalars_sent
            ));
        }
        out
    }
}

pub fn flops_to_seconds(flops: u64) -> f64 {
    flops as f64 / NOMINAL_FLOPS_PER_SECOND
}

pub fn median(samples: &[f64]) -> f64 {
    assert!(!samples.is_empty(), "median of no samples");
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// `n` times the largest per-region median step time. Regions without
/// samples are ignored; with no samples at all the result is 0.
pub fn convergence_time(n: usize, samples: &[Vec<f64>]) -> f64 {
    let worst = samples
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| median(s))
        .fold(0.0, f64::max);
    n as f64 * worst
}

struct RegionWork {
    dy: Vec<f64>,
    seconds: f64,
    flops: u64,
}

/// Distributed solve of `problem` with one subproblem per region.
pub fn solve_distributed(
    problem: &mut HorizonProblem,
    partition: &Partition,
    method: Method,
    y0: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<DistributedReport, DistributedError> {
    if y0.len() != problem.dim() {
        return Err(DistributedError::Dimension {
            expected: problem.dim(),
            got: y0.len(),
        });
    }
    let regions = RegionMap::new(problem, partition)?;
    let k = regions.k();
    let mask = problem.layout.primal_mask();
    let primal: Vec<Vec<bool>> = regions
        .vars
        .iter()
        .map(|v| v.iter().map(|&i| mask[i]).collect())
        .collect();

    let mut y = y0.to_vec();
    let mut seconds = vec![Vec::new(); k];
    let mut flops = vec![Vec::new(); k];
    let mut trace = Vec::new();
    let mut total_scalars = 0;
    let (_, mut norm) = settle_barrier(problem, &y);
    let initial = norm;
    let mut control = StepControl::new();
    let mut above = 0;
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;
    loop {
        if is_converged(problem, norm, tol) {
            termination = Termination::Converged;
            break;
        }
        if iterations >= max_iter {
            break;
        }
        iterations += 1;
        let kkt = problem.assemble_kkt(&y);
        let subs = split_kkt_blocks(&kkt, &regions);

        // phase 1: every region factors its block and solves with its own residual
        let phase1: Vec<Result<(BlockFactor, Vec<f64>, f64, u64), DistributedError>> = subs
            .par_iter()
            .map(|sub| {
                let tick = Instant::now();
                let (factor, w) = BlockFactor::new(sub, &primal[sub.region])?;
                let fl = factor.flops;
                Ok((factor, w, tick.elapsed().as_secs_f64(), fl))
            })
            .collect();
        let mut factors = Vec::with_capacity(k);
        let mut w = Vec::with_capacity(k);
        let mut t1 = Vec::with_capacity(k);
        for r in phase1 {
            let (f, wk, s, fl) = r?;
            factors.push(f);
            w.push(wk);
            t1.push((s, fl));
        }

        // phase 2: corrections (OCD-C) and local directions
        let summands: Option<Vec<Vec<(usize, Vec<f64>)>>> = match method {
            Method::Ocd => None,
            Method::OcdC => Some(
                (0..k)
                    .into_par_iter()
                    .map(|m| correction_summands(&subs, m, &w[m]))
                    .collect(),
            ),
        };
        let work: Vec<RegionWork> = (0..k)
            .into_par_iter()
            .map(|r| {
                let tick = Instant::now();
                let sub = &subs[r];
                let (dy, mut fl) = match method {
                    Method::Ocd => (
                        w[r].iter().map(|v| -v).collect(),
                        sub.var_indices.len() as u64,
                    ),
                    Method::OcdC if sub.neighbor_coupling.is_empty() => (
                        w[r].iter().map(|v| -v).collect(),
                        sub.var_indices.len() as u64,
                    ),
                    Method::OcdC => {
                        let mut r_hat = vec![0.0; sub.var_indices.len()];
                        let all = summands.as_ref().expect("OCD-C summands");
                        for (m, _) in &sub.neighbor_coupling {
                            let s = &all[*m].iter().find(|(to, _)| *to == r).unwrap().1;
                            for (a, b) in r_hat.iter_mut().zip(s) {
                                *a += b;
                            }
                        }
                        let rhs: Vec<f64> = sub
                            .local_residual
                            .iter()
                            .zip(&r_hat)
                            .map(|(kk, rh)| -kk + rh)
                            .collect();
                        factors[r].solve(&rhs)
                    }
                };
                // the summands this region computed for its neighbors
                if method == Method::OcdC {
                    for other in subs.iter().filter(|s| s.region != r) {
                        if let Some((_, h)) = other.neighbor_coupling.iter().find(|(m, _)| *m == r)
                        {
                            fl += 2 * h.nnz() as u64;
                        }
                    }
                }
                RegionWork {
                    dy,
                    seconds: tick.elapsed().as_secs_f64(),
                    flops: fl,
                }
            })
            .collect();

        let mut dy = vec![0.0; y.len()];
        let mut alpha: f64 = 1.0;
        for (r, wk) in work.iter().enumerate() {
            for (&g, &d) in regions.vars[r].iter().zip(&wk.dy) {
                dy[g] = d;
            }
        }
        for r in 0..k {
            alpha = alpha.min(problem.fraction_to_boundary(&y, &dy, &regions.inequalities[r]));
        }
        let alpha = alpha.min(control.cap(&dy, problem.barrier_mu));
        for (yi, di) in y.iter_mut().zip(&dy) {
            *yi += alpha * di;
        }
        control.taken(dy, alpha);

        let messages = exchange_messages(&subs, iterations, &kkt.iterate, summands.as_deref());
        let mut sent = vec![0usize; k];
        for m in &messages {
            sent[m.from_region] += m.payload_scalars;
        }
        total_scalars += sent.iter().sum::<usize>();

        norm = settle_barrier(problem, &y).1;
        for r in 0..k {
            let s = t1[r].0 + work[r].seconds;
            let f = t1[r].1 + work[r].flops + 2 * regions.vars[r].len() as u64;
            seconds[r].push(s);
            flops[r].push(f);
            trace.push(TraceRow {
                iteration: iterations,
                region: r,
                residual_norm: norm,
                step_seconds: s,
                step_flops: f,
                scalars_sent: sent[r],
            });
        }
        log::trace!(
            "{method} iteration {iterations}: residual {norm:.3e}, mu {:.1e}, alpha {alpha:.3}",
            problem.barrier_mu
        );

        if norm > DIVERGENCE_FACTOR * initial || !norm.is_finite() {
            above += 1;
            if above >= DIVERGENCE_PATIENCE || !norm.is_finite() {
                log::warn!(
                    "{method} diverged at iteration {iterations}: residual {norm:.3e} vs initial {initial:.3e}"
                );
                termination = Termination::Diverged;
                break;
            }
        } else {
            above = 0;
        }
    }
    if termination == Termination::MaxIterations {
        log::warn!("{method} stopped after {max_iter} iterations, residual {norm:.3e}");
    }
    Ok(DistributedReport {
        method,
        regions: k,
        converged: termination == Termination::Converged,
        termination,
        iterations,
        objective: problem.eval_objective(&y),
        solution: y,
        residual_norm: norm,
        final_mu: problem.barrier_mu,
        per_region_step_seconds: seconds,
        per_region_step_flops: flops,
        total_scalars_exchanged: total_scalars,
        trace,
    })
}
