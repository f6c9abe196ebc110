//! Centralized Newton–Raphson on the full barrier KKT system.

use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::formulation::{HorizonProblem, KktSystem, MU_MIN};
use crate::sparse::{CscMatrix, FactorError, SparseLu};

/// Default stopping tolerance on the ∞-norm of the KKT residual.
pub const DEFAULT_TOL: f64 = 1e-3;
pub const DEFAULT_MAX_ITER: usize = 500;
/// The barrier must have been driven down to this level before stopping.
pub const MU_CONVERGED: f64 = 10.0 * MU_MIN;
/// Rounds of iterative refinement after each sparse solve.
pub(crate) const REFINE_STEPS: usize = 1;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("iterate has length {got}, layout needs {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("KKT matrix stayed singular after regularization up to {delta:e}: {source}")]
    Singular {
        delta: f64,
        #[source]
        source: FactorError,
    },
}

/// Outcome of a solve, filled in whether or not it converged.
#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub converged: bool,
    pub iterations: usize,
    #[serde(skip)]
    pub solution: Vec<f64>,
    pub objective: f64,
    pub residual_norm: f64,
    pub final_mu: f64,
    /// Wall time of factorization + solve + update, per iteration.
    pub per_iteration_seconds: Vec<f64>,
    /// Floating-point operations of the same work, per iteration.
    pub per_iteration_flops: Vec<u64>,
    pub wall_seconds: f64,
}

/// Newton direction plus bookkeeping.
#[derive(Debug, Clone)]
pub struct NewtonStep {
    pub dy: Vec<f64>,
    /// Regularization that made the matrix factorizable (0 if none was needed).
    pub delta: f64,
    pub flops: u64,
}

/// Regularization ladder tried after a failed factorization.
pub(crate) fn regularization_ladder() -> impl Iterator<Item = f64> {
    std::iter::once(0.0).chain((0..7).map(|k| 1e-8 * 10f64.powi(k)))
}

/// Solve `H dy = -rhs`, adding `delta` on the diagonal positions flagged in
/// `primal` whenever the plain factorization fails or produces non-finite
/// values.
pub fn solve_regularized(
    h: &CscMatrix,
    rhs: &[f64],
    primal: &[bool],
) -> Result<NewtonStep, SolveError> {
    let mut last = None;
    let mut flops = 0;
    for delta in regularization_ladder() {
        let m = if delta == 0.0 {
            h.clone()
        } else {
            let d: Vec<f64> = primal
                .iter()
                .map(|&p| if p { delta } else { 0.0 })
                .collect();
            h.add_diagonal(&d)
        };
        match SparseLu::factor(&m) {
            Ok(lu) => {
                let neg: Vec<f64> = rhs.iter().map(|v| -v).collect();
                let (dy, f) = lu.solve_refined(&m, &neg, REFINE_STEPS);
                flops += lu.factor_flops + f;
                if dy.iter().all(|v| v.is_finite()) {
                    return Ok(NewtonStep { dy, delta, flops });
                }
                last = Some(FactorError::Singular { column: 0 });
            }
            Err(e) => last = Some(e),
        }
        if delta > 0.0 {
            log::debug!("regularization {delta:e} insufficient");
        }
    }
    Err(SolveError::Singular {
        delta: 1e-2,
        source: last.expect("ladder is non-empty"),
    })
}

/// Newton direction for an assembled KKT system, regularizing every
/// position if needed.
pub fn newton_step(kkt: &KktSystem) -> Result<NewtonStep, SolveError> {
    let all = vec![true; kkt.residual.len()];
    solve_regularized(&kkt.hessian, &kkt.residual, &all)
}

/// ∞-norm of the KKT residual with the barrier rows in complementarity form
/// (each slack row multiplied by its slack: `-mu - s z`). This is the
/// quantity the stopping test and the barrier schedule look at.
pub fn kkt_norm(problem: &HorizonProblem, y: &[f64], residual: &[f64]) -> f64 {
    let mut norm = residual.iter().fold(0.0, |m: f64, x| m.max(x.abs()));
    if problem.layout.inequalities.is_empty() {
        return norm;
    }
    // recompute over the unscaled rows only
    let mut slack_row = vec![false; residual.len()];
    for ineq in &problem.layout.inequalities {
        slack_row[ineq.slack] = true;
    }
    norm = 0.0;
    for (i, r) in residual.iter().enumerate() {
        let v = if slack_row[i] { y[i] * r } else { *r };
        norm = norm.max(v.abs());
    }
    norm
}

/// Adaptive relaxation of the step length.
///
/// Near a fixed point the directions obey `dy' ≈ (I - α T) dy`, `T` being
/// the (approximate) inverse Newton matrix times the true one; for an exact
/// Newton step `T = I`. The Rayleigh quotient `g = <dy', dy> / <dy, dy>`
/// estimates the dominant eigenvalue of `I - α T`. A negative `g` means the
/// step overshoots along some mode with eigenvalue `λ = (1 - g) / α` of `T`,
/// and the cap becomes `2 / (1 + λ)`, the relaxation that balances that mode
/// against the well-resolved ones. A non-negative `g` lets the cap recover.
#[derive(Debug, Clone)]
pub(crate) struct StepControl {
    previous: Option<(Vec<f64>, f64)>,
    mu: f64,
    cap: f64,
}

impl StepControl {
    pub(crate) fn new() -> Self {
        StepControl {
            previous: None,
            mu: f64::NAN,
            cap: 1.0,
        }
    }

    /// Cap for the step along `dy` at barrier value `mu`, updating the
    /// estimate with it. A barrier change starts a new estimate.
    pub(crate) fn cap(&mut self, dy: &[f64], mu: f64) -> f64 {
        if mu != self.mu {
            self.mu = mu;
            self.previous = None;
        }
        if let Some((prev, alpha)) = &self.previous {
            let num: f64 = dy.iter().zip(prev).map(|(a, b)| a * b).sum();
            let den: f64 = prev.iter().map(|b| b * b).sum();
            let g = num / den;
            if g.is_finite() && den > 0.0 && *alpha > 0.0 {
                if g < 0.0 {
                    let lambda = (1.0 - g) / alpha;
                    self.cap = (2.0 / (1.0 + lambda)).clamp(MIN_STEP_CAP, 1.0);
                } else {
                    self.cap = (RECOVERY * self.cap).min(1.0);
                }
            }
        }
        self.cap
    }

    /// Record the step actually taken.
    pub(crate) fn taken(&mut self, dy: Vec<f64>, alpha: f64) {
        self.previous = Some((dy, alpha));
    }
}

const MIN_STEP_CAP: f64 = 1.0 / 64.0;
const RECOVERY: f64 = 1.25;

/// Evaluate the residual, lowering the barrier as long as the residual is
/// already small for the current value. Returns the residual norm.
pub(crate) fn settle_barrier(problem: &mut HorizonProblem, y: &[f64]) -> (Vec<f64>, f64) {
    loop {
        let r = problem.eval_kkt_residual(y);
        let norm = kkt_norm(problem, y, &r);
        let mu = problem.barrier_mu;
        if mu > MU_CONVERGED && problem.barrier_update(norm) < mu {
            continue;
        }
        return (r, norm);
    }
}

pub(crate) fn is_converged(problem: &HorizonProblem, norm: f64, tol: f64) -> bool {
    norm < tol && problem.barrier_mu <= MU_CONVERGED
}

/// Full Newton iteration with fraction-to-boundary damping.
pub fn solve_centralized(
    problem: &mut HorizonProblem,
    y0: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<SolveReport, SolveError> {
    if y0.len() != problem.dim() {
        return Err(SolveError::Dimension {
            expected: problem.dim(),
            got: y0.len(),
        });
    }
    let start = Instant::now();
    let primal = problem.layout.primal_mask();
    let mut y = y0.to_vec();
    let mut seconds = Vec::new();
    let mut flops = Vec::new();
    let (_, mut norm) = settle_barrier(problem, &y);
    let mut control = StepControl::new();
    while !is_converged(problem, norm, tol) && seconds.len() < max_iter {
        let kkt = problem.assemble_kkt(&y);
        let tick = Instant::now();
        let step = solve_regularized(&kkt.hessian, &kkt.residual, &primal)?;
        let alpha = problem
            .fraction_to_boundary(&y, &step.dy, &problem.layout.inequalities)
            .min(control.cap(&step.dy, problem.barrier_mu));
        for (yi, di) in y.iter_mut().zip(&step.dy) {
            *yi += alpha * di;
        }
        control.taken(step.dy, alpha);
        seconds.push(tick.elapsed().as_secs_f64());
        flops.push(step.flops + 2 * y.len() as u64);
        norm = settle_barrier(problem, &y).1;
        log::trace!(
            "iteration {}: residual {norm:.3e}, mu {:.1e}, alpha {alpha:.3}",
            seconds.len(),
            problem.barrier_mu
        );
    }
    let converged = is_converged(problem, norm, tol);
    if !converged {
        log::warn!("centralized solve stopped after {max_iter} iterations, residual {norm:.3e}");
    }
    Ok(SolveReport {
        converged,
        iterations: seconds.len(),
        objective: problem.eval_objective(&y),
        solution: y,
        residual_norm: norm,
        final_mu: problem.barrier_mu,
        per_iteration_seconds: seconds,
        per_iteration_flops: flops,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests;
