//! The stacked N-step AC OPF with storage and must-take wind.
//!
//! Inequalities `h(x) >= 0` are turned into equalities `h(x) - s = 0` with
//! slacks kept positive by a logarithmic barrier. The resulting barrier
//! Lagrangian
//!
//! ```text
//! L(y) = f(x) - mu * sum(ln s) + lambda' c(x) + z' (h(x) - s)
//! ```
//!
//! is a smooth function of the full iterate `y = (x, λ, s, z)`. Its gradient
//! is the KKT residual and its Hessian is the Newton matrix used by every
//! solver in the crate.

mod eval;
mod layout;

use std::sync::Arc;

use thiserror::Error;

use crate::sparse::CscMatrix;
use crate::system::{PowerSystem, TimeSeries};

pub use layout::{
    Equality, EqualityKind, Inequality, InequalityKind, VarInfo, VarKind, VariableLayout,
};

/// Barrier reduction factor.
pub const MU_SIGMA: f64 = 0.2;
/// Barrier floor.
pub const MU_MIN: f64 = 1e-9;
/// Default initial barrier parameter.
pub const MU_INIT: f64 = 0.1;
/// Tolerance on `e_start` bounds, absorbing the converged residual of the
/// previous horizon.
const ENERGY_BOUND_SLACK: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormulationError {
    #[error("horizon must be at least 1")]
    EmptyHorizon,
    #[error("start step {start} + horizon {horizon} exceeds series length {len}")]
    HorizonOverrun {
        start: usize,
        horizon: usize,
        len: usize,
    },
    #[error("expected {expected} storage energies, got {got}")]
    EnergyCount { expected: usize, got: usize },
    #[error("storage {device}: starting energy {energy} outside [{min}, {max}]")]
    EnergyOutOfBounds {
        device: usize,
        energy: f64,
        min: f64,
        max: f64,
    },
}

#[derive(Debug, Clone, Copy)]
struct LineData {
    from: usize,
    to: usize,
    /// |y_s + j b/2|²
    self_sq: f64,
    /// |y_s|²
    cross_sq: f64,
    /// (y_s + j b/2)·conj(y_s)
    coupling_re: f64,
    coupling_im: f64,
    limit_sq: f64,
}

/// Sparse Hessian of the barrier Lagrangian together with its gradient.
#[derive(Debug, Clone)]
pub struct KktSystem {
    pub hessian: CscMatrix,
    pub residual: Vec<f64>,
    pub iterate: Vec<f64>,
}

/// One N-step problem starting at `start_step` of the series.
#[derive(Debug, Clone)]
pub struct HorizonProblem {
    pub system: Arc<PowerSystem>,
    pub start_step: usize,
    pub horizon: usize,
    pub layout: VariableLayout,
    pub e_start: Vec<f64>,
    pub barrier_mu: f64,
    /// `p_load[t][bus]`, p.u.
    p_load: Vec<Vec<f64>>,
    q_load: Vec<Vec<f64>>,
    wind: Vec<Vec<f64>>,
    g: nalgebra::DMatrix<f64>,
    b: nalgebra::DMatrix<f64>,
    neighbors: Vec<Vec<usize>>,
    gens_at: Vec<Vec<usize>>,
    storage_at: Vec<Vec<usize>>,
    lines: Vec<LineData>,
}

impl HorizonProblem {
    pub fn new(
        system: Arc<PowerSystem>,
        series: &TimeSeries,
        start_step: usize,
        horizon: usize,
        e_start: &[f64],
    ) -> Result<Self, FormulationError> {
        if horizon == 0 {
            return Err(FormulationError::EmptyHorizon);
        }
        if start_step + horizon > series.len() {
            return Err(FormulationError::HorizonOverrun {
                start: start_step,
                horizon,
                len: series.len(),
            });
        }
        if e_start.len() != system.storages.len() {
            return Err(FormulationError::EnergyCount {
                expected: system.storages.len(),
                got: e_start.len(),
            });
        }
        for (device, (s, &e)) in system.storages.iter().zip(e_start).enumerate() {
            if e < s.e_min - ENERGY_BOUND_SLACK || e > s.e_max + ENERGY_BOUND_SLACK {
                return Err(FormulationError::EnergyOutOfBounds {
                    device,
                    energy: e,
                    min: s.e_min,
                    max: s.e_max,
                });
            }
        }

        let nb = system.n_buses();
        let mut p_load = Vec::with_capacity(horizon);
        let mut q_load = Vec::with_capacity(horizon);
        let mut wind = Vec::with_capacity(horizon);
        for t in start_step..start_step + horizon {
            p_load.push(
                system
                    .buses
                    .iter()
                    .map(|bus| bus.p_load_base * series.scale_at(bus.id, t))
                    .collect(),
            );
            q_load.push(
                system
                    .buses
                    .iter()
                    .map(|bus| bus.q_load_base * series.scale_at(bus.id, t))
                    .collect(),
            );
            let mut w = vec![0.0; nb];
            for &id in &system.wind_buses {
                w[system.idx(id)] += series.wind_at(id, t);
            }
            wind.push(w);
        }

        let y = system.admittance();
        let g = y.map(|c| c.re);
        let b = y.map(|c| c.im);
        let neighbors = system
            .neighbors()
            .into_iter()
            .map(|s| s.into_iter().collect())
            .collect();
        let mut gens_at = vec![Vec::new(); nb];
        for (k, gen) in system.generators.iter().enumerate() {
            gens_at[system.idx(gen.bus)].push(k);
        }
        let mut storage_at = vec![Vec::new(); nb];
        for (k, s) in system.storages.iter().enumerate() {
            storage_at[system.idx(s.bus)].push(k);
        }
        let lines = system
            .branches
            .iter()
            .map(|br| {
                let ys = br.series_admittance();
                let a = ys + num_complex::Complex64::new(0.0, br.b_sh / 2.0);
                let c = a * ys.conj();
                LineData {
                    from: system.idx(br.from_bus),
                    to: system.idx(br.to_bus),
                    self_sq: a.norm_sqr(),
                    cross_sq: ys.norm_sqr(),
                    coupling_re: c.re,
                    coupling_im: c.im,
                    limit_sq: br.i_max.map(|i| i * i).unwrap_or(f64::INFINITY),
                }
            })
            .collect();

        let layout = VariableLayout::new(&system, horizon);
        Ok(HorizonProblem {
            system,
            start_step,
            horizon,
            layout,
            e_start: e_start.to_vec(),
            barrier_mu: MU_INIT,
            p_load,
            q_load,
            wind,
            g,
            b,
            neighbors,
            gens_at,
            storage_at,
            lines,
        })
    }

    pub fn dim(&self) -> usize {
        self.layout.len()
    }

    /// Active load at `bus` (index) in horizon step `t`.
    pub fn p_load(&self, bus: usize, t: usize) -> f64 {
        self.p_load[t][bus]
    }

    pub fn q_load(&self, bus: usize, t: usize) -> f64 {
        self.q_load[t][bus]
    }

    pub fn wind(&self, bus: usize, t: usize) -> f64 {
        self.wind[t][bus]
    }

    /// Reduce the barrier when the residual at the current `mu` is below `10 mu`.
    /// Returns the (possibly unchanged) barrier parameter.
    pub fn barrier_update(&mut self, residual_norm: f64) -> f64 {
        self.barrier_mu = next_barrier(self.barrier_mu, residual_norm);
        self.barrier_mu
    }

    /// Flat start: θ = 0, V at setpoint (or 1 clamped to bounds), P_G and Q_G
    /// mid-box, storage power 0, E = e_start, slacks at half the bound
    /// distance, λ = 0 and z = -mu/s.
    pub fn flat_start(&self) -> Vec<f64> {
        let lay = &self.layout;
        let sys = &self.system;
        let mut y = vec![0.0; lay.len()];
        for t in 0..self.horizon {
            for (j, bus) in sys.buses.iter().enumerate() {
                y[lay.voltage(j, t)] = bus
                    .v_set
                    .unwrap_or_else(|| 1.0f64.clamp(bus.v_min, bus.v_max));
            }
            for (k, gen) in sys.generators.iter().enumerate() {
                y[lay.p_gen(k, t)] = 0.5 * (gen.p_min + gen.p_max);
                y[lay.q_gen(k, t)] = 0.5 * (gen.q_min + gen.q_max);
            }
            for (d, &e) in self.e_start.iter().enumerate() {
                y[lay.energy(d, t)] = e;
            }
        }
        self.reset_slacks(&mut y);
        y
    }

    /// Set every slack to `max(h(x), half bound width, 1e-2)` and `z = -mu/s`.
    pub fn reset_slacks(&self, y: &mut [f64]) {
        let mu = self.barrier_mu;
        for ineq in &self.layout.inequalities {
            let h = self.inequality_value(y, ineq);
            let s = h.max(self.half_width(ineq)).max(1e-2);
            y[ineq.slack] = s;
            y[ineq.multiplier] = -mu / s;
        }
    }

    fn half_width(&self, ineq: &Inequality) -> f64 {
        let sys = &self.system;
        match ineq.kind {
            InequalityKind::VoltageMin { bus } | InequalityKind::VoltageMax { bus } => {
                0.5 * (sys.buses[bus].v_max - sys.buses[bus].v_min)
            }
            InequalityKind::ActiveGenMin { gen } | InequalityKind::ActiveGenMax { gen } => {
                0.5 * (sys.generators[gen].p_max - sys.generators[gen].p_min)
            }
            InequalityKind::ReactiveGenMin { gen } | InequalityKind::ReactiveGenMax { gen } => {
                0.5 * (sys.generators[gen].q_max - sys.generators[gen].q_min)
            }
            InequalityKind::ChargeMin { device } | InequalityKind::ChargeMax { device } => {
                0.5 * sys.storages[device].p_in_max
            }
            InequalityKind::DischargeMin { device } | InequalityKind::DischargeMax { device } => {
                0.5 * sys.storages[device].p_out_max
            }
            InequalityKind::EnergyMin { device } | InequalityKind::EnergyMax { device } => {
                0.5 * (sys.storages[device].e_max - sys.storages[device].e_min)
            }
            InequalityKind::LineCurrent { branch } => 0.5 * self.lines[branch].limit_sq,
        }
    }

    /// Fraction-to-boundary step `min(1, 0.995 * max feasible step)` keeping
    /// the slacks of `inequalities` positive and their multipliers negative.
    pub fn fraction_to_boundary<'a>(
        &self,
        y: &[f64],
        dy: &[f64],
        inequalities: impl IntoIterator<Item = &'a Inequality>,
    ) -> f64 {
        let mut max_step = f64::INFINITY;
        for ineq in inequalities {
            let (s, z) = (ineq.slack, ineq.multiplier);
            if dy[s] < 0.0 {
                max_step = max_step.min(-y[s] / dy[s]);
            }
            if dy[z] > 0.0 {
                max_step = max_step.min(-y[z] / dy[z]);
            }
        }
        (0.995 * max_step).min(1.0)
    }

    /// Copy `prev` (a solution of the problem one interval earlier with the
    /// same layout) shifted forward one step, duplicating the last step.
    pub fn shifted_start(&self, prev: &[f64]) -> Vec<f64> {
        let size = self.layout.step_size();
        assert_eq!(prev.len(), self.layout.len());
        let mut y = vec![0.0; prev.len()];
        for t in 0..self.horizon {
            let src = (t + 1).min(self.horizon - 1);
            y[t * size..(t + 1) * size].copy_from_slice(&prev[src * size..(src + 1) * size]);
        }
        y
    }
}

pub(crate) fn next_barrier(mu: f64, residual_norm: f64) -> f64 {
    if residual_norm < 10.0 * mu {
        (MU_SIGMA * mu).max(MU_MIN)
    } else {
        mu
    }
}
