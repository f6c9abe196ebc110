//! Residuals, gradient and exact Hessian of the barrier Lagrangian.
//!
//! Each constraint is evaluated as a small local function carrying its value,
//! sparse gradient and sparse Hessian; the KKT residual and the Newton matrix
//! are both accumulated from those pieces, so they cannot drift apart.

use super::{Equality, EqualityKind, HorizonProblem, Inequality, InequalityKind, KktSystem};
use crate::sparse::CscMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HessianMode {
    Exact,
    PrimalDual,
}

/// Value, gradient and Hessian of one scalar constraint.
#[derive(Debug, Default)]
struct Local {
    value: f64,
    grad: Vec<(usize, f64)>,
    /// Each unordered pair appears once; `(i, i)` for diagonal terms.
    hess: Vec<(usize, usize, f64)>,
}

impl Local {
    fn constant(value: f64) -> Self {
        Local {
            value,
            ..Default::default()
        }
    }

    fn linear(&mut self, i: usize, coef: f64, x: f64) {
        self.value += coef * x;
        self.grad.push((i, coef));
    }

    /// Adds `scale * V_j V_k W(θ_j - θ_k)` where `W'' = -W`; `w` and `wp`
    /// are `W` and `W'` at the current angle difference.
    fn pair(&mut self, scale: f64, idx: [usize; 4], vj: f64, vk: f64, w: f64, wp: f64) {
        let [tj, tk, uj, uk] = idx;
        let vv = scale * vj * vk;
        self.value += vv * w;
        self.grad.push((tj, vv * wp));
        self.grad.push((tk, -vv * wp));
        self.grad.push((uj, scale * vk * w));
        self.grad.push((uk, scale * vj * w));
        self.hess.push((tj, tj, -vv * w));
        self.hess.push((tj, tk, vv * w));
        self.hess.push((tk, tk, -vv * w));
        self.hess.push((tj, uj, scale * vk * wp));
        self.hess.push((tj, uk, scale * vj * wp));
        self.hess.push((tk, uj, -scale * vk * wp));
        self.hess.push((tk, uk, -scale * vj * wp));
        self.hess.push((uj, uk, scale * w));
    }

    /// Adds `coef * x²`.
    fn square(&mut self, i: usize, coef: f64, x: f64) {
        self.value += coef * x * x;
        self.grad.push((i, 2.0 * coef * x));
        self.hess.push((i, i, 2.0 * coef));
    }
}

impl HorizonProblem {
    /// Active and reactive mismatch at bus `j` (index), step `t`.
    pub fn eval_power_balance(&self, y: &[f64], j: usize, t: usize) -> (f64, f64) {
        (
            self.active_balance(y, j, t).value,
            self.reactive_balance(y, j, t).value,
        )
    }

    /// `E(t+1) - [E(t) + η_c P_in - P_out/η_d - ε_sbl]` with one interval as
    /// the time unit.
    pub fn eval_storage_dynamics(&self, y: &[f64], device: usize, t: usize) -> f64 {
        self.storage_dynamics(y, device, t).value
    }

    /// Squared from-end current magnitude of `branch` at step `t`.
    pub fn eval_line_current_sq(&self, y: &[f64], branch: usize, t: usize) -> f64 {
        -self.line_margin_with(y, branch, t, 0.0).value
    }

    /// Generation cost summed over the horizon.
    pub fn eval_objective(&self, y: &[f64]) -> f64 {
        (0..self.horizon).map(|t| self.step_objective(y, t)).sum()
    }

    pub fn step_objective(&self, y: &[f64], t: usize) -> f64 {
        self.system
            .generators
            .iter()
            .enumerate()
            .map(|(k, g)| g.cost(y[self.layout.p_gen(k, t)]))
            .sum()
    }

    /// Value of an equality constraint at `y`.
    pub fn equality_value(&self, y: &[f64], eq: &Equality) -> f64 {
        self.equality(y, eq).value
    }

    /// Value of `h(x)` (not `h - s`) for an inequality.
    pub fn inequality_value(&self, y: &[f64], ineq: &Inequality) -> f64 {
        self.inequality(y, ineq).value
    }

    /// Scalar barrier Lagrangian.
    pub fn barrier_lagrangian(&self, y: &[f64]) -> f64 {
        let mu = self.barrier_mu;
        let mut l = self.eval_objective(y);
        for eq in &self.layout.equalities {
            l += y[eq.multiplier] * self.equality(y, eq).value;
        }
        for ineq in &self.layout.inequalities {
            let s = y[ineq.slack];
            l += y[ineq.multiplier] * (self.inequality(y, ineq).value - s) - mu * s.ln();
        }
        l
    }

    /// Gradient of the barrier Lagrangian with respect to every position of `y`.
    pub fn eval_kkt_residual(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.dim());
        let mu = self.barrier_mu;
        let mut r = vec![0.0; y.len()];
        for t in 0..self.horizon {
            for (k, g) in self.system.generators.iter().enumerate() {
                let i = self.layout.p_gen(k, t);
                r[i] += 2.0 * g.a * y[i] + g.b;
            }
        }
        for eq in &self.layout.equalities {
            let f = self.equality(y, eq);
            let lambda = y[eq.multiplier];
            r[eq.multiplier] = f.value;
            for (i, d) in f.grad {
                r[i] += lambda * d;
            }
        }
        for ineq in &self.layout.inequalities {
            let f = self.inequality(y, ineq);
            let (s, z) = (y[ineq.slack], y[ineq.multiplier]);
            r[ineq.multiplier] = f.value - s;
            r[ineq.slack] = -mu / s - z;
            for (i, d) in f.grad {
                r[i] += z * d;
            }
        }
        r
    }

    /// Exact Hessian of the barrier Lagrangian together with its gradient.
    ///
    /// Structural zeros of the constraint Jacobians are kept, so the sparsity
    /// pattern depends only on the layout, not on the iterate.
    pub fn assemble_hessian(&self, y: &[f64]) -> KktSystem {
        self.assemble(y, HessianMode::Exact)
    }

    /// Newton matrix used by the solvers: the exact Hessian with the slack
    /// block `mu/s²` replaced by its primal-dual form `-z/s`. Both agree
    /// whenever `z = -mu/s`, but the primal-dual form does not stall when
    /// the slacks are far from centrality.
    pub fn assemble_kkt(&self, y: &[f64]) -> KktSystem {
        self.assemble(y, HessianMode::PrimalDual)
    }

    fn assemble(&self, y: &[f64], mode: HessianMode) -> KktSystem {
        assert_eq!(y.len(), self.dim());
        let mu = self.barrier_mu;
        let n = y.len();
        let mut trip: Vec<(usize, usize, f64)> = Vec::new();
        fn sym(trip: &mut Vec<(usize, usize, f64)>, i: usize, j: usize, v: f64) {
            trip.push((i, j, v));
            if i != j {
                trip.push((j, i, v));
            }
        }
        for t in 0..self.horizon {
            for (k, g) in self.system.generators.iter().enumerate() {
                let i = self.layout.p_gen(k, t);
                sym(&mut trip, i, i, 2.0 * g.a);
            }
        }
        for eq in &self.layout.equalities {
            let f = self.equality(y, eq);
            let lambda = y[eq.multiplier];
            for &(i, d) in &f.grad {
                sym(&mut trip, eq.multiplier, i, d);
            }
            for &(i, j, h) in &f.hess {
                sym(&mut trip, i, j, lambda * h);
            }
            // keep the multiplier diagonal in the pattern
            sym(&mut trip, eq.multiplier, eq.multiplier, 0.0);
        }
        for ineq in &self.layout.inequalities {
            let f = self.inequality(y, ineq);
            let (s, z) = (y[ineq.slack], y[ineq.multiplier]);
            for &(i, d) in &f.grad {
                sym(&mut trip, ineq.multiplier, i, d);
            }
            for &(i, j, h) in &f.hess {
                sym(&mut trip, i, j, z * h);
            }
            sym(&mut trip, ineq.multiplier, ineq.slack, -1.0);
            let sigma = match mode {
                HessianMode::Exact => mu / (s * s),
                HessianMode::PrimalDual => -z / s,
            };
            sym(&mut trip, ineq.slack, ineq.slack, sigma);
            sym(&mut trip, ineq.multiplier, ineq.multiplier, 0.0);
        }
        // every primal position gets a (possibly zero) diagonal so that
        // regularization never changes the pattern
        for i in 0..n {
            if self.layout.vars[i].kind.is_primal() {
                sym(&mut trip, i, i, 0.0);
            }
        }
        KktSystem {
            hessian: CscMatrix::from_triplets(n, n, &trip),
            residual: self.eval_kkt_residual(y),
            iterate: y.to_vec(),
        }
    }

    /// Largest `|s_i z_i|` over all inequality pairs.
    pub fn max_complementarity(&self, y: &[f64]) -> f64 {
        self.layout
            .inequalities
            .iter()
            .map(|i| (y[i.slack] * y[i.multiplier]).abs())
            .fold(0.0, f64::max)
    }

    /// Largest violation of any equality or of any `h(x) >= 0`.
    pub fn max_constraint_violation(&self, y: &[f64]) -> f64 {
        let eq = self
            .layout
            .equalities
            .iter()
            .map(|e| self.equality(y, e).value.abs());
        let ineq = self
            .layout
            .inequalities
            .iter()
            .map(|i| (-self.inequality(y, i).value).max(0.0));
        eq.chain(ineq).fold(0.0, f64::max)
    }

    fn equality(&self, y: &[f64], eq: &Equality) -> Local {
        let t = eq.step;
        let lay = &self.layout;
        match eq.kind {
            EqualityKind::ActiveBalance { bus } => self.active_balance(y, bus, t),
            EqualityKind::ReactiveBalance { bus } => self.reactive_balance(y, bus, t),
            EqualityKind::StorageDynamics { device } => self.storage_dynamics(y, device, t),
            EqualityKind::SlackAngle { bus } => {
                let mut f = Local::default();
                let i = lay.angle(bus, t);
                f.linear(i, 1.0, y[i]);
                f
            }
            EqualityKind::VoltageSetpoint { bus } => {
                let v_set = self.system.buses[bus].v_set.unwrap_or(1.0);
                let mut f = Local::constant(-v_set);
                let i = lay.voltage(bus, t);
                f.linear(i, 1.0, y[i]);
                f
            }
        }
    }

    fn inequality(&self, y: &[f64], ineq: &Inequality) -> Local {
        let t = ineq.step;
        let lay = &self.layout;
        let sys = &self.system;
        // lower bound: x - lo ; upper bound: hi - x
        let lower = |i: usize, lo: f64| {
            let mut f = Local::constant(-lo);
            f.linear(i, 1.0, y[i]);
            f
        };
        let upper = |i: usize, hi: f64| {
            let mut f = Local::constant(hi);
            f.linear(i, -1.0, y[i]);
            f
        };
        match ineq.kind {
            InequalityKind::VoltageMin { bus } => lower(lay.voltage(bus, t), sys.buses[bus].v_min),
            InequalityKind::VoltageMax { bus } => upper(lay.voltage(bus, t), sys.buses[bus].v_max),
            InequalityKind::ActiveGenMin { gen } => {
                lower(lay.p_gen(gen, t), sys.generators[gen].p_min)
            }
            InequalityKind::ActiveGenMax { gen } => {
                upper(lay.p_gen(gen, t), sys.generators[gen].p_max)
            }
            InequalityKind::ReactiveGenMin { gen } => {
                lower(lay.q_gen(gen, t), sys.generators[gen].q_min)
            }
            InequalityKind::ReactiveGenMax { gen } => {
                upper(lay.q_gen(gen, t), sys.generators[gen].q_max)
            }
            InequalityKind::ChargeMin { device } => lower(lay.charge(device, t), 0.0),
            InequalityKind::ChargeMax { device } => {
                upper(lay.charge(device, t), sys.storages[device].p_in_max)
            }
            InequalityKind::DischargeMin { device } => lower(lay.discharge(device, t), 0.0),
            InequalityKind::DischargeMax { device } => {
                upper(lay.discharge(device, t), sys.storages[device].p_out_max)
            }
            InequalityKind::EnergyMin { device } => {
                lower(lay.energy(device, t), sys.storages[device].e_min)
            }
            InequalityKind::EnergyMax { device } => {
                upper(lay.energy(device, t), sys.storages[device].e_max)
            }
            InequalityKind::LineCurrent { branch } => self.line_margin(y, branch, t),
        }
    }

    /// Pair indices `[θ_j, θ_k, V_j, V_k]` and values `(V_j, V_k, θ_j - θ_k)`.
    fn pair_at(&self, y: &[f64], j: usize, k: usize, t: usize) -> ([usize; 4], f64, f64, f64) {
        let lay = &self.layout;
        let idx = [
            lay.angle(j, t),
            lay.angle(k, t),
            lay.voltage(j, t),
            lay.voltage(k, t),
        ];
        (idx, y[idx[2]], y[idx[3]], y[idx[0]] - y[idx[1]])
    }

    fn injections(&self, f: &mut Local, y: &[f64], j: usize, t: usize, active: bool) {
        let lay = &self.layout;
        for &g in &self.gens_at[j] {
            let i = if active {
                lay.p_gen(g, t)
            } else {
                lay.q_gen(g, t)
            };
            f.linear(i, 1.0, y[i]);
        }
        if active {
            for &d in &self.storage_at[j] {
                let (pin, pout) = (lay.charge(d, t), lay.discharge(d, t));
                f.linear(pin, -1.0, y[pin]);
                f.linear(pout, 1.0, y[pout]);
            }
        }
    }

    fn active_balance(&self, y: &[f64], j: usize, t: usize) -> Local {
        let mut f = Local::constant(self.wind[t][j] - self.p_load[t][j]);
        self.injections(&mut f, y, j, t, true);
        let vj_idx = self.layout.voltage(j, t);
        f.square(vj_idx, -self.g[(j, j)], y[vj_idx]);
        for &k in &self.neighbors[j] {
            let (idx, vj, vk, th) = self.pair_at(y, j, k, t);
            let (g, b) = (self.g[(j, k)], self.b[(j, k)]);
            let (sin, cos) = th.sin_cos();
            f.pair(-1.0, idx, vj, vk, g * cos + b * sin, -g * sin + b * cos);
        }
        f
    }

    fn reactive_balance(&self, y: &[f64], j: usize, t: usize) -> Local {
        let mut f = Local::constant(-self.q_load[t][j]);
        self.injections(&mut f, y, j, t, false);
        let vj_idx = self.layout.voltage(j, t);
        f.square(vj_idx, self.b[(j, j)], y[vj_idx]);
        for &k in &self.neighbors[j] {
            let (idx, vj, vk, th) = self.pair_at(y, j, k, t);
            let (g, b) = (self.g[(j, k)], self.b[(j, k)]);
            let (sin, cos) = th.sin_cos();
            f.pair(-1.0, idx, vj, vk, g * sin - b * cos, g * cos + b * sin);
        }
        f
    }

    fn storage_dynamics(&self, y: &[f64], device: usize, t: usize) -> Local {
        let s = &self.system.storages[device];
        let lay = &self.layout;
        let mut f = Local::constant(s.eps_sbl);
        let e = lay.energy(device, t);
        f.linear(e, 1.0, y[e]);
        if t == 0 {
            f.value -= self.e_start[device];
        } else {
            let prev = lay.energy(device, t - 1);
            f.linear(prev, -1.0, y[prev]);
        }
        let (pin, pout) = (lay.charge(device, t), lay.discharge(device, t));
        f.linear(pin, -s.eta_c, y[pin]);
        f.linear(pout, 1.0 / s.eta_d, y[pout]);
        f
    }

    /// `i_max² - |I|²` at the from-end.
    fn line_margin(&self, y: &[f64], branch: usize, t: usize) -> Local {
        self.line_margin_with(y, branch, t, self.lines[branch].limit_sq)
    }

    fn line_margin_with(&self, y: &[f64], branch: usize, t: usize, limit_sq: f64) -> Local {
        let line = &self.lines[branch];
        let (idx, vj, vk, th) = self.pair_at(y, line.from, line.to, t);
        let mut f = Local::constant(limit_sq);
        f.square(idx[2], -line.self_sq, vj);
        f.square(idx[3], -line.cross_sq, vk);
        let (sin, cos) = th.sin_cos();
        let (cr, ci) = (line.coupling_re, line.coupling_im);
        f.pair(2.0, idx, vj, vk, cr * cos - ci * sin, -cr * sin - ci * cos);
        f
    }
}
