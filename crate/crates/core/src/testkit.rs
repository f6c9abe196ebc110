//! Independent helpers for unit tests: a dense Newton power flow working
//! straight from the complex admittance matrix, and a feasible-point sampler
//! built on it.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;

use crate::formulation::HorizonProblem;
use crate::system::{BusKind, PowerSystem};

/// Complex power injected into the network at every bus.
pub fn injections(sys: &PowerSystem, v: &[f64], theta: &[f64]) -> Vec<Complex64> {
    let y = sys.admittance();
    let n = v.len();
    let u: Vec<Complex64> = (0..n)
        .map(|j| Complex64::from_polar(v[j], theta[j]))
        .collect();
    (0..n)
        .map(|j| {
            let i: Complex64 = (0..n).map(|k| y[(j, k)] * u[k]).sum();
            u[j] * i.conj()
        })
        .collect()
}

/// Solves for angles of non-slack buses and magnitudes of load buses so that
/// the network absorbs `p_spec` at non-slack buses and `q_spec` at load buses.
/// `v` holds the fixed magnitudes on entry. Finite-difference Jacobian.
pub fn power_flow(
    sys: &PowerSystem,
    p_spec: &[f64],
    q_spec: &[f64],
    v: &mut [f64],
    theta: &mut [f64],
) -> bool {
    let n = sys.n_buses();
    let p_rows: Vec<usize> = (0..n)
        .filter(|&j| sys.buses[j].kind != BusKind::Slack)
        .collect();
    let q_rows: Vec<usize> = (0..n)
        .filter(|&j| sys.buses[j].kind == BusKind::Load)
        .collect();
    let m = p_rows.len() + q_rows.len();
    let mismatch = |v: &[f64], th: &[f64]| -> DVector<f64> {
        let s = injections(sys, v, th);
        let mut f = DVector::zeros(m);
        for (r, &j) in p_rows.iter().enumerate() {
            f[r] = s[j].re - p_spec[j];
        }
        for (r, &j) in q_rows.iter().enumerate() {
            f[p_rows.len() + r] = s[j].im - q_spec[j];
        }
        f
    };
    for _ in 0..30 {
        let f = mismatch(v, theta);
        if f.amax() < 1e-11 {
            return true;
        }
        let mut jac = DMatrix::zeros(m, m);
        let h = 1e-7;
        for c in 0..m {
            let (mut v2, mut t2) = (v.to_vec(), theta.to_vec());
            if c < p_rows.len() {
                t2[p_rows[c]] += h;
            } else {
                v2[q_rows[c - p_rows.len()]] += h;
            }
            jac.set_column(c, &((mismatch(&v2, &t2) - &f) / h));
        }
        let Some(dx) = jac.lu().solve(&(-f)) else {
            return false;
        };
        for c in 0..m {
            if c < p_rows.len() {
                theta[p_rows[c]] += dx[c];
            } else {
                v[q_rows[c - p_rows.len()]] += dx[c];
            }
        }
        if v.iter().any(|x| !x.is_finite() || *x < 0.3) {
            return false;
        }
    }
    mismatch(v, theta).amax() < 1e-11
}

/// Draws a random point satisfying every equality of a single-step problem
/// and checks the inequalities; returns the primal part of `y` with slacks
/// and multipliers left at zero, or `None` if the draw was infeasible.
pub fn sample_feasible<R: Rng>(p: &HorizonProblem, rng: &mut R) -> Option<Vec<f64>> {
    assert_eq!(p.horizon, 1);
    let sys = &p.system;
    let lay = &p.layout;
    let n = sys.n_buses();
    let mut y = vec![0.0; p.dim()];
    let mut p_spec = vec![0.0; n];
    let mut q_spec = vec![0.0; n];
    for j in 0..n {
        p_spec[j] = p.wind(j, 0) - p.p_load(j, 0);
        q_spec[j] = -p.q_load(j, 0);
    }
    for (g, gen) in sys.generators.iter().enumerate() {
        let j = sys.bus_index(gen.bus).unwrap();
        if sys.buses[j].kind != BusKind::Slack {
            let pg = rng.random_range(gen.p_min..=gen.p_max);
            y[lay.p_gen(g, 0)] = pg;
            p_spec[j] += pg;
        }
    }
    for (d, s) in sys.storages.iter().enumerate() {
        let (pin, pout) = if rng.random_bool(0.5) {
            (rng.random_range(0.0..=s.p_in_max), 0.0)
        } else {
            (0.0, rng.random_range(0.0..=s.p_out_max))
        };
        let e = s.advance(p.e_start[d], pin, pout);
        if e < s.e_min || e > s.e_max {
            return None;
        }
        y[lay.charge(d, 0)] = pin;
        y[lay.discharge(d, 0)] = pout;
        y[lay.energy(d, 0)] = e;
        let j = sys.bus_index(s.bus).unwrap();
        p_spec[j] += pout - pin;
    }
    let mut v: Vec<f64> = sys.buses.iter().map(|b| b.v_set.unwrap_or(1.0)).collect();
    let mut theta = vec![0.0; n];
    if !power_flow(sys, &p_spec, &q_spec, &mut v, &mut theta) {
        return None;
    }
    let s = injections(sys, &v, &theta);
    // the slack generator and all reactive outputs follow from the flow;
    // several generators at one bus split evenly
    for j in 0..n {
        let gens: Vec<usize> = (0..sys.generators.len())
            .filter(|&g| sys.bus_index(sys.generators[g].bus) == Some(j))
            .collect();
        if gens.is_empty() {
            continue;
        }
        let q_need = s[j].im + p.q_load(j, 0);
        for &g in &gens {
            y[lay.q_gen(g, 0)] = q_need / gens.len() as f64;
        }
        if sys.buses[j].kind == BusKind::Slack {
            let others: f64 = p_spec[j] - (p.wind(j, 0) - p.p_load(j, 0));
            let p_need = s[j].re - others + p.p_load(j, 0) - p.wind(j, 0);
            for &g in &gens {
                y[lay.p_gen(g, 0)] = p_need / gens.len() as f64;
            }
        }
    }
    for j in 0..n {
        y[lay.voltage(j, 0)] = v[j];
        y[lay.angle(j, 0)] = theta[j];
    }
    for ineq in &lay.inequalities {
        if p.inequality_value(&y, ineq) < 0.0 {
            return None;
        }
    }
    Some(y)
}
