use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::cases::case5_demo;
use crate::system::TimeSeries;
use crate::testkit::sample_feasible;

fn case5(n: usize) -> HorizonProblem {
    let sys = case5_demo();
    let series = TimeSeries::constant(&sys, 144, 1.0);
    HorizonProblem::new(Arc::new(sys), &series, 0, n, &[0.5]).unwrap()
}

fn kkt_from_dense(h: DMatrix<f64>, r: Vec<f64>) -> KktSystem {
    KktSystem {
        hessian: CscMatrix::from_dense(&h),
        iterate: vec![0.0; r.len()],
        residual: r,
    }
}

#[test]
fn identity_system() {
    let kkt = kkt_from_dense(DMatrix::identity(2, 2), vec![1.0, -1.0]);
    assert_eq!(newton_step(&kkt).unwrap().dy, vec![-1.0, 1.0]);
}

#[test]
fn diagonal_system() {
    let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
    let kkt = kkt_from_dense(h, vec![2.0, 4.0]);
    assert_eq!(newton_step(&kkt).unwrap().dy, vec![-1.0, -1.0]);
}

#[test]
fn singular_system_is_regularized() {
    let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
    let step = newton_step(&kkt_from_dense(h, vec![1.0, 0.0])).unwrap();
    assert!(step.delta > 0.0);
    assert!(step.dy.iter().all(|v| v.is_finite()));
}

#[test]
fn singular_without_primal_block_fails() {
    let h = CscMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (1, 1, 0.0)]);
    let err = solve_regularized(&h, &[1.0, 1.0], &[true, false]).unwrap_err();
    assert!(matches!(err, SolveError::Singular { .. }));
}

#[test]
fn first_step_matches_dense_lu() {
    let p = case5(1);
    let kkt = p.assemble_hessian(&p.flat_start());
    let step = newton_step(&kkt).unwrap();
    let dense = kkt.hessian.to_dense();
    let rhs = -DVector::from_column_slice(&kkt.residual);
    let want = dense.lu().solve(&rhs).unwrap();
    let scale = want.amax().max(1.0);
    for i in 0..want.len() {
        assert!((step.dy[i] - want[i]).abs() < 1e-10 * scale, "{i}");
    }
    assert_eq!(step.delta, 0.0);
}

#[test]
fn case5_single_step_converges_to_a_feasible_optimum() {
    let mut p = case5(1);
    let y0 = p.flat_start();
    let rep = solve_centralized(&mut p, &y0, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    assert!(rep.converged, "{rep:?}");
    assert!(rep.residual_norm < DEFAULT_TOL);
    assert_eq!(rep.iterations, rep.per_iteration_seconds.len());
    assert!(rep.final_mu <= 1e-6);
    assert!(p.max_complementarity(&rep.solution) <= 1e-5);
    let y = &rep.solution;
    for j in 0..5 {
        let (dp, dq) = p.eval_power_balance(y, j, 0);
        assert!(dp.abs() < 1e-3 && dq.abs() < 1e-3);
    }
    for ineq in &p.layout.inequalities {
        assert!(p.inequality_value(y, ineq) > -1e-6, "{ineq:?}");
    }
    for (k, br) in p.system.branches.iter().enumerate() {
        if let Some(i) = br.i_max {
            assert!(p.eval_line_current_sq(y, k, 0) <= i * i + 1e-6);
        }
    }
    assert!(kkt_norm(&p, y, &p.eval_kkt_residual(y)) < 1e-3);
}

#[test]
fn no_random_feasible_point_is_cheaper() {
    let mut p = case5(1);
    let y0 = p.flat_start();
    let rep = solve_centralized(&mut p, &y0, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    assert!(rep.converged);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut accepted = 0;
    let mut draws = 0;
    while accepted < 1000 {
        draws += 1;
        assert!(draws < 200_000, "sampler accepts too rarely");
        let Some(y) = sample_feasible(&p, &mut rng) else {
            continue;
        };
        for j in 0..5 {
            let (dp, dq) = p.eval_power_balance(&y, j, 0);
            assert!(dp.abs() < 1e-9 && dq.abs() < 1e-9);
        }
        assert!(p.eval_objective(&y) >= rep.objective - 1e-6);
        accepted += 1;
    }
}

#[test]
fn different_starts_agree() {
    let mut p = case5(2);
    let flat = p.flat_start();
    let a = solve_centralized(&mut p, &flat, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    let mut p = case5(2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut y0 = p.flat_start();
    for t in 0..2 {
        for j in 0..5 {
            y0[p.layout.angle(j, t)] = rng.random_range(-0.1..0.1);
            if p.system.buses[j].v_set.is_none() {
                y0[p.layout.voltage(j, t)] = rng.random_range(0.96..1.04);
            }
        }
        for (g, gen) in p.system.generators.clone().iter().enumerate() {
            y0[p.layout.p_gen(g, t)] = rng.random_range(gen.p_min + 0.1..gen.p_max - 0.1);
        }
    }
    p.reset_slacks(&mut y0);
    let b = solve_centralized(&mut p, &y0, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    assert!(a.converged && b.converged);
    assert!(
        (a.objective - b.objective).abs() < 1e-6,
        "{} vs {}",
        a.objective,
        b.objective
    );
}

#[test]
fn solving_is_deterministic() {
    let run = || {
        let mut p = case5(2);
        let y0 = p.flat_start();
        solve_centralized(&mut p, &y0, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.iterations, b.iterations);
    assert_eq!(a.per_iteration_flops, b.per_iteration_flops);
    assert!(a
        .solution
        .iter()
        .zip(&b.solution)
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn starting_at_the_solution_needs_no_work() {
    let mut p = case5(1);
    let y0 = p.flat_start();
    let rep = solve_centralized(&mut p, &y0, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    // polish at the final barrier value
    let mut y = rep.solution.clone();
    for _ in 0..5 {
        let step = newton_step(&p.assemble_kkt(&y)).unwrap();
        let alpha = p.fraction_to_boundary(&y, &step.dy, &p.layout.inequalities);
        y.iter_mut()
            .zip(&step.dy)
            .for_each(|(a, d)| *a += alpha * d);
    }
    assert!(kkt_norm(&p, &y, &p.eval_kkt_residual(&y)) < 1e-12);
    let again = solve_centralized(&mut p, &y, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    assert!(again.converged);
    assert!(again.iterations <= 1);
}

#[test]
fn wrong_dimension_is_rejected() {
    let mut p = case5(1);
    assert!(matches!(
        solve_centralized(&mut p, &[0.0; 3], DEFAULT_TOL, 10),
        Err(SolveError::Dimension { .. })
    ));
}
