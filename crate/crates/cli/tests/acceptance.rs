//! End-to-end acceptance checks. Runs as a plain binary (no libtest harness)
//! so each check prints exactly one PASS/FAIL line; exits non-zero if any
//! check fails.

use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gridmpc::cases::{
    arbitrary_partition, bundled_case, bundled_series, two_island_demo, valley_peak_series,
};
use gridmpc::central::{solve_centralized, DEFAULT_MAX_ITER, DEFAULT_TOL};
use gridmpc::formulation::{HorizonProblem, VarKind};
use gridmpc::mpc::{
    benchmark_steps, reference_partition, run_mpc, BenchmarkEntry, MpcConfig, Solver, StepOutcome,
};
use gridmpc::ocd::{solve_distributed, DistributedReport, Method, Timing};
use gridmpc::partition::{compute_affinity, spectral_labels, Partition};
use gridmpc::system::{PowerSystem, TimeSeries};

type Check = Result<String, String>;

fn main() {
    let checks: [(&str, fn() -> Check); 8] = [
        (
            "OCD-C matches the centralized solution",
            solution_equivalence,
        ),
        (
            "OCD-C needs fewer iterations than OCD",
            correction_beats_plain,
        ),
        (
            "spectral partition beats the arbitrary one on average",
            partition_quality,
        ),
        (
            "spectral partition wins at every step",
            partition_robustness,
        ),
        ("longer horizons lower cost and ramping", horizon_benefit),
        ("numerical correctness suite", numerical_suite),
        (
            "decoupled islands give identical iterates",
            decoupled_equivalence,
        ),
        ("commands are byte-deterministic", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let t = Instant::now();
        let outcome = check();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{}] {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}] {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

struct Setup {
    system: Arc<PowerSystem>,
    series: TimeSeries,
    e0: Vec<f64>,
}

impl Setup {
    fn new(case: &str) -> Self {
        let system = Arc::new(bundled_case(case).unwrap());
        let series = bundled_series(case).unwrap();
        let e0 = system.storages.iter().map(|s| s.e_init).collect();
        Setup { system, series, e0 }
    }

    fn problem(&self, n: usize) -> HorizonProblem {
        HorizonProblem::new(self.system.clone(), &self.series, 0, n, &self.e0).unwrap()
    }

    fn spectral(&self, k: usize) -> Partition {
        reference_partition(
            &self.system,
            &self.series,
            0,
            &self.e0,
            k,
            7,
            DEFAULT_TOL,
            DEFAULT_MAX_ITER,
        )
        .unwrap()
        .0
    }

    fn distributed(&self, n: usize, part: &Partition, method: Method) -> DistributedReport {
        let mut p = self.problem(n);
        let y0 = p.flat_start();
        solve_distributed(&mut p, part, method, &y0, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap()
    }
}

fn primal_distance(p: &HorizonProblem, a: &[f64], b: &[f64]) -> f64 {
    let mask = p.layout.primal_mask();
    (0..a.len())
        .filter(|&i| mask[i])
        .map(|i| (a[i] - b[i]).abs())
        .fold(0.0, f64::max)
}

fn solution_equivalence() -> Check {
    let mut worst_rel: f64 = 0.0;
    let mut worst_dist: f64 = 0.0;
    let mut runs = 0;
    for case in ["case5_demo", "case14_like"] {
        let s = Setup::new(case);
        for n in [1, 3] {
            let mut pc = s.problem(n);
            let y0 = pc.flat_start();
            let c = solve_centralized(&mut pc, &y0, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            ensure(c.converged, || format!("{case} N={n}: centralized failed"))?;
            for k in [2, 3] {
                for (label, part) in [
                    ("sp", s.spectral(k)),
                    ("arbitrary", arbitrary_partition(case, k).unwrap()),
                ] {
                    let d = s.distributed(n, &part, Method::OcdC);
                    let tag = format!("{case} N={n} K={k} {label}");
                    ensure(d.converged, || format!("{tag}: {:?}", d.termination))?;
                    let rel = (d.objective - c.objective).abs() / c.objective;
                    let dist = primal_distance(&pc, &d.solution, &c.solution);
                    ensure(rel <= 1e-4, || {
                        format!("{tag}: relative objective gap {rel:e}")
                    })?;
                    ensure(dist <= 1e-3, || format!("{tag}: primal distance {dist:e}"))?;
                    worst_rel = worst_rel.max(rel);
                    worst_dist = worst_dist.max(dist);
                    runs += 1;
                }
            }
        }
    }
    Ok(format!(
        "{runs} runs, worst objective gap {worst_rel:.1e}, worst primal distance {worst_dist:.1e}"
    ))
}

fn correction_beats_plain() -> Check {
    let s = Setup::new("case14_like");
    let mut pairs = Vec::new();
    for n in [1, 3] {
        for k in [2, 3] {
            for (label, part) in [
                ("sp", s.spectral(k)),
                ("arbitrary", arbitrary_partition("case14_like", k).unwrap()),
            ] {
                let plain = s.distributed(n, &part, Method::Ocd);
                let corrected = s.distributed(n, &part, Method::OcdC);
                let tag = format!("N={n} K={k} {label}");
                ensure(corrected.converged, || {
                    format!("{tag}: OCD-C did not converge")
                })?;
                ensure(corrected.iterations < plain.iterations, || {
                    format!(
                        "{tag}: OCD-C {} vs OCD {} iterations",
                        corrected.iterations, plain.iterations
                    )
                })?;
                let cap = if plain.converged { "" } else { "+" };
                pairs.push(format!(
                    "{tag} {}/{}{cap}",
                    corrected.iterations, plain.iterations
                ));
            }
        }
    }
    Ok(format!("OCD-C/OCD iterations: {}", pairs.join(", ")))
}

fn mpc_benchmark(
    s: &Setup,
    n: usize,
    k: usize,
    steps: usize,
) -> Result<(Vec<StepOutcome>, Vec<StepOutcome>), String> {
    let mut cfg = MpcConfig::new(n, Solver::Centralized, steps);
    cfg.regions = k;
    let entries = [
        BenchmarkEntry {
            label: "sp".into(),
            solver: Solver::Distributed(Method::OcdC),
            partition: Some(s.spectral(k)),
        },
        BenchmarkEntry {
            label: "arbitrary".into(),
            solver: Solver::Distributed(Method::OcdC),
            partition: arbitrary_partition("case14_like", k),
        },
    ];
    let mut out = benchmark_steps(s.system.clone(), &s.series, &cfg, &entries, Timing::Ops)
        .map_err(|e| e.to_string())?;
    let arb = out.pop().unwrap();
    let sp = out.pop().unwrap();
    Ok((sp, arb))
}

/// Iterations, charging a step that failed outright with the full budget.
fn charged(o: &StepOutcome) -> f64 {
    if o.error.is_some() && !o.converged && o.iterations == 0 {
        DEFAULT_MAX_ITER as f64
    } else {
        o.iterations as f64
    }
}

fn partition_quality() -> Check {
    let s = Setup::new("case14_like");
    let steps = 10;
    let mut notes = Vec::new();
    for k in [2, 3] {
        for n in [1, 3, 6] {
            let (sp, arb) = mpc_benchmark(&s, n, k, steps)?;
            ensure(sp.iter().all(|o| o.converged), || {
                format!("K={k} N={n}: spectral partition failed a step")
            })?;
            let avg = |v: &[StepOutcome]| v.iter().map(charged).sum::<f64>() / v.len() as f64;
            let (a, b) = (avg(&sp), avg(&arb));
            ensure(a < b, || format!("K={k} N={n}: average {a:.1} vs {b:.1}"))?;
            notes.push(format!("K={k} N={n} {a:.1}/{b:.1}"));
        }
    }
    Ok(format!(
        "average OCD-C iterations sp/arbitrary over {steps} steps: {}",
        notes.join(", ")
    ))
}

fn partition_robustness() -> Check {
    let s = Setup::new("case14_like");
    let steps = 20;
    let mut notes = Vec::new();
    for k in [2, 3] {
        let (sp, arb) = mpc_benchmark(&s, 3, k, steps)?;
        let mut worst: f64 = 0.0;
        for (a, b) in sp.iter().zip(&arb) {
            ensure(a.converged, || {
                format!("K={k}: sp failed step {}", a.interval)
            })?;
            let wins = !b.converged || a.convergence_time < b.convergence_time;
            ensure(wins, || {
                format!(
                    "K={k} step {}: {:e}s vs {:e}s",
                    a.interval, a.convergence_time, b.convergence_time
                )
            })?;
            if b.converged {
                worst = worst.max(a.convergence_time / b.convergence_time);
            }
        }
        notes.push(format!(
            "K={k} {steps}/{steps} steps, worst time ratio {worst:.2}"
        ));
    }
    Ok(format!("N=3: {}", notes.join("; ")))
}

fn horizon_benefit() -> Check {
    let system = Arc::new(bundled_case("case5_demo").unwrap());
    let series = valley_peak_series();
    let mut results = Vec::new();
    for n in [1, 3, 6] {
        let r = run_mpc(
            system.clone(),
            &series,
            &MpcConfig::new(n, Solver::Centralized, 12),
        )
        .map_err(|e| format!("N={n}: {e}"))?;
        results.push((n, r.total_cost, r.total_ramping));
    }
    for w in results.windows(2) {
        let ((n0, c0, r0), (n1, c1, r1)) = (w[0], w[1]);
        ensure(c1 <= c0 * (1.0 + 1e-3), || {
            format!("cost N={n1} {c1} > N={n0} {c0}")
        })?;
        ensure(r1 <= r0, || format!("ramping N={n1} {r1} > N={n0} {r0}"))?;
    }
    Ok(results
        .iter()
        .map(|(n, c, r)| format!("N={n} cost {c:.2} ramping {r:.3}"))
        .collect::<Vec<_>>()
        .join(", "))
}

/// Point with positive slacks, negative inequality multipliers and
/// everything else drawn around plausible operating values.
fn random_point(p: &HorizonProblem, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut y = p.flat_start();
    for (i, v) in p.layout.vars.iter().enumerate() {
        y[i] = match v.kind {
            VarKind::Angle => rng.random_range(-0.3..0.3),
            VarKind::Voltage => rng.random_range(0.9..1.1),
            VarKind::Slack => rng.random_range(0.05..1.0),
            VarKind::InequalityMultiplier => rng.random_range(-2.0..-0.01),
            _ => rng.random_range(-1.0..1.0),
        };
    }
    y
}

fn numerical_suite() -> Check {
    let s = Setup::new("case5_demo");
    let mut p = s.problem(2);
    p.barrier_mu = 0.05;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    // (a) residual is the gradient of the barrier Lagrangian
    let mut worst_grad: f64 = 0.0;
    for _ in 0..20 {
        let y = random_point(&p, &mut rng);
        let r = p.eval_kkt_residual(&y);
        let mut yp = y.clone();
        for i in 0..y.len() {
            let h = 1e-6 * y[i].abs().max(1.0);
            yp[i] = y[i] + h;
            let up = p.barrier_lagrangian(&yp);
            yp[i] = y[i] - h;
            let down = p.barrier_lagrangian(&yp);
            yp[i] = y[i];
            let fd = (up - down) / (2.0 * h);
            worst_grad = worst_grad.max((fd - r[i]).abs() / r[i].abs().max(1.0));
        }
    }
    ensure(worst_grad < 1e-5, || {
        format!("(a) gradient error {worst_grad:e}")
    })?;

    // (b) Hessian-vector products against differences of the residual
    let mut worst_hv: f64 = 0.0;
    for _ in 0..20 {
        let y = random_point(&p, &mut rng);
        let kkt = p.assemble_hessian(&y);
        let v: Vec<f64> = (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hv = kkt.hessian.mul_vec(&v);
        let h = 1e-6;
        let shifted =
            |sign: f64| -> Vec<f64> { y.iter().zip(&v).map(|(a, b)| a + sign * h * b).collect() };
        let (rp, rm) = (
            p.eval_kkt_residual(&shifted(1.0)),
            p.eval_kkt_residual(&shifted(-1.0)),
        );
        let mut err: f64 = 0.0;
        let mut norm: f64 = 0.0;
        for i in 0..y.len() {
            err = err.max(((rp[i] - rm[i]) / (2.0 * h) - hv[i]).abs());
            norm = norm.max(hv[i].abs());
        }
        worst_hv = worst_hv.max(err / norm.max(1.0));
    }
    ensure(worst_hv < 1e-4, || {
        format!("(b) Hessian-vector error {worst_hv:e}")
    })?;

    // (c) affinity against a dense double loop
    let mut pc = s.problem(1);
    let y0 = pc.flat_start();
    let sol = solve_centralized(&mut pc, &y0, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    let kkt = pc.assemble_hessian(&sol.solution);
    let adm = s.system.admittance();
    let a = compute_affinity(&kkt, &adm, &pc.layout);
    let dense = kkt.hessian.to_dense();
    let nb = pc.layout.n_bus;
    let mut worst_aff: f64 = 0.0;
    for m in 0..nb {
        for n in 0..nb {
            let mut want = 0.0;
            if m != n {
                for i in 0..dense.nrows() {
                    for j in 0..dense.ncols() {
                        if pc.layout.bus_of(i) == m && pc.layout.bus_of(j) == n {
                            want += dense[(i, j)].abs();
                        }
                    }
                }
                want += adm[(m, n)].norm();
            }
            worst_aff = worst_aff.max((a.a[(m, n)] - want).abs() / f64::max(want, 1.0));
        }
    }
    ensure(worst_aff <= 1e-12, || {
        format!("(c) affinity error {worst_aff:e}")
    })?;

    // (d) block-diagonal affinity: clusters are exactly the blocks
    for (sizes, seed) in [
        (vec![3, 4], 1u64),
        (vec![2, 5, 3], 2),
        (vec![4, 4, 4, 2], 3),
    ] {
        let total: usize = sizes.iter().sum();
        let mut perm: Vec<usize> = (0..total).collect();
        for i in (1..total).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut a = DMatrix::zeros(total, total);
        let mut block = vec![0; total];
        let mut start = 0;
        for (b, &sz) in sizes.iter().enumerate() {
            for i in start..start + sz {
                block[perm[i]] = b;
                for j in start..start + sz {
                    if i != j {
                        a[(perm[i], perm[j])] = rng.random_range(0.5..2.0);
                    }
                }
            }
            start += sz;
        }
        let a = (&a + a.transpose()) * 0.5;
        let labels = spectral_labels(&a, sizes.len(), seed, None).map_err(|e| e.to_string())?;
        for i in 0..total {
            for j in 0..total {
                ensure((labels[i] == labels[j]) == (block[i] == block[j]), || {
                    format!("(d) blocks {sizes:?}: rows {i},{j} misassigned")
                })?;
            }
        }
    }

    // (e) feasibility of converged solutions, centralized and distributed
    let mut worst_eq: f64 = 0.0;
    let mut worst_ineq: f64 = 0.0;
    let mut checked = 0;
    for case in ["case5_demo", "case14_like"] {
        let s = Setup::new(case);
        for n in [1, 3] {
            let mut pc = s.problem(n);
            let y0 = pc.flat_start();
            let c = solve_centralized(&mut pc, &y0, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            let d = s.distributed(n, &s.spectral(2), Method::OcdC);
            for y in [&c.solution, &d.solution] {
                for e in &pc.layout.equalities {
                    worst_eq = worst_eq.max(pc.equality_value(y, e).abs());
                }
                for i in &pc.layout.inequalities {
                    worst_ineq = worst_ineq.max(-pc.inequality_value(y, i));
                }
                checked += 1;
            }
        }
    }
    ensure(worst_eq < 1e-3, || {
        format!("(e) equality mismatch {worst_eq:e}")
    })?;
    ensure(worst_ineq <= 1e-6, || {
        format!("(e) inequality violation {worst_ineq:e}")
    })?;

    Ok(format!(
        "(a) {worst_grad:.1e} (b) {worst_hv:.1e} (c) {worst_aff:.1e} (d) exact (e) {checked} solutions, mismatch {worst_eq:.1e}, violation {:.1e}",
        worst_ineq.max(0.0)
    ))
}

fn decoupled_equivalence() -> Check {
    let system = Arc::new(two_island_demo());
    let series = TimeSeries::constant(&system, 8, 1.0);
    let e0: Vec<f64> = system.storages.iter().map(|s| s.e_init).collect();
    let ids: Vec<usize> = system.buses.iter().map(|b| b.id).collect();
    let labels: Vec<usize> = ids.iter().map(|&id| usize::from(id > 10)).collect();
    let part = Partition::from_labels(&system, 2, &labels).map_err(|e| e.to_string())?;
    let n = 2;
    let fresh = || HorizonProblem::new(system.clone(), &series, 0, n, &e0).unwrap();
    let y0 = fresh().flat_start();

    let full = solve_centralized(&mut fresh(), &y0, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    ensure(full.converged, || "centralized did not converge".into())?;
    for method in [Method::Ocd, Method::OcdC] {
        let d = solve_distributed(
            &mut fresh(),
            &part,
            method,
            &y0,
            DEFAULT_TOL,
            DEFAULT_MAX_ITER,
        )
        .unwrap();
        ensure(d.iterations == full.iterations, || {
            format!(
                "{method}: {} vs {} iterations",
                d.iterations, full.iterations
            )
        })?;
    }
    // every intermediate iterate, recovered by stopping after k iterations
    for k in 1..=full.iterations {
        let c = solve_centralized(&mut fresh(), &y0, DEFAULT_TOL, k).unwrap();
        for method in [Method::Ocd, Method::OcdC] {
            let d = solve_distributed(&mut fresh(), &part, method, &y0, DEFAULT_TOL, k).unwrap();
            ensure(d.solution == c.solution, || {
                format!("{method}: iterate {k} differs from the centralized one")
            })?;
        }
    }
    Ok(format!(
        "{} iterates bit-identical across centralized, OCD and OCD-C",
        full.iterations
    ))
}

/// Runs the binary; exit code 1 (a solve did not converge) still produces
/// outputs and counts as a completed run.
fn run_cli(args: &[&str], out: &Path) -> Result<i32, String> {
    let status = Command::new(env!("CARGO_BIN_EXE_gridmpc"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "off")
        .stderr(std::process::Stdio::null())
        .stdout(std::process::Stdio::null())
        .status()
        .map_err(|e| e.to_string())?;
    match status.code() {
        Some(c @ (0 | 1)) => Ok(c),
        _ => Err(format!("{args:?} exited with {status}")),
    }
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Check {
    let runs: [&[&str]; 4] = [
        &[
            "partition",
            "--case",
            "case14_like",
            "--regions",
            "3",
            "--seed",
            "7",
        ],
        &[
            "solve",
            "--case",
            "case5_demo",
            "--horizon",
            "1,3",
            "--method",
            "centralized,ocd,ocd-c",
            "--partition",
            "sp,arbitrary",
        ],
        &[
            "compare",
            "--case",
            "case14_like",
            "--horizon",
            "1",
            "--steps",
            "3",
            "--partition",
            "sp,arbitrary",
        ],
        &[
            "mpc",
            "--case",
            "case5_demo",
            "--series",
            "case5_valley_peak",
            "--horizon",
            "1,3",
            "--method",
            "centralized,ocd-c",
            "--steps",
            "6",
        ],
    ];
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = 0;
    for (i, args) in runs.iter().enumerate() {
        let a = tmp.path().join(format!("{i}a"));
        let b = tmp.path().join(format!("{i}b"));
        let (ca, cb) = (run_cli(args, &a)?, run_cli(args, &b)?);
        ensure(ca == cb, || {
            format!("{}: exit codes {ca} and {cb}", args[0])
        })?;
        let (sa, sb) = (snapshot(&a), snapshot(&b));
        ensure(!sa.is_empty(), || format!("{} wrote nothing", args[0]))?;
        ensure(sa == sb, || {
            format!("{} outputs differ between runs", args[0])
        })?;
        files += sa.len();
    }
    Ok(format!(
        "4 commands, {files} files identical across two runs"
    ))
}
