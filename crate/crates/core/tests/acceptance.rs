//! Acceptance criteria 1–10, one verdict line each. Tolerances are fixed here, not
//! tuned per run.

use std::time::Instant;

use mvergodic::bsde::{solve_finite_bsde, BsdeConfig};
use mvergodic::control::{
    evaluate_cost_ergodic, evaluate_cost_finite, evaluate_cost_girsanov, hamiltonian, ControlPolicy, ZSource,
};
use mvergodic::coupling::{build_lyapunov, pi1, pi2, simulate_reflection_coupling, verify_lyapunov_inequality, CouplingConfig};
use mvergodic::ebsde::{extract_ergodic, ErgodicConfig, ErgodicSolution};
use mvergodic::ltb::{ltb1_experiment, ltb2_experiment, ltb3_experiment, LtbConfig, LtbTerminal};
use mvergodic::measure::{moment, wasserstein, wasserstein_assignment};
use mvergodic::model::{Constants, ProblemSpec};
use mvergodic::rng::{Channel, CounterStream};
use mvergodic::sde::{contraction_rate, measure_flow, simulate_mv};
use mvergodic::{preset, EmpiricalMeasure, MeasureFlow};

struct Verdict {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
    secs: f64,
}

fn run(id: usize, name: &'static str, f: impl FnOnce() -> (bool, String)) -> Verdict {
    let t = Instant::now();
    let (pass, detail) = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    let v = Verdict { id, name, pass, detail, secs: t.elapsed().as_secs_f64() };
    println!("[{}] {:>2} {:<28} {:>7.1}s  {}", if v.pass { "PASS" } else { "FAIL" }, v.id, v.name, v.secs, v.detail);
    v
}

fn x2_driver() -> ProblemSpec {
    preset("ou-attract").unwrap().with_driver(false, |x, _m, _z| x[0] * x[0]).with_terminal(|_x, _m| 0.0)
}

/// The high-precision extraction used by the long-time criteria.
fn ltb_ergodic(spec: &ProblemSpec, seed: u64) -> (ErgodicSolution, ErgodicConfig) {
    let mut cfg = ErgodicConfig::new(vec![0.1, 0.05, 0.025, 0.0125], 0.02, 2000, seed);
    cfg.n_invariant = 10_000;
    (extract_ergodic(spec, &cfg).unwrap(), cfg)
}

fn criterion_1() -> (bool, String) {
    let s = preset("ou-attract").unwrap();
    let fit = contraction_rate(&s, &EmpiricalMeasure::dirac(&[0.0]), &EmpiricalMeasure::dirac(&[1.0]), 0.01, 2.0, 10_000, 42, 2.0, 1).unwrap();
    let mut worst = 0.0f64;
    for t in [0.5, 1.0, 2.0] {
        let k = (t / 0.01f64).round() as usize;
        let oracle = (-1.5 * t).exp();
        worst = worst.max((fit.distances[k] - oracle).abs() / oracle);
    }
    (worst <= 0.05, format!("max relative W2 error {worst:.4} (tol 0.05), fitted rate {:.4}", fit.rate))
}

fn criterion_2() -> (bool, String) {
    let s = preset("sine-weak").unwrap();
    let flow = measure_flow(&s, &EmpiricalMeasure::dirac(&[0.0]), 0.01, 8.0, 2000, 42, 1).unwrap();
    let cfg = CouplingConfig { delta: 0.06, dt: 0.01, horizon: 8.0, n_paths: 1000, seed: 42, record_every: 25 };
    let run = simulate_reflection_coupling(&s, &flow, &flow, &[0.0], &[4.0], &cfg).unwrap();
    let transient = 1.0 / run.rate.max(1e-12);
    let mono = run.nonincreasing_after(transient, 2.0);
    (run.rate > 0.0 && mono, format!("fitted rate {:.4} > 0, E[r_t] nonincreasing after t={transient:.2} within 2 SE: {mono}", run.rate))
}

fn criterion_3() -> (bool, String) {
    let c = preset("sine-weak").unwrap().constants;
    let t = build_lyapunov(&c, 12.0, 1000).unwrap();
    let viol = t.invariant_violations(1e-6);
    let margin = verify_lyapunov_inequality(&t, |r| t.kappa.eval(r));
    let mut lin = 0.0f64;
    for (eta, ksx, s0) in [(1.5, 0.5, 1.0), (2.0, 0.0, 0.7)] {
        let cs = Constants { eta, k_s_x: ksx, sigma0: s0, ..Constants::default() };
        let tb = build_lyapunov(&cs, 5.0, 1000).unwrap();
        let slope = 2.0 * s0 * s0 / (eta - ksx);
        for (r, p) in tb.radii.iter().zip(&tb.phi) {
            lin = lin.max((p - slope * r).abs());
        }
    }
    let pass = viol.is_empty() && margin <= 1e-6 && lin <= 1e-8 && t.radii.len() >= 1000;
    (pass, format!("{} nodes, violations {}, worst margin {margin:.2e}, R=0 closed-form error {lin:.1e}", t.radii.len(), viol.len()))
}

fn criterion_4() -> (bool, String) {
    let s = preset("ou-attract").unwrap().with_driver(false, |_x, _m, _z| 0.0).with_terminal(|x, _m| x[0] * x[0]);
    let flow = measure_flow(&s, &EmpiricalMeasure::dirac(&[0.0]), 0.01, 1.0, 10_000, 42, 1).unwrap();
    let sol = solve_finite_bsde(&s, &flow, &[0.0], &BsdeConfig::new(0.01, 1.0, 10_000, 42)).unwrap();
    let oracle = (1.0 - (-2f64).exp()) / 2.0;
    let err = (sol.y0 - oracle).abs();
    (err <= 0.02, format!("Y0 = {:.5}, oracle {oracle:.5}, error {err:.5} (tol 0.02)", sol.y0))
}

fn criterion_5() -> (bool, String) {
    let s = x2_driver();
    let mut cfg = ErgodicConfig::new(vec![0.4, 0.2, 0.1, 0.05], 0.01, 1000, 42);
    cfg.n_invariant = 10_000;
    let e = extract_ergodic(&s, &cfg).unwrap();
    let l_ok = (e.lambda - 0.5).abs() <= 0.03;
    let u0 = e.u_bar(&[0.0]).abs();
    let sc = e.stationary_driver_mean(&s);
    let anchors = (e.lambda - e.lambda_unit_anchor).abs();
    let pass = l_ok && u0 <= 1e-12 && (sc - e.lambda).abs() <= 0.05 && anchors <= 0.05;
    (pass, format!("lambda {:.5} (0.5 ± 0.03), |u(0)| {u0:.1e}, E_mu*[f] {sc:.5}, anchor gap {anchors:.2e}", e.lambda))
}

fn criterion_6(erg: &ErgodicSolution, cfg: &ErgodicConfig) -> (bool, String) {
    let s = x2_driver();
    let flow = MeasureFlow::stationary(erg.mu_star.clone());
    let fit = ltb1_experiment(&s, erg, &flow, &[0.0], &LtbConfig::matching(cfg, vec![5.0, 10.0, 20.0])).unwrap();
    let mut worst = 0.0f64;
    for (t, r) in fit.horizons.iter().zip(&fit.residuals) {
        let oracle = 0.25 * (1.0 - (-2.0 * t).exp()) / t;
        worst = worst.max((r - oracle).abs() / oracle);
    }
    (worst <= 0.3, format!("residuals {:?}, worst relative error {worst:.3} (tol 0.3), C = {:.4}", fmt(&fit.residuals), fit.c))
}

fn criterion_7(erg: &ErgodicSolution, cfg: &ErgodicConfig) -> (bool, String) {
    let s = x2_driver();
    let flow = MeasureFlow::stationary(erg.mu_star.clone());
    let lc = LtbConfig::matching(cfg, vec![2.0, 4.0, 6.0, 8.0]);
    let exact = ltb2_experiment(&s, erg, &flow, &[0.0], &lc, LtbTerminal::ErgodicValue).unwrap();
    let band = exact.column("band").unwrap();
    let exact_ok = exact.values.iter().zip(band).all(|(v, b)| v.abs() <= 2.0 * b);
    let g = s.clone().with_terminal(|x, _m| x[0] * x[0]);
    let f0 = ltb2_experiment(&g, erg, &flow, &[0.0], &lc, LtbTerminal::Model).unwrap();
    let f1 = ltb2_experiment(&g, erg, &flow, &[1.0], &lc, LtbTerminal::Model).unwrap();
    let decay_ok = f0.eta.is_some_and(|e| e > 0.0) && f0.strictly_decreasing();
    let (l0, l1) = (f0.ell.unwrap(), f1.ell.unwrap());
    let lerr = (f0.ell_err.powi(2) + f1.ell_err.powi(2)).sqrt();
    let ell_ok = (l0 - l1).abs() <= 2.0 * lerr;
    (
        exact_ok && decay_ok && ell_ok,
        format!(
            "g=u_bar max|v|/band {:.2}; g=x^2 residuals {:?} eta {:.3}; ell(0) {l0:.7} ell(1) {l1:.7} gap {:.1e} vs 2x err {:.1e}",
            exact.scalar("max_abs_v_over_band").unwrap(),
            fmt(&f0.residuals),
            f0.eta.unwrap_or(f64::NAN),
            (l0 - l1).abs(),
            2.0 * lerr
        ),
    )
}

fn criterion_8(erg: &ErgodicSolution, cfg: &ErgodicConfig, lq: &ErgodicSolution, lq_cfg: &ErgodicConfig) -> (bool, String) {
    let s = x2_driver();
    let flow = MeasureFlow::stationary(erg.mu_star.clone());
    let exact = ltb3_experiment(&s, erg, &flow, &[0.5], &LtbConfig::matching(cfg, vec![1.0, 2.0, 4.0]), LtbTerminal::ErgodicValue).unwrap();
    let gap = exact.scalar("max_grad_gap").unwrap();
    let noise = exact.scalar("grad_noise").unwrap();
    let c = preset("control-lq").unwrap();
    let lflow = MeasureFlow::stationary(lq.mu_star.clone());
    let fit = ltb3_experiment(&c, lq, &lflow, &[1.0], &LtbConfig::matching(lq_cfg, vec![0.5, 1.0, 1.5, 2.0]), LtbTerminal::Model).unwrap();
    let pass = gap <= 2.0 * noise && fit.strictly_decreasing() && fit.eta.is_some_and(|e| e > 0.0);
    (
        pass,
        format!(
            "g=u_bar gradient gap {gap:.1e} vs 2x noise {:.1e}; control-lq |Z^T-Z| {:?} eta {:.3}",
            2.0 * noise,
            fmt(&fit.residuals),
            fit.eta.unwrap_or(f64::NAN)
        ),
    )
}

fn criterion_9(lq: &ErgodicSolution, lq_cfg: &ErgodicConfig) -> (bool, String) {
    let c = preset("control-lq").unwrap();
    let mu = EmpiricalMeasure::dirac(&[0.0]);
    let mut ham = 0.0f64;
    for (x, z, v, a) in [(0.0, 0.0, 0.0, 0.0), (1.0, 2.0, 0.0, -1.0), (0.0, 4.0, -3.0, -1.0)] {
        let (hv, ha) = hamiltonian(&c, &[x], &mu, &[z]).unwrap();
        ham = ham.max((hv - v).abs()).max((ha[0] - a).abs());
    }
    let flow = MeasureFlow::stationary(lq.mu_star.clone());
    let x0 = [1.0];
    let horizon = 2.0;
    let dt = lq_cfg.dt;
    let sol = solve_finite_bsde(&c, &flow, &x0, &BsdeConfig { horizon, ..lq_cfg.bsde_config(horizon, 0.0) }).unwrap();
    let bench = (sol.y0, 0.0);
    let opt = evaluate_cost_finite(&c, &ControlPolicy::Feedback(ZSource::Finite(&sol)), &x0, &flow, horizon, dt, 10_000, 42, bench).unwrap();
    let mut st = CounterStream::new(42, Channel::Control, 0, 0);
    let mut all_dom = true;
    let mut worst = f64::INFINITY;
    for _ in 0..10 {
        let a = [2.0 * st.uniform() - 1.0];
        let r = evaluate_cost_finite(&c, &ControlPolicy::Constant(&a), &x0, &flow, horizon, dt, 10_000, 42, bench).unwrap();
        all_dom &= r.dominates();
        worst = worst.min(r.gap / r.combined_err());
    }
    let erg = evaluate_cost_ergodic(&c, &ControlPolicy::Feedback(ZSource::Ergodic(lq)), &x0, &flow, 30.0, dt, 4000, 42, (lq.lambda, lq.lambda_err)).unwrap();
    let mut feedback_ok = true;
    for t in [0.5, 1.0, 2.0, 4.0] {
        let s = solve_finite_bsde(&c, &flow, &x0, &BsdeConfig { horizon: t, ..lq_cfg.bsde_config(t, 0.0) }).unwrap();
        let (zt, _) = mvergodic::bsde::z_from_gradient(&s, &c, &flow, 0.0, &x0);
        let zb = lq.grad_u_bar(&x0)[0];
        let at = hamiltonian(&c, &x0, flow.at(0.0), &zt).unwrap().1[0];
        let ab = hamiltonian(&c, &x0, flow.at(0.0), &[zb]).unwrap().1[0];
        feedback_ok &= (at - ab).abs() <= 0.5 * (zt[0] - zb).abs() + 1e-12;
    }
    let pass = ham <= 1e-10 && opt.matches() && all_dom && (erg.estimate - lq.lambda).abs() <= 0.05 && feedback_ok;
    (
        pass,
        format!(
            "hamiltonian err {ham:.1e}; J^T {:.4} vs Y0 {:.4} ({:.2} SE); random controls min gap {worst:.1} SE; ergodic J {:.4} vs lambda {:.4}; feedback gap bound {feedback_ok}",
            opt.estimate,
            sol.y0,
            opt.gap / opt.combined_err(),
            erg.estimate,
            lq.lambda
        ),
    )
}

fn criterion_10() -> (bool, String) {
    let mut st = CounterStream::new(42, Channel::Audit, 0, 0);
    let cloud = |d: usize, n: usize, shift: f64, st: &mut CounterStream| {
        EmpiricalMeasure::uniform(d, (0..n * d).map(|_| shift + st.normal()).collect()).unwrap()
    };
    // Metric axioms, W1 ≤ W2, 1-D fast path against the assignment solver.
    let mut metric_ok = true;
    let mut fast_vs_assign = 0.0f64;
    for case in 0..20 {
        let d = 1 + case % 2;
        let (a, b, c) = (cloud(d, 40, 0.0, &mut st), cloud(d, 40, 0.5, &mut st), cloud(d, 40, -0.3, &mut st));
        let ab = wasserstein(&a, &b, 2.0).unwrap();
        let ba = wasserstein(&b, &a, 2.0).unwrap();
        let ac = wasserstein(&a, &c, 2.0).unwrap();
        let cb = wasserstein(&c, &b, 2.0).unwrap();
        metric_ok &= (ab - ba).abs() <= 1e-12 && ab <= ac + cb + 1e-12 && wasserstein(&a, &a, 2.0).unwrap() <= 1e-12;
        metric_ok &= wasserstein(&a, &b, 1.0).unwrap() <= ab + 1e-12;
        if d == 1 {
            fast_vs_assign = fast_vs_assign.max((ab - wasserstein_assignment(&a, &b, 2.0).unwrap()).abs());
        }
    }
    metric_ok &= fast_vs_assign <= 1e-10;
    // Thread-count independence.
    let s = preset("sine-weak").unwrap();
    let theta = EmpiricalMeasure::dirac(&[0.5]);
    let with = |k| {
        rayon::ThreadPoolBuilder::new().num_threads(k).build().unwrap().install(|| simulate_mv(&s, &theta, 0.01, 1.0, 3000, 42).unwrap().0.terminal().to_vec())
    };
    let det_ok = with(1) == with(3);
    // Mollifier identity.
    let mut moll = 0.0f64;
    for i in 0..100_000 {
        let r = i as f64 * 1e-6;
        moll = moll.max((pi1(r, 0.06).powi(2) + pi2(r, 0.06).powi(2) - 1.0).abs());
    }
    // Moment boundedness: the sup over [0, 50/Λ] stays below 1.5× the running max on [0, 5/Λ].
    let mut mom_ok = true;
    let mut mom_worst = 0.0f64;
    for name in ["ou-attract", "ou-repel", "sine-weak", "control-lq"] {
        let s = preset(name).unwrap();
        let rate = s.contraction_rate_hint();
        let horizon = (50.0 / rate / 0.01).ceil() * 0.01;
        let flow = measure_flow(&s, &EmpiricalMeasure::dirac(&[2.0]), 0.01, horizon, 1000, 42, 10).unwrap();
        for p in [2.0, 4.0] {
            let m: Vec<f64> = flow.measures().iter().map(|mu| moment(mu, p).unwrap().powf(p)).collect();
            let early = flow.times().iter().zip(&m).filter(|(t, _)| **t <= 5.0 / rate).map(|(_, v)| *v).fold(0.0, f64::max);
            let sup = m.iter().cloned().fold(0.0, f64::max);
            mom_worst = mom_worst.max(sup / early);
            mom_ok &= sup <= 1.5 * early;
        }
    }
    // Girsanov reweighting against direct simulation of the shifted drift.
    let lq = preset("control-lq").unwrap();
    let flow = measure_flow(&lq, &EmpiricalMeasure::dirac(&[0.0]), 0.02, 1.0, 2000, 42, 1).unwrap();
    let mut gir_ok = true;
    for a in [0.1, -0.2] {
        let act = [a];
        let p = ControlPolicy::Constant(&act);
        let d = evaluate_cost_finite(&lq, &p, &[0.0], &flow, 1.0, 0.02, 20_000, 42, (0.0, 0.0)).unwrap();
        let g = evaluate_cost_girsanov(&lq, &p, &[0.0], &flow, 1.0, 0.02, 20_000, 43, (0.0, 0.0)).unwrap();
        gir_ok &= (d.estimate - g.estimate).abs() <= 3.0 * (d.std_err.powi(2) + g.std_err.powi(2)).sqrt();
    }
    let pass = metric_ok && det_ok && moll <= 1e-14 && mom_ok && gir_ok;
    (
        pass,
        format!("metric {metric_ok} (1D vs assignment {fast_vs_assign:.1e}), thread determinism {det_ok}, mollifier {moll:.1e}, moments {mom_ok} (sup/early {mom_worst:.3}), girsanov {gir_ok}"),
    )
}

fn fmt(v: &[f64]) -> Vec<String> {
    v.iter().map(|x| format!("{x:.2e}")).collect()
}

fn main() {
    let start = Instant::now();
    let mut verdicts = vec![
        run(1, "contraction", criterion_1),
        run(2, "weak-regime coupling", criterion_2),
        run(3, "lyapunov lemma", criterion_3),
        run(4, "bsde oracle", criterion_4),
        run(5, "ergodic extraction", criterion_5),
    ];
    let (erg, cfg) = ltb_ergodic(&x2_driver(), 42);
    let (lq, lq_cfg) = ltb_ergodic(&preset("control-lq").unwrap(), 42);
    verdicts.push(run(6, "ltb1", || criterion_6(&erg, &cfg)));
    verdicts.push(run(7, "ltb2", || criterion_7(&erg, &cfg)));
    verdicts.push(run(8, "ltb3", || criterion_8(&erg, &cfg, &lq, &lq_cfg)));
    verdicts.push(run(9, "control", || criterion_9(&lq, &lq_cfg)));
    verdicts.push(run(10, "property suites", criterion_10));
    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    println!("acceptance: {}/{} passed in {:.0}s", verdicts.len() - failed.len(), verdicts.len(), start.elapsed().as_secs_f64());
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
