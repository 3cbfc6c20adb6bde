//! One pipeline per subcommand. Each writes CSVs and a key=value report through
//! [`Ctx`] and records pass/fail verdicts.

use std::fmt::Write as _;
use std::path::PathBuf;

use mvergodic::bsde::{monte_carlo_value, solve_finite_bsde, z_from_gradient, BsdeConfig, Scheme};
use mvergodic::control::{
    evaluate_cost_ergodic, evaluate_cost_finite, evaluate_cost_girsanov, hamiltonian, ocp_longtime, ControlPolicy, CostReport,
    ZSource,
};
use mvergodic::coupling::{build_lyapunov, default_delta, simulate_reflection_coupling, verify_lyapunov_inequality, CouplingConfig};
use mvergodic::ebsde::{extract_ergodic, lambda_by_time_average, ErgodicConfig, ErgodicSolution, Extrapolation};
use mvergodic::ltb::{ltb1_experiment, ltb2_experiment, ltb3_experiment, theta_flow, DecayFit, LtbConfig, LtbTerminal};
use mvergodic::measure::{invariant_measure, moment, wasserstein};
use mvergodic::model::audit;
use mvergodic::model::scenario::Scenario;
use mvergodic::rng::{Channel, CounterStream};
use mvergodic::sde::{contraction_rate, flow_property_check, measure_flow, simulate_decoupled, simulate_mv, Start};
use mvergodic::{EmpiricalMeasure, Error, MeasureFlow, ProblemSpec, Result};

use crate::manifest::{fnv1a64, FileEntry, VerdictLine};
use crate::params::Params;

#[cfg(test)]
pub const SUBCOMMANDS: [&str; 11] =
    ["audit", "simulate", "invariant", "coupling", "bsde", "ebsde", "ltb1", "ltb2", "ltb3", "control", "report"];

pub struct Ctx {
    pub out: PathBuf,
    pub params: Params,
    pub files: Vec<FileEntry>,
    pub verdicts: Vec<VerdictLine>,
}

impl Ctx {
    pub fn new(out: PathBuf, params: Params) -> Self {
        Self { out, params, files: Vec::new(), verdicts: Vec::new() }
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        std::fs::write(self.out.join(name), contents)?;
        self.files.retain(|f| f.name != name);
        self.files.push(FileEntry { name: name.to_string(), bytes: contents.len(), checksum: fnv1a64(contents.as_bytes()) });
        Ok(())
    }

    pub fn check(&mut self, name: &str, pass: bool, detail: String) {
        self.verdicts.push(VerdictLine { name: name.to_string(), pass, detail });
    }
}

/// Rounds a horizon up to a whole number of steps.
fn on_grid(t: f64, dt: f64) -> f64 {
    (t / dt - 1e-9).ceil() * dt
}

fn point(spec: &ProblemSpec, x: f64) -> Vec<f64> {
    vec![x; spec.dim]
}

pub fn run(name: &str, sc: &Scenario, ctx: &mut Ctx) -> Result<()> {
    match name {
        "audit" => run_audit(sc, ctx),
        "simulate" => run_simulate(sc, ctx),
        "invariant" => run_invariant(sc, ctx),
        "coupling" => run_coupling(sc, ctx),
        "bsde" => run_bsde(sc, ctx),
        "ebsde" => run_ebsde(sc, ctx),
        "ltb1" | "ltb2" | "ltb3" => run_ltb(name, sc, ctx),
        "control" => run_control(sc, ctx),
        other => Err(Error::Configuration(format!("unknown subcommand `{other}`"))),
    }
}

fn seed(ctx: &mut Ctx) -> Result<u64> {
    ctx.params.get("seed", 42u64)
}

fn run_audit(sc: &Scenario, ctx: &mut Ctx) -> Result<()> {
    let seed = seed(ctx)?;
    let n = ctx.params.get("samples", 1000usize)?;
    let rep = audit(&sc.spec, n, seed);
    ctx.write("audit.csv", &rep.to_csv())?;
    ctx.write("audit_witnesses.csv", &rep.witnesses_csv())?;
    let mut r = String::new();
    let _ = writeln!(r, "spec={}\nregime={}\nsamples={}\nlambda={}\ngrowth_constant={}", rep.spec, rep.regime, rep.n_samples, rep.lambda, rep.growth_constant);
    if let Some(w) = rep.weak_rate {
        let _ = writeln!(r, "weak_rate={w}");
    }
    let _ = writeln!(r, "passed={}", rep.passed());
    ctx.write("audit_report.txt", &r)?;
    let failing: Vec<&str> = rep.checks.iter().filter(|c| c.verdict.to_string() == "fail").map(|c| c.name).collect();
    ctx.check("regime_checks", rep.passed(), format!("failing={failing:?}"));
    Ok(())
}

fn run_simulate(sc: &Scenario, ctx: &mut Ctx) -> Result<()> {
    let seed = seed(ctx)?;
    let p = &mut ctx.params;
    let n = p.get("particles", 10_000usize)?;
    let dt: f64 = p.get("dt", 0.01)?;
    let horizon = p.get("horizon", 5.0)?;
    let paths = p.get("paths", 1000usize)?;
    let x0 = p.get("x0", 0.0)?;
    let s = p.get("s", on_grid(horizon / 2.0, dt))?;
    let spec = &sc.spec;
    let theta = sc.theta.to_measure(seed)?;
    let (bundle, flow) = simulate_mv(spec, &theta, dt, horizon, n, seed)?;
    ctx.write("simulate_paths.csv", &bundle.to_csv(20))?;
    let mut m = String::from("time,mean1,moment2,moment4\n");
    for (t, mu) in flow.times().iter().zip(flow.measures()) {
        let _ = writeln!(m, "{t},{:e},{:e},{:e}", mu.mean()[0], moment(mu, 2.0)?.powi(2), moment(mu, 4.0)?.powi(4));
    }
    ctx.write("simulate_moments.csv", &m)?;
    let dec = simulate_decoupled(spec, &Start::Point(point(spec, x0)), &flow, None, dt, horizon, paths, seed.wrapping_add(1))?;
    ctx.write("simulate_decoupled.csv", &dec.to_csv(20))?;
    let fc = flow_property_check(spec, &theta, s, horizon, dt, n.min(4000), seed.wrapping_add(2))?;
    let terminal = flow.terminal();
    let mut r = String::new();
    let _ = writeln!(r, "particles={n}\nsteps={}\nterminal_mean={}\nterminal_second_moment={}", bundle.n_records() - 1, terminal.mean()[0], terminal.second_moment());
    let _ = writeln!(r, "decoupled_terminal_mean={}", dec.measure_at(dec.n_records() - 1).mean()[0]);
    let _ = writeln!(r, "flow_property_discrepancy={}\nflow_property_reference={}", fc.discrepancy, fc.reference);
    ctx.write("simulate_report.txt", &r)?;
    ctx.check("finite", bundle.terminal().iter().all(|v| v.is_finite()), "all terminal states finite".into());
    ctx.check(
        "flow_property",
        fc.discrepancy <= 3.0 * fc.reference.max(1e-12),
        format!("discrepancy={:.3e} reference={:.3e}", fc.discrepancy, fc.reference),
    );
    Ok(())
}

fn default_burn(spec: &ProblemSpec, dt: f64) -> f64 {
    let rate = spec.contraction_rate_hint();
    on_grid(if rate > 0.0 { (10.0 / rate).max(5.0) } else { 20.0 }, dt)
}

fn run_invariant(sc: &Scenario, ctx: &mut Ctx) -> Result<()> {
    let seed = seed(ctx)?;
    let spec = &sc.spec;
    let p = &mut ctx.params;
    let n = p.get("particles", 10_000usize)?;
    let dt: f64 = p.get("dt", 0.01)?;
    let t_burn = p.get("t_burn", default_burn(spec, dt))?;
    let a = invariant_measure(spec, n, dt, t_burn, seed)?;
    let b = invariant_measure(spec, n, dt, t_burn, seed.wrapping_add(1))?;
    let w2 = wasserstein(&a.measure, &b.measure, 2.0)?;
    ctx.write("invariant_measure.csv", &a.measure.to_csv())?;
    let mut r = String::new();
    let _ = writeln!(r, "particles={n}\nt_burn={t_burn}\nmean={}\nsecond_moment={}", a.measure.mean()[0], a.measure.second_moment());
    let _ = writeln!(r, "stationarity_w2={}\nstationarity_tolerance={}\nw2_two_seeds={w2}", a.stationarity_w2, a.stationarity_tolerance);
    if let Some(w) = &a.warning {
        let _ = writeln!(r, "warning={w}");
    }
    ctx.write("invariant_report.txt", &r)?;
    let tol = a.stationarity_tolerance;
    ctx.check("two_seeds", w2 <= 3.0 * tol, format!("w2={w2:.3e} tol={tol:.3e}"));
    ctx.check("stationary", a.warning.is_none(), format!("stationarity_w2={:.3e}", a.stationarity_w2));
    Ok(())
}

fn run_coupling(sc: &Scenario, ctx: &mut Ctx) -> Result<()> {
    let seed = seed(ctx)?;
    let spec = &sc.spec;
    let p = &mut ctx.params;
    let r_max: f64 = p.get("r_max", 12.0)?;
    let grid = p.get("grid", 1000usize)?;
    let dt: f64 = p.get("dt", 0.01)?;
    let horizon: f64 = p.get("horizon", 8.0)?;
    let n = p.get("particles", 2000usize)?;
    let paths = p.get("paths", 1000usize)?;
    let x0 = p.get("x0", 0.0)?;
    let x0p = p.get("x0_prime", 4.0)?;
    let delta = p.get("delta", default_delta(&spec.constants))?;

    let table = build_lyapunov(&spec.constants, r_max, grid)?;
    let viol = table.invariant_violations(1e-6);
    let margin = verify_lyapunov_inequality(&table, |r| table.kappa.eval(r));
    ctx.write("lyapunov.csv", &table.to_csv())?;

    let (a, b) = (point(spec, x0), point(spec, x0p));
    let every = ((horizon / dt / 200.0).round() as usize).max(1);
    let fit = contraction_rate(spec, &EmpiricalMeasure::dirac(&a), &EmpiricalMeasure::dirac(&b), dt, horizon, n, seed, 2.0, every)?;
    ctx.write("contraction.csv", &fit.to_csv())?;

    let theta = sc.theta.to_measure(seed)?;
    let flow = measure_flow(spec, &theta, dt, horizon, n, seed.wrapping_add(2), 1)?;
    let cfg = CouplingConfig { delta, dt, horizon, n_paths: paths, seed: seed.wrapping_add(3), record_every: 25 };
    let run = simulate_reflection_coupling(spec, &flow, &flow, &a, &b, &cfg)?;
    ctx.write("coupling_radii.csv", &run.to_csv(&spec.name))?;

    let mut r = String::new();
    let _ = writeln!(r, "lyapunov_nodes={}\nlyapunov_violations={}\nlyapunov_margin={margin}\nlower_slope={}", table.radii.len(), viol.len(), table.lower_slope());
    let _ = writeln!(r, "contraction_rate={}\nrate_hint={}", fit.rate, spec.contraction_rate_hint());
    let _ = writeln!(r, "reflection_rate={}\nreflection_prefactor={}\ndelta={delta}", run.rate, run.prefactor);
    if let Some(note) = run.note.as_ref().or(fit.note.as_ref()) {
        let _ = writeln!(r, "note={note}");
    }
    ctx.write("coupling_report.txt", &r)?;
    ctx.check("lyapunov", viol.is_empty() && margin <= 1e-6, format!("violations={} margin={margin:.2e}", viol.len()));
    let mono = run.rate > 0.0 && run.nonincreasing_after(1.0 / run.rate, 2.0);
    ctx.check("reflection_decay", mono, format!("rate={:.4}", run.rate));
    Ok(())
}

fn bsde_config(p: &mut Params, dt: f64, horizon: f64, n: usize, seed: u64) -> Result<BsdeConfig> {
    let degree = p.maybe::<usize>("degree")?;
    let picard = p.get("picard", 1usize)?;
    let scheme: Scheme = p.get("scheme", Scheme::Quadrature)?;
    Ok(BsdeConfig { degree, picard, scheme, ..BsdeConfig::new(dt, horizon, n, seed) })
}

fn run_bsde(sc: &Scenario, ctx: &mut Ctx) -> Result<()> {
    let seed = seed(ctx)?;
    let spec = &sc.spec;
    let p = &mut ctx.params;
    let n = p.get("particles", 10_000usize)?;
    let dt: f64 = p.get("dt", 0.01)?;
    let horizon = p.get("horizon", 1.0)?;
    let x0 = point(spec, p.get("x0", 0.0)?);
    let cfg = bsde_config(p, dt, horizon, n, seed)?;
    let theta = sc.theta.to_measure(seed)?;
    let flow = measure_flow(spec, &theta, dt, horizon, n, seed.wrapping_add(1), 1)?;
    let sol = solve_finite_bsde(spec, &flow, &x0, &cfg)?;
    let (z0, _) = z_from_gradient(&sol, spec, &flow, 0.0, &x0);
    ctx.write("bsde_nodes.csv", &sol.to_csv())?;
    let mut r = sol.report();
    let _ = writeln!(r, "z0_gradient={z0:?}");
    ctx.check("picard", !sol.picard_warning, format!("passes={}", cfg.picard));
    if !spec.driver_uses_z {
        let (mc, se) = monte_carlo_value(spec, &flow, &x0, horizon, dt, n, seed.wrapping_add(2))?;
        let diff = (sol.y0 - mc).abs();
        let _ = writeln!(r, "monte_carlo={mc}\nmonte_carlo_se={se}");
        ctx.check("monte_carlo", diff <= (3.0 * se).max(0.02), format!("y0={:.5} mc={mc:.5} se={se:.2e}", sol.y0));
    }
    ctx.write("bsde_report.txt", &r)?;
    Ok(())
}

/// Ergodic extraction with defaults tuned for the vanishing-discount limit alone.
fn ergodic(sc: &Scenario, p: &mut Params, seed: u64, long_time: bool) -> Result<(ErgodicSolution, ErgodicConfig)> {
    let (alphas, dt, n): (&[f64], f64, usize) =
        if long_time { (&[0.1, 0.05, 0.025, 0.0125], 0.02, 2000) } else { (&[0.4, 0.2, 0.1, 0.05], 0.01, 1000) };
    let alphas = p.list("alphas", alphas)?;
    let dt = p.get("dt", dt)?;
    let n = p.get("particles", n)?;
    let mut cfg = ErgodicConfig::new(alphas, dt, n, seed);
    cfg.degree = p.maybe("degree")?;
    cfg.picard = p.get("picard", 1usize)?;
    cfg.scheme = p.get("scheme", Scheme::Quadrature)?;
    cfg.extrapolation = p.get("extrapolation", Extrapolation::Polynomial)?;
    cfg.n_invariant = p.get("invariant_particles", 10_000usize)?;
    cfg.t_burn = p.maybe("t_burn")?;
    Ok((extract_ergodic(&sc.spec, &cfg)?, cfg))
}

fn run_ebsde(sc: &Scenario, ctx: &mut Ctx) -> Result<()> {
    let seed = seed(ctx)?;
    let spec = &sc.spec;
    let (erg, cfg) = ergodic(sc, &mut ctx.params, seed, false)?;
    let rate = spec.contraction_rate_hint();
    let p = &mut ctx.params;
    let t_long = p.get("t_long", on_grid(if rate > 0.0 { (30.0 / rate).max(20.0) } else { 40.0 }, cfg.dt))?;
    let n_avg = p.get("paths", 2000usize)?;
    let theta = sc.theta.to_measure(seed)?;
    let zeta = spec.driver_uses_z.then_some(&erg.zeta_bar);
    let avg = lambda_by_time_average(spec, &theta, zeta, t_long, cfg.dt, n_avg, seed.wrapping_add(1))?;

    ctx.write("ebsde_trace.csv", &erg.trace_csv())?;
    let mut grid = String::from("x,u_bar,u_bar_err,grad_u_bar,zeta_bar\n");
    for i in 0..=60 {
        let x = point(spec, -3.0 + 0.1 * i as f64);
        let _ = writeln!(grid, "{},{:e},{:e},{:e},{:e}", x[0], erg.u_bar(&x), erg.u_bar_err(&x), erg.grad_u_bar(&x)[0], erg.zeta_bar(&x)[0]);
    }
    ctx.write("ebsde_u_bar.csv", &grid)?;
    ctx.write("ebsde_mu_star.csv", &erg.mu_star.to_csv())?;
    let mut r = erg.report(spec);
    let _ = writeln!(r, "time_average_lambda={}\ntime_average_se={}\ntime_average_horizon={}", avg.lambda, avg.std_err, avg.horizon);
    for w in &erg.warnings {
        let _ = writeln!(r, "warning={w}");
    }
    ctx.write("ebsde_report.txt", &r)?;

    let origin = point(spec, 0.0);
    let u0 = erg.u_bar(&origin).abs();
    ctx.check("normalization", u0 <= 1e-12, format!("u_bar(0)={u0:.1e}"));
    let sc_mean = erg.stationary_driver_mean(spec);
    ctx.check("self_consistency", (sc_mean - erg.lambda).abs() <= 0.05, format!("lambda={:.5} E_mu*[f]={sc_mean:.5}", erg.lambda));
    let gap = (erg.lambda - erg.lambda_unit_anchor).abs();
    ctx.check("anchors", gap <= 0.05, format!("gap={gap:.2e}"));
    Ok(())
}

fn ltb_flow(sc: &Scenario, p: &mut Params, erg: &ErgodicSolution, dt: f64, horizon: f64, seed: u64) -> Result<MeasureFlow> {
    let kind = p.get("flow", "stationary".to_string())?;
    match kind.as_str() {
        "stationary" => theta_flow(&sc.spec, None, erg, dt, horizon, 1, seed),
        "theta" => {
            let n = p.get("flow_particles", 10_000usize)?;
            let theta = sc.theta.to_measure(seed)?;
            theta_flow(&sc.spec, Some(&theta), erg, dt, horizon, n, seed.wrapping_add(7))
        }
        other => Err(Error::Configuration(format!("flow must be `stationary` or `theta`, got `{other}`"))),
    }
}

fn terminal(p: &mut Params) -> Result<LtbTerminal> {
    match p.get("terminal", "model".to_string())?.as_str() {
        "model" => Ok(LtbTerminal::Model),
        "ergodic" => Ok(LtbTerminal::ErgodicValue),
        other => Err(Error::Configuration(format!("terminal must be `model` or `ergodic`, got `{other}`"))),
    }
}

fn write_fit(ctx: &mut Ctx, name: &str, fit: &DecayFit) -> Result<()> {
    ctx.write(&format!("{name}.csv"), &fit.to_csv())?;
    ctx.write(&format!("{name}_report.txt"), &fit.report())
}

fn run_ltb(name: &str, sc: &Scenario, ctx: &mut Ctx) -> Result<()> {
    let seed = seed(ctx)?;
    let spec = &sc.spec;
    let (erg, ecfg) = ergodic(sc, &mut ctx.params, seed, true)?;
    let p = &mut ctx.params;
    let grid: &[f64] = match name {
        "ltb1" => &[5.0, 10.0, 20.0],
        "ltb2" => &[2.0, 4.0, 6.0, 8.0],
        _ => &[1.0, 2.0, 4.0],
    };
    let horizons = p.list("t_grid", grid)?;
    let x0 = point(spec, p.get("x0", 0.0)?);
    let cfg = LtbConfig::matching(&ecfg, horizons.clone());
    let flow = ltb_flow(sc, p, &erg, ecfg.dt, horizons.last().copied().unwrap_or(1.0), seed)?;
    match name {
        "ltb1" => {
            let fit = ltb1_experiment(spec, &erg, &flow, &x0, &cfg)?;
            write_fit(ctx, name, &fit)?;
            let inside = fit.scalar("within_envelope") == Some(1.0);
            ctx.check("inverse_t", fit.passes() && inside, format!("C={:.4} envelope={:?}", fit.c, fit.scalar("envelope")));
        }
        "ltb2" => {
            let term = terminal(p)?;
            let fit = ltb2_experiment(spec, &erg, &flow, &x0, &cfg, term)?;
            write_fit(ctx, name, &fit)?;
            if term == LtbTerminal::ErgodicValue {
                let ratio = fit.scalar("max_abs_v_over_band").unwrap_or(f64::INFINITY);
                ctx.check("exact_solution", ratio <= 2.0, format!("max|v|/band={ratio:.3}"));
            } else {
                ctx.check(
                    "exponential_decay",
                    fit.passes() && fit.strictly_decreasing(),
                    format!("eta={:?} ell={:?} residuals={:?}", fit.eta, fit.ell, fit.residuals),
                );
            }
        }
        _ => {
            let term = terminal(p)?;
            let fit = ltb3_experiment(spec, &erg, &flow, &x0, &cfg, term)?;
            write_fit(ctx, name, &fit)?;
            if term == LtbTerminal::ErgodicValue {
                let gap = fit.scalar("max_grad_gap").unwrap_or(f64::INFINITY);
                let noise = fit.scalar("grad_noise").unwrap_or(0.0);
                ctx.check("exact_gradient", gap <= 2.0 * noise, format!("gap={gap:.2e} noise={noise:.2e}"));
            } else {
                ctx.check(
                    "gradient_decay",
                    fit.passes() && fit.strictly_decreasing(),
                    format!("eta={:?} residuals={:?}", fit.eta, fit.residuals),
                );
            }
        }
    }
    Ok(())
}

fn run_control(sc: &Scenario, ctx: &mut Ctx) -> Result<()> {
    let seed = seed(ctx)?;
    let spec = &sc.spec;
    let cs = spec.control_set.clone().ok_or_else(|| Error::Configuration("the scenario declares no control set".into()))?;
    let (erg, ecfg) = ergodic(sc, &mut ctx.params, seed, true)?;
    let p = &mut ctx.params;
    let dt = ecfg.dt;
    let horizon = p.get("horizon", 2.0)?;
    let paths = p.get("paths", 10_000usize)?;
    let n_random = p.get("random_controls", 10usize)?;
    let t_long = p.get("t_long", 30.0)?;
    let x0 = point(spec, p.get("x0", 1.0)?);
    let horizons = p.list("t_grid", &[0.5, 1.0, 1.5, 2.0])?;
    let ell_grid = p.list("ell_grid", &[2.0, 4.0, 6.0, 8.0])?;
    let t_max = horizons.iter().chain(&ell_grid).cloned().fold(horizon, f64::max);
    let flow = ltb_flow(sc, p, &erg, dt, t_max, seed)?;
    let mu0 = flow.at(0.0).clone();

    let mut ham = String::from("x,z,value,a\n");
    for i in 0..=8 {
        for j in 0..=8 {
            let (x, z) = (-2.0 + 0.5 * i as f64, -4.0 + j as f64);
            let (v, a) = hamiltonian(spec, &point(spec, x), &mu0, &point(spec, z))?;
            let _ = writeln!(ham, "{x},{z},{v:e},{:e}", a[0]);
        }
    }
    ctx.write("control_hamiltonian.csv", &ham)?;

    let sol = solve_finite_bsde(spec, &flow, &x0, &BsdeConfig { horizon, ..ecfg.bsde_config(horizon, 0.0) })?;
    let bench = (sol.y0, 0.0);
    let opt = evaluate_cost_finite(spec, &ControlPolicy::Feedback(ZSource::Finite(&sol)), &x0, &flow, horizon, dt, paths, seed, bench)?;
    let mut costs = vec![opt.clone()];
    let mut st = CounterStream::new(seed, Channel::Control, u64::MAX, 0);
    let mut dominated = 0;
    for _ in 0..n_random {
        let a: Vec<f64> = cs.lo.iter().zip(&cs.hi).map(|(lo, hi)| lo + (hi - lo) * st.uniform()).collect();
        let r = evaluate_cost_finite(spec, &ControlPolicy::Constant(&a), &x0, &flow, horizon, dt, paths, seed, bench)?;
        dominated += r.dominates() as usize;
        costs.push(r);
    }
    let ergodic_cost =
        evaluate_cost_ergodic(spec, &ControlPolicy::Feedback(ZSource::Ergodic(&erg)), &x0, &flow, on_grid(t_long, dt), dt, paths.min(4000), seed, (erg.lambda, erg.lambda_err))?;
    costs.push(ergodic_cost.clone());
    let small: Vec<f64> = cs.lo.iter().zip(&cs.hi).map(|(lo, hi)| 0.1f64.clamp(*lo, *hi)).collect();
    let gh = 1.0f64.min(horizon);
    let direct = evaluate_cost_finite(spec, &ControlPolicy::Constant(&small), &x0, &flow, gh, dt, paths, seed, (0.0, 0.0))?;
    let weighted = evaluate_cost_girsanov(spec, &ControlPolicy::Constant(&small), &x0, &flow, gh, dt, paths, seed.wrapping_add(1), (0.0, 0.0))?;
    costs.push(direct.clone());
    costs.push(weighted.clone());
    let mut csv = format!("{}\n", CostReport::csv_header());
    for c in &costs {
        csv.push_str(&c.csv_row());
        csv.push('\n');
    }
    ctx.write("control_costs.csv", &csv)?;

    let ell_fit = ltb2_experiment(spec, &erg, &flow, &x0, &LtbConfig::matching(&ecfg, ell_grid), LtbTerminal::Model)?;
    let ell = (ell_fit.ell.unwrap_or(f64::NAN), ell_fit.ell_err);
    let ocp = ocp_longtime(spec, &erg, &flow, &x0, &LtbConfig::matching(&ecfg, horizons), ell, paths, seed.wrapping_add(2))?;
    ctx.write("control_ocp.csv", &ocp.fit.to_csv())?;
    ctx.write("control_feedback_gaps.csv", &ocp.table_csv())?;

    let mut r = String::new();
    let _ = writeln!(r, "lambda={}\nlambda_err={}\ny0_T={}\nhorizon={horizon}", erg.lambda, erg.lambda_err, sol.y0);
    let _ = writeln!(r, "optimal_cost={}\noptimal_se={}", opt.estimate, opt.std_err);
    let _ = writeln!(r, "random_dominated={dominated}/{n_random}");
    let _ = writeln!(r, "ergodic_cost={}\nergodic_se={}", ergodic_cost.estimate, ergodic_cost.std_err);
    let _ = writeln!(r, "girsanov_direct={}\ngirsanov_weighted={}", direct.estimate, weighted.estimate);
    let _ = writeln!(r, "ell={}\nell_err={}", ell.0, ell.1);
    r.push_str(&ocp.fit.report());
    ctx.write("control_report.txt", &r)?;

    ctx.check("optimal_matches_y0", opt.matches(), format!("J={:.5} Y0={:.5} gap/se={:.2}", opt.estimate, sol.y0, opt.gap / opt.combined_err()));
    ctx.check("random_dominated", dominated == n_random, format!("{dominated}/{n_random}"));
    ctx.check(
        "ergodic_cost",
        (ergodic_cost.estimate - erg.lambda).abs() <= 0.05,
        format!("J={:.5} lambda={:.5}", ergodic_cost.estimate, erg.lambda),
    );
    let gaps_ok = ocp.table.iter().all(|g| g.action_gap <= 0.5 * g.z_gap + 1e-12);
    ctx.check("feedback_gap", gaps_ok, format!("rows={}", ocp.table.len()));
    let comb = (direct.std_err.powi(2) + weighted.std_err.powi(2)).sqrt();
    ctx.check(
        "girsanov",
        (direct.estimate - weighted.estimate).abs() <= 3.0 * comb,
        format!("direct={:.5} weighted={:.5}", direct.estimate, weighted.estimate),
    );
    Ok(())
}
