//! Vanishing-discount extraction of the ergodic triple (λ, ū, ζ̄).
//!
//! Each α-problem is the finite BSDE with zero terminal value, horizon T_α long enough
//! that the truncation is below 10⁻³ relative, a stationary flow frozen at μ*, and the
//! discounted node update. The candidates α·u^α(0) are then extrapolated to α = 0.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::bsde::{solve_bsde, BsdeConfig, BsdeSolution, Scheme};
use crate::error::{Error, Result};
use crate::measure::{invariant_measure, EmpiricalMeasure, MeasureFlow};
use crate::model::{driver_growth_constant, ProblemSpec};
use crate::regression::{extrapolation_weights, linear_intercept_weights, NodeFit};
use crate::sde::ParticleSystem;

/// Relative truncation tolerance defining T_α.
pub const TRUNCATION_TOL: f64 = 1e-3;

/// How the α-sequence is taken to the limit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Extrapolation {
    /// Lagrange polynomial through every (α, value) pair, evaluated at α = 0; applied
    /// alike to λ, ū and ζ̄.
    Polynomial,
    /// Weighted straight line in α (smallest two α's weighted double) for λ; ū and ζ̄
    /// taken from the smallest α.
    WeightedLinear,
}

impl FromStr for Extrapolation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "polynomial" => Ok(Extrapolation::Polynomial),
            "linear" | "weighted-linear" => Ok(Extrapolation::WeightedLinear),
            _ => Err(Error::InvalidInput(format!("unknown extrapolation `{s}` (polynomial | linear)"))),
        }
    }
}

impl std::fmt::Display for Extrapolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Extrapolation::Polynomial => "polynomial",
            Extrapolation::WeightedLinear => "linear",
        })
    }
}

#[derive(Clone, Debug)]
pub struct ErgodicConfig {
    pub alphas: Vec<f64>,
    pub dt: f64,
    /// Regression cloud size per α-solve.
    pub n_particles: usize,
    pub degree: Option<usize>,
    pub picard: usize,
    pub scheme: Scheme,
    pub seed: u64,
    pub extrapolation: Extrapolation,
    /// Particles, step and burn-in for μ*.
    pub n_invariant: usize,
    pub invariant_dt: f64,
    pub t_burn: Option<f64>,
    pub growth_samples: usize,
}

impl ErgodicConfig {
    pub fn new(alphas: Vec<f64>, dt: f64, n_particles: usize, seed: u64) -> Self {
        Self {
            alphas,
            dt,
            n_particles,
            degree: None,
            picard: 1,
            scheme: Scheme::Quadrature,
            seed,
            extrapolation: Extrapolation::Polynomial,
            n_invariant: 10_000,
            invariant_dt: 0.01,
            t_burn: None,
            growth_samples: 2000,
        }
    }

    pub fn bsde_config(&self, horizon: f64, alpha: f64) -> BsdeConfig {
        BsdeConfig {
            dt: self.dt,
            horizon,
            n_particles: self.n_particles,
            degree: self.degree,
            picard: self.picard,
            seed: self.seed,
            scheme: self.scheme,
            alpha,
            spread: None,
        }
    }
}

/// One discounted solve.
#[derive(Clone, Debug)]
pub struct AlphaSolution {
    pub alpha: f64,
    /// T_α, rounded up to the time grid.
    pub horizon: f64,
    pub c_hat: f64,
    /// Node-0 fit of x ↦ (u^α(x), ζ^α(x)).
    pub u_alpha: NodeFit,
    pub u_at_anchor: f64,
    pub lambda_candidate: f64,
    /// α·u^α at the second anchor x = (1, …, 1).
    pub lambda_candidate_unit: f64,
    /// (Ĉ/α)·e^{−α T_α}.
    pub truncation_bound: f64,
    /// α·sup |u^α(x)| / (1 + |x|^{q+1} + ‖μ*‖^{q+1}) over a state grid.
    pub growth_constant: f64,
    pub max_residual: f64,
    pub picard_warning: bool,
}

impl AlphaSolution {
    pub fn u(&self, x: &[f64]) -> f64 {
        self.u_alpha.value(x)
    }

    /// u^α(x) − u^α(0).
    pub fn u_bar(&self, x: &[f64]) -> f64 {
        self.u(x) - self.u_at_anchor
    }
}

/// T_α = (1/α)·ln(Ĉ/(α·tol)), at least 1/α.
pub fn truncation_horizon(alpha: f64, c_hat: f64) -> f64 {
    let arg = c_hat / (alpha * TRUNCATION_TOL);
    arg.ln().max(1.0) / alpha
}

/// Solves the α-discounted problem on a stationary flow.
pub fn solve_alpha_bsde(
    spec: &ProblemSpec,
    flow: &MeasureFlow,
    alpha: f64,
    c_hat: f64,
    cfg: &ErgodicConfig,
) -> Result<AlphaSolution> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidInput(format!("alpha = {alpha} must lie in (0, 1]")));
    }
    let t_alpha = truncation_horizon(alpha, c_hat);
    let nodes = (t_alpha / cfg.dt).ceil();
    if nodes > crate::bsde::MAX_NODES as f64 {
        return Err(Error::Budget(format!(
            "T_alpha/dt = {nodes:.3e} nodes exceeds {}; use a larger alpha or dt",
            crate::bsde::MAX_NODES
        )));
    }
    let horizon = nodes * cfg.dt;
    flow.covers(horizon)?;
    let d = spec.dim;
    let anchor = vec![0.0; d];
    let sol = solve_bsde(spec, flow, &anchor, &cfg.bsde_config(horizon, alpha), Some(&|_x: &[f64], _mu: &EmpiricalMeasure| 0.0))?;
    Ok(summarize(spec, flow, alpha, c_hat, horizon, &sol))
}

fn summarize(spec: &ProblemSpec, flow: &MeasureFlow, alpha: f64, c_hat: f64, horizon: f64, sol: &BsdeSolution) -> AlphaSolution {
    let d = spec.dim;
    let fit = sol.nodes[0].clone();
    let u0 = fit.value(&vec![0.0; d]);
    let u1 = fit.value(&vec![1.0; d]);
    let q = spec.constants.q;
    let mu = flow.at(0.0);
    let mnorm = crate::measure::moment(mu, 2.0 * q + 2.0).unwrap_or(0.0);
    let span = 3.0 * sol.spread;
    let mut growth = 0.0f64;
    for i in 0..=40 {
        let x = vec![-span + 2.0 * span * i as f64 / 40.0; d];
        let xn = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        growth = growth.max(alpha * fit.value(&x).abs() / (1.0 + xn.powf(q + 1.0) + mnorm.powf(q + 1.0)));
    }
    AlphaSolution {
        alpha,
        horizon,
        c_hat,
        u_alpha: fit,
        u_at_anchor: u0,
        lambda_candidate: alpha * u0,
        lambda_candidate_unit: alpha * u1,
        truncation_bound: c_hat / alpha * (-alpha * horizon).exp(),
        growth_constant: growth,
        max_residual: sol.residuals.iter().cloned().fold(0.0, f64::max),
        picard_warning: sol.picard_warning,
    }
}

/// (λ, ū, ζ̄, μ*) with the α-trace.
#[derive(Clone, Debug)]
pub struct ErgodicSolution {
    pub lambda: f64,
    /// |λ(all α) − λ(all but the largest α)|.
    pub lambda_err: f64,
    /// λ extrapolated from the second anchor x = (1, …, 1).
    pub lambda_unit_anchor: f64,
    /// Single-output fit of ū with ū(0) = 0.
    pub u_bar: NodeFit,
    /// The same extrapolation without the largest α, for error estimates.
    u_bar_alt: NodeFit,
    /// d-output fit of ζ̄.
    pub zeta_bar: NodeFit,
    zeta_alt: NodeFit,
    pub mu_star: EmpiricalMeasure,
    pub stationarity_w2: f64,
    pub trace: Vec<AlphaSolution>,
    pub extrapolation: Extrapolation,
    pub dt: f64,
    pub warnings: Vec<String>,
}

impl ErgodicSolution {
    pub fn u_bar(&self, x: &[f64]) -> f64 {
        self.u_bar.value(x)
    }

    pub fn u_bar_err(&self, x: &[f64]) -> f64 {
        (self.u_bar.value(x) - self.u_bar_alt.value(x)).abs()
    }

    pub fn grad_u_bar(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        self.u_bar.gradient(0, x, &mut g);
        g
    }

    pub fn grad_u_bar_err(&self, x: &[f64]) -> f64 {
        let mut g = vec![0.0; x.len()];
        self.u_bar_alt.gradient(0, x, &mut g);
        self.grad_u_bar(x).iter().zip(&g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    pub fn zeta_bar(&self, x: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; x.len()];
        self.zeta_bar.eval(x, &mut z);
        z
    }

    pub fn zeta_err(&self, x: &[f64]) -> f64 {
        let mut z = vec![0.0; x.len()];
        self.zeta_alt.eval(x, &mut z);
        self.zeta_bar(x).iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    pub fn candidates(&self) -> Vec<f64> {
        self.trace.iter().map(|a| a.lambda_candidate).collect()
    }

    /// E_{μ*}[f(X, μ*, ζ̄(X))]; equals λ for a consistent extraction.
    pub fn stationary_driver_mean(&self, spec: &ProblemSpec) -> f64 {
        let mu = &self.mu_star;
        (0..mu.len()).map(|i| mu.weights()[i] * (spec.driver)(mu.point(i), mu, &self.zeta_bar(mu.point(i)))).sum()
    }

    /// max over the grid of |ū^{α_i} − ū^{α_{i+1}}| for consecutive α's.
    pub fn equicontinuity_gaps(&self, grid: &[f64]) -> Vec<f64> {
        let d = self.mu_star.dim();
        self.trace
            .windows(2)
            .map(|w| {
                grid.iter()
                    .map(|&x| {
                        let p = vec![x; d];
                        (w[0].u_bar(&p) - w[1].u_bar(&p)).abs()
                    })
                    .fold(0.0, f64::max)
            })
            .collect()
    }

    pub fn trace_csv(&self) -> String {
        let mut s = String::from("alpha,horizon,u_at_anchor,lambda_candidate,lambda_candidate_unit,truncation_bound,growth_constant,max_residual\n");
        for a in &self.trace {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                a.alpha, a.horizon, a.u_at_anchor, a.lambda_candidate, a.lambda_candidate_unit, a.truncation_bound, a.growth_constant, a.max_residual
            );
        }
        s
    }

    pub fn report(&self, spec: &ProblemSpec) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "lambda={}", self.lambda);
        let _ = writeln!(s, "lambda_err={}", self.lambda_err);
        let _ = writeln!(s, "lambda_unit_anchor={}", self.lambda_unit_anchor);
        let _ = writeln!(s, "u_bar_at_origin={}", self.u_bar(&vec![0.0; self.mu_star.dim()]));
        let _ = writeln!(s, "stationary_driver_mean={}", self.stationary_driver_mean(spec));
        let _ = writeln!(s, "extrapolation={}", self.extrapolation);
        let _ = writeln!(s, "dt={}", self.dt);
        let _ = writeln!(s, "mu_star_atoms={}", self.mu_star.len());
        let _ = writeln!(s, "stationarity_w2={}", self.stationarity_w2);
        for w in &self.warnings {
            let _ = writeln!(s, "warning={w}");
        }
        s
    }
}

/// Estimates μ* and runs the α-sequence against the stationary flow.
pub fn extract_ergodic(spec: &ProblemSpec, cfg: &ErgodicConfig) -> Result<ErgodicSolution> {
    let rate = spec.contraction_rate_hint();
    let t_burn = cfg.t_burn.unwrap_or(if rate > 0.0 { (10.0 / rate).max(20.0) } else { 20.0 });
    let inv = invariant_measure(spec, cfg.n_invariant, cfg.invariant_dt, t_burn, cfg.seed ^ 0x1A7_5EED)?;
    let mut sol = extract_ergodic_from(spec, inv.measure, cfg)?;
    sol.stationarity_w2 = inv.stationarity_w2;
    if let Some(w) = inv.warning {
        sol.warnings.push(w);
    }
    Ok(sol)
}

/// The same with a given μ*.
pub fn extract_ergodic_from(spec: &ProblemSpec, mu_star: EmpiricalMeasure, cfg: &ErgodicConfig) -> Result<ErgodicSolution> {
    let alphas = &cfg.alphas;
    if alphas.len() < 2 {
        return Err(Error::InvalidInput("need at least two alphas".into()));
    }
    if alphas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidInput("alpha sequence must be strictly decreasing".into()));
    }
    let flow = MeasureFlow::stationary(mu_star.clone());
    let c_hat = driver_growth_constant(spec, cfg.growth_samples, cfg.seed);
    let trace = alphas
        .iter()
        .map(|&a| solve_alpha_bsde(spec, &flow, a, c_hat, cfg))
        .collect::<Result<Vec<_>>>()?;

    let d = spec.dim;
    let origin = vec![0.0; d];
    let lam = |ts: &[AlphaSolution], unit: bool| -> f64 {
        let a: Vec<f64> = ts.iter().map(|t| t.alpha).collect();
        let w = weights(cfg.extrapolation, &a);
        ts.iter().zip(&w).map(|(t, w)| w * if unit { t.lambda_candidate_unit } else { t.lambda_candidate }).sum()
    };
    let lambda = lam(&trace, false);
    let lambda_unit_anchor = lam(&trace, true);
    let lambda_alt = if trace.len() >= 3 { lam(&trace[1..], false) } else { trace.last().unwrap().lambda_candidate };

    let limit = |ts: &[AlphaSolution]| -> Result<(NodeFit, NodeFit)> {
        let (fits, w): (Vec<&NodeFit>, Vec<f64>) = match cfg.extrapolation {
            Extrapolation::Polynomial => {
                let a: Vec<f64> = ts.iter().map(|t| t.alpha).collect();
                (ts.iter().map(|t| &t.u_alpha).collect(), extrapolation_weights(&a))
            }
            Extrapolation::WeightedLinear => (vec![&ts.last().unwrap().u_alpha], vec![1.0]),
        };
        let joint = NodeFit::combine(&fits, &w)?;
        let mut u = joint.select(0);
        let u0 = u.value(&origin);
        u.shift(0, -u0);
        let zeta = zeta_part(&joint, d);
        Ok((u, zeta))
    };
    let (u_bar, zeta_bar) = limit(&trace)?;
    let (u_bar_alt, zeta_alt) = if trace.len() >= 3 { limit(&trace[1..])? } else { (u_bar.clone(), zeta_bar.clone()) };

    let mut warnings = Vec::new();
    let cands: Vec<f64> = trace.iter().map(|t| t.lambda_candidate).collect();
    let noise = 1e-9 * (1.0 + cands.iter().map(|c| c.abs()).fold(0.0, f64::max));
    let gaps: Vec<f64> = cands.windows(2).map(|w| w[1] - w[0]).collect();
    let mixed = gaps.iter().any(|g| *g > noise) && gaps.iter().any(|g| *g < -noise);
    let growing = gaps.windows(2).any(|g| g[1].abs() > 1.5 * g[0].abs() + noise);
    if mixed || growing {
        warnings.push(format!("unstable extraction: lambda candidates {cands:?}"));
    }
    if trace.iter().any(|t| t.picard_warning) {
        warnings.push("picard iterates did not contract at some node".into());
    }
    Ok(ErgodicSolution {
        lambda,
        lambda_err: (lambda - lambda_alt).abs(),
        lambda_unit_anchor,
        u_bar,
        u_bar_alt,
        zeta_bar,
        zeta_alt,
        mu_star,
        stationarity_w2: f64::NAN,
        trace,
        extrapolation: cfg.extrapolation,
        dt: cfg.dt,
        warnings,
    })
}

fn weights(method: Extrapolation, alphas: &[f64]) -> Vec<f64> {
    match method {
        Extrapolation::Polynomial => extrapolation_weights(alphas),
        Extrapolation::WeightedLinear => {
            let n = alphas.len();
            let w: Vec<f64> = (0..n).map(|i| if i + 2 >= n { 2.0 } else { 1.0 }).collect();
            linear_intercept_weights(alphas, &w)
        }
    }
}

/// Outputs 1..=d of a joint (Y, Z) fit.
fn zeta_part(joint: &NodeFit, d: usize) -> NodeFit {
    let parts: Vec<NodeFit> = (1..=d).map(|o| joint.select(o)).collect();
    let mut z = parts[0].clone();
    z.outputs = d;
    z.coeffs = parts.iter().flat_map(|p| p.coeffs.iter().copied()).collect();
    z
}

/// Time-average estimate of λ along the interacting system.
#[derive(Clone, Debug)]
pub struct TimeAverage {
    pub lambda: f64,
    pub std_err: f64,
    pub burn_in: f64,
    pub horizon: f64,
}

/// (1/T)·∫ f(X_s, μ̂_s, ζ̄(X_s)) ds averaged over particles, after a burn-in of 10/Λ̂.
/// `zeta` may be omitted for z-free drivers.
#[allow(clippy::too_many_arguments)]
pub fn lambda_by_time_average(
    spec: &ProblemSpec,
    theta: &EmpiricalMeasure,
    zeta: Option<&NodeFit>,
    t_long: f64,
    dt: f64,
    n: usize,
    seed: u64,
) -> Result<TimeAverage> {
    if spec.driver_uses_z && zeta.is_none() {
        return Err(Error::InvalidInput("driver depends on z: a zeta fit is required".into()));
    }
    let rate = spec.contraction_rate_hint();
    let burn = if rate > 0.0 { 10.0 / rate } else { 10.0 };
    let mut sys = ParticleSystem::from_measure(spec, theta, n, dt, seed)?;
    let burn_steps = (burn / dt).round() as usize;
    for _ in 0..burn_steps {
        sys.advance()?;
    }
    let d = spec.dim;
    let steps = (t_long / dt).round().max(1.0) as usize;
    let mut acc = vec![0.0; n];
    let mut z = vec![0.0; d];
    for _ in 0..steps {
        let mu = sys.measure();
        for (i, a) in acc.iter_mut().enumerate() {
            let x = &sys.states[i * d..(i + 1) * d];
            if let Some(f) = zeta {
                f.eval(x, &mut z);
            }
            *a += (spec.driver)(x, &mu, &z);
        }
        sys.advance()?;
    }
    let per: Vec<f64> = acc.iter().map(|a| a / steps as f64).collect();
    let mean = per.iter().sum::<f64>() / n as f64;
    let var = per.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n.max(2) - 1) as f64;
    Ok(TimeAverage { lambda: mean, std_err: (var / n as f64).sqrt(), burn_in: burn_steps as f64 * dt, horizon: steps as f64 * dt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::preset;

    fn x2() -> ProblemSpec {
        preset("ou-attract").unwrap().with_driver(false, |x, _m, _z| x[0] * x[0])
    }

    fn mu_star() -> EmpiricalMeasure {
        invariant_measure(&preset("ou-attract").unwrap(), 4000, 0.01, 20.0, 3).unwrap().measure
    }

    #[test]
    fn constant_driver_discounted_value() {
        let s = preset("ou-attract").unwrap().with_driver(false, |_x, _m, _z| 1.0);
        let flow = MeasureFlow::stationary(mu_star());
        let cfg = ErgodicConfig::new(vec![0.2, 0.1], 0.05, 500, 1);
        let c_hat = driver_growth_constant(&s, 500, 1);
        for alpha in [0.2, 0.1] {
            let a = solve_alpha_bsde(&s, &flow, alpha, c_hat, &cfg).unwrap();
            // The implicit discrete recursion has fixed point 1/α exactly.
            let discrete = (1.0 - (1.0 + alpha * 0.05f64).powf(-(a.horizon / 0.05).round())) / alpha;
            assert!((a.u_at_anchor - discrete).abs() < 1e-9);
            assert!((a.u_at_anchor - 1.0 / alpha).abs() < 1e-3 / alpha);
        }
    }

    #[test]
    fn ou_square_candidate_and_halving() {
        let s = x2();
        let flow = MeasureFlow::stationary(mu_star());
        let cfg = ErgodicConfig::new(vec![0.1], 0.01, 1000, 1);
        let c_hat = driver_growth_constant(&s, 2000, 1);
        let a = solve_alpha_bsde(&s, &flow, 0.1, c_hat, &cfg).unwrap();
        assert!((a.lambda_candidate - 0.5).abs() < 0.05, "{}", a.lambda_candidate);
        let b = solve_alpha_bsde(&s, &flow, 0.05, c_hat, &cfg).unwrap();
        let oracle = 0.5;
        assert!((a.lambda_candidate - b.lambda_candidate).abs() < (a.lambda_candidate - oracle).abs());
    }

    #[test]
    fn extraction_on_ou_square() {
        let s = x2();
        let cfg = ErgodicConfig::new(vec![0.4, 0.2, 0.1, 0.05], 0.02, 1000, 5);
        let sol = extract_ergodic_from(&s, mu_star(), &cfg).unwrap();
        assert!((sol.lambda - 0.5).abs() < 0.03, "{}", sol.lambda);
        assert!(sol.u_bar(&[0.0]).abs() < 1e-12);
        assert!((sol.stationary_driver_mean(&s) - sol.lambda).abs() < 0.05);
        assert!((sol.lambda - sol.lambda_unit_anchor).abs() < 0.05);
        assert!(sol.warnings.is_empty(), "{:?}", sol.warnings);
        // ū(x) = x²/2 for the stationary OU with a centered μ*.
        let m = sol.mu_star.mean()[0];
        for x in [-1.0, 0.5, 1.5] {
            assert!((sol.u_bar(&[x]) - (x * x / 2.0 - 0.5 * m * x)).abs() < 0.02, "x={x}");
        }
        // Growth constants stable within 2×.
        let g: Vec<f64> = sol.trace[..3].iter().map(|t| t.growth_constant).collect();
        let (lo, hi) = (g.iter().cloned().fold(f64::MAX, f64::min), g.iter().cloned().fold(0.0, f64::max));
        assert!(hi <= 2.0 * lo, "{g:?}");
        let gaps = sol.equicontinuity_gaps(&[-1.0, 0.0, 1.0]);
        assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
        let lin = extract_ergodic_from(&s, sol.mu_star.clone(), &ErgodicConfig { extrapolation: Extrapolation::WeightedLinear, ..cfg }).unwrap();
        assert!((lin.lambda - 0.5).abs() < 0.03);
        assert!(lin.u_bar(&[0.0]).abs() < 1e-12);
    }

    #[test]
    fn time_average_estimates() {
        let s = x2();
        let theta = EmpiricalMeasure::dirac(&[0.0]);
        let t = lambda_by_time_average(&s, &theta, None, 30.0, 0.01, 2000, 3).unwrap();
        assert!((t.lambda - 0.5).abs() < 0.02, "{}", t.lambda);
        let c = preset("ou-attract").unwrap().with_driver(false, |_x, _m, _z| 0.3);
        let t = lambda_by_time_average(&c, &theta, None, 5.0, 0.01, 100, 3).unwrap();
        assert!((t.lambda - 0.3).abs() < 1e-12);
        assert!(lambda_by_time_average(&preset("control-lq").unwrap(), &theta, None, 1.0, 0.01, 10, 1).is_err());
    }

    #[test]
    fn bad_sequences_and_budget() {
        let s = x2();
        let cfg = ErgodicConfig::new(vec![0.1, 0.2], 0.01, 100, 1);
        assert!(extract_ergodic_from(&s, mu_star(), &cfg).is_err());
        let flow = MeasureFlow::stationary(mu_star());
        let tiny = ErgodicConfig::new(vec![1e-6], 1e-3, 100, 1);
        assert!(matches!(solve_alpha_bsde(&s, &flow, 1e-6, 1.0, &tiny), Err(Error::Budget(_))));
        assert!(solve_alpha_bsde(&s, &flow, 0.0, 1.0, &tiny).is_err());
    }
}
