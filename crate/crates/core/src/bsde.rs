//! Finite-horizon decoupled BSDE by backward least-squares Monte Carlo.
//!
//! A cloud of decoupled paths is simulated forward from a spread law around x0. Only
//! checkpoints are stored; each backward segment is regenerated from its checkpoint
//! (the counter-based noise makes this exact). Two conditional-expectation schemes:
//!
//! * `RegressionNow`: E[Y_{k+1} | X_k] and E[Y_{k+1} ΔW_k | X_k]/dt are regressed on
//!   the node-k cloud; the Z regression uses Y_{k+1} − E[Y_{k+1} | X_k] as a control variate.
//! * `Quadrature`: Y_{k+1} is regressed on the node-(k+1) cloud and the one-step
//!   expectations are taken by Gauss–Hermite quadrature over the Euler increment,
//!   which is exact when the fitted map is polynomial.

use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::measure::{EmpiricalMeasure, MeasureFlow};
use crate::model::{row_times_matrix, ProblemSpec};
use crate::quadrature::gauss_hermite;
use crate::regression::{Basis, Design, NodeFit};
use crate::rng::{Channel, Noise};
use crate::sde::step_all;

/// Largest number of time nodes a single solve may use.
pub const MAX_NODES: usize = 10_000_000;
/// Cloud sizes (N·(M+1)·d) up to this are kept whole instead of checkpointed.
const FULL_STORAGE: usize = 20_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    RegressionNow,
    Quadrature,
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" | "regression-now" => Ok(Scheme::RegressionNow),
            "quadrature" => Ok(Scheme::Quadrature),
            _ => Err(Error::InvalidInput(format!("unknown scheme `{s}` (regression | quadrature)"))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::RegressionNow => "regression",
            Scheme::Quadrature => "quadrature",
        })
    }
}

#[derive(Clone, Debug)]
pub struct BsdeConfig {
    pub dt: f64,
    pub horizon: f64,
    pub n_particles: usize,
    /// Total polynomial degree; defaults to max(q + 1, 3).
    pub degree: Option<usize>,
    /// 1 is the explicit scheme; each extra pass re-evaluates Z = ∇u·σ and refits.
    pub picard: usize,
    pub seed: u64,
    pub scheme: Scheme,
    /// Discount in the node update Y_k = (E[Y_{k+1}|X_k] + dt f)/(1 + α dt).
    pub alpha: f64,
    /// Standard deviation of the cloud's initial law around x0; defaults to that of
    /// the flow's terminal measure.
    pub spread: Option<f64>,
}

impl BsdeConfig {
    pub fn new(dt: f64, horizon: f64, n_particles: usize, seed: u64) -> Self {
        Self {
            dt,
            horizon,
            n_particles,
            degree: None,
            picard: 1,
            seed,
            scheme: Scheme::Quadrature,
            alpha: 0.0,
            spread: None,
        }
    }

    pub fn degree_for(&self, spec: &ProblemSpec) -> usize {
        self.degree.unwrap_or(((spec.constants.q + 1.0).ceil() as usize).max(3))
    }
}

/// Per-node fits of x ↦ (u(t_k, x), ζ(t_k, x)) and diagnostics.
#[derive(Clone, Debug)]
pub struct BsdeSolution {
    pub x0: Vec<f64>,
    pub y0: f64,
    pub z0: Vec<f64>,
    pub dt: f64,
    pub horizon: f64,
    pub alpha: f64,
    pub scheme: Scheme,
    /// Node k holds outputs [Y, Z_1, …, Z_d].
    pub nodes: Vec<NodeFit>,
    /// RMS residual of the node's conditional-expectation regression.
    pub residuals: Vec<f64>,
    /// RMS change of Y per extra Picard pass, per node (empty for the explicit scheme).
    pub picard_history: Vec<Vec<f64>>,
    pub picard_warning: bool,
    pub spread: f64,
}

impl BsdeSolution {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// Nearest node to t, and whether t was on the grid.
    pub fn node_index(&self, t: f64) -> (usize, bool) {
        let k = (t / self.dt).round().clamp(0.0, (self.nodes.len() - 1) as f64) as usize;
        let on = (k as f64 * self.dt - t).abs() <= 1e-9 * (1.0 + t.abs());
        (k, on)
    }

    /// u(t_k, x) at node k.
    pub fn u(&self, k: usize, x: &[f64]) -> f64 {
        self.nodes[k].value(x)
    }

    /// ∇_x u(t_k, x).
    pub fn gradient(&self, k: usize, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        self.nodes[k].gradient(0, x, &mut g);
        g
    }

    /// The regression Z at node k.
    pub fn z_regression(&self, k: usize, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        let mut out = vec![0.0; d + 1];
        self.nodes[k].eval(x, &mut out);
        out[1..].to_vec()
    }

    /// One block of coefficients per node.
    pub fn to_csv(&self) -> String {
        let mut s = format!("node,time,center,scale,{}\n", self.nodes[0].csv_header());
        for (k, f) in self.nodes.iter().enumerate() {
            let prefix = format!(
                "{k},{},{:?},{:?},",
                self.time(k),
                f.standardizer.center[0],
                f.standardizer.scale[0]
            );
            s.push_str(&f.csv_rows(&prefix));
        }
        s
    }

    /// Flat key=value summary.
    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "y0={}", self.y0);
        for (i, z) in self.z0.iter().enumerate() {
            let _ = writeln!(s, "z0_{}={z}", i + 1);
        }
        let _ = writeln!(s, "horizon={}", self.horizon);
        let _ = writeln!(s, "dt={}", self.dt);
        let _ = writeln!(s, "alpha={}", self.alpha);
        let _ = writeln!(s, "scheme={}", self.scheme);
        let _ = writeln!(s, "nodes={}", self.nodes.len());
        let _ = writeln!(s, "spread={}", self.spread);
        let maxres = self.residuals.iter().cloned().fold(0.0, f64::max);
        let _ = writeln!(s, "max_residual={maxres}");
        let _ = writeln!(s, "picard_warning={}", self.picard_warning);
        s
    }
}

/// Gauss–Hermite tensor grid for d-dimensional standard normals.
struct NormalGrid {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl NormalGrid {
    fn new(d: usize, n: usize) -> Self {
        let r = gauss_hermite(n);
        let total = n.pow(d as u32);
        let mut points = Vec::with_capacity(total * d);
        let mut weights = Vec::with_capacity(total);
        for idx in 0..total {
            let mut rem = idx;
            let mut w = 1.0;
            for _ in 0..d {
                let j = rem % n;
                rem /= n;
                points.push(r.nodes[j]);
                w *= r.weights[j];
            }
            weights.push(w);
        }
        Self { points, weights }
    }
}

/// Terminal condition override.
pub type Terminal<'a> = &'a (dyn Fn(&[f64], &EmpiricalMeasure) -> f64 + Sync);

fn check_flow(flow: &MeasureFlow, dt: f64, horizon: f64) -> Result<()> {
    flow.covers(horizon)?;
    if !flow.is_stationary() {
        flow.check_aligned(dt)?;
    }
    Ok(())
}

/// Solves with the model's terminal condition.
pub fn solve_finite_bsde(spec: &ProblemSpec, flow: &MeasureFlow, x0: &[f64], cfg: &BsdeConfig) -> Result<BsdeSolution> {
    solve_bsde(spec, flow, x0, cfg, None)
}

/// Backward induction; `terminal` replaces g when given.
pub fn solve_bsde(
    spec: &ProblemSpec,
    flow: &MeasureFlow,
    x0: &[f64],
    cfg: &BsdeConfig,
    terminal: Option<Terminal<'_>>,
) -> Result<BsdeSolution> {
    let d = spec.dim;
    if x0.len() != d {
        return Err(Error::InvalidInput("x0 has the wrong dimension".into()));
    }
    if !(cfg.dt > 0.0) || !(cfg.horizon >= cfg.dt - 1e-12) || cfg.n_particles == 0 {
        return Err(Error::InvalidInput("need dt > 0, T >= dt and particles".into()));
    }
    if !(cfg.alpha >= 0.0) {
        return Err(Error::InvalidInput("alpha must be nonnegative".into()));
    }
    check_flow(flow, cfg.dt, cfg.horizon)?;
    let m = (cfg.horizon / cfg.dt).round() as usize;
    if m > MAX_NODES {
        return Err(Error::Budget(format!(
            "{m} time nodes exceed the budget of {MAX_NODES}; use a larger dt (or a larger alpha)"
        )));
    }
    let degree = cfg.degree_for(spec);
    if (degree as f64) < spec.constants.q + 1.0 {
        return Err(Error::InvalidInput(format!("degree {degree} is below q + 1 = {}", spec.constants.q + 1.0)));
    }
    let basis = Arc::new(Basis::new(d, degree));
    let n = cfg.n_particles;
    let spread = cfg.spread.unwrap_or_else(|| {
        let sd = flow.terminal().std_dev();
        let s = (sd.iter().map(|v| v * v).sum::<f64>() / d as f64).sqrt();
        if s > 1e-8 {
            s
        } else {
            1.0
        }
    });
    let noise = Noise::new(cfg.seed, Channel::Cloud);

    // Forward pass, keeping checkpoints.
    let stride = if n * (m + 1) * d <= FULL_STORAGE { m.max(1) } else { ((m as f64).sqrt().ceil() as usize).max(1) };
    let mut states = vec![0.0; n * d];
    for (i, x) in states.chunks_mut(d).enumerate() {
        noise.fill_normals(i, 0, x);
        for (v, c) in x.iter_mut().zip(x0) {
            *v = c + spread * *v;
        }
    }
    let mut checkpoints = vec![states.clone()];
    for k in 0..m {
        step_all(spec, flow.at(k as f64 * cfg.dt), None, &noise, k + 1, k as f64 * cfg.dt, cfg.dt, &mut states);
        if let Some(p) = states.iter().position(|v| !v.is_finite()) {
            return Err(Error::BlowUp { step: k + 1, time: (k + 1) as f64 * cfg.dt, particle: p / d });
        }
        if (k + 1) % stride == 0 && k + 1 < m {
            checkpoints.push(states.clone());
        }
    }
    drop(states);

    let grid = NormalGrid::new(d, degree / 2 + 2);
    let mut nodes: Vec<Option<NodeFit>> = vec![None; m + 1];
    let mut residuals = vec![0.0; m + 1];
    let mut history = vec![Vec::new(); m + 1];
    let mut y_next: Vec<f64> = Vec::new();
    let mut buf: Vec<Vec<f64>> = Vec::new();

    for seg in (0..checkpoints.len()).rev() {
        let start = seg * stride;
        let end = ((seg + 1) * stride).min(m);
        buf.clear();
        buf.push(checkpoints[seg].clone());
        for k in start..end {
            let mut next = buf.last().unwrap().clone();
            step_all(spec, flow.at(k as f64 * cfg.dt), None, &noise, k + 1, k as f64 * cfg.dt, cfg.dt, &mut next);
            buf.push(next);
        }
        if end == m {
            let xs = &buf[end - start];
            let mu = flow.at(m as f64 * cfg.dt);
            let y: Vec<f64> = xs
                .par_chunks(d)
                .map(|x| match terminal {
                    Some(g) => g(x, mu),
                    None => (spec.terminal)(x, mu),
                })
                .collect();
            let design = Design::new(basis.clone(), xs, m)?;
            let yfit = design.fit(&[&y]);
            residuals[m] = design.residual_rms(&yfit, 0, &y);
            let z = gradient_z(spec, &yfit, xs, mu);
            nodes[m] = Some(fit_yz(&design, &y, &z, d));
            y_next = y;
        }
        for k in (start..end).rev() {
            let xs = &buf[k - start];
            let xn = &buf[k + 1 - start];
            let t = k as f64 * cfg.dt;
            let mu = flow.at(t);
            let design = Design::new(basis.clone(), xs, k)?;
            let (c, mut z, res) = match cfg.scheme {
                Scheme::Quadrature => {
                    let next = nodes[k + 1].as_ref().unwrap();
                    let (c, z) = quadrature_step(spec, next, xs, mu, t, cfg.dt, &grid);
                    (c, z, 0.0)
                }
                Scheme::RegressionNow => regression_step(&design, &y_next, xn, &noise, k, cfg.dt, d),
            };
            let disc = 1.0 / (1.0 + cfg.alpha * cfg.dt);
            let driver = |c: &[f64], z: &[f64]| -> Vec<f64> {
                c.par_iter()
                    .enumerate()
                    .map(|(i, ci)| (ci + cfg.dt * (spec.driver)(&xs[i * d..(i + 1) * d], mu, &z[i * d..(i + 1) * d])) * disc)
                    .collect()
            };
            let mut y = driver(&c, &z);
            let mut fit = fit_yz(&design, &y, &z, d);
            for _ in 1..cfg.picard.max(1) {
                z = gradient_z(spec, &fit, xs, mu);
                let y2 = driver(&c, &z);
                let change = (y.iter().zip(&y2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64).sqrt();
                history[k].push(change);
                y = y2;
                fit = fit_yz(&design, &y, &z, d);
            }
            residuals[k] = if cfg.scheme == Scheme::Quadrature { design.residual_rms(&fit, 0, &y) } else { res };
            nodes[k] = Some(fit);
            y_next = y;
        }
    }
    let nodes: Vec<NodeFit> = nodes.into_iter().map(|f| f.expect("every node fitted")).collect();
    let picard_warning = history.iter().any(|h| h.windows(2).any(|w| w[1] > 1.1 * w[0] + 1e-14));
    let mut out = vec![0.0; d + 1];
    nodes[0].eval(x0, &mut out);
    Ok(BsdeSolution {
        x0: x0.to_vec(),
        y0: out[0],
        z0: out[1..].to_vec(),
        dt: cfg.dt,
        horizon: m as f64 * cfg.dt,
        alpha: cfg.alpha,
        scheme: cfg.scheme,
        nodes,
        residuals,
        picard_history: history,
        picard_warning,
        spread,
    })
}

fn fit_yz(design: &Design, y: &[f64], z: &[f64], d: usize) -> NodeFit {
    let cols: Vec<Vec<f64>> = (0..d).map(|j| z.iter().skip(j).step_by(d).copied().collect()).collect();
    let mut ys: Vec<&[f64]> = vec![y];
    ys.extend(cols.iter().map(|c| c.as_slice()));
    design.fit(&ys)
}

/// Z = ∇u · σ(x, μ) at every cloud point.
fn gradient_z(spec: &ProblemSpec, fit: &NodeFit, xs: &[f64], mu: &EmpiricalMeasure) -> Vec<f64> {
    let d = spec.dim;
    let mut z = vec![0.0; xs.len()];
    z.par_chunks_mut(d).zip(xs.par_chunks(d)).for_each(|(zi, x)| {
        let mut g = vec![0.0; d];
        fit.gradient(0, x, &mut g);
        let mut s = vec![0.0; d * d];
        (spec.diffusion)(x, mu, &mut s);
        row_times_matrix(&g, &s, zi);
    });
    z
}

fn quadrature_step(
    spec: &ProblemSpec,
    next: &NodeFit,
    xs: &[f64],
    mu: &EmpiricalMeasure,
    t: f64,
    dt: f64,
    grid: &NormalGrid,
) -> (Vec<f64>, Vec<f64>) {
    let d = spec.dim;
    let sq = dt.sqrt();
    let mut c = vec![0.0; xs.len() / d];
    let mut z = vec![0.0; xs.len()];
    c.par_iter_mut()
        .zip(z.par_chunks_mut(d))
        .zip(xs.par_chunks(d))
        .with_min_len(64)
        .for_each(|((ci, zi), x)| {
            let mut b = vec![0.0; d];
            let mut s = vec![0.0; d * d];
            (spec.drift)(t, x, mu, &mut b);
            (spec.diffusion)(x, mu, &mut s);
            let mut y = vec![0.0; d];
            let mut acc = 0.0;
            zi.iter_mut().for_each(|v| *v = 0.0);
            for (q, w) in grid.weights.iter().enumerate() {
                let xi = &grid.points[q * d..(q + 1) * d];
                for i in 0..d {
                    y[i] = x[i] + b[i] * dt + sq * (0..d).map(|j| s[i * d + j] * xi[j]).sum::<f64>();
                }
                let v = w * next.value(&y);
                acc += v;
                for j in 0..d {
                    zi[j] += v * xi[j];
                }
            }
            *ci = acc;
            zi.iter_mut().for_each(|v| *v /= sq);
        });
    (c, z)
}

fn regression_step(
    design: &Design,
    y_next: &[f64],
    xn: &[f64],
    noise: &Noise,
    k: usize,
    dt: f64,
    d: usize,
) -> (Vec<f64>, Vec<f64>, f64) {
    let _ = xn;
    let cfit = design.fit(&[y_next]);
    let c = design.fitted(&cfit, 0);
    let res = design.residual_rms(&cfit, 0, y_next);
    let n = y_next.len();
    let mut cols = vec![vec![0.0; n]; d];
    let mut dw = vec![0.0; d];
    for i in 0..n {
        noise.fill_increment(i, k + 1, dt, &mut dw);
        for j in 0..d {
            cols[j][i] = (y_next[i] - c[i]) * dw[j] / dt;
        }
    }
    let refs: Vec<&[f64]> = cols.iter().map(|v| v.as_slice()).collect();
    let zfit = design.fit(&refs);
    let mut z = vec![0.0; n * d];
    for j in 0..d {
        for (i, v) in design.fitted(&zfit, j).into_iter().enumerate() {
            z[i * d + j] = v;
        }
    }
    (c, z, res)
}

/// ∇_x u(t, x)·σ(x, μ_t) from the fitted node nearest t; the flag is false off-grid.
pub fn z_from_gradient(sol: &BsdeSolution, spec: &ProblemSpec, flow: &MeasureFlow, t: f64, x: &[f64]) -> (Vec<f64>, bool) {
    let (k, on_grid) = sol.node_index(t);
    let g = sol.gradient(k, x);
    let s = spec.eval_diffusion(x, flow.at(sol.time(k)));
    let mut z = vec![0.0; x.len()];
    row_times_matrix(&g, &s, &mut z);
    (z, on_grid)
}

/// Plain Monte Carlo of E[g(X_T, μ_T) + ∫₀^T f(X_s, μ_s, 0) ds] from a point; valid for
/// z-free drivers. Returns (mean, standard error).
pub fn monte_carlo_value(
    spec: &ProblemSpec,
    flow: &MeasureFlow,
    x0: &[f64],
    horizon: f64,
    dt: f64,
    n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    check_flow(flow, dt, horizon)?;
    let d = spec.dim;
    let m = (horizon / dt).round() as usize;
    let noise = Noise::new(seed, Channel::Decoupled);
    let mut states = x0.repeat(n);
    let mut acc = vec![0.0; n];
    let zero = vec![0.0; d];
    for k in 0..m {
        let t = k as f64 * dt;
        let mu = flow.at(t);
        acc.par_iter_mut().zip(states.par_chunks(d)).for_each(|(a, x)| *a += dt * (spec.driver)(x, mu, &zero));
        step_all(spec, mu, None, &noise, k, t, dt, &mut states);
    }
    let mu = flow.at(m as f64 * dt);
    let vals: Vec<f64> = acc.iter().zip(states.chunks(d)).map(|(a, x)| a + (spec.terminal)(x, mu)).collect();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n.max(2) - 1) as f64;
    Ok((mean, (var / n as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::preset;
    use crate::sde::measure_flow;

    fn ou_flow(t: f64) -> MeasureFlow {
        ou_flow_dt(t, 0.01)
    }

    fn ou_flow_dt(t: f64, dt: f64) -> MeasureFlow {
        let s = preset("ou-attract").unwrap();
        measure_flow(&s, &EmpiricalMeasure::dirac(&[0.0]), dt, t, 2000, 7, 1).unwrap()
    }

    fn x2() -> ProblemSpec {
        preset("ou-attract").unwrap().with_driver(false, |_x, _mu, _z| 0.0).with_terminal(|x, _mu| x[0] * x[0])
    }

    #[test]
    fn terminal_square_matches_ou_variance() {
        let exact = (1.0 - (-2f64).exp()) / 2.0;
        let flow = ou_flow(1.0);
        for scheme in [Scheme::Quadrature, Scheme::RegressionNow] {
            let mut cfg = BsdeConfig::new(0.01, 1.0, 10_000, 3);
            cfg.scheme = scheme;
            let sol = solve_finite_bsde(&x2(), &flow, &[0.0], &cfg).unwrap();
            assert!((sol.y0 - exact).abs() < 0.02, "{scheme}: {}", sol.y0);
            let (mc, se) = monte_carlo_value(&x2(), &flow, &[0.0], 1.0, 0.01, 20_000, 5).unwrap();
            assert!((sol.y0 - mc).abs() < 3.0 * se + 0.01);
        }
    }

    #[test]
    fn constant_driver_integrates_exactly() {
        let s = preset("ou-attract").unwrap().with_driver(false, |_x, _mu, _z| 0.7);
        let flow = ou_flow(2.0);
        for scheme in [Scheme::Quadrature, Scheme::RegressionNow] {
            let mut cfg = BsdeConfig::new(0.01, 2.0, 2000, 1);
            cfg.scheme = scheme;
            let sol = solve_finite_bsde(&s, &flow, &[0.5], &cfg).unwrap();
            assert!((sol.y0 - 1.4).abs() < 1e-3, "{}", sol.y0);
        }
    }

    #[test]
    fn linear_z_driver_is_a_girsanov_shift() {
        let beta = 0.6;
        let s = preset("ou-attract")
            .unwrap()
            .with_drift(|_t, _x, _mu, out| out[0] = 0.0)
            .with_driver(true, move |_x, _mu, z| beta * z[0])
            .with_terminal(|x, _mu| x[0]);
        let flow = MeasureFlow::stationary(EmpiricalMeasure::dirac(&[0.0]));
        for scheme in [Scheme::Quadrature, Scheme::RegressionNow] {
            let mut cfg = BsdeConfig::new(0.01, 1.0, 5000, 2);
            cfg.scheme = scheme;
            let sol = solve_finite_bsde(&s, &flow, &[0.0], &cfg).unwrap();
            assert!((sol.y0 - beta).abs() < 0.02, "{scheme}: {}", sol.y0);
        }
    }

    #[test]
    fn comparison_principle() {
        let flow = ou_flow(1.0);
        let cfg = BsdeConfig::new(0.01, 1.0, 4000, 4);
        let lo = solve_finite_bsde(&x2().with_driver(false, |x, _m, _z| x[0].abs()), &flow, &[0.3], &cfg).unwrap();
        let hi = solve_finite_bsde(&x2().with_driver(false, |x, _m, _z| x[0].abs() + 0.1 * x[0] * x[0]), &flow, &[0.3], &cfg).unwrap();
        assert!(hi.y0 >= lo.y0 - 3e-3);
    }

    #[test]
    fn gradient_examples() {
        let s = preset("ou-attract")
            .unwrap()
            .with_drift(|_t, _x, _mu, out| out[0] = 0.0)
            .with_driver(false, |_x, _mu, _z| 0.0)
            .with_terminal(|x, _mu| x[0]);
        let flow = MeasureFlow::stationary(EmpiricalMeasure::dirac(&[0.0]));
        let sol = solve_finite_bsde(&s, &flow, &[0.0], &BsdeConfig::new(0.02, 1.0, 2000, 1)).unwrap();
        for t in [0.0, 0.5, 1.0] {
            for x in [-1.0, 0.0, 1.5] {
                let (z, on) = z_from_gradient(&sol, &s, &flow, t, &[x]);
                assert!(on && (z[0] - 1.0).abs() < 0.05);
            }
        }
        let (_, on) = z_from_gradient(&sol, &s, &flow, 0.013, &[0.0]);
        assert!(!on);
        // Even terminal, odd drift: zero gradient at the origin.
        let sym = preset("ou-attract").unwrap().with_terminal(|x, _mu| x[0] * x[0]);
        let stat = MeasureFlow::stationary(EmpiricalMeasure::uniform(1, vec![-1.0, 1.0]).unwrap());
        let sol = solve_finite_bsde(&sym, &stat, &[0.0], &BsdeConfig::new(0.02, 1.0, 4000, 1)).unwrap();
        assert!(z_from_gradient(&sol, &sym, &stat, 0.0, &[0.0]).0[0].abs() < 0.02);
    }

    #[test]
    fn control_lq_gradient_matches_regression_z() {
        let s = preset("control-lq").unwrap();
        let flow = ou_flow(1.0);
        let mut cfg = BsdeConfig::new(0.01, 1.0, 10_000, 9);
        cfg.scheme = Scheme::RegressionNow;
        let sol = solve_finite_bsde(&s, &flow, &[0.5], &cfg).unwrap();
        let (zg, _) = z_from_gradient(&sol, &s, &flow, 0.0, &[0.5]);
        assert!((zg[0] - sol.z0[0]).abs() <= 0.05 * (1.0 + sol.z0[0].abs()), "{} vs {}", zg[0], sol.z0[0]);
    }

    #[test]
    fn picard_iterates_contract() {
        let s = preset("control-lq").unwrap();
        let flow = ou_flow_dt(1.0, 0.02);
        let mut cfg = BsdeConfig::new(0.02, 1.0, 2000, 9);
        cfg.picard = 4;
        let sol = solve_finite_bsde(&s, &flow, &[0.5], &cfg).unwrap();
        assert!(!sol.picard_warning);
        let h = &sol.picard_history[0];
        assert_eq!(h.len(), 3);
        assert!(h[2] <= 0.5 * h[0] + 1e-15, "{h:?}");
        let explicit = solve_finite_bsde(&s, &flow, &[0.5], &BsdeConfig::new(0.02, 1.0, 2000, 9)).unwrap();
        assert!((sol.y0 - explicit.y0).abs() < 0.01);
    }

    #[test]
    fn checkpointed_backward_pass_matches_stored() {
        // Forces the checkpoint path with a cloud large enough to exceed full storage.
        let s = x2().with_driver(false, |x, _m, _z| x[0] * x[0]);
        let flow = MeasureFlow::stationary(EmpiricalMeasure::dirac(&[0.0]));
        let cfg = BsdeConfig::new(0.01, 2.0, 10_000, 11);
        let a = solve_finite_bsde(&s, &flow, &[0.2], &cfg).unwrap();
        let mut small = cfg.clone();
        small.n_particles = 9_000;
        let b = solve_finite_bsde(&s, &flow, &[0.2], &small).unwrap();
        assert!((a.y0 - b.y0).abs() < 1e-6, "{} vs {}", a.y0, b.y0);
    }

    #[test]
    fn degenerate_cloud_is_reported() {
        let s = x2().with_constant_diffusion(0.0);
        let flow = MeasureFlow::stationary(EmpiricalMeasure::dirac(&[0.0]));
        let mut cfg = BsdeConfig::new(0.1, 1.0, 100, 1);
        cfg.spread = Some(0.0);
        assert!(matches!(solve_finite_bsde(&s, &flow, &[0.0], &cfg), Err(Error::BasisDegeneracy { node: 10, .. })));
    }

    #[test]
    fn short_flow_and_low_degree_rejected() {
        let flow = ou_flow(1.0);
        let cfg = BsdeConfig::new(0.01, 2.0, 100, 1);
        assert!(matches!(solve_finite_bsde(&x2(), &flow, &[0.0], &cfg), Err(Error::Coverage { .. })));
        let mut cfg = BsdeConfig::new(0.01, 1.0, 100, 1);
        cfg.degree = Some(1);
        assert!(solve_finite_bsde(&x2(), &flow, &[0.0], &cfg).is_err());
    }
}
