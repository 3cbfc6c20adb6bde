//! Reflection coupling for the weakly dissipative regime, the profile κ*, and the
//! Lyapunov function Φ built from it.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::measure::{EmpiricalMeasure, MeasureFlow};
use crate::model::{Constants, ProblemSpec};
use crate::quadrature::{gauss_legendre, integrate, Rule};
use crate::rng::{Channel, Noise};
use crate::sde::linear_fit;

/// π¹_δ: 0 below δ/2, 1 above δ, a sine ramp in between.
pub fn pi1(r: f64, delta: f64) -> f64 {
    (std::f64::consts::FRAC_PI_2 * ((2.0 * r - delta) / delta).clamp(0.0, 1.0)).sin()
}

/// π²_δ with π¹² + π²² = 1.
pub fn pi2(r: f64, delta: f64) -> f64 {
    (std::f64::consts::FRAC_PI_2 * ((2.0 * r - delta) / delta).clamp(0.0, 1.0)).cos()
}

/// Mollifier width used when none is given: δ = R/100, or 0.01 when R = 0.
pub fn default_delta(c: &Constants) -> f64 {
    if c.r_ball > 0.0 {
        0.01 * c.r_ball
    } else {
        0.01
    }
}

/// κ*(r) = (M ∧ K r)1{r ≤ R} + 𝜼 r 1{r ≤ R} − (𝜼 − K^σ_x) r.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KappaStar {
    pub eta: f64,
    pub m_b: f64,
    pub r_ball: f64,
    pub k_b_x: f64,
    pub k_s_x: f64,
    pub sigma0: f64,
}

impl KappaStar {
    pub fn from_constants(c: &Constants) -> Result<Self> {
        if !(c.eta > c.k_s_x) {
            return Err(Error::Assumption(format!("eta = {} must exceed K^s_x = {}", c.eta, c.k_s_x)));
        }
        if !(c.sigma0 > 0.0) {
            return Err(Error::Assumption("sigma0 must be positive".into()));
        }
        Ok(Self { eta: c.eta, m_b: c.m_b, r_ball: c.r_ball, k_b_x: c.k_b_x, k_s_x: c.k_s_x, sigma0: c.sigma0 })
    }

    /// 𝜼 − K^σ_x.
    pub fn gap(&self) -> f64 {
        self.eta - self.k_s_x
    }

    fn two_s2(&self) -> f64 {
        2.0 * self.sigma0 * self.sigma0
    }

    /// M/K, where the min switches branch.
    fn knee(&self) -> f64 {
        if self.k_b_x > 0.0 {
            self.m_b / self.k_b_x
        } else {
            f64::INFINITY
        }
    }

    pub fn eval(&self, r: f64) -> f64 {
        let inside = if r <= self.r_ball { self.m_b.min(self.k_b_x * r) + self.eta * r } else { 0.0 };
        inside - self.gap() * r
    }

    /// ∫₀^s κ* in closed form.
    pub fn integral(&self, s: f64) -> f64 {
        let min_part = |u: f64| {
            let rc = self.knee();
            if u <= rc {
                0.5 * self.k_b_x * u * u
            } else {
                0.5 * self.m_b * rc + self.m_b * (u - rc)
            }
        };
        let r = self.r_ball;
        if s <= r {
            min_part(s) + 0.5 * self.k_s_x * s * s
        } else {
            min_part(r) + 0.5 * self.k_s_x * r * r - 0.5 * self.gap() * (s * s - r * r)
        }
    }

    /// Φ'(s) = ∫_s^∞ u exp((I(u) − I(s))/2σ0²) du; the tail beyond R is Gaussian and exact.
    fn phi_prime(&self, s: f64, rule: &Rule) -> f64 {
        let c = self.two_s2();
        let tail_factor = c / self.gap();
        if s >= self.r_ball {
            return tail_factor;
        }
        let is = self.integral(s);
        let panels = ((self.r_ball - s) / 0.2).ceil() as usize + 1;
        let body = integrate(rule, s, self.r_ball, panels, &[self.knee()], |u| {
            u * ((self.integral(u) - is) / c).exp()
        });
        body + ((self.integral(self.r_ball) - is) / c).exp() * tail_factor
    }

    /// exp((𝜼 + 2M/R)R²/4σ0²)·2σ0²/(𝜼 − K^σ_x).
    pub fn phi_prime0_bound(&self) -> f64 {
        let r = self.r_ball;
        let e = if r > 0.0 { (self.eta + 2.0 * self.m_b / r) * r * r / (2.0 * self.two_s2()) } else { 0.0 };
        e.exp() * self.two_s2() / self.gap()
    }
}

/// Φ, Φ', Φ'' on a radius grid.
#[derive(Clone, Debug)]
pub struct LyapunovTable {
    pub kappa: KappaStar,
    pub radii: Vec<f64>,
    pub phi: Vec<f64>,
    pub dphi: Vec<f64>,
    pub d2phi: Vec<f64>,
}

impl LyapunovTable {
    /// Lower slope of Φ: 2σ0²/(𝜼 − K^σ_x).
    pub fn lower_slope(&self) -> f64 {
        self.kappa.two_s2() / self.kappa.gap()
    }

    /// Φ(0) = 0, Φ' ≥ 0, Φ'' ≤ 0, Φ nondecreasing, and the linear sandwich, each to `tol` (relative).
    pub fn invariant_violations(&self, tol: f64) -> Vec<String> {
        let mut v = Vec::new();
        if self.phi[0] != 0.0 {
            v.push(format!("Phi(0) = {}", self.phi[0]));
        }
        let p0 = self.dphi[0];
        for (i, &r) in self.radii.iter().enumerate() {
            let scale = 1.0 + p0 * r;
            if self.dphi[i] < -tol * scale {
                v.push(format!("Phi'({r}) = {} < 0", self.dphi[i]));
            }
            if self.d2phi[i] > tol * scale {
                v.push(format!("Phi''({r}) = {} > 0", self.d2phi[i]));
            }
            if i > 0 && self.phi[i] < self.phi[i - 1] - tol * scale {
                v.push(format!("Phi decreases at r = {r}"));
            }
            if self.phi[i] < self.lower_slope() * r - tol * scale || self.phi[i] > p0 * r + tol * scale {
                v.push(format!("Phi({r}) = {} outside [{}, {}]", self.phi[i], self.lower_slope() * r, p0 * r));
            }
        }
        v
    }

    pub fn to_csv(&self) -> String {
        let k = &self.kappa;
        let mut s = format!(
            "# eta={},m_b={},R={},K_b_x={},K_s_x={},sigma0={}\nr,phi,dphi,d2phi,kappa_star\n",
            k.eta, k.m_b, k.r_ball, k.k_b_x, k.k_s_x, k.sigma0
        );
        for i in 0..self.radii.len() {
            let r = self.radii[i];
            let _ = writeln!(s, "{r},{:e},{:e},{:e},{:e}", self.phi[i], self.dphi[i], self.d2phi[i], k.eval(r));
        }
        s
    }
}

/// Tabulates Φ on `grid` + 1 equally spaced radii in [0, r_max].
pub fn build_lyapunov(c: &Constants, r_max: f64, grid: usize) -> Result<LyapunovTable> {
    let kappa = KappaStar::from_constants(c)?;
    if !(r_max > kappa.r_ball) || grid == 0 {
        return Err(Error::InvalidInput(format!("need r_max > R = {} and a nonempty grid", kappa.r_ball)));
    }
    let inner = gauss_legendre(12);
    let outer = gauss_legendre(8);
    let radii: Vec<f64> = (0..=grid).map(|i| r_max * i as f64 / grid as f64).collect();
    let dphi: Vec<f64> = radii.par_iter().map(|&r| kappa.phi_prime(r, &inner)).collect();
    let cells: Vec<f64> = radii
        .par_windows(2)
        .map(|w| integrate(&outer, w[0], w[1], 1, &[kappa.r_ball, kappa.knee()], |s| kappa.phi_prime(s, &inner)))
        .collect();
    let mut phi = Vec::with_capacity(radii.len());
    phi.push(0.0);
    for v in cells {
        phi.push(phi.last().unwrap() + v);
    }
    let c2 = kappa.two_s2();
    let d2phi = radii
        .iter()
        .zip(&dphi)
        .map(|(&r, &d)| if r > kappa.r_ball { 0.0 } else { -kappa.eval(r) * d / c2 - r })
        .collect();
    Ok(LyapunovTable { kappa, radii, phi, dphi, d2phi })
}

/// max over nodes of 2σ0²Φ''(r) + κ̂(r)Φ'(r) + 2σ0² r; nonpositive means the inequality holds.
pub fn verify_lyapunov_inequality(table: &LyapunovTable, kappa_hat: impl Fn(f64) -> f64) -> f64 {
    let c = table.kappa.two_s2();
    table
        .radii
        .iter()
        .enumerate()
        .map(|(i, &r)| c * table.d2phi[i] + kappa_hat(r) * table.dphi[i] + c * r)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// σ̄ with σσᵀ = σ0² I + σ̄σ̄ᵀ, as the symmetric square root.
pub fn residual_diffusion(sigma: &[f64], sigma0: f64, x: &[f64]) -> Result<Vec<f64>> {
    let d = x.len();
    if d == 1 {
        let v = sigma[0] * sigma[0] - sigma0 * sigma0;
        if v < -1e-12 * (1.0 + sigma0 * sigma0) {
            return Err(Error::Ellipticity { state: x.to_vec(), eigenvalue: v });
        }
        return Ok(vec![v.max(0.0).sqrt()]);
    }
    let s = DMatrix::from_row_slice(d, d, sigma);
    let a = &s * s.transpose() - DMatrix::identity(d, d) * (sigma0 * sigma0);
    let eig = SymmetricEigen::new(a);
    let min = eig.eigenvalues.min();
    if min < -1e-12 * (1.0 + sigma0 * sigma0) {
        return Err(Error::Ellipticity { state: x.to_vec(), eigenvalue: min });
    }
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let m = &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose();
    Ok((0..d * d).map(|k| m[(k / d, k % d)]).collect())
}

/// Empirical κ(r): sup over sampled pairs at distance r of
/// ⟨Δ, b(x) − b(x')⟩/r + |σ̄(x) − σ̄(x')|²/(2r), with μ frozen.
pub fn empirical_kappa(
    spec: &ProblemSpec,
    mu: &EmpiricalMeasure,
    radii: &[f64],
    n_pairs: usize,
    scale: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let d = spec.dim;
    let noise = Noise::new(seed, Channel::Audit);
    let s0 = spec.constants.sigma0;
    radii
        .par_iter()
        .enumerate()
        .map(|(ri, &r)| {
            if r <= 0.0 {
                return Ok(0.0);
            }
            let mut best = f64::NEG_INFINITY;
            for p in 0..n_pairs {
                let mut st = noise.stream(ri, p);
                let x: Vec<f64> = (0..d).map(|_| scale * (2.0 * st.uniform() - 1.0)).collect();
                let mut e: Vec<f64> = (0..d).map(|_| st.normal()).collect();
                let n = e.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                e.iter_mut().for_each(|v| *v /= n);
                let xp: Vec<f64> = x.iter().zip(&e).map(|(a, b)| a - r * b).collect();
                let b = spec.eval_drift(0.0, &x, mu);
                let bp = spec.eval_drift(0.0, &xp, mu);
                let inner: f64 = (0..d).map(|i| (x[i] - xp[i]) * (b[i] - bp[i])).sum::<f64>() / r;
                let sb = residual_diffusion(&spec.eval_diffusion(&x, mu), s0, &x)?;
                let sbp = residual_diffusion(&spec.eval_diffusion(&xp, mu), s0, &xp)?;
                let fro: f64 = sb.iter().zip(&sbp).map(|(a, b)| (a - b) * (a - b)).sum();
                best = best.max(inner + fro / (2.0 * r));
            }
            Ok(best)
        })
        .collect()
}

/// Settings for a reflection-coupling run.
#[derive(Clone, Copy, Debug)]
pub struct CouplingConfig {
    pub delta: f64,
    pub dt: f64,
    pub horizon: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub record_every: usize,
}

/// Radius process of the coupled pair and its summary.
#[derive(Clone, Debug)]
pub struct CouplingRun {
    pub times: Vec<f64>,
    /// records × paths.
    pub radii: Vec<f64>,
    pub n_paths: usize,
    pub delta: f64,
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
    /// Fitted decay rate of E[r_t].
    pub rate: f64,
    /// Smallest C with E[r_t] ≤ C r₀ e^{−rate·t} on the grid.
    pub prefactor: f64,
    pub fit_start: f64,
    pub note: Option<String>,
    /// Terminal states of the first and second legs, paths × d each.
    pub terminal: (Vec<f64>, Vec<f64>),
}

impl CouplingRun {
    pub fn record(&self, k: usize) -> &[f64] {
        &self.radii[k * self.n_paths..(k + 1) * self.n_paths]
    }

    /// E[r_t] never rises by more than `k_se` standard errors between consecutive
    /// nodes after `t0`.
    pub fn nonincreasing_after(&self, t0: f64, k_se: f64) -> bool {
        (1..self.times.len())
            .filter(|&k| self.times[k - 1] >= t0)
            .all(|k| self.mean[k] <= self.mean[k - 1] + k_se * self.std_err[k].max(self.std_err[k - 1]))
    }

    pub fn to_csv(&self, header: &str) -> String {
        let mut s = format!("# {header},delta={},rate={},prefactor={}\ntime,mean_r,std_err\n", self.delta, self.rate, self.prefactor);
        for k in 0..self.times.len() {
            let _ = writeln!(s, "{},{:e},{:e}", self.times[k], self.mean[k], self.std_err[k]);
        }
        s
    }
}

#[allow(clippy::too_many_arguments)]
fn coupled_path(
    spec: &ProblemSpec,
    flow: &MeasureFlow,
    flow_prime: &MeasureFlow,
    x0: &[f64],
    x0p: &[f64],
    cfg: &CouplingConfig,
    steps: usize,
    path: usize,
    out: &mut [f64],
) -> Result<()> {
    let d = spec.dim;
    let s0 = spec.constants.sigma0;
    let (n1, n2, n3) = (
        Noise::new(cfg.seed, Channel::ReflectedNoise),
        Noise::new(cfg.seed, Channel::ResidualNoise),
        Noise::new(cfg.seed, Channel::SharedNoise),
    );
    let nc = Noise::new(cfg.seed, Channel::Coalesce);
    let mut x = x0.to_vec();
    let mut xp = x0p.to_vec();
    let (mut w1, mut w2, mut w3) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let (mut b, mut bp) = (vec![0.0; d], vec![0.0; d]);
    let (mut s, mut sp) = (vec![0.0; d * d], vec![0.0; d * d]);
    let radius = |x: &[f64], xp: &[f64]| x.iter().zip(xp).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let every = cfg.record_every.max(1);
    let mut rec = 0;
    out[rec] = radius(&x, &xp);
    rec += 1;
    for k in 0..steps {
        let t = k as f64 * cfg.dt;
        let (mu, mup) = (flow.at(t), flow_prime.at(t));
        let r = radius(&x, &xp);
        let e: Vec<f64> = if r > 0.0 { x.iter().zip(&xp).map(|(a, b)| (a - b) / r).collect() } else { vec![0.0; d] };
        let (p1, p2) = (pi1(r, cfg.delta), pi2(r, cfg.delta));
        n1.fill_increment(path, k, cfg.dt, &mut w1);
        n2.fill_increment(path, k, cfg.dt, &mut w2);
        n3.fill_increment(path, k, cfg.dt, &mut w3);
        (spec.drift)(t, &x, mu, &mut b);
        (spec.drift)(t, &xp, mup, &mut bp);
        (spec.diffusion)(&x, mu, &mut s);
        (spec.diffusion)(&xp, mup, &mut sp);
        let sb = residual_diffusion(&s, s0, &x)?;
        let sbp = residual_diffusion(&sp, s0, &xp)?;
        let ew1: f64 = e.iter().zip(&w1).map(|(a, b)| a * b).sum();
        for i in 0..d {
            let res: f64 = (0..d).map(|j| sb[i * d + j] * w2[j]).sum();
            let resp: f64 = (0..d).map(|j| sbp[i * d + j] * w2[j]).sum();
            x[i] += b[i] * cfg.dt + s0 * p1 * w1[i] + s0 * p2 * w3[i] + res;
            // (I − 2eeᵀ) dW¹ reflects the shared increment across the hyperplane ⟂ e.
            xp[i] += bp[i] * cfg.dt + s0 * p1 * (w1[i] - 2.0 * e[i] * ew1) + s0 * p2 * w3[i] + resp;
        }
        if r > 0.0 && p1 > 0.0 {
            // The continuous pair meets when the difference along e hits 0: merge on a
            // sign change, or when the Brownian-bridge crossing test fires.
            let r1: f64 = (0..d).map(|i| (x[i] - xp[i]) * e[i]).sum();
            let s = 2.0 * s0 * p1;
            let hit = r1 <= 0.0 || nc.stream(path, k).uniform() < (-2.0 * r * r1 / (s * s * cfg.dt)).exp();
            if hit {
                xp.copy_from_slice(&x);
            }
        }
        if x.iter().chain(&xp).any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { step: k + 1, time: t + cfg.dt, particle: path });
        }
        if (k + 1) % every == 0 || k + 1 == steps {
            out[rec] = radius(&x, &xp);
            rec += 1;
        }
    }
    out[rec..rec + d].copy_from_slice(&x);
    out[rec + d..rec + 2 * d].copy_from_slice(&xp);
    Ok(())
}

/// Runs `n_paths` coupled pairs of the decoupled SDE against `flow` and `flow_prime`.
pub fn simulate_reflection_coupling(
    spec: &ProblemSpec,
    flow: &MeasureFlow,
    flow_prime: &MeasureFlow,
    x0: &[f64],
    x0_prime: &[f64],
    cfg: &CouplingConfig,
) -> Result<CouplingRun> {
    let c = &spec.constants;
    if !(cfg.delta > 0.0) || (c.r_ball > 0.0 && cfg.delta >= c.r_ball) {
        return Err(Error::InvalidInput(format!("delta = {} must lie in (0, R = {})", cfg.delta, c.r_ball)));
    }
    if x0.len() != spec.dim || x0_prime.len() != spec.dim || cfg.n_paths == 0 {
        return Err(Error::InvalidInput("start points must match the dimension; need paths".into()));
    }
    if !(cfg.dt > 0.0 && cfg.horizon >= cfg.dt) {
        return Err(Error::InvalidInput("need dt > 0 and T >= dt".into()));
    }
    flow.covers(cfg.horizon)?;
    flow_prime.covers(cfg.horizon)?;
    let steps = (cfg.horizon / cfg.dt).round() as usize;
    let every = cfg.record_every.max(1);
    let mut times = vec![0.0];
    for k in 1..=steps {
        if k % every == 0 || k == steps {
            times.push(k as f64 * cfg.dt);
        }
    }
    let nr = times.len();
    let d = spec.dim;
    let width = nr + 2 * d;
    let mut by_path = vec![0.0; width * cfg.n_paths];
    by_path
        .par_chunks_mut(width)
        .enumerate()
        .try_for_each(|(p, out)| coupled_path(spec, flow, flow_prime, x0, x0_prime, cfg, steps, p, out))?;
    let n = cfg.n_paths;
    let mut radii = vec![0.0; nr * n];
    let mut terminal = (Vec::with_capacity(n * d), Vec::with_capacity(n * d));
    for p in 0..n {
        let row = &by_path[p * width..(p + 1) * width];
        for k in 0..nr {
            radii[k * n + p] = row[k];
        }
        terminal.0.extend_from_slice(&row[nr..nr + d]);
        terminal.1.extend_from_slice(&row[nr + d..]);
    }
    let mut mean = Vec::with_capacity(nr);
    let mut std_err = Vec::with_capacity(nr);
    for k in 0..nr {
        let row = &radii[k * n..(k + 1) * n];
        let m = row.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        mean.push(m);
        std_err.push((var / n as f64).sqrt());
    }
    let guess = spec.contraction_rate_hint();
    let fit_start = if guess > 0.0 { 1.0 / guess } else { 1.0 };
    let floor = (5.0 * cfg.delta).max(1e-8);
    let pick = |t0: f64| -> Vec<usize> { (0..nr).filter(|&k| times[k] >= t0 && mean[k] > floor).collect() };
    let mut idx = pick(fit_start);
    let mut note = None;
    if idx.len() < 3 {
        idx = pick(0.0);
        note = Some(format!("E[r_t] fell below {floor:.1e} before t = {fit_start:.3}; fitted from t = 0"));
    }
    let r0 = mean[0];
    let (rate, prefactor) = if idx.len() >= 2 && r0 > 0.0 {
        let xs: Vec<f64> = idx.iter().map(|&k| times[k]).collect();
        let ys: Vec<f64> = idx.iter().map(|&k| mean[k].ln()).collect();
        let rate = -linear_fit(&xs, &ys).0;
        let pref = (0..nr).map(|k| mean[k] * (rate * times[k]).exp() / r0).fold(0.0, f64::max);
        (rate, pref)
    } else {
        note = Some("too few radii above the floor to fit a rate".into());
        (f64::NAN, f64::NAN)
    };
    Ok(CouplingRun { times, radii, n_paths: n, delta: cfg.delta, mean, std_err, rate, prefactor, fit_start, note, terminal })
}
