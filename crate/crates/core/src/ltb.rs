//! Long-time behavior of the finite-horizon solutions: linear growth at rate λ,
//! convergence of Y₀^T − λT − ū to a constant ℓ, and convergence of the gradients.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::bsde::{solve_bsde, z_from_gradient, BsdeConfig, BsdeSolution};
use crate::ebsde::{ErgodicConfig, ErgodicSolution};
use crate::error::{Error, Result};
use crate::measure::{moment, EmpiricalMeasure, MeasureFlow};
use crate::model::{driver_growth_constant, row_times_matrix, ProblemSpec};
use crate::sde::{linear_fit, measure_flow};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecayModel {
    /// residual ≈ C/T
    InverseT,
    /// residual ≈ C·e^{−𝛈T} (around a limit ℓ when one is estimated)
    Exponential,
}

/// A residual sequence over a horizon grid and the fitted decay law.
#[derive(Clone, Debug)]
pub struct DecayFit {
    pub model: DecayModel,
    pub label: String,
    pub horizons: Vec<f64>,
    /// The raw observed quantity per T (Y₀^T/T, v_T or a gap).
    pub values: Vec<f64>,
    /// The quantity the decay law is fitted to.
    pub residuals: Vec<f64>,
    /// Noise band per T.
    pub noise: Vec<f64>,
    /// Whether the residual stands above twice its noise band.
    pub trusted: Vec<bool>,
    pub fitted: Vec<f64>,
    pub c: f64,
    pub c_ci: (f64, f64),
    pub ell: Option<f64>,
    pub ell_err: f64,
    pub eta: Option<f64>,
    pub eta_ci: (f64, f64),
    pub r2: f64,
    /// Seed-to-seed spread of the solver at the largest horizon.
    pub noise_floor: f64,
    pub indeterminate: bool,
    pub notes: Vec<String>,
    /// Extra named CSV columns.
    pub columns: Vec<(String, Vec<f64>)>,
    /// Extra named report entries.
    pub scalars: Vec<(String, f64)>,
}

impl DecayFit {
    pub(crate) fn new(model: DecayModel, label: &str, horizons: Vec<f64>) -> Result<Self> {
        if horizons.is_empty() || horizons.windows(2).any(|w| w[1] <= w[0]) || horizons[0] <= 0.0 {
            return Err(Error::InvalidInput("horizon grid must be positive and strictly increasing".into()));
        }
        let n = horizons.len();
        Ok(Self {
            model,
            label: label.to_string(),
            horizons,
            values: vec![0.0; n],
            residuals: vec![0.0; n],
            noise: vec![0.0; n],
            trusted: vec![true; n],
            fitted: vec![f64::NAN; n],
            c: f64::NAN,
            c_ci: (f64::NAN, f64::NAN),
            ell: None,
            ell_err: f64::NAN,
            eta: None,
            eta_ci: (f64::NAN, f64::NAN),
            r2: f64::NAN,
            noise_floor: 0.0,
            indeterminate: false,
            notes: Vec::new(),
            columns: Vec::new(),
            scalars: Vec::new(),
        })
    }

    pub fn scalar(&self, key: &str) -> Option<f64> {
        self.scalars.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn column(&self, key: &str) -> Option<&[f64]> {
        self.columns.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_slice())
    }

    pub fn strictly_decreasing(&self) -> bool {
        self.residuals.windows(2).all(|w| w[1] < w[0])
    }

    /// An exponential law needs 𝛈̂ > 0 and a determinate fit; C/T needs a finite C.
    pub fn passes(&self) -> bool {
        match self.model {
            DecayModel::Exponential => !self.indeterminate && self.eta.is_some_and(|e| e > 0.0),
            DecayModel::InverseT => self.c.is_finite(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("T,value,residual,fitted,noise,trusted");
        for (k, _) in &self.columns {
            s.push(',');
            s.push_str(k);
        }
        s.push('\n');
        for i in 0..self.horizons.len() {
            let _ = write!(
                s,
                "{},{},{},{},{},{}",
                self.horizons[i], self.values[i], self.residuals[i], self.fitted[i], self.noise[i], self.trusted[i] as u8
            );
            for (_, v) in &self.columns {
                let _ = write!(s, ",{}", v[i]);
            }
            s.push('\n');
        }
        s
    }

    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "experiment={}", self.label);
        let _ = writeln!(
            s,
            "model={}",
            match self.model {
                DecayModel::InverseT => "C/T",
                DecayModel::Exponential => "l+C*exp(-eta*T)",
            }
        );
        let _ = writeln!(s, "C={}", self.c);
        let _ = writeln!(s, "C_ci_low={}", self.c_ci.0);
        let _ = writeln!(s, "C_ci_high={}", self.c_ci.1);
        if let Some(l) = self.ell {
            let _ = writeln!(s, "ell={l}");
            let _ = writeln!(s, "ell_err={}", self.ell_err);
        }
        if let Some(e) = self.eta {
            let _ = writeln!(s, "eta={e}");
            let _ = writeln!(s, "eta_ci_low={}", self.eta_ci.0);
            let _ = writeln!(s, "eta_ci_high={}", self.eta_ci.1);
        }
        let _ = writeln!(s, "r2={}", self.r2);
        let _ = writeln!(s, "noise_floor={}", self.noise_floor);
        let _ = writeln!(s, "indeterminate={}", self.indeterminate);
        let _ = writeln!(s, "strictly_decreasing={}", self.strictly_decreasing());
        for (k, v) in &self.scalars {
            let _ = writeln!(s, "{k}={v}");
        }
        for n in &self.notes {
            let _ = writeln!(s, "note={n}");
        }
        s
    }
}

fn t_quantile(dof: usize) -> f64 {
    if dof == 0 {
        return f64::INFINITY;
    }
    StudentsT::new(0.0, 1.0, dof as f64).map(|t| t.inverse_cdf(0.975)).unwrap_or(f64::INFINITY)
}

fn r_squared(y: &[f64], f: &[f64]) -> f64 {
    let m = y.iter().sum::<f64>() / y.len() as f64;
    let tot: f64 = y.iter().map(|v| (v - m) * (v - m)).sum();
    let res: f64 = y.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum();
    if tot > 0.0 {
        1.0 - res / tot
    } else if res == 0.0 {
        1.0
    } else {
        f64::NEG_INFINITY
    }
}

/// Least squares r ≈ C/T: (C, 95% interval, R²).
pub fn fit_inverse_t(horizons: &[f64], residuals: &[f64]) -> (f64, (f64, f64), f64) {
    let sxx: f64 = horizons.iter().map(|t| 1.0 / (t * t)).sum();
    let sxy: f64 = horizons.iter().zip(residuals).map(|(t, r)| r / t).sum();
    let c = sxy / sxx;
    let fitted: Vec<f64> = horizons.iter().map(|t| c / t).collect();
    let n = horizons.len();
    let sse: f64 = residuals.iter().zip(&fitted).map(|(a, b)| (a - b) * (a - b)).sum();
    let se = if n > 1 { (sse / (n - 1) as f64 / sxx).sqrt() } else { f64::INFINITY };
    let q = t_quantile(n.saturating_sub(1));
    (c, (c - q * se, c + q * se), r_squared(residuals, &fitted))
}

/// Log-linear least squares r ≈ C·e^{−𝛈T} on positive residuals:
/// (C, 𝛈, 95% interval for 𝛈, R² in log space).
pub fn fit_exponential(horizons: &[f64], residuals: &[f64]) -> Option<(f64, f64, (f64, f64), f64)> {
    let pts: Vec<(f64, f64)> = horizons.iter().zip(residuals).filter(|(_, r)| **r > 0.0).map(|(t, r)| (*t, r.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let (slope, icpt) = linear_fit(&x, &y);
    let n = x.len();
    let fitted: Vec<f64> = x.iter().map(|t| icpt + slope * t).collect();
    let sse: f64 = y.iter().zip(&fitted).map(|(a, b)| (a - b) * (a - b)).sum();
    let mx = x.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|t| (t - mx) * (t - mx)).sum();
    let se = if n > 2 { (sse / (n - 2) as f64 / sxx).sqrt() } else { f64::INFINITY };
    let q = t_quantile(n.saturating_sub(2));
    let eta = -slope;
    Some((icpt.exp(), eta, (eta - q * se, eta + q * se), r_squared(&y, &fitted)))
}

/// Levenberg–Marquardt for v ≈ ℓ + C·e^{−𝛈T} from a starting point: (ℓ, C, 𝛈, R²).
pub fn fit_with_limit(horizons: &[f64], values: &[f64], start: (f64, f64, f64)) -> (f64, f64, f64, f64) {
    let mut p = Vector3::new(start.0, start.1, start.2);
    let model = |p: &Vector3<f64>, t: f64| p[0] + p[1] * (-p[2] * t).exp();
    let sse = |p: &Vector3<f64>| horizons.iter().zip(values).map(|(t, v)| (v - model(p, *t)).powi(2)).sum::<f64>();
    let mut lam = 1e-3;
    let mut cur = sse(&p);
    for _ in 0..200 {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for (t, v) in horizons.iter().zip(values) {
            let e = (-p[2] * t).exp();
            let j = Vector3::new(1.0, e, -p[1] * t * e);
            jtj += j * j.transpose();
            jtr += j * (v - model(&p, *t));
        }
        let mut a = jtj;
        for i in 0..3 {
            a[(i, i)] *= 1.0 + lam;
            a[(i, i)] += 1e-300;
        }
        let Some(step) = a.lu().solve(&jtr) else { break };
        let trial = p + step;
        let s = sse(&trial);
        if s < cur {
            p = trial;
            lam = (lam * 0.3).max(1e-12);
            let done = cur - s <= 1e-15 * cur.max(1e-300);
            cur = s;
            if done {
                break;
            }
        } else {
            lam *= 10.0;
            if lam > 1e12 {
                break;
            }
        }
    }
    let fitted: Vec<f64> = horizons.iter().map(|t| model(&p, *t)).collect();
    (p[0], p[1], p[2], r_squared(values, &fitted))
}

/// Solver settings shared by the three experiments.
#[derive(Clone, Debug)]
pub struct LtbConfig {
    pub horizons: Vec<f64>,
    /// Horizon is overwritten per T.
    pub bsde: BsdeConfig,
    /// Extra seeds for the noise floor at the largest horizon.
    pub noise_seeds: usize,
}

impl LtbConfig {
    /// Same cloud, step, basis and scheme as the ergodic extraction, so that the
    /// finite-horizon solutions converge to the extracted limit of the same scheme.
    pub fn matching(erg: &ErgodicConfig, horizons: Vec<f64>) -> Self {
        Self { horizons, bsde: erg.bsde_config(1.0, 0.0), noise_seeds: 3 }
    }

    fn at(&self, horizon: f64, seed: u64) -> BsdeConfig {
        BsdeConfig { horizon, seed, alpha: 0.0, ..self.bsde.clone() }
    }

    fn t_max(&self) -> f64 {
        self.horizons.last().copied().unwrap_or(0.0)
    }
}

/// Which terminal condition the finite problems use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LtbTerminal {
    Model,
    /// g = ū from the ergodic solution; then Y^T = ū + λ(T − t) solves the problem exactly.
    ErgodicValue,
}

/// The law flow from θ: stationary at μ* when θ is omitted, otherwise simulated.
pub fn theta_flow(
    spec: &ProblemSpec,
    theta: Option<&EmpiricalMeasure>,
    erg: &ErgodicSolution,
    dt: f64,
    horizon: f64,
    n: usize,
    seed: u64,
) -> Result<MeasureFlow> {
    match theta {
        None => Ok(MeasureFlow::stationary(erg.mu_star.clone())),
        Some(t) => measure_flow(spec, t, dt, horizon, n, seed, 1),
    }
}

fn solve(
    spec: &ProblemSpec,
    erg: &ErgodicSolution,
    flow: &MeasureFlow,
    x0: &[f64],
    cfg: &BsdeConfig,
    terminal: LtbTerminal,
) -> Result<BsdeSolution> {
    match terminal {
        LtbTerminal::Model => solve_bsde(spec, flow, x0, cfg, None),
        LtbTerminal::ErgodicValue => {
            let g = |x: &[f64], _mu: &EmpiricalMeasure| erg.u_bar(x);
            solve_bsde(spec, flow, x0, cfg, Some(&g))
        }
    }
}

/// Sample standard deviation of `f` over the base seed and `noise_seeds` more at T_max.
#[allow(clippy::too_many_arguments)]
fn seed_spread(
    spec: &ProblemSpec,
    erg: &ErgodicSolution,
    flow: &MeasureFlow,
    x0: &[f64],
    cfg: &LtbConfig,
    terminal: LtbTerminal,
    base: &BsdeSolution,
    f: impl Fn(&BsdeSolution) -> Vec<f64>,
) -> Result<Vec<f64>> {
    let mut samples = vec![f(base)];
    for s in 1..=cfg.noise_seeds as u64 {
        let sol = solve(spec, erg, flow, x0, &cfg.at(cfg.t_max(), cfg.bsde.seed.wrapping_add(s * 0x9E37)), terminal)?;
        samples.push(f(&sol));
    }
    let k = samples[0].len();
    let n = samples.len() as f64;
    Ok((0..k)
        .map(|j| {
            let m = samples.iter().map(|v| v[j]).sum::<f64>() / n;
            (samples.iter().map(|v| (v[j] - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
        })
        .collect())
}

fn growth_envelope(spec: &ProblemSpec, x0: &[f64], theta: &EmpiricalMeasure, seed: u64) -> (f64, f64) {
    let q = spec.constants.q;
    let c_hat = driver_growth_constant(spec, 2000, seed);
    let xn = x0.iter().map(|v| v * v).sum::<f64>().sqrt();
    let th = moment(theta, 2.0 * q + 2.0).unwrap_or(0.0);
    (c_hat, c_hat * (1.0 + xn.powf(q + 1.0) + th.powf(q + 1.0)))
}

/// |Y₀^T/T − λ| against C/T.
pub fn ltb1_experiment(
    spec: &ProblemSpec,
    erg: &ErgodicSolution,
    flow: &MeasureFlow,
    x0: &[f64],
    cfg: &LtbConfig,
) -> Result<DecayFit> {
    let mut fit = DecayFit::new(DecayModel::InverseT, "ltb1", cfg.horizons.clone())?;
    let mut y0s = Vec::new();
    let mut last = None;
    for &t in &cfg.horizons {
        let sol = solve(spec, erg, flow, x0, &cfg.at(t, cfg.bsde.seed), LtbTerminal::Model)?;
        y0s.push(sol.y0);
        last = Some(sol);
    }
    let base = last.unwrap();
    let sd = seed_spread(spec, erg, flow, x0, cfg, LtbTerminal::Model, &base, |s| vec![s.y0])?[0];
    fit.noise_floor = sd;
    for (i, &t) in cfg.horizons.iter().enumerate() {
        fit.values[i] = y0s[i] / t;
        fit.residuals[i] = (y0s[i] / t - erg.lambda).abs();
        fit.noise[i] = ((sd / t).powi(2) + erg.lambda_err.powi(2)).sqrt();
        fit.trusted[i] = fit.residuals[i] > 2.0 * fit.noise[i];
    }
    let (c, ci, r2) = fit_inverse_t(&fit.horizons, &fit.residuals);
    fit.c = c;
    fit.c_ci = ci;
    fit.r2 = r2;
    fit.fitted = fit.horizons.iter().map(|t| c / t).collect();
    let (c_hat, env) = growth_envelope(spec, x0, flow.at(0.0), cfg.bsde.seed);
    fit.scalars.push(("lambda".into(), erg.lambda));
    fit.scalars.push(("growth_constant".into(), c_hat));
    fit.scalars.push(("envelope".into(), env));
    fit.scalars.push(("within_envelope".into(), (c <= env) as u8 as f64));
    fit.columns.push(("y0".into(), y0s));
    Ok(fit)
}

/// v_T = Y₀^T − λT − ū(x0); ℓ̂ from the largest T, then the log-residual fit.
pub fn ltb2_experiment(
    spec: &ProblemSpec,
    erg: &ErgodicSolution,
    flow: &MeasureFlow,
    x0: &[f64],
    cfg: &LtbConfig,
    terminal: LtbTerminal,
) -> Result<DecayFit> {
    let mut fit = DecayFit::new(DecayModel::Exponential, "ltb2", cfg.horizons.clone())?;
    let n = cfg.horizons.len();
    let mut y0s = Vec::new();
    let mut last = None;
    for &t in &cfg.horizons {
        let sol = solve(spec, erg, flow, x0, &cfg.at(t, cfg.bsde.seed), terminal)?;
        y0s.push(sol.y0);
        last = Some(sol);
    }
    let base = last.unwrap();
    let sd = seed_spread(spec, erg, flow, x0, cfg, terminal, &base, |s| vec![s.y0])?[0];
    fit.noise_floor = sd;
    let ubar = erg.u_bar(x0);
    let uerr = erg.u_bar_err(x0);
    let band: Vec<f64> = cfg.horizons.iter().map(|t| (sd * sd + (t * erg.lambda_err).powi(2) + uerr * uerr).sqrt()).collect();
    for i in 0..n {
        fit.values[i] = y0s[i] - erg.lambda * cfg.horizons[i] - ubar;
    }
    let ell = fit.values[n - 1];
    fit.ell = Some(ell);
    fit.ell_err = band[n - 1];
    for i in 0..n {
        fit.residuals[i] = (fit.values[i] - ell).abs();
        fit.noise[i] = if i + 1 == n { band[i] } else { (band[i].powi(2) + band[n - 1].powi(2)).sqrt() };
        fit.trusted[i] = i + 1 < n && fit.residuals[i] > 2.0 * fit.noise[i];
    }
    fit_decay(&mut fit, true);
    fit.scalars.push(("lambda".into(), erg.lambda));
    fit.scalars.push(("u_bar_x0".into(), ubar));
    fit.scalars.push(("max_abs_v_over_band".into(), fit.values.iter().zip(&band).map(|(v, b)| v.abs() / b).fold(0.0, f64::max)));
    fit.columns.push(("y0".into(), y0s));
    fit.columns.push(("band".into(), band));
    Ok(fit)
}

/// Fits the trusted residuals; with a limit, refits ℓ freely when R² < 0.9.
pub(crate) fn fit_decay(fit: &mut DecayFit, with_limit: bool) {
    let n = fit.horizons.len();
    let eligible = if with_limit { n - 1 } else { n };
    let trusted = fit.trusted.iter().filter(|t| **t).count();
    if 2 * trusted < eligible || trusted < 2 {
        fit.indeterminate = true;
        fit.notes.push(format!("rate indeterminate: {trusted} of {eligible} residuals above twice the noise band"));
    }
    let (h, r): (Vec<f64>, Vec<f64>) =
        fit.horizons.iter().zip(&fit.residuals).zip(&fit.trusted).filter(|(_, t)| **t).map(|((h, r), _)| (*h, *r)).unzip();
    let Some((c, eta, ci, r2)) = fit_exponential(&h, &r) else {
        fit.indeterminate = true;
        return;
    };
    fit.c = c;
    fit.eta = Some(eta);
    fit.eta_ci = ci;
    fit.r2 = r2;
    fit.fitted = fit.horizons.iter().map(|t| c * (-eta * t).exp()).collect();
    if with_limit && r2 < 0.9 && n >= 4 {
        let ell0 = fit.ell.unwrap_or(0.0);
        let sign = if fit.values[0] >= ell0 { 1.0 } else { -1.0 };
        let (ell, c2, eta2, r2b) = fit_with_limit(&fit.horizons, &fit.values, (ell0, sign * c, eta));
        if r2b.is_finite() && eta2 > 0.0 {
            fit.notes.push(format!("refit with free limit: ell {ell0} -> {ell}"));
            fit.ell = Some(ell);
            fit.c = c2.abs();
            fit.eta = Some(eta2);
            fit.r2 = r2b;
            fit.fitted = fit.horizons.iter().map(|t| c2.abs() * (-eta2 * t).exp()).collect();
        }
    }
}

/// |∇u^T(0, x0) − ∇ū(x0)| and |Z₀^T − Z̄₀| with Z read through the gradient.
pub fn ltb3_experiment(
    spec: &ProblemSpec,
    erg: &ErgodicSolution,
    flow: &MeasureFlow,
    x0: &[f64],
    cfg: &LtbConfig,
    terminal: LtbTerminal,
) -> Result<DecayFit> {
    let mut fit = DecayFit::new(DecayModel::Exponential, "ltb3", cfg.horizons.clone())?;
    let d = spec.dim;
    let n = cfg.horizons.len();
    let grad_bar = erg.grad_u_bar(x0);
    let sigma = spec.eval_diffusion(x0, flow.at(0.0));
    let mut z_bar = vec![0.0; d];
    row_times_matrix(&grad_bar, &sigma, &mut z_bar);
    let mut grad_gap = Vec::new();
    let mut z_t = Vec::new();
    let mut last = None;
    for &t in &cfg.horizons {
        let sol = solve(spec, erg, flow, x0, &cfg.at(t, cfg.bsde.seed), terminal)?;
        let g = sol.gradient(0, x0);
        let (z, _) = z_from_gradient(&sol, spec, flow, 0.0, x0);
        grad_gap.push(norm_diff(&g, &grad_bar));
        z_t.push(z);
        last = Some(sol);
    }
    let base = last.unwrap();
    let sds = seed_spread(spec, erg, flow, x0, cfg, terminal, &base, |s| {
        let mut v = s.gradient(0, x0);
        v.extend(z_from_gradient(s, spec, flow, 0.0, x0).0);
        v
    })?;
    let grad_sd = sds[..d].iter().map(|v| v * v).sum::<f64>().sqrt();
    let z_sd = sds[d..].iter().map(|v| v * v).sum::<f64>().sqrt();
    let gerr = erg.grad_u_bar_err(x0);
    let smax = sigma.iter().map(|v| v.abs()).fold(0.0, f64::max) * (d as f64).sqrt();
    let grad_noise = (grad_sd * grad_sd + gerr * gerr).sqrt();
    let z_noise = (z_sd * z_sd + (gerr * smax).powi(2)).sqrt();
    fit.noise_floor = z_sd;
    for i in 0..n {
        fit.values[i] = z_t[i][0];
        fit.residuals[i] = norm_diff(&z_t[i], &z_bar);
        fit.noise[i] = z_noise;
        fit.trusted[i] = fit.residuals[i] > 2.0 * z_noise;
    }
    fit_decay(&mut fit, false);
    fit.scalars.push(("z_bar".into(), z_bar[0]));
    fit.scalars.push(("grad_noise".into(), grad_noise));
    fit.scalars.push(("max_grad_gap".into(), grad_gap.iter().cloned().fold(0.0, f64::max)));
    fit.columns.push(("grad_gap".into(), grad_gap));
    fit.columns.push(("z0_T".into(), z_t.iter().map(|z| z[0]).collect()));
    Ok(fit)
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ebsde::extract_ergodic_from;
    use crate::measure::invariant_measure;
    use crate::model::preset;

    #[test]
    fn fits_recover_known_laws() {
        let h = [1.0, 2.0, 4.0, 8.0];
        let r: Vec<f64> = h.iter().map(|t| 0.3 / t).collect();
        let (c, ci, r2) = fit_inverse_t(&h, &r);
        assert!((c - 0.3).abs() < 1e-12 && r2 > 0.999999 && ci.0 <= c && c <= ci.1);
        let r: Vec<f64> = h.iter().map(|t| 2.0 * (-0.7 * t).exp()).collect();
        let (c, eta, _, r2) = fit_exponential(&h, &r).unwrap();
        assert!((c - 2.0).abs() < 1e-9 && (eta - 0.7).abs() < 1e-12 && r2 > 0.999999);
        let v: Vec<f64> = h.iter().map(|t| 0.25 - 0.5 * (-0.9 * t).exp()).collect();
        let (ell, c, eta, r2) = fit_with_limit(&h, &v, (0.2, -0.3, 0.5));
        assert!((ell - 0.25).abs() < 1e-8 && (c + 0.5).abs() < 1e-7 && (eta - 0.9).abs() < 1e-7 && r2 > 0.999999);
        assert!(DecayFit::new(DecayModel::InverseT, "x", vec![2.0, 1.0]).is_err());
    }

    fn setup() -> (ProblemSpec, ErgodicSolution, ErgodicConfig) {
        let s = preset("ou-attract").unwrap().with_driver(false, |x, _m, _z| x[0] * x[0]).with_terminal(|_x, _m| 0.0);
        let mu = invariant_measure(&s, 4000, 0.01, 20.0, 2).unwrap().measure;
        let cfg = ErgodicConfig::new(vec![0.1, 0.05, 0.025, 0.0125], 0.02, 400, 3);
        let erg = extract_ergodic_from(&s, mu, &cfg).unwrap();
        (s, erg, cfg)
    }

    #[test]
    fn ou_square_long_time() {
        let (s, erg, ecfg) = setup();
        assert!((erg.lambda - 1.0 / (2.0 - 0.02)).abs() < 5e-3, "{}", erg.lambda);
        let flow = MeasureFlow::stationary(erg.mu_star.clone());
        let fit = ltb1_experiment(&s, &erg, &flow, &[0.0], &LtbConfig::matching(&ecfg, vec![5.0, 10.0, 20.0])).unwrap();
        for (t, r) in fit.horizons.iter().zip(&fit.residuals) {
            let oracle = 0.25 * (1.0 - (-2.0 * t).exp()) / t;
            assert!((r - oracle).abs() <= 0.3 * oracle, "T={t}: {r} vs {oracle}");
        }
        assert!(fit.scalar("within_envelope") == Some(1.0));

        let g = s.clone().with_terminal(|x, _m| x[0] * x[0]);
        let cfg = LtbConfig::matching(&ecfg, vec![2.0, 4.0, 6.0, 8.0]);
        let fit = ltb2_experiment(&g, &erg, &flow, &[0.0], &cfg, LtbTerminal::Model).unwrap();
        assert!(fit.strictly_decreasing(), "{:?}", fit.residuals);
        assert!(fit.passes(), "{}", fit.report());
        let eta = fit.eta.unwrap();
        assert!((0.7..=2.6).contains(&eta), "{eta}");
        assert!((fit.ell.unwrap() - 0.25).abs() < 0.01);
        let exact = ltb2_experiment(&s, &erg, &flow, &[0.5], &cfg, LtbTerminal::ErgodicValue).unwrap();
        for (v, b) in exact.values.iter().zip(exact.column("band").unwrap()) {
            assert!(v.abs() <= 2.0 * b, "{v} vs {b}");
        }
        let fit3 = ltb3_experiment(&s, &erg, &flow, &[0.5], &LtbConfig::matching(&ecfg, vec![1.0, 2.0]), LtbTerminal::ErgodicValue).unwrap();
        assert!(fit3.scalar("max_grad_gap").unwrap() <= 2.0 * fit3.scalar("grad_noise").unwrap() + 1e-12, "{}", fit3.report());
    }
}
