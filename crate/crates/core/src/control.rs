//! Partial McKean-Vlasov control: Hamiltonian, feedback, controlled costs.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::bsde::{solve_bsde, z_from_gradient, BsdeSolution};
use crate::ebsde::ErgodicSolution;
use crate::error::{Error, Result};
use crate::ltb::{fit_exponential, DecayFit, DecayModel, LtbConfig};
use crate::measure::{EmpiricalMeasure, MeasureFlow};
use crate::model::{matrix_times_vec, row_times_matrix, ControlSet, ProblemSpec, RunningCost};
use crate::rng::{Channel, Noise};

const GOLDEN_TOL: f64 = 1e-10;

fn golden(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64) -> (f64, f64) {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > GOLDEN_TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}

/// Golden-section on [lo, hi] restarted on three subintervals, endpoints included.
fn minimize_1d(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64) -> (f64, f64) {
    let mut best = (lo, f(lo));
    let fh = f(hi);
    if fh < best.1 {
        best = (hi, fh);
    }
    if hi > lo {
        let h = (hi - lo) / 3.0;
        for i in 0..3 {
            let cand = golden(f, lo + i as f64 * h, lo + (i + 1) as f64 * h);
            if cand.1 < best.1 {
                best = cand;
            }
        }
    }
    best
}

/// Minimizes `obj` over the box: 1-D directly, otherwise a grid of about 10⁴ points
/// followed by coordinate-wise golden-section polish.
fn minimize_box(obj: &dyn Fn(&[f64]) -> f64, cs: &ControlSet) -> (Vec<f64>, f64) {
    let k = cs.k();
    if k == 1 {
        let (a, v) = minimize_1d(&|a| obj(&[a]), cs.lo[0], cs.hi[0]);
        return (vec![a], v);
    }
    let m = (1e4f64.powf(1.0 / k as f64).ceil() as usize).max(2);
    let mut best = (cs.lo.clone(), f64::INFINITY);
    let mut idx = vec![0usize; k];
    let mut a = vec![0.0; k];
    loop {
        for j in 0..k {
            a[j] = cs.lo[j] + (cs.hi[j] - cs.lo[j]) * idx[j] as f64 / (m - 1) as f64;
        }
        let v = obj(&a);
        if v < best.1 {
            best = (a.clone(), v);
        }
        let mut j = 0;
        while j < k {
            idx[j] += 1;
            if idx[j] < m {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
        if j == k {
            break;
        }
    }
    let (mut a, mut v) = best;
    for _ in 0..50 {
        let before = v;
        for j in 0..k {
            let cell = (cs.hi[j] - cs.lo[j]) / (m - 1) as f64;
            let lo = (a[j] - cell).max(cs.lo[j]);
            let hi = (a[j] + cell).min(cs.hi[j]);
            let base = a.clone();
            let (aj, vj) = minimize_1d(
                &|t| {
                    let mut trial = base.clone();
                    trial[j] = t;
                    obj(&trial)
                },
                lo,
                hi,
            );
            if vj < v {
                a[j] = aj;
                v = vj;
            }
        }
        if before - v < 1e-12 {
            break;
        }
    }
    (a, v)
}

/// f(x, μ, z) = inf_{a ∈ 𝒜} L(x, μ, a) + zRa and a minimizer.
pub fn hamiltonian_with(cs: &ControlSet, cost: &RunningCost, x: &[f64], mu: &EmpiricalMeasure, z: &[f64]) -> (f64, Vec<f64>) {
    let k = cs.k();
    let mut zr = vec![0.0; k];
    cs.z_times_r(z, &mut zr);
    match cost {
        RunningCost::QuadraticControl { state_cost } => {
            let a: Vec<f64> = (0..k).map(|i| (-0.5 * zr[i]).clamp(cs.lo[i], cs.hi[i])).collect();
            let v = state_cost(x, mu) + a.iter().zip(&zr).map(|(ai, zi)| ai * ai + zi * ai).sum::<f64>();
            (v, a)
        }
        RunningCost::General(l) => {
            let obj = |a: &[f64]| l(x, mu, a) + a.iter().zip(&zr).map(|(ai, zi)| ai * zi).sum::<f64>();
            let (a, v) = minimize_box(&obj, cs);
            (v, a)
        }
    }
}

/// The Hamiltonian of the declared control problem.
pub fn hamiltonian(spec: &ProblemSpec, x: &[f64], mu: &EmpiricalMeasure, z: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (cs, cost) = control_parts(spec)?;
    Ok(hamiltonian_with(cs, cost, x, mu, z))
}

fn control_parts(spec: &ProblemSpec) -> Result<(&ControlSet, &RunningCost)> {
    let cs = spec.control_set.as_ref().ok_or_else(|| Error::Configuration("no control set declared".into()))?;
    let cost = spec.running_cost.as_ref().ok_or_else(|| Error::Configuration("no running cost declared".into()))?;
    Ok((cs, cost))
}

/// Where the feedback reads its z.
#[derive(Clone, Copy)]
pub enum ZSource<'a> {
    /// ζ^T(t, x) from the node fits of a finite-horizon solution.
    Finite(&'a BsdeSolution),
    /// ζ̄(x).
    Ergodic(&'a ErgodicSolution),
    Constant(&'a [f64]),
    Zero,
}

/// A control: the Hamiltonian feedback a = φ(x, μ, z) for some z-source, or a constant action.
#[derive(Clone, Copy)]
pub enum ControlPolicy<'a> {
    Feedback(ZSource<'a>),
    Constant(&'a [f64]),
}

impl ControlPolicy<'_> {
    pub fn describe(&self) -> String {
        match self {
            ControlPolicy::Feedback(ZSource::Finite(_)) => "feedback:finite".into(),
            ControlPolicy::Feedback(ZSource::Ergodic(_)) => "feedback:ergodic".into(),
            ControlPolicy::Feedback(ZSource::Constant(z)) => format!("feedback:constant{z:?}"),
            ControlPolicy::Feedback(ZSource::Zero) => "feedback:zero".into(),
            ControlPolicy::Constant(a) => format!("constant{a:?}"),
        }
    }

    fn z(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            ControlPolicy::Feedback(ZSource::Finite(sol)) => {
                let (k, _) = sol.node_index(t);
                let mut v = vec![0.0; x.len() + 1];
                sol.nodes[k].eval(x, &mut v);
                out.copy_from_slice(&v[1..]);
            }
            ControlPolicy::Feedback(ZSource::Ergodic(e)) => e.zeta_bar.eval(x, out),
            ControlPolicy::Feedback(ZSource::Constant(z)) => out.copy_from_slice(z),
            _ => out.iter_mut().for_each(|v| *v = 0.0),
        }
    }

    /// The action at (t, x); an action outside 𝒜 is an invariant breach.
    pub fn action(&self, cs: &ControlSet, cost: &RunningCost, t: f64, x: &[f64], mu: &EmpiricalMeasure) -> Result<Vec<f64>> {
        let a = match self {
            ControlPolicy::Constant(a) => a.to_vec(),
            ControlPolicy::Feedback(_) => {
                let mut z = vec![0.0; x.len()];
                self.z(t, x, &mut z);
                hamiltonian_with(cs, cost, x, mu, &z).1
            }
        };
        if !cs.contains(&a) {
            return Err(Error::Inadmissible { action: a });
        }
        Ok(a)
    }
}

/// φ(x, μ, z): the Hamiltonian minimizer.
pub fn feedback(spec: &ProblemSpec, x: &[f64], mu: &EmpiricalMeasure, z: &[f64]) -> Result<Vec<f64>> {
    Ok(hamiltonian(spec, x, mu, z)?.1)
}

/// A Monte Carlo cost estimate against a benchmark.
#[derive(Clone, Debug)]
pub struct CostReport {
    pub label: String,
    pub policy: String,
    pub horizon: f64,
    pub n_paths: usize,
    pub estimate: f64,
    pub std_err: f64,
    /// Estimate with the martingale ∫Z dW subtracted (finite z-source only).
    pub cv_estimate: Option<f64>,
    pub cv_std_err: Option<f64>,
    pub benchmark: f64,
    pub benchmark_err: f64,
    pub gap: f64,
}

impl CostReport {
    pub fn combined_err(&self) -> f64 {
        (self.std_err.powi(2) + self.benchmark_err.powi(2)).sqrt()
    }

    /// |J − benchmark| ≤ 3 × combined error.
    pub fn matches(&self) -> bool {
        self.gap.abs() <= 3.0 * self.combined_err()
    }

    /// J ≥ benchmark − 3 × combined error.
    pub fn dominates(&self) -> bool {
        self.gap >= -3.0 * self.combined_err()
    }

    pub fn csv_header() -> &'static str {
        "label,policy,horizon,n_paths,estimate,std_err,cv_estimate,cv_std_err,benchmark,benchmark_err,gap"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.label,
            self.policy.replace(',', ";"),
            self.horizon,
            self.n_paths,
            self.estimate,
            self.std_err,
            self.cv_estimate.unwrap_or(f64::NAN),
            self.cv_std_err.unwrap_or(f64::NAN),
            self.benchmark,
            self.benchmark_err,
            self.gap
        )
    }

    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "label={}", self.label);
        let _ = writeln!(s, "policy={}", self.policy);
        let _ = writeln!(s, "J={}", self.estimate);
        let _ = writeln!(s, "J_std_err={}", self.std_err);
        if let Some(v) = self.cv_estimate {
            let _ = writeln!(s, "J_cv={v}");
            let _ = writeln!(s, "J_cv_std_err={}", self.cv_std_err.unwrap_or(f64::NAN));
        }
        let _ = writeln!(s, "benchmark={}", self.benchmark);
        let _ = writeln!(s, "gap={}", self.gap);
        let _ = writeln!(s, "matches={}", self.matches());
        let _ = writeln!(s, "dominates={}", self.dominates());
        s
    }
}

/// Per-path totals of a controlled run.
struct PathCosts {
    /// ∫ L dt over the averaging window, plus g at T when requested.
    total: Vec<f64>,
    /// ∫ Z dW along the path (zero without a finite z-source).
    martingale: Vec<f64>,
    /// log of the Girsanov density (zero for direct simulation).
    log_weight: Vec<f64>,
}

/// Simulates the decoupled SDE with drift b + σRa (or, when `reweight`, the uncontrolled
/// SDE while accumulating ρ^a), charging L on [window_start, T] and g at T if `terminal`.
#[allow(clippy::too_many_arguments)]
fn run_controlled(
    spec: &ProblemSpec,
    policy: &ControlPolicy,
    x0: &[f64],
    flow: &MeasureFlow,
    horizon: f64,
    dt: f64,
    n: usize,
    seed: u64,
    window_start: f64,
    terminal: bool,
    reweight: bool,
) -> Result<PathCosts> {
    let (cs, cost) = control_parts(spec)?;
    flow.covers(horizon)?;
    if !flow.is_stationary() {
        flow.check_aligned(dt)?;
    }
    if x0.len() != spec.dim || n == 0 || !(dt > 0.0) {
        return Err(Error::InvalidInput("bad start, path count or step".into()));
    }
    let d = spec.dim;
    let k = cs.k();
    let m = (horizon / dt).round() as usize;
    let noise = Noise::new(seed, Channel::Control);
    let finite = matches!(policy, ControlPolicy::Feedback(ZSource::Finite(_)));
    let mut states = x0.repeat(n);
    let mut out = PathCosts { total: vec![0.0; n], martingale: vec![0.0; n], log_weight: vec![0.0; n] };
    let sq = dt.sqrt();
    for step in 0..m {
        let t = step as f64 * dt;
        let mu = flow.at(t);
        let charge = t + 1e-12 >= window_start;
        let results: Vec<Result<()>> = states
            .par_chunks_mut(d)
            .zip(out.total.par_iter_mut())
            .zip(out.martingale.par_iter_mut())
            .zip(out.log_weight.par_iter_mut())
            .enumerate()
            .with_min_len(64)
            .map(|(i, (((x, tot), mart), lw))| {
                let a = policy.action(cs, cost, t, x, mu)?;
                if charge {
                    *tot += cost.eval(x, mu, &a) * dt;
                }
                let mut ra = vec![0.0; d];
                let mut ra_k = vec![0.0; k];
                ra_k.copy_from_slice(&a);
                cs.r_times_a(&ra_k, &mut ra);
                let b = spec.eval_drift(t, x, mu);
                let s = spec.eval_diffusion(x, mu);
                let mut dw = vec![0.0; d];
                noise.fill_normals(i, step + 1, &mut dw);
                dw.iter_mut().for_each(|v| *v *= sq);
                if finite {
                    let mut z = vec![0.0; d];
                    policy.z(t, x, &mut z);
                    *mart += z.iter().zip(&dw).map(|(a, b)| a * b).sum::<f64>();
                }
                let mut sra = vec![0.0; d];
                matrix_times_vec(&s, &ra, &mut sra);
                let mut sdw = vec![0.0; d];
                matrix_times_vec(&s, &dw, &mut sdw);
                if reweight {
                    *lw += ra.iter().zip(&dw).map(|(a, b)| a * b).sum::<f64>() - 0.5 * ra.iter().map(|v| v * v).sum::<f64>() * dt;
                    for j in 0..d {
                        x[j] += b[j] * dt + sdw[j];
                    }
                } else {
                    for j in 0..d {
                        x[j] += (b[j] + sra[j]) * dt + sdw[j];
                    }
                }
                Ok(())
            })
            .collect();
        for r in results {
            r?;
        }
        if let Some(p) = states.iter().position(|v| !v.is_finite()) {
            return Err(Error::BlowUp { step: step + 1, time: (step + 1) as f64 * dt, particle: p / d });
        }
    }
    if terminal {
        let mu = flow.at(m as f64 * dt);
        for (tot, x) in out.total.iter_mut().zip(states.chunks(d)) {
            *tot += (spec.terminal)(x, mu);
        }
    }
    Ok(out)
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (var / n).sqrt())
}

/// J^T = E[∫₀^T L dt + g(X_T)] under the policy, against a benchmark (typically Y₀^T).
#[allow(clippy::too_many_arguments)]
pub fn evaluate_cost_finite(
    spec: &ProblemSpec,
    policy: &ControlPolicy,
    x0: &[f64],
    flow: &MeasureFlow,
    horizon: f64,
    dt: f64,
    n: usize,
    seed: u64,
    benchmark: (f64, f64),
) -> Result<CostReport> {
    let pc = run_controlled(spec, policy, x0, flow, horizon, dt, n, seed, 0.0, true, false)?;
    let (est, se) = mean_se(&pc.total);
    let (cv, cv_se) = if matches!(policy, ControlPolicy::Feedback(ZSource::Finite(_))) {
        let v: Vec<f64> = pc.total.iter().zip(&pc.martingale).map(|(a, b)| a - b).collect();
        let (m, s) = mean_se(&v);
        (Some(m), Some(s))
    } else {
        (None, None)
    };
    Ok(CostReport {
        label: "finite".into(),
        policy: policy.describe(),
        horizon,
        n_paths: n,
        estimate: est,
        std_err: se,
        cv_estimate: cv,
        cv_std_err: cv_se,
        benchmark: benchmark.0,
        benchmark_err: benchmark.1,
        gap: est - benchmark.0,
    })
}

/// The same J^T by reweighting uncontrolled paths with ρ^a_T = exp(∫(Ra)ᵀdW − ½∫|Ra|²dt).
#[allow(clippy::too_many_arguments)]
pub fn evaluate_cost_girsanov(
    spec: &ProblemSpec,
    policy: &ControlPolicy,
    x0: &[f64],
    flow: &MeasureFlow,
    horizon: f64,
    dt: f64,
    n: usize,
    seed: u64,
    benchmark: (f64, f64),
) -> Result<CostReport> {
    let pc = run_controlled(spec, policy, x0, flow, horizon, dt, n, seed, 0.0, true, true)?;
    let v: Vec<f64> = pc.total.iter().zip(&pc.log_weight).map(|(c, lw)| c * lw.exp()).collect();
    let (est, se) = mean_se(&v);
    Ok(CostReport {
        label: "girsanov".into(),
        policy: policy.describe(),
        horizon,
        n_paths: n,
        estimate: est,
        std_err: se,
        cv_estimate: None,
        cv_std_err: None,
        benchmark: benchmark.0,
        benchmark_err: benchmark.1,
        gap: est - benchmark.0,
    })
}

/// Long-run average cost over the tail window [T_long/5, T_long], against λ.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_cost_ergodic(
    spec: &ProblemSpec,
    policy: &ControlPolicy,
    x0: &[f64],
    flow: &MeasureFlow,
    t_long: f64,
    dt: f64,
    n: usize,
    seed: u64,
    lambda: (f64, f64),
) -> Result<CostReport> {
    let start = (0.2 * t_long / dt).round() * dt;
    let pc = run_controlled(spec, policy, x0, flow, t_long, dt, n, seed, start, false, false)?;
    let width = ((t_long / dt).round() * dt - start).max(dt);
    let v: Vec<f64> = pc.total.iter().map(|c| c / width).collect();
    let (est, se) = mean_se(&v);
    Ok(CostReport {
        label: "ergodic".into(),
        policy: policy.describe(),
        horizon: t_long,
        n_paths: n,
        estimate: est,
        std_err: se,
        cv_estimate: None,
        cv_std_err: None,
        benchmark: lambda.0,
        benchmark_err: lambda.1,
        gap: est - lambda.0,
    })
}

/// One row of the feedback comparison at x0.
#[derive(Clone, Debug)]
pub struct FeedbackGap {
    pub horizon: f64,
    pub z_finite: Vec<f64>,
    pub z_ergodic: Vec<f64>,
    pub a_finite: Vec<f64>,
    pub a_ergodic: Vec<f64>,
    /// |ā₀^T − ā₀|
    pub action_gap: f64,
    /// |Z₀^T − Z₀|
    pub z_gap: f64,
}

/// Decay of J^T(ā^T) − λT − ū(x0) − ℓ̂ plus the feedback gap table.
#[derive(Clone, Debug)]
pub struct OcpLongtime {
    pub fit: DecayFit,
    pub costs: Vec<CostReport>,
    pub table: Vec<FeedbackGap>,
    pub action_fit: Option<(f64, f64)>,
}

impl OcpLongtime {
    pub fn table_csv(&self) -> String {
        let mut s = String::from("T,z_finite,z_ergodic,a_finite,a_ergodic,action_gap,z_gap,half_z_gap\n");
        for r in &self.table {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.horizon, r.z_finite[0], r.z_ergodic[0], r.a_finite[0], r.a_ergodic[0], r.action_gap, r.z_gap, 0.5 * r.z_gap
            );
        }
        s
    }
}

/// Per T: Y₀^T from the Hamiltonian-driver BSDE, J^T under ā^T (with the martingale control
/// variate), the residual against λT + ū(x0) + ℓ̂, and |ā₀^T − ā₀| against |Z₀^T − Z₀|.
#[allow(clippy::too_many_arguments)]
pub fn ocp_longtime(
    spec: &ProblemSpec,
    erg: &ErgodicSolution,
    flow: &MeasureFlow,
    x0: &[f64],
    cfg: &LtbConfig,
    ell: (f64, f64),
    n_paths: usize,
    seed: u64,
) -> Result<OcpLongtime> {
    let (cs, cost) = control_parts(spec)?;
    let d = spec.dim;
    let mut fit = DecayFit::new(DecayModel::Exponential, "ocp", cfg.horizons.clone())?;
    let mu0 = flow.at(0.0);
    let sigma = spec.eval_diffusion(x0, mu0);
    let mut z_bar = vec![0.0; d];
    row_times_matrix(&erg.grad_u_bar(x0), &sigma, &mut z_bar);
    let a_bar = hamiltonian_with(cs, cost, x0, mu0, &z_bar).1;
    let mut costs = Vec::new();
    let mut table = Vec::new();
    let ubar = erg.u_bar(x0);
    for (i, &t) in cfg.horizons.iter().enumerate() {
        let bcfg = crate::bsde::BsdeConfig { horizon: t, alpha: 0.0, ..cfg.bsde.clone() };
        let sol = solve_bsde(spec, flow, x0, &bcfg, None)?;
        let policy = ControlPolicy::Feedback(ZSource::Finite(&sol));
        let rep = evaluate_cost_finite(spec, &policy, x0, flow, t, bcfg.dt, n_paths, seed, (sol.y0, 0.0))?;
        let j = rep.cv_estimate.unwrap_or(rep.estimate);
        let jse = rep.cv_std_err.unwrap_or(rep.std_err);
        fit.values[i] = j - erg.lambda * t - ubar;
        fit.residuals[i] = (fit.values[i] - ell.0).abs();
        fit.noise[i] = (jse * jse + (t * erg.lambda_err).powi(2) + erg.u_bar_err(x0).powi(2) + ell.1 * ell.1).sqrt();
        fit.trusted[i] = fit.residuals[i] > 2.0 * fit.noise[i];
        let (z_t, _) = z_from_gradient(&sol, spec, flow, 0.0, x0);
        let a_t = hamiltonian_with(cs, cost, x0, mu0, &z_t).1;
        table.push(FeedbackGap {
            horizon: t,
            action_gap: dist(&a_t, &a_bar),
            z_gap: dist(&z_t, &z_bar),
            z_finite: z_t,
            z_ergodic: z_bar.clone(),
            a_finite: a_t,
            a_ergodic: a_bar.clone(),
        });
        costs.push(rep);
    }
    fit.ell = Some(ell.0);
    fit.ell_err = ell.1;
    crate::ltb::fit_decay(&mut fit, false);
    let gaps: Vec<f64> = table.iter().map(|r| r.action_gap).collect();
    let action_fit = fit_exponential(&cfg.horizons, &gaps).map(|(c, eta, _, _)| (c, eta));
    fit.columns.push(("J".into(), costs.iter().map(|c| c.cv_estimate.unwrap_or(c.estimate)).collect()));
    fit.columns.push(("y0".into(), costs.iter().map(|c| c.benchmark).collect()));
    fit.columns.push(("action_gap".into(), gaps));
    Ok(OcpLongtime { fit, costs, table, action_fit })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
