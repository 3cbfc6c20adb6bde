//! Forward simulation: the interacting particle system, the decoupled SDE against a
//! frozen measure flow, and drift-shifted variants.

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::measure::{wasserstein, EmpiricalMeasure, MeasureFlow};
use crate::model::ProblemSpec;
use crate::rng::{Channel, CounterStream, Noise};

const MIN_CHUNK: usize = 256;

/// Bounded drift shift β(t, x, μ) entering as σ(β dt + dW).
#[derive(Clone)]
pub struct DriftShift {
    pub f: Arc<dyn Fn(f64, &[f64], &EmpiricalMeasure, &mut [f64]) + Send + Sync>,
    pub bound: f64,
}

impl DriftShift {
    pub fn new(bound: f64, f: impl Fn(f64, &[f64], &EmpiricalMeasure, &mut [f64]) + Send + Sync + 'static) -> Self {
        Self { f: Arc::new(f), bound }
    }

    pub fn constant(c: Vec<f64>) -> Self {
        let bound = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self::new(bound, move |_t, _x, _mu, out| out.copy_from_slice(&c))
    }
}

/// A particle ensemble at one time.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub time: f64,
    pub dim: usize,
    pub states: Vec<f64>,
    pub seed: u64,
    pub step: usize,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }
    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
    pub fn measure(&self) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(self.dim, self.states.clone()).expect("finite ensemble")
    }
}

/// Recorded trajectories.
#[derive(Clone, Debug)]
pub struct PathBundle {
    pub dim: usize,
    pub n_particles: usize,
    pub dt: f64,
    pub seed: u64,
    /// Step index of each recorded node.
    pub steps: Vec<usize>,
    pub times: Vec<f64>,
    /// records × N × d, row-major.
    pub states: Vec<f64>,
}

impl PathBundle {
    pub fn n_records(&self) -> usize {
        self.times.len()
    }

    pub fn record(&self, k: usize) -> &[f64] {
        let w = self.n_particles * self.dim;
        &self.states[k * w..(k + 1) * w]
    }

    pub fn terminal(&self) -> &[f64] {
        self.record(self.n_records() - 1)
    }

    pub fn measure_at(&self, k: usize) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(self.dim, self.record(k).to_vec()).expect("finite")
    }

    /// Columns: step, time, particle, coordinates. `max_particles` limits output size.
    pub fn to_csv(&self, max_particles: usize) -> String {
        let mut s = String::from("step,time,particle");
        for k in 0..self.dim {
            let _ = write!(s, ",x{}", k + 1);
        }
        s.push('\n');
        let np = self.n_particles.min(max_particles);
        for r in 0..self.n_records() {
            let rec = self.record(r);
            for i in 0..np {
                let _ = write!(s, "{},{},{}", self.steps[r], self.times[r], i);
                for v in &rec[i * self.dim..(i + 1) * self.dim] {
                    let _ = write!(s, ",{v:e}");
                }
                s.push('\n');
            }
        }
        s
    }
}

fn check_finite(states: &[f64], d: usize, step: usize, time: f64) -> Result<()> {
    if let Some(pos) = states.iter().position(|v| !v.is_finite()) {
        return Err(Error::BlowUp { step, time, particle: pos / d });
    }
    Ok(())
}

/// Draws `n` initial states from θ with the `Initial` channel.
pub fn draw_initial(theta: &EmpiricalMeasure, n: usize, seed: u64) -> Vec<f64> {
    let d = theta.dim();
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let u = CounterStream::new(seed, Channel::Initial, i as u64, 0).uniform();
        let j = theta.sample_index(u);
        out[i * d..(i + 1) * d].copy_from_slice(theta.point(j));
    }
    out
}

/// Euler–Maruyama step of one particle: x ← x + (b + σβ)dt + σ ΔW.
#[inline]
#[allow(clippy::too_many_arguments)]
fn euler_particle(
    spec: &ProblemSpec,
    mu: &EmpiricalMeasure,
    shift: Option<&DriftShift>,
    t: f64,
    dt: f64,
    x: &mut [f64],
    dw: &[f64],
    scratch: &mut Scratch,
) {
    let d = x.len();
    (spec.drift)(t, x, mu, &mut scratch.b);
    (spec.diffusion)(x, mu, &mut scratch.s);
    if let Some(sh) = shift {
        (sh.f)(t, x, mu, &mut scratch.beta);
        for i in 0..d {
            scratch.b[i] += (0..d).map(|j| scratch.s[i * d + j] * scratch.beta[j]).sum::<f64>();
        }
    }
    for i in 0..d {
        let noise: f64 = (0..d).map(|j| scratch.s[i * d + j] * dw[j]).sum();
        x[i] += scratch.b[i] * dt + noise;
    }
}

struct Scratch {
    b: Vec<f64>,
    s: Vec<f64>,
    beta: Vec<f64>,
    dw: Vec<f64>,
}

impl Scratch {
    fn new(d: usize) -> Self {
        Self { b: vec![0.0; d], s: vec![0.0; d * d], beta: vec![0.0; d], dw: vec![0.0; d] }
    }
}

/// Advances every particle of `states` by one step against the fixed measure `mu`.
/// Particle `i` of the slice draws noise for index `first + i`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn step_all(
    spec: &ProblemSpec,
    mu: &EmpiricalMeasure,
    shift: Option<&DriftShift>,
    noise: &Noise,
    step: usize,
    t: f64,
    dt: f64,
    states: &mut [f64],
) {
    let d = spec.dim;
    states
        .par_chunks_mut(d)
        .with_min_len(MIN_CHUNK)
        .enumerate()
        .for_each_init(
            || Scratch::new(d),
            |sc, (i, x)| {
                noise.fill_increment(i, step, dt, &mut sc.dw);
                let dw = std::mem::take(&mut sc.dw);
                euler_particle(spec, mu, shift, t, dt, x, &dw, sc);
                sc.dw = dw;
            },
        );
}

/// Interacting particle system with the empirical measure standing in for the law.
pub struct ParticleSystem<'a> {
    spec: &'a ProblemSpec,
    pub states: Vec<f64>,
    pub time: f64,
    pub step: usize,
    pub dt: f64,
    t0: f64,
    noise: Noise,
}

impl<'a> ParticleSystem<'a> {
    pub fn from_measure(spec: &'a ProblemSpec, theta: &EmpiricalMeasure, n: usize, dt: f64, seed: u64) -> Result<Self> {
        if theta.dim() != spec.dim {
            return Err(Error::InvalidInput("initial law has the wrong dimension".into()));
        }
        Self::from_states(spec, draw_initial(theta, n, seed), 0.0, dt, seed)
    }

    pub fn from_states(spec: &'a ProblemSpec, states: Vec<f64>, t0: f64, dt: f64, seed: u64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidInput(format!("dt = {dt} must be positive")));
        }
        if states.is_empty() || !states.len().is_multiple_of(spec.dim) {
            return Err(Error::InvalidInput("need at least one particle".into()));
        }
        check_finite(&states, spec.dim, 0, t0)?;
        Ok(Self { spec, states, time: t0, step: 0, dt, t0, noise: Noise::new(seed, Channel::Interacting) })
    }

    pub fn n_particles(&self) -> usize {
        self.states.len() / self.spec.dim
    }

    pub fn measure(&self) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(self.spec.dim, self.states.clone()).expect("finite states")
    }

    pub fn advance(&mut self) -> Result<()> {
        let mu = self.measure();
        step_all(self.spec, &mu, None, &self.noise, self.step, self.time, self.dt, &mut self.states);
        self.step += 1;
        self.time = self.t0 + self.step as f64 * self.dt;
        check_finite(&self.states, self.spec.dim, self.step, self.time)
    }

    pub fn ensemble(&self) -> Ensemble {
        Ensemble { time: self.time, dim: self.spec.dim, states: self.states.clone(), seed: self.noise.seed, step: self.step }
    }
}

fn n_steps(dt: f64, horizon: f64) -> Result<usize> {
    if !(dt > 0.0) || !(horizon >= dt - 1e-12) {
        return Err(Error::InvalidInput(format!("need dt > 0 and T >= dt (dt = {dt}, T = {horizon})")));
    }
    Ok((horizon / dt).round() as usize)
}

/// Interacting-particle Euler–Maruyama from θ; records every `record_every` steps
/// (and the final step). The flow holds the empirical measure at the recorded nodes.
pub fn simulate_mv_recorded(
    spec: &ProblemSpec,
    theta: &EmpiricalMeasure,
    dt: f64,
    horizon: f64,
    n: usize,
    seed: u64,
    record_every: usize,
) -> Result<(PathBundle, MeasureFlow)> {
    let m = n_steps(dt, horizon)?;
    let every = record_every.max(1);
    let mut sys = ParticleSystem::from_measure(spec, theta, n, dt, seed)?;
    let mut steps = vec![0];
    let mut states = sys.states.clone();
    let mut measures = vec![Arc::new(sys.measure())];
    for k in 1..=m {
        sys.advance()?;
        if k % every == 0 || k == m {
            steps.push(k);
            states.extend_from_slice(&sys.states);
            measures.push(Arc::new(sys.measure()));
        }
    }
    let times: Vec<f64> = steps.iter().map(|&k| k as f64 * dt).collect();
    let flow = MeasureFlow::new(times.clone(), measures)?;
    Ok((PathBundle { dim: spec.dim, n_particles: n, dt, seed, steps, times, states }, flow))
}

/// Interacting-particle Euler–Maruyama recorded at every step.
pub fn simulate_mv(
    spec: &ProblemSpec,
    theta: &EmpiricalMeasure,
    dt: f64,
    horizon: f64,
    n: usize,
    seed: u64,
) -> Result<(PathBundle, MeasureFlow)> {
    simulate_mv_recorded(spec, theta, dt, horizon, n, seed, 1)
}

/// The measure flow alone, recorded every `record_every` steps; cheaper than paths.
pub fn measure_flow(
    spec: &ProblemSpec,
    theta: &EmpiricalMeasure,
    dt: f64,
    horizon: f64,
    n: usize,
    seed: u64,
    record_every: usize,
) -> Result<MeasureFlow> {
    let m = n_steps(dt, horizon)?;
    let every = record_every.max(1);
    let mut sys = ParticleSystem::from_measure(spec, theta, n, dt, seed)?;
    let mut times = vec![0.0];
    let mut measures = vec![Arc::new(sys.measure())];
    for k in 1..=m {
        sys.advance()?;
        if k % every == 0 || k == m {
            times.push(k as f64 * dt);
            measures.push(Arc::new(sys.measure()));
        }
    }
    MeasureFlow::new(times, measures)
}

/// Where decoupled particles start.
#[derive(Clone, Debug)]
pub enum Start {
    Point(Vec<f64>),
    States(Vec<f64>),
    Law(EmpiricalMeasure),
}

fn check_shift(shift: &DriftShift, spec: &ProblemSpec, t: f64, x: &[f64], mu: &EmpiricalMeasure) -> Result<()> {
    let mut out = vec![0.0; spec.dim];
    (shift.f)(t, x, mu, &mut out);
    let n = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > shift.bound + 1e-12 {
        return Err(Error::InvalidInput(format!("shift |beta| = {n} exceeds its declared bound {}", shift.bound)));
    }
    Ok(())
}

/// Decoupled SDE dX = b(t, X, μ_t)dt + σ(X, μ_t)(β dt + dW) against a frozen flow.
#[allow(clippy::too_many_arguments)]
pub fn simulate_decoupled(
    spec: &ProblemSpec,
    start: &Start,
    flow: &MeasureFlow,
    shift: Option<&DriftShift>,
    dt: f64,
    horizon: f64,
    n: usize,
    seed: u64,
) -> Result<PathBundle> {
    simulate_decoupled_from(spec, start, 0.0, flow, shift, dt, horizon, n, seed, 1)
}

/// As [`simulate_decoupled`], starting at time `t0` and recording every `record_every` steps.
#[allow(clippy::too_many_arguments)]
pub fn simulate_decoupled_from(
    spec: &ProblemSpec,
    start: &Start,
    t0: f64,
    flow: &MeasureFlow,
    shift: Option<&DriftShift>,
    dt: f64,
    horizon: f64,
    n: usize,
    seed: u64,
    record_every: usize,
) -> Result<PathBundle> {
    let m = if horizon - t0 <= 1e-12 { 0 } else { n_steps(dt, horizon - t0)? };
    flow.covers(horizon)?;
    if !flow.is_stationary() {
        // Every flow node past t0 must fall on the simulation grid.
        for &t in flow.times() {
            let k = ((t - t0) / dt).round();
            if t >= t0 && (k * dt + t0 - t).abs() > 1e-9 * (1.0 + t) {
                return Err(Error::InvalidInput(format!("flow node t = {t} is not on the dt = {dt} grid")));
            }
        }
    }
    let d = spec.dim;
    let mut states = match start {
        Start::Point(x) => {
            if x.len() != d {
                return Err(Error::InvalidInput("start point has the wrong dimension".into()));
            }
            x.repeat(n)
        }
        Start::States(s) => {
            if s.len() != n * d {
                return Err(Error::InvalidInput("start ensemble size does not match n".into()));
            }
            s.clone()
        }
        Start::Law(mu) => draw_initial(mu, n, seed),
    };
    check_finite(&states, d, 0, t0)?;
    let noise = Noise::new(seed, Channel::Decoupled);
    let every = record_every.max(1);
    let mut steps = vec![0];
    let mut times = vec![t0];
    let mut rec = states.clone();
    for k in 0..m {
        let t = t0 + k as f64 * dt;
        let mu = flow.at(t);
        if let Some(sh) = shift {
            check_shift(sh, spec, t, &states[..d], mu)?;
        }
        step_all(spec, mu, shift, &noise, k, t, dt, &mut states);
        check_finite(&states, d, k + 1, t + dt)?;
        if (k + 1) % every == 0 || k + 1 == m {
            steps.push(k + 1);
            times.push(t0 + (k + 1) as f64 * dt);
            rec.extend_from_slice(&states);
        }
    }
    Ok(PathBundle { dim: d, n_particles: n, dt, seed, steps, times, states: rec })
}

/// Outcome of the flow-property check.
#[derive(Clone, Copy, Debug)]
pub struct FlowCheck {
    /// W₂ between the restarted decoupled marginal and the straight-through one.
    pub discrepancy: f64,
    /// W₂ between two equal-law ensembles with independent noise after s: the MC scale.
    pub reference: f64,
}

/// Compares the straight-through time-T marginal with the decoupled process
/// restarted at time s from (X_s, μ_s), using independent noise after s.
#[allow(clippy::too_many_arguments)]
pub fn flow_property_check(
    spec: &ProblemSpec,
    theta: &EmpiricalMeasure,
    s: f64,
    horizon: f64,
    dt: f64,
    n: usize,
    seed: u64,
) -> Result<FlowCheck> {
    if !(s > 0.0 && s <= horizon) {
        return Err(Error::InvalidInput(format!("need 0 < s <= T (s = {s}, T = {horizon})")));
    }
    let m_s = (s / dt).round() as usize;
    let m_t = (horizon / dt).round() as usize;
    let mut straight = ParticleSystem::from_measure(spec, theta, n, dt, seed)?;
    for _ in 0..m_s {
        straight.advance()?;
    }
    let x_s = straight.states.clone();
    for _ in m_s..m_t {
        straight.advance()?;
    }
    // The law flow from μ_s, regenerated with fresh noise.
    let restart_seed = seed ^ 0x5DEE_CE66_D1CE_5EED;
    let mut restarted = ParticleSystem::from_states(spec, x_s.clone(), s, dt, restart_seed)?;
    let mut times = vec![s];
    let mut measures = vec![Arc::new(restarted.measure())];
    for k in m_s..m_t {
        restarted.advance()?;
        times.push((k + 1) as f64 * dt);
        measures.push(Arc::new(restarted.measure()));
    }
    let flow = MeasureFlow::new(times, measures)?;
    let dec = simulate_decoupled_from(
        spec,
        &Start::States(x_s),
        s,
        &flow,
        None,
        dt,
        horizon,
        n,
        seed ^ 0x0BAD_5EED,
        usize::MAX,
    )?;
    let d = spec.dim;
    let end_straight = EmpiricalMeasure::uniform(d, straight.states.clone())?;
    let end_dec = EmpiricalMeasure::uniform(d, dec.terminal().to_vec())?;
    Ok(FlowCheck {
        discrepancy: wasserstein(&end_straight, &end_dec, 2.0)?,
        reference: wasserstein(&end_straight, flow.terminal(), 2.0)?,
    })
}

/// W_p between two synchronously coupled particle systems, with a log-linear fit.
#[derive(Clone, Debug)]
pub struct ContractionFit {
    pub times: Vec<f64>,
    pub distances: Vec<f64>,
    /// Slope magnitude of the least-squares fit of log W against t.
    pub rate: f64,
    pub truncated_at: Option<f64>,
    pub note: Option<String>,
}

impl ContractionFit {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("time,wasserstein\n");
        for (t, w) in self.times.iter().zip(&self.distances) {
            let _ = writeln!(s, "{t},{w:e}");
        }
        s
    }
}

/// Ordinary least squares slope and intercept.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

#[allow(clippy::too_many_arguments)]
pub fn contraction_rate(
    spec: &ProblemSpec,
    theta: &EmpiricalMeasure,
    theta_prime: &EmpiricalMeasure,
    dt: f64,
    horizon: f64,
    n: usize,
    seed: u64,
    p: f64,
    record_every: usize,
) -> Result<ContractionFit> {
    let m = n_steps(dt, horizon)?;
    // Same seed: identical initial uniforms (quantile-coupled starts) and identical increments.
    let mut a = ParticleSystem::from_measure(spec, theta, n, dt, seed)?;
    let mut b = ParticleSystem::from_measure(spec, theta_prime, n, dt, seed)?;
    let every = record_every.max(1);
    let mut times = vec![0.0];
    let mut distances = vec![wasserstein(&a.measure(), &b.measure(), p)?];
    for k in 1..=m {
        a.advance()?;
        b.advance()?;
        if k % every == 0 || k == m {
            times.push(k as f64 * dt);
            distances.push(wasserstein(&a.measure(), &b.measure(), p)?);
        }
    }
    let cut = distances.iter().position(|&w| w < 1e-8).unwrap_or(distances.len());
    let (truncated_at, note) = if cut < distances.len() {
        (Some(times[cut]), Some(format!("W_p fell below 1e-8 at t = {}; fit truncated", times[cut])))
    } else {
        (None, None)
    };
    let rate = if cut >= 2 {
        let logs: Vec<f64> = distances[..cut].iter().map(|w| w.ln()).collect();
        -linear_fit(&times[..cut], &logs).0
    } else {
        f64::NAN
    };
    Ok(ContractionFit { times, distances, rate, truncated_at, note })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::preset;

    fn frozen() -> ProblemSpec {
        preset("ou-attract")
            .unwrap()
            .with_drift(|_t, _x, _mu, out| out[0] = 0.0)
            .with_constant_diffusion(0.0)
    }

    #[test]
    fn frozen_dynamics_stay_put() {
        let s = frozen();
        let (paths, flow) = simulate_mv(&s, &EmpiricalMeasure::dirac(&[1.7]), 0.1, 1.0, 50, 1).unwrap();
        assert!(paths.states.iter().all(|&v| v == 1.7));
        assert!((flow.terminal().mean()[0] - 1.7).abs() < 1e-14);
        assert_eq!(paths.n_records(), 11);
    }

    #[test]
    fn ou_attract_mean_and_variance() {
        let s = preset("ou-attract").unwrap();
        let (p, _) = simulate_mv_recorded(&s, &EmpiricalMeasure::dirac(&[1.0]), 0.01, 1.0, 10_000, 42, 100).unwrap();
        let mean = p.measure_at(p.n_records() - 1).mean()[0];
        assert!((mean - (-1.5f64).exp()).abs() < 0.02, "{mean}");
        let (p, _) = simulate_mv_recorded(&s, &EmpiricalMeasure::dirac(&[0.0]), 0.01, 2.0, 10_000, 42, 200).unwrap();
        let sd = p.measure_at(p.n_records() - 1).std_dev()[0];
        assert!((sd * sd - (1.0 - (-4.0f64).exp()) / 2.0).abs() < 0.03);
    }

    #[test]
    fn blow_up_names_the_step() {
        let s = preset("ou-attract").unwrap().with_drift(|_t, x, _mu, out| out[0] = x[0] * x[0] * x[0]);
        match simulate_mv(&s, &EmpiricalMeasure::dirac(&[3.0]), 0.5, 20.0, 4, 1) {
            Err(Error::BlowUp { step, .. }) => assert!(step > 0),
            other => panic!("{:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn decoupled_linear_ode() {
        let s = preset("ou-attract")
            .unwrap()
            .with_drift(|_t, x, _mu, out| out[0] = -x[0])
            .with_constant_diffusion(0.0);
        let flow = MeasureFlow::stationary(EmpiricalMeasure::dirac(&[0.0]));
        let p = simulate_decoupled(&s, &Start::Point(vec![1.0]), &flow, None, 0.001, 2.0, 1, 0).unwrap();
        for (k, &t) in p.times.iter().enumerate() {
            assert!((p.record(k)[0] - (-t).exp()).abs() < 2e-3 * t.max(1e-3));
        }
    }

    #[test]
    fn constant_shift_drifts_brownian_motion() {
        let s = frozen().with_constant_diffusion(0.8);
        let flow = MeasureFlow::stationary(EmpiricalMeasure::dirac(&[0.0]));
        let sh = DriftShift::constant(vec![0.5]);
        let n = 20_000;
        let p = simulate_decoupled_from(&s, &Start::Point(vec![0.0]), 0.0, &flow, Some(&sh), 0.05, 2.0, n, 3, usize::MAX).unwrap();
        let m = p.measure_at(p.n_records() - 1);
        let se = 0.8 * 2f64.sqrt() / (n as f64).sqrt();
        assert!((m.mean()[0] - 0.8 * 0.5 * 2.0).abs() < 3.0 * se);
    }

    #[test]
    fn shift_bound_is_enforced() {
        let s = frozen();
        let flow = MeasureFlow::stationary(EmpiricalMeasure::dirac(&[0.0]));
        let sh = DriftShift::new(0.1, |_t, _x, _mu, out| out[0] = 0.5);
        assert!(simulate_decoupled(&s, &Start::Point(vec![0.0]), &flow, Some(&sh), 0.1, 1.0, 2, 0).is_err());
    }

    #[test]
    fn short_flow_is_a_coverage_error() {
        let s = preset("ou-attract").unwrap();
        let flow = measure_flow(&s, &EmpiricalMeasure::dirac(&[0.0]), 0.1, 1.0, 10, 0, 1).unwrap();
        assert!(matches!(
            simulate_decoupled(&s, &Start::Point(vec![0.0]), &flow, None, 0.1, 2.0, 2, 0),
            Err(Error::Coverage { .. })
        ));
    }

    #[test]
    fn decoupled_marginal_matches_flow() {
        let s = preset("ou-attract").unwrap();
        let theta = EmpiricalMeasure::uniform(1, (0..400).map(|i| -1.0 + i as f64 / 200.0).collect()).unwrap();
        let n = 2000;
        let flow = measure_flow(&s, &theta, 0.01, 1.0, n, 5, 1).unwrap();
        let p = simulate_decoupled_from(&s, &Start::Law(theta.clone()), 0.0, &flow, None, 0.01, 1.0, n, 6, usize::MAX).unwrap();
        let w = wasserstein(&p.measure_at(p.n_records() - 1), flow.terminal(), 2.0).unwrap();
        // Two independent systems of the same law give the Monte Carlo scale.
        let other = measure_flow(&s, &theta, 0.01, 1.0, n, 77, 100).unwrap();
        let scale = wasserstein(other.terminal(), flow.terminal(), 2.0).unwrap();
        assert!(w <= 2.0 * scale.max(0.02), "{w} vs {scale}");
    }

    #[test]
    fn flow_property_examples() {
        let s = preset("ou-attract").unwrap();
        let th = EmpiricalMeasure::dirac(&[1.0]);
        let fc = flow_property_check(&s, &th, 1.0, 2.0, 0.01, 4000, 9).unwrap();
        assert!(fc.discrepancy <= 3.0 * fc.reference, "{fc:?}");
        let fc = flow_property_check(&s, &th, 2.0, 2.0, 0.01, 500, 9).unwrap();
        assert!(fc.discrepancy < 1e-12);
        let det = s.clone().with_constant_diffusion(0.0);
        let fc = flow_property_check(&det, &th, 0.5, 1.0, 0.01, 100, 9).unwrap();
        assert!(fc.discrepancy <= 0.01);
    }

    #[test]
    fn contraction_examples() {
        let s = preset("ou-attract").unwrap();
        let d0 = EmpiricalMeasure::dirac(&[0.0]);
        let d1 = EmpiricalMeasure::dirac(&[1.0]);
        let fit = contraction_rate(&s, &d0, &d0, 0.01, 1.0, 200, 1, 2.0, 10).unwrap();
        assert!(fit.distances.iter().all(|&w| w == 0.0));
        let r = preset("ou-repel").unwrap();
        let fit = contraction_rate(&r, &d0, &d1, 0.01, 3.0, 2000, 1, 2.0, 10).unwrap();
        assert!(fit.rate >= 0.45, "{}", fit.rate);
    }

    #[test]
    fn thread_count_does_not_change_paths() {
        let s = preset("sine-weak").unwrap();
        let th = EmpiricalMeasure::uniform(1, vec![-2.0, 0.0, 3.0]).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate_mv_recorded(&s, &th, 0.01, 1.0, 3000, 17, 10).unwrap().0.states)
        };
        let a = run(1);
        assert_eq!(a, run(3));
        assert_eq!(a, run(8));
    }

    #[test]
    fn linear_fit_recovers_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        let (a, b) = linear_fit(&x, &y);
        assert!((a + 0.5).abs() < 1e-14 && (b - 2.0).abs() < 1e-14);
    }
}
