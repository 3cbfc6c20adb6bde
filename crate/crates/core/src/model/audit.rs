//! Sampled verification of the dissipativity and regularity assumptions.
//!
//! Checks are universally quantified inequalities, so the auditor can only certify
//! that no counterexample was found over the sample; failures carry witness pairs.

use std::fmt::Write as _;

use super::{ProblemSpec, Regime};
use crate::measure::{moment, wasserstein, EmpiricalMeasure};
use crate::rng::{Channel, CounterStream};

const CLOUD: usize = 64;
const STATE_SCALE: f64 = 4.0;
const TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
    Indeterminate,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Indeterminate => "indeterminate",
        })
    }
}

#[derive(Clone, Debug)]
pub struct Witness {
    pub check: &'static str,
    pub x: Vec<f64>,
    pub x_prime: Vec<f64>,
    pub value: f64,
}

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub verdict: Verdict,
    /// Worst sampled value of the tested quantity.
    pub worst: f64,
    /// The bound it is compared against.
    pub bound: f64,
    pub samples: usize,
}

#[derive(Clone, Debug)]
pub struct AuditReport {
    pub spec: String,
    pub regime: Regime,
    pub n_samples: usize,
    pub seed: u64,
    pub checks: Vec<Check>,
    /// Λ = ν − (K^σ_x + K^σ_𝓛).
    pub lambda: f64,
    /// Smallest sampled dissipation rate outside the ball (weak regime).
    pub weak_rate: Option<f64>,
    /// Upper bound (𝜼−K^σ_x)·exp(−(𝜼+2M_𝔟/R)R²/(2σ0²)) that 𝐜 must satisfy.
    pub appendix_c_bound: Option<f64>,
    /// Bound (𝜼−K^σ_x)·exp(−(𝜼+2K^b_x)R²/(2σ0²)) that K^b_𝓛 must satisfy.
    pub measure_lipschitz_bound: Option<f64>,
    /// Whether K^b_𝓛 meets that bound; reported, not enforced.
    pub measure_lipschitz_within_bound: Option<bool>,
    /// Fitted Ĉ in |f(x, μ, 0)| ≤ Ĉ(1 + |x|^{q+1} + ‖μ‖_{2q+2}^{q+1}).
    pub growth_constant: f64,
    pub witnesses: Vec<Witness>,
}

impl AuditReport {
    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// No sampled check failed.
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.verdict != Verdict::Fail)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("check,verdict,worst,bound,samples\n");
        for c in &self.checks {
            let _ = writeln!(s, "{},{},{:e},{:e},{}", c.name, c.verdict, c.worst, c.bound, c.samples);
        }
        s
    }

    pub fn witnesses_csv(&self) -> String {
        let mut s = String::from("check,x,x_prime,value\n");
        for w in &self.witnesses {
            let _ = writeln!(s, "{},{:?},{:?},{:e}", w.check, w.x, w.x_prime, w.value);
        }
        s
    }
}

struct Sampler {
    s: CounterStream,
    d: usize,
}

impl Sampler {
    fn state(&mut self, scale: f64) -> Vec<f64> {
        (0..self.d).map(|_| scale * self.s.normal()).collect()
    }

    fn cloud(&mut self) -> EmpiricalMeasure {
        let c = self.state(2.0);
        let spread = 0.2 + 2.0 * self.s.uniform();
        let pts: Vec<f64> = (0..CLOUD * self.d).map(|i| c[i % self.d] + spread * self.s.normal()).collect();
        EmpiricalMeasure::uniform(self.d, pts).expect("finite cloud")
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

struct Tracker {
    name: &'static str,
    bound: f64,
    worst: f64,
    samples: usize,
    failed: bool,
    witness: Option<Witness>,
}

impl Tracker {
    fn new(name: &'static str, bound: f64) -> Self {
        Self { name, bound, worst: f64::NEG_INFINITY, samples: 0, failed: false, witness: None }
    }

    fn record(&mut self, value: f64, tol: f64, x: &[f64], xp: &[f64]) {
        self.samples += 1;
        if value > self.worst {
            self.worst = value;
        }
        if value > self.bound + tol {
            let worse = self.witness.as_ref().is_none_or(|w| value > w.value);
            self.failed = true;
            if worse {
                self.witness = Some(Witness { check: self.name, x: x.to_vec(), x_prime: xp.to_vec(), value });
            }
        }
    }

    fn finish(self, witnesses: &mut Vec<Witness>) -> Check {
        let verdict = if self.samples == 0 {
            Verdict::Indeterminate
        } else if self.failed {
            Verdict::Fail
        } else {
            Verdict::Pass
        };
        if let Some(w) = self.witness {
            witnesses.push(w);
        }
        Check { name: self.name, verdict, worst: self.worst, bound: self.bound, samples: self.samples }
    }
}

fn skipped(name: &'static str) -> Check {
    Check { name, verdict: Verdict::Indeterminate, worst: f64::NAN, bound: f64::NAN, samples: 0 }
}

fn frobenius_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn min_eig_sigma_sigma_t(s: &[f64], d: usize) -> f64 {
    let m = nalgebra::DMatrix::from_row_slice(d, d, s);
    let a = &m * m.transpose();
    a.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

/// sup over sampled (x, μ) of |f(x, μ, 0)| / (1 + |x|^{q+1} + ‖μ‖_{2q+2}^{q+1}).
pub fn driver_growth_constant(spec: &ProblemSpec, n_samples: usize, seed: u64) -> f64 {
    let q = spec.constants.q;
    let mut sm = Sampler { s: CounterStream::new(seed, Channel::Audit, 0, 1), d: spec.dim };
    let z = vec![0.0; spec.dim];
    let mut best = 0.0f64;
    for _ in 0..n_samples.max(1) {
        let x = sm.state(STATE_SCALE);
        let mu = sm.cloud();
        let mnorm = moment(&mu, 2.0 * q + 2.0).unwrap_or(0.0);
        let xn = dot(&x, &x).sqrt();
        let env = 1.0 + xn.powf(q + 1.0) + mnorm.powf(q + 1.0);
        best = best.max((spec.driver)(&x, &mu, &z).abs() / env);
    }
    best
}

pub fn audit(spec: &ProblemSpec, n_samples: usize, seed: u64) -> AuditReport {
    let n_samples = n_samples.max(2);
    let d = spec.dim;
    let c = spec.constants;
    let mut sm = Sampler { s: CounterStream::new(seed, Channel::Audit, 0, 0), d };
    let mut witnesses = Vec::new();
    let strong = spec.regime == Regime::StrongDissipative;

    let mut l_diss = Tracker::new("l_dissipativity", -c.nu);
    let mut pointwise = Tracker::new("pointwise_dissipativity", -c.eta);
    let mut b_meas = Tracker::new("drift_measure_lipschitz", c.k_b_l);
    let mut s_lip = Tracker::new("diffusion_lipschitz", 0.0);
    let mut weak_out = Tracker::new("weak_dissipativity_outside_ball", -c.eta);
    let mut weak_in = Tracker::new("weak_dissipativity_inside_ball", c.k_b_x);
    let mut b_lip = Tracker::new("drift_lipschitz", 0.0);
    let mut ellip = Tracker::new("ellipticity", -c.sigma0 * c.sigma0);
    let mut dist_free = Tracker::new("distribution_free_diffusion", 0.0);

    let mut bx = vec![0.0; d];
    let mut bxp = vec![0.0; d];
    let mut sx = vec![0.0; d * d];
    let mut sxp = vec![0.0; d * d];

    for i in 0..n_samples {
        let t = 10.0 * sm.s.uniform();
        let x = sm.state(STATE_SCALE);
        let xp = sm.state(STATE_SCALE);
        let mu = sm.cloud();
        let mup = sm.cloud();
        let delta = diff(&x, &xp);
        let r2 = dot(&delta, &delta);
        if r2 == 0.0 {
            continue;
        }
        let w2 = wasserstein(&mu, &mup, 2.0).unwrap_or(f64::NAN);

        if strong {
            // L-dissipativity over a coupling (U, U') of two clouds.
            let u = sm.cloud();
            let up = match i % 3 {
                0 => sm.cloud(),
                1 => {
                    let shift = sm.state(1.5);
                    let pts: Vec<f64> = u.points().iter().enumerate().map(|(j, v)| v + shift[j % d]).collect();
                    EmpiricalMeasure::uniform(d, pts).unwrap()
                }
                _ => {
                    let a = 0.5 + sm.s.uniform();
                    EmpiricalMeasure::uniform(d, u.points().iter().map(|v| a * v).collect()).unwrap()
                }
            };
            let (mut num, mut den) = (0.0, 0.0);
            for j in 0..u.len() {
                (spec.drift)(t, u.point(j), &u, &mut bx);
                (spec.drift)(t, up.point(j), &up, &mut bxp);
                let dj = diff(u.point(j), up.point(j));
                num += dot(&dj, &diff(&bx, &bxp));
                den += dot(&dj, &dj);
            }
            if den > 0.0 {
                l_diss.record(num / den, 1e-9, u.point(0), up.point(0));
            }

            (spec.drift)(t, &x, &mu, &mut bx);
            (spec.drift)(t, &xp, &mu, &mut bxp);
            pointwise.record(dot(&delta, &diff(&bx, &bxp)) / r2, TOL, &x, &xp);

            (spec.drift)(t, &x, &mup, &mut bxp);
            if w2 > 1e-9 {
                let gap = dot(&diff(&bx, &bxp), &diff(&bx, &bxp)).sqrt();
                b_meas.record(gap / w2, 1e-9, &x, &x);
            }

            (spec.diffusion)(&x, &mu, &mut sx);
            (spec.diffusion)(&xp, &mup, &mut sxp);
            let excess = 0.5 * frobenius_sq(&sx, &sxp) - c.k_s_x * r2 - c.k_s_l * w2 * w2;
            s_lip.record(excess, 1e-9, &x, &xp);
        } else {
            (spec.drift)(t, &x, &mu, &mut bx);
            (spec.drift)(t, &xp, &mu, &mut bxp);
            let q = dot(&delta, &diff(&bx, &bxp)) / r2;
            if r2.sqrt() > c.r_ball {
                weak_out.record(q, TOL, &x, &xp);
            } else {
                weak_in.record(q, TOL, &x, &xp);
            }
            (spec.drift)(t, &xp, &mup, &mut bxp);
            let w1 = wasserstein(&mu, &mup, 1.0).unwrap_or(f64::NAN);
            let gap = dot(&diff(&bx, &bxp), &diff(&bx, &bxp)).sqrt();
            b_lip.record(gap - c.k_b_x * r2.sqrt() - c.k_b_l * w1, 1e-9, &x, &xp);

            (spec.diffusion)(&x, &mu, &mut sx);
            ellip.record(-min_eig_sigma_sigma_t(&sx, d), 1e-9, &x, &x);
            (spec.diffusion)(&xp, &mu, &mut sxp);
            s_lip.record(frobenius_sq(&sx, &sxp) - 2.0 * c.k_s_x * r2, 1e-9, &x, &xp);
            (spec.diffusion)(&x, &mup, &mut sxp);
            dist_free.record(frobenius_sq(&sx, &sxp), 0.0, &x, &x);
        }
    }

    let weak_rate = (!strong && weak_out.samples > 0).then(|| -weak_out.worst);
    let checks = if strong {
        vec![
            l_diss.finish(&mut witnesses),
            pointwise.finish(&mut witnesses),
            b_meas.finish(&mut witnesses),
            s_lip.finish(&mut witnesses),
            skipped("weak_dissipativity_outside_ball"),
            skipped("ellipticity"),
        ]
    } else {
        vec![
            skipped("l_dissipativity"),
            skipped("pointwise_dissipativity"),
            weak_out.finish(&mut witnesses),
            weak_in.finish(&mut witnesses),
            b_lip.finish(&mut witnesses),
            ellip.finish(&mut witnesses),
            s_lip.finish(&mut witnesses),
            dist_free.finish(&mut witnesses),
        ]
    };

    let s2 = 2.0 * c.sigma0 * c.sigma0;
    let (appendix_c_bound, measure_lipschitz_bound) = if strong || c.r_ball <= 0.0 {
        (None, None)
    } else {
        let a = c.eta - c.k_s_x;
        let r = c.r_ball;
        (
            Some(a * (-(c.eta + 2.0 * c.m_b / r) * r * r / s2).exp()),
            Some(a * (-(c.eta + 2.0 * c.k_b_x) * r * r / s2).exp()),
        )
    };

    AuditReport {
        spec: spec.name.clone(),
        regime: spec.regime,
        n_samples,
        seed,
        checks,
        lambda: c.nu - (c.k_s_x + c.k_s_l),
        weak_rate,
        appendix_c_bound,
        measure_lipschitz_bound,
        measure_lipschitz_within_bound: measure_lipschitz_bound.map(|b| c.k_b_l < b),
        growth_constant: driver_growth_constant(spec, n_samples, seed),
        witnesses,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::preset;

    #[test]
    fn ou_attract_lambda_is_nu() {
        let r = audit(&preset("ou-attract").unwrap(), 1000, 7);
        assert_eq!(r.lambda, 1.0);
        assert!(r.passed());
    }

    #[test]
    fn ou_repel_l_dissipativity_quotient() {
        let r = audit(&preset("ou-repel").unwrap(), 1000, 7);
        let c = r.check("l_dissipativity").unwrap();
        assert_eq!(c.verdict, Verdict::Pass);
        assert!(c.worst <= -0.5 + 1e-9, "{}", c.worst);
        // Translated clouds make the bound nearly tight: −|Δ|² + 0.5|EΔ|² = −0.5|Δ|².
        assert!(c.worst > -0.55, "{}", c.worst);
    }

    #[test]
    fn sine_weak_rate_outside_ball() {
        let r = audit(&preset("sine-weak").unwrap(), 1000, 7);
        let c = r.check("weak_dissipativity_outside_ball").unwrap();
        assert_eq!(c.verdict, Verdict::Pass);
        assert!(c.samples > 100);
        assert!(r.weak_rate.unwrap() >= 0.5);
        // Direct scan: −1 + 1.5 (sin x − sin x')/Δ over a grid of pairs with |Δ| > 6.
        let mut worst = f64::NEG_INFINITY;
        for i in 0..400 {
            for j in 0..400 {
                let (x, y) = (-20.0 + 0.1 * i as f64, -20.0 + 0.1 * j as f64);
                if (x - y).abs() > 6.0 {
                    worst = worst.max(-1.0 + 1.5 * (x.sin() - y.sin()) / (x - y));
                }
            }
        }
        assert!(worst <= -0.5);
        assert!(r.appendix_c_bound.unwrap() < 1e-6);
        assert_eq!(r.measure_lipschitz_within_bound, Some(false));
    }

    #[test]
    fn failures_carry_witnesses() {
        let s = preset("ou-attract").unwrap().with_drift(|_t, x, _mu, out| out[0] = 0.2 * x[0]);
        let r = audit(&s, 200, 3);
        assert!(!r.passed());
        for c in &r.checks {
            if c.verdict == Verdict::Fail {
                assert!(r.witnesses.iter().any(|w| w.check == c.name), "{}", c.name);
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let s = preset("ou-repel").unwrap();
        let a = audit(&s, 300, 9);
        let b = audit(&s, 300, 9);
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.growth_constant, b.growth_constant);
    }

    #[test]
    fn pointwise_quotient_never_exceeds_minus_eta() {
        for name in ["ou-attract", "ou-repel"] {
            let r = audit(&preset(name).unwrap(), 1000, 5);
            assert!(r.check("pointwise_dissipativity").unwrap().worst <= -1.0 + 1e-12);
        }
    }

    #[test]
    fn every_preset_passes_its_regime() {
        for p in crate::model::Preset::ALL {
            let r = audit(&preset(p.name()).unwrap(), 1000, 11);
            assert!(r.passed(), "{}: {:?}", p.name(), r.checks);
        }
    }
}
