//! Scenario files: a TOML document naming a preset or declaring a custom
//! one-dimensional model by expressions, plus initial law and run parameters.
//!
//! ```toml
//! [model]
//! preset = "ou-attract"
//! driver = "x^2"
//! terminal = "0"
//!
//! [theta]
//! dirac = 0.0
//!
//! [run]
//! particles = 10000
//! dt = 0.01
//! ```

use std::sync::Arc;

use serde::Deserialize;
use toml::Spanned;

use super::expr::{Env, Expr, Var};
use super::{preset, Constants, ControlSet, ProblemSpec, Regime, RunningCost};
use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;
use crate::rng::{Channel, CounterStream};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct File {
    model: ModelSection,
    theta: Option<ThetaSection>,
    run: Option<RunParams>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    preset: Option<String>,
    name: Option<String>,
    dim: Option<usize>,
    regime: Option<String>,
    drift: Option<Spanned<String>>,
    diffusion: Option<Spanned<String>>,
    driver: Option<Spanned<String>>,
    terminal: Option<Spanned<String>>,
    constants: Option<ConstantsSection>,
    control: Option<ControlSection>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstantsSection {
    nu: Option<f64>,
    eta: Option<f64>,
    k_b_x: Option<f64>,
    k_b_l: Option<f64>,
    k_s_x: Option<f64>,
    k_s_l: Option<f64>,
    sigma0: Option<f64>,
    r_ball: Option<f64>,
    m_b: Option<f64>,
    q: Option<f64>,
    epsilon: Option<f64>,
    k_f_z: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ControlSection {
    lo: f64,
    hi: f64,
    r: f64,
    /// State part ℓ₀ of L = ℓ₀ + a².
    state_cost: Option<Spanned<String>>,
    /// Full L(x, a) when it is not separable-quadratic.
    cost: Option<Spanned<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ThetaSection {
    dirac: Option<f64>,
    gaussian_mean: Option<f64>,
    gaussian_std: Option<f64>,
    atoms: Option<usize>,
    csv: Option<String>,
}

/// Optional run parameters; the CLI fills defaults per subcommand.
#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunParams {
    pub particles: Option<usize>,
    pub paths: Option<usize>,
    pub dt: Option<f64>,
    pub horizon: Option<f64>,
    pub seed: Option<u64>,
    pub x0: Option<f64>,
    pub x0_prime: Option<f64>,
    pub alphas: Option<Vec<f64>>,
    pub t_grid: Option<Vec<f64>>,
    pub degree: Option<usize>,
    pub picard: Option<usize>,
    pub t_burn: Option<f64>,
    pub t_long: Option<f64>,
    pub delta: Option<f64>,
    pub samples: Option<usize>,
    pub scheme: Option<String>,
    pub extrapolation: Option<String>,
    pub terminal: Option<String>,
    pub s: Option<f64>,
}

/// Initial law θ.
#[derive(Clone, Debug, PartialEq)]
pub enum Theta {
    Dirac(f64),
    Gaussian { mean: f64, std: f64, atoms: usize },
    Csv(String),
}

impl Theta {
    pub fn to_measure(&self, seed: u64) -> Result<EmpiricalMeasure> {
        match self {
            Theta::Dirac(c) => Ok(EmpiricalMeasure::dirac(&[*c])),
            Theta::Gaussian { mean, std, atoms } => {
                let pts = (0..*atoms)
                    .map(|i| mean + std * CounterStream::new(seed, Channel::Initial, i as u64, u64::MAX).normal())
                    .collect();
                EmpiricalMeasure::uniform(1, pts)
            }
            Theta::Csv(path) => EmpiricalMeasure::from_csv(&std::fs::read_to_string(path)?),
        }
    }
}

pub struct Scenario {
    pub spec: ProblemSpec,
    pub theta: Theta,
    pub run: RunParams,
}

fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.len(), |p| before.len() - p - 1) + 1;
    (line, col)
}

fn compile(src: &str, s: &Spanned<String>, allowed: &[Var], key: &str) -> Result<Expr> {
    // The span covers the quoted literal; the expression starts one byte later.
    let base = s.span().start + 1;
    let e = Expr::parse(s.get_ref()).map_err(|e| match e {
        Error::Parse { column, message, .. } => {
            let (line, col) = line_col(src, base + column - 1);
            Error::Parse { line, column: col, message: format!("in `{key}`: {message}") }
        }
        other => other,
    })?;
    for v in [Var::X, Var::M1, Var::M2, Var::MTanh, Var::Z, Var::A, Var::T] {
        if e.uses(v) && !allowed.contains(&v) {
            let (line, column) = line_col(src, base);
            return Err(Error::Parse { line, column, message: format!("`{key}` may not use {v:?}") });
        }
    }
    Ok(e)
}

fn env(x: &[f64], mu: &EmpiricalMeasure) -> Env {
    let st = mu.stats();
    Env { x: x[0], m1: st.mean[0], m2: st.second_moment, mtanh: st.mean_tanh[0], ..Env::default() }
}

const MEASURE_VARS: [Var; 4] = [Var::X, Var::M1, Var::M2, Var::MTanh];

impl Scenario {
    pub fn parse(src: &str) -> Result<Self> {
        let file: File = toml::from_str(src).map_err(|e| {
            let (line, column) = e.span().map_or((1, 1), |s| line_col(src, s.start));
            Error::Parse { line, column, message: e.message().to_string() }
        })?;
        let m = &file.model;
        let mut spec = match (&m.preset, &m.drift) {
            (Some(p), None) => preset(p)?,
            (Some(_), Some(d)) => {
                let (line, column) = line_col(src, d.span().start);
                return Err(Error::Parse { line, column, message: "a preset fixes the drift".into() });
            }
            (None, _) => custom_model(src, m)?,
        };
        if let Some(name) = &m.name {
            spec.name = name.clone();
        }
        if let Some(c) = &m.constants {
            apply_constants(&mut spec.constants, c);
        }
        if let Some(d) = &m.driver {
            let mut vars = MEASURE_VARS.to_vec();
            vars.push(Var::Z);
            let e = compile(src, d, &vars, "driver")?;
            let uses_z = e.uses(Var::Z);
            spec = spec.with_driver(uses_z, move |x, mu, z| e.eval(&Env { z: z[0], ..env(x, mu) }));
        }
        if let Some(g) = &m.terminal {
            let e = compile(src, g, &MEASURE_VARS, "terminal")?;
            spec = spec.with_terminal(move |x, mu| e.eval(&env(x, mu)));
        }
        if let Some(c) = &m.control {
            spec.control_set = Some(ControlSet::new(vec![c.lo], vec![c.hi], vec![c.r])?);
            spec.running_cost = Some(match (&c.state_cost, &c.cost) {
                (Some(s), None) => {
                    let e = compile(src, s, &MEASURE_VARS, "state_cost")?;
                    RunningCost::QuadraticControl { state_cost: Arc::new(move |x, mu| e.eval(&env(x, mu))) }
                }
                (None, Some(s)) => {
                    let mut vars = MEASURE_VARS.to_vec();
                    vars.push(Var::A);
                    let e = compile(src, s, &vars, "cost")?;
                    RunningCost::General(Arc::new(move |x, mu, a| e.eval(&Env { a: a[0], ..env(x, mu) })))
                }
                _ => {
                    return Err(Error::Configuration(
                        "[model.control] needs exactly one of state_cost or cost".into(),
                    ))
                }
            });
            if m.driver.is_none() {
                spec = spec.with_hamiltonian_driver()?;
            }
        }
        spec.validate()?;

        let theta = match &file.theta {
            None => Theta::Dirac(0.0),
            Some(t) => match (t.dirac, t.gaussian_mean.or(t.gaussian_std.map(|_| 0.0)), &t.csv) {
                (Some(c), None, None) => Theta::Dirac(c),
                (None, Some(mean), None) => Theta::Gaussian {
                    mean,
                    std: t.gaussian_std.unwrap_or(1.0),
                    atoms: t.atoms.unwrap_or(10_000),
                },
                (None, None, Some(p)) => Theta::Csv(p.clone()),
                _ => return Err(Error::Configuration("[theta] needs exactly one of dirac, gaussian_*, csv".into())),
            },
        };
        Ok(Self { spec, theta, run: file.run.unwrap_or_default() })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

fn apply_constants(c: &mut Constants, s: &ConstantsSection) {
    let pairs: [(&mut f64, Option<f64>); 12] = [
        (&mut c.nu, s.nu),
        (&mut c.eta, s.eta),
        (&mut c.k_b_x, s.k_b_x),
        (&mut c.k_b_l, s.k_b_l),
        (&mut c.k_s_x, s.k_s_x),
        (&mut c.k_s_l, s.k_s_l),
        (&mut c.sigma0, s.sigma0),
        (&mut c.r_ball, s.r_ball),
        (&mut c.m_b, s.m_b),
        (&mut c.q, s.q),
        (&mut c.epsilon, s.epsilon),
        (&mut c.k_f_z, s.k_f_z),
    ];
    for (slot, v) in pairs {
        if let Some(v) = v {
            *slot = v;
        }
    }
}

fn custom_model(src: &str, m: &ModelSection) -> Result<ProblemSpec> {
    if m.dim.unwrap_or(1) != 1 {
        return Err(Error::Configuration("expression models are one-dimensional".into()));
    }
    let regime = match m.regime.as_deref() {
        None | Some("strong") => Regime::StrongDissipative,
        Some("weak") => Regime::WeakDissipative,
        Some(other) => return Err(Error::Configuration(format!("unknown regime `{other}`"))),
    };
    let drift_src = m
        .drift
        .as_ref()
        .ok_or_else(|| Error::Configuration("[model] needs a preset or a drift expression".into()))?;
    let mut vars = MEASURE_VARS.to_vec();
    vars.push(Var::T);
    let drift = compile(src, drift_src, &vars, "drift")?;
    let diffusion = match &m.diffusion {
        Some(s) => compile(src, s, &MEASURE_VARS, "diffusion")?,
        None => Expr::parse("1")?,
    };
    Ok(ProblemSpec {
        name: "custom".into(),
        dim: 1,
        drift: Arc::new(move |t, x, mu, out| out[0] = drift.eval(&Env { t, ..env(x, mu) })),
        diffusion: Arc::new(move |x, mu, out| out[0] = diffusion.eval(&env(x, mu))),
        driver: Arc::new(|x, _mu, _z| x[0] * x[0]),
        terminal: Arc::new(|_x, _mu| 0.0),
        running_cost: None,
        control_set: None,
        constants: Constants::default(),
        regime,
        driver_uses_z: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_with_overrides() {
        let s = Scenario::parse(
            "[model]\npreset = \"ou-attract\"\ndriver = \"x^2 + 1\"\nterminal = \"x\"\n[theta]\ndirac = 1.0\n[run]\ndt = 0.02\n",
        )
        .unwrap();
        let mu = EmpiricalMeasure::dirac(&[0.0]);
        assert_eq!((s.spec.driver)(&[2.0], &mu, &[0.0]), 5.0);
        assert_eq!((s.spec.terminal)(&[3.0], &mu), 3.0);
        assert_eq!(s.theta, Theta::Dirac(1.0));
        assert_eq!(s.run.dt, Some(0.02));
        assert!(!s.spec.driver_uses_z);
    }

    #[test]
    fn custom_model_matches_preset() {
        let s = Scenario::parse(
            "[model]\nregime = \"weak\"\ndrift = \"-x + 1.5*sin(x) + 0.05*mtanh\"\ndiffusion = \"1\"\n[model.constants]\neta = 0.5\nr_ball = 6\nk_b_x = 2.5\nk_b_l = 0.05\nm_b = 1\n",
        )
        .unwrap();
        let p = preset("sine-weak").unwrap();
        let mu = EmpiricalMeasure::uniform(1, vec![-1.0, 0.3, 2.0]).unwrap();
        for x in [-3.0, 0.0, 0.7, 5.0] {
            let a = s.spec.eval_drift(0.0, &[x], &mu)[0];
            let b = p.eval_drift(0.0, &[x], &mu)[0];
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(s.spec.regime, Regime::WeakDissipative);
    }

    #[test]
    fn custom_control_builds_hamiltonian() {
        let s = Scenario::parse(
            "[model]\ndrift = \"-x - 0.5*m1\"\n[model.constants]\nnu = 1\neta = 1\n[model.control]\nlo = -1\nhi = 1\nr = 1\nstate_cost = \"x^2\"\n",
        )
        .unwrap();
        let mu = EmpiricalMeasure::dirac(&[0.0]);
        assert_eq!((s.spec.driver)(&[0.0], &mu, &[4.0]), -3.0);
        assert!(s.spec.driver_uses_z);
    }

    #[test]
    fn malformed_toml_reports_position() {
        match Scenario::parse("[model]\npreset = \"ou-attract\"\nbogus = = 3\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{:?}", other.err()),
        }
    }

    #[test]
    fn bad_expression_reports_line_and_column() {
        match Scenario::parse("[model]\npreset = \"ou-attract\"\ndriver = \"x^2 + * 3\"\n") {
            Err(Error::Parse { line, column, .. }) => {
                assert_eq!(line, 3);
                // `driver = "` is 10 bytes; the `*` is the 7th character of the expression.
                assert_eq!(column, 17);
            }
            other => panic!("{:?}", other.err()),
        }
    }

    #[test]
    fn unknown_preset_and_fields_rejected() {
        assert!(matches!(Scenario::parse("[model]\npreset = \"nope\"\n"), Err(Error::UnknownPreset(_))));
        assert!(Scenario::parse("[model]\npreset = \"ou-attract\"\n[run]\nparticle = 3\n").is_err());
    }

    #[test]
    fn gaussian_theta_is_seeded() {
        let t = Theta::Gaussian { mean: 1.0, std: 0.5, atoms: 2000 };
        let a = t.to_measure(3).unwrap();
        assert_eq!(a.points(), t.to_measure(3).unwrap().points());
        assert!((a.mean()[0] - 1.0).abs() < 0.05);
    }
}
