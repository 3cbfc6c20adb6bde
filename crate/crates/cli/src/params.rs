//! Parameter resolution: command line, then the scenario's `[run]` table, then the
//! subcommand default. Every value read is recorded for the manifest.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use mvergodic::model::scenario::RunParams;
use mvergodic::{Error, Result};

pub type Overrides = BTreeMap<String, String>;

pub struct Params {
    cli: Overrides,
    scenario: Overrides,
    resolved: BTreeMap<String, String>,
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Flattens the scenario's run table into the same key space as `--set`.
pub fn scenario_overrides(r: &RunParams) -> Overrides {
    let mut m = Overrides::new();
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            m.insert(k.to_string(), v);
        }
    };
    put("particles", r.particles.map(|v| v.to_string()));
    put("paths", r.paths.map(|v| v.to_string()));
    put("dt", r.dt.map(|v| v.to_string()));
    put("horizon", r.horizon.map(|v| v.to_string()));
    put("seed", r.seed.map(|v| v.to_string()));
    put("x0", r.x0.map(|v| v.to_string()));
    put("x0_prime", r.x0_prime.map(|v| v.to_string()));
    put("alphas", r.alphas.as_deref().map(join));
    put("t_grid", r.t_grid.as_deref().map(join));
    put("degree", r.degree.map(|v| v.to_string()));
    put("picard", r.picard.map(|v| v.to_string()));
    put("t_burn", r.t_burn.map(|v| v.to_string()));
    put("t_long", r.t_long.map(|v| v.to_string()));
    put("delta", r.delta.map(|v| v.to_string()));
    put("samples", r.samples.map(|v| v.to_string()));
    put("scheme", r.scheme.clone());
    put("extrapolation", r.extrapolation.clone());
    put("terminal", r.terminal.clone());
    put("s", r.s.map(|v| v.to_string()));
    m
}

impl Params {
    pub fn new(cli: Overrides, scenario: Overrides) -> Self {
        Self { cli, scenario, resolved: BTreeMap::new() }
    }

    fn raw(&self, key: &str) -> Option<&String> {
        self.cli.get(key).or_else(|| self.scenario.get(key))
    }

    fn bad(key: &str, v: &str) -> Error {
        Error::Configuration(format!("parameter `{key}` has invalid value `{v}`"))
    }

    pub fn get<T: FromStr + Display>(&mut self, key: &str, default: T) -> Result<T> {
        let v = match self.raw(key) {
            Some(s) => s.trim().parse().map_err(|_| Self::bad(key, s))?,
            None => default,
        };
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    /// An optional value: recorded only when present.
    pub fn maybe<T: FromStr + Display>(&mut self, key: &str) -> Result<Option<T>> {
        match self.raw(key).cloned() {
            Some(s) => {
                let v: T = s.trim().parse().map_err(|_| Self::bad(key, &s))?;
                self.resolved.insert(key.to_string(), v.to_string());
                Ok(Some(v))
            }
            None => Ok(None),
        }
    }

    pub fn list(&mut self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        let v = match self.raw(key) {
            Some(s) => s
                .split(',')
                .map(|t| t.trim().parse::<f64>().map_err(|_| Self::bad(key, s)))
                .collect::<Result<Vec<_>>>()?,
            None => default.to_vec(),
        };
        if v.is_empty() {
            return Err(Self::bad(key, ""));
        }
        self.resolved.insert(key.to_string(), join(&v));
        Ok(v)
    }

    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }

    /// Command-line keys that no pipeline read.
    pub fn unused(&self) -> Vec<String> {
        self.cli.keys().filter(|k| !self.resolved.contains_key(*k)).cloned().collect()
    }
}
