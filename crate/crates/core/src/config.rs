//! Experiment configuration: a TOML file with dotted sections. Unknown keys
//! and ill-typed values are rejected with their key path.

use std::path::{Path, PathBuf};

use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::forward::{Scheme, TimeWindow};
use crate::grid::{PolarGrid, State};
use crate::model::{AdmissibleBounds, Coefficients, PotentialPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoeffPreset {
    /// `A = I`, `D = 1`, no drift.
    Isotropic,
    /// Radially anisotropic `A`, variable `D`, bulk and tangential drifts.
    Drift,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PotentialPreset {
    Zero,
    Constant(f64),
    /// `p = 0.5 + 0.3ρcos φ`, `q = 0.4 + 0.2cos φ`.
    Smooth,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialPreset {
    Constant(f64),
    /// `1.2 + 0.2ρcos φ + 0.1ρ² sin 2φ`.
    Smooth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub n_r: usize,
    pub n_phi: usize,
    pub omega_radius: f64,
    pub t_end: f64,
    pub t0: f64,
    pub t1: f64,
    pub dt: Option<f64>,
    pub scheme: Scheme,
    pub output_every: usize,
    pub coefficients: CoeffPreset,
    pub potentials: PotentialPreset,
    pub initial: InitialPreset,
    pub r: f64,
    pub big_r: f64,
    pub lambda: f64,
    pub s_list: Vec<f64>,
    pub ensemble: usize,
    pub carleman_seed: u64,
    pub reg_beta: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub noise: f64,
    pub discrepancy: bool,
    pub n_samples: usize,
    pub scales: Vec<f64>,
    pub harness_seed: u64,
    pub max_mode: usize,
    pub gap: f64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_r: 32,
            n_phi: 64,
            omega_radius: 0.3,
            t_end: 1.0,
            t0: 0.25,
            t1: 0.75,
            dt: None,
            scheme: Scheme::ImplicitEuler,
            output_every: 16,
            coefficients: CoeffPreset::Isotropic,
            potentials: PotentialPreset::Smooth,
            initial: InitialPreset::Smooth,
            r: 0.5,
            big_r: 2.0,
            lambda: 2.0,
            s_list: vec![16.0, 32.0, 64.0],
            ensemble: 50,
            carleman_seed: 1,
            reg_beta: 0.0,
            max_iter: 200,
            grad_tol: 1e-9,
            noise: 0.0,
            discrepancy: false,
            n_samples: 50,
            scales: vec![1e-1, 1e-2, 1e-3],
            harness_seed: 7,
            max_mode: 8,
            gap: 0.02,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn cfg_err(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}

struct Section<'a> {
    name: &'a str,
    table: Option<&'a Table>,
}

impl<'a> Section<'a> {
    fn path(&self, key: &str) -> String {
        format!("{}.{}", self.name, key)
    }

    fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        if let Some(t) = self.table {
            for k in t.keys() {
                if !allowed.contains(&k.as_str()) {
                    return Err(cfg_err(&self.path(k), "unknown key"));
                }
            }
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<&'a Value> {
        self.table.and_then(|t| t.get(key))
    }

    fn float(&self, key: &str, dst: &mut f64) -> Result<()> {
        match self.get(key) {
            None => Ok(()),
            Some(Value::Float(v)) => {
                *dst = *v;
                Ok(())
            }
            Some(Value::Integer(v)) => {
                *dst = *v as f64;
                Ok(())
            }
            Some(_) => Err(cfg_err(&self.path(key), "expected a number")),
        }
    }

    fn count(&self, key: &str, dst: &mut usize) -> Result<()> {
        match self.get(key) {
            None => Ok(()),
            Some(Value::Integer(v)) if *v >= 0 => {
                *dst = *v as usize;
                Ok(())
            }
            Some(_) => Err(cfg_err(&self.path(key), "expected a nonnegative integer")),
        }
    }

    fn seed(&self, key: &str, dst: &mut u64) -> Result<()> {
        let mut v = *dst as usize;
        self.count(key, &mut v)?;
        *dst = v as u64;
        Ok(())
    }

    fn boolean(&self, key: &str, dst: &mut bool) -> Result<()> {
        match self.get(key) {
            None => Ok(()),
            Some(Value::Boolean(v)) => {
                *dst = *v;
                Ok(())
            }
            Some(_) => Err(cfg_err(&self.path(key), "expected true or false")),
        }
    }

    fn string(&self, key: &str) -> Result<Option<&'a str>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.as_str())),
            Some(_) => Err(cfg_err(&self.path(key), "expected a string")),
        }
    }

    fn floats(&self, key: &str, dst: &mut Vec<f64>) -> Result<()> {
        match self.get(key) {
            None => Ok(()),
            Some(Value::Array(a)) => {
                let mut out = Vec::with_capacity(a.len());
                for (i, v) in a.iter().enumerate() {
                    match v {
                        Value::Float(x) => out.push(*x),
                        Value::Integer(x) => out.push(*x as f64),
                        _ => return Err(cfg_err(&format!("{}[{i}]", self.path(key)), "expected a number")),
                    }
                }
                *dst = out;
                Ok(())
            }
            Some(_) => Err(cfg_err(&self.path(key), "expected an array of numbers")),
        }
    }
}

const SECTIONS: &[(&str, &[&str])] = &[
    ("geometry", &["n_r", "n_phi", "omega_radius"]),
    ("window", &["T", "t0", "t1"]),
    ("solver", &["dt", "scheme", "output_every"]),
    ("coefficients", &["preset"]),
    ("potentials", &["preset", "value"]),
    ("initial", &["preset", "value"]),
    ("bounds", &["r", "R"]),
    ("carleman", &["lambda", "s", "ensemble", "seed"]),
    ("inversion", &["reg_beta", "max_iter", "grad_tol", "noise", "discrepancy"]),
    ("harness", &["n_samples", "scales", "seed", "max_mode", "gap"]),
    ("output", &["dir"]),
];

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let root: Table = text.parse().map_err(|e: toml::de::Error| cfg_err("<root>", e.to_string()))?;
        for (k, v) in &root {
            if !SECTIONS.iter().any(|(s, _)| s == k) {
                return Err(cfg_err(k, "unknown section"));
            }
            if !v.is_table() {
                return Err(cfg_err(k, "expected a section"));
            }
        }
        let sec = |name: &'static str| -> Result<Section<'_>> {
            let s = Section {
                name,
                table: root.get(name).and_then(Value::as_table),
            };
            let allowed = SECTIONS.iter().find(|(n, _)| *n == name).map(|(_, a)| *a).unwrap_or(&[]);
            s.check_keys(allowed)?;
            Ok(s)
        };
        let mut c = Self::default();

        let s = sec("geometry")?;
        s.count("n_r", &mut c.n_r)?;
        s.count("n_phi", &mut c.n_phi)?;
        s.float("omega_radius", &mut c.omega_radius)?;

        let s = sec("window")?;
        s.float("T", &mut c.t_end)?;
        s.float("t0", &mut c.t0)?;
        s.float("t1", &mut c.t1)?;

        let s = sec("solver")?;
        if s.get("dt").is_some() {
            let mut dt = 0.0;
            s.float("dt", &mut dt)?;
            c.dt = Some(dt);
        }
        if let Some(v) = s.string("scheme")? {
            c.scheme = match v {
                "implicit_euler" => Scheme::ImplicitEuler,
                "crank_nicolson" => Scheme::CrankNicolson,
                _ => return Err(cfg_err("solver.scheme", format!("unknown scheme `{v}`"))),
            };
        }
        s.count("output_every", &mut c.output_every)?;

        let s = sec("coefficients")?;
        if let Some(v) = s.string("preset")? {
            c.coefficients = match v {
                "isotropic" | "markov" => CoeffPreset::Isotropic,
                "drift" => CoeffPreset::Drift,
                _ => return Err(cfg_err("coefficients.preset", format!("unknown preset `{v}`"))),
            };
        }

        let s = sec("potentials")?;
        let mut value = 0.0;
        s.float("value", &mut value)?;
        if let Some(v) = s.string("preset")? {
            c.potentials = match v {
                "zero" | "markov" => PotentialPreset::Zero,
                "constant" => PotentialPreset::Constant(value),
                "smooth" => PotentialPreset::Smooth,
                _ => return Err(cfg_err("potentials.preset", format!("unknown preset `{v}`"))),
            };
        }

        let s = sec("initial")?;
        let mut value = 1.0;
        s.float("value", &mut value)?;
        if let Some(v) = s.string("preset")? {
            c.initial = match v {
                "constant" => InitialPreset::Constant(value),
                "smooth" => InitialPreset::Smooth,
                _ => return Err(cfg_err("initial.preset", format!("unknown preset `{v}`"))),
            };
        }

        let s = sec("bounds")?;
        s.float("r", &mut c.r)?;
        s.float("R", &mut c.big_r)?;

        let s = sec("carleman")?;
        s.float("lambda", &mut c.lambda)?;
        s.floats("s", &mut c.s_list)?;
        s.count("ensemble", &mut c.ensemble)?;
        s.seed("seed", &mut c.carleman_seed)?;

        let s = sec("inversion")?;
        s.float("reg_beta", &mut c.reg_beta)?;
        s.count("max_iter", &mut c.max_iter)?;
        s.float("grad_tol", &mut c.grad_tol)?;
        s.float("noise", &mut c.noise)?;
        s.boolean("discrepancy", &mut c.discrepancy)?;

        let s = sec("harness")?;
        s.count("n_samples", &mut c.n_samples)?;
        s.floats("scales", &mut c.scales)?;
        s.seed("seed", &mut c.harness_seed)?;
        s.count("max_mode", &mut c.max_mode)?;
        s.float("gap", &mut c.gap)?;

        let s = sec("output")?;
        if let Some(v) = s.string("dir")? {
            c.out_dir = PathBuf::from(v);
        }
        c.validate()?;
        Ok(c)
    }

    /// Re-checks every module precondition that depends only on the config.
    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        let w = self.window()?;
        w.step_indices(self.dt())?;
        self.bounds()?;
        if !(self.lambda >= 1.0) {
            return Err(cfg_err("carleman.lambda", "must be at least 1"));
        }
        if self.s_list.is_empty() || self.s_list.iter().any(|s| !(*s >= 1.0)) {
            return Err(cfg_err("carleman.s", "needs at least one value, each at least 1"));
        }
        if !(self.reg_beta >= 0.0) {
            return Err(cfg_err("inversion.reg_beta", "must be nonnegative"));
        }
        if !(self.noise >= 0.0) {
            return Err(cfg_err("inversion.noise", "must be nonnegative"));
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| !(*s > 0.0)) {
            return Err(cfg_err("harness.scales", "needs positive values"));
        }
        if self.output_every == 0 {
            return Err(cfg_err("solver.output_every", "must be at least 1"));
        }
        if !(self.gap > 0.0) {
            return Err(cfg_err("harness.gap", "must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<PolarGrid> {
        PolarGrid::new(self.n_r, self.n_phi, self.omega_radius)
    }

    pub fn window(&self) -> Result<TimeWindow> {
        TimeWindow::new(self.t_end, self.t0, self.t1)
    }

    pub fn dt(&self) -> f64 {
        self.dt.unwrap_or((self.t1 - self.t0) / 128.0)
    }

    pub fn bounds(&self) -> Result<AdmissibleBounds> {
        AdmissibleBounds::new(self.r, self.big_r)
    }

    pub fn coefficients(&self, g: &PolarGrid) -> Coefficients {
        match self.coefficients {
            CoeffPreset::Isotropic => Coefficients::isotropic(g),
            CoeffPreset::Drift => drift_coefficients(g),
        }
    }

    pub fn potentials(&self, g: &PolarGrid) -> PotentialPair {
        match self.potentials {
            PotentialPreset::Zero => PotentialPair::zero(g),
            PotentialPreset::Constant(c) => PotentialPair::constant(g, c),
            PotentialPreset::Smooth => smooth_truth(g),
        }
    }

    pub fn initial(&self, g: &PolarGrid) -> State {
        match self.initial {
            InitialPreset::Constant(c) => State::constant(g, c),
            InitialPreset::Smooth => smooth_initial(g),
        }
    }
}

/// Drift preset used by the experiments with nonzero `B` and `b`.
pub fn drift_coefficients(g: &PolarGrid) -> Coefficients {
    Coefficients::from_fns(
        g,
        |r| 1.0 + 0.2 * r * r,
        |_| 0.3,
        |x, y| [0.4 * y - 0.2, -0.4 * x + 0.1],
        |p| 1.0 + 0.2 * p.cos(),
        |p| 0.5 * p.sin(),
        0.5,
    )
}

pub fn smooth_truth(g: &PolarGrid) -> PotentialPair {
    PotentialPair::from_fns(g, |r, p| 0.5 + 0.3 * r * p.cos(), |p| 0.4 + 0.2 * p.cos())
}

pub fn smooth_initial(g: &PolarGrid) -> State {
    State::from_fns(
        g,
        |r, p| 1.2 + 0.2 * r * p.cos() + 0.1 * r * r * (2.0 * p).sin(),
        |p| 1.2 + 0.2 * p.cos() + 0.1 * (2.0 * p).sin(),
    )
}
