//! JSON experiment configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dissipativity::GrowthEnvelope;
use crate::error::{Error, Result};
use crate::integrate::TimeGrid;
use crate::model::{FhnParams, LorenzParams, Observable, OuParams, PeriodicSdeModel, PolyTerm, TauPolynomial};
use crate::noise::NoiseSpec;
use crate::response::{MatrixField, PerturbationSpec, TimeProfile, VectorField};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub perturbation: Option<PerturbationConfig>,
    /// Defaults to the coordinates `x1, …, xd`.
    #[serde(default)]
    pub observables: Option<Vec<ObservableConfig>>,
    #[serde(default)]
    pub envelope: Option<EnvelopeConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "params", rename_all = "snake_case")]
pub enum ModelConfig {
    Lorenz(LorenzParams),
    Ou(OuParams),
    Fhn(FhnParams),
    Polynomial(PolynomialConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolynomialConfig {
    #[serde(default = "default_label")]
    pub label: String,
    pub dim: usize,
    pub noise_dim: usize,
    pub period: f64,
    pub drift: Vec<Vec<PolyTerm>>,
    /// Row-major `d × m` entries.
    pub diffusion: Vec<Vec<PolyTerm>>,
}

fn default_label() -> String {
    "polynomial".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Step size; mutually exclusive with `steps_per_period`.
    pub dt: Option<f64>,
    pub steps_per_period: Option<usize>,
    pub seed: u64,
    pub n_paths: usize,
    pub burn_in_periods: usize,
    pub phases: usize,
    /// Initial state; the origin when absent.
    pub initial: Option<Vec<f64>>,
    /// Second start of the two-point contraction; `initial + 1` when absent.
    pub initial_alt: Option<Vec<f64>>,
    /// Simulated time span; ten periods when absent.
    pub horizon: Option<f64>,
    pub output_every: usize,
    /// Response-table lag range; `horizon − onset` when absent.
    pub max_lag: Option<f64>,
    pub lag_every: usize,
    /// FDT ensemble size; `n_paths` when absent.
    pub fdt_paths: Option<usize>,
    /// Also estimate the response with the kernel density surrogate.
    pub fdt_kde: bool,
    /// Fixed KDE bandwidth; Scott's rule when absent.
    pub kde_bandwidth: Option<f64>,
    /// Comparison window; `[onset, horizon]` when absent.
    pub window: Option<[f64; 2]>,
    pub pullback_tol: f64,
    pub n_max_periods: usize,
    pub record_periods: usize,
    /// Moment order of the contraction curve.
    pub contraction_p: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: None,
            steps_per_period: None,
            seed: 0,
            n_paths: 1000,
            burn_in_periods: 20,
            phases: 8,
            initial: None,
            initial_alt: None,
            horizon: None,
            output_every: 10,
            max_lag: None,
            lag_every: 10,
            fdt_paths: None,
            fdt_kde: false,
            kde_bandwidth: None,
            window: None,
            pullback_tol: 1e-6,
            n_max_periods: 64,
            record_periods: 4,
            contraction_p: 2.0,
        }
    }
}

/// Constant vector/matrix or one polynomial term list per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldConfig {
    Constant(Vec<f64>),
    Polynomial(Vec<Vec<PolyTerm>>),
}

impl FieldConfig {
    fn polys(&self, dim: usize, period: f64) -> Result<Vec<TauPolynomial>> {
        match self {
            Self::Constant(v) => Ok(v.iter().map(|&c| TauPolynomial::constant(dim, period, c)).collect()),
            Self::Polynomial(t) => t.iter().map(|t| TauPolynomial::new(dim, period, t.clone())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationConfig {
    pub epsilon: f64,
    pub direction: FieldConfig,
    #[serde(default)]
    pub diffusion: Option<FieldConfig>,
    pub profile: TimeProfile,
    #[serde(default)]
    pub admissible: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservableConfig {
    pub label: String,
    pub terms: Vec<PolyTerm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvelopeConfig {
    /// Explicit envelope; derived for the Lorenz and OU models when absent.
    pub growth: Option<GrowthEnvelope>,
    pub kappa1: f64,
    pub kappa3: f64,
    pub c_bar: Option<f64>,
    pub p: f64,
}

impl Default for EnvelopeConfig {
    fn default() -> Self {
        Self {
            growth: None,
            kappa1: 25.0,
            kappa3: 1.0,
            c_bar: None,
            p: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

fn pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut s = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => s.push_str(&format!("/{index}")),
            Segment::Map { key } => s.push_str(&format!("/{key}")),
            Segment::Enum { variant } => s.push_str(&format!("/{variant}")),
            Segment::Unknown => s.push_str("/?"),
        }
    }
    if s.is_empty() {
        s.push('/');
    }
    s
}

/// Parsed config plus the command mode recorded in a `meta.json`, if the
/// document was one.
pub fn parse_config(text: &str) -> Result<(Config, Option<String>)> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Config {
        pointer: "/".into(),
        message: e.to_string(),
    })?;
    let (value, mode) = match value {
        Value::Object(mut m) if m.contains_key("tool") && m.contains_key("config") => {
            let mode = m.get("mode").and_then(Value::as_str).map(str::to_owned);
            (m.remove("config").unwrap_or(Value::Null), mode)
        }
        v => (v, None),
    };
    let cfg: Config = serde_path_to_error::deserialize(value).map_err(|e| Error::Config {
        pointer: pointer(e.path()),
        message: e.inner().to_string(),
    })?;
    Ok((cfg, mode))
}

pub fn load_config(path: &Path) -> Result<(Config, Option<String>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
        pointer: "/".into(),
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    parse_config(&text)
}

fn config_err(pointer: &str, message: impl Into<String>) -> Error {
    Error::Config {
        pointer: pointer.into(),
        message: message.into(),
    }
}

impl Config {
    pub fn build_model(&self) -> Result<PeriodicSdeModel> {
        match &self.model {
            ModelConfig::Lorenz(p) => PeriodicSdeModel::build_lorenz(*p),
            ModelConfig::Ou(p) => PeriodicSdeModel::build_ou(*p),
            ModelConfig::Fhn(p) => PeriodicSdeModel::build_fhn(*p),
            ModelConfig::Polynomial(p) => PeriodicSdeModel::build_polynomial(
                p.label.clone(),
                p.dim,
                p.noise_dim,
                p.period,
                p.drift.clone(),
                p.diffusion.clone(),
            ),
        }
    }

    pub fn grid(&self, model: &PeriodicSdeModel) -> Result<TimeGrid> {
        match (self.sim.dt, self.sim.steps_per_period) {
            (Some(_), Some(_)) => Err(config_err("/sim/dt", "give either dt or steps_per_period, not both")),
            (Some(dt), None) => TimeGrid::new(dt, model.period()),
            (None, Some(n)) => TimeGrid::per_period(model, n),
            (None, None) => TimeGrid::per_period(model, 1000),
        }
    }

    pub fn noise(&self, model: &PeriodicSdeModel, grid: &TimeGrid) -> NoiseSpec {
        NoiseSpec::new(self.sim.seed, grid.dt(), model.noise_dim())
    }

    pub fn horizon(&self, model: &PeriodicSdeModel) -> f64 {
        self.sim.horizon.unwrap_or(10.0 * model.period())
    }

    pub fn initial(&self, model: &PeriodicSdeModel) -> Result<Vec<f64>> {
        let x = self.sim.initial.clone().unwrap_or_else(|| vec![0.0; model.dim()]);
        if x.len() != model.dim() {
            return Err(config_err(
                "/sim/initial",
                format!("expected {} coordinates, got {}", model.dim(), x.len()),
            ));
        }
        Ok(x)
    }

    pub fn observables(&self, model: &PeriodicSdeModel) -> Result<Vec<Observable>> {
        match &self.observables {
            None => Ok(Observable::coordinates(model.dim(), model.period())),
            Some(list) => list
                .iter()
                .map(|o| Observable::from_terms(o.label.clone(), model.dim(), model.period(), o.terms.clone()))
                .collect(),
        }
    }

    pub fn perturbation(&self, model: &PeriodicSdeModel) -> Result<PerturbationSpec> {
        let p = self
            .perturbation
            .as_ref()
            .ok_or_else(|| config_err("/perturbation", "this command needs a perturbation block"))?;
        let (d, m, tau) = (model.dim(), model.noise_dim(), model.period());
        let drift = VectorField::new(p.direction.polys(d, tau)?)?;
        if drift.dim() != d {
            return Err(config_err("/perturbation/direction", format!("expected {d} components")));
        }
        let diffusion = match &p.diffusion {
            None => None,
            Some(f) => Some(MatrixField::new(d, m, f.polys(d, tau)?).map_err(|e| config_err("/perturbation/diffusion", e.to_string()))?),
        };
        Ok(PerturbationSpec {
            drift,
            diffusion,
            epsilon: p.epsilon,
            profile: p.profile.clone(),
            admissible: p.admissible,
        })
    }
}
