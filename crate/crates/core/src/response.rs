//! Linear response: perturbation profiles, direct perturbed ensembles,
//! fluctuation-dissipation response tables and their convolution.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrate::{check_divergence, par_members, InitialCondition, SdeSystem, StepTime, Stepper, TimeGrid};
use crate::measure::{Bandwidth, GaussianDensity, KdeDensity};
use crate::model::{Observable, OuParams, PeriodicSdeModel, TauPolynomial};
use crate::noise::{IncrementSource, NoiseSpec};
use crate::pullback::phase_offsets;
use crate::stats::{fold_chunks, sample_moments};

/// Time profile `ϑ(t)` of a perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeProfile {
    Zero,
    /// `0` before `t0`, `2s/ΔT − s²/ΔT²` for `s = t − t0 ∈ [0, ΔT]`, then `1`.
    RampedStep { t0: f64, delta_t: f64 },
    /// Ramped step times `1 + cos(ω_mod t)`.
    CosineModulatedRamp { t0: f64, delta_t: f64, omega_mod: f64 },
    /// `H(t − t_on) cos²(ω t)`; not C¹ and not zero at onset.
    HeavisideCosSq { t_on: f64, omega: f64 },
    /// Piecewise linear through `(times, values)`, constant beyond the ends.
    Table { times: Vec<f64>, values: Vec<f64> },
}

fn ramp(t: f64, t0: f64, dt: f64) -> f64 {
    if t < t0 {
        0.0
    } else if t <= t0 + dt {
        let s = t - t0;
        2.0 * s / dt - s * s / (dt * dt)
    } else {
        1.0
    }
}

impl TimeProfile {
    pub fn validate(&self) -> Result<()> {
        let finite = |v: f64, f: &'static str| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::param(f, "must be finite"))
            }
        };
        match self {
            Self::Zero => Ok(()),
            Self::RampedStep { t0, delta_t } | Self::CosineModulatedRamp { t0, delta_t, .. } => {
                finite(*t0, "t0")?;
                if !(*delta_t > 0.0 && delta_t.is_finite()) {
                    return Err(Error::param("delta_t", format!("must be > 0, got {delta_t}")));
                }
                if let Self::CosineModulatedRamp { omega_mod, .. } = self {
                    finite(*omega_mod, "omega_mod")?;
                }
                Ok(())
            }
            Self::HeavisideCosSq { t_on, omega } => {
                finite(*t_on, "t_on")?;
                finite(*omega, "omega")
            }
            Self::Table { times, values } => {
                if times.is_empty() || times.len() != values.len() {
                    return Err(Error::param("times", "table needs equally long nonempty times and values"));
                }
                if times.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::param("times", "must be strictly increasing"));
                }
                times.iter().chain(values).try_for_each(|v| finite(*v, "table"))
            }
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Self::Zero => 0.0,
            Self::RampedStep { t0, delta_t } => ramp(t, *t0, *delta_t),
            Self::CosineModulatedRamp { t0, delta_t, omega_mod } => ramp(t, *t0, *delta_t) * (1.0 + (omega_mod * t).cos()),
            Self::HeavisideCosSq { t_on, omega } => {
                if t >= *t_on {
                    let c = (omega * t).cos();
                    c * c
                } else {
                    0.0
                }
            }
            Self::Table { times, values } => {
                let n = times.len();
                if t <= times[0] {
                    return values[0];
                }
                if t >= times[n - 1] {
                    return values[n - 1];
                }
                let i = times.partition_point(|&s| s <= t);
                let w = (t - times[i - 1]) / (times[i] - times[i - 1]);
                values[i - 1] * (1.0 - w) + values[i] * w
            }
        }
    }

    /// Earliest time at which `ϑ` may be nonzero.
    pub fn support_start(&self) -> f64 {
        match self {
            Self::Zero => f64::INFINITY,
            Self::RampedStep { t0, .. } | Self::CosineModulatedRamp { t0, .. } => *t0,
            Self::HeavisideCosSq { t_on, .. } => *t_on,
            Self::Table { times, values } => match values.iter().position(|v| *v != 0.0) {
                None => f64::INFINITY,
                Some(0) => f64::NEG_INFINITY,
                Some(i) => times[i - 1],
            },
        }
    }

    /// Caveat for profiles outside the smooth, zero-at-origin class.
    pub fn warning(&self) -> Option<String> {
        match self {
            Self::HeavisideCosSq { .. } => {
                Some("heaviside_cos_sq is not C1 and jumps at onset; linear response theory assumes a C1 profile".into())
            }
            _ if self.eval(0.0) != 0.0 => Some("profile is nonzero at t = 0".into()),
            _ => None,
        }
    }
}

/// Vector field `𝔟(t, x)` with polynomial components.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    components: Vec<TauPolynomial>,
}

impl VectorField {
    pub fn new(components: Vec<TauPolynomial>) -> Result<Self> {
        let d = components.len();
        if d == 0 {
            return Err(Error::param("direction", "vector field needs components"));
        }
        for c in &components {
            if c.dim() != d {
                return Err(Error::DimensionMismatch {
                    context: "vector field component",
                    expected: d,
                    got: c.dim(),
                });
            }
        }
        Ok(Self { components })
    }

    pub fn constant(period: f64, v: &[f64]) -> Self {
        Self {
            components: v.iter().map(|&c| TauPolynomial::constant(v.len(), period, c)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn is_zero(&self) -> bool {
        self.components.iter().all(TauPolynomial::is_zero)
    }

    pub fn value_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c.value(t, x);
        }
    }

    pub fn divergence(&self, t: f64, x: &[f64]) -> f64 {
        self.components.iter().enumerate().map(|(i, c)| c.partial(t, x, i)).sum()
    }
}

/// Matrix field `H(t, x)` (d × m, row-major) with polynomial entries.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixField {
    rows: usize,
    cols: usize,
    entries: Vec<TauPolynomial>,
}

impl MatrixField {
    pub fn new(rows: usize, cols: usize, entries: Vec<TauPolynomial>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "matrix field entries",
                expected: rows * cols,
                got: entries.len(),
            });
        }
        if let Some(e) = entries.iter().find(|e| e.dim() != rows) {
            return Err(Error::DimensionMismatch {
                context: "matrix field entry",
                expected: rows,
                got: e.dim(),
            });
        }
        Ok(Self { rows, cols, entries })
    }

    pub fn constant(period: f64, rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        Self::new(rows, cols, values.iter().map(|&c| TauPolynomial::constant(rows, period, c)).collect())
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(TauPolynomial::is_zero)
    }

    pub fn value(&self, t: f64, x: &[f64]) -> Vec<f64> {
        self.entries.iter().map(|e| e.value(t, x)).collect()
    }

    /// `out += s · H(t, x) dw`.
    pub fn apply_add(&self, t: f64, x: &[f64], dw: &[f64], s: f64, out: &mut [f64]) {
        for i in 0..self.rows {
            let mut acc = 0.0;
            for k in 0..self.cols {
                acc += self.entries[i * self.cols + k].value(t, x) * dw[k];
            }
            out[i] += s * acc;
        }
    }
}

/// `dX = [b + εϑ(t)𝔟]dt + [σ + εϑ(t)H]dW`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSpec {
    pub drift: VectorField,
    pub diffusion: Option<MatrixField>,
    pub epsilon: f64,
    pub profile: TimeProfile,
    /// Interval that `εϑ(t)` must stay within.
    pub admissible: Option<[f64; 2]>,
}

impl PerturbationSpec {
    pub fn drift_only(drift: VectorField, epsilon: f64, profile: TimeProfile) -> Self {
        Self {
            drift,
            diffusion: None,
            epsilon,
            profile,
            admissible: None,
        }
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self {
            epsilon,
            ..self.clone()
        }
    }

    pub fn has_diffusion(&self) -> bool {
        self.diffusion.as_ref().is_some_and(|h| !h.is_zero())
    }

    /// Checks dimensions and the admissible range of `εϑ` on `[0, horizon]`.
    pub fn validate(&self, model: &PeriodicSdeModel, horizon: f64) -> Result<()> {
        self.profile.validate()?;
        if !self.epsilon.is_finite() {
            return Err(Error::param("epsilon", "must be finite"));
        }
        if self.drift.dim() != model.dim() {
            return Err(Error::DimensionMismatch {
                context: "perturbation direction",
                expected: model.dim(),
                got: self.drift.dim(),
            });
        }
        if let Some(h) = &self.diffusion {
            if h.rows != model.dim() || h.cols != model.noise_dim() {
                return Err(Error::DimensionMismatch {
                    context: "diffusion perturbation columns",
                    expected: model.noise_dim(),
                    got: h.cols,
                });
            }
        }
        if let Some([lo, hi]) = self.admissible {
            let n = 4096;
            for i in 0..=n {
                let a = self.epsilon * self.profile.eval(horizon * i as f64 / n as f64);
                if a < lo || a > hi {
                    return Err(Error::param(
                        "epsilon",
                        format!("epsilon * profile = {a} leaves the admissible interval [{lo}, {hi}]"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// The model plus a perturbation; the profile uses absolute time, the
/// periodic fields use the phase.
pub struct PerturbedSystem<'a> {
    pub model: &'a PeriodicSdeModel,
    pub perturbation: &'a PerturbationSpec,
}

impl SdeSystem for PerturbedSystem<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn noise_dim(&self) -> usize {
        self.model.noise_dim()
    }

    fn period(&self) -> f64 {
        self.model.period()
    }

    fn drift_at(&self, t: StepTime, x: &[f64], out: &mut [f64]) {
        self.model.drift_into(t.phase, x, out);
        let s = self.perturbation.epsilon * self.perturbation.profile.eval(t.abs);
        if s != 0.0 {
            for (o, c) in out.iter_mut().zip(&self.perturbation.drift.components) {
                *o += s * c.value(t.phase, x);
            }
        }
    }

    fn diffuse_at(&self, t: StepTime, x: &[f64], dw: &[f64], out: &mut [f64]) {
        self.model.add_diffusion(t.phase, x, dw, out);
        if let Some(h) = &self.perturbation.diffusion {
            let s = self.perturbation.epsilon * self.perturbation.profile.eval(t.abs);
            if s != 0.0 {
                h.apply_add(t.phase, x, dw, s, out);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Direct,
    FdtQg,
    FdtKde,
}

/// `ΔF(t)` per observable.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResponseCurve {
    pub provenance: Provenance,
    pub epsilon: f64,
    pub times: Vec<f64>,
    pub labels: Vec<String>,
    /// `[observable][time]`.
    pub values: Vec<Vec<f64>>,
    pub stderr: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectConfig {
    pub horizon: f64,
    /// Steps between recorded times.
    #[serde(default = "default_every")]
    pub output_every: usize,
    pub n_paths: usize,
}

fn default_every() -> usize {
    10
}

/// Minimum ensemble size for direct and FDT estimates.
pub const MIN_PATHS: usize = 1000;

/// Output indices `0, e, 2e, …` up to the horizon.
fn output_indices(grid: &TimeGrid, horizon: f64, every: usize) -> Result<Vec<i64>> {
    if every == 0 {
        return Err(Error::param("output_every", "must be positive"));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::param("horizon", "must be > 0"));
    }
    let k_end = grid.snap(horizon);
    Ok((0..=k_end).step_by(every).collect())
}

/// Times at which [`direct_response`] records the response.
pub fn output_times(grid: &TimeGrid, horizon: f64, every: usize) -> Result<Vec<f64>> {
    Ok(output_indices(grid, horizon, every)?.into_iter().map(|k| grid.abs_time(k)).collect())
}

/// Perturbed-minus-unperturbed ensemble means under synchronous coupling.
/// All perturbations share the unperturbed run; perturbed copies branch off
/// at the earliest profile support.
pub fn direct_response(
    model: &PeriodicSdeModel,
    perturbations: &[PerturbationSpec],
    observables: &[Observable],
    initial: &InitialCondition,
    grid: &TimeGrid,
    cfg: &DirectConfig,
    spec: &NoiseSpec,
) -> Result<Vec<ResponseCurve>> {
    if cfg.n_paths < MIN_PATHS {
        return Err(Error::param("n_paths", format!("need at least {MIN_PATHS}, got {}", cfg.n_paths)));
    }
    for p in perturbations {
        p.validate(model, cfg.horizon)?;
    }
    let out_k = output_indices(grid, cfg.horizon, cfg.output_every)?;
    let k_end = *out_k.last().unwrap_or(&0);
    let start = perturbations
        .iter()
        .map(|p| p.profile.support_start())
        .fold(f64::INFINITY, f64::min);
    let kb = if start.is_finite() {
        ((start / grid.dt() + 1e-9).floor() as i64).clamp(0, k_end)
    } else if start < 0.0 {
        0
    } else {
        k_end
    };
    let systems: Vec<PerturbedSystem> = perturbations
        .iter()
        .map(|p| PerturbedSystem {
            model,
            perturbation: p,
        })
        .collect();
    let (np, no, nt) = (perturbations.len(), observables.len(), out_k.len());
    let d = model.dim();
    let size = np * no * nt;

    let member = |i: usize, diff: &mut [f64]| -> Result<()> {
        let mut x = initial.state(i);
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                context: "initial state",
                expected: d,
                got: x.len(),
            });
        }
        let mut noise = spec.stream(i as u64);
        let mut base = Stepper::new(model, *grid);
        let mut steppers: Vec<_> = systems.iter().map(|s| Stepper::new(s, *grid)).collect();
        let mut ys: Vec<Vec<f64>> = Vec::new();
        let mut dw = vec![0.0; model.noise_dim()];
        let mut oi = 0;
        for k in 0..=k_end {
            if k == kb {
                ys = vec![x.clone(); np];
            }
            if oi < nt && k == out_k[oi] {
                if !ys.is_empty() {
                    let ph = grid.time(k).phase;
                    for (o, obs) in observables.iter().enumerate() {
                        let f0 = obs.eval(ph, &x);
                        for (p, y) in ys.iter().enumerate() {
                            diff[(p * no + o) * nt + oi] = obs.eval(ph, y) - f0;
                        }
                    }
                }
                oi += 1;
            }
            if k == k_end {
                break;
            }
            dw.copy_from_slice(noise.increment(k)?);
            base.step_with(k, &mut x, &dw)?;
            for (st, y) in steppers.iter_mut().zip(ys.iter_mut()) {
                st.step_with(k, y, &dw)?;
            }
        }
        Ok(())
    };

    type Acc = (Vec<f64>, Vec<f64>, usize, usize, Option<f64>);
    let init: Result<Acc> = Ok((vec![0.0; size], vec![0.0; size], 0, 0, None));
    let acc = fold_chunks(
        cfg.n_paths,
        init,
        |range| -> Result<Acc> {
            let mut s = vec![0.0; size];
            let mut q = vec![0.0; size];
            let (mut ok, mut bad, mut first) = (0, 0, None::<f64>);
            let mut diff = vec![0.0; size];
            for i in range {
                diff.iter_mut().for_each(|v| *v = 0.0);
                match member(i, &mut diff) {
                    Ok(()) => {
                        ok += 1;
                        for ((a, b), v) in s.iter_mut().zip(q.iter_mut()).zip(&diff) {
                            *a += v;
                            *b += v * v;
                        }
                    }
                    Err(Error::Divergence { time, .. }) => {
                        bad += 1;
                        first = Some(first.map_or(time, |f| f.min(time)));
                    }
                    Err(e) => return Err(e),
                }
            }
            Ok((s, q, ok, bad, first))
        },
        |acc, part| {
            let (Ok(a), Ok(p)) = (acc.as_mut(), part.as_ref()) else {
                if let Err(e) = part {
                    if acc.is_ok() {
                        *acc = Err(e);
                    }
                }
                return;
            };
            for (x, y) in a.0.iter_mut().zip(&p.0) {
                *x += y;
            }
            for (x, y) in a.1.iter_mut().zip(&p.1) {
                *x += y;
            }
            a.2 += p.2;
            a.3 += p.3;
            if let Some(t) = p.4 {
                a.4 = Some(a.4.map_or(t, |f: f64| f.min(t)));
            }
        },
    )?;
    let (s, q, ok, bad, first) = acc;
    check_divergence(bad, cfg.n_paths, first)?;
    let n = ok as f64;
    let times: Vec<f64> = out_k.iter().map(|&k| grid.abs_time(k)).collect();
    let labels: Vec<String> = observables.iter().map(|o| o.label.clone()).collect();
    Ok(perturbations
        .iter()
        .enumerate()
        .map(|(p, pert)| {
            let mut values = vec![vec![0.0; nt]; no];
            let mut stderr = vec![vec![0.0; nt]; no];
            for o in 0..no {
                for t in 0..nt {
                    let j = (p * no + o) * nt + t;
                    let m = s[j] / n;
                    values[o][t] = m;
                    let var = ((q[j] / n - m * m) * n / (n - 1.0)).max(0.0);
                    stderr[o][t] = (var / n).sqrt();
                }
            }
            ResponseCurve {
                provenance: Provenance::Direct,
                epsilon: pert.epsilon,
                times: times.clone(),
                labels: labels.clone(),
                values,
                stderr,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdtConfig {
    pub n_paths: usize,
    pub phases: usize,
    pub max_lag: f64,
    /// Lag step in grid steps.
    #[serde(default = "default_every")]
    pub lag_every: usize,
    /// Periods integrated before the first phase is recorded.
    #[serde(default)]
    pub burn_in_periods: usize,
    /// Consecutive periods pooled at each phase; the periods of one path
    /// count as a single draw in the standard errors.
    #[serde(default = "default_record_periods")]
    pub record_periods: usize,
}

fn default_record_periods() -> usize {
    1
}

/// Density surrogate used for `B_r = Ṽ*ρ_r / ρ_r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityModel {
    Gaussian,
    Kde(Bandwidth),
}

/// Response function `R(lag, r)` on phases × lags × observables.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResponseTable {
    pub provenance: Provenance,
    pub phases: Vec<f64>,
    pub lags: Vec<f64>,
    pub labels: Vec<String>,
    pub period: f64,
    pub n_paths: usize,
    /// `[phase][lag][observable]`.
    pub r: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Uncentered ensemble mean of `B_r` per phase and its standard error.
    pub b_mean: Vec<f64>,
    pub b_stderr: Vec<f64>,
}

impl ResponseTable {
    fn idx(&self, k: usize, l: usize, o: usize) -> usize {
        (k * self.lags.len() + l) * self.labels.len() + o
    }

    pub fn get(&self, k: usize, l: usize, o: usize) -> f64 {
        self.r[self.idx(k, l, o)]
    }

    pub fn stderr_at(&self, k: usize, l: usize, o: usize) -> f64 {
        self.stderr[self.idx(k, l, o)]
    }

    pub fn max_lag(&self) -> f64 {
        *self.lags.last().unwrap_or(&0.0)
    }

    /// `R(u, r)`: linear in lag, periodic-linear in the phase of `r`.
    pub fn interpolate(&self, u: f64, r: f64, o: usize) -> Result<f64> {
        let nl = self.lags.len();
        let du = if nl > 1 { self.lags[1] - self.lags[0] } else { 1.0 };
        let s = u / du;
        if u < -1e-9 * du || s > (nl - 1) as f64 + 1e-9 {
            return Err(Error::LagCoverage {
                needed: u,
                available: self.max_lag(),
            });
        }
        let l0 = (s.floor().max(0.0) as usize).min(nl - 1);
        let wl = (s - l0 as f64).clamp(0.0, 1.0);
        let l1 = (l0 + 1).min(nl - 1);
        let kn = self.phases.len();
        let ph = (r / self.period).rem_euclid(1.0) * kn as f64;
        let k0 = (ph.floor() as usize) % kn;
        let wk = ph - ph.floor();
        let k1 = (k0 + 1) % kn;
        let at = |k: usize| self.get(k, l0, o) * (1.0 - wl) + self.get(k, l1, o) * wl;
        Ok(at(k0) * (1.0 - wk) + at(k1) * wk)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "r_phase,lag,observable,R,stderr")?;
        for (k, ph) in self.phases.iter().enumerate() {
            for (l, lag) in self.lags.iter().enumerate() {
                for (o, label) in self.labels.iter().enumerate() {
                    writeln!(w, "{ph},{lag},{label},{},{}", self.get(k, l, o), self.stderr_at(k, l, o))?;
                }
            }
        }
        Ok(())
    }
}

enum Surrogate {
    Gaussian(GaussianDensity),
    Kde(KdeDensity),
}

/// `𝔞 = σHᵀ + Hσᵀ` at `(t, x)`, row-major d × d.
fn a_matrix(model: &PeriodicSdeModel, h: &MatrixField, t: f64, x: &[f64]) -> Vec<f64> {
    let (d, m) = (model.dim(), model.noise_dim());
    let s = model.diffusion(t, x);
    let hv = h.value(t, x);
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..m {
                acc += s[i * m + k] * hv[j * m + k] + hv[i * m + k] * s[j * m + k];
            }
            a[i * d + j] = acc;
        }
    }
    a
}

/// `½ Tr D²(𝔞ρ) / ρ` from `ρ`, `∇ρ/ρ`, `D²ρ/ρ`, with derivatives of `𝔞`
/// by central differences.
fn a_term(model: &PeriodicSdeModel, h: &MatrixField, t: f64, x: &[f64], g: &[f64], hs: &[f64]) -> f64 {
    let d = x.len();
    let a = a_matrix(model, h, t, x);
    let step = |i: usize| 1e-4 * x[i].abs().max(1.0);
    let shifted = |pairs: &[(usize, f64)]| {
        let mut y = x.to_vec();
        for &(i, s) in pairs {
            y[i] += s;
        }
        a_matrix(model, h, t, &y)
    };
    let mut total = 0.0;
    for i in 0..d {
        let hi = step(i);
        let (ap, am) = (shifted(&[(i, hi)]), shifted(&[(i, -hi)]));
        for j in 0..d {
            // ∂_i 𝔞_ij ∂_j ρ, counted twice by symmetry of the double sum.
            total += 2.0 * (ap[i * d + j] - am[i * d + j]) / (2.0 * hi) * g[j];
            total += a[i * d + j] * hs[i * d + j];
            let hj = step(j);
            let pp = shifted(&[(i, hi), (j, hj)]);
            let pm = shifted(&[(i, hi), (j, -hj)]);
            let mp = shifted(&[(i, -hi), (j, hj)]);
            let mm = shifted(&[(i, -hi), (j, -hj)]);
            let dij = (pp[i * d + j] - pm[i * d + j] - mp[i * d + j] + mm[i * d + j]) / (4.0 * hi * hj);
            total += dij;
        }
    }
    0.5 * total
}

impl Surrogate {
    /// `B(x) = Ṽ*ρ(x) / ρ(x)`.
    fn b_value(&self, model: &PeriodicSdeModel, pert: &PerturbationSpec, t: f64, x: &[f64]) -> Result<f64> {
        let d = x.len();
        let mut f = vec![0.0; d];
        pert.drift.value_into(t, x, &mut f);
        let div = pert.drift.divergence(t, x);
        match self {
            Self::Gaussian(g) => {
                let mut w = vec![0.0; d];
                g.whitened(x, &mut w);
                Ok(-div + f.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>())
            }
            Self::Kde(k) => {
                let (rho, grad, hess) = k.evaluate(x);
                if !(rho > 0.0) {
                    return Err(Error::param("bandwidth", "KDE density vanishes at a sample point"));
                }
                let g: Vec<f64> = grad.iter().map(|v| v / rho).collect();
                let hs: Vec<f64> = hess.iter().map(|v| v / rho).collect();
                let mut b = -div - f.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
                if let Some(h) = pert.diffusion.as_ref().filter(|h| !h.is_zero()) {
                    b += a_term(model, h, t, x, &g, &hs);
                }
                Ok(b)
            }
        }
    }
}

/// Correlation response function `R(t − r, r) = E[B_r(X_r) φ(t, X_t)]`
/// over an unperturbed ensemble started from `initial` at time zero.
#[allow(clippy::too_many_arguments)]
pub fn fdt_response_function(
    model: &PeriodicSdeModel,
    pert: &PerturbationSpec,
    observables: &[Observable],
    initial: &InitialCondition,
    grid: &TimeGrid,
    cfg: &FdtConfig,
    density: DensityModel,
    spec: &NoiseSpec,
) -> Result<ResponseTable> {
    if cfg.n_paths < MIN_PATHS {
        return Err(Error::param("n_paths", format!("need at least {MIN_PATHS}, got {}", cfg.n_paths)));
    }
    if cfg.lag_every == 0 || !(cfg.max_lag >= 0.0) {
        return Err(Error::param("lag_every", "need a positive lag step and a nonnegative max_lag"));
    }
    if pert.drift.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            context: "perturbation direction",
            expected: model.dim(),
            got: pert.drift.dim(),
        });
    }
    if matches!(density, DensityModel::Gaussian) && pert.has_diffusion() {
        return Err(Error::Unsupported(
            "diffusion perturbations need the KDE response function".into(),
        ));
    }
    if cfg.record_periods == 0 {
        return Err(Error::param("record_periods", "must be positive"));
    }
    let kp = grid.require_periodic()?;
    let offsets = phase_offsets(grid, cfg.phases)?;
    let d = model.dim();
    let start = cfg.burn_in_periods as i64 * kp;
    let du = cfg.lag_every as f64 * grid.dt();
    let nl = (cfg.max_lag / du - 1e-9).ceil().max(0.0) as usize + 1;
    let nk = offsets.len();
    let no = observables.len();
    let np = cfg.record_periods;
    let le = cfg.lag_every as i64;
    // Slot `j·nk + p` is phase `p` of recorded period `j`.
    let slot_k: Vec<i64> = (0..np as i64)
        .flat_map(|j| offsets.iter().map(move |&o| start + j * kp + o))
        .collect();
    let ns = slot_k.len();
    let span = (nl as i64 - 1) * le;
    let k_last = slot_k[ns - 1] + span;

    // Pass 1: states at every slot.
    let first = par_members(cfg.n_paths, |i| {
        let mut x = initial.state(i);
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                context: "initial state",
                expected: d,
                got: x.len(),
            });
        }
        let mut noise = spec.stream(i as u64);
        let mut st = Stepper::new(model, *grid);
        let mut out = Vec::with_capacity(ns * d);
        let mut k = 0;
        for &ks in &slot_k {
            st.advance(k, ks, &mut x, &mut noise)?;
            k = ks;
            out.extend_from_slice(&x);
        }
        Ok(out)
    })?;
    let members: Vec<usize> = first.items.iter().map(|(i, _)| *i).collect();
    let n = members.len();
    let mut surrogates = Vec::with_capacity(nk);
    for p in 0..nk {
        let cloud: Vec<f64> = first
            .items
            .iter()
            .flat_map(|(_, s)| (0..np).flat_map(move |j| s[(j * nk + p) * d..(j * nk + p + 1) * d].iter().copied()))
            .collect();
        surrogates.push(match density {
            DensityModel::Gaussian => {
                let m = sample_moments(&cloud, d);
                Surrogate::Gaussian(GaussianDensity::new(m.mean().to_vec(), m.covariance())?)
            }
            DensityModel::Kde(rule) => {
                let kde = KdeDensity::new(cloud, d, rule)?;
                if kde.degenerate {
                    return Err(Error::param("bandwidth", "KDE bandwidth is degenerate (zero spread in a coordinate)"));
                }
                Surrogate::Kde(kde)
            }
        });
    }
    let phase_t: Vec<f64> = offsets.iter().map(|&o| grid.time(start + o).phase).collect();
    let b: Vec<f64> = first
        .items
        .par_iter()
        .map(|(_, s)| -> Result<Vec<f64>> {
            (0..ns)
                .map(|q| surrogates[q % nk].b_value(model, pert, phase_t[q % nk], &s[q * d..(q + 1) * d]))
                .collect()
        })
        .collect::<Result<Vec<_>>>()?
        .concat();
    // Per-path period averages are the independent draws.
    let per_path = |vals: &[f64], i: usize, p: usize| (0..np).map(|j| vals[i * ns + j * nk + p]).sum::<f64>() / np as f64;
    let mut b_mean = vec![0.0; nk];
    let mut b_stderr = vec![0.0; nk];
    for p in 0..nk {
        let col: Vec<f64> = (0..n).map(|i| per_path(&b, i, p)).collect();
        let m = sample_moments(&col, 1);
        b_mean[p] = m.mean()[0];
        b_stderr[p] = m.stderr(0);
    }
    // Centered B; Σ B' = 0 exactly up to rounding.
    let bc: Vec<f64> = (0..n * ns).map(|q| b[q] - b_mean[q % nk]).collect();
    let s_vv: Vec<f64> = (0..nk).map(|p| (0..n).map(|i| per_path(&bc, i, p).powi(2)).sum()).collect();

    // Slots grouped by residue of their start step modulo the lag step.
    let mut by_residue: Vec<Vec<usize>> = vec![Vec::new(); le as usize];
    for (q, &ks) in slot_k.iter().enumerate() {
        by_residue[ks.rem_euclid(le) as usize].push(q);
    }

    // Pass 2: correlate B' with observables along the same paths.
    let size = nk * nl * no;
    struct Sums {
        u: Vec<f64>,
        uv: Vec<f64>,
        uu: Vec<f64>,
        f: Vec<f64>,
        ok: usize,
        bad: usize,
        first: Option<f64>,
    }
    let zero = || Sums {
        u: vec![0.0; size],
        uv: vec![0.0; size],
        uu: vec![0.0; size],
        f: vec![0.0; size],
        ok: 0,
        bad: 0,
        first: None,
    };
    let inv = 1.0 / np as f64;
    let member = |j: usize, acc: &mut Sums| -> Result<()> {
        let i = members[j];
        let mut x = initial.state(i);
        let mut noise = spec.stream(i as u64);
        let mut st = Stepper::new(model, *grid);
        // Period averages of B'·f and f per (phase, lag, observable).
        let mut u = vec![0.0; size];
        let mut fsum = vec![0.0; size];
        let mut fv = vec![0.0; no];
        let mut lo = vec![0usize; le as usize];
        for k in 0..=k_last {
            let c = k.rem_euclid(le) as usize;
            let class = &by_residue[c];
            while lo[c] < class.len() && slot_k[class[lo[c]]] < k - span {
                lo[c] += 1;
            }
            let mut evaluated = false;
            for &q in class[lo[c]..].iter().take_while(|&&q| slot_k[q] <= k) {
                if !evaluated {
                    let ph = grid.time(k).phase;
                    for (v, obs) in fv.iter_mut().zip(observables) {
                        *v = obs.eval(ph, &x);
                    }
                    evaluated = true;
                }
                let p = q % nk;
                let l = ((k - slot_k[q]) / le) as usize;
                let bb = bc[j * ns + q] * inv;
                let base = (p * nl + l) * no;
                for o in 0..no {
                    u[base + o] += bb * fv[o];
                    fsum[base + o] += fv[o] * inv;
                }
            }
            if k < k_last {
                st.step(k, &mut x, &mut noise)?;
            }
        }
        for p in 0..nk {
            let v = per_path(&bc, j, p);
            for idx in p * nl * no..(p + 1) * nl * no {
                acc.u[idx] += u[idx];
                acc.uv[idx] += u[idx] * v;
                acc.uu[idx] += u[idx] * u[idx];
                acc.f[idx] += fsum[idx];
            }
        }
        Ok(())
    };
    let sums = fold_chunks(
        n,
        Ok(zero()),
        |range| -> Result<Sums> {
            let mut acc = zero();
            for j in range {
                let mut trial = zero();
                match member(j, &mut trial) {
                    Ok(()) => {
                        acc.ok += 1;
                        for (a, t) in [(&mut acc.u, &trial.u), (&mut acc.uv, &trial.uv), (&mut acc.uu, &trial.uu), (&mut acc.f, &trial.f)] {
                            for (x, y) in a.iter_mut().zip(t.iter()) {
                                *x += y;
                            }
                        }
                    }
                    Err(Error::Divergence { time, .. }) => {
                        acc.bad += 1;
                        acc.first = Some(acc.first.map_or(time, |f| f.min(time)));
                    }
                    Err(e) => return Err(e),
                }
            }
            Ok(acc)
        },
        |acc: &mut Result<Sums>, part: Result<Sums>| match (acc.as_mut(), part) {
            (Ok(a), Ok(p)) => {
                for (x, y) in [(&mut a.u, &p.u), (&mut a.uv, &p.uv), (&mut a.uu, &p.uu), (&mut a.f, &p.f)] {
                    for (u, v) in x.iter_mut().zip(y.iter()) {
                        *u += v;
                    }
                }
                a.ok += p.ok;
                a.bad += p.bad;
                if let Some(t) = p.first {
                    a.first = Some(a.first.map_or(t, |f: f64| f.min(t)));
                }
            }
            (Ok(_), Err(e)) => *acc = Err(e),
            (Err(_), _) => {}
        },
    )?;
    check_divergence(sums.bad + first.n_diverged, cfg.n_paths, sums.first.or(first.first_divergence))?;
    let nf = sums.ok as f64;
    let mut r = vec![0.0; size];
    let mut stderr = vec![0.0; size];
    for p in 0..nk {
        for l in 0..nl {
            for o in 0..no {
                let idx = (p * nl + l) * no + o;
                let mean_u = sums.u[idx] / nf;
                let fbar = sums.f[idx] / nf;
                // Draws are u − f̄·v with v the period-averaged B'.
                let sq = sums.uu[idx] - 2.0 * fbar * sums.uv[idx] + fbar * fbar * s_vv[p];
                let var = ((sq / nf - mean_u * mean_u) * nf / (nf - 1.0)).max(0.0);
                r[idx] = mean_u;
                stderr[idx] = (var / nf).sqrt();
            }
        }
    }
    Ok(ResponseTable {
        provenance: match density {
            DensityModel::Gaussian => Provenance::FdtQg,
            DensityModel::Kde(_) => Provenance::FdtKde,
        },
        phases: phase_t,
        lags: (0..nl).map(|l| l as f64 * du).collect(),
        labels: observables.iter().map(|o| o.label.clone()).collect(),
        period: model.period(),
        n_paths: sums.ok,
        r,
        stderr,
        b_mean,
        b_stderr,
    })
}

/// `ΔF(t) = ε ∫₀ᵗ R(t − r, r) ϑ(r) dr` by the trapezoid rule on the lag grid.
pub fn convolve_response(table: &ResponseTable, profile: &TimeProfile, epsilon: f64, times: &[f64]) -> Result<ResponseCurve> {
    profile.validate()?;
    let no = table.labels.len();
    let du = if table.lags.len() > 1 { table.lags[1] - table.lags[0] } else { 1.0 };
    let lo = profile.support_start().max(0.0);
    let mut values = vec![vec![0.0; times.len()]; no];
    for (ti, &t) in times.iter().enumerate() {
        if !(t > lo) {
            continue;
        }
        let span = t - lo;
        if span > table.max_lag() + 1e-9 * du {
            return Err(Error::LagCoverage {
                needed: span,
                available: table.max_lag(),
            });
        }
        let n = (span / du + 1e-9).floor() as usize;
        let mut nodes: Vec<f64> = (0..=n).map(|l| l as f64 * du).collect();
        if span - n as f64 * du > 1e-9 * du {
            nodes.push(span);
        } else {
            *nodes.last_mut().expect("nonempty") = span;
        }
        for o in 0..no {
            let f = |u: f64| -> Result<f64> { Ok(table.interpolate(u.min(table.max_lag()), t - u, o)? * profile.eval(t - u)) };
            let mut acc = 0.0;
            let mut prev = f(nodes[0])?;
            for w in nodes.windows(2) {
                let next = f(w[1])?;
                acc += 0.5 * (prev + next) * (w[1] - w[0]);
                prev = next;
            }
            values[o][ti] = epsilon * acc;
        }
    }
    Ok(ResponseCurve {
        provenance: table.provenance,
        epsilon,
        times: times.to_vec(),
        labels: table.labels.clone(),
        stderr: vec![vec![0.0; times.len()]; no],
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveComparison {
    pub labels: Vec<String>,
    /// `‖direct − predicted‖₂ / ‖direct‖₂` over the window, per observable.
    pub rel_l2: Vec<f64>,
    /// Same, pooled over all observables.
    pub rel_l2_total: f64,
    pub sup: Vec<f64>,
    /// Pointwise `(direct − predicted) / stderr_direct`; infinite where the
    /// direct estimate is exact.
    #[serde(skip)]
    pub z_scores: Vec<Vec<f64>>,
}

/// Error metrics of `predicted` against `direct` on `window = [t0, t1]`.
pub fn compare_curves(direct: &ResponseCurve, predicted: &ResponseCurve, window: (f64, f64)) -> Result<CurveComparison> {
    if direct.times.len() != predicted.times.len()
        || direct.times.iter().zip(&predicted.times).any(|(a, b)| (a - b).abs() > 1e-9 * a.abs().max(1.0))
    {
        return Err(Error::DimensionMismatch {
            context: "curve time grids",
            expected: direct.times.len(),
            got: predicted.times.len(),
        });
    }
    if direct.values.len() != predicted.values.len() {
        return Err(Error::DimensionMismatch {
            context: "curve observables",
            expected: direct.values.len(),
            got: predicted.values.len(),
        });
    }
    let idx: Vec<usize> = (0..direct.times.len())
        .filter(|&i| direct.times[i] >= window.0 - 1e-9 && direct.times[i] <= window.1 + 1e-9)
        .collect();
    let mut rel_l2 = Vec::new();
    let mut sup = Vec::new();
    let mut z_scores = Vec::new();
    let (mut num_t, mut den_t) = (0.0, 0.0);
    for o in 0..direct.values.len() {
        let (d, p, s) = (&direct.values[o], &predicted.values[o], &direct.stderr[o]);
        let num: f64 = idx.iter().map(|&i| (d[i] - p[i]).powi(2)).sum();
        let den: f64 = idx.iter().map(|&i| d[i] * d[i]).sum();
        if den == 0.0 {
            return Err(Error::UndefinedRelative);
        }
        num_t += num;
        den_t += den;
        rel_l2.push((num / den).sqrt());
        sup.push(idx.iter().map(|&i| (d[i] - p[i]).abs()).fold(0.0, f64::max));
        z_scores.push(
            idx.iter()
                .map(|&i| {
                    let e = d[i] - p[i];
                    if s[i] > 0.0 {
                        e / s[i]
                    } else if e == 0.0 {
                        0.0
                    } else {
                        e.signum() * f64::INFINITY
                    }
                })
                .collect(),
        );
    }
    Ok(CurveComparison {
        labels: direct.labels.clone(),
        rel_l2,
        rel_l2_total: (num_t / den_t).sqrt(),
        sup,
        z_scores,
    })
}

/// Writes `t,observable,delta_direct,stderr_direct,delta_fdt_qg[,delta_fdt_kde]`.
pub fn write_response_csv<W: Write>(
    mut w: W,
    direct: Option<&ResponseCurve>,
    qg: Option<&ResponseCurve>,
    kde: Option<&ResponseCurve>,
) -> Result<()> {
    let Some(reference) = direct.or(qg).or(kde) else {
        return Err(Error::param("response", "no curve to write"));
    };
    for c in [direct, qg, kde].into_iter().flatten() {
        if c.times.len() != reference.times.len() || c.labels != reference.labels {
            return Err(Error::DimensionMismatch {
                context: "response curves",
                expected: reference.times.len(),
                got: c.times.len(),
            });
        }
    }
    write!(w, "t,observable,delta_direct,stderr_direct,delta_fdt_qg")?;
    if kde.is_some() {
        write!(w, ",delta_fdt_kde")?;
    }
    writeln!(w)?;
    let cell = |c: Option<&ResponseCurve>, o: usize, i: usize, err: bool| {
        c.map(|c| if err { c.stderr[o][i] } else { c.values[o][i] }.to_string()).unwrap_or_default()
    };
    for (i, t) in reference.times.iter().enumerate() {
        for (o, label) in reference.labels.iter().enumerate() {
            write!(
                w,
                "{t},{label},{},{},{}",
                cell(direct, o, i, false),
                cell(direct, o, i, true),
                cell(qg, o, i, false)
            )?;
            if kde.is_some() {
                write!(w, ",{}", cell(kde, o, i, false))?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fdt2Report {
    pub r: f64,
    pub h: f64,
    pub lags: Vec<f64>,
    /// Monte Carlo `∂_r 𝒦_{φ,W}(t − r, r)`.
    pub derivative: Vec<f64>,
    pub stderr: Vec<f64>,
    /// `e^{−a·lag}`.
    pub analytic: Vec<f64>,
    /// Truncation error bound of the difference quotient.
    pub fd_error: Vec<f64>,
    pub residual: Vec<f64>,
    pub max_excess: f64,
    pub pass: bool,
}

/// Second fluctuation-dissipation check on the OU model with `φ = x` and a
/// constant drift perturbation: `∂_r E[φ(X_t) W(r, X_r)] = e^{−a(t−r)}` with
/// `W(r, x) = (x − m(r)) / (aΣ)`, differentiated by central differences in
/// `r` with step `h = 2dt` at `r = τ` (one-sided for lags below `h`).
pub fn fdt2_check_ou(params: &OuParams, grid: &TimeGrid, max_lag: f64, n_paths: usize, spec: &NoiseSpec) -> Result<Fdt2Report> {
    params.validate()?;
    let model = PeriodicSdeModel::build_ou(params.clone())?;
    let kp = grid.require_periodic()?;
    let (a, sig2) = (params.a, params.stationary_variance());
    let dt = grid.dt();
    let hs = 2i64;
    let h = hs as f64 * dt;
    let r0 = kp;
    let nl = (max_lag / dt + 1e-9).floor() as usize + 1;
    let w = |k: i64, x: f64| (x - params.periodic_mean(grid.time(k).phase)) / (a * sig2);
    let k_last = r0 + hs + nl as i64;
    let init_spec = spec.derive(0x1717);

    struct Acc {
        y: Vec<f64>,
        yy: Vec<f64>,
        ok: usize,
        bad: usize,
        first: Option<f64>,
    }
    let zero = || Acc {
        y: vec![0.0; nl],
        yy: vec![0.0; nl],
        ok: 0,
        bad: 0,
        first: None,
    };
    let member = |i: usize| -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(init_spec.seed);
        rng.set_stream(i as u64);
        let z: f64 = rng.sample(StandardNormal);
        let mut x = [params.periodic_mean(0.0) + sig2.sqrt() * z];
        let mut noise = spec.stream(i as u64);
        let mut st = Stepper::new(&model, *grid);
        let mut xs = vec![0.0; (k_last - (r0 - hs) + 1) as usize];
        st.advance(0, r0 - hs, &mut x, &mut noise)?;
        xs[0] = x[0];
        for k in (r0 - hs)..k_last {
            st.step(k, &mut x, &mut noise)?;
            xs[(k + 1 - (r0 - hs)) as usize] = x[0];
        }
        let at = |k: i64| xs[(k - (r0 - hs)) as usize];
        let (wm, w0, wp) = (w(r0 - hs, at(r0 - hs)), w(r0, at(r0)), w(r0 + hs, at(r0 + hs)));
        Ok((0..nl)
            .map(|l| {
                let phi = at(r0 + l as i64);
                if (l as i64) < hs {
                    phi * (w0 - wm) / h
                } else {
                    phi * (wp - wm) / (2.0 * h)
                }
            })
            .collect())
    };
    let acc = fold_chunks(
        n_paths,
        Ok(zero()),
        |range| -> Result<Acc> {
            let mut acc = zero();
            for i in range {
                match member(i) {
                    Ok(y) => {
                        acc.ok += 1;
                        for (l, v) in y.iter().enumerate() {
                            acc.y[l] += v;
                            acc.yy[l] += v * v;
                        }
                    }
                    Err(Error::Divergence { time, .. }) => {
                        acc.bad += 1;
                        acc.first = Some(acc.first.map_or(time, |f| f.min(time)));
                    }
                    Err(e) => return Err(e),
                }
            }
            Ok(acc)
        },
        |acc: &mut Result<Acc>, part: Result<Acc>| match (acc.as_mut(), part) {
            (Ok(a), Ok(p)) => {
                for l in 0..nl {
                    a.y[l] += p.y[l];
                    a.yy[l] += p.yy[l];
                }
                a.ok += p.ok;
                a.bad += p.bad;
                a.first = a.first.or(p.first);
            }
            (Ok(_), Err(e)) => *acc = Err(e),
            (Err(_), _) => {}
        },
    )?;
    check_divergence(acc.bad, n_paths, acc.first)?;
    let n = acc.ok as f64;
    let lags: Vec<f64> = (0..nl).map(|l| l as f64 * dt).collect();
    let derivative: Vec<f64> = acc.y.iter().map(|s| s / n).collect();
    let stderr: Vec<f64> = (0..nl)
        .map(|l| {
            let m = derivative[l];
            (((acc.yy[l] / n - m * m) * n / (n - 1.0)).max(0.0) / n).sqrt()
        })
        .collect();
    let analytic: Vec<f64> = lags.iter().map(|u| (-a * u).exp()).collect();
    let fd_error: Vec<f64> = (0..nl)
        .map(|l| {
            if (l as i64) < hs {
                0.5 * h * a * (-a * lags[l]).exp()
            } else {
                h * h / 6.0 * a * a * (-a * (lags[l] - h)).exp()
            }
        })
        .collect();
    let residual: Vec<f64> = derivative.iter().zip(&analytic).map(|(d, e)| (d - e).abs()).collect();
    let max_excess = (0..nl)
        .map(|l| residual[l] - 3.0 * stderr[l] - fd_error[l])
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Fdt2Report {
        r: grid.abs_time(r0),
        h,
        lags,
        derivative,
        stderr,
        analytic,
        fd_error,
        residual,
        pass: max_excess <= 0.0,
        max_excess,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    #[test]
    fn ramped_step_shape() {
        let p = TimeProfile::RampedStep { t0: 5.0, delta_t: 2.0 };
        assert_eq!(p.eval(0.0), 0.0);
        assert_eq!(p.eval(5.0), 0.0);
        assert_eq!(p.eval(6.0), 0.75);
        assert_eq!(p.eval(7.0), 1.0);
        assert_eq!(p.eval(100.0), 1.0);
        // Slope is continuous at t0 + ΔT.
        let e = 1e-6;
        assert!(((p.eval(7.0) - p.eval(7.0 - e)) / e).abs() < 1e-5);
        assert!(p.warning().is_none());
    }

    #[test]
    fn heaviside_profile_warns() {
        let p = TimeProfile::HeavisideCosSq { t_on: 80.25, omega: TAU };
        assert!(p.warning().is_some());
        assert_eq!(p.eval(80.0), 0.0);
        assert!((p.eval(81.0) - 1.0).abs() < 1e-12);
        assert_eq!(p.support_start(), 80.25);
    }

    #[test]
    fn table_profile_interpolates() {
        let p = TimeProfile::Table {
            times: vec![0.0, 1.0, 2.0],
            values: vec![0.0, 0.0, 4.0],
        };
        assert_eq!(p.eval(1.5), 2.0);
        assert_eq!(p.eval(9.0), 4.0);
        assert_eq!(p.support_start(), 1.0);
        let q = TimeProfile::Table {
            times: vec![1.0, 0.0],
            values: vec![0.0, 0.0],
        };
        assert!(q.validate().is_err());
    }

    fn exp_table(nl: usize, du: f64, phases: usize) -> ResponseTable {
        let lags: Vec<f64> = (0..nl).map(|l| l as f64 * du).collect();
        let r: Vec<f64> = (0..phases).flat_map(|_| lags.iter().map(|u| (-u).exp())).collect();
        ResponseTable {
            provenance: Provenance::FdtQg,
            phases: (0..phases).map(|k| k as f64 / phases as f64).collect(),
            labels: vec!["x1".into()],
            period: 1.0,
            n_paths: 1,
            stderr: vec![0.0; r.len()],
            r,
            lags,
            b_mean: vec![0.0; phases],
            b_stderr: vec![0.0; phases],
        }
    }

    #[test]
    fn convolution_of_exponential_with_step() {
        let tab = exp_table(2001, 0.005, 4);
        let prof = TimeProfile::Table {
            times: vec![0.0],
            values: vec![1.0],
        };
        let times = [0.0, 1.0, 2.5, 10.0];
        let c = convolve_response(&tab, &prof, 0.5, &times).unwrap();
        for (i, t) in times.iter().enumerate() {
            let exact = 0.5 * (1.0 - (-t).exp());
            assert!((c.values[0][i] - exact).abs() < 1e-5, "{t}");
        }
    }

    #[test]
    fn convolution_of_exponential_with_sine() {
        let tab = exp_table(3001, 0.005, 3);
        let prof = TimeProfile::Table {
            times: (0..=3000).map(|i| i as f64 * 0.005).collect(),
            values: (0..=3000).map(|i| (i as f64 * 0.005).sin()).collect(),
        };
        let times = [1.0, 4.0, 12.0];
        let c = convolve_response(&tab, &prof, 1.0, &times).unwrap();
        for (i, t) in times.iter().enumerate() {
            let exact = 0.5 * (t.sin() - t.cos() + (-t).exp());
            assert!((c.values[0][i] - exact).abs() < 1e-4, "{t}");
        }
    }

    #[test]
    fn convolution_of_zero_profile_and_coverage() {
        let tab = exp_table(11, 0.1, 2);
        let c = convolve_response(&tab, &TimeProfile::Zero, 1.0, &[5.0]).unwrap();
        assert_eq!(c.values[0][0], 0.0);
        let prof = TimeProfile::RampedStep { t0: 0.0, delta_t: 0.1 };
        assert!(matches!(
            convolve_response(&tab, &prof, 1.0, &[5.0]),
            Err(Error::LagCoverage { .. })
        ));
    }

    fn curve(values: Vec<f64>) -> ResponseCurve {
        let n = values.len();
        ResponseCurve {
            provenance: Provenance::Direct,
            epsilon: 1.0,
            times: (0..n).map(|i| i as f64).collect(),
            labels: vec!["x1".into()],
            values: vec![values],
            stderr: vec![vec![0.1; n]],
        }
    }

    #[test]
    fn comparison_metrics() {
        let d = curve(vec![1.0, 2.0, 3.0]);
        let c = compare_curves(&d, &d, (0.0, 2.0)).unwrap();
        assert_eq!(c.rel_l2[0], 0.0);
        let p = curve(vec![2.0, 4.0, 6.0]);
        let c = compare_curves(&d, &p, (0.0, 2.0)).unwrap();
        assert!((c.rel_l2[0] - 1.0).abs() < 1e-15);
        assert!((c.sup[0] - 3.0).abs() < 1e-15);
        let z = curve(vec![0.0; 3]);
        assert!(matches!(compare_curves(&z, &p, (0.0, 2.0)), Err(Error::UndefinedRelative)));
    }

    fn ou_setup(dt_steps: usize) -> (PeriodicSdeModel, TimeGrid) {
        let m = PeriodicSdeModel::build_ou(OuParams::new(1.0, 1.0, TAU, 1.0)).unwrap();
        let g = TimeGrid::per_period(&m, dt_steps).unwrap();
        (m, g)
    }

    #[test]
    fn zero_epsilon_gives_zero_response() {
        let (m, g) = ou_setup(400);
        let pert = PerturbationSpec::drift_only(
            VectorField::constant(TAU, &[1.0]),
            0.0,
            TimeProfile::RampedStep { t0: 1.0, delta_t: 1.0 },
        );
        let obs = Observable::coordinates(1, TAU);
        let cfg = DirectConfig {
            horizon: 3.0,
            output_every: 5,
            n_paths: 1000,
        };
        let spec = NoiseSpec::new(1, g.dt(), 1);
        let r = direct_response(&m, &[pert], &obs, &InitialCondition::Point(vec![0.3]), &g, &cfg, &spec).unwrap();
        assert!(r[0].values[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ou_step_response_is_exact_linear_filter() {
        let (m, g) = ou_setup(1000);
        let eps = 0.1;
        let pert = PerturbationSpec::drift_only(
            VectorField::constant(TAU, &[1.0]),
            eps,
            TimeProfile::Table {
                times: vec![0.0],
                values: vec![1.0],
            },
        );
        let obs = Observable::coordinates(1, TAU);
        let cfg = DirectConfig {
            horizon: 2.0,
            output_every: 1,
            n_paths: 1000,
        };
        let spec = NoiseSpec::new(2, g.dt(), 1);
        let r = direct_response(&m, &[pert], &obs, &InitialCondition::Point(vec![0.0]), &g, &cfg, &spec).unwrap();
        let c = &r[0];
        let i = c.times.iter().position(|t| (t - 2.0).abs() < g.dt() / 2.0).unwrap();
        let t = c.times[i];
        // Euler recursion of the difference: δ_{k+1} = (1 − a dt)δ_k + ε dt.
        let n = (t / g.dt()).round() as i32;
        let euler = eps * (1.0 - (1.0 - g.dt()).powi(n));
        assert!((c.values[0][i] - euler).abs() < 1e-12);
        assert!((c.values[0][i] - eps * (1.0 - (-t).exp())).abs() < 1e-3);
    }

    #[test]
    fn qg_response_of_constant_observable_vanishes() {
        let (m, g) = ou_setup(200);
        let pert = PerturbationSpec::drift_only(VectorField::constant(TAU, &[1.0]), 0.1, TimeProfile::Zero);
        let obs = vec![Observable::constant(1, TAU, 2.0)];
        let cfg = FdtConfig {
            n_paths: 1000,
            phases: 4,
            max_lag: 1.0,
            lag_every: 10,
            burn_in_periods: 1,
            record_periods: 1,
        };
        let spec = NoiseSpec::new(3, g.dt(), 1);
        let t = fdt_response_function(&m, &pert, &obs, &InitialCondition::Point(vec![0.0]), &g, &cfg, DensityModel::Gaussian, &spec)
            .unwrap();
        assert!(t.r.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn pooled_periods_shrink_stderr_and_stay_unbiased() {
        let (m, g) = ou_setup(200);
        let pert = PerturbationSpec::drift_only(VectorField::constant(TAU, &[1.0]), 0.1, TimeProfile::Zero);
        let obs = Observable::coordinates(1, TAU);
        let spec = NoiseSpec::new(5, g.dt(), 1);
        let table = |periods| {
            let cfg = FdtConfig {
                n_paths: 2000,
                phases: 2,
                max_lag: 2.0,
                lag_every: 5,
                burn_in_periods: 2,
                record_periods: periods,
            };
            fdt_response_function(&m, &pert, &obs, &InitialCondition::Point(vec![0.0]), &g, &cfg, DensityModel::Gaussian, &spec)
                .unwrap()
        };
        let (one, many) = (table(1), table(9));
        // Lag covariance over variance of the Euler chain is (1 − dt)^n.
        let mut worst: f64 = 0.0;
        for k in 0..2 {
            for (l, u) in many.lags.iter().enumerate() {
                let exact = (1.0 - g.dt()).powi((u / g.dt()).round() as i32);
                worst = worst.max((many.get(k, l, 0) - exact).abs() / many.stderr_at(k, l, 0));
            }
        }
        assert!(worst < 4.5, "max z {worst}");
        let ratio = one.stderr_at(1, 10, 0) / many.stderr_at(1, 10, 0);
        assert!(ratio > 2.0 && ratio < 4.0, "stderr ratio {ratio}");
    }

    #[test]
    fn qg_rejects_diffusion_perturbation() {
        let (m, g) = ou_setup(200);
        let mut pert = PerturbationSpec::drift_only(VectorField::constant(TAU, &[0.0]), 0.1, TimeProfile::Zero);
        pert.diffusion = Some(MatrixField::constant(TAU, 1, 1, &[1.0]).unwrap());
        let cfg = FdtConfig {
            n_paths: 1000,
            phases: 1,
            max_lag: 0.1,
            lag_every: 10,
            burn_in_periods: 0,
            record_periods: 1,
        };
        let spec = NoiseSpec::new(3, g.dt(), 1);
        let r = fdt_response_function(
            &m,
            &pert,
            &Observable::coordinates(1, TAU),
            &InitialCondition::Point(vec![0.0]),
            &g,
            &cfg,
            DensityModel::Gaussian,
            &spec,
        );
        assert!(matches!(r, Err(Error::Unsupported(_))));
    }

    #[test]
    fn kde_b_matches_gaussian_b_near_mean() {
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<f64> = (0..n).map(|_| 1.0 + 0.7 * rng.sample::<f64, _>(StandardNormal)).collect();
        let m = sample_moments(&pts, 1);
        let gauss = Surrogate::Gaussian(GaussianDensity::new(m.mean().to_vec(), m.covariance()).unwrap());
        let kde = Surrogate::Kde(KdeDensity::new(pts, 1, Bandwidth::Scott).unwrap());
        let model = PeriodicSdeModel::build_ou(OuParams::new(1.0, 1.0, TAU, 1.0)).unwrap();
        let pert = PerturbationSpec::drift_only(VectorField::constant(TAU, &[1.0]), 0.1, TimeProfile::Zero);
        // B vanishes at the mean; compare one standard deviation out.
        let x = [1.0 + 0.7];
        let bg = gauss.b_value(&model, &pert, 0.0, &x).unwrap();
        let bk = kde.b_value(&model, &pert, 0.0, &x).unwrap();
        assert!((bk / bg - 1.0).abs() < 0.15, "{bk} vs {bg}");
    }

    #[test]
    fn a_term_matches_gaussian_closed_form() {
        // OU with σ = 1, H = h: ½Tr D²(𝔞ρ)/ρ = σh ρ''/ρ.
        let model = PeriodicSdeModel::build_ou(OuParams::new(1.0, 0.0, TAU, 1.0)).unwrap();
        let h = MatrixField::constant(TAU, 1, 1, &[0.5]).unwrap();
        let (m, s2) = (0.2, 0.5);
        let x = [0.9];
        let z = (x[0] - m) / s2;
        let g = [-z];
        let hs = [z * z - 1.0 / s2];
        let v = a_term(&model, &h, 0.0, &x, &g, &hs);
        assert!((v - 0.5 * hs[0]).abs() < 1e-6);
    }
}
