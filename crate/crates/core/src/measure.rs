//! Time-periodic measures on Poincaré sections, their diagnostics, and
//! density surrogates.

use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrate::{par_members, InitialCondition, SdeSystem, Stepper, TimeGrid};
use crate::model::Observable;
use crate::noise::NoiseSpec;
use crate::pullback::phase_offsets;
use crate::stats::{sample_moments, Moments};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeasureConfig {
    pub phases: usize,
    pub n_paths: usize,
    pub burn_in_periods: usize,
    pub record_periods: usize,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        Self {
            phases: 8,
            n_paths: 1000,
            burn_in_periods: 50,
            record_periods: 4,
        }
    }
}

impl MeasureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_paths < 100 {
            return Err(Error::param("n_paths", format!("need at least 100, got {}", self.n_paths)));
        }
        if self.record_periods == 0 {
            return Err(Error::param("record_periods", "must be positive"));
        }
        if self.phases == 0 {
            return Err(Error::param("phases", "must be positive"));
        }
        Ok(())
    }
}

/// Per-phase sample clouds approximating `μ_{t_k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalPeriodicMeasure {
    pub period: f64,
    pub phases: Vec<f64>,
    pub dim: usize,
    /// Members per recorded period.
    pub n_paths: usize,
    pub record_periods: usize,
    pub burn_in_periods: usize,
    pub seed: u64,
    /// Per phase, row-major `[(period j, member i) × d]` with `j` outermost.
    samples: Vec<Vec<f64>>,
    moments: Vec<Moments>,
}

impl EmpiricalPeriodicMeasure {
    /// Builds a measure from per-phase clouds; each cloud holds
    /// `record_periods · n_paths` rows ordered period-major.
    pub fn from_clouds(
        period: f64,
        phases: Vec<f64>,
        dim: usize,
        n_paths: usize,
        record_periods: usize,
        samples: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if samples.len() != phases.len() {
            return Err(Error::DimensionMismatch {
                context: "phase clouds",
                expected: phases.len(),
                got: samples.len(),
            });
        }
        for s in &samples {
            if s.len() != dim * n_paths * record_periods {
                return Err(Error::DimensionMismatch {
                    context: "cloud size",
                    expected: dim * n_paths * record_periods,
                    got: s.len(),
                });
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::param("samples", "non-finite sample"));
            }
        }
        let moments = samples.iter().map(|s| sample_moments(s, dim)).collect();
        Ok(Self {
            period,
            phases,
            dim,
            n_paths,
            record_periods,
            burn_in_periods: 0,
            seed: 0,
            samples,
            moments,
        })
    }

    pub fn n_phases(&self) -> usize {
        self.phases.len()
    }

    /// Pooled cloud at phase `k`.
    pub fn cloud(&self, k: usize) -> &[f64] {
        &self.samples[k]
    }

    /// Cloud at phase `k` from recorded period `j`.
    pub fn period_cloud(&self, k: usize, j: usize) -> &[f64] {
        let n = self.n_paths * self.dim;
        &self.samples[k][j * n..(j + 1) * n]
    }

    pub fn moments(&self, k: usize) -> &Moments {
        &self.moments[k]
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        self.moments[k].mean()
    }

    pub fn covariance(&self, k: usize) -> Vec<f64> {
        self.moments[k].covariance()
    }

    /// Fraction of the phase-`k` cloud inside `set`.
    pub fn probability(&self, k: usize, set: &BoxSet) -> f64 {
        let rows = self.samples[k].chunks_exact(self.dim);
        let n = rows.len();
        rows.filter(|x| set.contains(x)).count() as f64 / n as f64
    }

    pub fn averaged(&self) -> AveragedMeasure {
        let k = self.n_phases() as f64;
        let mut mean = vec![0.0; self.dim];
        for m in &self.moments {
            for (a, v) in mean.iter_mut().zip(m.mean()) {
                *a += v / k;
            }
        }
        let mut pooled = Moments::new(self.dim);
        for m in &self.moments {
            pooled.merge(m);
        }
        AveragedMeasure {
            count: pooled.count(),
            mean,
            covariance: pooled.covariance(),
        }
    }

    pub fn write_phase_csv<W: Write>(&self, k: usize, mut w: W) -> Result<()> {
        write!(w, "period_index")?;
        for i in 0..self.dim {
            write!(w, ",x{}", i + 1)?;
        }
        writeln!(w)?;
        for j in 0..self.record_periods {
            for row in self.period_cloud(k, j).chunks_exact(self.dim) {
                write!(w, "{j}")?;
                for v in row {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }

    pub fn summary(&self) -> MeasureSummary {
        MeasureSummary {
            period: self.period,
            n_paths: self.n_paths,
            record_periods: self.record_periods,
            burn_in_periods: self.burn_in_periods,
            seed: self.seed,
            phases: (0..self.n_phases())
                .map(|k| PhaseSummary {
                    phase: self.phases[k],
                    count: self.moments[k].count(),
                    mean: self.mean(k).to_vec(),
                    covariance: self.covariance(k),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseSummary {
    pub phase: f64,
    pub count: usize,
    pub mean: Vec<f64>,
    pub covariance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeasureSummary {
    pub period: f64,
    pub n_paths: usize,
    pub record_periods: usize,
    pub burn_in_periods: usize,
    pub seed: u64,
    pub phases: Vec<PhaseSummary>,
}

/// Period average `(1/τ)∫ μ_t dt`, represented by the pooled phase clouds.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedMeasure {
    pub count: usize,
    /// Average of the per-phase means.
    pub mean: Vec<f64>,
    pub covariance: Vec<f64>,
}

/// Evolves an ensemble past the burn-in and records it at `K` phases over
/// `M` periods. Clouds from different periods at the same phase are pooled.
pub fn estimate_periodic_measure<S>(
    sys: &S,
    grid: &TimeGrid,
    cfg: &MeasureConfig,
    spec: &NoiseSpec,
    initial: &InitialCondition,
) -> Result<EmpiricalPeriodicMeasure>
where
    S: SdeSystem + ?Sized,
{
    cfg.validate()?;
    let d = sys.dim();
    let kp = grid.require_periodic()?;
    let offsets = phase_offsets(grid, cfg.phases)?;
    let start = cfg.burn_in_periods as i64 * kp;
    let res = par_members(cfg.n_paths, |i| {
        let mut x = initial.state(i);
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                context: "initial state",
                expected: d,
                got: x.len(),
            });
        }
        let mut noise = spec.stream(i as u64);
        let mut stepper = Stepper::new(sys, *grid);
        stepper.advance(0, start, &mut x, &mut noise)?;
        let mut k = start;
        let mut out = Vec::with_capacity(cfg.record_periods * cfg.phases * d);
        for j in 0..cfg.record_periods as i64 {
            for &off in &offsets {
                let target = start + j * kp + off;
                stepper.advance(k, target, &mut x, &mut noise)?;
                k = target;
                out.extend_from_slice(&x);
            }
        }
        Ok(out)
    })?;
    let n = res.items.len();
    let mut samples = vec![Vec::with_capacity(n * cfg.record_periods * d); cfg.phases];
    for j in 0..cfg.record_periods {
        for (_, rec) in &res.items {
            for (k, cloud) in samples.iter_mut().enumerate() {
                let off = (j * cfg.phases + k) * d;
                cloud.extend_from_slice(&rec[off..off + d]);
            }
        }
    }
    let phases = offsets.iter().map(|&o| o as f64 * grid.dt()).collect();
    let mut m = EmpiricalPeriodicMeasure::from_clouds(sys.period(), phases, d, n, cfg.record_periods, samples)?;
    m.burn_in_periods = cfg.burn_in_periods;
    m.seed = spec.seed;
    Ok(m)
}

/// Axis-aligned box `[lo, hi]`; infinite bounds allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxSet {
    pub fn whole_space(dim: usize) -> Self {
        Self {
            lo: vec![f64::NEG_INFINITY; dim],
            hi: vec![f64::INFINITY; dim],
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| *v >= *l && *v <= *h)
    }
}

/// Components of the period-to-period distance between two clouds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CloudDistance {
    /// `|m_a − m_b| / sqrt(tr Σ_a)`.
    pub rel_mean: f64,
    /// `‖Σ_a − Σ_b‖_F / ‖Σ_a‖_F`.
    pub rel_cov: f64,
    /// Energy distance normalized by `2E|X − Y|`.
    pub energy: f64,
    pub distance: f64,
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

/// Energy-distance V-statistic and the normalizer `2E|X − Y|` from a
/// pairwise distance matrix over `labels`.
fn energy_from_matrix(dist: &[f64], n: usize, labels: &[bool]) -> (f64, f64) {
    let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
    let (mut nxy, mut nxx, mut nyy) = (0usize, 0usize, 0usize);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = dist[i * n + j];
            match (labels[i], labels[j]) {
                (true, true) => {
                    xx += v;
                    nxx += 1;
                }
                (false, false) => {
                    yy += v;
                    nyy += 1;
                }
                _ => {
                    xy += v;
                    nxy += 1;
                }
            }
        }
    }
    let mxy = xy / nxy.max(1) as f64;
    let mxx = xx / nxx.max(1) as f64;
    let myy = yy / nyy.max(1) as f64;
    (2.0 * mxy - mxx - myy, 2.0 * mxy)
}

fn normalized(e: f64, norm: f64) -> f64 {
    if norm > 0.0 {
        (e / norm).max(0.0)
    } else {
        0.0
    }
}

fn cloud_distance_parts(a: &[f64], b: &[f64], d: usize) -> (f64, f64) {
    let (ma, mb) = (sample_moments(a, d), sample_moments(b, d));
    let (ca, cb) = (ma.covariance(), mb.covariance());
    let tr: f64 = (0..d).map(|i| ca[i * d + i]).sum();
    let dm = euclid(ma.mean(), mb.mean());
    let rel_mean = if tr > 0.0 {
        dm / tr.sqrt()
    } else if dm == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    let fa = ca.iter().map(|v| v * v).sum::<f64>().sqrt();
    let fd = ca.iter().zip(&cb).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    let rel_cov = if fa > 0.0 {
        fd / fa
    } else if fd == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    (rel_mean, rel_cov)
}

/// Distance between two row-major clouds of the same dimension.
pub fn cloud_distance(a: &[f64], b: &[f64], d: usize) -> CloudDistance {
    let (rel_mean, rel_cov) = cloud_distance_parts(a, b, d);
    let rows: Vec<&[f64]> = a.chunks_exact(d).chain(b.chunks_exact(d)).collect();
    let n = rows.len();
    let na = a.len() / d;
    let dist = distance_matrix(&rows);
    let labels: Vec<bool> = (0..n).map(|i| i < na).collect();
    let (e, norm) = energy_from_matrix(&dist, n, &labels);
    let energy = normalized(e, norm);
    CloudDistance {
        rel_mean,
        rel_cov,
        energy,
        distance: rel_mean.max(rel_cov).max(energy),
    }
}

fn distance_matrix(rows: &[&[f64]]) -> Vec<f64> {
    let n = rows.len();
    let mut dist = vec![0.0; n * n];
    dist.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, v) in row.iter_mut().enumerate() {
            *v = euclid(rows[i], rows[j]);
        }
    });
    dist
}

/// Phase-`k` cloud distance between recorded periods `j` and `j + 1`.
pub fn periodicity_distance(measure: &EmpiricalPeriodicMeasure, k: usize, j: usize) -> Result<CloudDistance> {
    if measure.record_periods < 2 || j + 1 >= measure.record_periods {
        return Err(Error::param(
            "record_periods",
            "periodicity distance needs two consecutive recorded periods",
        ));
    }
    Ok(cloud_distance(measure.period_cloud(k, j), measure.period_cloud(k, j + 1), measure.dim))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PermutationConfig {
    pub permutations: usize,
    pub level: f64,
    /// Each cloud is truncated to its first `max_samples` rows.
    pub max_samples: usize,
    pub seed: u64,
}

impl Default for PermutationConfig {
    fn default() -> Self {
        Self {
            permutations: 200,
            level: 0.95,
            max_samples: 500,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PermutationTest {
    pub statistic: f64,
    pub threshold: f64,
    pub p_value: f64,
    pub pass: bool,
}

/// Energy-distance permutation test of "same distribution" for two clouds.
pub fn permutation_test(a: &[f64], b: &[f64], d: usize, cfg: &PermutationConfig) -> Result<PermutationTest> {
    if cfg.permutations == 0 || !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(Error::param("permutations", "need at least one permutation and a level in (0, 1)"));
    }
    let take = |c: &[f64]| -> Vec<Vec<f64>> { c.chunks_exact(d).take(cfg.max_samples).map(<[f64]>::to_vec).collect() };
    let (ra, rb) = (take(a), take(b));
    let na = ra.len();
    let rows: Vec<&[f64]> = ra.iter().chain(&rb).map(Vec::as_slice).collect();
    let n = rows.len();
    let dist = distance_matrix(&rows);
    let labels: Vec<bool> = (0..n).map(|i| i < na).collect();
    let (e0, _) = energy_from_matrix(&dist, n, &labels);
    let permuted: Vec<f64> = (0..cfg.permutations)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(p as u64);
            let mut l = labels.clone();
            l.shuffle(&mut rng);
            energy_from_matrix(&dist, n, &l).0
        })
        .collect();
    let mut sorted = permuted.clone();
    sorted.sort_by(f64::total_cmp);
    let idx = ((cfg.level * cfg.permutations as f64).ceil() as usize).clamp(1, cfg.permutations) - 1;
    let threshold = sorted[idx];
    let exceed = permuted.iter().filter(|&&v| v >= e0).count();
    Ok(PermutationTest {
        statistic: e0,
        threshold,
        p_value: (1 + exceed) as f64 / (1 + cfg.permutations) as f64,
        pass: e0 <= threshold,
    })
}

/// Permutation test of period `j` against period `j + 1` at phase `k`.
pub fn periodicity_test(
    measure: &EmpiricalPeriodicMeasure,
    k: usize,
    j: usize,
    cfg: &PermutationConfig,
) -> Result<PermutationTest> {
    periodicity_distance(measure, k, j)?;
    permutation_test(measure.period_cloud(k, j), measure.period_cloud(k, j + 1), measure.dim, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KrylovCurve {
    /// Number of averaged periods.
    pub n: Vec<usize>,
    /// Per box, `|(1/n)Σ P̂(0, x; t + mτ, A) − μ̂_t(A)|`.
    pub deviation: Vec<Vec<f64>>,
    /// Per box, `μ̂_t(A)`.
    pub target: Vec<f64>,
}

/// Krylov–Bogolyubov convergence diagnostic at phase `k` of `measure`.
#[allow(clippy::too_many_arguments)]
pub fn krylov_diagnostic<S>(
    sys: &S,
    grid: &TimeGrid,
    measure: &EmpiricalPeriodicMeasure,
    k: usize,
    x_start: &[f64],
    boxes: &[BoxSet],
    n_periods: usize,
    n_paths: usize,
    spec: &NoiseSpec,
) -> Result<KrylovCurve>
where
    S: SdeSystem + ?Sized,
{
    let kp = grid.require_periodic()?;
    let offsets = phase_offsets(grid, measure.n_phases())?;
    let off = offsets[k];
    let res = par_members(n_paths, |i| {
        let mut x = x_start.to_vec();
        let mut noise = spec.stream(i as u64);
        let mut stepper = Stepper::new(sys, *grid);
        let mut hits = vec![false; n_periods * boxes.len()];
        let mut kk = 0;
        for m in 0..n_periods {
            let target = off + m as i64 * kp;
            stepper.advance(kk, target, &mut x, &mut noise)?;
            kk = target;
            for (b, set) in boxes.iter().enumerate() {
                hits[m * boxes.len() + b] = set.contains(&x);
            }
        }
        Ok(hits)
    })?;
    let alive = res.items.len().max(1) as f64;
    let target: Vec<f64> = boxes.iter().map(|b| measure.probability(k, b)).collect();
    let mut deviation = vec![Vec::with_capacity(n_periods); boxes.len()];
    let mut running = vec![0.0; boxes.len()];
    for m in 0..n_periods {
        for (b, dev) in deviation.iter_mut().enumerate() {
            let freq = res.items.iter().filter(|(_, h)| h[m * boxes.len() + b]).count() as f64 / alive;
            running[b] += freq;
            dev.push((running[b] / (m + 1) as f64 - target[b]).abs());
        }
    }
    Ok(KrylovCurve {
        n: (1..=n_periods).collect(),
        deviation,
        target,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErgodicAverage {
    pub values: Vec<f64>,
    pub running: Vec<f64>,
    pub mean: f64,
    /// Batch-means standard error (20 batches).
    pub stderr: f64,
}

/// Phase-locked time average `(1/N)Σ φ(t, X_{t+nτ})` along one path.
#[allow(clippy::too_many_arguments)]
pub fn ergodic_average_observable<S>(
    sys: &S,
    grid: &TimeGrid,
    observable: &Observable,
    phase: f64,
    x_start: &[f64],
    n_periods: usize,
    spec: &NoiseSpec,
    stream: u64,
) -> Result<ErgodicAverage>
where
    S: SdeSystem + ?Sized,
{
    let kp = grid.require_periodic()?;
    let off = grid.index(phase)?;
    let mut x = x_start.to_vec();
    let mut noise = spec.stream(stream);
    let mut stepper = Stepper::new(sys, *grid);
    let mut values = Vec::with_capacity(n_periods);
    let mut k = 0;
    for n in 0..n_periods as i64 {
        let target = off + n * kp;
        stepper.advance(k, target, &mut x, &mut noise)?;
        k = target;
        values.push(observable.eval(grid.time(target).phase, &x));
    }
    let mut running = Vec::with_capacity(n_periods);
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        running.push(acc / (i + 1) as f64);
    }
    let mean = running.last().copied().unwrap_or(f64::NAN);
    let batches = 20;
    let size = values.len() / batches;
    let stderr = if size >= 1 {
        let bm: Vec<f64> = values.chunks_exact(size).take(batches).map(|c| c.iter().sum::<f64>() / size as f64).collect();
        let mb = bm.iter().sum::<f64>() / bm.len() as f64;
        let var = bm.iter().map(|v| (v - mb) * (v - mb)).sum::<f64>() / (bm.len() - 1) as f64;
        (var / bm.len() as f64).sqrt()
    } else {
        f64::NAN
    };
    Ok(ErgodicAverage {
        values,
        running,
        mean,
        stderr,
    })
}

/// Largest tolerated covariance condition number for the Gaussian surrogate.
pub const MAX_CONDITION: f64 = 1e12;

/// Gaussian surrogate `N(m, Σ)` of a phase density.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDensity {
    pub mean: Vec<f64>,
    pub covariance: Vec<f64>,
    /// `Σ⁻¹`, row-major.
    pub precision: Vec<f64>,
    log_norm: f64,
}

impl GaussianDensity {
    pub fn new(mean: Vec<f64>, covariance: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.len() != d * d {
            return Err(Error::DimensionMismatch {
                context: "covariance",
                expected: d * d,
                got: covariance.len(),
            });
        }
        let c = DMatrix::from_row_slice(d, d, &covariance);
        let c = (&c + c.transpose()) * 0.5;
        let eig = c.clone().symmetric_eigen();
        let lmax = eig.eigenvalues.max();
        let lmin = eig.eigenvalues.min();
        let condition = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
        if !(condition < MAX_CONDITION) {
            return Err(Error::SingularCovariance { condition });
        }
        let inv = c.clone().try_inverse().ok_or(Error::SingularCovariance { condition })?;
        let logdet: f64 = eig.eigenvalues.iter().map(|l| l.ln()).sum();
        let log_norm = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + logdet);
        let precision = (0..d * d).map(|i| inv[(i / d, i % d)]).collect();
        Ok(Self {
            mean,
            covariance,
            precision,
            log_norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `Σ⁻¹(x − m)`.
    pub fn whitened(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for i in 0..d {
            out[i] = (0..d).map(|j| self.precision[i * d + j] * (x[j] - self.mean[j])).sum();
        }
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        let mut w = vec![0.0; self.dim()];
        self.whitened(x, &mut w);
        let q: f64 = w.iter().zip(x.iter().zip(&self.mean)).map(|(wi, (xi, mi))| wi * (xi - mi)).sum();
        (self.log_norm - 0.5 * q).exp()
    }

    /// `∇ρ = −ρ Σ⁻¹(x − m)`.
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut w = vec![0.0; self.dim()];
        self.whitened(x, &mut w);
        let r = self.density(x);
        w.iter().map(|v| -r * v).collect()
    }
}

/// Gaussian surrogate of the phase-`k` density of `measure`.
pub fn density_gaussian(measure: &EmpiricalPeriodicMeasure, k: usize) -> Result<GaussianDensity> {
    GaussianDensity::new(measure.mean(k).to_vec(), measure.covariance(k))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Scott,
    /// Same bandwidth in every coordinate.
    Fixed(f64),
}

/// Floor applied to Scott bandwidths of constant coordinates.
const MIN_BANDWIDTH: f64 = 1e-9;

/// Product-Gaussian kernel density estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeDensity {
    points: Vec<f64>,
    dim: usize,
    pub bandwidth: Vec<f64>,
    /// True when a coordinate had zero spread and the floor was applied.
    pub degenerate: bool,
    norm: f64,
}

impl KdeDensity {
    pub fn new(points: Vec<f64>, dim: usize, rule: Bandwidth) -> Result<Self> {
        let n = points.len() / dim;
        if n == 0 {
            return Err(Error::param("samples", "KDE needs at least one sample"));
        }
        let m = sample_moments(&points, dim);
        let mut degenerate = false;
        let bandwidth: Vec<f64> = (0..dim)
            .map(|i| {
                let h = match rule {
                    Bandwidth::Scott => m.variance(i).sqrt() * (n as f64).powf(-1.0 / (dim as f64 + 4.0)),
                    Bandwidth::Fixed(h) => h,
                };
                if h > MIN_BANDWIDTH {
                    h
                } else {
                    degenerate = true;
                    MIN_BANDWIDTH * m.mean()[i].abs().max(1.0)
                }
            })
            .collect();
        if let Bandwidth::Fixed(h) = rule {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::param("bandwidth", format!("must be > 0, got {h}")));
            }
        }
        let prod: f64 = bandwidth.iter().product();
        let norm = 1.0 / (n as f64 * (2.0 * std::f64::consts::PI).powf(dim as f64 / 2.0) * prod);
        Ok(Self {
            points,
            dim,
            bandwidth,
            degenerate,
            norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Density, gradient and row-major Hessian at `x`.
    pub fn evaluate(&self, x: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let mut rho = 0.0;
        let mut grad = vec![0.0; d];
        let mut hess = vec![0.0; d * d];
        let mut u = vec![0.0; d];
        for p in self.points.chunks_exact(d) {
            let mut q = 0.0;
            for i in 0..d {
                u[i] = (x[i] - p[i]) / self.bandwidth[i];
                q += u[i] * u[i];
            }
            if q > 80.0 {
                continue;
            }
            let k = (-0.5 * q).exp();
            rho += k;
            for i in 0..d {
                let gi = -u[i] / self.bandwidth[i];
                grad[i] += k * gi;
                for j in 0..d {
                    let gj = -u[j] / self.bandwidth[j];
                    let diag = if i == j { 1.0 / (self.bandwidth[i] * self.bandwidth[i]) } else { 0.0 };
                    hess[i * d + j] += k * (gi * gj - diag);
                }
            }
        }
        let s = self.norm;
        (rho * s, grad.iter().map(|g| g * s).collect(), hess.iter().map(|h| h * s).collect())
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.evaluate(x).0
    }
}

/// Kernel density estimate of the phase-`k` density of `measure`.
pub fn density_kde(measure: &EmpiricalPeriodicMeasure, k: usize, rule: Bandwidth) -> Result<KdeDensity> {
    if measure.cloud(k).len() / measure.dim < 500 {
        return Err(Error::param("n_paths", "KDE needs at least 500 samples per phase"));
    }
    KdeDensity::new(measure.cloud(k).to_vec(), measure.dim, rule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn normals(n: usize, d: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    #[test]
    fn identical_clouds_have_zero_distance() {
        let a = normals(200, 2, 1);
        let dist = cloud_distance(&a, &a, 2);
        assert_eq!(dist.distance, 0.0);
    }

    #[test]
    fn shifted_cloud_fails_permutation_test() {
        let a = normals(300, 2, 1);
        let b: Vec<f64> = normals(300, 2, 2).iter().map(|v| v + 0.5).collect();
        let t = permutation_test(&a, &b, 2, &PermutationConfig::default()).unwrap();
        assert!(!t.pass);
        let c = normals(300, 2, 3);
        let t = permutation_test(&a, &c, 2, &PermutationConfig::default()).unwrap();
        assert!(t.pass, "{t:?}");
    }

    #[test]
    fn gaussian_surrogate_recovers_moments() {
        let n = 20_000;
        let x = normals(n, 2, 4);
        let m = sample_moments(&x, 2);
        let g = GaussianDensity::new(m.mean().to_vec(), m.covariance()).unwrap();
        for i in 0..2 {
            assert!(g.mean[i].abs() < 3.0 / (n as f64).sqrt());
            assert!((g.covariance[i * 2 + i] - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt());
        }
        let expected = 1.0 / (2.0 * std::f64::consts::PI);
        assert!((g.density(&g.mean.clone()) / expected - 1.0).abs() < 0.02);
    }

    #[test]
    fn gaussian_gradient_matches_finite_difference() {
        let g = GaussianDensity::new(vec![0.5, -1.0], vec![2.0, 0.3, 0.3, 1.0]).unwrap();
        let x = [0.9, -0.2];
        let grad = g.gradient(&x);
        let h = 1e-6;
        for i in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fd = (g.density(&xp) - g.density(&xm)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_variance_cloud_is_singular() {
        let r = GaussianDensity::new(vec![1.0], vec![0.0]);
        assert!(matches!(r, Err(Error::SingularCovariance { .. })));
    }

    #[test]
    fn kde_density_at_mean() {
        let n = 10_000;
        let x = normals(n, 1, 5);
        let kde = KdeDensity::new(x, 1, Bandwidth::Scott).unwrap();
        let truth = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((kde.density(&[0.0]) / truth - 1.0).abs() < 0.1);
    }

    #[test]
    fn kde_derivatives_match_finite_differences() {
        let x = normals(300, 2, 6);
        let kde = KdeDensity::new(x, 2, Bandwidth::Scott).unwrap();
        let p = [0.3, -0.4];
        let (_, grad, hess) = kde.evaluate(&p);
        let h = 1e-5;
        for i in 0..2 {
            let mut pp = p;
            let mut pm = p;
            pp[i] += h;
            pm[i] -= h;
            let (fp, gp, _) = kde.evaluate(&pp);
            let (fm, gm, _) = kde.evaluate(&pm);
            assert!(((fp - fm) / (2.0 * h) - grad[i]).abs() < 1e-6);
            for j in 0..2 {
                assert!(((gp[j] - gm[j]) / (2.0 * h) - hess[j * 2 + i]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn kde_of_repeated_point_concentrates() {
        let kde = KdeDensity::new(vec![2.0; 50], 1, Bandwidth::Scott).unwrap();
        assert!(kde.degenerate);
        assert!(kde.density(&[2.0]) > 1e6);
        assert_eq!(kde.density(&[2.1]), 0.0);
    }

    #[test]
    fn whole_space_box_contains_everything() {
        let b = BoxSet::whole_space(3);
        assert!(b.contains(&[1e300, -1e300, 0.0]));
    }

    #[test]
    fn averaged_mean_is_average_of_phase_means() {
        let clouds = vec![normals(100, 2, 7), normals(100, 2, 8).iter().map(|v| v + 3.0).collect()];
        let m = EmpiricalPeriodicMeasure::from_clouds(1.0, vec![0.0, 0.5], 2, 100, 1, clouds).unwrap();
        let avg = m.averaged();
        assert_eq!(avg.count, 200);
        for i in 0..2 {
            assert_eq!(avg.mean[i], m.mean(0)[i] / 2.0 + m.mean(1)[i] / 2.0);
        }
        let pooled = sample_moments(&[m.cloud(0), m.cloud(1)].concat(), 2);
        for i in 0..2 {
            assert!((pooled.mean()[i] - avg.mean[i]).abs() < 1e-12);
        }
    }
}
