//! Pullback construction of the random periodic path `S(t, ω)` and the
//! two-point contraction diagnostics.
//!
//! `S(t_k, ω)` is approximated by `φ(t_k, −nτ, ω, ξ)`. The depth `n` doubles
//! until the mean-square change between depths `n` and `2n` drops below the
//! tolerance, a Cauchy test for the pullback limit.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrate::{par_members, SdeSystem, Stepper, TimeGrid};
use crate::noise::{IncrementSource, NoiseSpec, NoiseStream};
use crate::stats::{linear_fit, map_chunks, Moments};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PullbackConfig {
    pub n_max_periods: usize,
    /// Relative tolerance; the absolute threshold is `tol · scale²` with
    /// `scale²` the mean square norm of the cloud.
    pub tol: f64,
    pub n_realizations: usize,
    /// Number of equally spaced phases in `[0, τ)`.
    pub phases: usize,
}

impl Default for PullbackConfig {
    fn default() -> Self {
        Self {
            n_max_periods: 64,
            tol: 1e-6,
            n_realizations: 1000,
            phases: 8,
        }
    }
}

impl PullbackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_max_periods == 0 {
            return Err(Error::param("n_max_periods", "must be positive"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::param("tol", "must be > 0"));
        }
        if self.n_realizations < 2 {
            return Err(Error::param("n_realizations", "need at least 2"));
        }
        if self.phases == 0 {
            return Err(Error::param("phases", "must be positive"));
        }
        Ok(())
    }
}

/// Residual after each doubling: `(depth 2n, max over phases of E|X_2n − X_n|²,
/// absolute threshold)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualPoint {
    pub depth: usize,
    pub residual: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonConvergenceReport {
    pub n_max_periods: usize,
    pub tol: f64,
    pub curve: Vec<ResidualPoint>,
}

impl NonConvergenceReport {
    pub fn last_residual(&self) -> f64 {
        self.curve.last().map_or(f64::NAN, |p| p.residual)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomPeriodicPathEstimate {
    pub phases: Vec<f64>,
    pub dim: usize,
    pub n_realizations: usize,
    /// `[phase][realization][coordinate]`, flattened.
    pub states: Vec<f64>,
    pub n_periods: usize,
    /// Final `E|X_2n − X_n|²` per phase.
    pub residuals: Vec<f64>,
    /// Absolute convergence threshold.
    pub tol_abs: f64,
    pub curve: Vec<ResidualPoint>,
}

impl RandomPeriodicPathEstimate {
    pub fn state(&self, phase: usize, realization: usize) -> &[f64] {
        let off = (phase * self.n_realizations + realization) * self.dim;
        &self.states[off..off + self.dim]
    }

    /// Row-major `[realizations × d]` cloud at one phase.
    pub fn cloud(&self, phase: usize) -> &[f64] {
        let n = self.n_realizations * self.dim;
        &self.states[phase * n..(phase + 1) * n]
    }

    pub fn moments(&self, phase: usize) -> Moments {
        crate::stats::sample_moments(self.cloud(phase), self.dim)
    }

    pub fn write_phase_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "phase,realization")?;
        for i in 0..self.dim {
            write!(w, ",x{}", i + 1)?;
        }
        writeln!(w)?;
        for (k, t) in self.phases.iter().enumerate() {
            for r in 0..self.n_realizations {
                write!(w, "{t},{r}")?;
                for v in self.state(k, r) {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// Grid offsets of `phases` equally spaced phases.
/// Step offsets of `phases` equally spaced phases within one period.
pub fn phase_offsets(grid: &TimeGrid, phases: usize) -> Result<Vec<i64>> {
    let kp = grid.require_periodic()?;
    if phases == 0 || kp % phases as i64 != 0 {
        return Err(Error::GridMisaligned(format!(
            "{phases} phases do not divide the {kp} steps of one period"
        )));
    }
    let stride = kp / phases as i64;
    Ok((0..phases as i64).map(|k| k * stride).collect())
}

/// States at `base + offsets[k]` for a trajectory started from `x0` at `start`.
fn run_to_phases<S, N>(
    sys: &S,
    grid: &TimeGrid,
    start: i64,
    base: i64,
    offsets: &[i64],
    x0: &[f64],
    noise: &mut N,
) -> Result<Vec<f64>>
where
    S: SdeSystem + ?Sized,
    N: IncrementSource,
{
    let d = x0.len();
    let mut x = x0.to_vec();
    let mut out = Vec::with_capacity(offsets.len() * d);
    let mut stepper = Stepper::new(sys, *grid);
    let mut k = start;
    for &off in offsets {
        stepper.advance(k, base + off, &mut x, noise)?;
        k = base + off;
        out.extend_from_slice(&x);
    }
    Ok(out)
}

struct DepthRun {
    /// Per realization, phases × d; `None` for diverged members.
    states: Vec<Option<Vec<f64>>>,
}

fn pullback_depth<S, F>(sys: &S, grid: &TimeGrid, depth: usize, base: i64, offsets: &[i64], n: usize, x_init: &[f64], noise: F) -> Result<DepthRun>
where
    S: SdeSystem + ?Sized,
    F: Fn(usize) -> Result<NoiseStream> + Sync,
{
    let kp = grid.require_periodic()?;
    let start = base - depth as i64 * kp;
    let res = par_members(n, |i| {
        let mut src = noise(i)?;
        run_to_phases(sys, grid, start, base, offsets, x_init, &mut src)
    })?;
    let mut states = vec![None; n];
    for (i, s) in res.items {
        states[i] = Some(s);
    }
    Ok(DepthRun { states })
}

/// Per-phase mean of `|a − b|²` and the mean square norm of `b`, over
/// realizations present in both runs.
fn depth_residual(a: &DepthRun, b: &DepthRun, phases: usize, d: usize) -> (Vec<f64>, f64) {
    let mut res = vec![0.0; phases];
    let mut norm = 0.0;
    let mut count = 0usize;
    for (sa, sb) in a.states.iter().zip(&b.states) {
        let (Some(sa), Some(sb)) = (sa, sb) else { continue };
        count += 1;
        for k in 0..phases {
            let (xa, xb) = (&sa[k * d..(k + 1) * d], &sb[k * d..(k + 1) * d]);
            res[k] += xa.iter().zip(xb).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
            norm += xb.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let c = count.max(1) as f64;
    res.iter_mut().for_each(|r| *r /= c);
    (res, norm / (c * phases as f64))
}

fn pullback_with_noise<S, F>(
    sys: &S,
    grid: &TimeGrid,
    cfg: &PullbackConfig,
    x_init: &[f64],
    base: i64,
    noise: F,
) -> Result<RandomPeriodicPathEstimate>
where
    S: SdeSystem + ?Sized,
    F: Fn(usize) -> Result<NoiseStream> + Sync,
{
    cfg.validate()?;
    if x_init.len() != sys.dim() {
        return Err(Error::DimensionMismatch {
            context: "pullback initial state",
            expected: sys.dim(),
            got: x_init.len(),
        });
    }
    let d = sys.dim();
    let offsets = phase_offsets(grid, cfg.phases)?;
    let n = cfg.n_realizations;
    let mut depth = 1;
    let mut prev = pullback_depth(sys, grid, depth, base, &offsets, n, x_init, &noise)?;
    let mut curve = Vec::new();
    while depth * 2 <= cfg.n_max_periods {
        depth *= 2;
        let next = pullback_depth(sys, grid, depth, base, &offsets, n, x_init, &noise)?;
        let (res, norm) = depth_residual(&prev, &next, cfg.phases, d);
        let worst = res.iter().cloned().fold(0.0, f64::max);
        let threshold = cfg.tol * norm;
        curve.push(ResidualPoint {
            depth,
            residual: worst,
            threshold,
        });
        if worst < threshold {
            let mut states = Vec::with_capacity(cfg.phases * n * d);
            let alive: Vec<&Vec<f64>> = next.states.iter().flatten().collect();
            for k in 0..cfg.phases {
                for s in &alive {
                    states.extend_from_slice(&s[k * d..(k + 1) * d]);
                }
            }
            return Ok(RandomPeriodicPathEstimate {
                phases: offsets.iter().map(|&o| o as f64 * grid.dt()).collect(),
                dim: d,
                n_realizations: alive.len(),
                states,
                n_periods: depth,
                residuals: res,
                tol_abs: threshold,
                curve,
            });
        }
        prev = next;
    }
    Err(Error::NonConvergence(Box::new(NonConvergenceReport {
        n_max_periods: cfg.n_max_periods,
        tol: cfg.tol,
        curve,
    })))
}

/// Pullback estimate of `S(t_k, ω_i)` for phases `t_k = kτ/K` in `[0, τ)`,
/// realization `i` driven by noise stream `i` of `spec`.
pub fn pullback_path<S>(
    sys: &S,
    grid: &TimeGrid,
    cfg: &PullbackConfig,
    spec: &NoiseSpec,
    x_init: &[f64],
) -> Result<RandomPeriodicPathEstimate>
where
    S: SdeSystem + ?Sized,
{
    pullback_with_noise(sys, grid, cfg, x_init, 0, |i| Ok(spec.stream(i as u64)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeriodicityCheck {
    /// Per phase, mean over realizations of `|S(t_k + τ, ω) − S(t_k, θ_τ ω)|²`.
    pub residuals: Vec<f64>,
    pub max_residual: f64,
    /// `3 · tol_abs` of the estimate.
    pub threshold: f64,
    pub pass: bool,
}

/// Compares `S(t + τ, ω)` (pullback to time `t + τ` with the original noise)
/// against `S(t, θ_τ ω)` (the full pullback re-run on τ-shifted noise).
pub fn periodicity_identity_check<S>(
    estimate: &RandomPeriodicPathEstimate,
    sys: &S,
    grid: &TimeGrid,
    cfg: &PullbackConfig,
    spec: &NoiseSpec,
    x_init: &[f64],
) -> Result<PeriodicityCheck>
where
    S: SdeSystem + ?Sized,
{
    let kp = grid.require_periodic()?;
    let offsets = phase_offsets(grid, cfg.phases)?;
    let depth = estimate.n_periods;
    // S(t + τ, ω): same start −nτ, observed one period later.
    let later = pullback_depth(sys, grid, depth, kp, &offsets, cfg.n_realizations, x_init, |i| Ok(spec.stream(i as u64)))?;
    // S(t, θ_τ ω): the whole pullback on shifted noise.
    let shifted = pullback_with_noise(sys, grid, cfg, x_init, 0, |i| spec.stream(i as u64).shifted(kp))?;
    let d = sys.dim();
    let mut residuals = vec![0.0; cfg.phases];
    let alive: Vec<&Vec<f64>> = later.states.iter().flatten().collect();
    let n = alive.len().min(shifted.n_realizations);
    for k in 0..cfg.phases {
        let mut acc = 0.0;
        for (r, s) in alive.iter().take(n).enumerate() {
            let a = &s[k * d..(k + 1) * d];
            let b = shifted.state(k, r);
            acc += a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
        }
        residuals[k] = acc / n.max(1) as f64;
    }
    let max_residual = residuals.iter().cloned().fold(0.0, f64::max);
    let threshold = 3.0 * estimate.tol_abs;
    Ok(PeriodicityCheck {
        residuals,
        max_residual,
        threshold,
        pass: max_residual <= threshold,
    })
}

/// Mean-square distance between two estimates over all phases and
/// realizations.
pub fn estimate_distance(a: &RandomPeriodicPathEstimate, b: &RandomPeriodicPathEstimate) -> Result<f64> {
    if a.dim != b.dim || a.phases.len() != b.phases.len() || a.n_realizations != b.n_realizations {
        return Err(Error::Unsupported("estimates have different shapes".into()));
    }
    let total = a.states.iter().zip(&b.states).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    Ok(total / (a.phases.len() * a.n_realizations) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionCurve {
    pub p: f64,
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

impl ContractionCurve {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,mean_pth_moment,stderr")?;
        for ((t, m), s) in self.times.iter().zip(&self.mean).zip(&self.stderr) {
            writeln!(w, "{t},{m},{s}")?;
        }
        Ok(())
    }
}

/// `E|φ(t, 0, ξ) − φ(t, 0, η)|^p` under synchronous coupling, sampled every
/// `sample_every` time units up to `horizon`.
#[allow(clippy::too_many_arguments)]
pub fn two_point_contraction<S>(
    sys: &S,
    grid: &TimeGrid,
    xi: &[f64],
    eta: &[f64],
    p: f64,
    horizon: f64,
    sample_every: f64,
    n: usize,
    spec: &NoiseSpec,
) -> Result<ContractionCurve>
where
    S: SdeSystem + ?Sized,
{
    if !(p >= 1.0) {
        return Err(Error::param("p", format!("must be >= 1, got {p}")));
    }
    if n < 2 {
        return Err(Error::param("n_paths", "need at least 2"));
    }
    if xi.len() != sys.dim() || eta.len() != sys.dim() {
        return Err(Error::DimensionMismatch {
            context: "contraction initial states",
            expected: sys.dim(),
            got: xi.len().max(eta.len()),
        });
    }
    let k_end = grid.snap(horizon);
    let stride = grid.snap(sample_every).max(1);
    let samples: Vec<i64> = (0..=k_end / stride).map(|j| j * stride).collect();
    let m = samples.len();
    let parts = map_chunks(n, |range| -> Result<(Moments, usize, Option<f64>)> {
        let mut acc = Moments::new(m);
        let mut diverged = 0;
        let mut first = None;
        let mut stepper = Stepper::new(sys, *grid);
        let mut row = vec![0.0; m];
        for i in range {
            let mut noise = spec.stream(i as u64);
            let (mut x, mut y) = (xi.to_vec(), eta.to_vec());
            let mut k = 0;
            let mut ok = Ok(());
            for (j, &ks) in samples.iter().enumerate() {
                while k < ks {
                    ok = stepper.step_pair(k, &mut x, &mut y, &mut noise);
                    if ok.is_err() {
                        break;
                    }
                    k += 1;
                }
                if ok.is_err() {
                    break;
                }
                let r2: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
                row[j] = r2.powf(0.5 * p);
            }
            match ok {
                Ok(()) => acc.push(&row),
                Err(Error::Divergence { time, .. }) => {
                    diverged += 1;
                    first = Some(time);
                }
                Err(e) => return Err(e),
            }
        }
        Ok((acc, diverged, first))
    });
    let mut total = Moments::new(m);
    let mut diverged = 0;
    let mut first = None;
    for part in parts {
        let (acc, dv, f) = part?;
        total.merge(&acc);
        diverged += dv;
        first = first.or(f);
    }
    crate::integrate::check_divergence(diverged, n, first)?;
    Ok(ContractionCurve {
        p,
        times: samples.iter().map(|&k| grid.abs_time(k)).collect(),
        mean: total.mean().to_vec(),
        stderr: (0..m).map(|j| total.stderr(j)).collect(),
    })
}

/// Least-squares slope of `ln E|Δ|^p` against time over `[t_lo, t_hi]`.
pub fn contraction_rate(curve: &ContractionCurve, t_lo: f64, t_hi: f64) -> Result<f64> {
    let mut ts = Vec::new();
    let mut ys = Vec::new();
    for (&t, &v) in curve.times.iter().zip(&curve.mean) {
        if t < t_lo || t > t_hi {
            continue;
        }
        if !(v > 0.0) {
            return Err(Error::param("curve", format!("nonpositive value {v} at t = {t} inside the fit window")));
        }
        ts.push(t);
        ys.push(v.ln());
    }
    if ts.len() < 2 {
        return Err(Error::param("window", "fewer than two curve points inside the fit window"));
    }
    Ok(linear_fit(&ts, &ys).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{OuParams, PeriodicSdeModel};

    fn ou(sigma: f64) -> PeriodicSdeModel {
        PeriodicSdeModel::build_ou(OuParams::new(1.0, 1.0, 1.0, sigma)).unwrap()
    }

    #[test]
    fn deterministic_pullback_matches_periodic_solution() {
        let m = ou(0.0);
        let dt = 1e-3;
        let g = TimeGrid::new(dt, 1.0).unwrap();
        let cfg = PullbackConfig {
            n_realizations: 2,
            tol: 1e-10,
            ..Default::default()
        };
        let est = pullback_path(&m, &g, &cfg, &NoiseSpec::new(0, dt, 1), &[0.0]).unwrap();
        let p = m.ou_params().unwrap();
        for (k, &t) in est.phases.iter().enumerate() {
            assert!((est.state(k, 0)[0] - p.periodic_mean(t)).abs() < 5e-3);
        }
    }

    #[test]
    fn identical_starts_do_not_contract() {
        let m = ou(1.0);
        let g = TimeGrid::new(1e-2, 1.0).unwrap();
        let c = two_point_contraction(&m, &g, &[0.5], &[0.5], 2.0, 2.0, 0.5, 10, &NoiseSpec::new(1, 1e-2, 1)).unwrap();
        assert!(c.mean.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_curve_has_zero_rate() {
        let c = ContractionCurve {
            p: 2.0,
            times: vec![0.0, 1.0, 2.0],
            mean: vec![3.0; 3],
            stderr: vec![0.0; 3],
        };
        assert!(contraction_rate(&c, 0.0, 2.0).unwrap().abs() < 1e-14);
        let mut bad = c.clone();
        bad.mean[1] = 0.0;
        assert!(contraction_rate(&bad, 0.0, 2.0).is_err());
    }

    #[test]
    fn phases_must_divide_period() {
        let g = TimeGrid::new(0.1, 1.0).unwrap();
        assert!(phase_offsets(&g, 3).is_err());
        assert_eq!(phase_offsets(&g, 5).unwrap(), vec![0, 2, 4, 6, 8]);
    }

    #[test]
    fn phase_csv_has_header_and_rows() {
        let est = RandomPeriodicPathEstimate {
            phases: vec![0.0, 0.5],
            dim: 2,
            n_realizations: 1,
            states: vec![1.0, 2.0, 3.0, 4.0],
            n_periods: 2,
            residuals: vec![0.0, 0.0],
            tol_abs: 1.0,
            curve: vec![],
        };
        let mut buf = Vec::new();
        est.write_phase_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "phase,realization,x1,x2\n0,0,1,2\n0.5,0,3,4\n");
    }
}
