//! Fixed-step Euler–Maruyama realization of the stochastic flow `φ(t, s, ω, x)`.
//!
//! Times live on the grid `t_k = k·dt`. Coefficients are evaluated at the
//! phase `k mod K` when the period is a whole number `K` of steps, which makes
//! the periodic-shift identity hold bit for bit.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{Observable, PeriodicSdeModel};
use crate::noise::{grid_index, IncrementSource, NoiseSpec};
use crate::stats::{map_chunks, Moments};

/// States with `|x| > DIVERGENCE_RADIUS` count as diverged.
pub const DIVERGENCE_RADIUS: f64 = 1e9;

/// Largest tolerated fraction of diverged ensemble members.
pub const MAX_DIVERGED_FRACTION: f64 = 1e-3;

/// Absolute time of a grid point and its phase in `[0, τ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTime {
    pub abs: f64,
    pub phase: f64,
}

/// Anything the integrator can step: a model, or a model plus a perturbation.
pub trait SdeSystem: Sync {
    fn dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn period(&self) -> f64;
    fn drift_at(&self, t: StepTime, x: &[f64], out: &mut [f64]);
    /// `out += σ(t, x)·dw`.
    fn diffuse_at(&self, t: StepTime, x: &[f64], dw: &[f64], out: &mut [f64]);
}

impl SdeSystem for PeriodicSdeModel {
    fn dim(&self) -> usize {
        PeriodicSdeModel::dim(self)
    }

    fn noise_dim(&self) -> usize {
        PeriodicSdeModel::noise_dim(self)
    }

    fn period(&self) -> f64 {
        PeriodicSdeModel::period(self)
    }

    #[inline]
    fn drift_at(&self, t: StepTime, x: &[f64], out: &mut [f64]) {
        self.drift_into(t.phase, x, out)
    }

    #[inline]
    fn diffuse_at(&self, t: StepTime, x: &[f64], dw: &[f64], out: &mut [f64]) {
        self.add_diffusion(t.phase, x, dw, out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    dt: f64,
    period: f64,
    steps_per_period: Option<i64>,
}

impl TimeGrid {
    pub fn new(dt: f64, period: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::param("dt", format!("must be > 0, got {dt}")));
        }
        if !(period > 0.0 && period.is_finite()) {
            return Err(Error::param("period", format!("must be > 0, got {period}")));
        }
        let q = period / dt;
        let k = q.round();
        let steps_per_period = ((q - k).abs() <= 1e-9 * q.max(1.0) && k >= 1.0).then_some(k as i64);
        Ok(Self {
            dt,
            period,
            steps_per_period,
        })
    }

    /// Grid with `steps` steps per period of `sys`.
    pub fn per_period<S: SdeSystem + ?Sized>(sys: &S, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::param("steps_per_period", "must be positive"));
        }
        let mut g = Self::new(sys.period() / steps as f64, sys.period())?;
        g.steps_per_period = Some(steps as i64);
        Ok(g)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn steps_per_period(&self) -> Option<i64> {
        self.steps_per_period
    }

    pub fn require_periodic(&self) -> Result<i64> {
        self.steps_per_period.ok_or_else(|| {
            Error::GridMisaligned(format!(
                "period {} is not a whole number of steps dt = {}",
                self.period, self.dt
            ))
        })
    }

    /// Grid index of `t`; errors when `t` is off the grid.
    pub fn index(&self, t: f64) -> Result<i64> {
        match self.steps_per_period {
            // Phase-aligned times are written as multiples of the period in
            // configs; resolve them against the exact period first.
            Some(k) => {
                let periods = t / self.period;
                let steps = periods * k as f64;
                let r = steps.round();
                if (steps - r).abs() <= 1e-6 {
                    Ok(r as i64)
                } else {
                    grid_index(t, self.dt)
                }
            }
            None => grid_index(t, self.dt),
        }
    }

    /// Nearest grid index.
    pub fn snap(&self, t: f64) -> i64 {
        (t / self.dt).round() as i64
    }

    #[inline]
    pub fn abs_time(&self, k: i64) -> f64 {
        match self.steps_per_period {
            Some(kp) => {
                let n = k.div_euclid(kp);
                let r = k.rem_euclid(kp);
                n as f64 * self.period + r as f64 * self.dt
            }
            None => k as f64 * self.dt,
        }
    }

    #[inline]
    pub fn time(&self, k: i64) -> StepTime {
        match self.steps_per_period {
            Some(kp) => {
                let n = k.div_euclid(kp);
                let phase = k.rem_euclid(kp) as f64 * self.dt;
                StepTime {
                    abs: n as f64 * self.period + phase,
                    phase,
                }
            }
            None => {
                let abs = k as f64 * self.dt;
                StepTime {
                    abs,
                    phase: abs - (abs / self.period).floor() * self.period,
                }
            }
        }
    }
}

/// Euler–Maruyama stepper with reusable scratch buffers.
pub struct Stepper<'a, S: ?Sized> {
    sys: &'a S,
    grid: TimeGrid,
    drift: Vec<f64>,
    next: Vec<f64>,
}

impl<'a, S: SdeSystem + ?Sized> Stepper<'a, S> {
    pub fn new(sys: &'a S, grid: TimeGrid) -> Self {
        let d = sys.dim();
        Self {
            sys,
            grid,
            drift: vec![0.0; d],
            next: vec![0.0; d],
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// `X_{k+1} = X_k + b(t_k, X_k) dt + σ(t_k, X_k) ΔW_k`.
    #[inline]
    pub fn step<N: IncrementSource>(&mut self, k: i64, x: &mut [f64], noise: &mut N) -> Result<()> {
        let dw = noise.increment(k)?;
        self.step_with(k, x, dw)
    }

    /// One step driven by an externally supplied increment.
    #[inline]
    pub fn step_with(&mut self, k: i64, x: &mut [f64], dw: &[f64]) -> Result<()> {
        let t = self.grid.time(k);
        let dt = self.grid.dt;
        self.sys.drift_at(t, x, &mut self.drift);
        for ((n, xi), bi) in self.next.iter_mut().zip(x.iter()).zip(&self.drift) {
            *n = xi + bi * dt;
        }
        self.sys.diffuse_at(t, x, dw, &mut self.next);
        let r2: f64 = self.next.iter().map(|v| v * v).sum();
        if !(r2 <= DIVERGENCE_RADIUS * DIVERGENCE_RADIUS) {
            return Err(Error::Divergence {
                step: (k + 1) as usize,
                time: self.grid.abs_time(k + 1),
            });
        }
        x.copy_from_slice(&self.next);
        Ok(())
    }

    /// Advances `x` from index `k0` to `k1`.
    pub fn advance<N: IncrementSource>(&mut self, k0: i64, k1: i64, x: &mut [f64], noise: &mut N) -> Result<()> {
        for k in k0..k1 {
            self.step(k, x, noise)?;
        }
        Ok(())
    }

    /// Like [`Stepper::advance`], calling `visit(k, x)` at every index in `k0..=k1`.
    pub fn advance_visit<N, F>(&mut self, k0: i64, k1: i64, x: &mut [f64], noise: &mut N, mut visit: F) -> Result<()>
    where
        N: IncrementSource,
        F: FnMut(i64, &[f64]),
    {
        visit(k0, x);
        for k in k0..k1 {
            self.step(k, x, noise)?;
            visit(k + 1, x);
        }
        Ok(())
    }

    /// Steps two states with the same increment.
    #[inline]
    pub fn step_pair<N: IncrementSource>(&mut self, k: i64, x: &mut [f64], y: &mut [f64], noise: &mut N) -> Result<()> {
        let dw = noise.increment(k)?;
        self.step_with(k, x, dw)?;
        self.step_with(k, y, dw)
    }

    /// Steps several states with the same increment.
    #[inline]
    pub fn step_many<N: IncrementSource>(&mut self, k: i64, xs: &mut [Vec<f64>], noise: &mut N) -> Result<()> {
        let dw = noise.increment(k)?;
        for x in xs.iter_mut() {
            self.step_with(k, x, dw)?;
        }
        Ok(())
    }
}

fn check_inputs<S: SdeSystem + ?Sized, N: IncrementSource>(sys: &S, grid: &TimeGrid, x0: &[f64], noise: &N) -> Result<()> {
    if x0.len() != sys.dim() {
        return Err(Error::DimensionMismatch {
            context: "initial state",
            expected: sys.dim(),
            got: x0.len(),
        });
    }
    if noise.noise_dim() != sys.noise_dim() {
        return Err(Error::DimensionMismatch {
            context: "noise dimension",
            expected: sys.noise_dim(),
            got: noise.noise_dim(),
        });
    }
    if (noise.dt() - grid.dt()).abs() > 1e-12 * grid.dt() {
        return Err(Error::GridMisaligned(format!(
            "noise dt {} differs from integration dt {}",
            noise.dt(),
            grid.dt()
        )));
    }
    Ok(())
}

fn ordered_indices(grid: &TimeGrid, times: &[f64]) -> Result<Vec<i64>> {
    let ks = times.iter().map(|&t| grid.index(t)).collect::<Result<Vec<_>>>()?;
    if ks.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::param("times", format!("must be nondecreasing, got {times:?}")));
    }
    Ok(ks)
}

/// `φ(t, s, ω, x0)`.
pub fn flow<S, N>(sys: &S, grid: &TimeGrid, s: f64, t: f64, x0: &[f64], noise: &N) -> Result<Vec<f64>>
where
    S: SdeSystem + ?Sized,
    N: IncrementSource,
{
    check_inputs(sys, grid, x0, noise)?;
    let ks = ordered_indices(grid, &[s, t])?;
    let mut x = x0.to_vec();
    let mut src = noise.clone();
    Stepper::new(sys, *grid).advance(ks[0], ks[1], &mut x, &mut src)?;
    Ok(x)
}

/// `(φ(t, s, x0), φ(t, u, φ(u, s, x0)))`; the two agree bit for bit.
pub fn flow_composition_check<S, N>(
    sys: &S,
    grid: &TimeGrid,
    s: f64,
    u: f64,
    t: f64,
    x0: &[f64],
    noise: &N,
) -> Result<(Vec<f64>, Vec<f64>)>
where
    S: SdeSystem + ?Sized,
    N: IncrementSource,
{
    ordered_indices(grid, &[s, u, t])?;
    let direct = flow(sys, grid, s, t, x0, noise)?;
    let mid = flow(sys, grid, s, u, x0, noise)?;
    let composed = flow(sys, grid, u, t, &mid, noise)?;
    Ok((direct, composed))
}

/// Largest deviation between `φ(r + τ, s + τ, ω, x0)` and `φ(r, s, θ_τ ω, x0)`
/// over every grid time `r ∈ [s, t]`.
pub fn periodic_flow_identity<S, N>(sys: &S, grid: &TimeGrid, s: f64, t: f64, x0: &[f64], noise: &N) -> Result<f64>
where
    S: SdeSystem + ?Sized,
    N: IncrementSource,
{
    check_inputs(sys, grid, x0, noise)?;
    let kp = grid.require_periodic()?;
    let ks = ordered_indices(grid, &[s, t])?;
    let mut plain = noise.clone();
    let mut shifted = noise.shifted(kp)?;
    let mut a = x0.to_vec();
    let mut b = x0.to_vec();
    let mut sa = Stepper::new(sys, *grid);
    let mut sb = Stepper::new(sys, *grid);
    let mut worst: f64 = 0.0;
    for k in ks[0]..ks[1] {
        sa.step(k + kp, &mut a, &mut plain)?;
        sb.step(k, &mut b, &mut shifted)?;
        for (p, q) in a.iter().zip(&b) {
            worst = worst.max((p - q).abs());
        }
    }
    Ok(worst)
}

/// Two trajectories driven by the same increments.
pub fn two_point_flow<S, N>(
    sys: &S,
    grid: &TimeGrid,
    s: f64,
    t: f64,
    x0: &[f64],
    y0: &[f64],
    noise: &N,
) -> Result<(Vec<f64>, Vec<f64>)>
where
    S: SdeSystem + ?Sized,
    N: IncrementSource,
{
    check_inputs(sys, grid, x0, noise)?;
    check_inputs(sys, grid, y0, noise)?;
    let ks = ordered_indices(grid, &[s, t])?;
    let mut src = noise.clone();
    let (mut x, mut y) = (x0.to_vec(), y0.to_vec());
    let mut stepper = Stepper::new(sys, *grid);
    for k in ks[0]..ks[1] {
        stepper.step_pair(k, &mut x, &mut y, &mut src)?;
    }
    Ok((x, y))
}

/// Initial states for ensemble members.
#[derive(Clone)]
pub enum InitialCondition {
    Point(Vec<f64>),
    /// Row-major `[rows × d]`; member `i` starts from row `i mod rows`.
    States { dim: usize, data: Arc<Vec<f64>> },
    Sampler(Arc<dyn Fn(usize) -> Vec<f64> + Send + Sync>),
}

impl std::fmt::Debug for InitialCondition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Point(x) => f.debug_tuple("Point").field(x).finish(),
            Self::States { dim, data } => write!(f, "States({} × {dim})", data.len() / dim.max(&1)),
            Self::Sampler(_) => f.write_str("Sampler"),
        }
    }
}

impl InitialCondition {
    pub fn states(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.is_empty() || data.len() % dim != 0 {
            return Err(Error::param("initial", "state table must be a nonempty [rows × d] array"));
        }
        Ok(Self::States {
            dim,
            data: Arc::new(data),
        })
    }

    pub fn state(&self, member: usize) -> Vec<f64> {
        match self {
            Self::Point(x) => x.clone(),
            Self::States { dim, data } => {
                let rows = data.len() / dim;
                let r = member % rows;
                data[r * dim..(r + 1) * dim].to_vec()
            }
            Self::Sampler(f) => f(member),
        }
    }
}

/// Successful member results in member order plus divergence bookkeeping.
#[derive(Debug, Clone)]
pub struct MemberResults<T> {
    pub items: Vec<(usize, T)>,
    pub n_diverged: usize,
    pub first_divergence: Option<f64>,
}

/// Runs `f` for every member in parallel. Diverged members are dropped; more
/// than [`MAX_DIVERGED_FRACTION`] of them aborts the run.
pub fn par_members<T, F>(n: usize, f: F) -> Result<MemberResults<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let chunks = map_chunks(n, |range| -> Result<(Vec<(usize, T)>, usize, Option<f64>)> {
        let mut items = Vec::with_capacity(range.len());
        let mut diverged = 0;
        let mut first: Option<f64> = None;
        for i in range {
            match f(i) {
                Ok(v) => items.push((i, v)),
                Err(Error::Divergence { time, .. }) => {
                    diverged += 1;
                    first = Some(first.map_or(time, |f| f.min(time)));
                }
                Err(e) => return Err(e),
            }
        }
        Ok((items, diverged, first))
    });
    let mut out = MemberResults {
        items: Vec::with_capacity(n),
        n_diverged: 0,
        first_divergence: None,
    };
    for c in chunks {
        let (items, diverged, first) = c?;
        out.items.extend(items);
        out.n_diverged += diverged;
        if let Some(t) = first {
            out.first_divergence = Some(out.first_divergence.map_or(t, |f: f64| f.min(t)));
        }
    }
    check_divergence(out.n_diverged, n, out.first_divergence)?;
    Ok(out)
}

pub(crate) fn check_divergence(diverged: usize, total: usize, first: Option<f64>) -> Result<()> {
    if diverged as f64 > MAX_DIVERGED_FRACTION * total as f64 {
        return Err(Error::EnsembleDivergence {
            diverged,
            total,
            time: first.unwrap_or(f64::NAN),
        });
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EnsembleConfig {
    pub s: f64,
    pub t: f64,
    pub n_paths: usize,
    /// Snapped to the grid; defaults to `[t]` when empty.
    pub checkpoints: Vec<f64>,
    pub observables: Vec<Observable>,
    pub keep_samples: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservableSeries {
    pub label: String,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EnsembleStats {
    pub times: Vec<f64>,
    pub n_paths: usize,
    pub n_diverged: usize,
    pub state: Vec<Moments>,
    pub observables: Vec<ObservableSeries>,
    /// Per checkpoint, row-major `[members × d]`.
    pub samples: Option<Vec<Vec<f64>>>,
}

impl EnsembleStats {
    pub fn mean(&self, checkpoint: usize) -> &[f64] {
        self.state[checkpoint].mean()
    }

    pub fn covariance(&self, checkpoint: usize) -> Vec<f64> {
        self.state[checkpoint].covariance()
    }

    /// Standard error of the mean of coordinate `i` at a checkpoint.
    pub fn stderr(&self, checkpoint: usize, i: usize) -> f64 {
        self.state[checkpoint].stderr(i)
    }
}

/// Monte Carlo transition evolution: member `i` uses noise stream `i` of `spec`.
pub fn ensemble_flow<S>(
    sys: &S,
    grid: &TimeGrid,
    initial: &InitialCondition,
    spec: &NoiseSpec,
    cfg: &EnsembleConfig,
) -> Result<EnsembleStats>
where
    S: SdeSystem + ?Sized,
{
    if cfg.n_paths < 2 {
        return Err(Error::param("n_paths", "ensemble needs at least 2 members"));
    }
    let d = sys.dim();
    let probe = spec.stream(0);
    check_inputs(sys, grid, &initial.state(0), &probe)?;
    let (k0, k1) = (grid.index(cfg.s)?, grid.index(cfg.t)?);
    if k1 < k0 {
        return Err(Error::param("t", "must not precede s"));
    }
    let requested = if cfg.checkpoints.is_empty() {
        vec![cfg.t]
    } else {
        cfg.checkpoints.clone()
    };
    let mut cks: Vec<i64> = requested.iter().map(|&t| grid.snap(t)).collect();
    cks.sort_unstable();
    if cks.first().is_some_and(|&k| k < k0) || cks.last().is_some_and(|&k| k > k1) {
        return Err(Error::param("checkpoints", "must lie inside [s, t]"));
    }
    let n_obs = cfg.observables.len();
    let n_ck = cks.len();

    struct Partial {
        state: Vec<Moments>,
        obs: Vec<Moments>,
        samples: Vec<Vec<f64>>,
        diverged: usize,
        first: Option<f64>,
    }

    let parts = map_chunks(cfg.n_paths, |range| -> Result<Partial> {
        let mut p = Partial {
            state: vec![Moments::new(d); n_ck],
            obs: vec![Moments::new(n_obs); n_ck],
            samples: vec![Vec::new(); if cfg.keep_samples { n_ck } else { 0 }],
            diverged: 0,
            first: None,
        };
        let mut stepper = Stepper::new(sys, *grid);
        let mut record = vec![0.0; n_ck * d];
        for i in range {
            let mut x = initial.state(i);
            let mut noise = spec.stream(i as u64);
            let mut k = k0;
            let mut outcome = Ok(());
            for (c, &kc) in cks.iter().enumerate() {
                outcome = stepper.advance(k, kc, &mut x, &mut noise);
                if outcome.is_err() {
                    break;
                }
                k = kc;
                record[c * d..(c + 1) * d].copy_from_slice(&x);
            }
            match outcome {
                Ok(()) => {}
                Err(Error::Divergence { time, .. }) => {
                    p.diverged += 1;
                    p.first = Some(p.first.map_or(time, |f| f.min(time)));
                    continue;
                }
                Err(e) => return Err(e),
            }
            let mut vals = vec![0.0; n_obs];
            for (c, &kc) in cks.iter().enumerate() {
                let xs = &record[c * d..(c + 1) * d];
                p.state[c].push(xs);
                let phase = grid.time(kc).phase;
                for (v, o) in vals.iter_mut().zip(&cfg.observables) {
                    *v = o.eval(phase, xs);
                }
                p.obs[c].push(&vals);
                if cfg.keep_samples {
                    p.samples[c].extend_from_slice(xs);
                }
            }
        }
        Ok(p)
    });

    let mut state = vec![Moments::new(d); n_ck];
    let mut obs = vec![Moments::new(n_obs); n_ck];
    let mut samples = vec![Vec::new(); if cfg.keep_samples { n_ck } else { 0 }];
    let mut diverged = 0;
    let mut first: Option<f64> = None;
    for part in parts {
        let p = part?;
        for c in 0..n_ck {
            state[c].merge(&p.state[c]);
            obs[c].merge(&p.obs[c]);
        }
        for (all, mine) in samples.iter_mut().zip(p.samples) {
            all.extend(mine);
        }
        diverged += p.diverged;
        if let Some(t) = p.first {
            first = Some(first.map_or(t, |f| f.min(t)));
        }
    }
    check_divergence(diverged, cfg.n_paths, first)?;
    let observables = cfg
        .observables
        .iter()
        .enumerate()
        .map(|(j, o)| ObservableSeries {
            label: o.label.clone(),
            mean: obs.iter().map(|m| m.mean()[j]).collect(),
            stderr: obs.iter().map(|m| m.stderr(j)).collect(),
        })
        .collect();
    Ok(EnsembleStats {
        times: cks.iter().map(|&k| grid.abs_time(k)).collect(),
        n_paths: cfg.n_paths - diverged,
        n_diverged: diverged,
        state,
        observables,
        samples: cfg.keep_samples.then_some(samples),
    })
}
