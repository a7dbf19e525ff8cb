//! Dissipativity certificates and moment bounds.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrate::{par_members, InitialCondition, Stepper, TimeGrid};
use crate::model::{LorenzParams, PeriodicSdeModel};
use crate::noise::NoiseSpec;

/// Points per period used for sup/inf of periodic envelope functions.
pub const ENVELOPE_SAMPLES: usize = 1024;

/// A nonnegative constant or a τ-periodic function given by uniform samples
/// over one period (linear interpolation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnvelopeFn {
    Constant(f64),
    Periodic { period: f64, values: Vec<f64> },
}

impl EnvelopeFn {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Self::Constant(c) => *c,
            Self::Periodic { period, values } => {
                let n = values.len();
                let s = (t / period).rem_euclid(1.0) * n as f64;
                let i = (s.floor() as usize).min(n - 1);
                let w = s - i as f64;
                values[i] * (1.0 - w) + values[(i + 1) % n] * w
            }
        }
    }

    fn validate(&self, field: &'static str) -> Result<()> {
        match self {
            Self::Constant(c) if !c.is_finite() => Err(Error::param(field, "must be finite")),
            Self::Periodic { period, values } if !(*period > 0.0) || values.is_empty() => {
                Err(Error::param(field, "periodic envelope needs a positive period and samples"))
            }
            Self::Periodic { values, .. } if values.iter().any(|v| !v.is_finite()) => {
                Err(Error::param(field, "must be finite"))
            }
            _ => Ok(()),
        }
    }
}

/// `L_b1, L_b2, L_σ` of `⟨b, x⟩ ≤ L_b1 − L_b2|x|²`, `‖σ‖²_HS ≤ L_σ(1 + |x|²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthEnvelope {
    pub l_b1: EnvelopeFn,
    pub l_b2: EnvelopeFn,
    pub l_sigma: EnvelopeFn,
}

impl GrowthEnvelope {
    pub fn constant(l_b1: f64, l_b2: f64, l_sigma: f64) -> Self {
        Self {
            l_b1: EnvelopeFn::Constant(l_b1),
            l_b2: EnvelopeFn::Constant(l_b2),
            l_sigma: EnvelopeFn::Constant(l_sigma),
        }
    }

    /// Envelope of `−a x + A sin(ωt)` with noise `σ`: `(A²/2a, a/2, σ²)`.
    pub fn ou(a: f64, forcing_amp: f64, sigma: f64) -> Self {
        Self::constant(forcing_amp * forcing_amp / (2.0 * a), a / 2.0, sigma * sigma)
    }

    pub fn validate(&self) -> Result<()> {
        self.l_b1.validate("l_b1")?;
        self.l_b2.validate("l_b2")?;
        self.l_sigma.validate("l_sigma")?;
        let (lo1, _) = self.range(|t| self.l_b1.eval(t));
        let (lo2, _) = self.range(|t| self.l_b2.eval(t));
        let (los, _) = self.range(|t| self.l_sigma.eval(t));
        if lo1 < 0.0 || lo2 < 0.0 || los < 0.0 {
            return Err(Error::param("envelope", "all envelope values must be nonnegative"));
        }
        Ok(())
    }

    fn period(&self) -> f64 {
        [&self.l_b1, &self.l_b2, &self.l_sigma]
            .iter()
            .find_map(|f| match f {
                EnvelopeFn::Periodic { period, .. } => Some(*period),
                EnvelopeFn::Constant(_) => None,
            })
            .unwrap_or(1.0)
    }

    /// `(inf, sup)` of `f` over one period by dense sampling.
    pub fn range(&self, f: impl Fn(f64) -> f64) -> (f64, f64) {
        let tau = self.period();
        (0..ENVELOPE_SAMPLES)
            .map(|i| f(tau * i as f64 / ENVELOPE_SAMPLES as f64))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    }

    fn sup(&self, f: impl Fn(f64, f64, f64) -> f64) -> f64 {
        self.range(|t| f(self.l_b1.eval(t), self.l_b2.eval(t), self.l_sigma.eval(t))).1
    }

    fn inf(&self, f: impl Fn(f64, f64, f64) -> f64) -> f64 {
        self.range(|t| f(self.l_b1.eval(t), self.l_b2.eval(t), self.l_sigma.eval(t))).0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentCoefficients {
    /// Requested moment order.
    pub p: f64,
    /// Order actually certified (`2p` for `1 < p < 2`).
    pub p_effective: f64,
    pub a_p: f64,
    pub b_p: f64,
    /// `a_p / b_p`, infinite without a certificate.
    pub bound: f64,
    pub pass: bool,
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        f64::INFINITY
    }
}

/// Generic `𝔞_p`, `𝔟_p` of the `p`-th moment inequality `L|x|^p ≤ 𝔞_p − 𝔟_p|x|^p`.
pub fn coeffs_ap_bp(env: &GrowthEnvelope, p: f64) -> Result<MomentCoefficients> {
    env.validate()?;
    let pe = if p >= 2.0 {
        p
    } else if p > 1.0 {
        2.0 * p
    } else {
        return Err(Error::param("p", format!("must exceed 1, got {p}")));
    };
    let c = 2f64.powf(pe / 2.0 - 1.0);
    let a_p = pe * c * env.sup(|l1, _, ls| l1 + 0.5 * ls * (pe - 1.0));
    let b_p = pe * env.inf(|l1, l2, ls| l2 - c * l1 - 0.5 * (c + 1.0) * ls * (pe - 1.0));
    Ok(MomentCoefficients {
        p,
        p_effective: pe,
        a_p,
        b_p,
        bound: ratio(a_p, b_p),
        pass: b_p > 0.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SharpBounds {
    pub a2: f64,
    pub b2: f64,
    pub bound2: f64,
    /// κ used for `ã₃`, `b̃₃`: the supplied one, else the true minimizer.
    pub kappa: f64,
    pub a3: f64,
    pub b3: f64,
    pub bound3: f64,
    /// Minimizer of `ã₃/b̃₃`, `κ² = 4c/(9e)` with `c = sup(L_b1 + L_σ)`,
    /// `e = inf(L_b2 − L_σ)`.
    pub optimal_kappa: Option<f64>,
    /// `min_κ ã₃/b̃₃ = (c/e)^{3/2}`.
    pub min_ratio: Option<f64>,
    /// Closed form `κ² = 12c/e` as commonly quoted for this bound.
    pub stated_kappa: Option<f64>,
    /// Closed form `√27 (c/e)^{3/2}` as commonly quoted for this bound.
    pub stated_min_ratio: Option<f64>,
    /// `ã₃/b̃₃` evaluated at `stated_kappa`.
    pub ratio_at_stated_kappa: Option<f64>,
    pub note: Option<String>,
}

fn sharp3(env: &GrowthEnvelope, kappa: f64) -> (f64, f64) {
    let a3 = 3.0 * kappa * env.sup(|l1, _, ls| l1 + ls);
    let b3 = 3.0 * env.inf(|l1, l2, ls| l2 - ls - 4.0 / (27.0 * kappa * kappa) * (l1 + ls));
    (a3, b3)
}

/// Sharper second and third moment certificates.
pub fn sharp_bounds(env: &GrowthEnvelope, kappa: Option<f64>) -> Result<SharpBounds> {
    env.validate()?;
    if let Some(k) = kappa {
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::param("kappa", format!("must be > 0, got {k}")));
        }
    }
    let a2 = 2.0 * env.sup(|l1, _, ls| l1 + 0.5 * ls);
    let b2 = 2.0 * env.inf(|_, l2, ls| l2 - 0.5 * ls);
    let c = env.sup(|l1, _, ls| l1 + ls);
    let e = env.inf(|_, l2, ls| l2 - ls);
    let (optimal_kappa, min_ratio, stated_kappa, stated_min_ratio, note) = if e > 0.0 {
        let q = c / e;
        (
            Some((4.0 * q / 9.0).sqrt()),
            Some(q.powf(1.5)),
            Some((12.0 * q).sqrt()),
            Some(27f64.sqrt() * q.powf(1.5)),
            None,
        )
    } else {
        (None, None, None, None, Some("L_b2 <= L_sigma: optimal-kappa branch unavailable".to_string()))
    };
    let ratio_at_stated_kappa = stated_kappa.map(|k| {
        let (a, b) = sharp3(env, k);
        ratio(a, b)
    });
    let k = kappa.or(optimal_kappa).unwrap_or(1.0);
    let (a3, b3) = sharp3(env, k);
    Ok(SharpBounds {
        a2,
        b2,
        bound2: ratio(a2, b2),
        kappa: k,
        a3,
        b3,
        bound3: ratio(a3, b3),
        optimal_kappa,
        min_ratio,
        stated_kappa,
        stated_min_ratio,
        ratio_at_stated_kappa,
        note,
    })
}

/// `ã₂/b̃₂ ≤ c/e ≤ (min ã₃/b̃₃)^{2/3}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JensenChain {
    pub sharp2: f64,
    pub middle: f64,
    pub sharp3: f64,
    pub stated_sharp3: f64,
    pub holds: bool,
}

pub fn jensen_chain(env: &GrowthEnvelope) -> Result<JensenChain> {
    let s = sharp_bounds(env, None)?;
    let (Some(min), Some(stated)) = (s.min_ratio, s.stated_min_ratio) else {
        return Err(Error::param("envelope", "Jensen chain needs L_b2 > L_sigma"));
    };
    let middle = env.sup(|l1, _, ls| l1 + ls) / env.inf(|_, l2, ls| l2 - ls);
    let sharp3 = min.powf(2.0 / 3.0);
    let tol = 1e-12 * middle.abs().max(1.0);
    Ok(JensenChain {
        sharp2: s.bound2,
        middle,
        sharp3,
        stated_sharp3: stated.powf(2.0 / 3.0),
        holds: s.bound2 <= middle + tol && middle <= sharp3 + tol,
    })
}

/// Gronwall bound `e^{−b t} m₀ + (a/b)(1 − e^{−b t})` on `E|X_t|^p`.
pub fn moment_bound_curve(a_p: f64, b_p: f64, initial_moment: f64, times: &[f64]) -> Result<Vec<f64>> {
    if !(b_p > 0.0) {
        return Err(Error::param("b_p", format!("moment bound needs b_p > 0, got {b_p}")));
    }
    Ok(times
        .iter()
        .map(|&t| {
            let e = (-b_p * t).exp();
            e * initial_moment + a_p / b_p * (1.0 - e)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LorenzEnvelope {
    pub envelope: GrowthEnvelope,
    pub kappa1: f64,
    pub kappa3: f64,
    pub f1_bar: f64,
    pub c_a: f64,
    pub c_bar: f64,
    /// `C_A − σ̄/2 − C̄((L_b1 + L_σ)/(L_b2 − L_σ))^{1/2}`.
    pub constraint: f64,
    pub constraint_pass: bool,
}

/// Default for the heuristic constant `C̄` of the two-point constraint.
pub fn default_c_bar() -> f64 {
    27f64.powf(1.0 / 6.0)
}

/// Envelope constants of the periodically forced stochastic Lorenz model.
pub fn lorenz_envelope(p: &LorenzParams, kappa1: f64, kappa3: f64, c_bar: Option<f64>) -> Result<LorenzEnvelope> {
    p.validate()?;
    if !(kappa1 > 0.0 && kappa3 > 0.0) {
        return Err(Error::param("kappa", "kappa1 and kappa3 must be positive"));
    }
    let f1_bar = p.f_bar.abs() * (1.0 + p.delta_bar.abs());
    let g = p.gamma_bar * (p.rho_bar + p.alpha_bar) / (p.beta_bar * p.beta_bar);
    let l_b1 = kappa1 * f1_bar + kappa3 * g;
    let l_b2 = p
        .beta_bar
        .min(p.alpha_bar * (1.0 - f1_bar / (4.0 * p.alpha_bar * kappa1)))
        .min(p.gamma_bar * (1.0 - (p.rho_bar + p.alpha_bar) / (4.0 * p.beta_bar * p.beta_bar * kappa3)));
    if !(l_b2 > 0.0) {
        return Err(Error::param(
            "kappa",
            format!("L_b2 = {l_b2} <= 0 for kappa1 = {kappa1}, kappa3 = {kappa3}; increase the kappas"),
        ));
    }
    let l_sigma = p.sigma_bar.abs();
    let c_bar = c_bar.unwrap_or_else(default_c_bar);
    let c_a = p.coercivity();
    let constraint = if l_b2 > l_sigma {
        c_a - 0.5 * l_sigma - c_bar * ((l_b1 + l_sigma) / (l_b2 - l_sigma)).sqrt()
    } else {
        f64::NEG_INFINITY
    };
    Ok(LorenzEnvelope {
        envelope: GrowthEnvelope::constant(l_b1, l_b2, l_sigma),
        kappa1,
        kappa3,
        f1_bar,
        c_a,
        c_bar,
        constraint,
        constraint_pass: constraint > 0.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub t: f64,
    pub x: Vec<f64>,
    /// `"drift"` or `"diffusion"`.
    pub kind: &'static str,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleGrid {
    pub times_per_period: usize,
    pub radius_max: f64,
    pub radii: usize,
    pub directions: usize,
    pub seed: u64,
}

impl Default for SampleGrid {
    fn default() -> Self {
        Self {
            times_per_period: 16,
            radius_max: 1e3,
            radii: 40,
            directions: 64,
            seed: 7,
        }
    }
}

impl SampleGrid {
    /// Origin, coordinate axes and random unit directions swept over radii
    /// `r_max · 10^{-6 + 6i/(n−1)}`.
    pub fn points(&self, dim: usize) -> Vec<Vec<f64>> {
        let mut dirs: Vec<Vec<f64>> = Vec::new();
        for i in 0..dim {
            for s in [1.0, -1.0] {
                let mut e = vec![0.0; dim];
                e[i] = s;
                dirs.push(e);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        for _ in 0..self.directions {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 0.0 {
                dirs.push(v.iter().map(|a| a / n).collect());
            }
        }
        let mut pts = vec![vec![0.0; dim]];
        let nr = self.radii.max(2);
        for i in 0..nr {
            let r = self.radius_max * 10f64.powf(-6.0 + 6.0 * i as f64 / (nr - 1) as f64);
            for d in &dirs {
                pts.push(d.iter().map(|a| a * r).collect());
            }
        }
        pts
    }

    pub fn times(&self, period: f64) -> Vec<f64> {
        let n = self.times_per_period.max(1);
        (0..n).map(|i| period * i as f64 / n as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DissipativeVerification {
    pub checked: usize,
    pub n_violations: usize,
    /// First violations, at most [`MAX_LISTED`].
    pub violations: Vec<Violation>,
    pub pass: bool,
}

pub const MAX_LISTED: usize = 100;

fn exceeds(lhs: f64, rhs: f64) -> bool {
    lhs - rhs > 1e-9 * lhs.abs().max(rhs.abs()).max(1.0)
}

/// Checks both growth inequalities of the envelope on the grid.
pub fn verify_dissipative(
    model: &PeriodicSdeModel,
    env: &GrowthEnvelope,
    grid: &SampleGrid,
) -> Result<DissipativeVerification> {
    env.validate()?;
    let pts = grid.points(model.dim());
    let mut out = DissipativeVerification {
        checked: 0,
        n_violations: 0,
        violations: Vec::new(),
        pass: true,
    };
    let mut record = |v: Violation| {
        if out.violations.len() < MAX_LISTED {
            out.violations.push(v);
        }
        out.n_violations += 1;
    };
    for t in grid.times(model.period()) {
        let (l1, l2, ls) = (env.l_b1.eval(t), env.l_b2.eval(t), env.l_sigma.eval(t));
        for x in &pts {
            let r2: f64 = x.iter().map(|a| a * a).sum();
            let b = model.drift(t, x);
            let lhs: f64 = b.iter().zip(x).map(|(a, c)| a * c).sum();
            let rhs = l1 - l2 * r2;
            if exceeds(lhs, rhs) {
                record(Violation {
                    t,
                    x: x.clone(),
                    kind: "drift",
                    lhs,
                    rhs,
                });
            }
            let hs = model.diffusion_hs2(t, x);
            let rhs = ls * (1.0 + r2);
            if exceeds(hs, rhs) {
                record(Violation {
                    t,
                    x: x.clone(),
                    kind: "diffusion",
                    lhs: hs,
                    rhs,
                });
            }
        }
        out.checked += pts.len();
    }
    out.pass = out.n_violations == 0;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HasminskiiReport {
    pub p: f64,
    pub growth: DissipativeVerification,
    /// Period average of `C(t, p) = L_b + ½(p − 1)L_σ`.
    pub mean_c: f64,
    /// `max_{t ≤ horizon} ∫₀ᵗ C(u, p) du`.
    pub max_integral: f64,
    /// `exp(∫C)` stays bounded as the horizon grows (no secular growth).
    pub bounded: bool,
    pub pass: bool,
}

/// Linear-growth condition with `L_b` and boundedness of `exp(∫C(u, p)du)`.
pub fn hasminskii_check(
    model: &PeriodicSdeModel,
    l_b: &EnvelopeFn,
    l_sigma: &EnvelopeFn,
    p: f64,
    horizon: f64,
    grid: &SampleGrid,
) -> Result<HasminskiiReport> {
    if !(p > 1.0) {
        return Err(Error::param("p", "must exceed 1"));
    }
    let pts = grid.points(model.dim());
    let mut growth = DissipativeVerification {
        checked: 0,
        n_violations: 0,
        violations: Vec::new(),
        pass: true,
    };
    for t in grid.times(model.period()) {
        let (lb, ls) = (l_b.eval(t), l_sigma.eval(t));
        for x in &pts {
            let r2: f64 = x.iter().map(|a| a * a).sum();
            let lhs: f64 = model.drift(t, x).iter().zip(x).map(|(a, c)| a * c).sum();
            let hs = model.diffusion_hs2(t, x);
            for (kind, lhs, rhs) in [("drift", lhs, lb * (1.0 + r2)), ("diffusion", hs, ls * (1.0 + r2))] {
                if exceeds(lhs, rhs) {
                    growth.n_violations += 1;
                    if growth.violations.len() < MAX_LISTED {
                        growth.violations.push(Violation {
                            t,
                            x: x.clone(),
                            kind,
                            lhs,
                            rhs,
                        });
                    }
                }
            }
        }
        growth.checked += pts.len();
    }
    growth.pass = growth.n_violations == 0;
    let c = |t: f64| l_b.eval(t) + 0.5 * (p - 1.0) * l_sigma.eval(t);
    let tau = model.period();
    let n = ENVELOPE_SAMPLES;
    let h = tau / n as f64;
    let mean_c = (0..n).map(|i| c((i as f64 + 0.5) * h)).sum::<f64>() / n as f64;
    let steps = (horizon / h).ceil() as usize;
    let (mut acc, mut max_integral) = (0.0f64, 0.0f64);
    for i in 0..steps {
        acc += c((i as f64 + 0.5) * h) * h;
        max_integral = max_integral.max(acc);
    }
    let bounded = mean_c <= 0.0 && max_integral.is_finite();
    Ok(HasminskiiReport {
        p,
        pass: growth.pass && bounded,
        growth,
        mean_c,
        max_integral,
        bounded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentComparison {
    pub p: f64,
    pub a: f64,
    pub b: f64,
    /// Which certificate produced `(a, b)`.
    pub certificate: &'static str,
    pub times: Vec<f64>,
    pub simulated: Vec<f64>,
    pub stderr: Vec<f64>,
    pub bound: Vec<f64>,
    /// Checkpoints where simulated exceeds bound + 3·stderr.
    pub violations: Vec<usize>,
    pub pass: bool,
}

/// Tightest available `(a, b, name)` for the `p`-th moment.
pub fn best_certificate(env: &GrowthEnvelope, p: f64) -> Result<(f64, f64, &'static str)> {
    let g = coeffs_ap_bp(env, p)?;
    let mut best = (g.a_p, g.b_p, "generic", g.bound);
    if p == 2.0 || p == 3.0 {
        let s = sharp_bounds(env, None)?;
        let (a, b, r) = if p == 2.0 { (s.a2, s.b2, s.bound2) } else { (s.a3, s.b3, s.bound3) };
        if r < best.3 {
            best = (a, b, "sharp", r);
        }
    }
    if !(best.1 > 0.0) || g.p_effective != p && best.2 == "generic" {
        return Err(Error::param("b_p", format!("no moment certificate for p = {p}")));
    }
    Ok((best.0, best.1, best.2))
}

/// Simulated `E|X_t|^p` against the Gronwall bound from the best certificate.
#[allow(clippy::too_many_arguments)]
pub fn simulated_moment_vs_bound(
    model: &PeriodicSdeModel,
    env: &GrowthEnvelope,
    p: f64,
    grid: &TimeGrid,
    horizon: f64,
    checkpoints: usize,
    n_paths: usize,
    initial: &InitialCondition,
    spec: &NoiseSpec,
) -> Result<MomentComparison> {
    let (a, b, certificate) = best_certificate(env, p)?;
    let k_end = grid.snap(horizon);
    let ck: Vec<i64> = (0..=checkpoints).map(|i| k_end * i as i64 / checkpoints.max(1) as i64).collect();
    let times: Vec<f64> = ck.iter().map(|&k| grid.abs_time(k)).collect();
    let res = par_members(n_paths, |i| {
        let mut x = initial.state(i);
        let mut noise = spec.stream(i as u64);
        let mut st = Stepper::new(model, *grid);
        let mut out = Vec::with_capacity(ck.len());
        let mut k = 0;
        for &c in &ck {
            st.advance(k, c, &mut x, &mut noise)?;
            k = c;
            out.push(x.iter().map(|v| v * v).sum::<f64>().sqrt().powf(p));
        }
        Ok(out)
    })?;
    let n = res.items.len() as f64;
    let mut simulated = vec![0.0; ck.len()];
    let mut sq = vec![0.0; ck.len()];
    for (_, v) in &res.items {
        for (j, m) in v.iter().enumerate() {
            simulated[j] += m / n;
            sq[j] += m * m / n;
        }
    }
    let stderr: Vec<f64> = simulated
        .iter()
        .zip(&sq)
        .map(|(m, s)| ((s - m * m).max(0.0) * n / (n - 1.0).max(1.0) / n).sqrt())
        .collect();
    let m0 = simulated[0];
    let bound = moment_bound_curve(a, b, m0, &times)?;
    let violations: Vec<usize> = (0..ck.len()).filter(|&j| simulated[j] > bound[j] + 3.0 * stderr[j]).collect();
    Ok(MomentComparison {
        p,
        a,
        b,
        certificate,
        times,
        pass: violations.is_empty(),
        simulated,
        stderr,
        bound,
        violations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpanRank {
    pub ranks: Vec<usize>,
    pub min_rank: usize,
    /// Indices of points with rank below `d`.
    pub deficient: Vec<usize>,
}

/// Rank of `span{σ_k(t, x)}` at each `(t, x)`.
pub fn diffusion_span_rank(model: &PeriodicSdeModel, points: &[(f64, Vec<f64>)]) -> SpanRank {
    let (d, m) = (model.dim(), model.noise_dim());
    let ranks: Vec<usize> = points
        .iter()
        .map(|(t, x)| {
            if m == 0 {
                return 0;
            }
            let s = DMatrix::from_row_slice(d, m, &model.diffusion(*t, x));
            let scale = s.amax().max(f64::MIN_POSITIVE);
            s.rank(1e-10 * scale)
        })
        .collect();
    let deficient = (0..ranks.len()).filter(|&i| ranks[i] < d).collect();
    SpanRank {
        min_rank: ranks.iter().copied().min().unwrap_or(0),
        ranks,
        deficient,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{OuParams, PolyTerm, TimeMode};

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn generic_coefficients() {
        let c = coeffs_ap_bp(&GrowthEnvelope::constant(1.0, 3.0, 1.0), 2.0).unwrap();
        assert!(rel(c.a_p, 3.0) < 1e-12 && rel(c.b_p, 2.0) < 1e-12 && rel(c.bound, 1.5) < 1e-12);
        let c = coeffs_ap_bp(&GrowthEnvelope::constant(0.0, 2.0, 0.0), 4.0).unwrap();
        assert_eq!((c.a_p, c.b_p, c.bound), (0.0, 8.0, 0.0));
        let c = coeffs_ap_bp(&GrowthEnvelope::constant(1.0, 1.0, 1.0), 2.0).unwrap();
        assert_eq!(c.b_p, -2.0);
        assert!(!c.pass && c.bound.is_infinite());
    }

    #[test]
    fn small_p_routes_through_double() {
        let env = GrowthEnvelope::constant(1.0, 30.0, 1.0);
        let c = coeffs_ap_bp(&env, 1.5).unwrap();
        let d = coeffs_ap_bp(&env, 3.0).unwrap();
        assert_eq!(c.p_effective, 3.0);
        assert_eq!((c.a_p, c.b_p), (d.a_p, d.b_p));
        assert!(coeffs_ap_bp(&env, 1.0).is_err());
    }

    #[test]
    fn sharp_values() {
        let s = sharp_bounds(&GrowthEnvelope::constant(1.0, 3.0, 1.0), None).unwrap();
        assert!(rel(s.a2, 3.0) < 1e-12 && rel(s.b2, 5.0) < 1e-12 && rel(s.bound2, 0.6) < 1e-12);
        assert!(rel(s.stated_kappa.unwrap(), 12f64.sqrt()) < 1e-12);
        assert!(rel(s.stated_min_ratio.unwrap(), 27f64.sqrt()) < 1e-12);
        assert!(rel(s.min_ratio.unwrap(), 1.0) < 1e-12);
        assert!(rel(s.bound3, 1.0) < 1e-12);
    }

    #[test]
    fn optimal_kappa_minimizes_ratio() {
        let env = GrowthEnvelope::constant(0.7, 4.0, 0.3);
        let s = sharp_bounds(&env, None).unwrap();
        let k0 = s.optimal_kappa.unwrap();
        for f in [0.5, 0.9, 0.99, 1.01, 1.1, 2.0, 5.0] {
            let t = sharp_bounds(&env, Some(k0 * f)).unwrap();
            assert!(t.bound3 >= s.bound3);
        }
        let at_stated = sharp_bounds(&env, s.stated_kappa).unwrap();
        assert!(rel(at_stated.bound3, s.ratio_at_stated_kappa.unwrap()) < 1e-12);
    }

    #[test]
    fn unavailable_optimal_branch_is_reported() {
        let s = sharp_bounds(&GrowthEnvelope::constant(1.0, 1.0, 2.0), None).unwrap();
        assert!(s.optimal_kappa.is_none() && s.note.is_some());
    }

    #[test]
    fn jensen_chain_holds() {
        for (a, b, c) in [(1.0, 3.0, 1.0), (0.2, 5.0, 0.5), (3.0, 4.0, 0.0)] {
            let j = jensen_chain(&GrowthEnvelope::constant(a, b, c)).unwrap();
            assert!(j.holds, "{j:?}");
            assert!(j.middle <= j.stated_sharp3);
        }
    }

    #[test]
    fn sharp_never_worse_than_generic() {
        for (a, b, c) in [(1.0, 3.0, 1.0), (0.5, 10.0, 0.1), (2.0, 7.0, 1.5)] {
            let env = GrowthEnvelope::constant(a, b, c);
            let g = coeffs_ap_bp(&env, 2.0).unwrap();
            let s = sharp_bounds(&env, None).unwrap();
            assert!(s.b2 >= g.b_p);
            if g.pass {
                assert!(s.bound2 <= g.bound);
            }
        }
    }

    #[test]
    fn bound_curve() {
        let v = moment_bound_curve(3.0, 2.0, 0.0, &[0.0, 1.0, 1e3]).unwrap();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 1.5 * (1.0 - (-2.0f64).exp())).abs() < 1e-15);
        assert!((v[2] - 1.5).abs() < 1e-15);
        let v = moment_bound_curve(3.0, 2.0, 7.0, &[0.0]).unwrap();
        assert_eq!(v[0], 7.0);
        assert!(moment_bound_curve(1.0, 0.0, 0.0, &[1.0]).is_err());
    }

    #[test]
    fn lorenz_regime_one_envelope() {
        let e = lorenz_envelope(&LorenzParams::regime_one(), 25.0, 1.0, None).unwrap();
        let l_b1 = 25.0 * 190.0 + 7.0 * 17.3 / 676.0;
        assert!(rel(e.f1_bar, 190.0) < 1e-12);
        match (&e.envelope.l_b1, &e.envelope.l_b2) {
            (EnvelopeFn::Constant(a), EnvelopeFn::Constant(b)) => {
                assert!(rel(*a, l_b1) < 1e-12);
                assert!(rel(*b, 7.3 * (1.0 - 190.0 / 730.0)) < 1e-12);
            }
            _ => unreachable!(),
        }
        assert!(lorenz_envelope(&LorenzParams::regime_one(), 1.0, 1.0, None).is_err());
    }

    #[test]
    fn lorenz_envelope_limits() {
        let p = LorenzParams::regime_one();
        let e = lorenz_envelope(&p, 1e12, 1e12, None).unwrap();
        let EnvelopeFn::Constant(l_b2) = e.envelope.l_b2 else { unreachable!() };
        assert!((l_b2 - p.coercivity()).abs() < 1e-9);
        let mut q = p.clone();
        q.delta_bar = 0.0;
        assert_eq!(lorenz_envelope(&q, 25.0, 1.0, None).unwrap().f1_bar, q.f_bar);
    }

    #[test]
    fn verification_cases() {
        let ou = PeriodicSdeModel::build_ou(OuParams::new(1.0, 1.0, std::f64::consts::TAU, 1.0)).unwrap();
        let v = verify_dissipative(&ou, &GrowthEnvelope::constant(0.5, 0.5, 1.0), &SampleGrid::default()).unwrap();
        assert!(v.pass, "{:?}", v.violations.first());
        let lz = PeriodicSdeModel::build_lorenz(LorenzParams::regime_one()).unwrap();
        let e = lorenz_envelope(&LorenzParams::regime_one(), 25.0, 1.0, None).unwrap();
        let v = verify_dissipative(&lz, &e.envelope, &SampleGrid::default()).unwrap();
        assert!(v.pass, "{:?}", v.violations.first());
        let anti = PeriodicSdeModel::build_polynomial(
            "anti",
            1,
            0,
            1.0,
            vec![vec![PolyTerm::new(1.0, vec![1], TimeMode::Const)]],
            vec![],
        )
        .unwrap();
        let v = verify_dissipative(&anti, &GrowthEnvelope::constant(1.0, 1.0, 0.0), &SampleGrid::default()).unwrap();
        assert!(!v.pass && v.violations.iter().all(|w| w.kind == "drift"));
    }

    #[test]
    fn hasminskii_cases() {
        let ou = PeriodicSdeModel::build_ou(OuParams::new(1.0, 1.0, std::f64::consts::TAU, 1.0)).unwrap();
        let g = SampleGrid::default();
        let r = hasminskii_check(&ou, &EnvelopeFn::Constant(-1.0), &EnvelopeFn::Constant(1.0), 2.0, 100.0, &g).unwrap();
        assert!(r.bounded);
        let r = hasminskii_check(&ou, &EnvelopeFn::Constant(-1.0), &EnvelopeFn::Constant(3.0), 2.0, 100.0, &g).unwrap();
        assert!(!r.bounded);
        // L_b = L_b1 dominates L_b1 − L_b2|x|².
        let r = hasminskii_check(&ou, &EnvelopeFn::Constant(0.5), &EnvelopeFn::Constant(1.0), 2.0, 100.0, &g).unwrap();
        assert!(r.growth.pass && !r.bounded && !r.pass);
    }

    #[test]
    fn span_ranks() {
        let lz = PeriodicSdeModel::build_lorenz(LorenzParams::regime_one()).unwrap();
        let r = diffusion_span_rank(&lz, &[(0.0, vec![1.0, 1.0, 1.0]), (0.0, vec![0.0, 1.0, 1.0])]);
        assert_eq!(r.ranks, vec![3, 2]);
        assert_eq!(r.deficient, vec![1]);
        let ou = PeriodicSdeModel::build_ou(OuParams::new(1.0, 1.0, 1.0, 0.5)).unwrap();
        assert_eq!(diffusion_span_rank(&ou, &[(0.3, vec![2.0])]).min_rank, 1);
    }
}
