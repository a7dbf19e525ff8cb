//! Time-periodic SDE models `dX = b(t,X) dt + σ(t,X) dW` and their generators.

mod generator;
mod params;
mod poly;

pub use generator::{generator_apply, two_point_distance_generator, two_point_generator_apply};
pub use params::{FhnParams, LorenzParams, OuParams};
pub use poly::{Observable, PolyTerm, SmoothScalar, TauPolynomial, TimeMode};

use crate::error::{Error, Result};

/// Maximum polynomial degree accepted for user-supplied coefficient tables.
pub const MAX_POLY_DEGREE: u32 = 4;

/// Drift and diffusion tables of a user model. `diffusion` is row-major
/// `d × m`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialModel {
    pub drift: Vec<TauPolynomial>,
    pub diffusion: Vec<TauPolynomial>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    Lorenz(LorenzParams),
    Fhn(FhnParams),
    Ou(OuParams),
    Polynomial(PolynomialModel),
}

/// A τ-periodic SDE. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicSdeModel {
    kind: ModelKind,
    dim: usize,
    noise_dim: usize,
    period: f64,
    pub label: String,
}

impl PeriodicSdeModel {
    pub fn build_lorenz(params: LorenzParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            kind: ModelKind::Lorenz(params),
            dim: 3,
            noise_dim: 3,
            period: params.tau,
            label: "lorenz".into(),
        })
    }

    pub fn build_fhn(params: FhnParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            kind: ModelKind::Fhn(params),
            dim: 2,
            noise_dim: 1,
            period: params.period(),
            label: "fitzhugh_nagumo".into(),
        })
    }

    pub fn build_ou(params: OuParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            kind: ModelKind::Ou(params),
            dim: 1,
            noise_dim: 1,
            period: params.tau,
            label: "ornstein_uhlenbeck".into(),
        })
    }

    /// User model from polynomial coefficient tables (degree ≤ 4).
    pub fn build_polynomial(
        label: impl Into<String>,
        dim: usize,
        noise_dim: usize,
        period: f64,
        drift: Vec<Vec<PolyTerm>>,
        diffusion: Vec<Vec<PolyTerm>>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::param("dim", "must be positive"));
        }
        if drift.len() != dim {
            return Err(Error::DimensionMismatch {
                context: "drift components",
                expected: dim,
                got: drift.len(),
            });
        }
        if diffusion.len() != dim * noise_dim {
            return Err(Error::DimensionMismatch {
                context: "diffusion entries (d × m)",
                expected: dim * noise_dim,
                got: diffusion.len(),
            });
        }
        let build = |terms: Vec<PolyTerm>| -> Result<TauPolynomial> {
            let p = TauPolynomial::new(dim, period, terms)?;
            if p.degree() > MAX_POLY_DEGREE {
                return Err(Error::param(
                    "degree",
                    format!("polynomial degree {} exceeds {MAX_POLY_DEGREE}", p.degree()),
                ));
            }
            Ok(p)
        };
        let drift = drift.into_iter().map(build).collect::<Result<Vec<_>>>()?;
        let diffusion = diffusion.into_iter().map(build).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kind: ModelKind::Polynomial(PolynomialModel { drift, diffusion }),
            dim,
            noise_dim,
            period,
            label: label.into(),
        })
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn ou_params(&self) -> Option<&OuParams> {
        match &self.kind {
            ModelKind::Ou(p) => Some(p),
            _ => None,
        }
    }

    pub fn lorenz_params(&self) -> Option<&LorenzParams> {
        match &self.kind {
            ModelKind::Lorenz(p) => Some(p),
            _ => None,
        }
    }

    /// True when σ does not depend on the state.
    pub fn is_additive(&self) -> bool {
        match &self.kind {
            ModelKind::Lorenz(p) => p.sigma_bar == 0.0,
            ModelKind::Fhn(_) | ModelKind::Ou(_) => true,
            ModelKind::Polynomial(m) => m.diffusion.iter().all(TauPolynomial::is_space_constant),
        }
    }

    #[inline]
    pub fn drift_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            ModelKind::Lorenz(p) => {
                let (v1, v2, v3) = (x[0], x[1], x[2]);
                out[0] = -p.alpha_bar * v1 + p.alpha_bar * v2 + p.forcing(t);
                out[1] = -p.alpha_bar * v1 - p.beta_bar * v2 - v1 * v3;
                out[2] = -p.gamma_bar * v3 + v1 * v2 + p.z_offset();
            }
            ModelKind::Fhn(p) => {
                let (u, w) = (x[0], x[1]);
                out[0] = u - w - u * u * u / 3.0 + p.b1 * (p.tau_freq * t).sin();
                out[1] = p.a * u - w + p.c;
            }
            ModelKind::Ou(p) => {
                out[0] = -p.a * x[0] + p.forcing_amp * (std::f64::consts::TAU * t / p.tau).sin();
            }
            ModelKind::Polynomial(m) => {
                for (o, f) in out.iter_mut().zip(&m.drift) {
                    *o = f.value(t, x);
                }
            }
        }
    }

    pub fn drift(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.drift_into(t, x, &mut out);
        out
    }

    /// Full `d × m` diffusion matrix, row-major.
    pub fn diffusion_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        match &self.kind {
            ModelKind::Lorenz(p) => {
                for i in 0..3 {
                    out[i * 3 + i] = p.sigma_bar * x[i];
                }
            }
            ModelKind::Fhn(p) => {
                out[0] = p.noise_amplitude(t);
            }
            ModelKind::Ou(p) => out[0] = p.sigma,
            ModelKind::Polynomial(m) => {
                for (o, f) in out.iter_mut().zip(&m.diffusion) {
                    *o = f.value(t, x);
                }
            }
        }
    }

    pub fn diffusion(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim * self.noise_dim];
        self.diffusion_into(t, x, &mut out);
        out
    }

    /// `out += σ(t, x) · dw`.
    #[inline]
    pub fn add_diffusion(&self, t: f64, x: &[f64], dw: &[f64], out: &mut [f64]) {
        match &self.kind {
            ModelKind::Lorenz(p) => {
                out[0] += p.sigma_bar * x[0] * dw[0];
                out[1] += p.sigma_bar * x[1] * dw[1];
                out[2] += p.sigma_bar * x[2] * dw[2];
            }
            ModelKind::Fhn(p) => out[0] += p.noise_amplitude(t) * dw[0],
            ModelKind::Ou(p) => out[0] += p.sigma * dw[0],
            ModelKind::Polynomial(m) => {
                let mdim = self.noise_dim;
                for (i, o) in out.iter_mut().enumerate() {
                    for k in 0..mdim {
                        *o += m.diffusion[i * mdim + k].value(t, x) * dw[k];
                    }
                }
            }
        }
    }

    /// Row-major `d × d` Jacobian of the drift, when available in closed form.
    pub fn drift_jacobian(&self, t: f64, x: &[f64]) -> Option<Vec<f64>> {
        match &self.kind {
            ModelKind::Lorenz(p) => {
                let (v1, v2, v3) = (x[0], x[1], x[2]);
                Some(vec![
                    -p.alpha_bar,
                    p.alpha_bar,
                    0.0,
                    -p.alpha_bar - v3,
                    -p.beta_bar,
                    -v1,
                    v2,
                    v1,
                    -p.gamma_bar,
                ])
            }
            ModelKind::Fhn(p) => Some(vec![1.0 - x[0] * x[0], -1.0, p.a, -1.0]),
            ModelKind::Ou(p) => Some(vec![-p.a]),
            ModelKind::Polynomial(m) => {
                let d = self.dim;
                let mut jac = vec![0.0; d * d];
                for (i, f) in m.drift.iter().enumerate() {
                    f.gradient_into(t, x, &mut jac[i * d..(i + 1) * d]);
                }
                Some(jac)
            }
        }
    }

    /// `‖σ(t,x)‖²_HS`.
    pub fn diffusion_hs2(&self, t: f64, x: &[f64]) -> f64 {
        self.diffusion(t, x).iter().map(|v| v * v).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_period_gap(model: &PeriodicSdeModel) -> f64 {
        let d = model.dim();
        let tau = model.period();
        let mut worst: f64 = 0.0;
        for it in 0..32 {
            let t = tau * it as f64 / 32.0;
            for ix in 0..64 {
                let x: Vec<f64> = (0..d).map(|k| ((ix * (k + 3)) as f64 * 0.37).sin() * 5.0).collect();
                let a = model.drift(t, &x);
                let b = model.drift(t + tau, &x);
                let sa = model.diffusion(t, &x);
                let sb = model.diffusion(t + tau, &x);
                for (u, v) in a.iter().zip(&b).chain(sa.iter().zip(&sb)) {
                    worst = worst.max((u - v).abs() / (1.0 + u.abs()));
                }
            }
        }
        worst
    }

    #[test]
    fn builtin_models_are_tau_periodic_on_grid() {
        let models = [
            PeriodicSdeModel::build_lorenz(LorenzParams::regime_one()).unwrap(),
            PeriodicSdeModel::build_ou(OuParams::new(1.0, 1.0, 2.0, 1.0)).unwrap(),
            PeriodicSdeModel::build_fhn(FhnParams {
                a: 0.5,
                beta: 2.0,
                b1: 0.3,
                b2: 0.2,
                c: 0.1,
                tau_freq: 3.0,
            })
            .unwrap(),
        ];
        for m in &models {
            // Machine precision: trig of t and t + τ differ only in the last bits.
            assert!(max_period_gap(m) < 1e-12, "{}", m.label);
        }
    }

    #[test]
    fn lorenz_drift_at_origin() {
        let m = PeriodicSdeModel::build_lorenz(LorenzParams::regime_one()).unwrap();
        let b = m.drift(0.0, &[0.0, 0.0, 0.0]);
        assert_eq!(b[0], 100.0);
        assert_eq!(b[1], 0.0);
        assert!((b[2] - (-7.0 * 17.3 / 676.0)).abs() < 1e-15);
        assert!((b[2] + 0.17914).abs() < 1e-5);
        for t in [0.0, 0.25, 0.6] {
            assert!(m.diffusion(t, &[0.0; 3]).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn ou_builder() {
        let m = PeriodicSdeModel::build_ou(OuParams::new(1.0, 0.0, 1.0, 1.0)).unwrap();
        for x in [-2.0, 0.0, 3.5] {
            assert_eq!(m.drift(0.3, &[x]), vec![-x]);
            assert_eq!(m.diffusion(0.3, &[x]), vec![1.0]);
        }
        assert!(PeriodicSdeModel::build_ou(OuParams::new(0.0, 1.0, 1.0, 1.0)).is_err());
        assert!(PeriodicSdeModel::build_ou(OuParams::new(-1.0, 1.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let lorenz = PeriodicSdeModel::build_lorenz(LorenzParams::regime_one()).unwrap();
        let poly = PeriodicSdeModel::build_polynomial(
            "toy",
            2,
            1,
            1.0,
            vec![
                vec![PolyTerm::new(-1.0, vec![3, 0], TimeMode::Const), PolyTerm::new(0.5, vec![0, 1], TimeMode::Sin(1))],
                vec![PolyTerm::new(2.0, vec![1, 1], TimeMode::Const)],
            ],
            vec![vec![PolyTerm::new(1.0, vec![0, 0], TimeMode::Const)], vec![]],
        )
        .unwrap();
        for model in [&lorenz, &poly] {
            let d = model.dim();
            let x: Vec<f64> = (0..d).map(|i| 0.4 + i as f64).collect();
            let jac = model.drift_jacobian(0.2, &x).unwrap();
            for j in 0..d {
                let h = 1e-6;
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let bp = model.drift(0.2, &xp);
                let bm = model.drift(0.2, &xm);
                for i in 0..d {
                    let fd = (bp[i] - bm[i]) / (2.0 * h);
                    assert!((fd - jac[i * d + j]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn polynomial_degree_limit() {
        let r = PeriodicSdeModel::build_polynomial(
            "deg5",
            1,
            1,
            1.0,
            vec![vec![PolyTerm::new(1.0, vec![5], TimeMode::Const)]],
            vec![vec![]],
        );
        assert!(r.is_err());
    }
}
