use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn finite(field: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::param(field, "must be finite"))
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    finite(field, v)?;
    if v > 0.0 {
        Ok(())
    } else {
        Err(Error::param(field, format!("must be > 0, got {v}")))
    }
}

/// Periodically forced stochastic Lorenz model with multiplicative noise
/// `σ̄·diag(v)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LorenzParams {
    pub alpha_bar: f64,
    pub beta_bar: f64,
    pub gamma_bar: f64,
    pub rho_bar: f64,
    pub f_bar: f64,
    pub delta_bar: f64,
    pub tau: f64,
    pub sigma_bar: f64,
}

impl LorenzParams {
    /// Stable random-periodic regime.
    pub fn regime_one() -> Self {
        Self {
            alpha_bar: 7.3,
            beta_bar: 26.0,
            gamma_bar: 7.0,
            rho_bar: 10.0,
            f_bar: 100.0,
            delta_bar: 0.9,
            tau: 1.0,
            sigma_bar: 0.2,
        }
    }

    /// Regime without a guaranteed random periodic orbit.
    pub fn regime_two() -> Self {
        Self {
            alpha_bar: 10.0,
            beta_bar: 1.0,
            gamma_bar: 8.0 / 3.0,
            rho_bar: 28.0,
            f_bar: 23.0,
            delta_bar: 0.9,
            tau: 1.0,
            sigma_bar: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        positive("alpha_bar", self.alpha_bar)?;
        positive("beta_bar", self.beta_bar)?;
        positive("gamma_bar", self.gamma_bar)?;
        positive("rho_bar", self.rho_bar)?;
        positive("tau", self.tau)?;
        finite("f_bar", self.f_bar)?;
        finite("delta_bar", self.delta_bar)?;
        finite("sigma_bar", self.sigma_bar)?;
        if self.delta_bar.abs() > self.f_bar.abs() {
            return Err(Error::param(
                "delta_bar",
                format!("|delta_bar| = {} exceeds |f_bar| = {}", self.delta_bar.abs(), self.f_bar.abs()),
            ));
        }
        Ok(())
    }

    /// First forcing component `f̄(1 + δ̄ sin(2πt/τ))`.
    #[inline]
    pub fn forcing(&self, t: f64) -> f64 {
        self.f_bar * (1.0 + self.delta_bar * (TAU * t / self.tau).sin())
    }

    /// Constant third forcing component `−γ̄ β̄⁻² (ϱ̄ + ᾱ)`.
    #[inline]
    pub fn z_offset(&self) -> f64 {
        -self.gamma_bar * (self.rho_bar + self.alpha_bar) / (self.beta_bar * self.beta_bar)
    }

    /// `min(ᾱ, β̄, γ̄)`, the coercivity constant of the linear part.
    pub fn coercivity(&self) -> f64 {
        self.alpha_bar.min(self.beta_bar).min(self.gamma_bar)
    }
}

/// FitzHugh–Nagumo model with periodic current and additive noise on the
/// first coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FhnParams {
    pub a: f64,
    pub beta: f64,
    #[serde(rename = "B1")]
    pub b1: f64,
    #[serde(rename = "B2")]
    pub b2: f64,
    pub c: f64,
    /// Angular frequency of the forcing; the period is `2π / tau_freq`.
    pub tau_freq: f64,
}

impl FhnParams {
    pub fn validate(&self) -> Result<()> {
        finite("a", self.a)?;
        if self.a >= 1.0 {
            return Err(Error::param("a", format!("must be < 1, got {}", self.a)));
        }
        positive("beta", self.beta)?;
        finite("B1", self.b1)?;
        finite("B2", self.b2)?;
        finite("c", self.c)?;
        positive("tau_freq", self.tau_freq)?;
        Ok(())
    }

    pub fn period(&self) -> f64 {
        TAU / self.tau_freq
    }

    #[inline]
    pub fn noise_amplitude(&self, t: f64) -> f64 {
        (2.0 / self.beta).sqrt() + self.b2 * (self.tau_freq * t).cos()
    }
}

/// One-dimensional periodically forced Ornstein–Uhlenbeck process
/// `dX = (−aX + A sin(2πt/τ)) dt + σ dW`. Every statistic of interest has a
/// closed form, which makes it the reference model for the estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuParams {
    pub a: f64,
    pub forcing_amp: f64,
    pub tau: f64,
    pub sigma: f64,
}

impl OuParams {
    pub fn new(a: f64, forcing_amp: f64, tau: f64, sigma: f64) -> Self {
        Self {
            a,
            forcing_amp,
            tau,
            sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        positive("a", self.a)?;
        positive("tau", self.tau)?;
        finite("forcing_amp", self.forcing_amp)?;
        finite("sigma", self.sigma)?;
        if self.sigma < 0.0 {
            return Err(Error::param("sigma", "must be >= 0"));
        }
        Ok(())
    }

    pub fn omega(&self) -> f64 {
        TAU / self.tau
    }

    /// Periodic mean `A(a sin ωt − ω cos ωt)/(a² + ω²)`.
    pub fn periodic_mean(&self, t: f64) -> f64 {
        let w = self.omega();
        let (s, c) = (w * t).sin_cos();
        self.forcing_amp * (self.a * s - w * c) / (self.a * self.a + w * w)
    }

    /// Stationary variance `σ²/(2a)`.
    pub fn stationary_variance(&self) -> f64 {
        self.sigma * self.sigma / (2.0 * self.a)
    }

    /// Stationary autocovariance at lag `u ≥ 0`.
    pub fn autocovariance(&self, lag: f64) -> f64 {
        self.stationary_variance() * (-self.a * lag).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lorenz_presets_validate() {
        LorenzParams::regime_one().validate().unwrap();
        LorenzParams::regime_two().validate().unwrap();
    }

    #[test]
    fn lorenz_validation_names_field() {
        let mut p = LorenzParams::regime_one();
        p.beta_bar = -1.0;
        match p.validate() {
            Err(Error::InvalidParam { field, .. }) => assert_eq!(field, "beta_bar"),
            other => panic!("unexpected {other:?}"),
        }
        let mut p = LorenzParams::regime_one();
        p.delta_bar = 200.0;
        assert!(matches!(p.validate(), Err(Error::InvalidParam { .. })));
    }

    #[test]
    fn ou_periodic_mean_solves_ode() {
        // ṁ = −a m + A sin(ωt) checked by central differences.
        let p = OuParams::new(1.3, 0.7, 2.0, 1.0);
        let h = 1e-5;
        for k in 0..20 {
            let t = 0.1 * k as f64;
            let dm = (p.periodic_mean(t + h) - p.periodic_mean(t - h)) / (2.0 * h);
            let rhs = -p.a * p.periodic_mean(t) + p.forcing_amp * (p.omega() * t).sin();
            assert!((dm - rhs).abs() < 1e-8);
        }
    }

    #[test]
    fn ou_mean_closed_form_at_unit_frequency() {
        let p = OuParams::new(1.0, 1.0, TAU, 1.0);
        for k in 0..10 {
            let t = 0.7 * k as f64;
            let expected = (t.sin() - t.cos()) / 2.0;
            assert!((p.periodic_mean(t) - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn fhn_rejects_a_at_least_one() {
        let p = FhnParams {
            a: 1.0,
            beta: 1.0,
            b1: 0.0,
            b2: 0.0,
            c: 0.0,
            tau_freq: 1.0,
        };
        assert!(p.validate().is_err());
    }
}
