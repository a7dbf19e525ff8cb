//! Self-test on the forced Ornstein–Uhlenbeck process, whose response is
//! known in closed form.

use std::f64::consts::TAU;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::Result;
use crate::integrate::{InitialCondition, TimeGrid};
use crate::model::{Observable, OuParams, PeriodicSdeModel};
use crate::noise::NoiseSpec;
use crate::response::{
    convolve_response, direct_response, fdt2_check_ou, fdt_response_function, DensityModel, DirectConfig, FdtConfig,
    PerturbationSpec, ResponseCurve, TimeProfile, VectorField,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleConfig {
    pub params: OuParams,
    pub seed: u64,
    /// Grid of the response-curve checks.
    pub steps_per_period: usize,
    /// Grid of the pointwise response-function checks.
    pub table_steps_per_period: usize,
    pub n_paths: usize,
    pub epsilon: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            params: OuParams::new(1.0, 1.0, TAU, 1.0),
            seed: 0,
            steps_per_period: 6400,
            table_steps_per_period: 1000,
            n_paths: 10_000,
            epsilon: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleCheck {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
    /// Pointwise diagnostics of the multi-point checks.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pointwise: Option<Pointwise>,
}

/// Calibration of standardized residuals over many correlated points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Pointwise {
    pub points: usize,
    pub max_abs_z: f64,
    pub rms_z: f64,
    pub frac_above_3: f64,
    /// Whether every point lies within 3 standard errors.
    pub within_3: bool,
}

impl Pointwise {
    fn from_z(z: &[f64]) -> Self {
        let n = z.len() as f64;
        let max_abs_z = z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Self {
            points: z.len(),
            max_abs_z,
            rms_z: (z.iter().map(|v| v * v).sum::<f64>() / n).sqrt(),
            frac_above_3: z.iter().filter(|v| v.abs() > 3.0).count() as f64 / n,
            within_3: max_abs_z <= 3.0,
        }
    }
}

/// Two-sided normal quantile keeping the family-wise error of `points`
/// independent tests at the 3σ level.
pub fn family_threshold(points: usize) -> f64 {
    let alpha = 1.0 - Normal::standard().cdf(3.0);
    let per_point = 1.0 - (1.0 - 2.0 * alpha).powf(1.0 / points.max(1) as f64);
    Normal::standard().inverse_cdf(1.0 - per_point / 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub config: OracleConfig,
    pub checks: Vec<OracleCheck>,
    pub pass: bool,
    #[serde(skip)]
    pub direct: Option<ResponseCurve>,
    #[serde(skip)]
    pub predicted: Option<ResponseCurve>,
}

/// `ε ∫₀ᵗ e^{−a(t−r)} ϑ(r) dr` by composite Simpson quadrature.
pub fn ou_linear_response(a: f64, epsilon: f64, profile: &TimeProfile, t: f64) -> f64 {
    let lo = profile.support_start().max(0.0);
    if !(t > lo) {
        return 0.0;
    }
    let n = 4000;
    let h = (t - lo) / n as f64;
    let f = |r: f64| (-a * (t - r)).exp() * profile.eval(r);
    let mut acc = f(lo) + f(t);
    for i in 1..n {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(lo + i as f64 * h);
    }
    epsilon * acc * h / 3.0
}

fn rel_l2(values: &[f64], exact: &[f64]) -> f64 {
    let num: f64 = values.iter().zip(exact).map(|(v, e)| (v - e).powi(2)).sum();
    let den: f64 = exact.iter().map(|e| e * e).sum();
    (num / den).sqrt()
}

/// Members drawn from the exact periodic law at phase zero.
pub fn ou_periodic_start(p: &OuParams, seed: u64) -> InitialCondition {
    let (m, s) = (p.periodic_mean(0.0), p.stationary_variance().sqrt());
    InitialCondition::Sampler(Arc::new(move |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        vec![m + s * rng.sample::<f64, _>(StandardNormal)]
    }))
}

pub fn run_oracle(cfg: &OracleConfig) -> Result<OracleReport> {
    let p = cfg.params;
    let model = PeriodicSdeModel::build_ou(p)?;
    let grid = TimeGrid::per_period(&model, cfg.steps_per_period)?;
    let spec = NoiseSpec::new(cfg.seed, grid.dt(), 1);
    let obs = Observable::coordinates(1, p.tau);
    let initial = ou_periodic_start(&p, !cfg.seed);
    let profile = TimeProfile::RampedStep { t0: 5.0, delta_t: 2.0 };
    let pert = PerturbationSpec::drift_only(VectorField::constant(p.tau, &[1.0]), cfg.epsilon, profile.clone());
    let horizon = 20.0;
    let every = (cfg.steps_per_period / 640).max(1);
    let mut checks = Vec::new();

    let dcfg = DirectConfig {
        horizon,
        output_every: every,
        n_paths: cfg.n_paths,
    };
    let direct = direct_response(&model, std::slice::from_ref(&pert), &obs, &initial, &grid, &dcfg, &spec)?.remove(0);
    let exact: Vec<f64> = direct.times.iter().map(|&t| ou_linear_response(p.a, cfg.epsilon, &profile, t)).collect();
    let e = rel_l2(&direct.values[0], &exact);
    checks.push(OracleCheck {
        name: "direct response vs analytic (relative L2)".into(),
        value: e,
        threshold: 0.05,
        pass: e <= 0.05,
        pointwise: None,
    });

    let fcfg = FdtConfig {
        n_paths: cfg.n_paths,
        phases: 8,
        max_lag: 3.0 * p.tau,
        lag_every: every,
        burn_in_periods: 0,
        record_periods: 1,
    };
    let table = fdt_response_function(&model, &pert, &obs, &initial, &grid, &fcfg, DensityModel::Gaussian, &spec.derive(2))?;
    let predicted = convolve_response(&table, &profile, cfg.epsilon, &direct.times)?;
    let e = rel_l2(&predicted.values[0], &exact);
    checks.push(OracleCheck {
        name: "FDT (Gaussian) prediction vs analytic (relative L2)".into(),
        value: e,
        threshold: 0.08,
        pass: e <= 0.08,
        pointwise: None,
    });

    let grid2 = TimeGrid::per_period(&model, cfg.table_steps_per_period)?;
    let spec2 = NoiseSpec::new(cfg.seed, grid2.dt(), 1);
    let fcfg = FdtConfig {
        lag_every: 1,
        ..fcfg
    };
    let table = fdt_response_function(&model, &pert, &obs, &initial, &grid2, &fcfg, DensityModel::Gaussian, &spec2.derive(4))?;
    let mut z = Vec::new();
    for k in 0..table.phases.len() {
        for (l, u) in table.lags.iter().enumerate() {
            z.push((table.get(k, l, 0) - (-p.a * u).exp()) / table.stderr_at(k, l, 0));
        }
    }
    let pw = Pointwise::from_z(&z);
    let zc = family_threshold(z.len());
    checks.push(OracleCheck {
        name: "response function vs exp(-a lag), max |z|".into(),
        value: pw.max_abs_z,
        threshold: zc,
        pass: pw.max_abs_z <= zc,
        pointwise: Some(pw),
    });

    let fdt2 = fdt2_check_ou(&p, &grid2, 3.0 * p.tau, cfg.n_paths, &spec2.derive(3))?;
    // Residual beyond the difference-quotient error, in standard errors.
    let z: Vec<f64> = (0..fdt2.lags.len())
        .map(|l| (fdt2.residual[l] - fdt2.fd_error[l]).max(0.0) / fdt2.stderr[l])
        .collect();
    let mut pw = Pointwise::from_z(&z);
    pw.within_3 = fdt2.pass;
    let zc = family_threshold(z.len());
    checks.push(OracleCheck {
        name: "second FDT identity, max residual beyond difference error in stderr".into(),
        value: pw.max_abs_z,
        threshold: zc,
        pass: pw.max_abs_z <= zc,
        pointwise: Some(pw),
    });

    Ok(OracleReport {
        config: cfg.clone(),
        pass: checks.iter().all(|c| c.pass),
        checks,
        direct: Some(direct),
        predicted: Some(predicted),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_matches_closed_form_step() {
        // Unit step from t = 0: ε(1 − e^{−at})/a.
        let prof = TimeProfile::Table {
            times: vec![0.0],
            values: vec![1.0],
        };
        for t in [0.5, 3.0, 10.0] {
            let v = ou_linear_response(2.0, 0.1, &prof, t);
            assert!((v - 0.05 * (1.0 - (-2.0 * t).exp())).abs() < 1e-12);
        }
    }

    #[test]
    fn family_threshold_reduces_to_three_sigma() {
        assert!((family_threshold(1) - 3.0).abs() < 1e-9);
        let t = family_threshold(10_000);
        assert!(t > 5.0 && t < 5.3, "{t}");
    }
}
