use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use super::config::Config;
use crate::dissipativity::{
    coeffs_ap_bp, diffusion_span_rank, jensen_chain, lorenz_envelope, sharp_bounds, verify_dissipative, GrowthEnvelope,
    SampleGrid,
};
use crate::error::{Error, Result};
use crate::integrate::{InitialCondition, TimeGrid};
use crate::measure::{estimate_periodic_measure, periodicity_distance, periodicity_test, Bandwidth, MeasureConfig, PermutationConfig};
use crate::model::{ModelKind, PeriodicSdeModel};
use crate::noise::NoiseSpec;
use crate::pullback::{contraction_rate, pullback_path, two_point_contraction, PullbackConfig};
use crate::response::{
    compare_curves, convolve_response, direct_response, fdt_response_function, output_times, write_response_csv,
    DensityModel, DirectConfig, FdtConfig, ResponseCurve,
};

/// Response computations to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Direct,
    Fdt,
    Both,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "direct" => Some(Self::Direct),
            "fdt" => Some(Self::Fdt),
            "both" => Some(Self::Both),
            _ => None,
        }
    }
}

pub(super) struct Ctx<'a> {
    pub cfg: &'a Config,
    pub out: &'a Path,
    pub quiet: bool,
}

impl Ctx<'_> {
    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.out.join(name))?))
    }

    fn json<T: Serialize>(&self, name: &str, v: &T) -> Result<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, v)?;
        std::io::Write::write_all(&mut w, b"\n")?;
        Ok(())
    }

    fn setup(&self) -> Result<(PeriodicSdeModel, TimeGrid, NoiseSpec)> {
        let model = self.cfg.build_model()?;
        let grid = self.cfg.grid(&model)?;
        let spec = self.cfg.noise(&model, &grid);
        Ok((model, grid, spec))
    }
}

fn envelope_for(cfg: &Config, model: &PeriodicSdeModel) -> Result<(GrowthEnvelope, Option<Value>)> {
    let e = cfg.envelope.clone().unwrap_or_default();
    if let Some(g) = e.growth {
        return Ok((g, None));
    }
    match model.kind() {
        ModelKind::Lorenz(p) => {
            let l = lorenz_envelope(p, e.kappa1, e.kappa3, e.c_bar)?;
            Ok((l.envelope.clone(), Some(serde_json::to_value(&l)?)))
        }
        ModelKind::Ou(p) => Ok((GrowthEnvelope::ou(p.a, p.forcing_amp, p.sigma), None)),
        _ => Err(Error::Config {
            pointer: "/envelope/growth".into(),
            message: "this model needs an explicit growth envelope".into(),
        }),
    }
}

fn settled<T: Serialize>(r: Result<T>) -> Value {
    match r {
        Ok(v) => serde_json::to_value(v).unwrap_or(Value::Null),
        Err(e) => json!({ "error": e.to_string() }),
    }
}

pub(super) fn check(ctx: &Ctx) -> Result<bool> {
    let model = ctx.cfg.build_model()?;
    let (env, lorenz) = envelope_for(ctx.cfg, &model)?;
    let p = ctx.cfg.envelope.as_ref().map_or(2.0, |e| e.p);
    let sample = SampleGrid::default();
    let verification = verify_dissipative(&model, &env, &sample)?;
    let coefficients = coeffs_ap_bp(&env, p);
    let certified = coefficients.as_ref().is_ok_and(|c| c.pass)
        || (p == 2.0 || p == 3.0) && sharp_bounds(&env, None).is_ok_and(|s| if p == 2.0 { s.b2 > 0.0 } else { s.b3 > 0.0 });
    let points: Vec<(f64, Vec<f64>)> = sample
        .times(model.period())
        .into_iter()
        .flat_map(|t| sample.points(model.dim()).into_iter().take(64).map(move |x| (t, x)))
        .collect();
    let span = diffusion_span_rank(&model, &points);
    let pass = verification.pass && certified;
    let report = json!({
        "model": model.label,
        "envelope": env,
        "lorenz": lorenz,
        "verification": verification,
        "moment_coefficients": settled(coefficients),
        "sharp_bounds": settled(sharp_bounds(&env, None)),
        "jensen_chain": settled(jensen_chain(&env)),
        "span_rank": span,
        "certified": certified,
        "pass": pass,
    });
    ctx.json("dissipativity_report.json", &report)?;
    ctx.note(format!("dissipativity check: {}", if pass { "pass" } else { "fail" }));
    Ok(pass)
}

pub(super) fn pullback(ctx: &Ctx) -> Result<bool> {
    let (model, grid, spec) = ctx.setup()?;
    let s = &ctx.cfg.sim;
    let x0 = ctx.cfg.initial(&model)?;
    let alt = s.initial_alt.clone().unwrap_or_else(|| x0.iter().map(|v| v + 1.0).collect());
    let horizon = ctx.cfg.horizon(&model);
    let curve = two_point_contraction(
        &model,
        &grid,
        &x0,
        &alt,
        s.contraction_p,
        horizon,
        model.period() / s.phases.max(1) as f64,
        s.n_paths,
        &spec.derive(1),
    )?;
    curve.write_csv(ctx.create("contraction.csv")?)?;
    let rate = contraction_rate(&curve, 0.0, horizon).ok();
    let pcfg = PullbackConfig {
        n_max_periods: s.n_max_periods,
        tol: s.pullback_tol,
        n_realizations: s.n_paths,
        phases: s.phases,
    };
    pcfg.validate()?;
    match pullback_path(&model, &grid, &pcfg, &spec, &x0) {
        Ok(est) => {
            est.write_phase_csv(ctx.create("pullback_phase.csv")?)?;
            ctx.json(
                "pullback_summary.json",
                &json!({
                    "converged": true,
                    "n_periods": est.n_periods,
                    "residuals": est.residuals,
                    "tol_abs": est.tol_abs,
                    "curve": est.curve,
                    "phases": est.phases,
                    "contraction_rate": rate,
                }),
            )?;
            ctx.note(format!("pullback converged at depth {} periods", est.n_periods));
            Ok(true)
        }
        Err(Error::NonConvergence(report)) => {
            ctx.json(
                "pullback_summary.json",
                &json!({
                    "converged": false,
                    "n_max_periods": report.n_max_periods,
                    "tol": report.tol,
                    "curve": report.curve,
                    "contraction_rate": rate,
                }),
            )?;
            Err(Error::NonConvergence(report))
        }
        Err(e) => Err(e),
    }
}

pub(super) fn measure(ctx: &Ctx) -> Result<bool> {
    let (model, grid, spec) = ctx.setup()?;
    let s = &ctx.cfg.sim;
    let mcfg = MeasureConfig {
        phases: s.phases,
        n_paths: s.n_paths,
        burn_in_periods: s.burn_in_periods,
        record_periods: s.record_periods,
    };
    let m = estimate_periodic_measure(&model, &grid, &mcfg, &spec, &InitialCondition::Point(ctx.cfg.initial(&model)?))?;
    for k in 0..m.n_phases() {
        m.write_phase_csv(k, ctx.create(&format!("measure_phase_{k}.csv"))?)?;
    }
    let perm = PermutationConfig {
        seed: s.seed ^ 0x5eed,
        ..PermutationConfig::default()
    };
    let periodicity: Vec<Value> = if m.record_periods >= 2 {
        (0..m.n_phases())
            .map(|k| {
                json!({
                    "phase": m.phases[k],
                    "distance": settled(periodicity_distance(&m, k, 0)),
                    "permutation_test": settled(periodicity_test(&m, k, 0, &perm)),
                })
            })
            .collect()
    } else {
        Vec::new()
    };
    let analytic = model.ou_params().map(|p| {
        json!({
            "mean": m.phases.iter().map(|&t| p.periodic_mean(t)).collect::<Vec<_>>(),
            "variance": p.stationary_variance(),
        })
    });
    ctx.json(
        "measure_summary.json",
        &json!({ "summary": m.summary(), "periodicity": periodicity, "analytic": analytic }),
    )?;
    ctx.note(format!("measure: {} phases, {} samples each", m.n_phases(), m.n_paths * m.record_periods));
    Ok(true)
}

/// Members started from the phase-zero cloud after `burn_in_periods`.
fn start_cloud(model: &PeriodicSdeModel, grid: &TimeGrid, cfg: &Config, n: usize, spec: &NoiseSpec) -> Result<InitialCondition> {
    let x0 = cfg.initial(model)?;
    if cfg.sim.burn_in_periods == 0 {
        return Ok(InitialCondition::Point(x0));
    }
    let mcfg = MeasureConfig {
        phases: 1,
        n_paths: n,
        burn_in_periods: cfg.sim.burn_in_periods,
        record_periods: 1,
    };
    let m = estimate_periodic_measure(model, grid, &mcfg, &spec.derive(0xc10d), &InitialCondition::Point(x0))?;
    InitialCondition::states(model.dim(), m.period_cloud(0, 0).to_vec())
}

pub(super) fn respond(ctx: &Ctx, mode: Mode) -> Result<bool> {
    let (model, grid, spec) = ctx.setup()?;
    let s = &ctx.cfg.sim;
    let pert = ctx.cfg.perturbation(&model)?;
    let obs = ctx.cfg.observables(&model)?;
    let horizon = ctx.cfg.horizon(&model);
    pert.validate(&model, horizon)?;
    if let Some(w) = pert.profile.warning() {
        ctx.note(format!("warning: {w}"));
    }
    let onset = pert.profile.support_start().max(0.0).min(horizon);
    let fdt_paths = s.fdt_paths.unwrap_or(s.n_paths);
    let initial = start_cloud(&model, &grid, ctx.cfg, s.n_paths.max(fdt_paths), &spec)?;
    let times = output_times(&grid, horizon, s.output_every)?;

    let direct = if mode != Mode::Fdt {
        let dcfg = DirectConfig {
            horizon,
            output_every: s.output_every,
            n_paths: s.n_paths,
        };
        let mut r = direct_response(&model, std::slice::from_ref(&pert), &obs, &initial, &grid, &dcfg, &spec)?;
        r.pop()
    } else {
        None
    };

    let mut qg = None;
    let mut kde = None;
    let mut b_means = serde_json::Map::new();
    if mode != Mode::Direct {
        let fcfg = FdtConfig {
            n_paths: fdt_paths,
            phases: s.phases,
            max_lag: s.max_lag.unwrap_or(horizon - onset),
            lag_every: s.lag_every,
            // A point start has a degenerate cloud at phase zero.
            burn_in_periods: usize::from(s.burn_in_periods == 0),
            record_periods: s.record_periods,
        };
        let mut densities = Vec::new();
        if !pert.has_diffusion() {
            densities.push(DensityModel::Gaussian);
        }
        if s.fdt_kde || pert.has_diffusion() {
            densities.push(DensityModel::Kde(s.kde_bandwidth.map_or(Bandwidth::Scott, Bandwidth::Fixed)));
        }
        for density in densities {
            let table = fdt_response_function(&model, &pert, &obs, &initial, &grid, &fcfg, density, &spec)?;
            let name = match density {
                DensityModel::Gaussian => "rtable.csv",
                DensityModel::Kde(_) if pert.has_diffusion() => "rtable.csv",
                DensityModel::Kde(_) => "rtable_kde.csv",
            };
            table.write_csv(ctx.create(name)?)?;
            let curve = convolve_response(&table, &pert.profile, pert.epsilon, &times)?;
            let key = if matches!(density, DensityModel::Gaussian) { "fdt_qg" } else { "fdt_kde" };
            b_means.insert(key.into(), json!({ "b_mean": table.b_mean, "b_stderr": table.b_stderr }));
            match density {
                DensityModel::Gaussian => qg = Some(curve),
                DensityModel::Kde(_) => kde = Some(curve),
            }
        }
    }
    write_response_csv(ctx.create("response.csv")?, direct.as_ref(), qg.as_ref(), kde.as_ref())?;

    let window = s.window.map_or((onset, horizon), |[a, b]| (a, b));
    let compare = |c: &Option<ResponseCurve>| match (&direct, c) {
        (Some(d), Some(p)) => settled(compare_curves(d, p, window)),
        _ => Value::Null,
    };
    ctx.json(
        "response_summary.json",
        &json!({
            "mode": mode,
            "epsilon": pert.epsilon,
            "window": [window.0, window.1],
            "profile_warning": pert.profile.warning(),
            "fdt_qg": compare(&qg),
            "fdt_kde": compare(&kde),
            "score_means": b_means,
        }),
    )?;
    ctx.note("response written");
    Ok(true)
}
