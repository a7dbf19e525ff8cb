use proptest::prelude::*;

use rpmeas::dissipativity::{coeffs_ap_bp, jensen_chain, moment_bound_curve, sharp_bounds, GrowthEnvelope};
use rpmeas::response::{convolve_response, Provenance, ResponseTable, TimeProfile};

/// `R(u, r) = e^{−u}` at every phase, lags `0, du, …, max_lag`.
fn exp_table(du: f64, max_lag: f64) -> ResponseTable {
    let lags: Vec<f64> = (0..=(max_lag / du).round() as usize).map(|l| l as f64 * du).collect();
    let phases = vec![0.0, 0.5];
    let r: Vec<f64> = phases.iter().flat_map(|_| lags.iter().map(|u| (-u).exp())).collect();
    ResponseTable {
        provenance: Provenance::FdtQg,
        phases,
        n_paths: 1,
        period: 1.0,
        labels: vec!["x".into()],
        stderr: vec![0.0; r.len()],
        b_mean: vec![0.0; 2],
        b_stderr: vec![0.0; 2],
        lags,
        r,
    }
}

proptest! {
    #[test]
    fn sharp_second_moment_never_worse(l1 in 0.0..10.0f64, l2 in 0.01..10.0f64, ls in 0.0..5.0f64) {
        let env = GrowthEnvelope::constant(l1, l2, ls);
        let g = coeffs_ap_bp(&env, 2.0).unwrap();
        let s = sharp_bounds(&env, None).unwrap();
        prop_assert!(s.b2 >= g.b_p - 1e-12);
        if g.pass {
            prop_assert!(s.bound2 <= g.bound * (1.0 + 1e-12));
        }
    }

    #[test]
    fn jensen_chain_holds(l1 in 0.0..10.0f64, ls in 0.0..5.0f64, gap in 0.01..10.0f64) {
        let j = jensen_chain(&GrowthEnvelope::constant(l1, ls + gap, ls)).unwrap();
        prop_assert!(j.holds);
        prop_assert!(j.sharp3 <= j.stated_sharp3 * (1.0 + 1e-12));
    }

    #[test]
    fn moment_curve_moves_monotonically_to_its_limit(a in 0.0..10.0f64, b in 0.01..5.0f64, m0 in 0.0..20.0f64) {
        let times: Vec<f64> = (0..50).map(|i| i as f64 * 0.2).collect();
        let c = moment_bound_curve(a, b, m0, &times).unwrap();
        let limit = a / b;
        prop_assert!((c[0] - m0).abs() <= 1e-12 * m0.max(1.0));
        for w in c.windows(2) {
            if m0 <= limit {
                prop_assert!(w[1] >= w[0] - 1e-12 && w[1] <= limit * (1.0 + 1e-12));
            } else {
                prop_assert!(w[1] <= w[0] + 1e-12 && w[1] >= limit * (1.0 - 1e-12));
            }
        }
    }

    #[test]
    fn profiles_stay_in_range(t in -5.0..50.0f64, t0 in 0.0..10.0f64, dt in 0.1..5.0f64, w in 0.1..10.0f64) {
        let ramp = TimeProfile::RampedStep { t0, delta_t: dt }.eval(t);
        prop_assert!((0.0..=1.0).contains(&ramp));
        let cos = TimeProfile::CosineModulatedRamp { t0, delta_t: dt, omega_mod: w }.eval(t);
        prop_assert!((0.0..=2.0 + 1e-12).contains(&cos));
        let h = TimeProfile::HeavisideCosSq { t_on: t0, omega: w }.eval(t);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&h));
        if t < t0 {
            prop_assert_eq!(ramp, 0.0);
            prop_assert_eq!(cos, 0.0);
            prop_assert_eq!(h, 0.0);
        }
    }

    #[test]
    fn convolution_is_linear_in_epsilon(eps in -2.0..2.0f64, t0 in 0.0..3.0f64) {
        let table = exp_table(0.01, 10.0);
        let prof = TimeProfile::RampedStep { t0, delta_t: 1.5 };
        let times: Vec<f64> = (0..40).map(|i| i as f64 * 0.25).collect();
        let one = convolve_response(&table, &prof, 1.0, &times).unwrap();
        let scaled = convolve_response(&table, &prof, eps, &times).unwrap();
        for (a, b) in one.values[0].iter().zip(&scaled.values[0]) {
            prop_assert!((eps * a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}

#[test]
fn convolution_of_exponential_kernel_with_step() {
    let table = exp_table(0.01, 10.0);
    let step = TimeProfile::Table {
        times: vec![0.0],
        values: vec![1.0],
    };
    let times: Vec<f64> = (1..=40).map(|i| i as f64 * 0.25).collect();
    let c = convolve_response(&table, &step, 0.5, &times).unwrap();
    for (t, v) in times.iter().zip(&c.values[0]) {
        // Trapezoid error of ∫₀ᵗ e^{−u} du is below du²/12.
        assert!((v - 0.5 * (1.0 - (-t).exp())).abs() < 1e-5, "t = {t}: {v}");
    }
}
