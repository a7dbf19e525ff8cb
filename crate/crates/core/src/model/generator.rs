use super::{PeriodicSdeModel, SmoothScalar};
use crate::error::{Error, Result};

fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}

/// `½ Tr(S Sᵀ H)` for `S` row-major `n × m` and `H` row-major `n × n`.
fn half_trace(s: &[f64], n: usize, m: usize, hess: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            let h = hess[i * n + j];
            if h == 0.0 {
                continue;
            }
            let mut a = 0.0;
            for k in 0..m {
                a += s[i * m + k] * s[j * m + k];
            }
            acc += a * h;
        }
    }
    0.5 * acc
}

/// `Lf(t,x) = ∂_t f + Σ b_i ∂_i f + ½ Σ (σσ*)_{ij} ∂²_{ij} f`.
pub fn generator_apply(model: &PeriodicSdeModel, f: &dyn SmoothScalar, t: f64, x: &[f64]) -> Result<f64> {
    let d = model.dim();
    let m = model.noise_dim();
    check_dim("generator function", d, f.dim())?;
    check_dim("generator point", d, x.len())?;
    let b = model.drift(t, x);
    let s = model.diffusion(t, x);
    let mut grad = vec![0.0; d];
    let mut hess = vec![0.0; d * d];
    f.gradient_into(t, x, &mut grad);
    f.hessian_into(t, x, &mut hess);
    let first: f64 = b.iter().zip(&grad).map(|(bi, gi)| bi * gi).sum();
    Ok(f.time_derivative(t, x) + first + half_trace(&s, d, m, &hess))
}

/// Generator of the two-point motion acting on `g(t, x, y)`, where `g` is a
/// function on `R^{2d}` with the `x` block first. Both points share the noise.
pub fn two_point_generator_apply(
    model: &PeriodicSdeModel,
    g: &dyn SmoothScalar,
    t: f64,
    x: &[f64],
    y: &[f64],
) -> Result<f64> {
    let d = model.dim();
    let m = model.noise_dim();
    check_dim("two-point function", 2 * d, g.dim())?;
    check_dim("two-point x", d, x.len())?;
    check_dim("two-point y", d, y.len())?;
    let z: Vec<f64> = x.iter().chain(y).copied().collect();
    let mut drift = model.drift(t, x);
    drift.extend(model.drift(t, y));
    let mut stacked = model.diffusion(t, x);
    stacked.extend(model.diffusion(t, y));
    let n = 2 * d;
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n * n];
    g.gradient_into(t, &z, &mut grad);
    g.hessian_into(t, &z, &mut hess);
    let first: f64 = drift.iter().zip(&grad).map(|(bi, gi)| bi * gi).sum();
    Ok(g.time_derivative(t, &z) + first + half_trace(&stacked, n, m, &hess))
}

/// Closed form of the two-point generator on `V = |x − y|^p`:
///
/// `p|Δ|^{p−2}⟨b(x)−b(y), Δ⟩ + ½p|Δ|^{p−2}‖D‖²_HS + ½p(p−2)|Δ|^{p−4}|DᵀΔ|²`
///
/// with `Δ = x − y` and `D = σ(x) − σ(y)`. Returns 0 on the diagonal.
pub fn two_point_distance_generator(model: &PeriodicSdeModel, p: f64, t: f64, x: &[f64], y: &[f64]) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::param("p", format!("two-point fast path needs p >= 1, got {p}")));
    }
    let d = model.dim();
    let m = model.noise_dim();
    check_dim("two-point x", d, x.len())?;
    check_dim("two-point y", d, y.len())?;
    let delta: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let r2: f64 = delta.iter().map(|v| v * v).sum();
    if r2 == 0.0 {
        return Ok(0.0);
    }
    let bx = model.drift(t, x);
    let by = model.drift(t, y);
    let sx = model.diffusion(t, x);
    let sy = model.diffusion(t, y);
    let dsig: Vec<f64> = sx.iter().zip(&sy).map(|(a, b)| a - b).collect();
    let inner: f64 = bx.iter().zip(&by).zip(&delta).map(|((a, b), dl)| (a - b) * dl).sum();
    let hs2: f64 = dsig.iter().map(|v| v * v).sum();
    let mut proj2 = 0.0;
    for k in 0..m {
        let mut c = 0.0;
        for i in 0..d {
            c += dsig[i * m + k] * delta[i];
        }
        proj2 += c * c;
    }
    let r = r2.sqrt();
    let rp2 = r.powf(p - 2.0);
    Ok(p * rp2 * inner + 0.5 * p * rp2 * hs2 + 0.5 * p * (p - 2.0) * r.powf(p - 4.0) * proj2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LorenzParams, OuParams, PolyTerm, TauPolynomial, TimeMode};

    fn norm_sq(dim: usize, period: f64) -> TauPolynomial {
        let terms = (0..dim)
            .map(|i| {
                let mut p = vec![0; dim];
                p[i] = 2;
                PolyTerm::new(1.0, p, TimeMode::Const)
            })
            .collect();
        TauPolynomial::new(dim, period, terms).unwrap()
    }

    /// |x − y|² on R^{2d}.
    fn diff_sq(dim: usize, period: f64) -> TauPolynomial {
        let mut terms = Vec::new();
        for i in 0..dim {
            let mut a = vec![0; 2 * dim];
            a[i] = 2;
            let mut b = vec![0; 2 * dim];
            b[dim + i] = 2;
            let mut c = vec![0; 2 * dim];
            c[i] = 1;
            c[dim + i] = 1;
            terms.push(PolyTerm::new(1.0, a, TimeMode::Const));
            terms.push(PolyTerm::new(1.0, b, TimeMode::Const));
            terms.push(PolyTerm::new(-2.0, c, TimeMode::Const));
        }
        TauPolynomial::new(2 * dim, period, terms).unwrap()
    }

    #[test]
    fn ou_square_is_stationary_at_one() {
        let m = PeriodicSdeModel::build_ou(OuParams::new(1.0, 0.0, 1.0, 2f64.sqrt())).unwrap();
        let v = generator_apply(&m, &norm_sq(1, 1.0), 0.0, &[1.0]).unwrap();
        assert!(v.abs() < 1e-14);
    }

    #[test]
    fn constant_function_is_annihilated() {
        let m = PeriodicSdeModel::build_lorenz(LorenzParams::regime_one()).unwrap();
        let c = TauPolynomial::constant(3, 1.0, 4.2);
        assert_eq!(generator_apply(&m, &c, 0.3, &[1.0, -2.0, 5.0]).unwrap(), 0.0);
    }

    #[test]
    fn lorenz_norm_square_value() {
        let m = PeriodicSdeModel::build_lorenz(LorenzParams::regime_one()).unwrap();
        let v = generator_apply(&m, &norm_sq(3, 1.0), 0.0, &[1.0, 0.0, 0.0]).unwrap();
        assert!((v - 185.44).abs() < 1e-10, "{v}");
    }

    #[test]
    fn generator_is_linear() {
        let m = PeriodicSdeModel::build_lorenz(LorenzParams::regime_one()).unwrap();
        let f = norm_sq(3, 1.0);
        let g = TauPolynomial::new(
            3,
            1.0,
            vec![
                PolyTerm::new(1.5, vec![1, 1, 0], TimeMode::Cos(1)),
                PolyTerm::new(-0.3, vec![0, 0, 3], TimeMode::Const),
            ],
        )
        .unwrap();
        let (alpha, beta) = (0.7, -2.3);
        let mut terms: Vec<PolyTerm> = f.terms().iter().map(|t| PolyTerm::new(alpha * t.coeff, t.powers.clone(), t.time)).collect();
        terms.extend(g.terms().iter().map(|t| PolyTerm::new(beta * t.coeff, t.powers.clone(), t.time)));
        let combo = TauPolynomial::new(3, 1.0, terms).unwrap();
        for k in 0..10 {
            let x = [k as f64 * 0.3 - 1.0, 2.0 - k as f64 * 0.1, 0.5 * k as f64];
            let t = 0.07 * k as f64;
            let lhs = generator_apply(&m, &combo, t, &x).unwrap();
            let rhs = alpha * generator_apply(&m, &f, t, &x).unwrap() + beta * generator_apply(&m, &g, t, &x).unwrap();
            assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = PeriodicSdeModel::build_ou(OuParams::new(1.0, 0.0, 1.0, 1.0)).unwrap();
        assert!(generator_apply(&m, &norm_sq(2, 1.0), 0.0, &[1.0]).is_err());
        assert!(generator_apply(&m, &norm_sq(1, 1.0), 0.0, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn two_point_on_diagonal_vanishes() {
        let m = PeriodicSdeModel::build_lorenz(LorenzParams::regime_one()).unwrap();
        let x = [1.0, 2.0, -3.0];
        let v = two_point_generator_apply(&m, &diff_sq(3, 1.0), 0.1, &x, &x).unwrap();
        assert!(v.abs() < 1e-10);
        assert_eq!(two_point_distance_generator(&m, 2.0, 0.1, &x, &x).unwrap(), 0.0);
    }

    #[test]
    fn two_point_ou_additive_noise_cancels() {
        let a = 1.7;
        let m = PeriodicSdeModel::build_ou(OuParams::new(a, 1.0, 1.0, 0.8)).unwrap();
        let (x, y) = ([0.9], [-0.4]);
        let expected = -2.0 * a * (x[0] - y[0]) * (x[0] - y[0]);
        let generic = two_point_generator_apply(&m, &diff_sq(1, 1.0), 0.3, &x, &y).unwrap();
        let fast = two_point_distance_generator(&m, 2.0, 0.3, &x, &y).unwrap();
        assert!((generic - expected).abs() < 1e-12);
        assert!((fast - expected).abs() < 1e-12);
    }

    #[test]
    fn fast_path_matches_generic_for_p2() {
        let m = PeriodicSdeModel::build_lorenz(LorenzParams::regime_one()).unwrap();
        let x = [3.0, -1.0, 2.0];
        let y = [2.5, 0.5, -1.0];
        let generic = two_point_generator_apply(&m, &diff_sq(3, 1.0), 0.4, &x, &y).unwrap();
        let fast = two_point_distance_generator(&m, 2.0, 0.4, &x, &y).unwrap();
        assert!((generic - fast).abs() < 1e-9 * generic.abs().max(1.0));
    }

    #[test]
    fn fast_path_rejects_small_p() {
        let m = PeriodicSdeModel::build_ou(OuParams::new(1.0, 0.0, 1.0, 1.0)).unwrap();
        assert!(two_point_distance_generator(&m, 0.5, 0.0, &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn lorenz_two_point_bound_holds_on_random_pairs() {
        use rand::{Rng, SeedableRng};
        let params = LorenzParams::regime_one();
        let m = PeriodicSdeModel::build_lorenz(params).unwrap();
        let c_a = params.coercivity();
        let s2 = params.sigma_bar * params.sigma_bar;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2000 {
            let p = rng.random_range(2.0..4.0);
            let v: Vec<f64> = (0..3).map(|_| rng.random_range(-50.0..50.0)).collect();
            let w: Vec<f64> = (0..3).map(|_| rng.random_range(-50.0..50.0)).collect();
            let t = rng.random_range(0.0..1.0);
            let r: f64 = v.iter().zip(&w).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let bound = (p * nv - p * c_a + 0.5 * s2 * p * (p - 1.0)) * r.powf(p);
            let lhs = two_point_distance_generator(&m, p, t, &v, &w).unwrap();
            assert!(lhs <= bound + 1e-9 * bound.abs().max(1.0), "p={p} lhs={lhs} bound={bound}");
        }
    }
}
