use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::bases::{DetrendKind, EffectKind, PhiSpec};
use crate::data::{split_pre_post, PanelData};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn factor_panel(t: usize, t0: usize, n: usize, seed: u64) -> PanelData<f64> {
    let mut r = rng(seed);
    let f: Vec<f64> = (0..t).map(|_| r.random_range(-1.0f64..1.0)).collect();
    let w = Array2::from_shape_fn((t, n), |(i, j)| f[i] * (1.0 + j as f64 * 0.3) + r.random_range(-0.5f64..0.5));
    let y = Array1::from_shape_fn(t, |i| 1.5 * f[i] + r.random_range(-0.5f64..0.5) + if i >= t0 { 2.0 } else { 0.0 });
    PanelData::new(y, w, t0).unwrap()
}

/// Gaussian elimination without pivoting tricks, written out longhand.
fn gauss(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x
}

#[test]
fn detrend_exact_line_has_zero_residuals() {
    let y = Array1::from_shape_fn(12, |i| 3.0 - 0.5 * (i + 1) as f64);
    let p = PanelData::new(y, Array2::ones((12, 1)), 10).unwrap();
    let (pre, _) = split_pre_post(&p);
    let spec = DetrendSpec::new(DetrendKind::InterceptLinear, 1, 10).unwrap();
    let eta = fit_detrend(&pre, &spec).unwrap();
    for (r, &t) in pre.times().iter().enumerate() {
        let fit = spec.eval::<f64>(t).unwrap().dot(&eta);
        assert!((pre.y()[r] - fit).abs() < 1e-12);
    }
}

#[test]
fn detrend_bspline_matches_explicit_normal_equations() {
    let mut r = rng(3);
    let y = Array1::from_shape_fn(60, |_| r.random_range(-2.0f64..2.0));
    let p = PanelData::new(y, Array2::ones((60, 1)), 50).unwrap();
    let (pre, _) = split_pre_post(&p);
    let spec = DetrendSpec::new(DetrendKind::CubicBspline(6), 1, 50).unwrap();
    let eta = fit_detrend(&pre, &spec).unwrap();
    let mut a = vec![vec![0.0; 6]; 6];
    let mut b = vec![0.0; 6];
    for t in 1..=50 {
        let d = spec.eval::<f64>(t).unwrap();
        for i in 0..6 {
            b[i] += d[i] * pre.y()[t - 1];
            for j in 0..6 {
                a[i][j] += d[i] * d[j];
            }
        }
    }
    let want = gauss(a, b);
    for i in 0..6 {
        assert!((eta[i] - want[i]).abs() < 1e-10);
    }
    // residuals orthogonal to the basis
    let design = spec.design::<f64>(pre.times()).unwrap();
    let resid = &pre.y() - &design.dot(&eta);
    let ynorm = pre.y().dot(&pre.y()).sqrt();
    assert!(design.t().dot(&resid).iter().all(|v| v.abs() <= 1e-8 * ynorm));
}

#[test]
fn moments_two_point_example() {
    let p = PanelData::new(array![1.0, 2.0, 0.0], array![[2.0], [4.0], [0.0]], 2).unwrap();
    let (pre, _) = split_pre_post(&p);
    let cfg = EstimatorConfig::<f64>::spsc_nodt();
    let m = compute_moments(&pre, Array1::zeros(0).view(), &cfg).unwrap();
    assert_eq!(m.g_yw[[0, 0]], 5.0);
    assert_eq!(m.g_yy[0], 2.5);
    let gamma = solve_weights(&m, Array2::eye(1).view(), 0.0).unwrap();
    assert_eq!(gamma[0], 0.5);
    let gamma = solve_weights(&m, Array2::eye(1).view(), 25.0).unwrap();
    assert!((gamma[0] - 0.25).abs() < 1e-15);
}

#[test]
fn moments_match_triple_loop() {
    let y = array![0.3, -1.2, 2.5, 0.7, 1.1];
    let w = array![[1.0, 0.5], [-0.4, 2.0], [0.9, -1.5], [1.7, 0.2], [0.0, 0.0]];
    let p = PanelData::new(y.clone(), w.clone(), 4).unwrap();
    let (pre, _) = split_pre_post(&p);
    let cfg = EstimatorConfig::<f64>::spsc_nodt().with_detrend(DetrendKind::InterceptLinear);
    let eta = array![0.2, -0.1];
    let m = compute_moments(&pre, eta.view(), &cfg).unwrap();
    let mut gw = [[0.0; 2]; 3];
    let mut gy = [0.0; 3];
    for t in 1..=4usize {
        let d = [1.0, t as f64 / 4.0];
        let g = [d[0], d[1], y[t - 1] - d[0] * eta[0] - d[1] * eta[1]];
        for i in 0..3 {
            gy[i] += g[i] * y[t - 1] / 4.0;
            for j in 0..2 {
                gw[i][j] += g[i] * w[[t - 1, j]] / 4.0;
            }
        }
    }
    for i in 0..3 {
        assert!((m.g_yy[i] - gy[i]).abs() < 1e-12);
        for j in 0..2 {
            assert!((m.g_yw[[i, j]] - gw[i][j]).abs() < 1e-12);
        }
    }
    // moment residual identity
    let gamma = array![0.4, -0.3];
    let lhs = &m.g_yy - &m.g_yw.dot(&gamma);
    let mut rhs = Array1::<f64>::zeros(3);
    for t in 1..=4usize {
        let d = [1.0, t as f64 / 4.0];
        let g = array![d[0], d[1], y[t - 1] - d[0] * eta[0] - d[1] * eta[1]];
        rhs.scaled_add((y[t - 1] - w.row(t - 1).dot(&gamma)) / 4.0, &g);
    }
    assert!((&lhs - &rhs).iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn heavy_ridge_shrinks_to_zero() {
    let p = factor_panel(40, 30, 4, 1);
    let cfg = EstimatorConfig::spsc_nodt().with_rho(1e9);
    let fit = fit(&p, &cfg).unwrap();
    assert!(fit.gamma.dot(&fit.gamma).sqrt() <= 1e-6);
}

#[test]
fn ridge_solution_zeroes_objective_gradient() {
    let p = factor_panel(40, 30, 4, 2);
    let cfg = EstimatorConfig::spsc_nodt().with_phi(PhiSpec::Polynomial(2)).with_rho(0.05);
    let (pre, _) = split_pre_post(&p);
    let m = compute_moments(&pre, Array1::zeros(0).view(), &cfg).unwrap();
    let gamma = solve_weights(&m, Array2::eye(2).view(), 0.05).unwrap();
    let resid = &m.g_yy - &m.g_yw.dot(&gamma);
    let grad = &(m.g_yw.t().dot(&resid) * -2.0) + &(&gamma * 0.1);
    assert!(grad.iter().all(|v| v.abs() < 1e-8));
}

#[test]
fn singular_at_zero_rho_is_reported() {
    let p = factor_panel(40, 30, 4, 3);
    let err = fit(&p, &EstimatorConfig::spsc_nodt().with_rho(0.0)).unwrap_err();
    assert!(matches!(err, SpscError::SingularAtZeroRho));
    assert!(err.to_string().contains("rho > 0"));
}

#[test]
fn non_pd_weight_matrix_is_rejected() {
    let p = factor_panel(40, 30, 1, 3);
    let mut cfg = EstimatorConfig::spsc_nodt().with_rho(0.1);
    cfg.omega_g = OmegaG::Matrix(array![[-1.0]]);
    assert!(matches!(fit(&p, &cfg), Err(SpscError::NotPositiveDefinite)));
}

#[test]
fn effect_fits() {
    let times: Vec<usize> = (101..=150).collect();
    let model = EffectModel::new(EffectKind::Constant, 100, 50).unwrap();
    let r = Array1::from_shape_fn(50, |i| (i as f64).sin());
    let beta = fit_effect_rows(&model, &times, r.view()).unwrap();
    assert!((beta[0] - r.mean().unwrap()).abs() < 1e-14);

    let model = EffectModel::new(EffectKind::Linear, 100, 50).unwrap();
    let r = Array1::from_shape_fn(50, |i| 1.0 - 0.7 * (i + 1) as f64 / 50.0);
    let beta = fit_effect_rows(&model, &times, r.view()).unwrap();
    assert!((beta[0] - 1.0).abs() < 1e-12 && (beta[1] + 0.7).abs() < 1e-12);

    let model = EffectModel::new(EffectKind::Exponential, 100, 50).unwrap();
    let r = Array1::from_shape_fn(50, |i| (0.2 + 0.5 * (i + 1) as f64 / 50.0).exp());
    let beta = fit_effect_rows(&model, &times, r.view()).unwrap();
    assert!((beta[0] - 0.2).abs() < 1e-6 && (beta[1] - 0.5).abs() < 1e-6);

    let model = EffectModel::new(EffectKind::Bspline(5), 100, 50).unwrap();
    assert!(fit_effect_rows(&model, &times[..4], r.slice(ndarray::s![..4])).is_err());
}

#[test]
fn self_match_gives_unit_weight_and_zero_effect() {
    let y = Array1::from_shape_fn(20, |i| ((i * 7) % 5) as f64 - 1.3);
    let w = y.clone().insert_axis(ndarray::Axis(1));
    let p = PanelData::new(y, w, 15).unwrap();
    let fit = fit(&p, &EstimatorConfig::spsc_nodt().with_rho(0.0)).unwrap();
    assert!((fit.gamma[0] - 1.0).abs() < 1e-14);
    assert!(fit.residuals.iter().all(|v| v.abs() < 1e-14));
    assert!(fit.beta[0].abs() < 1e-14);
}

#[test]
fn ols_examples() {
    let y = Array1::from_shape_fn(10, |i| (i as f64).cos());
    let p = PanelData::new(y.clone(), y.clone().insert_axis(ndarray::Axis(1)), 8).unwrap();
    let (pre, _) = split_pre_post(&p);
    assert!((ols_weights(&pre).unwrap()[0] - 1.0).abs() < 1e-14);

    let mut r = rng(4);
    let w = Array2::from_shape_fn((50, 3), |_| r.random_range(-1.0f64..1.0));
    let y = &(&w.column(0) * 2.0) - &w.column(1);
    let p = PanelData::new(y, w.clone(), 40).unwrap();
    let (pre, _) = split_pre_post(&p);
    let g = ols_weights(&pre).unwrap();
    assert!((g[0] - 2.0).abs() < 1e-12 && (g[1] + 1.0).abs() < 1e-12 && g[2].abs() < 1e-12);

    let yn = Array1::from_shape_fn(50, |_| r.random_range(-1.0f64..1.0));
    let p = PanelData::new(yn.clone(), w.clone(), 49).unwrap();
    let (pre, _) = split_pre_post(&p);
    let g = ols_weights(&pre).unwrap();
    let mut a = vec![vec![0.0; 3]; 3];
    let mut b = vec![0.0; 3];
    for t in 0..49 {
        for i in 0..3 {
            b[i] += w[[t, i]] * yn[t];
            for j in 0..3 {
                a[i][j] += w[[t, i]] * w[[t, j]];
            }
        }
    }
    let want = gauss(a, b);
    for i in 0..3 {
        assert!((g[i] - want[i]).abs() < 1e-10);
    }
}

#[test]
fn donor_permutation_equivariance() {
    let p = factor_panel(60, 40, 4, 5);
    let perm = [2usize, 0, 3, 1];
    let wp = Array2::from_shape_fn((60, 4), |(t, j)| p.w()[[t, perm[j]]]);
    let q = PanelData::new(p.y().to_owned(), wp, 40).unwrap();
    let cfg = EstimatorConfig::spsc_dt().with_rho(0.01);
    let a = fit(&p, &cfg).unwrap();
    let b = fit(&q, &cfg).unwrap();
    for j in 0..4 {
        assert!((b.gamma[j] - a.gamma[perm[j]]).abs() < 1e-12);
    }
    assert!((a.beta[0] - b.beta[0]).abs() < 1e-12);
    assert!((&a.residuals - &b.residuals).iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn duplicated_donor_splits_weight() {
    let mut r = rng(6);
    let base = Array2::from_shape_fn((80, 2), |_| r.random_range(-1.0f64..1.0));
    let y = Array1::from_shape_fn(80, |t| base[[t, 0]] + 0.5 * base[[t, 1]]);
    let w = Array2::from_shape_fn((80, 3), |(t, j)| base[[t, j.min(1)]]);
    let p = PanelData::new(y, w, 60).unwrap();
    let cfg = EstimatorConfig::spsc_nodt().with_phi(PhiSpec::Polynomial(3)).with_rho(1e-10);
    let fit = fit(&p, &cfg).unwrap();
    assert!((fit.gamma[0] - 1.0).abs() < 1e-4);
    assert!((fit.gamma[1] - 0.25).abs() < 1e-4 && (fit.gamma[2] - 0.25).abs() < 1e-4);
}

#[test]
fn joint_scaling_equivariance() {
    let p = factor_panel(60, 40, 1, 7);
    let c = 3.5;
    let q = PanelData::new(&p.y() * c, &p.w() * c, 40).unwrap();
    let cfg = EstimatorConfig::spsc_nodt().with_rho(0.0);
    let a = fit(&p, &cfg).unwrap();
    let b = fit(&q, &cfg).unwrap();
    assert!((a.gamma[0] - b.gamma[0]).abs() < 1e-10);
    assert!((a.beta[0] * c - b.beta[0]).abs() < 1e-10);
}

#[test]
fn staged_fit_minimizes_joint_objective() {
    // With de-trending the φ block depends on η, and the staged (OLS η̂)
    // solution is only the joint minimizer when that block can be zeroed;
    // without it the separation is exact.
    let p = factor_panel(50, 35, 3, 8);
    let cfg =
        EstimatorConfig::spsc_nodt().with_phi(PhiSpec::Polynomial(2)).with_rho(0.02).with_effect(EffectKind::Linear);
    let f = fit(&p, &cfg).unwrap();
    let obj = |e: &Array1<f64>, g: &Array1<f64>, b: &Array1<f64>| {
        objective(&p, &f.model, f.omega_g.view(), f.rho_used, e.view(), g.view(), b.view()).unwrap()
    };
    let base = obj(&f.eta, &f.gamma, &f.beta);
    let mut r = rng(9);
    for _ in 0..100 {
        let mut pert = |v: &Array1<f64>| v.mapv(|x| x + r.random_range(-1e-3..1e-3));
        let (e, g, b) = (pert(&f.eta), pert(&f.gamma), pert(&f.beta));
        assert!(obj(&e, &g, &b) >= base);
    }
}

#[test]
fn staged_fit_matches_numeric_minimizer() {
    // dim g = 3 ≥ N = 2, no de-trending, so the objective is a quadratic in
    // (γ, β) once the cubic φ is fixed.
    let p = factor_panel(50, 35, 2, 10);
    let cfg = EstimatorConfig::spsc_nodt().with_phi(PhiSpec::Polynomial(3)).with_rho(0.0);
    let f = fit(&p, &cfg).unwrap();
    let empty = Array1::<f64>::zeros(0);
    let obj = |x: &Array1<f64>| {
        objective(
            &p,
            &f.model,
            f.omega_g.view(),
            0.0,
            empty.view(),
            x.slice(ndarray::s![..2]),
            x.slice(ndarray::s![2..]),
        )
        .unwrap()
    };
    // plain gradient descent with a finite-difference Hessian step
    let mut x = Array1::<f64>::zeros(3);
    for _ in 0..50 {
        let h = 1e-4;
        let mut grad = Array1::<f64>::zeros(3);
        let mut hess = Array2::<f64>::zeros((3, 3));
        for i in 0..3 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            grad[i] = (obj(&xp) - obj(&xm)) / (2.0 * h);
            for j in 0..3 {
                let e = |si: f64, sj: f64| {
                    let mut z = x.clone();
                    z[i] += si * h;
                    z[j] += sj * h;
                    obj(&z)
                };
                hess[[i, j]] = (e(1.0, 1.0) - e(1.0, -1.0) - e(-1.0, 1.0) + e(-1.0, -1.0)) / (4.0 * h * h);
            }
        }
        let step = crate::linalg::lu_solve(hess.view(), grad.view()).unwrap();
        x = &x - &step;
    }
    assert!((x[0] - f.gamma[0]).abs() < 1e-6 && (x[1] - f.gamma[1]).abs() < 1e-6);
    assert!((x[2] - f.beta[0]).abs() < 1e-6);
}

#[test]
fn ridge_path_is_continuous() {
    let p = factor_panel(60, 40, 4, 11);
    let grid = crate::cv::log_grid(1e-3, 1.0, 30);
    let fits: Vec<_> = grid.iter().map(|&r| fit(&p, &EstimatorConfig::spsc_dt().with_rho(r)).unwrap()).collect();
    let mut c: f64 = 0.0;
    for k in 1..grid.len() {
        let d = (&fits[k].gamma - &fits[k - 1].gamma).dot(&(&fits[k].gamma - &fits[k - 1].gamma)).sqrt();
        c = c.max(d / (grid[k] - grid[k - 1]));
    }
    assert!(c.is_finite());
    // penalty grows, fit term never improves as ρ increases
    let norms: Vec<f64> = fits.iter().map(|f| f.gamma.dot(&f.gamma)).collect();
    assert!(norms.windows(2).all(|n| n[1] <= n[0] * (1.0 + 1e-9)));
}

#[test]
fn zero_covariates_reproduce_plain_fit() {
    let p = factor_panel(50, 35, 3, 12);
    let q = p.clone().with_covariates(Array2::zeros((50, 2)), Array2::zeros((50, 6))).unwrap();
    let cfg = EstimatorConfig::spsc_dt().with_rho(0.01);
    let a = fit(&p, &cfg).unwrap();
    let b = fit(&q, &cfg).unwrap();
    assert_eq!(a.gamma, b.gamma);
    assert_eq!(a.beta, b.beta);
    assert!(b.delta0.as_ref().unwrap().iter().all(|v| *v == 0.0));
    assert!(b.delta.as_ref().unwrap().iter().all(|v| *v == 0.0));
    assert!(!b.has_covariates());
}

#[test]
fn covariate_shift_is_recovered() {
    let mut r = rng(13);
    let (t, t0, n) = (60, 45, 2);
    let w = Array2::from_shape_fn((t, n), |_| r.random_range(-1.0f64..1.0));
    let x0 = Array2::from_shape_fn((t, 1), |_| r.random_range(-1.0f64..1.0));
    let x = Array2::from_shape_fn((t, n), |_| r.random_range(-1.0f64..1.0));
    let (gamma, delta0, delta) = (array![0.7, -0.4], 1.3, array![0.5, -0.2]);
    let y = Array1::from_shape_fn(t, |i| {
        w.row(i).dot(&gamma) + x0[[i, 0]] * delta0 - x.row(i).dot(&delta) + if i >= t0 { 2.0 } else { 0.0 }
    });
    let p = PanelData::new(y, w, t0).unwrap().with_covariates(x0, x).unwrap();
    let cfg = EstimatorConfig::spsc_nodt().with_phi(PhiSpec::Polynomial(2)).with_rho(0.0);
    let f = fit(&p, &cfg).unwrap();
    assert!(f.has_covariates());
    assert!((f.delta0.as_ref().unwrap()[0] - delta0).abs() < 1e-8, "{:?}", f.delta0);
    assert!((&f.gamma - &gamma).iter().all(|v| v.abs() < 1e-8));
    assert!((&f.delta.clone().unwrap() - &delta).iter().all(|v| v.abs() < 1e-8));
    assert!((f.beta[0] - 2.0).abs() < 1e-8);
    assert!(f.residuals.iter().take(t0).all(|v| v.abs() < 1e-8));
}

#[test]
fn single_precision_fit_runs() {
    let p = factor_panel(40, 30, 2, 14);
    let y = p.y().mapv(|v| v as f32);
    let w = p.w().mapv(|v| v as f32);
    let q = PanelData::new(y, w, 30).unwrap();
    let f32_fit = fit(&q, &EstimatorConfig::spsc_dt().with_rho(0.1f32)).unwrap();
    let f64_fit = fit(&p, &EstimatorConfig::spsc_dt().with_rho(0.1)).unwrap();
    assert!((f32_fit.beta[0] as f64 - f64_fit.beta[0]).abs() < 1e-3);
}
