//! Leave-one-out cross-validation of the ridge parameter.
//!
//! Fold `t` drops the pre-period row `t` from the moment matrices (a rank-one
//! downdate of the full sums), solves for `γ̂_(−t),ρ` and scores the held-out
//! residual `Y_t − W_tᵀγ̂_(−t),ρ`. By default `η̂` comes from the full
//! pre-period, so the held-out row still informs the de-trending fit.

use ndarray::{Array1, Array2, ArrayView1};

use crate::data::PreView;
use crate::error::{Result, SpscError};
use crate::estimator::{compute_moments, fit_detrend_rows, EstimatorConfig, ResolvedModel};
use crate::linalg;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct LoocvResult<S> {
    pub grid: Vec<S>,
    pub mse: Vec<S>,
    pub rho_opt: S,
    /// Held-out residuals, one row per grid value and one column per
    /// pre-period row.
    pub residuals: Array2<S>,
}

/// 20 log-spaced values from `1e−8·s` to `s/T₀`, `s = tr(Ĝ_YWᵀĜ_YW)/N`.
/// The upper end shrinks with the pre-period so the selected `ρ` is
/// `o(T^{-1/2})`.
pub fn default_grid<S: Scalar>(pre: &PreView<'_, S>, cfg: &EstimatorConfig<S>, eta: ArrayView1<S>) -> Result<Vec<S>> {
    let m = compute_moments(pre, eta, cfg)?;
    let n = S::from_usize_lossy(m.g_yw.ncols());
    let mut scale = m.g_yw.iter().map(|v| *v * *v).sum::<S>() / n;
    if !(scale > S::zero()) || !scale.is_finite() {
        scale = S::one();
    }
    let top = scale / S::from_usize_lossy(pre.len());
    Ok(log_grid(scale * S::lit(1e-8), top, 20))
}

/// `k` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid<S: Scalar>(lo: S, hi: S, k: usize) -> Vec<S> {
    if k == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..k).map(|i| (a + (b - a) * S::from_usize_lossy(i) / S::from_usize_lossy(k - 1)).exp()).collect()
}

/// Runs leave-one-out cross-validation over `grid` and returns the
/// minimizing `ρ` (ties go to the larger value).
pub fn loocv_rho<S: Scalar>(pre: &PreView<'_, S>, cfg: &EstimatorConfig<S>, grid: &[S]) -> Result<LoocvResult<S>> {
    if grid.is_empty() || grid.iter().any(|r| !(*r > S::zero()) || !r.is_finite()) {
        return Err(SpscError::InvalidSpec("LOOCV grid must be nonempty and strictly positive".into()));
    }
    let model = ResolvedModel::for_panel(pre.panel(), cfg)?;
    let d = model.d();
    let t0 = pre.len();
    if t0 < d + 2 {
        return Err(SpscError::TooFewObservations(format!("LOOCV needs at least {} pre-period rows, got {t0}", d + 2)));
    }
    let omega = cfg.omega_matrix(model.g_dim())?;
    let (times, y, w) = (pre.times(), pre.y(), pre.w());
    let n = w.ncols();
    let k = model.g_dim();

    let row_g = |eta: ArrayView1<S>| -> Result<Vec<Array1<S>>> {
        times.iter().enumerate().map(|(r, &t)| model.g(t, y[r], eta)).collect()
    };
    let sums = |gs: &[Array1<S>], skip: Option<usize>| -> (Array2<S>, Array1<S>) {
        let mut gw = Array2::<S>::zeros((k, n));
        let mut gy = Array1::<S>::zeros(k);
        for (r, g) in gs.iter().enumerate() {
            if Some(r) == skip {
                continue;
            }
            gy.scaled_add(y[r], g);
            for i in 0..k {
                for j in 0..n {
                    gw[[i, j]] += g[i] * w[[r, j]];
                }
            }
        }
        (gw, gy)
    };

    let eta_full = fit_detrend_rows(&model.detrend, times, y)?;
    let g_full = row_g(eta_full.view())?;
    let (sw_full, sy_full) = sums(&g_full, None);
    let denom = S::from_usize_lossy(t0 - 1);

    let mut residuals = Array2::<S>::zeros((grid.len(), t0));
    for t in 0..t0 {
        let (gw, gy) = if cfg.refit_eta_per_fold {
            let keep: Vec<usize> = (0..t0).filter(|&r| r != t).collect();
            let kt: Vec<usize> = keep.iter().map(|&r| times[r]).collect();
            let ky = Array1::from_iter(keep.iter().map(|&r| y[r]));
            let eta = fit_detrend_rows(&model.detrend, &kt, ky.view())?;
            sums(&row_g(eta.view())?, Some(t))
        } else {
            let g = &g_full[t];
            let mut gw = sw_full.clone();
            for i in 0..k {
                for j in 0..n {
                    gw[[i, j]] -= g[i] * w[[t, j]];
                }
            }
            (gw, &sy_full - &(g * y[t]))
        };
        let gw = gw / denom;
        let gy = gy / denom;
        let gto = gw.t().dot(&omega);
        let a = gto.dot(&gw);
        let b = gto.dot(&gy);
        for (gi, &rho) in grid.iter().enumerate() {
            let mut ar = a.clone();
            ar.diag_mut().map_inplace(|v| *v += rho);
            let l = linalg::cholesky(ar.view()).ok_or(SpscError::Singular("LOOCV ridge"))?;
            let gamma = linalg::cholesky_solve(&l, b.view());
            residuals[[gi, t]] = y[t] - w.row(t).dot(&gamma);
        }
    }

    let tn = S::from_usize_lossy(t0);
    let mse: Vec<S> = residuals.rows().into_iter().map(|r| r.dot(&r) / tn).collect();
    let mut best = 0;
    for i in 1..grid.len() {
        if mse[i] < mse[best] || (mse[i] == mse[best] && grid[i] > grid[best]) {
            best = i;
        }
    }
    Ok(LoocvResult { grid: grid.to_vec(), rho_opt: grid[best], mse, residuals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_pre_post, PanelData};
    use crate::estimator::{solve_weights, MomentMatrices};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_panel(t: usize, t0: usize, n: usize, seed: u64) -> PanelData<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Array2::from_shape_fn((t, n), |_| rng.random_range(-1.0..1.0));
        let y = Array1::from_shape_fn(t, |r| w.row(r).sum() * 0.4 + rng.random_range(-0.3..0.3));
        PanelData::new(y, w, t0).unwrap()
    }

    /// Residuals from a from-scratch refit on the rows other than `t`, with
    /// `η̂` taken from the full pre-period.
    fn brute_force(p: &PanelData<f64>, cfg: &EstimatorConfig<f64>, rho: f64, t: usize) -> f64 {
        let (pre, _) = split_pre_post(p);
        let model = ResolvedModel::for_panel(p, cfg).unwrap();
        let eta = fit_detrend_rows(&model.detrend, pre.times(), pre.y()).unwrap();
        let k = model.g_dim();
        let mut gw = Array2::<f64>::zeros((k, p.n_donors()));
        let mut gy = Array1::<f64>::zeros(k);
        let mut count = 0.0;
        for r in 0..pre.len() {
            if r == t {
                continue;
            }
            let g = model.g(pre.times()[r], pre.y()[r], eta.view()).unwrap();
            for i in 0..k {
                gy[i] += g[i] * pre.y()[r];
                for j in 0..p.n_donors() {
                    gw[[i, j]] += g[i] * pre.w()[[r, j]];
                }
            }
            count += 1.0;
        }
        let m = MomentMatrices { g_yw: gw / count, g_yy: gy / count };
        let gamma = solve_weights(&m, Array2::eye(k).view(), rho).unwrap();
        pre.y()[t] - pre.w().row(t).dot(&gamma)
    }

    #[test]
    fn matches_brute_force_refits() {
        let p = random_panel(14, 10, 3, 5);
        let (pre, _) = split_pre_post(&p);
        let cfg = EstimatorConfig::<f64>::spsc_dt().with_detrend(crate::bases::DetrendKind::InterceptLinear);
        let grid = log_grid(1e-4, 10.0, 5);
        let res = loocv_rho(&pre, &cfg, &grid).unwrap();
        for (gi, &rho) in grid.iter().enumerate() {
            for t in 0..10 {
                let want = brute_force(&p, &cfg, rho, t);
                assert!((res.residuals[[gi, t]] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_grid_point_is_selected() {
        let p = random_panel(14, 10, 3, 1);
        let (pre, _) = split_pre_post(&p);
        let res = loocv_rho(&pre, &EstimatorConfig::spsc_nodt(), &[0.3]).unwrap();
        assert_eq!(res.rho_opt, 0.3);
    }

    #[test]
    fn perfect_fit_prefers_smallest_rho() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = Array2::from_shape_fn((30, 3), |_| rng.random_range(-1.0..1.0));
        let y = w.dot(&Array1::from_vec(vec![0.5, -1.0, 2.0]));
        let p = PanelData::new(y, w, 20).unwrap();
        let (pre, _) = split_pre_post(&p);
        let grid = log_grid(1e-8, 1.0, 9);
        let res = loocv_rho(&pre, &EstimatorConfig::spsc_nodt().with_phi(crate::bases::PhiSpec::Polynomial(3)), &grid)
            .unwrap();
        assert_eq!(res.rho_opt, grid[0]);
        assert!(res.mse.windows(2).all(|m| m[0] <= m[1] * (1.0 + 1e-9)));
    }

    #[test]
    fn held_out_outcome_does_not_leak_without_detrending() {
        let p = random_panel(14, 10, 3, 2);
        let (pre, _) = split_pre_post(&p);
        let cfg = EstimatorConfig::<f64>::spsc_nodt();
        let base = loocv_rho(&pre, &cfg, &[0.1]).unwrap();
        let mut y = p.y().to_owned();
        y[4] += 100.0;
        let q = PanelData::new(y, p.w().to_owned(), p.t0()).unwrap();
        let (pre_q, _) = split_pre_post(&q);
        let moved = loocv_rho(&pre_q, &cfg, &[0.1]).unwrap();
        // the held-out residual moves one-for-one with the held-out outcome
        assert!((moved.residuals[[0, 4]] - base.residuals[[0, 4]] - 100.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_grids() {
        let p = random_panel(14, 10, 3, 1);
        let (pre, _) = split_pre_post(&p);
        assert!(loocv_rho(&pre, &EstimatorConfig::spsc_nodt(), &[]).is_err());
        assert!(loocv_rho(&pre, &EstimatorConfig::spsc_nodt(), &[0.0]).is_err());
    }
}
