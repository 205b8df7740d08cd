//! Pointwise conformal prediction intervals for the random effect at a single
//! post-period time, by inverting a residual-rank test over a grid of
//! hypothesized effects.
//!
//! The tested observation is appended to the pre-period as period `T₀+1`
//! with outcome `Y_s − ξ₀`; the de-trending basis is rebuilt on `[1, T₀+1]`
//! and `(η, γ)` are refit with `ρ` frozen.

use log::warn;
use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::bases::DetrendSpec;
use crate::data::PanelData;
use crate::error::{Result, SpscError};
use crate::estimator::{fit, pre_residual_sd, solve_weights, EstimatorConfig, FitResult, MomentMatrices, RhoPolicy};
use crate::linalg;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridConfig<S> {
    /// Half-width in units of the pre-period residual standard deviation.
    pub k: S,
    pub n_points: usize,
}

impl<S: Scalar> Default for GridConfig<S> {
    fn default() -> Self {
        Self { k: S::lit(6.0), n_points: 201 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConformalResult<S> {
    /// Calendar time of the tested post-period observation.
    pub s: usize,
    pub grid: Vec<S>,
    pub pvalues: Vec<S>,
    pub interval: (S, S),
    pub alpha: S,
    /// `Y_s − W_sᵀγ̂` from the full fit.
    pub plug_in: S,
    /// No grid point was accepted; `interval` collapses to the plug-in.
    pub degenerate: bool,
    /// The outermost grid point on some side was accepted, so the true set
    /// may extend beyond the grid.
    pub hit_grid_edge: bool,
}

/// Pieces of the augmented problem that do not depend on `ξ₀`.
struct Augmented<'a, S> {
    cfg: &'a EstimatorConfig<S>,
    spec: DetrendSpec,
    design: Array2<S>,
    /// Cholesky factor of `DᵀD` on the augmented rows.
    dtd_chol: Option<Array2<S>>,
    omega: Array2<S>,
    rho: S,
    y_pre: Array1<S>,
    w: Array2<S>,
    tol_scale: S,
}

impl<'a, S: Scalar> Augmented<'a, S> {
    fn new(p: &PanelData<S>, cfg: &'a EstimatorConfig<S>, row: usize) -> Result<Self> {
        let rho = match cfg.rho {
            RhoPolicy::Fixed(r) => r,
            RhoPolicy::Loocv { .. } => {
                return Err(SpscError::InvalidSpec("conformal p-values need a fixed rho; resolve LOOCV first".into()))
            }
        };
        if p.x0().is_some() {
            return Err(SpscError::InvalidSpec(
                "conformal intervals are not available for panels with covariates".into(),
            ));
        }
        let t0 = p.t0();
        if row < t0 || row >= p.n_periods() {
            return Err(SpscError::InvalidSpec(format!("row {row} is not a post-period row")));
        }
        let n_aug = t0 + 1;
        let spec = DetrendSpec::new(cfg.detrend, 1, n_aug)?;
        let times: Vec<usize> = (1..=n_aug).collect();
        let design = spec.design::<S>(&times)?;
        let dtd_chol = if spec.dim() > 0 {
            let dtd = design.t().dot(&design);
            if linalg::spd_condition(dtd.view()) > linalg::CONDITION_LIMIT {
                return Err(SpscError::RankDeficient {
                    what: "augmented de-trending design",
                    cond: linalg::spd_condition(dtd.view()),
                });
            }
            Some(linalg::cholesky(dtd.view()).ok_or(SpscError::Singular("augmented de-trending design"))?)
        } else {
            None
        };
        let mut w = Array2::<S>::zeros((n_aug, p.n_donors()));
        w.slice_mut(ndarray::s![..t0, ..]).assign(&p.w().slice(ndarray::s![..t0, ..]));
        w.row_mut(t0).assign(&p.w().row(row));
        let y_pre = p.y().slice(ndarray::s![..t0]).to_owned();
        let mean_abs = y_pre.iter().map(|v| v.abs()).sum::<S>() / S::from_usize_lossy(t0);
        let tol = S::lit(1e-10).max(S::lit(1e3) * S::epsilon());
        let omega = cfg.omega_matrix(spec.dim() + cfg.phi.dim())?;
        Ok(Self { cfg, spec, design, dtd_chol, omega, rho, y_pre, w, tol_scale: tol * (S::one() + mean_abs) })
    }

    fn pvalue(&self, y_s: S, xi0: S) -> Result<S> {
        let t0 = self.y_pre.len();
        let n_aug = t0 + 1;
        let mut y = Array1::<S>::zeros(n_aug);
        y.slice_mut(ndarray::s![..t0]).assign(&self.y_pre);
        y[t0] = y_s - xi0;
        let d = self.spec.dim();
        let fitted = match &self.dtd_chol {
            Some(l) => self.design.dot(&linalg::cholesky_solve(l, self.design.t().dot(&y).view())),
            None => Array1::zeros(n_aug),
        };
        let phi = self.cfg.phi;
        let mut g = Array2::<S>::zeros((n_aug, d + phi.dim()));
        for r in 0..n_aug {
            let mut row = g.row_mut(r);
            row.slice_mut(ndarray::s![..d]).assign(&self.design.row(r));
            row.slice_mut(ndarray::s![d..]).assign(&phi.eval(y[r] - fitted[r]));
        }
        let norm = S::from_usize_lossy(n_aug);
        let m = MomentMatrices { g_yw: g.t().dot(&self.w) / norm, g_yy: g.t().dot(&y) / norm };
        let gamma = solve_weights(&m, self.omega.view(), self.rho)?;
        let resid = &y - &self.w.dot(&gamma);
        let target = resid[t0].abs() - self.tol_scale;
        let count = resid.iter().filter(|v| v.abs() >= target).count();
        Ok(S::from_usize_lossy(count) / norm)
    }
}

fn row_of<S: Scalar>(p: &PanelData<S>, s: usize) -> Result<usize> {
    p.t_index()
        .iter()
        .enumerate()
        .skip(p.t0())
        .find(|(_, &t)| t == s)
        .map(|(r, _)| r)
        .ok_or_else(|| SpscError::InvalidSpec(format!("time {s} is not a post-period time")))
}

/// Conformal p-value of `H₀: ξ_s = ξ₀`. `cfg.rho` must be fixed.
pub fn conformal_pvalue<S: Scalar>(p: &PanelData<S>, s: usize, xi0: S, cfg: &EstimatorConfig<S>) -> Result<S> {
    let row = row_of(p, s)?;
    Augmented::new(p, cfg, row)?.pvalue(p.y()[row], xi0)
}

/// Freezes `ρ` at the value the full fit selected.
fn frozen<S: Scalar>(cfg: &EstimatorConfig<S>, fit: &FitResult<S>) -> EstimatorConfig<S> {
    let mut c = cfg.clone();
    c.rho = RhoPolicy::Fixed(fit.rho_used);
    c
}

fn interval_from_fit<S: Scalar>(
    p: &PanelData<S>,
    full: &FitResult<S>,
    cfg: &EstimatorConfig<S>,
    s: usize,
    alpha: S,
    grid_cfg: &GridConfig<S>,
) -> Result<ConformalResult<S>> {
    if !(alpha > S::zero() && alpha < S::one()) {
        return Err(SpscError::InvalidSpec(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if grid_cfg.n_points < 2 || !(grid_cfg.k > S::zero()) {
        return Err(SpscError::InvalidSpec("conformal grid needs k > 0 and at least 2 points".into()));
    }
    let row = row_of(p, s)?;
    let aug = Augmented::new(p, cfg, row)?;
    let plug_in = full.residuals[row];
    let mut sd = pre_residual_sd(p, full);
    if !(sd > S::zero()) || !sd.is_finite() {
        sd = S::one();
    }
    let half = grid_cfg.k * sd;
    let step = S::lit(2.0) * half / S::from_usize_lossy(grid_cfg.n_points - 1);
    let grid: Vec<S> = (0..grid_cfg.n_points).map(|i| plug_in - half + step * S::from_usize_lossy(i)).collect();
    let y_s = p.y()[row];
    let pvalues = grid.par_iter().map(|&xi| aug.pvalue(y_s, xi)).collect::<Result<Vec<S>>>()?;
    let accepted: Vec<usize> = (0..grid.len()).filter(|&i| pvalues[i] > alpha).collect();
    let (interval, degenerate, hit_grid_edge) = match (accepted.first(), accepted.last()) {
        (Some(&lo), Some(&hi)) => ((grid[lo], grid[hi]), false, lo == 0 || hi == grid.len() - 1),
        _ => {
            warn!("conformal acceptance set at time {s} is empty; reporting the plug-in point");
            ((plug_in, plug_in), true, false)
        }
    };
    Ok(ConformalResult { s, grid, pvalues, interval, alpha, plug_in, degenerate, hit_grid_edge })
}

/// Conformal interval for `ξ_s` at level `1 − α`. `ρ` is resolved once on the
/// original panel (LOOCV if configured) and then held fixed.
pub fn conformal_interval<S: Scalar>(
    p: &PanelData<S>,
    s: usize,
    alpha: S,
    cfg: &EstimatorConfig<S>,
    grid_cfg: &GridConfig<S>,
) -> Result<ConformalResult<S>> {
    let full = fit(p, cfg)?;
    interval_from_fit(p, &full, &frozen(cfg, &full), s, alpha, grid_cfg)
}

/// Intervals for every post-period time, each from its own augmentation.
/// Fails only if the initial fit fails; per-time errors are returned in place.
pub fn conformal_all<S: Scalar>(
    p: &PanelData<S>,
    alpha: S,
    cfg: &EstimatorConfig<S>,
    grid_cfg: &GridConfig<S>,
) -> Result<Vec<Result<ConformalResult<S>>>> {
    let full = fit(p, cfg)?;
    conformal_at(p, &full, cfg, &p.t_index()[p.t0()..], alpha, grid_cfg)
}

/// Intervals at the given post-period times, reusing an existing full fit.
pub fn conformal_at<S: Scalar>(
    p: &PanelData<S>,
    full: &FitResult<S>,
    cfg: &EstimatorConfig<S>,
    times: &[usize],
    alpha: S,
    grid_cfg: &GridConfig<S>,
) -> Result<Vec<Result<ConformalResult<S>>>> {
    let cfg = frozen(cfg, full);
    Ok(times.par_iter().map(|&s| interval_from_fit(p, full, &cfg, s, alpha, grid_cfg)).collect())
}

/// Number of accepted grid points for each result, for quick summaries.
pub fn accepted_counts<S: Scalar>(results: &[ConformalResult<S>]) -> Vec<usize> {
    results.iter().map(|r| r.pvalues.iter().filter(|p| **p > r.alpha).count()).collect()
}
