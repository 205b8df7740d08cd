//! Covariate-adjusted fit with residual `(Y_t − X_{0t}ᵀδ₀) − (W_tᵀγ − X_tᵀδ)`
//! and instruments `g = (D_t, φ(Y_t − X_{0t}ᵀδ₀ − D_tᵀη), X_{0t}, X_t)`.
//!
//! For fixed `δ₀` the de-trending block fixes `η` by OLS and the remaining
//! problem is a ridge-on-`γ`-only linear least squares in `(γ, δ)`. `δ₀` is
//! found by Levenberg–Marquardt on the profiled objective.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::{
    fit_detrend_rows, fit_effect_rows, fit_plain, resolve_rho, EstimatorConfig, FitResult, Method, ResolvedModel,
};
use crate::data::{split_pre_post, PanelData};
use crate::error::{Result, SpscError};
use crate::linalg::{self, CONDITION_LIMIT};
use crate::scalar::Scalar;

/// Instrument layout for the covariate-adjusted moments.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CovModel {
    pub base: ResolvedModel,
    pub q: usize,
    pub n: usize,
}

impl CovModel {
    pub fn g_dim(&self) -> usize {
        self.base.g_dim() + (self.n + 1) * self.q
    }

    pub fn g<S: Scalar>(
        &self,
        t: usize,
        y: S,
        x0: ArrayView1<S>,
        x: ArrayView1<S>,
        eta: ArrayView1<S>,
        delta0: ArrayView1<S>,
    ) -> Result<Array1<S>> {
        let head = self.base.g(t, y - x0.dot(&delta0), eta)?;
        Ok(concatenate![Axis(0), head, x0, x])
    }
}

struct Inner<S> {
    eta: Array1<S>,
    gamma: Array1<S>,
    delta: Array1<S>,
    /// `[Lᵀ m_g ; √ρ γ]` with `Ω = L Lᵀ`, so its squared norm is the
    /// profiled objective.
    resid: Array1<S>,
}

struct PreData<'a, S> {
    times: &'a [usize],
    y: ArrayView1<'a, S>,
    w: ArrayView2<'a, S>,
    x0: ArrayView2<'a, S>,
    x: ArrayView2<'a, S>,
}

fn solve_inner<S: Scalar>(
    cm: &CovModel,
    pre: &PreData<'_, S>,
    omega_chol: &Array2<S>,
    omega: ArrayView2<S>,
    rho: S,
    delta0: ArrayView1<S>,
) -> Result<Inner<S>> {
    let ytil = &pre.y - &pre.x0.dot(&delta0);
    let eta = fit_detrend_rows(&cm.base.detrend, pre.times, ytil.view())?;
    let k = cm.g_dim();
    let nq = cm.n * cm.q;
    let mut z = Array2::<S>::zeros((k, cm.n + nq));
    let mut gy = Array1::<S>::zeros(k);
    for (r, &t) in pre.times.iter().enumerate() {
        let g = cm.g(t, pre.y[r], pre.x0.row(r), pre.x.row(r), eta.view(), delta0)?;
        gy.scaled_add(ytil[r], &g);
        for i in 0..k {
            for j in 0..cm.n {
                z[[i, j]] += g[i] * pre.w[[r, j]];
            }
            for j in 0..nq {
                z[[i, cm.n + j]] -= g[i] * pre.x[[r, j]];
            }
        }
    }
    let len = S::from_usize_lossy(pre.times.len());
    z /= len;
    gy /= len;

    let zto = z.t().dot(&omega);
    let mut a = zto.dot(&z);
    let b = zto.dot(&gy);
    let cond_delta = linalg::spd_condition(a.slice(s![cm.n.., cm.n..]));
    if cond_delta > CONDITION_LIMIT {
        return Err(SpscError::RankDeficient { what: "covariate moment block", cond: cond_delta });
    }
    if rho == S::zero() {
        if linalg::spd_condition(a.view()) > CONDITION_LIMIT {
            return Err(SpscError::SingularAtZeroRho);
        }
    } else {
        for j in 0..cm.n {
            a[[j, j]] += rho;
        }
    }
    let l = linalg::cholesky(a.view()).ok_or(SpscError::Singular("covariate normal"))?;
    let theta = linalg::cholesky_solve(&l, b.view());
    let m = &gy - &z.dot(&theta);
    let gamma = theta.slice(s![..cm.n]).to_owned();
    let delta = theta.slice(s![cm.n..]).to_owned();
    let resid = concatenate![Axis(0), omega_chol.t().dot(&m), &gamma * rho.sqrt()];
    Ok(Inner { eta, gamma, delta, resid })
}

/// Estimates `(η̂, γ̂ρ, δ̂₀, δ̂, β̂)`. Covariates that are identically zero over
/// the pre-period carry no information; the plain fit is returned with zero
/// covariate coefficients.
pub fn fit_with_covariates<S: Scalar>(p: &PanelData<S>, cfg: &EstimatorConfig<S>) -> Result<FitResult<S>> {
    let (Some(x0_all), Some(x_all)) = (p.x0(), p.x()) else {
        return Err(SpscError::InvalidSpec("covariate fit requires x0 and x".into()));
    };
    cfg.validate()?;
    let q = x0_all.ncols();
    let n = p.n_donors();
    let t0 = p.t0();
    let x0 = x0_all.slice(s![..t0, ..]);
    let x = x_all.slice(s![..t0, ..]);
    if x0.iter().chain(x.iter()).all(|v| *v == S::zero()) {
        let mut fit = fit_plain(&p.without_covariates(), cfg)?;
        fit.delta0 = Some(Array1::zeros(q));
        fit.delta = Some(Array1::zeros(n * q));
        return Ok(fit);
    }

    let base = ResolvedModel::for_panel(p, cfg)?;
    let cm = CovModel { base, q, n };
    let omega = cfg.omega_matrix(cm.g_dim())?;
    let omega_chol = linalg::cholesky(omega.view()).ok_or(SpscError::NotPositiveDefinite)?;
    let plain = p.without_covariates();
    let (pre_plain, _) = split_pre_post(&plain);
    let eta_plain = fit_detrend_rows(&base.detrend, pre_plain.times(), pre_plain.y())?;
    let (rho, loocv) = resolve_rho(&pre_plain, cfg, eta_plain.view())?;

    let pre =
        PreData { times: &p.t_index()[..t0], y: p.y().slice_move(s![..t0]), w: p.w().slice_move(s![..t0, ..]), x0, x };
    let eval = |d0: &Array1<S>| solve_inner(&cm, &pre, &omega_chol, omega.view(), rho, d0.view());
    let sq = |r: &Array1<S>| r.dot(r);

    let mut delta0 = Array1::<S>::zeros(q);
    let mut cur = eval(&delta0)?;
    let mut f = sq(&cur.resid);
    let mut lambda = S::lit(1e-3);
    let h_rel = S::epsilon().cbrt();
    for _ in 0..100 {
        let mut jac = Array2::<S>::zeros((cur.resid.len(), q));
        for j in 0..q {
            let h = h_rel * (S::one() + delta0[j].abs());
            let mut up = delta0.clone();
            up[j] += h;
            let mut dn = delta0.clone();
            dn[j] -= h;
            let col = (&eval(&up)?.resid - &eval(&dn)?.resid) / (h + h);
            jac.column_mut(j).assign(&col);
        }
        let grad = jac.t().dot(&cur.resid);
        let hess = jac.t().dot(&jac);
        if grad.iter().all(|g| g.abs() <= S::lit(1e-15) * (S::one() + f)) {
            break;
        }
        let mut accepted = None;
        for _ in 0..30 {
            let mut damped = hess.clone();
            for j in 0..q {
                damped[[j, j]] += lambda * (hess[[j, j]] + S::epsilon());
            }
            let step = linalg::lu_solve(damped.view(), grad.mapv(|v| -v).view());
            if let Some(step) = step {
                let cand = &delta0 + &step;
                if let Ok(inner) = eval(&cand) {
                    let fc = sq(&inner.resid);
                    if fc < f {
                        accepted = Some((cand, inner, fc, step));
                        lambda = (lambda * S::lit(0.1)).max(S::lit(1e-12));
                        break;
                    }
                }
            }
            lambda *= S::lit(10.0);
        }
        let Some((cand, inner, fc, step)) = accepted else { break };
        let small_step = step.iter().map(|v| v.abs()).fold(S::zero(), S::max)
            <= S::lit(1e-14) * (S::one() + cand.iter().map(|v| v.abs()).fold(S::zero(), S::max));
        delta0 = cand;
        cur = inner;
        f = fc;
        if small_step {
            break;
        }
    }

    let (_, post) = split_pre_post(p);
    let t1_rows = t0..p.n_periods();
    let adj = &p.x0().expect("checked").dot(&delta0) - &p.x().expect("checked").dot(&cur.delta);
    let sc_path = &p.w().dot(&cur.gamma) + &adj;
    let residuals = &p.y() - &sc_path;
    let post_resid = residuals.slice(s![t1_rows.clone()]);
    let beta = fit_effect_rows(&base.effect, post.times(), post_resid)?;
    let att_path = post
        .times()
        .iter()
        .map(|&t| base.effect.eval(t, beta.as_slice().expect("contiguous")).map(|e| e.tau))
        .collect::<Result<Vec<_>>>()?;
    Ok(FitResult {
        method: Method::Spsc,
        model: base,
        omega_g: omega,
        eta: cur.eta,
        gamma: cur.gamma,
        beta,
        rho_used: rho,
        sc_path,
        residuals,
        att_path: Array1::from_vec(att_path),
        delta0: Some(delta0),
        delta: Some(cur.delta),
        covariate_dim: q,
        loocv,
    })
}
