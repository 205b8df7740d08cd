//! Staged SPSC estimation: de-trending fit `η̂`, moment matrices
//! `Ĝ_YW`, `Ĝ_YY`, ridge-regularized weights `γ̂ρ` and effect parameters `β̂`.
//!
//! The joint weight matrix is block diagonal with an identity block on the
//! de-trending moments, so the penalized GMM problem separates: `η̂` is OLS
//! of `Y` on `D` over the pre-period, `γ̂ρ` is a ridge solve given `η̂`, and
//! `β̂` zeroes the post-period moments given `γ̂ρ`.

mod covariates;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::bases::{DetrendKind, DetrendSpec, EffectKind, EffectModel, PhiSpec};
use crate::cv::{self, LoocvResult};
use crate::data::{split_pre_post, PanelData, PostView, PreView};
use crate::error::{Result, SpscError};
use crate::linalg::{self, CONDITION_LIMIT};
use crate::scalar::Scalar;

pub use covariates::fit_with_covariates;

/// Weight matrix for the instrument block of the pre-period moments.
#[derive(Debug, Clone, PartialEq)]
pub enum OmegaG<S> {
    Identity,
    Matrix(Array2<S>),
}

/// How the ridge parameter is chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum RhoPolicy<S> {
    Fixed(S),
    /// Leave-one-out cross-validation over `grid` (scale-relative default
    /// grid when `None`).
    Loocv {
        grid: Option<Vec<S>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig<S> {
    pub phi: PhiSpec,
    pub detrend: DetrendKind,
    pub effect: EffectKind,
    pub omega_g: OmegaG<S>,
    pub rho: RhoPolicy<S>,
    /// Refit `η̂` inside each LOOCV fold instead of reusing the full
    /// pre-period fit.
    pub refit_eta_per_fold: bool,
}

impl<S: Scalar> EstimatorConfig<S> {
    /// `φ(y) = y`, 6-dimensional cubic B-spline de-trending, constant
    /// effect, identity weights, LOOCV ridge.
    pub fn spsc_dt() -> Self {
        Self {
            phi: PhiSpec::Identity,
            detrend: DetrendKind::CubicBspline(6),
            effect: EffectKind::Constant,
            omega_g: OmegaG::Identity,
            rho: RhoPolicy::Loocv { grid: None },
            refit_eta_per_fold: false,
        }
    }

    /// Same as [`spsc_dt`](Self::spsc_dt) without de-trending.
    pub fn spsc_nodt() -> Self {
        Self { detrend: DetrendKind::None, ..Self::spsc_dt() }
    }

    pub fn with_rho(mut self, rho: S) -> Self {
        self.rho = RhoPolicy::Fixed(rho);
        self
    }

    pub fn with_effect(mut self, effect: EffectKind) -> Self {
        self.effect = effect;
        self
    }

    pub fn with_detrend(mut self, detrend: DetrendKind) -> Self {
        self.detrend = detrend;
        self
    }

    pub fn with_phi(mut self, phi: PhiSpec) -> Self {
        self.phi = phi;
        self
    }

    /// `dim g = d + p`.
    pub fn g_dim(&self) -> usize {
        self.detrend.dim() + self.phi.dim()
    }

    /// Materializes `Ω̂_g` at dimension `dim`, checking symmetry and
    /// positive definiteness.
    pub fn omega_matrix(&self, dim: usize) -> Result<Array2<S>> {
        match &self.omega_g {
            OmegaG::Identity => Ok(Array2::eye(dim)),
            OmegaG::Matrix(m) => {
                if m.dim() != (dim, dim) {
                    return Err(SpscError::Dimension(format!(
                        "omega_g must be {dim}x{dim}, got {}x{}",
                        m.nrows(),
                        m.ncols()
                    )));
                }
                let scale = m.iter().fold(S::zero(), |a, v| a.max(v.abs()));
                if linalg::asymmetry(m.view()) > S::lit(1e-12) * scale {
                    return Err(SpscError::NotPositiveDefinite);
                }
                linalg::cholesky(m.view()).ok_or(SpscError::NotPositiveDefinite)?;
                Ok(m.clone())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.rho {
            RhoPolicy::Fixed(r) if !(r.is_finite() && *r >= S::zero()) => {
                Err(SpscError::InvalidSpec(format!("rho must be finite and >= 0, got {r}")))
            }
            RhoPolicy::Loocv { grid: Some(g) } if g.is_empty() || g.iter().any(|v| !(*v > S::zero())) => {
                Err(SpscError::InvalidSpec("LOOCV grid must be nonempty and strictly positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Which estimator produced a [`FitResult`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Spsc,
    /// Unregularized least squares of `Y` on `W` over the pre-period.
    Ols,
}

/// Bases bound to a concrete panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolvedModel {
    pub detrend: DetrendSpec,
    pub phi: PhiSpec,
    pub effect: EffectModel,
}

impl ResolvedModel {
    /// De-trending over `[1, T₀]`, effects scaled by the panel's `T₀`, `T₁`.
    pub fn for_panel<S: Scalar>(p: &PanelData<S>, cfg: &EstimatorConfig<S>) -> Result<Self> {
        Ok(Self {
            detrend: DetrendSpec::new(cfg.detrend, 1, p.t0())?,
            phi: cfg.phi,
            effect: EffectModel::new(cfg.effect, p.t0(), p.t1())?,
        })
    }

    pub fn d(&self) -> usize {
        self.detrend.dim()
    }

    pub fn g_dim(&self) -> usize {
        self.detrend.dim() + self.phi.dim()
    }

    /// `g(t, y; η) = (D_t, φ(y − D_tᵀη))`.
    pub fn g<S: Scalar>(&self, t: usize, y: S, eta: ArrayView1<S>) -> Result<Array1<S>> {
        let d = self.detrend.eval::<S>(t)?;
        let u = y - d.dot(&eta);
        let phi = self.phi.eval(u);
        let mut out = Array1::zeros(d.len() + phi.len());
        out.slice_mut(ndarray::s![..d.len()]).assign(&d);
        out.slice_mut(ndarray::s![d.len()..]).assign(&phi);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentMatrices<S> {
    /// `Ĝ_YW`, `(d+p) × N`
    pub g_yw: Array2<S>,
    /// `Ĝ_YY`, length `d+p`
    pub g_yy: Array1<S>,
}

#[derive(Debug, Clone)]
pub struct FitResult<S> {
    pub method: Method,
    pub model: ResolvedModel,
    pub omega_g: Array2<S>,
    pub eta: Array1<S>,
    pub gamma: Array1<S>,
    pub beta: Array1<S>,
    pub rho_used: S,
    /// `W_tᵀγ̂` for every period.
    pub sc_path: Array1<S>,
    /// `Y_t − W_tᵀγ̂` for every period.
    pub residuals: Array1<S>,
    /// `τ(t; β̂)` over the post-period.
    pub att_path: Array1<S>,
    pub delta0: Option<Array1<S>>,
    pub delta: Option<Array1<S>>,
    /// Number of covariates `q` entering the moments; 0 when the panel has
    /// none or they vanish over the pre-period.
    pub covariate_dim: usize,
    pub loocv: Option<LoocvResult<S>>,
}

impl<S: Scalar> FitResult<S> {
    /// Whether covariate coefficients enter the moments.
    pub fn has_covariates(&self) -> bool {
        self.covariate_dim > 0
    }
}

/// Raw (unnormalized) sums `Σ g W_tᵀ`, `Σ g Y_t` over the given rows.
pub(crate) fn moment_sums<S: Scalar>(
    model: &ResolvedModel,
    times: &[usize],
    y: ArrayView1<S>,
    w: ArrayView2<S>,
    eta: ArrayView1<S>,
) -> Result<(Array2<S>, Array1<S>)> {
    let k = model.g_dim();
    let mut gw = Array2::<S>::zeros((k, w.ncols()));
    let mut gy = Array1::<S>::zeros(k);
    for (r, &t) in times.iter().enumerate() {
        let g = model.g(t, y[r], eta)?;
        for i in 0..k {
            let gi = g[i];
            gy[i] += gi * y[r];
            for j in 0..w.ncols() {
                gw[[i, j]] += gi * w[[r, j]];
            }
        }
    }
    Ok((gw, gy))
}

/// OLS of `y` on `D_t` over the given rows.
pub(crate) fn fit_detrend_rows<S: Scalar>(spec: &DetrendSpec, times: &[usize], y: ArrayView1<S>) -> Result<Array1<S>> {
    let d = spec.dim();
    if d == 0 {
        return Ok(Array1::zeros(0));
    }
    if times.len() < d {
        return Err(SpscError::TooFewObservations(format!(
            "de-trending with {d} basis functions needs at least {d} pre-period rows, got {}",
            times.len()
        )));
    }
    let design = spec.design::<S>(times)?;
    let normal = design.t().dot(&design);
    let rhs = design.t().dot(&y);
    linalg::solve_spd_checked(normal.view(), rhs.view(), "de-trending design")
}

/// `η̂`: pre-period OLS of `Y_t` on `D_t`.
pub fn fit_detrend<S: Scalar>(pre: &PreView<'_, S>, spec: &DetrendSpec) -> Result<Array1<S>> {
    fit_detrend_rows(spec, pre.times(), pre.y())
}

/// `Ĝ_YW = T₀⁻¹ Σ g W_tᵀ`, `Ĝ_YY = T₀⁻¹ Σ g Y_t` at the given `η`.
pub fn compute_moments<S: Scalar>(
    pre: &PreView<'_, S>,
    eta: ArrayView1<S>,
    cfg: &EstimatorConfig<S>,
) -> Result<MomentMatrices<S>> {
    let model = ResolvedModel::for_panel(pre.panel(), cfg)?;
    if eta.len() != model.d() {
        return Err(SpscError::Dimension(format!("eta has length {}, basis has {}", eta.len(), model.d())));
    }
    let (gw, gy) = moment_sums(&model, pre.times(), pre.y(), pre.w(), eta)?;
    let n = S::from_usize_lossy(pre.len());
    Ok(MomentMatrices { g_yw: gw / n, g_yy: gy / n })
}

/// `γ̂ρ = (GᵀΩG + ρI)⁻¹ GᵀΩ G_YY`.
pub fn solve_weights<S: Scalar>(m: &MomentMatrices<S>, omega_g: ArrayView2<S>, rho: S) -> Result<Array1<S>> {
    if !(rho >= S::zero()) || !rho.is_finite() {
        return Err(SpscError::InvalidSpec(format!("rho must be finite and >= 0, got {rho}")));
    }
    if linalg::cholesky(omega_g).is_none() {
        return Err(SpscError::NotPositiveDefinite);
    }
    let gto = m.g_yw.t().dot(&omega_g);
    let mut a = gto.dot(&m.g_yw);
    let b = gto.dot(&m.g_yy);
    if rho == S::zero() {
        if linalg::spd_condition(a.view()) > CONDITION_LIMIT {
            return Err(SpscError::SingularAtZeroRho);
        }
    } else {
        a.diag_mut().map_inplace(|v| *v += rho);
    }
    let l = linalg::cholesky(a.view()).ok_or(if rho == S::zero() {
        SpscError::SingularAtZeroRho
    } else {
        SpscError::Singular("regularized normal")
    })?;
    Ok(linalg::cholesky_solve(&l, b.view()))
}

/// Least squares / Newton solution of the post-period effect moments given
/// residuals `r_t = Y_t − W_tᵀγ` at internal times `times`.
pub(crate) fn fit_effect_rows<S: Scalar>(
    model: &EffectModel,
    times: &[usize],
    resid: ArrayView1<S>,
) -> Result<Array1<S>> {
    let b = model.dim();
    if times.len() < b {
        return Err(SpscError::TooFewObservations(format!(
            "effect model `{}` needs at least {b} post-period rows, got {}",
            model.kind,
            times.len()
        )));
    }
    if model.kind.is_linear() {
        let zero = vec![S::zero(); b];
        let mut xtx = Array2::<S>::zeros((b, b));
        let mut xty = Array1::<S>::zeros(b);
        for (r, &t) in times.iter().enumerate() {
            let x = model.eval(t, &zero)?.grad;
            for i in 0..b {
                xty[i] += x[i] * resid[r];
                for j in 0..b {
                    xtx[[i, j]] += x[i] * x[j];
                }
            }
        }
        return linalg::solve_spd_checked(xtx.view(), xty.view(), "effect design");
    }
    fit_effect_newton(model, times, resid)
}

const NEWTON_MAX_ITER: usize = 200;

fn fit_effect_newton<S: Scalar>(model: &EffectModel, times: &[usize], resid: ArrayView1<S>) -> Result<Array1<S>> {
    let b = model.dim();
    let n = S::from_usize_lossy(times.len());
    let mean = resid.sum() / n;
    let scale = S::one() + resid.iter().map(|v| v.abs()).sum::<S>() / n;
    let tol = S::lit(1e-10).max(S::epsilon() * S::lit(1e3)) * scale;
    let stall = S::epsilon().sqrt() * scale;

    // moment vector, Newton Jacobian and Gauss-Newton Jacobian
    let system = |beta: &Array1<S>| -> Result<(Array1<S>, Array2<S>, Array2<S>)> {
        let mut m = Array1::<S>::zeros(b);
        let mut jn = Array2::<S>::zeros((b, b));
        let mut jg = Array2::<S>::zeros((b, b));
        for (r, &t) in times.iter().enumerate() {
            let e = model.eval(t, beta.as_slice().expect("contiguous"))?;
            let u = resid[r] - e.tau;
            for i in 0..b {
                m[i] += e.grad[i] * u;
                for j in 0..b {
                    let outer = e.grad[i] * e.grad[j];
                    jn[[i, j]] += e.hess[[i, j]] * u - outer;
                    jg[[i, j]] -= outer;
                }
            }
        }
        Ok((m / n, jn / n, jg / n))
    };
    let norm = |v: &Array1<S>| v.dot(v).sqrt();

    let mut beta = Array1::<S>::zeros(b);
    if mean > S::zero() {
        beta[0] = mean.ln();
    }
    for _ in 0..NEWTON_MAX_ITER {
        let (m, jn, jg) = system(&beta)?;
        let cur = norm(&m);
        if !cur.is_finite() {
            break;
        }
        if cur <= tol {
            return Ok(beta);
        }
        let neg = m.mapv(|v| -v);
        let mut accepted = false;
        for jac in [&jn, &jg] {
            let Some(dir) = linalg::lu_solve(jac.view(), neg.view()) else { continue };
            if !dir.iter().all(|v| v.is_finite()) {
                continue;
            }
            let mut step = S::one();
            for _ in 0..40 {
                let cand = &beta + &(&dir * step);
                if let Ok((mc, _, _)) = system(&cand) {
                    let nc = norm(&mc);
                    if nc.is_finite() && nc < cur {
                        beta = cand;
                        accepted = true;
                        break;
                    }
                }
                step *= S::lit(0.5);
            }
            if accepted {
                break;
            }
        }
        if !accepted {
            if cur <= stall {
                return Ok(beta);
            }
            break;
        }
    }
    Err(SpscError::NoConvergence(NEWTON_MAX_ITER))
}

/// `β̂` solving `T₁⁻¹ Σ τ′(t;β)(Y_t − W_tᵀγ − τ(t;β)) = 0` over the post-period.
pub fn fit_effect<S: Scalar>(post: &PostView<'_, S>, gamma: ArrayView1<S>, model: &EffectModel) -> Result<Array1<S>> {
    let resid = &post.y() - &post.w().dot(&gamma);
    fit_effect_rows(model, post.times(), resid.view())
}

/// Unpenalized least-squares weights of `Y_t` on `W_t` over the pre-period.
pub fn ols_weights<S: Scalar>(pre: &PreView<'_, S>) -> Result<Array1<S>> {
    let w = pre.w();
    let gram = w.t().dot(&w);
    let rhs = w.t().dot(&pre.y());
    linalg::solve_spd_checked(gram.view(), rhs.view(), "donor Gram matrix")
}

/// Picks `ρ` for a fit according to the config.
pub(crate) fn resolve_rho<S: Scalar>(
    pre: &PreView<'_, S>,
    cfg: &EstimatorConfig<S>,
    eta: ArrayView1<S>,
) -> Result<(S, Option<LoocvResult<S>>)> {
    match &cfg.rho {
        RhoPolicy::Fixed(r) => Ok((*r, None)),
        RhoPolicy::Loocv { grid } => {
            let grid = match grid {
                Some(g) => g.clone(),
                None => cv::default_grid(pre, cfg, eta)?,
            };
            let res = cv::loocv_rho(pre, cfg, &grid)?;
            Ok((res.rho_opt, Some(res)))
        }
    }
}

fn paths<S: Scalar>(
    p: &PanelData<S>,
    gamma: &Array1<S>,
    effect: &EffectModel,
    beta: &Array1<S>,
) -> Result<(Array1<S>, Array1<S>, Array1<S>)> {
    let sc = p.w().dot(gamma);
    let resid = &p.y() - &sc;
    let times = &p.t_index()[p.t0()..];
    let att = times
        .iter()
        .map(|&t| effect.eval(t, beta.as_slice().expect("contiguous")).map(|e| e.tau))
        .collect::<Result<Vec<_>>>()?;
    Ok((sc, resid, Array1::from_vec(att)))
}

/// Full SPSC fit. Panels carrying covariates are routed to
/// [`fit_with_covariates`].
pub fn fit<S: Scalar>(p: &PanelData<S>, cfg: &EstimatorConfig<S>) -> Result<FitResult<S>> {
    if p.x0().is_some() {
        return fit_with_covariates(p, cfg);
    }
    fit_plain(p, cfg)
}

pub(crate) fn fit_plain<S: Scalar>(p: &PanelData<S>, cfg: &EstimatorConfig<S>) -> Result<FitResult<S>> {
    cfg.validate()?;
    let model = ResolvedModel::for_panel(p, cfg)?;
    let omega_g = cfg.omega_matrix(model.g_dim())?;
    let (pre, post) = split_pre_post(p);
    let eta = fit_detrend(&pre, &model.detrend)?;
    let (rho, loocv) = resolve_rho(&pre, cfg, eta.view())?;
    let m = compute_moments(&pre, eta.view(), cfg)?;
    let gamma = solve_weights(&m, omega_g.view(), rho)?;
    let beta = fit_effect(&post, gamma.view(), &model.effect)?;
    let (sc_path, residuals, att_path) = paths(p, &gamma, &model.effect, &beta)?;
    Ok(FitResult {
        method: Method::Spsc,
        model,
        omega_g,
        eta,
        gamma,
        beta,
        rho_used: rho,
        sc_path,
        residuals,
        att_path,
        delta0: None,
        delta: None,
        covariate_dim: 0,
        loocv,
    })
}

/// OLS-NoReg baseline: least-squares weights, then the effect fit.
pub fn fit_ols<S: Scalar>(p: &PanelData<S>, effect: EffectKind) -> Result<FitResult<S>> {
    let cfg = EstimatorConfig::<S>::spsc_nodt().with_effect(effect).with_rho(S::zero());
    let model = ResolvedModel::for_panel(p, &cfg)?;
    let (pre, post) = split_pre_post(p);
    let gamma = ols_weights(&pre)?;
    let beta = fit_effect(&post, gamma.view(), &model.effect)?;
    let (sc_path, residuals, att_path) = paths(p, &gamma, &model.effect, &beta)?;
    Ok(FitResult {
        method: Method::Ols,
        model,
        omega_g: Array2::eye(model.g_dim()),
        eta: Array1::zeros(0),
        gamma,
        beta,
        rho_used: S::zero(),
        sc_path,
        residuals,
        att_path,
        delta0: None,
        delta: None,
        covariate_dim: 0,
        loocv: None,
    })
}

/// Penalized GMM objective `‖Ψ̂_D‖² + Ψ̂_gᵀΩ_gΨ̂_g + ‖Ψ̂_β‖² + ρ‖γ‖²` with
/// each block averaged over its own period. Used to verify the staged fit.
pub fn objective<S: Scalar>(
    p: &PanelData<S>,
    model: &ResolvedModel,
    omega_g: ArrayView2<S>,
    rho: S,
    eta: ArrayView1<S>,
    gamma: ArrayView1<S>,
    beta: ArrayView1<S>,
) -> Result<S> {
    let (pre, post) = split_pre_post(p);
    let n0 = S::from_usize_lossy(pre.len());
    let n1 = S::from_usize_lossy(post.len());
    let d = model.d();
    let mut md = Array1::<S>::zeros(d);
    let mut mg = Array1::<S>::zeros(model.g_dim());
    for (r, &t) in pre.times().iter().enumerate() {
        let y = pre.y()[r];
        let dt = model.detrend.eval::<S>(t)?;
        md.scaled_add(y - dt.dot(&eta), &dt);
        let g = model.g(t, y, eta)?;
        mg.scaled_add(y - pre.w().row(r).dot(&gamma), &g);
    }
    let mut mb = Array1::<S>::zeros(model.effect.dim());
    let bs = beta.to_vec();
    for (r, &t) in post.times().iter().enumerate() {
        let e = model.effect.eval(t, &bs)?;
        mb.scaled_add(post.y()[r] - post.w().row(r).dot(&gamma) - e.tau, &e.grad);
    }
    md /= n0;
    mg /= n0;
    mb /= n1;
    Ok(md.dot(&md) + mg.dot(&omega_g.dot(&mg)) + mb.dot(&mb) + rho * gamma.dot(&gamma))
}

/// Sample standard deviation of the pre-period residuals of a fit.
pub fn pre_residual_sd<S: Scalar>(p: &PanelData<S>, fit: &FitResult<S>) -> S {
    let r = fit.residuals.slice(ndarray::s![..p.t0()]);
    let n = r.len();
    if n < 2 {
        return S::zero();
    }
    r.var_axis(Axis(0), S::one()).into_scalar().sqrt()
}

#[cfg(test)]
mod tests;
