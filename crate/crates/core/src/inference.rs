//! Standard errors for `β̂`: HAC sandwich and moving block bootstrap.
//!
//! The stacked estimating function has column blocks `(D, g, β)` with the
//! pre-period rows masked to the first two and post-period rows to the last.
//! Parameters are ordered `(η, γ, δ₀, δ, β)`; the covariate blocks are empty
//! for plain fits.

use std::fmt;
use std::str::FromStr;

use log::warn;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::PanelData;
use crate::error::{Result, SpscError};
use crate::estimator::{fit, fit_ols, EstimatorConfig, FitResult, Method, RhoPolicy};
use crate::linalg;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    Bartlett,
    QuadraticSpectral,
}

impl Kernel {
    pub fn weight<S: Scalar>(self, z: S) -> S {
        match self {
            Kernel::Bartlett => {
                let a = z.abs();
                if a <= S::one() {
                    S::one() - a
                } else {
                    S::zero()
                }
            }
            Kernel::QuadraticSpectral => {
                if z == S::zero() {
                    return S::one();
                }
                let x = S::lit(6.0) * S::PI() * z / S::lit(5.0);
                S::lit(25.0) / (S::lit(12.0) * S::PI() * S::PI() * z * z) * (x.sin() / x - x.cos())
            }
        }
    }
}

impl FromStr for Kernel {
    type Err = SpscError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bartlett" => Ok(Kernel::Bartlett),
            "qs" | "quadratic_spectral" => Ok(Kernel::QuadraticSpectral),
            _ => Err(SpscError::InvalidSpec(format!("unknown kernel `{s}`"))),
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kernel::Bartlett => "bartlett",
            Kernel::QuadraticSpectral => "quadratic_spectral",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth<S> {
    /// Andrews AR(1) plug-in on the effect-moment series.
    Auto,
    Fixed(S),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HacSpec<S> {
    pub kernel: Kernel,
    pub bandwidth: Bandwidth<S>,
}

impl<S: Scalar> Default for HacSpec<S> {
    fn default() -> Self {
        Self { kernel: Kernel::QuadraticSpectral, bandwidth: Bandwidth::Auto }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceMethod {
    Hac,
    Bootstrap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceResult<S> {
    pub method: VarianceMethod,
    pub sigma_beta: Array2<S>,
    pub se_beta: Array1<S>,
    pub ci_beta: Vec<(S, S)>,
    pub alpha: S,
    /// HAC bandwidth actually used.
    pub bandwidth: Option<S>,
    /// Bootstrap replicates that failed to fit and were skipped.
    pub n_failed: usize,
}

/// Parameter values at which moments are evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<S> {
    pub eta: Array1<S>,
    pub gamma: Array1<S>,
    pub delta0: Array1<S>,
    pub delta: Array1<S>,
    pub beta: Array1<S>,
}

impl<S: Scalar> Params<S> {
    pub fn from_fit(fit: &FitResult<S>) -> Self {
        let q = fit.covariate_dim;
        let n = fit.gamma.len();
        let take = |v: &Option<Array1<S>>, len: usize| match v {
            Some(v) if q > 0 => v.clone(),
            _ => Array1::zeros(len),
        };
        Self {
            eta: fit.eta.clone(),
            gamma: fit.gamma.clone(),
            delta0: take(&fit.delta0, q),
            delta: take(&fit.delta, n * q),
            beta: fit.beta.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.eta.len() + self.gamma.len() + self.delta0.len() + self.delta.len() + self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pack(&self) -> Array1<S> {
        ndarray::concatenate![Axis(0), self.eta, self.gamma, self.delta0, self.delta, self.beta]
    }

    /// Inverse of [`pack`](Self::pack) using `self` for the block sizes.
    pub fn unpack(&self, v: ArrayView1<S>) -> Self {
        let mut at = 0;
        let mut next = |len: usize| {
            let out = v.slice(s![at..at + len]).to_owned();
            at += len;
            out
        };
        Self {
            eta: next(self.eta.len()),
            gamma: next(self.gamma.len()),
            delta0: next(self.delta0.len()),
            delta: next(self.delta.len()),
            beta: next(self.beta.len()),
        }
    }
}

/// Moment and parameter layout shared by the stacked moments, Jacobian and
/// sandwich.
struct Layout {
    d: usize,
    k: usize,
    b: usize,
    n: usize,
    q: usize,
}

impl Layout {
    fn of<S: Scalar>(fit: &FitResult<S>) -> Self {
        let n = fit.gamma.len();
        let q = fit.covariate_dim;
        match fit.method {
            Method::Ols => Self { d: 0, k: n, b: fit.model.effect.dim(), n, q: 0 },
            Method::Spsc => {
                Self { d: fit.model.d(), k: fit.model.g_dim() + (n + 1) * q, b: fit.model.effect.dim(), n, q }
            }
        }
    }

    fn n_moments(&self) -> usize {
        self.d + self.k + self.b
    }

    fn n_params(&self) -> usize {
        self.d + self.n + self.q + self.n * self.q + self.b
    }
}

/// Per-row quantities needed by the moments and their derivatives.
struct RowEval<S> {
    /// `D_t` (empty for OLS)
    dt: Array1<S>,
    /// instrument vector `g` (donor outcomes for OLS)
    g: Array1<S>,
    /// `φ′(u)` for the φ rows of `g`
    phi_prime: Array1<S>,
    /// `Y − X0ᵀδ₀`
    ytil: S,
    /// `Y − X0ᵀδ₀ − (Wᵀγ − Xᵀδ)`
    e: S,
}

fn row_eval<S: Scalar>(
    p: &PanelData<S>,
    fit: &FitResult<S>,
    lay: &Layout,
    th: &Params<S>,
    r: usize,
) -> Result<RowEval<S>> {
    let t = p.t_index()[r];
    let wv = p.w();
    let w = wv.row(r);
    let (x0, x) = match (p.x0(), p.x()) {
        (Some(x0), Some(x)) if lay.q > 0 => (Some(x0.row(r).to_owned()), Some(x.row(r).to_owned())),
        _ => (None, None),
    };
    let ytil = p.y()[r] - x0.as_ref().map_or(S::zero(), |v| v.dot(&th.delta0));
    let e = ytil - w.dot(&th.gamma) + x.as_ref().map_or(S::zero(), |v| v.dot(&th.delta));
    if fit.method == Method::Ols {
        return Ok(RowEval { dt: Array1::zeros(0), g: w.to_owned(), phi_prime: Array1::zeros(0), ytil, e });
    }
    if r >= p.t0() {
        return Ok(RowEval { dt: Array1::zeros(0), g: Array1::zeros(0), phi_prime: Array1::zeros(0), ytil, e });
    }
    let dt = fit.model.detrend.eval::<S>(t)?;
    let u = ytil - dt.dot(&th.eta);
    let mut g = fit.model.g(t, ytil, th.eta.view())?;
    if let (Some(x0), Some(x)) = (x0, x) {
        g = ndarray::concatenate![Axis(0), g, x0, x];
    }
    Ok(RowEval { dt, g, phi_prime: fit.model.phi.derivative(u), ytil, e })
}

fn psi_at<S: Scalar>(p: &PanelData<S>, fit: &FitResult<S>, th: &Params<S>) -> Result<Array2<S>> {
    let lay = Layout::of(fit);
    let t_len = p.n_periods();
    let mut psi = Array2::<S>::zeros((t_len, lay.n_moments()));
    let beta = th.beta.as_slice().expect("contiguous");
    for r in 0..t_len {
        let ev = row_eval(p, fit, &lay, th, r)?;
        let mut row = psi.row_mut(r);
        if r < p.t0() {
            let dres = ev.ytil - ev.dt.dot(&th.eta);
            for i in 0..lay.d {
                row[i] = ev.dt[i] * dres;
            }
            for i in 0..lay.k {
                row[lay.d + i] = ev.g[i] * ev.e;
            }
        } else {
            let eff = fit.model.effect.eval(p.t_index()[r], beta)?;
            for i in 0..lay.b {
                row[lay.d + lay.k + i] = eff.grad[i] * (ev.e - eff.tau);
            }
        }
    }
    Ok(psi)
}

fn jacobian_at<S: Scalar>(p: &PanelData<S>, fit: &FitResult<S>, th: &Params<S>) -> Result<Array2<S>> {
    let lay = Layout::of(fit);
    let (d, k, b, n, q) = (lay.d, lay.k, lay.b, lay.n, lay.q);
    // parameter offsets
    let (o_eta, o_gam) = (0, d);
    let o_d0 = d + n;
    let o_del = o_d0 + q;
    let o_beta = o_del + n * q;
    let p_phi = if fit.method == Method::Ols { 0 } else { fit.model.phi.dim() };
    let mut jac = Array2::<S>::zeros((lay.n_moments(), lay.n_params()));
    let beta = th.beta.as_slice().expect("contiguous");
    for r in 0..p.n_periods() {
        let ev = row_eval(p, fit, &lay, th, r)?;
        let wv = p.w();
        let w = wv.row(r);
        let (x0, x) = match (p.x0(), p.x()) {
            (Some(x0), Some(x)) if q > 0 => (x0.row(r).to_owned(), x.row(r).to_owned()),
            _ => (Array1::zeros(0), Array1::zeros(0)),
        };
        if r < p.t0() {
            for i in 0..d {
                for j in 0..d {
                    jac[[i, o_eta + j]] -= ev.dt[i] * ev.dt[j];
                }
                for j in 0..q {
                    jac[[i, o_d0 + j]] -= ev.dt[i] * x0[j];
                }
            }
            for i in 0..k {
                let row = d + i;
                let gi = ev.g[i];
                for j in 0..n {
                    jac[[row, o_gam + j]] -= gi * w[j];
                }
                for j in 0..q {
                    jac[[row, o_d0 + j]] -= gi * x0[j];
                }
                for j in 0..n * q {
                    jac[[row, o_del + j]] += gi * x[j];
                }
            }
            // φ rows depend on η and δ₀ through u = Y − X0ᵀδ₀ − Dᵀη
            for i in 0..p_phi {
                let row = d + d + i;
                let c = ev.phi_prime[i] * ev.e;
                for j in 0..d {
                    jac[[row, o_eta + j]] -= c * ev.dt[j];
                }
                for j in 0..q {
                    jac[[row, o_d0 + j]] -= c * x0[j];
                }
            }
        } else {
            let eff = fit.model.effect.eval(p.t_index()[r], beta)?;
            let u = ev.e - eff.tau;
            for i in 0..b {
                let row = d + k + i;
                let gi = eff.grad[i];
                for j in 0..n {
                    jac[[row, o_gam + j]] -= gi * w[j];
                }
                for j in 0..q {
                    jac[[row, o_d0 + j]] -= gi * x0[j];
                }
                for j in 0..n * q {
                    jac[[row, o_del + j]] += gi * x[j];
                }
                for j in 0..b {
                    jac[[row, o_beta + j]] += eff.hess[[i, j]] * u - gi * eff.grad[j];
                }
            }
        }
    }
    Ok(jac / S::from_usize_lossy(p.n_periods()))
}

/// Row `t` is `Ψ(O_t; η̂, γ̂, β̂)`, columns ordered `(D, g, β)`.
pub fn stacked_moments<S: Scalar>(p: &PanelData<S>, fit: &FitResult<S>) -> Result<Array2<S>> {
    psi_at(p, fit, &Params::from_fit(fit))
}

/// Stacked moments at arbitrary parameter values.
pub fn stacked_moments_at<S: Scalar>(p: &PanelData<S>, fit: &FitResult<S>, th: &Params<S>) -> Result<Array2<S>> {
    psi_at(p, fit, th)
}

/// Analytic `∂(T⁻¹ΣΨ)/∂(η, γ, δ₀, δ, β)ᵀ` at the fitted parameters.
pub fn jacobian<S: Scalar>(p: &PanelData<S>, fit: &FitResult<S>) -> Result<Array2<S>> {
    jacobian_at(p, fit, &Params::from_fit(fit))
}

/// Analytic Jacobian at arbitrary parameter values.
pub fn jacobian_at_params<S: Scalar>(p: &PanelData<S>, fit: &FitResult<S>, th: &Params<S>) -> Result<Array2<S>> {
    jacobian_at(p, fit, th)
}

/// `Ω̂ = diag(I_d, Ω̂_g, I_b)` for the fit's moment layout.
pub fn omega_hat<S: Scalar>(fit: &FitResult<S>) -> Array2<S> {
    let lay = Layout::of(fit);
    let mut om = Array2::<S>::eye(lay.n_moments());
    if fit.method == Method::Spsc {
        om.slice_mut(s![lay.d..lay.d + lay.k, lay.d..lay.d + lay.k]).assign(&fit.omega_g);
    }
    om
}

/// Ridge penalty on the parameter vector: `ρ` on the `γ` block.
pub fn penalty_diag<S: Scalar>(fit: &FitResult<S>) -> Array1<S> {
    let lay = Layout::of(fit);
    let mut pen = Array1::<S>::zeros(lay.n_params());
    pen.slice_mut(s![lay.d..lay.d + lay.n]).fill(fit.rho_used);
    pen
}

/// Per-component AR(1) prefit `(κ̂, σ̂²)`: demeaned, lag-1, no intercept.
/// `κ̂` is clipped to `[−0.97, 0.97]`. Constant columns are skipped.
pub fn ar1_prefit<S: Scalar>(series: ArrayView2<S>) -> Result<Vec<(S, S)>> {
    let t_len = series.nrows();
    if t_len < 3 {
        return Err(SpscError::TooFewObservations(format!(
            "AR(1) bandwidth prefit needs at least 3 observations, got {t_len}"
        )));
    }
    let clip = S::lit(0.97);
    let mut out = Vec::new();
    for col in series.columns() {
        let mean = col.sum() / S::from_usize_lossy(t_len);
        let x: Vec<S> = col.iter().map(|v| *v - mean).collect();
        let (mut sxy, mut sxx) = (S::zero(), S::zero());
        for t in 1..t_len {
            sxy += x[t] * x[t - 1];
            sxx += x[t - 1] * x[t - 1];
        }
        if !(sxx > S::zero()) {
            continue;
        }
        let kappa_raw = sxy / sxx;
        let mut sse = S::zero();
        for t in 1..t_len {
            let e = x[t] - kappa_raw * x[t - 1];
            sse += e * e;
        }
        let sigma2 = sse / S::from_usize_lossy(t_len - 1);
        out.push((kappa_raw.max(-clip).min(clip), sigma2));
    }
    Ok(out)
}

/// `(α₁, α₂)` of the Andrews plug-in from per-component `(κ, σ²)`.
pub fn andrews_alpha<S: Scalar>(prefit: &[(S, S)]) -> (S, S) {
    let one = S::one();
    let four = S::lit(4.0);
    let (mut n1, mut n2, mut den) = (S::zero(), S::zero(), S::zero());
    for &(k, s2) in prefit {
        let s4 = s2 * s2;
        let om = one - k;
        n1 += four * k * k * s4 / (om.powi(6) * (one + k).powi(2));
        n2 += four * k * k * s4 / om.powi(8);
        den += s4 / om.powi(4);
    }
    if !(den > S::zero()) {
        return (S::zero(), S::zero());
    }
    (n1 / den, n2 / den)
}

/// Andrews (AR(1) plug-in) bandwidth for the given kernel.
pub fn andrews_bandwidth<S: Scalar>(series: ArrayView2<S>, kernel: Kernel) -> Result<S> {
    let t = S::from_usize_lossy(series.nrows());
    let (a1, a2) = andrews_alpha(&ar1_prefit(series)?);
    Ok(match kernel {
        Kernel::Bartlett => S::lit(1.1447) * (a1 * t).cbrt(),
        Kernel::QuadraticSpectral => S::lit(1.3221) * (a2 * t).powf(S::lit(0.2)),
    })
}

/// `T⁻¹[Γ₀ + Σ_{s≥1} K(s/ω)(Γ_s + Γ_sᵀ)]`, `Γ_s = Σ_{t ≤ T−s} Ψ_tΨ_{t+s}ᵀ`.
/// `ω = 0` keeps only the lag-0 term. The result is symmetric but not
/// PSD-repaired.
pub fn hac_covariance<S: Scalar>(psi: ArrayView2<S>, kernel: Kernel, omega: S) -> Array2<S> {
    let (t_len, m) = psi.dim();
    let mut out = psi.t().dot(&psi);
    if omega > S::zero() {
        for lag in 1..t_len {
            let wgt = kernel.weight(S::from_usize_lossy(lag) / omega);
            if wgt == S::zero() {
                if kernel == Kernel::Bartlett {
                    break;
                }
                continue;
            }
            let gamma = psi.slice(s![..t_len - lag, ..]).t().dot(&psi.slice(s![lag.., ..]));
            for i in 0..m {
                for j in 0..m {
                    out[[i, j]] += wgt * (gamma[[i, j]] + gamma[[j, i]]);
                }
            }
        }
    }
    out / S::from_usize_lossy(t_len)
}

fn normal_ci<S: Scalar>(beta: ArrayView1<S>, se: ArrayView1<S>, alpha: S) -> Result<Vec<(S, S)>> {
    if !(alpha > S::zero() && alpha < S::one()) {
        return Err(SpscError::InvalidSpec(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let z = S::lit(Normal::standard().inverse_cdf(1.0 - alpha.as_f64() / 2.0));
    Ok(beta.iter().zip(se).map(|(b, s)| (*b - z * *s, *b + z * *s)).collect())
}

fn repair_psd<S: Scalar>(m: Array2<S>, what: &str) -> Array2<S> {
    let sym = (&m + &m.t()) * S::lit(0.5);
    let (fixed, neg) = linalg::clip_psd(sym.view());
    if neg < S::zero() {
        warn!("{what} was indefinite (eigenvalue {neg}); clipped to PSD");
        fixed
    } else {
        sym
    }
}

/// `Σ̂₁ = (𝒢ᵀΩ𝒢 + diag(penalty))⁻¹ 𝒢ᵀΩ`.
pub fn sigma1<S: Scalar>(jac: ArrayView2<S>, omega: ArrayView2<S>, penalty: ArrayView1<S>) -> Result<Array2<S>> {
    let gto = jac.t().dot(&omega);
    let mut bread = gto.dot(&jac);
    for (i, pv) in penalty.iter().enumerate() {
        bread[[i, i]] += *pv;
    }
    if let Some(l) = linalg::cholesky(bread.view()) {
        if linalg::spd_condition(bread.view()) <= linalg::CONDITION_LIMIT {
            return Ok(linalg::cholesky_solve_matrix(&l, gto.view()));
        }
    }
    Err(SpscError::Singular("sandwich bread (set rho > 0 when dim g < N)"))
}

/// Sandwich variance of `β̂` from a full `Σ̂₂`: bottom-right `b×b` block of
/// `Σ̂₁Σ̂₂Σ̂₁ᵀ/T`.
pub fn sandwich<S: Scalar>(
    jac: ArrayView2<S>,
    omega: ArrayView2<S>,
    sigma2: ArrayView2<S>,
    penalty: ArrayView1<S>,
    n_obs: usize,
    beta: ArrayView1<S>,
    alpha: S,
) -> Result<VarianceResult<S>> {
    let s1 = sigma1(jac, omega, penalty)?;
    let b = beta.len();
    let rows = s1.slice(s![s1.nrows() - b.., ..]);
    let sigma2 = repair_psd(sigma2.to_owned(), "HAC long-run covariance");
    let cov = rows.dot(&sigma2).dot(&rows.t()) / S::from_usize_lossy(n_obs);
    finish(cov, beta, alpha, VarianceMethod::Hac, None, 0)
}

fn finish<S: Scalar>(
    cov: Array2<S>,
    beta: ArrayView1<S>,
    alpha: S,
    method: VarianceMethod,
    bandwidth: Option<S>,
    n_failed: usize,
) -> Result<VarianceResult<S>> {
    let cov = (&cov + &cov.t()) * S::lit(0.5);
    let se = cov.diag().mapv(|v| v.max(S::zero()).sqrt());
    let ci_beta = normal_ci(beta, se.view(), alpha)?;
    Ok(VarianceResult { method, sigma_beta: cov, se_beta: se, ci_beta, alpha, bandwidth, n_failed })
}

/// Asymptotic (HAC sandwich) variance of `β̂`.
///
/// Only the `β` block is needed, so the HAC sum is taken over the projected
/// series `v_t = Σ̂₁,β Ψ_t`; this equals the `β` block of `Σ̂₁Σ̂₂Σ̂₁ᵀ` with the
/// full `Σ̂₂`, at `O(T²b²)` instead of `O(T²m²)` cost.
pub fn asymptotic_variance<S: Scalar>(
    p: &PanelData<S>,
    fit: &FitResult<S>,
    hac: &HacSpec<S>,
    alpha: S,
) -> Result<VarianceResult<S>> {
    let psi = stacked_moments(p, fit)?;
    let jac = jacobian(p, fit)?;
    let s1 = sigma1(jac.view(), omega_hat(fit).view(), penalty_diag(fit).view())?;
    let b = fit.beta.len();
    let m = psi.ncols();
    let bandwidth = match hac.bandwidth {
        Bandwidth::Fixed(w) => {
            if !(w >= S::zero()) {
                return Err(SpscError::InvalidSpec(format!("bandwidth must be >= 0, got {w}")));
            }
            w
        }
        Bandwidth::Auto => andrews_bandwidth(psi.slice(s![.., m - b..]), hac.kernel)?,
    };
    let proj = psi.dot(&s1.slice(s![s1.nrows() - b.., ..]).t());
    let long_run = repair_psd(hac_covariance(proj.view(), hac.kernel, bandwidth), "HAC long-run covariance");
    let cov = long_run / S::from_usize_lossy(p.n_periods());
    finish(cov, fit.beta.view(), alpha, VarianceMethod::Hac, Some(bandwidth), 0)
}

/// Bartlett Andrews bandwidth of a fit's effect moments, the default block
/// length scale for the bootstrap.
pub fn default_block_len<S: Scalar>(p: &PanelData<S>, fit: &FitResult<S>) -> Result<usize> {
    let psi = stacked_moments(p, fit)?;
    let b = fit.beta.len();
    let w = andrews_bandwidth(psi.slice(s![.., psi.ncols() - b..]), Kernel::Bartlett)?;
    let len = w.ceil().as_f64().max(1.0) as usize;
    Ok(len.min(p.t0()).min(p.t1()))
}

/// Rows of one moving-block bootstrap draw: `⌈T₀/L⌉` pre blocks and
/// `⌈T₁/L⌉` post blocks of overlapping length-`L` windows, truncated.
pub(crate) fn block_rows<R: Rng>(rng: &mut R, t0: usize, t1: usize, len: usize) -> Vec<usize> {
    let mut rows = Vec::with_capacity(t0 + t1);
    for (start, span) in [(0, t0), (t0, t1)] {
        let mut drawn = Vec::with_capacity(span + len);
        while drawn.len() < span {
            let first = start + rng.random_range(0..=span - len);
            drawn.extend(first..first + len);
        }
        drawn.truncate(span);
        rows.extend(drawn);
    }
    rows
}

/// Moving block bootstrap covariance of `β̂`. `ρ` is frozen at the value the
/// original fit used. Replicate `r` draws from a ChaCha8 stream `r` keyed by
/// `seed`, so results do not depend on scheduling.
pub fn block_bootstrap<S: Scalar>(
    p: &PanelData<S>,
    cfg: &EstimatorConfig<S>,
    original: &FitResult<S>,
    block_len: usize,
    reps: usize,
    seed: u64,
    alpha: S,
) -> Result<VarianceResult<S>> {
    let (t0, t1) = (p.t0(), p.t1());
    if block_len < 1 || block_len > t0.min(t1) {
        return Err(SpscError::InvalidSpec(format!(
            "block length must lie in [1, min(T0, T1)] = [1, {}], got {block_len}",
            t0.min(t1)
        )));
    }
    if reps < 50 {
        return Err(SpscError::InvalidSpec(format!("bootstrap needs at least 50 replicates, got {reps}")));
    }
    let mut frozen = cfg.clone();
    frozen.rho = RhoPolicy::Fixed(original.rho_used);
    let draws: Vec<Option<Array1<S>>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let rows = block_rows(&mut rng, t0, t1, block_len);
            let panel = p.resampled(&rows);
            let res = match original.method {
                Method::Spsc => fit(&panel, &frozen),
                Method::Ols => fit_ols(&panel, frozen.effect),
            };
            res.ok().map(|f| f.beta)
        })
        .collect();
    let ok: Vec<&Array1<S>> = draws.iter().flatten().collect();
    let failed = reps - ok.len();
    if failed * 10 > reps {
        return Err(SpscError::BootstrapFailures { failed, total: reps });
    }
    if failed > 0 {
        warn!("{failed} of {reps} bootstrap replicates failed and were skipped");
    }
    let b = original.beta.len();
    let nb = S::from_usize_lossy(ok.len());
    let mean = ok.iter().fold(Array1::<S>::zeros(b), |acc, v| acc + *v) / nb;
    let mut cov = Array2::<S>::zeros((b, b));
    for v in &ok {
        let dv = *v - &mean;
        for i in 0..b {
            for j in 0..b {
                cov[[i, j]] += dv[i] * dv[j];
            }
        }
    }
    cov /= S::from_usize_lossy(ok.len() - 1);
    finish(cov, original.beta.view(), alpha, VarianceMethod::Bootstrap, None, failed)
}
