//! Interactive fixed effects simulation designs, their true weights, a Monte
//! Carlo harness and placebo re-splitting.
//!
//! Replicate `r` draws from ChaCha8 stream `r` keyed by the spec seed, so a
//! panel depends only on `(seed, r)` and never on scheduling.

use std::fmt;
use std::str::FromStr;

use log::warn;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bases::EffectKind;
use crate::conformal::{conformal_at, GridConfig};
use crate::data::PanelData;
use crate::error::{Result, SpscError};
use crate::estimator::{fit, fit_ols, EstimatorConfig, FitResult};
use crate::inference::{asymptotic_variance, block_bootstrap, default_block_len, HacSpec};
use crate::linalg;
use crate::scalar::compensated_sum;

pub const N_DONORS: usize = 16;
pub const N_FACTORS: usize = 4;
pub const TRUE_ATT: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    None,
    Linear,
    NoneIntercept,
    LinearIntercept,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mu0 {
    Simplex,
    NonSimplex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorRegime {
    Independent,
    Correlated,
    NoYError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    pub t0: usize,
    pub t1: usize,
    pub trend: Trend,
    pub mu0: Mu0,
    pub errors: ErrorRegime,
    #[serde(default)]
    pub seed: u64,
}

impl SimulationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.t0 < 10 || self.t1 < 10 {
            return Err(SpscError::InvalidSpec(format!(
                "simulation needs t0, t1 >= 10, got t0 = {}, t1 = {}",
                self.t0, self.t1
            )));
        }
        Ok(())
    }
}

/// The 4×16 loading matrix `𝔐`, donors in columns.
pub fn loadings() -> Array2<f64> {
    const ROW1: [f64; 8] = [2.0, 1.75, 1.5, 1.25, 1.0, 0.75, 0.5, 0.25];
    const ROW2: [f64; 8] = [0.8, 0.8, 0.6, 0.6, 0.4, 0.4, 0.2, 0.2];
    let mut m = Array2::<f64>::zeros((N_FACTORS, N_DONORS));
    for i in 0..8 {
        m[[0, i]] = ROW1[i];
        m[[1, i]] = ROW2[i];
        m[[2, i + 8]] = 1.0;
        m[[3, i + 8]] = 0.5;
    }
    m
}

pub fn treated_loading(mu0: Mu0) -> Array1<f64> {
    match mu0 {
        Mu0::Simplex => Array1::from_vec(vec![1.125, 0.5, 0.0, 0.0]),
        Mu0::NonSimplex => Array1::from_vec(vec![2.0, 1.5, 0.0, 0.0]),
    }
}

/// Factor of the 9×9 error covariance `Σ_e` for `(e₀, e₁..e₈)`, i.e. `F` with
/// `FFᵀ = Σ_e`.
pub fn error_factor(errors: ErrorRegime) -> Array2<f64> {
    match errors {
        ErrorRegime::Independent => Array2::eye(9),
        ErrorRegime::Correlated => {
            let sigma = Array2::from_shape_fn((9, 9), |(i, j)| if i == j { 1.0 } else { 0.9 });
            linalg::cholesky(sigma.view()).expect("0.1 I + 0.9 J is positive definite")
        }
        ErrorRegime::NoYError => {
            let mut f = Array2::eye(9);
            f[[0, 0]] = 0.0;
            f
        }
    }
}

/// Known truth for a generated panel.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    /// `τ*_t = 3` over the post-period.
    pub att_path: Array1<f64>,
    /// Treatment-free outcome for every period.
    pub y0_path: Array1<f64>,
    /// Realized effect `ξ*_t = 3 + ε_t` over the post-period.
    pub xi_path: Array1<f64>,
}

/// Spec-level quantities shared by every replicate.
struct Design {
    spec: SimulationSpec,
    m: Array2<f64>,
    mu0: Array1<f64>,
    factor: Array2<f64>,
}

impl Design {
    fn new(spec: &SimulationSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec: *spec, m: loadings(), mu0: treated_loading(spec.mu0), factor: error_factor(spec.errors) })
    }

    fn trend_mean(&self, t: usize) -> f64 {
        let s = t as f64 / self.spec.t0 as f64;
        match self.spec.trend {
            Trend::None => 0.0,
            Trend::Linear => s,
            Trend::NoneIntercept => 1.0,
            Trend::LinearIntercept => 1.0 + s,
        }
    }

    fn generate(&self, rep: usize) -> (PanelData<f64>, Truth) {
        let (t0, t1) = (self.spec.t0, self.spec.t1);
        let t_len = t0 + t1;
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(rep as u64);
        let mut z = || -> f64 { StandardNormal.sample(&mut rng) };
        let mut y = Array1::<f64>::zeros(t_len);
        let mut y0 = Array1::<f64>::zeros(t_len);
        let mut w = Array2::<f64>::zeros((t_len, N_DONORS));
        let mut xi = Array1::<f64>::zeros(t1);
        let mut lambda = [0.0; N_FACTORS];
        let mut corr = [0.0; 9];
        for r in 0..t_len {
            let nu = self.trend_mean(r + 1);
            for l in lambda.iter_mut() {
                *l = nu + 0.5 * z();
            }
            for c in corr.iter_mut() {
                *c = z();
            }
            let mut e = [0.0; N_DONORS + 1];
            for i in 0..9 {
                e[i] = 0.5 * (0..=i).map(|j| self.factor[[i, j]] * corr[j]).sum::<f64>();
            }
            for v in e.iter_mut().skip(9) {
                *v = 0.5 * z();
            }
            let eps = 0.5 * z();
            y0[r] = (0..N_FACTORS).map(|k| self.mu0[k] * lambda[k]).sum::<f64>() + e[0];
            for i in 0..N_DONORS {
                w[[r, i]] = (0..N_FACTORS).map(|k| self.m[[k, i]] * lambda[k]).sum::<f64>() + e[i + 1];
            }
            y[r] = if r >= t0 {
                xi[r - t0] = TRUE_ATT + eps;
                y0[r] + TRUE_ATT + eps
            } else {
                y0[r]
            };
        }
        let panel = PanelData::new(y, w, t0).expect("generated panel is valid");
        (panel, Truth { att_path: Array1::from_elem(t1, TRUE_ATT), y0_path: y0, xi_path: xi })
    }
}

/// Replicate `rep` of the design.
pub fn generate_ifem(spec: &SimulationSpec, rep: usize) -> Result<(PanelData<f64>, Truth)> {
    Ok(Design::new(spec)?.generate(rep))
}

/// Minimum-norm `γ` solving `[𝔐; ωᵀ]γ = (μ₀; ω₀)`, or `None` when the system
/// has no solution.
pub fn true_weight_oracle(spec: &SimulationSpec) -> Option<Array1<f64>> {
    let (omega0, omega_donor) = match spec.errors {
        ErrorRegime::Independent => (1.0, 0.0),
        ErrorRegime::Correlated => (1.0, 0.9),
        ErrorRegime::NoYError => (0.0, 0.0),
    };
    let mut a = Array2::<f64>::zeros((N_FACTORS + 1, N_DONORS));
    a.slice_mut(ndarray::s![..N_FACTORS, ..]).assign(&loadings());
    for i in 0..8 {
        a[[N_FACTORS, i]] = omega_donor;
    }
    let mut rhs = Array1::<f64>::zeros(N_FACTORS + 1);
    rhs.slice_mut(ndarray::s![..N_FACTORS]).assign(&treated_loading(spec.mu0));
    rhs[N_FACTORS] = omega0;
    let gamma = linalg::min_norm_solve(a.view(), rhs.view(), 1e-10);
    let resid = &a.dot(&gamma) - &rhs;
    let scale = 1.0 + rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if resid.iter().all(|v| v.abs() <= 1e-8 * scale) {
        Some(gamma)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EstimatorKind {
    Spsc(EstimatorConfig<f64>),
    OlsNoReg,
}

/// A named estimator in a Monte Carlo comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedEstimator {
    pub name: String,
    pub kind: EstimatorKind,
}

impl NamedEstimator {
    pub fn fit(&self, p: &PanelData<f64>) -> Result<FitResult<f64>> {
        match &self.kind {
            EstimatorKind::Spsc(cfg) => fit(p, cfg),
            EstimatorKind::OlsNoReg => fit_ols(p, EffectKind::Constant),
        }
    }

    fn config(&self) -> EstimatorConfig<f64> {
        match &self.kind {
            EstimatorKind::Spsc(cfg) => cfg.clone(),
            EstimatorKind::OlsNoReg => EstimatorConfig::spsc_nodt().with_rho(0.0),
        }
    }
}

impl FromStr for NamedEstimator {
    type Err = SpscError;
    /// `spsc-dt`, `spsc-nodt` or `ols-noreg`.
    fn from_str(s: &str) -> Result<Self> {
        let kind = match s {
            "spsc-dt" => EstimatorKind::Spsc(EstimatorConfig::spsc_dt()),
            "spsc-nodt" => EstimatorKind::Spsc(EstimatorConfig::spsc_nodt()),
            "ols-noreg" => EstimatorKind::OlsNoReg,
            _ => return Err(SpscError::InvalidSpec(format!("unknown estimator `{s}`"))),
        };
        Ok(Self { name: s.to_string(), kind })
    }
}

impl fmt::Display for NamedEstimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapOptions {
    pub reps: usize,
    /// Defaults to the Bartlett Andrews bandwidth, rounded up.
    pub block_len: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McOptions {
    pub hac: HacSpec<f64>,
    pub alpha: f64,
    pub bootstrap: Option<BootstrapOptions>,
}

impl Default for McOptions {
    fn default() -> Self {
        Self { hac: HacSpec::default(), alpha: 0.05, bootstrap: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct RepRecord {
    estimate: f64,
    ase: f64,
    covered_ase: bool,
    bse: Option<f64>,
    covered_bse: Option<bool>,
}

/// Summary statistics for one estimator. `bse_mean` and `coverage_bse` are
/// `None` when the bootstrap was not run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McRow {
    pub estimator: String,
    pub reps: usize,
    pub failures: usize,
    pub bias: f64,
    pub ese: f64,
    pub mse: f64,
    pub ase_mean: f64,
    pub bse_mean: Option<f64>,
    pub coverage_ase: f64,
    pub coverage_bse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McSummary {
    pub rows: Vec<McRow>,
    /// Successful estimates per estimator, in replicate order.
    pub estimates: Vec<Vec<f64>>,
}

fn seed_for(seed: u64, rep: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(rep as u64 + 1)
}

fn run_rep(p: &PanelData<f64>, est: &NamedEstimator, opts: &McOptions, boot_seed: u64) -> Result<RepRecord> {
    let f = est.fit(p)?;
    let v = asymptotic_variance(p, &f, &opts.hac, opts.alpha)?;
    let estimate = f.beta[0];
    let (lo, hi) = v.ci_beta[0];
    let covered_ase = lo <= TRUE_ATT && TRUE_ATT <= hi;
    let (bse, covered_bse) = match opts.bootstrap {
        Some(b) => {
            let len = match b.block_len {
                Some(l) => l,
                None => default_block_len(p, &f)?,
            };
            let bv = block_bootstrap(p, &est.config(), &f, len, b.reps, boot_seed, opts.alpha)?;
            let (lo, hi) = bv.ci_beta[0];
            (Some(bv.se_beta[0]), Some(lo <= TRUE_ATT && TRUE_ATT <= hi))
        }
        None => (None, None),
    };
    Ok(RepRecord { estimate, ase: v.se_beta[0], covered_ase, bse, covered_bse })
}

fn mean(v: &[f64]) -> f64 {
    compensated_sum(v.iter().copied()) / v.len() as f64
}

fn summarize(name: &str, recs: &[Option<RepRecord>]) -> Result<(McRow, Vec<f64>)> {
    let ok: Vec<&RepRecord> = recs.iter().flatten().collect();
    let failures = recs.len() - ok.len();
    if ok.is_empty() {
        return Err(SpscError::AllReplicatesFailed(recs.len(), name.to_string()));
    }
    if failures > 0 {
        warn!("{name}: {failures} of {} replicates failed and were excluded", recs.len());
    }
    let est: Vec<f64> = ok.iter().map(|r| r.estimate).collect();
    let m = est.len() as f64;
    let avg = mean(&est);
    let ese =
        if est.len() > 1 { (compensated_sum(est.iter().map(|v| (v - avg).powi(2))) / (m - 1.0)).sqrt() } else { 0.0 };
    let frac = |flags: Vec<bool>| flags.iter().filter(|b| **b).count() as f64 / flags.len() as f64;
    let bse: Option<Vec<f64>> = ok.iter().map(|r| r.bse).collect();
    let cov_bse: Option<Vec<bool>> = ok.iter().map(|r| r.covered_bse).collect();
    let row = McRow {
        estimator: name.to_string(),
        reps: ok.len(),
        failures,
        bias: avg - TRUE_ATT,
        ese,
        mse: mean(&est.iter().map(|v| (v - TRUE_ATT).powi(2)).collect::<Vec<_>>()),
        ase_mean: mean(&ok.iter().map(|r| r.ase).collect::<Vec<_>>()),
        bse_mean: bse.map(|v| mean(&v)),
        coverage_ase: frac(ok.iter().map(|r| r.covered_ase).collect()),
        coverage_bse: cov_bse.map(frac),
    };
    Ok((row, est))
}

/// Runs `m` replicates of the design through every estimator. Replicate
/// failures are excluded and counted; an estimator with no successful
/// replicate is an error.
pub fn monte_carlo(
    spec: &SimulationSpec,
    estimators: &[NamedEstimator],
    m: usize,
    opts: &McOptions,
) -> Result<McSummary> {
    if m < 2 {
        return Err(SpscError::InvalidSpec(format!("Monte Carlo needs at least 2 replicates, got {m}")));
    }
    for e in estimators {
        if let EstimatorKind::Spsc(cfg) = &e.kind {
            if cfg.effect != EffectKind::Constant {
                return Err(SpscError::InvalidSpec("Monte Carlo summaries need the constant effect model".into()));
            }
        }
    }
    let design = Design::new(spec)?;
    let per_rep: Vec<Vec<Option<RepRecord>>> = (0..m)
        .into_par_iter()
        .map(|rep| {
            let (p, _) = design.generate(rep);
            estimators
                .iter()
                .map(|e| match run_rep(&p, e, opts, seed_for(spec.seed, rep)) {
                    Ok(r) => Some(r),
                    Err(err) => {
                        warn!("replicate {rep}, {}: {err}", e.name);
                        None
                    }
                })
                .collect()
        })
        .collect();
    let mut rows = Vec::with_capacity(estimators.len());
    let mut estimates = Vec::with_capacity(estimators.len());
    for (k, e) in estimators.iter().enumerate() {
        let recs: Vec<Option<RepRecord>> = per_rep.iter().map(|r| r[k]).collect();
        let (row, est) = summarize(&e.name, &recs)?;
        rows.push(row);
        estimates.push(est);
    }
    Ok(McSummary { rows, estimates })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConformalCoverage {
    /// Post-period calendar times that were tested.
    pub times: Vec<usize>,
    /// Fraction of successful replicates covering `ξ*_t`, per time.
    pub coverage: Vec<f64>,
    pub overall: f64,
    pub mean_length: f64,
    /// Share of intervals with an empty acceptance set.
    pub degenerate_rate: f64,
    /// Share of intervals whose acceptance set reached the grid edge.
    pub edge_rate: f64,
    pub reps: usize,
    pub failures: usize,
}

/// Post-period times `T₀ + round(f·T₁)` for each fraction, clamped into the
/// post-period and deduplicated.
pub fn post_times(t0: usize, t1: usize, fracs: &[f64]) -> Vec<usize> {
    let mut out: Vec<usize> = fracs.iter().map(|f| t0 + ((f * t1 as f64).round() as usize).clamp(1, t1)).collect();
    out.dedup();
    out
}

/// Pointwise coverage of conformal intervals for the realized effects.
pub fn coverage_conformal(
    spec: &SimulationSpec,
    cfg: &EstimatorConfig<f64>,
    m: usize,
    post_fracs: &[f64],
    alpha: f64,
    grid: &GridConfig<f64>,
) -> Result<ConformalCoverage> {
    if m < 1 || post_fracs.is_empty() {
        return Err(SpscError::InvalidSpec("conformal coverage needs at least one replicate and one post time".into()));
    }
    let design = Design::new(spec)?;
    let times = post_times(spec.t0, spec.t1, post_fracs);
    // per time: (covered, length, degenerate, edge)
    let per_rep: Vec<Option<Vec<(bool, f64, bool, bool)>>> = (0..m)
        .into_par_iter()
        .map(|rep| {
            let (p, truth) = design.generate(rep);
            let run = || -> Result<Vec<(bool, f64, bool, bool)>> {
                let full = fit(&p, cfg)?;
                conformal_at(&p, &full, cfg, &times, alpha, grid)?
                    .into_iter()
                    .map(|r| {
                        let r = r?;
                        let xi = truth.xi_path[r.s - spec.t0 - 1];
                        let (lo, hi) = r.interval;
                        Ok((lo <= xi && xi <= hi, hi - lo, r.degenerate, r.hit_grid_edge))
                    })
                    .collect()
            };
            match run() {
                Ok(v) => Some(v),
                Err(err) => {
                    warn!("conformal replicate {rep}: {err}");
                    None
                }
            }
        })
        .collect();
    let ok: Vec<&Vec<(bool, f64, bool, bool)>> = per_rep.iter().flatten().collect();
    if ok.is_empty() {
        return Err(SpscError::AllReplicatesFailed(m, "conformal".into()));
    }
    let n = ok.len() as f64;
    let coverage: Vec<f64> = (0..times.len()).map(|j| ok.iter().filter(|r| r[j].0).count() as f64 / n).collect();
    let cells: Vec<&(bool, f64, bool, bool)> = ok.iter().flat_map(|r| r.iter()).collect();
    let nc = cells.len() as f64;
    Ok(ConformalCoverage {
        overall: cells.iter().filter(|c| c.0).count() as f64 / nc,
        mean_length: compensated_sum(cells.iter().map(|c| c.1)) / nc,
        degenerate_rate: cells.iter().filter(|c| c.2).count() as f64 / nc,
        edge_rate: cells.iter().filter(|c| c.3).count() as f64 / nc,
        coverage,
        times,
        reps: ok.len(),
        failures: m - ok.len(),
    })
}

/// Pre-period data re-split at `new_t0`: rows after the original `T₀` are
/// dropped so no treated observation enters the placebo fit.
pub fn placebo_shift<S: crate::scalar::Scalar>(p: &PanelData<S>, new_t0: usize) -> Result<PanelData<S>> {
    if new_t0 == 0 || new_t0 >= p.t0() {
        return Err(SpscError::T0OutOfRange { t0: new_t0, len: p.t0() });
    }
    p.truncated(p.t0(), new_t0)
}
