//! Single proxy synthetic control: estimation, inference, tuning and
//! simulation for one treated unit observed with a panel of donor proxies.
//!
//! Numeric routines are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix `f64`.

// Negated comparisons are deliberate: they reject NaN alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bases;
pub mod conformal;
pub mod cv;
pub mod data;
pub mod error;
pub mod estimator;
pub mod inference;
pub mod linalg;
pub mod scalar;
pub mod simulation;

pub use bases::{DetrendKind, DetrendSpec, EffectKind, EffectModel, PhiSpec};
pub use conformal::{conformal_all, conformal_at, conformal_interval, conformal_pvalue, ConformalResult, GridConfig};
pub use cv::{default_grid, log_grid, loocv_rho, LoocvResult};
pub use data::{load_panel_csv, read_panel_csv, split_pre_post, write_panel_csv, CsvSchema, PanelData};
pub use error::{Result, SpscError};
pub use estimator::{
    compute_moments, fit, fit_detrend, fit_effect, fit_ols, fit_with_covariates, objective, ols_weights, solve_weights,
    EstimatorConfig, FitResult, Method, MomentMatrices, OmegaG, ResolvedModel, RhoPolicy,
};
pub use inference::{
    andrews_bandwidth, asymptotic_variance, block_bootstrap, default_block_len, hac_covariance, jacobian, sandwich,
    stacked_moments, Bandwidth, HacSpec, Kernel, VarianceMethod, VarianceResult,
};
pub use scalar::Scalar;
pub use simulation::{
    coverage_conformal, generate_ifem, monte_carlo, placebo_shift, true_weight_oracle, ErrorRegime, McOptions, McRow,
    McSummary, Mu0, NamedEstimator, SimulationSpec, Trend,
};

pub type Panel = PanelData<f64>;
pub type Config = EstimatorConfig<f64>;
pub type Fit = FitResult<f64>;
pub type Variance = VarianceResult<f64>;
pub type Hac = HacSpec<f64>;
pub type Conformal = ConformalResult<f64>;
pub type Grid = GridConfig<f64>;
