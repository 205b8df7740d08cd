//! JSON run configuration. Every field is optional; missing fields take the
//! SPSC-DT defaults. Example:
//!
//! ```json
//! {
//!   "method": "spsc",
//!   "phi": "identity",
//!   "detrend": "cubic_bspline:6",
//!   "effect": "constant",
//!   "omega_g": "identity",
//!   "rho": "loocv",
//!   "hac": { "kernel": "qs", "bandwidth": "auto" },
//!   "alpha": 0.05,
//!   "conformal": { "k": 6, "n_points": 201 },
//!   "bootstrap": { "reps": 200, "block_len": 4 }
//! }
//! ```
//!
//! `rho` is a number, `"loocv"` (default grid) or `{"loocv": [grid...]}`.
//! `omega_g` is `"identity"` or a square array of rows.

use std::path::Path;

use ndarray::Array2;
use serde::Deserialize;
use spsc_core::{Bandwidth, Config, Grid, Hac, Kernel, OmegaG, RhoPolicy};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodName {
    Spsc,
    Ols,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RhoField {
    Value(f64),
    Name(String),
    Grid { loocv: Vec<f64> },
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum OmegaField {
    Name(String),
    Rows(Vec<Vec<f64>>),
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum BandwidthField {
    Value(f64),
    Name(String),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct HacField {
    kernel: Option<String>,
    bandwidth: Option<BandwidthField>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridField {
    k: Option<f64>,
    n_points: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapField {
    pub reps: usize,
    pub block_len: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    method: Option<MethodName>,
    phi: Option<String>,
    detrend: Option<String>,
    effect: Option<String>,
    omega_g: Option<OmegaField>,
    rho: Option<RhoField>,
    refit_eta_per_fold: Option<bool>,
    hac: Option<HacField>,
    alpha: Option<f64>,
    conformal: Option<GridField>,
    bootstrap: Option<BootstrapField>,
}

/// Fully resolved settings for one run.
#[derive(Debug, Clone)]
pub struct Settings {
    pub method: MethodName,
    pub estimator: Config,
    pub hac: Hac,
    pub alpha: f64,
    pub grid: Grid,
    pub bootstrap: Option<BootstrapField>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            method: MethodName::Spsc,
            estimator: Config::spsc_dt(),
            hac: Hac::default(),
            alpha: 0.05,
            grid: Grid::default(),
            bootstrap: None,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn parse_with<T: std::str::FromStr<Err = spsc_core::SpscError>>(s: &str) -> Result<T, CliError> {
    s.parse().map_err(|e: spsc_core::SpscError| usage(e.to_string()))
}

pub fn parse_rho(s: &str) -> Result<RhoPolicy<f64>, CliError> {
    if s == "loocv" {
        return Ok(RhoPolicy::Loocv { grid: None });
    }
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(RhoPolicy::Fixed(v)),
        _ => Err(usage(format!("--rho expects a non-negative number or `loocv`, got `{s}`"))),
    }
}

pub fn parse_kernel(s: &str) -> Result<Kernel, CliError> {
    parse_with(s)
}

pub fn parse_bandwidth(s: &str) -> Result<Bandwidth<f64>, CliError> {
    if s == "auto" {
        return Ok(Bandwidth::Auto);
    }
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(Bandwidth::Fixed(v)),
        _ => Err(usage(format!("bandwidth expects a non-negative number or `auto`, got `{s}`"))),
    }
}

impl Settings {
    /// Reads a config file; `None` gives the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(p.display().to_string(), e))?;
                Self::from_json(&text)
            }
        }
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let file: ConfigFile = serde_json::from_str(text).map_err(|e| usage(format!("config: {e}")))?;
        let mut out = Self::default();
        if let Some(m) = file.method {
            out.method = m;
        }
        let cfg = &mut out.estimator;
        if let Some(s) = &file.phi {
            cfg.phi = parse_with(s)?;
        }
        if let Some(s) = &file.detrend {
            cfg.detrend = parse_with(s)?;
        }
        if let Some(s) = &file.effect {
            cfg.effect = parse_with(s)?;
        }
        match file.omega_g {
            None => {}
            Some(OmegaField::Name(n)) if n == "identity" => cfg.omega_g = OmegaG::Identity,
            Some(OmegaField::Name(n)) => return Err(usage(format!("config: unknown omega_g `{n}`"))),
            Some(OmegaField::Rows(rows)) => {
                let k = rows.len();
                if rows.iter().any(|r| r.len() != k) {
                    return Err(usage("config: omega_g must be a square array"));
                }
                let m = Array2::from_shape_fn((k, k), |(i, j)| rows[i][j]);
                cfg.omega_g = OmegaG::Matrix(m);
            }
        }
        match file.rho {
            None => {}
            Some(RhoField::Value(v)) => cfg.rho = RhoPolicy::Fixed(v),
            Some(RhoField::Name(n)) => cfg.rho = parse_rho(&n)?,
            Some(RhoField::Grid { loocv }) => cfg.rho = RhoPolicy::Loocv { grid: Some(loocv) },
        }
        if let Some(b) = file.refit_eta_per_fold {
            cfg.refit_eta_per_fold = b;
        }
        if let Some(h) = file.hac {
            if let Some(k) = &h.kernel {
                out.hac.kernel = parse_kernel(k)?;
            }
            match h.bandwidth {
                None => {}
                Some(BandwidthField::Value(v)) => out.hac.bandwidth = parse_bandwidth(&v.to_string())?,
                Some(BandwidthField::Name(n)) => out.hac.bandwidth = parse_bandwidth(&n)?,
            }
        }
        if let Some(a) = file.alpha {
            out.alpha = a;
        }
        if let Some(g) = file.conformal {
            if let Some(k) = g.k {
                out.grid.k = k;
            }
            if let Some(n) = g.n_points {
                out.grid.n_points = n;
            }
        }
        out.bootstrap = file.bootstrap;
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(usage(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.grid.k > 0.0) || self.grid.n_points < 2 {
            return Err(usage("conformal grid needs k > 0 and at least 2 points"));
        }
        self.estimator.validate().map_err(|e| usage(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use spsc_core::{DetrendKind, EffectKind, PhiSpec};

    #[test]
    fn empty_object_gives_defaults() {
        let s = Settings::from_json("{}").unwrap();
        assert_eq!(s.estimator, Config::spsc_dt());
        assert_eq!(s.method, MethodName::Spsc);
        assert_eq!(s.alpha, 0.05);
        assert!(s.bootstrap.is_none());
    }

    #[test]
    fn full_config_round_trips_fields() {
        let s = Settings::from_json(
            r#"{"method": "spsc", "phi": "polynomial:2", "detrend": "none", "effect": "linear",
                "omega_g": [[2, 0], [0, 1]], "rho": {"loocv": [0.1, 1.0]},
                "hac": {"kernel": "bartlett", "bandwidth": 3},
                "alpha": 0.1, "conformal": {"k": 4, "n_points": 51},
                "bootstrap": {"reps": 100}}"#,
        )
        .unwrap();
        assert_eq!(s.estimator.phi, PhiSpec::Polynomial(2));
        assert_eq!(s.estimator.detrend, DetrendKind::None);
        assert_eq!(s.estimator.effect, EffectKind::Linear);
        assert_eq!(s.estimator.rho, RhoPolicy::Loocv { grid: Some(vec![0.1, 1.0]) });
        assert_eq!(s.hac.kernel, Kernel::Bartlett);
        assert_eq!(s.hac.bandwidth, Bandwidth::Fixed(3.0));
        assert_eq!((s.grid.k, s.grid.n_points), (4.0, 51));
        assert_eq!(s.bootstrap, Some(BootstrapField { reps: 100, block_len: None }));
        assert!(matches!(s.estimator.omega_g, OmegaG::Matrix(_)));
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            r#"{"unknown": 1}"#,
            r#"{"rho": "sometimes"}"#,
            r#"{"alpha": 1.5}"#,
            r#"{"omega_g": [[1, 0]]}"#,
            r#"{"detrend": "cubic_bspline:2"}"#,
            r#"{"hac": {"kernel": "parzen"}}"#,
            "not json",
        ] {
            assert!(matches!(Settings::from_json(bad), Err(CliError::Usage(_))), "{bad}");
        }
    }

    #[test]
    fn flag_parsers() {
        assert_eq!(parse_rho("loocv").unwrap(), RhoPolicy::Loocv { grid: None });
        assert_eq!(parse_rho("0.5").unwrap(), RhoPolicy::Fixed(0.5));
        assert!(parse_rho("-1").is_err());
        assert_eq!(parse_bandwidth("auto").unwrap(), Bandwidth::Auto);
        assert!(parse_bandwidth("x").is_err());
    }
}
