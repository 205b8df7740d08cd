use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde_json::{json, Value};
use spsc_core::simulation::BootstrapOptions;
use spsc_core::{
    asymptotic_variance, block_bootstrap, conformal_all, default_block_len, fit, fit_ols, load_panel_csv, monte_carlo,
    placebo_shift, CsvSchema, Fit, McOptions, NamedEstimator, Panel, RhoPolicy, SimulationSpec, Variance,
    VarianceMethod,
};

use crate::config::{parse_bandwidth, parse_kernel, parse_rho, BootstrapField, MethodName, Settings};
use crate::{CliError, EstimateArgs, PanelArgs, SimulateArgs};

fn open_out(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| CliError::Io(p.display().to_string(), e))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn io_err(path: Option<&Path>) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |e| CliError::Io(path.map_or("stdout".into(), |p| p.display().to_string()), e)
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Compute { context: "writing csv", source: e.into() }
}

/// Config file plus the flag overrides shared by the panel subcommands.
fn settings(a: &PanelArgs) -> Result<Settings, CliError> {
    let mut s = Settings::load(a.config.as_deref())?;
    if let Some(alpha) = a.alpha {
        s.alpha = alpha;
    }
    if let Some(r) = &a.rho {
        s.estimator.rho = parse_rho(r)?;
    }
    s.validate()?;
    Ok(s)
}

fn load_panel(a: &PanelArgs) -> Result<Panel, CliError> {
    let schema = CsvSchema { t0: a.t0, ..CsvSchema::default() };
    load_panel_csv(&a.input, &schema).map_err(|e| match e {
        spsc_core::SpscError::Io(io) => CliError::Io(a.input.display().to_string(), io),
        other => CliError::Compute { context: "reading panel", source: other },
    })
}

fn fit_with(p: &Panel, s: &Settings) -> Result<Fit, CliError> {
    match s.method {
        MethodName::Spsc => fit(p, &s.estimator),
        MethodName::Ols => fit_ols(p, s.estimator.effect),
    }
    .map_err(CliError::compute("fit"))
}

fn variance(p: &Panel, f: &Fit, s: &Settings, seed: u64) -> Result<Variance, CliError> {
    match s.bootstrap {
        Some(BootstrapField { reps, block_len }) => {
            let len = match block_len {
                Some(l) => l,
                None => default_block_len(p, f).map_err(CliError::compute("block length"))?,
            };
            block_bootstrap(p, &s.estimator, f, len, reps, seed, s.alpha).map_err(CliError::compute("bootstrap"))
        }
        None => asymptotic_variance(p, f, &s.hac, s.alpha).map_err(CliError::compute("variance")),
    }
}

fn pairs(v: &[(f64, f64)]) -> Value {
    Value::Array(v.iter().map(|(a, b)| json!([a, b])).collect())
}

fn fit_json(p: &Panel, f: &Fit, v: &Variance, s: &Settings) -> Value {
    let rows: Vec<Vec<f64>> = v.sigma_beta.rows().into_iter().map(|r| r.to_vec()).collect();
    json!({
        "method": match f.method { spsc_core::Method::Spsc => "spsc", spsc_core::Method::Ols => "ols" },
        "phi": s.estimator.phi.to_string(),
        "detrend": s.estimator.detrend.to_string(),
        "effect": s.estimator.effect.to_string(),
        "t0": p.t0(),
        "t1": p.t1(),
        "n_donors": p.n_donors(),
        "eta": f.eta.to_vec(),
        "gamma": f.gamma.to_vec(),
        "beta": f.beta.to_vec(),
        "rho_used": f.rho_used,
        "att_path": f.att_path.to_vec(),
        "delta0": f.delta0.as_ref().map(|d| d.to_vec()),
        "delta": f.delta.as_ref().map(|d| d.to_vec()),
        "variance_method": match v.method { VarianceMethod::Hac => "hac", VarianceMethod::Bootstrap => "bootstrap" },
        "kernel": (v.method == VarianceMethod::Hac).then(|| s.hac.kernel.to_string()),
        "bandwidth": v.bandwidth,
        "bootstrap_failures": v.n_failed,
        "sigma_beta": rows,
        "se_beta": v.se_beta.to_vec(),
        "ci_beta": pairs(&v.ci_beta),
        "alpha": v.alpha,
    })
}

pub fn estimate(a: &EstimateArgs, new_t0: Option<usize>) -> Result<(), CliError> {
    let mut s = settings(&a.panel)?;
    let inf = &a.inference;
    if let Some(k) = &inf.kernel {
        s.hac.kernel = parse_kernel(k)?;
    }
    if let Some(b) = &inf.bandwidth {
        s.hac.bandwidth = parse_bandwidth(b)?;
    }
    if let Some(reps) = inf.boot_reps {
        s.bootstrap = Some(BootstrapField { reps, block_len: inf.block_len });
    } else if let (Some(l), Some(b)) = (inf.block_len, s.bootstrap.as_mut()) {
        b.block_len = Some(l);
    } else if inf.block_len.is_some() {
        return Err(CliError::Usage("--block-len needs --boot-reps or a bootstrap config".into()));
    }

    let mut p = load_panel(&a.panel)?;
    if let Some(t) = new_t0 {
        p = placebo_shift(&p, t).map_err(CliError::compute("placebo"))?;
    }
    let f = fit_with(&p, &s)?;
    let v = variance(&p, &f, &s, inf.seed)?;
    let out = a.panel.out.as_deref();
    let mut w = open_out(out)?;
    let text = serde_json::to_string_pretty(&fit_json(&p, &f, &v, &s)).expect("json values serialize");
    writeln!(w, "{text}").and_then(|_| w.flush()).map_err(io_err(out))
}

pub fn loocv(a: &PanelArgs) -> Result<(), CliError> {
    let mut s = settings(a)?;
    if let RhoPolicy::Fixed(_) = s.estimator.rho {
        s.estimator.rho = RhoPolicy::Loocv { grid: None };
    }
    let p = load_panel(a)?;
    let f = fit(&p, &s.estimator).map_err(CliError::compute("loocv"))?;
    let cv = f.loocv.expect("loocv policy records the search");
    let mut w = csv::Writer::from_writer(open_out(a.out.as_deref())?);
    w.write_record(["rho", "mse", "selected"]).map_err(csv_err)?;
    for (rho, mse) in cv.grid.iter().zip(&cv.mse) {
        let sel = u8::from(*rho == cv.rho_opt);
        w.write_record([rho.to_string(), mse.to_string(), sel.to_string()]).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(a.out.as_deref()))
}

pub fn conformal(a: &PanelArgs) -> Result<(), CliError> {
    let s = settings(a)?;
    let p = load_panel(a)?;
    let results = conformal_all(&p, s.alpha, &s.estimator, &s.grid).map_err(CliError::compute("conformal"))?;
    let mut w = csv::Writer::from_writer(open_out(a.out.as_deref())?);
    w.write_record(["t", "lo", "hi", "plug_in", "n_grid", "degenerate_flag"]).map_err(csv_err)?;
    for r in results {
        let r = r.map_err(CliError::compute("conformal"))?;
        if r.hit_grid_edge {
            log::warn!("t = {}: accepted set reaches the grid edge; widen the conformal grid", r.s);
        }
        let label = p.labels()[r.s - 1];
        w.write_record([
            label.to_string(),
            r.interval.0.to_string(),
            r.interval.1.to_string(),
            r.plug_in.to_string(),
            r.grid.len().to_string(),
            u8::from(r.degenerate).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(a.out.as_deref()))
}

pub fn simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&a.spec).map_err(|e| CliError::Io(a.spec.display().to_string(), e))?;
    let mut spec: SimulationSpec =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("simulation spec: {e}")))?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let estimators = a
        .estimators
        .split(',')
        .map(|s| s.trim().parse::<NamedEstimator>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mut opts = McOptions::default();
    if let Some(alpha) = a.alpha {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(CliError::Usage(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        opts.alpha = alpha;
    }
    if let Some(k) = &a.kernel {
        opts.hac.kernel = parse_kernel(k)?;
    }
    if let Some(b) = &a.bandwidth {
        opts.hac.bandwidth = parse_bandwidth(b)?;
    }
    match (a.boot_reps, a.block_len) {
        (Some(reps), block_len) => opts.bootstrap = Some(BootstrapOptions { reps, block_len }),
        (None, Some(_)) => return Err(CliError::Usage("--block-len needs --boot-reps".into())),
        (None, None) => {}
    }
    let summary = monte_carlo(&spec, &estimators, a.reps, &opts).map_err(CliError::compute("simulate"))?;
    let mut w = csv::Writer::from_writer(open_out(a.out.as_deref())?);
    for row in &summary.rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(a.out.as_deref()))
}
