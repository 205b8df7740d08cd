//! Panel container, CSV ingestion and the pre/post split.
//!
//! A panel holds the treated unit's outcome `y`, the donor matrix `w`
//! (row `t` is the donor vector at time `t`), the number of pre-treatment
//! periods `t0`, and optional covariates. The treatment indicator is never
//! stored; it is `1{t > t0}` on the internal time index.
//!
//! CSV layout: `t`, `y`, `w1..wN`, optional `a` (0/1 step), optional
//! `x0_1..x0_q` and `x_<i>_<j>` (donor `i`, covariate `j`). Lines starting
//! with `#` are comments. Time labels may be any strictly increasing
//! integers; they are re-indexed to `1..T` internally.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Result, SpscError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct PanelData<S> {
    labels: Vec<i64>,
    times: Vec<usize>,
    y: Array1<S>,
    w: Array2<S>,
    t0: usize,
    x0: Option<Array2<S>>,
    x: Option<Array2<S>>,
}

impl<S: Scalar> PanelData<S> {
    /// Builds a validated panel with time labels `1..=T`.
    pub fn new(y: Array1<S>, w: Array2<S>, t0: usize) -> Result<Self> {
        let len = y.len();
        Self::with_labels((1..=len as i64).collect(), y, w, t0)
    }

    /// Builds a panel with explicit (strictly increasing) time labels.
    pub fn with_labels(labels: Vec<i64>, y: Array1<S>, w: Array2<S>, t0: usize) -> Result<Self> {
        let len = y.len();
        if labels.len() != len {
            return Err(SpscError::Dimension(format!("{} time labels for {} outcomes", labels.len(), len)));
        }
        if labels.windows(2).any(|p| p[1] <= p[0]) {
            return Err(SpscError::InvalidPanel("time labels must be strictly increasing".into()));
        }
        let panel = Self { labels, times: (1..=len).collect(), y, w, t0, x0: None, x: None };
        panel.validate()?;
        Ok(panel)
    }

    /// Attaches treated-unit covariates `x0` (T×q) and donor covariates `x`
    /// (T×N·q, donor-major: column `i·q + j` is covariate `j` of donor `i`).
    pub fn with_covariates(mut self, x0: Array2<S>, x: Array2<S>) -> Result<Self> {
        self.x0 = Some(x0);
        self.x = Some(x);
        self.validate()?;
        Ok(self)
    }

    /// Replicate panel whose rows carry arbitrary internal times. Used by the
    /// block bootstrap, where resampled observations keep their calendar time.
    pub(crate) fn resampled(&self, rows: &[usize]) -> Self {
        let pick = |m: &Array2<S>| Array2::from_shape_fn((rows.len(), m.ncols()), |(r, c)| m[[rows[r], c]]);
        Self {
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            times: rows.iter().map(|&r| self.times[r]).collect(),
            y: Array1::from_iter(rows.iter().map(|&r| self.y[r])),
            w: pick(&self.w),
            t0: self.t0,
            x0: self.x0.as_ref().map(pick),
            x: self.x.as_ref().map(pick),
        }
    }

    /// Same panel with covariates dropped.
    pub fn without_covariates(&self) -> Self {
        Self { x0: None, x: None, ..self.clone() }
    }

    /// Keeps rows `0..len` and re-splits at `t0`.
    pub(crate) fn truncated(&self, len: usize, t0: usize) -> Result<Self> {
        let mut out = Self {
            labels: self.labels[..len].to_vec(),
            times: self.times[..len].to_vec(),
            y: self.y.slice(s![..len]).to_owned(),
            w: self.w.slice(s![..len, ..]).to_owned(),
            t0,
            x0: self.x0.as_ref().map(|m| m.slice(s![..len, ..]).to_owned()),
            x: self.x.as_ref().map(|m| m.slice(s![..len, ..]).to_owned()),
        };
        out.times = (1..=len).collect();
        out.validate()?;
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        let len = self.y.len();
        if self.w.nrows() != len {
            return Err(SpscError::Dimension(format!("donor matrix has {} rows, outcome has {}", self.w.nrows(), len)));
        }
        if self.w.ncols() == 0 {
            return Err(SpscError::InvalidPanel("at least one donor is required".into()));
        }
        if self.t0 < 1 || self.t0 >= len {
            return Err(SpscError::T0OutOfRange { t0: self.t0, len });
        }
        if !self.y.iter().chain(self.w.iter()).all(|v| v.is_finite()) {
            return Err(SpscError::InvalidPanel("non-finite outcome or donor value".into()));
        }
        match (&self.x0, &self.x) {
            (None, None) => {}
            (Some(x0), Some(x)) => {
                let q = x0.ncols();
                if x0.nrows() != len || x.nrows() != len {
                    return Err(SpscError::Dimension("covariate rows must equal T".into()));
                }
                if q == 0 || x.ncols() != q * self.w.ncols() {
                    return Err(SpscError::Dimension(format!(
                        "donor covariates need N·q = {} columns, found {}",
                        q * self.w.ncols(),
                        x.ncols()
                    )));
                }
                if !x0.iter().chain(x.iter()).all(|v| v.is_finite()) {
                    return Err(SpscError::InvalidPanel("non-finite covariate".into()));
                }
            }
            _ => return Err(SpscError::InvalidPanel("treated and donor covariates must be given together".into())),
        }
        Ok(())
    }

    pub fn n_periods(&self) -> usize {
        self.y.len()
    }

    pub fn n_donors(&self) -> usize {
        self.w.ncols()
    }

    pub fn t0(&self) -> usize {
        self.t0
    }

    pub fn t1(&self) -> usize {
        self.y.len() - self.t0
    }

    /// Number of covariates per unit, zero when absent.
    pub fn n_covariates(&self) -> usize {
        self.x0.as_ref().map_or(0, |m| m.ncols())
    }

    pub fn y(&self) -> ArrayView1<'_, S> {
        self.y.view()
    }

    pub fn w(&self) -> ArrayView2<'_, S> {
        self.w.view()
    }

    pub fn x0(&self) -> Option<ArrayView2<'_, S>> {
        self.x0.as_ref().map(|m| m.view())
    }

    pub fn x(&self) -> Option<ArrayView2<'_, S>> {
        self.x.as_ref().map(|m| m.view())
    }

    /// Original time labels as read from the input.
    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    /// Internal time index of each row (`1..=T` for ordinary panels).
    pub fn t_index(&self) -> &[usize] {
        &self.times
    }

    /// Treatment indicator of row `row`.
    pub fn treated(&self, row: usize) -> bool {
        row >= self.t0
    }
}

/// A contiguous range of panel rows; no data is copied.
#[derive(Debug, Clone, Copy)]
pub struct PeriodView<'a, S> {
    panel: &'a PanelData<S>,
    rows: (usize, usize),
}

pub type PreView<'a, S> = PeriodView<'a, S>;
pub type PostView<'a, S> = PeriodView<'a, S>;

impl<'a, S: Scalar> PeriodView<'a, S> {
    pub fn len(&self) -> usize {
        self.rows.1 - self.rows.0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self) -> Range<usize> {
        self.rows.0..self.rows.1
    }

    pub fn panel(&self) -> &'a PanelData<S> {
        self.panel
    }

    pub fn y(&self) -> ArrayView1<'a, S> {
        self.panel.y.slice(s![self.rows.0..self.rows.1])
    }

    pub fn w(&self) -> ArrayView2<'a, S> {
        self.panel.w.slice(s![self.rows.0..self.rows.1, ..])
    }

    pub fn times(&self) -> &'a [usize] {
        &self.panel.times[self.rows.0..self.rows.1]
    }

    pub fn x0(&self) -> Option<ArrayView2<'a, S>> {
        self.panel.x0.as_ref().map(|m| m.slice(s![self.rows.0..self.rows.1, ..]))
    }

    pub fn x(&self) -> Option<ArrayView2<'a, S>> {
        self.panel.x.as_ref().map(|m| m.slice(s![self.rows.0..self.rows.1, ..]))
    }
}

/// Splits a panel into its pre-treatment (`t ≤ t0`) and post-treatment rows.
pub fn split_pre_post<S: Scalar>(p: &PanelData<S>) -> (PreView<'_, S>, PostView<'_, S>) {
    (PeriodView { panel: p, rows: (0, p.t0) }, PeriodView { panel: p, rows: (p.t0, p.n_periods()) })
}

/// Column names used when reading a panel CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub time: String,
    pub outcome: String,
    /// Donor columns are `<prefix><k>` for k = 1, 2, ...
    pub donor_prefix: String,
    /// Optional 0/1 treatment column.
    pub treatment: Option<String>,
    /// Explicit number of pre-treatment periods, used when no treatment column is present.
    pub t0: Option<usize>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self { time: "t".into(), outcome: "y".into(), donor_prefix: "w".into(), treatment: Some("a".into()), t0: None }
    }
}

impl CsvSchema {
    pub fn with_t0(t0: usize) -> Self {
        Self { t0: Some(t0), ..Self::default() }
    }
}

/// Reads and validates a panel from a CSV file.
pub fn load_panel_csv<S: Scalar>(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<PanelData<S>> {
    let file = std::fs::File::open(path)?;
    read_panel_csv(file, schema)
}

/// [`load_panel_csv`] over any reader.
pub fn read_panel_csv<S: Scalar, R: Read>(reader: R, schema: &CsvSchema) -> Result<PanelData<S>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let find = |name: &str| headers.iter().position(|h| h == name);

    let time_col = find(&schema.time).ok_or_else(|| SpscError::MissingColumn(schema.time.clone()))?;
    let y_col = find(&schema.outcome).ok_or_else(|| SpscError::MissingColumn(schema.outcome.clone()))?;
    let donor_cols = numbered_columns(&headers, &schema.donor_prefix);
    if donor_cols.is_empty() {
        return Err(SpscError::MissingColumn(format!("{}1", schema.donor_prefix)));
    }
    let n = donor_cols.len();
    let a_col = match &schema.treatment {
        Some(name) => find(name),
        None => None,
    };
    let x0_cols = numbered_columns(&headers, "x0_");
    let q = x0_cols.len();
    let mut x_cols = Vec::with_capacity(n * q);
    for i in 1..=n {
        for j in 1..=q {
            let name = format!("x_{i}_{j}");
            x_cols.push(find(&name).ok_or(SpscError::MissingColumn(name))?);
        }
    }

    struct Row {
        label: i64,
        values: Vec<f64>,
        a: Option<f64>,
    }
    let mut rows: Vec<Row> = Vec::new();
    let value_cols: Vec<usize> = std::iter::once(y_col)
        .chain(donor_cols.iter().copied())
        .chain(x0_cols.iter().copied())
        .chain(x_cols.iter().copied())
        .collect();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let cell = |c: usize| rec.get(c).unwrap_or("");
        let parse = |c: usize| -> Result<f64> {
            let raw = cell(c);
            raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| SpscError::NonNumeric {
                row: r + 1,
                column: headers[c].clone(),
                value: raw.to_owned(),
            })
        };
        let label = cell(time_col).parse::<i64>().map_err(|_| SpscError::NonNumeric {
            row: r + 1,
            column: headers[time_col].clone(),
            value: cell(time_col).to_owned(),
        })?;
        let values = value_cols.iter().map(|&c| parse(c)).collect::<Result<Vec<_>>>()?;
        let a = a_col.map(parse).transpose()?;
        rows.push(Row { label, values, a });
    }
    rows.sort_by_key(|r| r.label);
    if rows.windows(2).any(|p| p[0].label == p[1].label) {
        return Err(SpscError::InvalidPanel("duplicate time label".into()));
    }
    let len = rows.len();

    let t0 = match a_col {
        Some(_) => {
            let flags: Vec<f64> = rows.iter().map(|r| r.a.unwrap_or(f64::NAN)).collect();
            if flags.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(SpscError::NonMonotoneTreatment);
            }
            let zeros = flags.iter().take_while(|&&v| v == 0.0).count();
            if flags[zeros..].iter().any(|&v| v != 1.0) {
                return Err(SpscError::NonMonotoneTreatment);
            }
            if let Some(explicit) = schema.t0 {
                if explicit != zeros {
                    return Err(SpscError::InvalidPanel(format!(
                        "schema t0 = {explicit} disagrees with treatment column (t0 = {zeros})"
                    )));
                }
            }
            zeros
        }
        None => schema
            .t0
            .ok_or_else(|| SpscError::MissingColumn(schema.treatment.clone().unwrap_or_else(|| "t0".into())))?,
    };
    if t0 < 1 || t0 >= len {
        return Err(SpscError::T0OutOfRange { t0, len });
    }

    let y = Array1::from_iter(rows.iter().map(|r| S::lit(r.values[0])));
    let w = Array2::from_shape_fn((len, n), |(t, i)| S::lit(rows[t].values[1 + i]));
    let labels = rows.iter().map(|r| r.label).collect();
    let panel = PanelData::with_labels(labels, y, w, t0)?;
    if q > 0 {
        let x0 = Array2::from_shape_fn((len, q), |(t, j)| S::lit(rows[t].values[1 + n + j]));
        let x = Array2::from_shape_fn((len, n * q), |(t, k)| S::lit(rows[t].values[1 + n + q + k]));
        return panel.with_covariates(x0, x);
    }
    Ok(panel)
}

/// Columns named `<prefix><k>` with consecutive `k = 1..`, in numeric order.
fn numbered_columns(headers: &[String], prefix: &str) -> Vec<usize> {
    let mut found: BTreeMap<usize, usize> = BTreeMap::new();
    for (c, h) in headers.iter().enumerate() {
        if let Some(rest) = h.strip_prefix(prefix) {
            if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) {
                if let Ok(k) = rest.parse::<usize>() {
                    found.insert(k, c);
                }
            }
        }
    }
    (1..).map_while(|k| found.get(&k).copied()).collect()
}

/// Writes a panel in the CSV layout read by [`load_panel_csv`], including the
/// treatment column. Numbers use the shortest round-trip representation.
pub fn write_panel_csv<S: Scalar, W: Write>(p: &PanelData<S>, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let n = p.n_donors();
    let q = p.n_covariates();
    let mut header = vec!["t".to_owned(), "y".to_owned()];
    header.extend((1..=n).map(|i| format!("w{i}")));
    header.push("a".into());
    header.extend((1..=q).map(|j| format!("x0_{j}")));
    for i in 1..=n {
        header.extend((1..=q).map(|j| format!("x_{i}_{j}")));
    }
    wtr.write_record(&header)?;
    for t in 0..p.n_periods() {
        let mut rec = vec![p.labels[t].to_string(), p.y[t].to_string()];
        rec.extend(p.w.row(t).iter().map(|v| v.to_string()));
        rec.push(if p.treated(t) { "1".into() } else { "0".into() });
        if let (Some(x0), Some(x)) = (&p.x0, &p.x) {
            rec.extend(x0.row(t).iter().map(|v| v.to_string()));
            rec.extend(x.row(t).iter().map(|v| v.to_string()));
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}
