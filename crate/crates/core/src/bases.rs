//! De-trending bases `D_t`, instrument features `φ(y)` and parametric
//! treatment-effect curves `τ(t; β)` with analytic derivatives.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpscError};
use crate::scalar::Scalar;

fn parse_param(s: &str, kind: &str) -> Result<usize> {
    s.parse::<usize>().map_err(|_| SpscError::InvalidSpec(format!("bad parameter `{s}` for `{kind}`")))
}

/// Which de-trending basis to use. The time domain is bound separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DetrendKind {
    None,
    /// `(1, t / t_hi)`
    InterceptLinear,
    /// Clamped cubic B-spline basis of dimension `d ≥ 4`.
    CubicBspline(usize),
}

impl DetrendKind {
    pub fn dim(self) -> usize {
        match self {
            DetrendKind::None => 0,
            DetrendKind::InterceptLinear => 2,
            DetrendKind::CubicBspline(d) => d,
        }
    }
}

impl FromStr for DetrendKind {
    type Err = SpscError;
    fn from_str(s: &str) -> Result<Self> {
        let (head, param) = s.split_once(':').map_or((s, None), |(h, p)| (h, Some(p)));
        match (head.trim(), param) {
            ("none", None) => Ok(DetrendKind::None),
            ("intercept_linear", None) => Ok(DetrendKind::InterceptLinear),
            ("cubic_bspline", Some(p)) => {
                let d = parse_param(p, head)?;
                if d < 4 {
                    return Err(SpscError::InvalidSpec(format!("cubic_bspline needs d >= 4, got {d}")));
                }
                Ok(DetrendKind::CubicBspline(d))
            }
            _ => Err(SpscError::InvalidSpec(format!("unknown detrend kind `{s}`"))),
        }
    }
}

impl fmt::Display for DetrendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DetrendKind::None => f.write_str("none"),
            DetrendKind::InterceptLinear => f.write_str("intercept_linear"),
            DetrendKind::CubicBspline(d) => write!(f, "cubic_bspline:{d}"),
        }
    }
}

impl TryFrom<String> for DetrendKind {
    type Error = SpscError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DetrendKind> for String {
    fn from(k: DetrendKind) -> String {
        k.to_string()
    }
}

/// A de-trending basis bound to an integer time domain `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetrendSpec {
    pub kind: DetrendKind,
    pub lo: usize,
    pub hi: usize,
}

impl DetrendSpec {
    pub fn new(kind: DetrendKind, lo: usize, hi: usize) -> Result<Self> {
        if hi < lo {
            return Err(SpscError::InvalidSpec(format!("empty basis domain [{lo}, {hi}]")));
        }
        if let DetrendKind::CubicBspline(d) = kind {
            if hi - lo + 1 < d {
                return Err(SpscError::InvalidSpec(format!(
                    "cubic_bspline:{d} needs at least {d} time points, domain [{lo}, {hi}] has {}",
                    hi - lo + 1
                )));
            }
        }
        Ok(Self { kind, lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.kind.dim()
    }

    /// Evaluates `D_t`. Times outside the domain are an error.
    pub fn eval<S: Scalar>(&self, t: usize) -> Result<Array1<S>> {
        if t < self.lo || t > self.hi {
            return Err(SpscError::OutOfDomain { t, lo: self.lo, hi: self.hi });
        }
        Ok(match self.kind {
            DetrendKind::None => Array1::zeros(0),
            DetrendKind::InterceptLinear => {
                Array1::from_vec(vec![S::one(), S::from_usize_lossy(t) / S::from_usize_lossy(self.hi)])
            }
            DetrendKind::CubicBspline(d) => cubic_bspline_basis(d, self.lo, self.hi, t),
        })
    }

    /// Stacks `D_t` for each time as the rows of a matrix.
    pub fn design<S: Scalar>(&self, times: &[usize]) -> Result<Array2<S>> {
        let mut out = Array2::<S>::zeros((times.len(), self.dim()));
        for (r, &t) in times.iter().enumerate() {
            out.row_mut(r).assign(&self.eval::<S>(t)?);
        }
        Ok(out)
    }
}

/// Clamped cubic B-spline basis of dimension `d` over `[lo, hi]` with `d − 4`
/// equally spaced interior knots, evaluated at the integer time `t`.
fn cubic_bspline_basis<S: Scalar>(d: usize, lo: usize, hi: usize, t: usize) -> Array1<S> {
    let x = if hi == lo { S::zero() } else { S::from_usize_lossy(t - lo) / S::from_usize_lossy(hi - lo) };
    bspline_values(d, x)
}

/// Values of the `d` clamped cubic B-splines on `[0, 1]` at `x`.
pub fn bspline_values<S: Scalar>(d: usize, x: S) -> Array1<S> {
    const P: usize = 3;
    let knots = clamped_knots::<S>(d);
    // knot span: largest k with knots[k] <= x < knots[k+1], last span at x = 1
    let span = if x >= knots[d] {
        d - 1
    } else {
        let mut k = P;
        while k + 1 < d && knots[k + 1] <= x {
            k += 1;
        }
        k
    };
    let mut n = [S::zero(); P + 1];
    let mut left = [S::zero(); P + 1];
    let mut right = [S::zero(); P + 1];
    n[0] = S::one();
    for j in 1..=P {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = S::zero();
        for r in 0..j {
            let temp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    let mut out = Array1::<S>::zeros(d);
    for (j, v) in n.iter().enumerate() {
        out[span - P + j] = *v;
    }
    out
}

pub(crate) fn clamped_knots<S: Scalar>(d: usize) -> Vec<S> {
    let interior = d - 4;
    let mut knots = vec![S::zero(); 4];
    for k in 1..=interior {
        knots.push(S::from_usize_lossy(k) / S::from_usize_lossy(interior + 1));
    }
    knots.extend(std::iter::repeat_n(S::one(), 4));
    knots
}

/// Instrument feature map `φ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PhiSpec {
    Identity,
    /// `(y, y², …, y^p)`
    Polynomial(usize),
}

impl PhiSpec {
    pub fn dim(self) -> usize {
        match self {
            PhiSpec::Identity => 1,
            PhiSpec::Polynomial(p) => p,
        }
    }

    pub fn eval<S: Scalar>(self, y: S) -> Array1<S> {
        let p = self.dim();
        let mut out = Array1::<S>::zeros(p);
        let mut pow = y;
        for k in 0..p {
            out[k] = pow;
            pow *= y;
        }
        out
    }

    /// Elementwise derivative `dφ_k/dy = k·y^(k−1)`.
    pub fn derivative<S: Scalar>(self, y: S) -> Array1<S> {
        let p = self.dim();
        let mut out = Array1::<S>::zeros(p);
        let mut pow = S::one();
        for k in 0..p {
            out[k] = S::from_usize_lossy(k + 1) * pow;
            pow *= y;
        }
        out
    }
}

impl FromStr for PhiSpec {
    type Err = SpscError;
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s.trim() == "identity" => Ok(PhiSpec::Identity),
            Some(("polynomial", p)) => {
                let p = parse_param(p, "polynomial")?;
                if p < 1 {
                    return Err(SpscError::InvalidSpec("polynomial needs p >= 1".into()));
                }
                Ok(PhiSpec::Polynomial(p))
            }
            _ => Err(SpscError::InvalidSpec(format!("unknown phi `{s}`"))),
        }
    }
}

impl fmt::Display for PhiSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PhiSpec::Identity => f.write_str("identity"),
            PhiSpec::Polynomial(p) => write!(f, "polynomial:{p}"),
        }
    }
}

impl TryFrom<String> for PhiSpec {
    type Error = SpscError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PhiSpec> for String {
    fn from(k: PhiSpec) -> String {
        k.to_string()
    }
}

/// Shape of the treatment-effect curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EffectKind {
    /// `β`
    Constant,
    /// `β₀ + β₁ s`, with `s = (t − T₀)₊ / T₁`
    Linear,
    /// `β₀ + β₁ s + β₂ (t − T₀)₊² / T₁`
    Quadratic,
    /// `exp(β₀ + β₁ s)`
    Exponential,
    /// `B_b(t)ᵀ β`, clamped cubic B-splines over the post period
    Bspline(usize),
}

impl EffectKind {
    pub fn dim(self) -> usize {
        match self {
            EffectKind::Constant => 1,
            EffectKind::Linear | EffectKind::Exponential => 2,
            EffectKind::Quadratic => 3,
            EffectKind::Bspline(b) => b,
        }
    }

    /// Whether `τ` is linear in `β` (closed-form least squares applies).
    pub fn is_linear(self) -> bool {
        !matches!(self, EffectKind::Exponential)
    }
}

impl FromStr for EffectKind {
    type Err = SpscError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().split_once(':') {
            None => match s.trim() {
                "constant" => Ok(EffectKind::Constant),
                "linear" => Ok(EffectKind::Linear),
                "quadratic" => Ok(EffectKind::Quadratic),
                "exponential" => Ok(EffectKind::Exponential),
                _ => Err(SpscError::InvalidSpec(format!("unknown effect model `{s}`"))),
            },
            Some(("bspline", b)) => {
                let b = parse_param(b, "bspline")?;
                if b < 4 {
                    return Err(SpscError::InvalidSpec(format!("bspline effect needs b >= 4, got {b}")));
                }
                Ok(EffectKind::Bspline(b))
            }
            _ => Err(SpscError::InvalidSpec(format!("unknown effect model `{s}`"))),
        }
    }
}

impl fmt::Display for EffectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EffectKind::Constant => f.write_str("constant"),
            EffectKind::Linear => f.write_str("linear"),
            EffectKind::Quadratic => f.write_str("quadratic"),
            EffectKind::Exponential => f.write_str("exponential"),
            EffectKind::Bspline(b) => write!(f, "bspline:{b}"),
        }
    }
}

impl TryFrom<String> for EffectKind {
    type Error = SpscError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<EffectKind> for String {
    fn from(k: EffectKind) -> String {
        k.to_string()
    }
}

/// An effect curve bound to the panel's `T₀` and `T₁`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EffectModel {
    pub kind: EffectKind,
    pub t0: usize,
    pub t1: usize,
}

/// `τ(t; β)` with its gradient and Hessian in `β`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectEval<S> {
    pub tau: S,
    pub grad: Array1<S>,
    pub hess: Array2<S>,
}

impl EffectModel {
    pub fn new(kind: EffectKind, t0: usize, t1: usize) -> Result<Self> {
        if t1 == 0 {
            return Err(SpscError::InvalidSpec("effect model needs T1 >= 1".into()));
        }
        Ok(Self { kind, t0, t1 })
    }

    pub fn dim(&self) -> usize {
        self.kind.dim()
    }

    fn elapsed<S: Scalar>(&self, t: usize) -> S {
        S::from_usize_lossy(t.saturating_sub(self.t0))
    }

    /// Evaluates the curve and its first two derivatives at time `t`.
    pub fn eval<S: Scalar>(&self, t: usize, beta: &[S]) -> Result<EffectEval<S>> {
        let b = self.dim();
        if beta.len() != b {
            return Err(SpscError::Dimension(format!(
                "effect model `{}` has {} parameters, got {}",
                self.kind,
                b,
                beta.len()
            )));
        }
        let t1 = S::from_usize_lossy(self.t1);
        let e = self.elapsed::<S>(t);
        let s = e / t1;
        let linear = |grad: Array1<S>| EffectEval {
            tau: grad.iter().zip(beta).map(|(g, b)| *g * *b).sum(),
            hess: Array2::zeros((grad.len(), grad.len())),
            grad,
        };
        Ok(match self.kind {
            EffectKind::Constant => linear(Array1::from_vec(vec![S::one()])),
            EffectKind::Linear => linear(Array1::from_vec(vec![S::one(), s])),
            EffectKind::Quadratic => linear(Array1::from_vec(vec![S::one(), s, e * e / t1])),
            EffectKind::Exponential => {
                let tau = (beta[0] + beta[1] * s).exp();
                let x = [S::one(), s];
                EffectEval {
                    tau,
                    grad: Array1::from_iter(x.iter().map(|v| tau * *v)),
                    hess: Array2::from_shape_fn((2, 2), |(i, j)| tau * x[i] * x[j]),
                }
            }
            EffectKind::Bspline(nb) => {
                let lo = self.t0 + 1;
                let hi = self.t0 + self.t1;
                if t < lo || t > hi {
                    return Err(SpscError::OutOfDomain { t, lo, hi });
                }
                let x = if hi == lo { S::zero() } else { S::from_usize_lossy(t - lo) / S::from_usize_lossy(hi - lo) };
                linear(bspline_values(nb, x))
            }
        })
    }
}
