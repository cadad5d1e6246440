//! Dense row-major tensors over a differentiable scalar type.
//!
//! The scalar is either plain `f64` or [`Dual`], a first-order forward-mode
//! number. Running the reverse pass over `Dual` values differentiates the
//! gradient itself, which is how Hessian-vector products are obtained.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};
use crate::rng::Rng;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub trait Scalar:
    Copy
    + fmt::Debug
    + PartialEq
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + 'static
{
    fn from_f64(x: f64) -> Self;
    /// Primal value; comparisons and routing decisions only ever look at this.
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    /// Square root whose derivative at zero is taken as zero.
    fn sqrt(self) -> Self;
    fn softplus(self) -> Self;
    fn sigmoid(self) -> Self;
    /// Standard normal CDF.
    fn norm_cdf(self) -> Self;
    /// Standard normal density.
    fn norm_pdf(self) -> Self;
    fn is_finite(self) -> bool;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn one() -> Self {
        Self::from_f64(1.0)
    }

    fn scale(self, c: f64) -> Self {
        self * Self::from_f64(c)
    }
}

fn softplus_f64(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn norm_cdf_f64(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

fn norm_pdf_f64(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn softplus(self) -> Self {
        softplus_f64(self)
    }
    fn sigmoid(self) -> Self {
        sigmoid_f64(self)
    }
    fn norm_cdf(self) -> Self {
        norm_cdf_f64(self)
    }
    fn norm_pdf(self) -> Self {
        norm_pdf_f64(self)
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Forward-mode dual number `re + tan·ε` with `ε² = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Dual {
    pub re: f64,
    pub tan: f64,
}

impl Dual {
    pub const fn new(re: f64, tan: f64) -> Self {
        Dual { re, tan }
    }

    #[inline]
    fn chain(self, f: f64, df: f64) -> Self {
        Dual::new(f, self.tan * df)
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.tan + o.tan)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.tan - o.tan)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.tan * o.re + self.re * o.tan)
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, o: Dual) -> Dual {
        let q = self.re / o.re;
        Dual::new(q, (self.tan - q * o.tan) / o.re)
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.tan)
    }
}

impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, o: Dual) {
        self.re += o.re;
        self.tan += o.tan;
    }
}

impl Scalar for Dual {
    #[inline]
    fn from_f64(x: f64) -> Self {
        Dual::new(x, 0.0)
    }
    #[inline]
    fn value(self) -> f64 {
        self.re
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        self.chain(e, e)
    }
    fn ln(self) -> Self {
        self.chain(self.re.ln(), 1.0 / self.re)
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        if s == 0.0 {
            Dual::new(s, 0.0)
        } else {
            self.chain(s, 0.5 / s)
        }
    }
    fn softplus(self) -> Self {
        self.chain(softplus_f64(self.re), sigmoid_f64(self.re))
    }
    fn sigmoid(self) -> Self {
        let s = sigmoid_f64(self.re);
        self.chain(s, s * (1.0 - s))
    }
    fn norm_cdf(self) -> Self {
        self.chain(norm_cdf_f64(self.re), norm_pdf_f64(self.re))
    }
    fn norm_pdf(self) -> Self {
        let p = norm_pdf_f64(self.re);
        self.chain(p, -self.re * p)
    }
    fn is_finite(self) -> bool {
        self.re.is_finite() && self.tan.is_finite()
    }
}

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<S = f64> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor").field("shape", &self.shape).field("data", &self.data).finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::config(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![S::zero(); numel(shape)] }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn from_f64(t: &Tensor<f64>) -> Self {
        Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&x| S::from_f64(x)).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// `(rows, cols)` of a matrix; errors for other ranks.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::config(format!("expected a matrix, got shape {other:?}"))),
        }
    }

    pub fn row(&self, r: usize) -> &[S] {
        let c = *self.shape.last().unwrap_or(&1);
        &self.data[r * c..(r + 1) * c]
    }

    pub fn values(&self) -> Tensor<f64> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| x.value()).collect() }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if numel(&shape) != self.data.len() {
            return Err(Error::config(format!("cannot reshape {:?} into {:?}", self.shape, shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip(&self, o: &Self, f: impl Fn(S, S) -> S) -> Self {
        debug_assert_eq!(self.shape, o.shape);
        Tensor { shape: self.shape.clone(), data: self.data.iter().zip(&o.data).map(|(&a, &b)| f(a, b)).collect() }
    }
}

impl Tensor<f64> {
    /// Standard normal samples drawn in row-major order.
    pub fn randn(shape: &[usize], rng: &mut Rng) -> Self {
        Tensor { shape: shape.to_vec(), data: (0..numel(shape)).map(|_| rng.normal()).collect() }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::config("ragged rows"));
        }
        Ok(Tensor { shape: vec![rows.len(), cols], data: rows.iter().flatten().copied().collect() })
    }
}

/// `a (m×k) · b (k×n)`.
pub(crate) fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `a (m×k) · bᵀ` where `b` is `n×k`.
pub(crate) fn matmul_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `aᵀ · b` where `a` is `m×k` and `b` is `m×n`; result `k×n`.
pub(crate) fn matmul_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}
