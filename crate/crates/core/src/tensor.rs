//! Dense row-major arrays of rank ≤ 3 and the elementary kernels built on them.
//!
//! Every reduction runs in a fixed order (row-major, sequential within a row)
//! so results are bit-reproducible across runs.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::TensorError;

/// Floating-point element type. Verification runs at `f64`; training may use `f32`.
pub trait Real: Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + Send + Sync + 'static {
    /// Lossy conversion from an `f64` literal.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    const BYTES: usize;
    const NAME: &'static str;
}

impl Real for f32 {
    const BYTES: usize = 4;
    const NAME: &'static str = "f32";
}

impl Real for f64 {
    const BYTES: usize = 8;
    const NAME: &'static str = "f64";
}

pub const MAX_RANK: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        if shape.len() > MAX_RANK {
            return Err(TensorError::RankTooHigh(shape.len()));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength { shape: shape.to_vec(), len: data.len() });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        assert!(shape.len() <= MAX_RANK, "rank {} > {MAX_RANK}", shape.len());
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = value);
        t
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Builds an `rows × cols` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(TensorError::ShapeMismatch { op: "from_rows", left: vec![cols], right: vec![bad.len()] });
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(&[rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(TensorError::ExpectedRank { expected: 2, shape: other.to_vec() }),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> Result<T, TensorError> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar(self.shape.clone()))
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.len() > MAX_RANK {
            return Err(TensorError::DataLength { shape: shape.to_vec(), len: self.data.len() });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| U::lit(x.as_f64())).collect() }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_finite(&self, op: &'static str) -> Result<(), TensorError> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(TensorError::NonFinite(op))
        }
    }

    pub fn transpose(&self) -> Result<Self, TensorError> {
        let (r, c) = self.dims2()?;
        let mut out = Self::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(out)
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch { op, left: self.shape.clone(), right: other.shape.clone() });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip(other, "mul", |a, b| a * b)
    }

    fn zip(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self, TensorError> {
        self.same_shape(other, op)?;
        Ok(Self { shape: self.shape.clone(), data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<(), TensorError> {
        self.same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()))
    }

    /// Standard matrix product with deterministic accumulation order.
    pub fn matmul(&self, other: &Self) -> Result<Self, TensorError> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch { op: "matmul", left: self.shape.clone(), right: other.shape.clone() });
        }
        let mut out = Self::zeros(&[m, n]);
        kernels::matmul_acc(&self.data, &other.data, &mut out.data, m, k, n);
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self, TensorError> {
        let (m, k) = self.dims2()?;
        let (n, k2) = other.dims2()?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch { op: "matmul_nt", left: self.shape.clone(), right: other.shape.clone() });
        }
        let mut out = Self::zeros(&[m, n]);
        kernels::matmul_nt_acc(&self.data, &other.data, &mut out.data, m, k, n);
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self, TensorError> {
        let (k, m) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch { op: "matmul_tn", left: self.shape.clone(), right: other.shape.clone() });
        }
        let mut out = Self::zeros(&[m, n]);
        kernels::matmul_tn_acc(&self.data, &other.data, &mut out.data, k, m, n);
        Ok(out)
    }

    /// Inclusive prefix sums down the rows: `out[i,:] = Σ_{j≤i} x[j,:]`.
    pub fn cumsum_rows(&self) -> Result<Self, TensorError> {
        let (n, d) = self.dims2()?;
        let mut out = self.clone();
        kernels::cumsum_rows_inplace(&mut out.data, n, d);
        Ok(out)
    }

    /// Column sums of a rank-2 tensor, as a length-`cols` vector.
    pub fn sum_rows(&self) -> Result<Vec<T>, TensorError> {
        let (n, d) = self.dims2()?;
        let mut acc = vec![T::zero(); d];
        for i in 0..n {
            for (a, &x) in acc.iter_mut().zip(&self.data[i * d..(i + 1) * d]) {
                *a = *a + x;
            }
        }
        Ok(acc)
    }

    pub fn gelu(&self) -> Self {
        self.map(kernels::gelu)
    }

    pub fn silu(&self) -> Self {
        self.map(kernels::silu)
    }
}

/// Mean softmax cross-entropy over the rows of `logits` that carry a target.
///
/// Returns the loss and its gradient with respect to `logits`. Rows whose
/// target is `None` contribute nothing; with no targets at all the loss is 0.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, targets: &[Option<usize>]) -> Result<(T, Tensor<T>), TensorError> {
    let (n, c) = logits.dims2()?;
    if targets.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "softmax_cross_entropy",
            left: logits.shape().to_vec(),
            right: vec![targets.len()],
        });
    }
    let active = targets.iter().filter(|t| t.is_some()).count();
    let mut grad = Tensor::zeros(&[n, c]);
    if active == 0 {
        return Ok((T::zero(), grad));
    }
    let inv = T::one() / T::from_usize(active).unwrap();
    let mut loss = T::zero();
    for (i, target) in targets.iter().enumerate() {
        let Some(t) = *target else { continue };
        if t >= c {
            return Err(TensorError::TargetOutOfRange { target: t, classes: c });
        }
        let row = logits.row(i);
        let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let g = grad.row_mut(i);
        let mut z = T::zero();
        for (gj, &x) in g.iter_mut().zip(row) {
            *gj = (x - max).exp();
            z = z + *gj;
        }
        loss = loss + (z.ln() + max - row[t]) * inv;
        for gj in g.iter_mut() {
            *gj = *gj / z * inv;
        }
        g[t] = g[t] - inv;
    }
    Ok((loss, grad))
}

/// Slice-level kernels shared by the eager tensor API and the autodiff tape.
pub mod kernels {
    use super::Real;

    /// `out += a · b` for row-major `a: m×k`, `b: k×n`.
    pub fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == T::zero() {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + aip * bv;
                }
            }
        }
    }

    /// `out += a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
        let mut bt = vec![T::zero(); k * n];
        for j in 0..n {
            for p in 0..k {
                bt[p * n + j] = b[j * k + p];
            }
        }
        matmul_acc(a, &bt, out, m, k, n);
    }

    /// `out += aᵀ · b` for `a: k×m`, `b: k×n`.
    pub fn matmul_tn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], k: usize, m: usize, n: usize) {
        for p in 0..k {
            let arow = &a[p * m..(p + 1) * m];
            let brow = &b[p * n..(p + 1) * n];
            for (i, &aval) in arow.iter().enumerate() {
                if aval == T::zero() {
                    continue;
                }
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + aval * bv;
                }
            }
        }
    }

    pub fn cumsum_rows_inplace<T: Real>(x: &mut [T], n: usize, d: usize) {
        for i in 1..n {
            let (prev, cur) = x.split_at_mut(i * d);
            let prev = &prev[(i - 1) * d..];
            for (c, &p) in cur[..d].iter_mut().zip(prev) {
                *c = *c + p;
            }
        }
    }

    /// tanh approximation of GeLU.
    pub fn gelu<T: Real>(x: T) -> T {
        let c = T::lit(0.797_884_560_802_865_4); // sqrt(2/pi)
        let a = T::lit(0.044_715);
        let half = T::lit(0.5);
        half * x * (T::one() + tanh(c * (x + a * x * x * x)))
    }

    /// `1 − 2/(e^{2u} + 1)`; cheaper than the libm routine and saturates cleanly.
    fn tanh<T: Real>(u: T) -> T {
        let two = T::lit(2.0);
        T::one() - two / ((two * u).exp() + T::one())
    }

    pub fn gelu_grad<T: Real>(x: T) -> T {
        let c = T::lit(0.797_884_560_802_865_4);
        let a = T::lit(0.044_715);
        let half = T::lit(0.5);
        let inner = c * (x + a * x * x * x);
        let t = tanh(inner);
        let dinner = c * (T::one() + T::lit(3.0) * a * x * x);
        half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
    }

    pub fn sigmoid<T: Real>(x: T) -> T {
        T::one() / (T::one() + (-x).exp())
    }

    pub fn silu<T: Real>(x: T) -> T {
        x * sigmoid(x)
    }

    pub fn silu_grad<T: Real>(x: T) -> T {
        let s = sigmoid(x);
        s * (T::one() + x * (T::one() - s))
    }
}
