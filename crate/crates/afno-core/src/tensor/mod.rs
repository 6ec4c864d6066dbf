//! Dense row-major tensors (real f64 or complex f64 pairs) plus the
//! recorded-graph machinery used to differentiate through every mixer.
//!
//! Complex tensors are differentiated as pairs of independent real
//! parameters: the gradient of a complex tensor is stored as a complex
//! buffer whose real/imaginary parts are the component gradients. All
//! losses are real scalars, so this convention is exactly what central
//! finite differences measure.

pub mod gradcheck;
pub mod graph;
pub mod io;
pub(crate) mod matmul;
pub mod params;

pub use gradcheck::{grad_check, grad_check_params};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamSet};
pub use rustfft::num_complex::Complex64;

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Dtype {
    Real64,
    Complex128,
}

/// Element storage. Complex values are kept as `Complex64`, not as an
/// interleaved f64 vec, so spectral kernels can work in place.
#[derive(Clone, Debug, PartialEq)]
pub enum Buffer {
    Real(Vec<f64>),
    Complex(Vec<Complex64>),
}

impl Buffer {
    pub fn len(&self) -> usize {
        match self {
            Buffer::Real(v) => v.len(),
            Buffer::Complex(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            Buffer::Real(_) => Dtype::Real64,
            Buffer::Complex(_) => Dtype::Complex128,
        }
    }

    pub fn zeros(dtype: Dtype, n: usize) -> Buffer {
        match dtype {
            Dtype::Real64 => Buffer::Real(vec![0.0; n]),
            Dtype::Complex128 => Buffer::Complex(vec![Complex64::new(0.0, 0.0); n]),
        }
    }

    /// Number of independent real scalars stored (complex counts as two).
    pub fn real_scalar_count(&self) -> usize {
        match self {
            Buffer::Real(v) => v.len(),
            Buffer::Complex(v) => 2 * v.len(),
        }
    }

    pub fn add_assign(&mut self, other: &Buffer) {
        match (self, other) {
            (Buffer::Real(a), Buffer::Real(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += *y;
                }
            }
            (Buffer::Complex(a), Buffer::Complex(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += *y;
                }
            }
            _ => panic!("buffer dtype mismatch in add_assign"),
        }
    }

    pub fn all_finite(&self) -> bool {
        match self {
            Buffer::Real(v) => v.iter().all(|x| x.is_finite()),
            Buffer::Complex(v) => v.iter().all(|x| x.re.is_finite() && x.im.is_finite()),
        }
    }

    fn has_nan(&self) -> bool {
        match self {
            Buffer::Real(v) => v.iter().any(|x| x.is_nan()),
            Buffer::Complex(v) => v.iter().any(|x| x.re.is_nan() || x.im.is_nan()),
        }
    }
}

/// Dense row-major multi-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Buffer,
    pub requires_grad: bool,
    pub grad: Option<Buffer>,
}

impl Tensor {
    pub fn from_real(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(invalid(
                "tensor",
                format!("shape {:?} wants {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Buffer::Real(data),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn from_complex(shape: &[usize], data: Vec<Complex64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(invalid(
                "tensor",
                format!("shape {:?} wants {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Buffer::Complex(data),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(dtype: Dtype, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Buffer::zeros(dtype, n),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: Buffer::Real(vec![v]),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full_real(shape: &[usize], v: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Buffer::Real(vec![v; n]),
            requires_grad: false,
            grad: None,
        }
    }

    /// d x d identity.
    pub fn eye(d: usize) -> Tensor {
        let mut v = vec![0.0; d * d];
        for i in 0..d {
            v[i * d + i] = 1.0;
        }
        Tensor::from_real(&[d, d], v).expect("eye")
    }

    pub fn with_requires_grad(mut self, rg: bool) -> Tensor {
        self.requires_grad = rg;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn buffer(&self) -> &Buffer {
        &self.data
    }

    pub fn buffer_mut(&mut self) -> &mut Buffer {
        &mut self.data
    }

    pub fn into_buffer(self) -> Buffer {
        self.data
    }

    pub fn from_buffer(shape: &[usize], data: Buffer) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(invalid(
                "tensor",
                format!("shape {:?} wants {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn real(&self) -> Result<&[f64]> {
        match &self.data {
            Buffer::Real(v) => Ok(v),
            Buffer::Complex(_) => Err(Error::DtypeMismatch { op: "real view" }),
        }
    }

    pub fn complex(&self) -> Result<&[Complex64]> {
        match &self.data {
            Buffer::Complex(v) => Ok(v),
            Buffer::Real(_) => Err(Error::DtypeMismatch { op: "complex view" }),
        }
    }

    pub fn real_mut(&mut self) -> Result<&mut [f64]> {
        match &mut self.data {
            Buffer::Real(v) => Ok(v),
            Buffer::Complex(_) => Err(Error::DtypeMismatch { op: "real view" }),
        }
    }

    pub fn complex_mut(&mut self) -> Result<&mut [Complex64]> {
        match &mut self.data {
            Buffer::Complex(v) => Ok(v),
            Buffer::Real(_) => Err(Error::DtypeMismatch { op: "complex view" }),
        }
    }

    /// Flat offset for a full multi-index.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &ix) in idx.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            off = off * self.shape[i] + ix;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        match &self.data {
            Buffer::Real(v) => v[self.offset(idx)],
            Buffer::Complex(_) => panic!("at() on complex tensor"),
        }
    }

    pub fn at_complex(&self, idx: &[usize]) -> Complex64 {
        match &self.data {
            Buffer::Complex(v) => v[self.offset(idx)],
            Buffer::Real(_) => panic!("at_complex() on real tensor"),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        match (&self.data, &other.data) {
            (Buffer::Real(a), Buffer::Real(b)) => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max),
            (Buffer::Complex(a), Buffer::Complex(b)) => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y).norm())
                .fold(0.0, f64::max),
            _ => panic!("max_abs_diff dtype mismatch"),
        }
    }

    /// Component-wise soft thresholding: each real (and imaginary)
    /// component v maps to sign(v) * max(|v| - lambda, 0).
    pub fn soft_shrink(&self, lambda: f64) -> Result<Tensor> {
        if lambda < 0.0 {
            return Err(invalid("soft_shrink", "lambda must be >= 0"));
        }
        let data = match &self.data {
            Buffer::Real(v) => Buffer::Real(v.iter().map(|&x| shrink_scalar(x, lambda)).collect()),
            Buffer::Complex(v) => Buffer::Complex(
                v.iter()
                    .map(|z| Complex64::new(shrink_scalar(z.re, lambda), shrink_scalar(z.im, lambda)))
                    .collect(),
            ),
        };
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
            requires_grad: false,
            grad: None,
        })
    }
}

pub(crate) fn shrink_scalar(x: f64, lambda: f64) -> f64 {
    if x > lambda {
        x - lambda
    } else if x < -lambda {
        x + lambda
    } else {
        0.0
    }
}

/// Symmetric trailing-dimension broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        if da == db {
            out[i] = da;
        } else if da == 1 {
            out[i] = db;
        } else if db == 1 {
            out[i] = da;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Row-major strides of `shape` aligned to the trailing dims of `out`,
/// with stride 0 on broadcast dimensions.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let n = out.len();
    let offset = n - shape.len();
    let mut real_strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        real_strides[i] = acc;
        acc *= shape[i];
    }
    let mut out_strides = vec![0usize; n];
    for i in 0..n {
        if i >= offset && shape[i - offset] != 1 {
            out_strides[i] = real_strides[i - offset];
        }
    }
    out_strides
}

/// Walk every flat index of `out_shape` while tracking the flat offsets of
/// two broadcast inputs. `f(out_flat, off_a, off_b)`.
pub(crate) fn for_each_broadcast2(
    out_shape: &[usize],
    stride_a: &[usize],
    stride_b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out_shape.iter().product();
    if n == 0 {
        return;
    }
    let ndim = out_shape.len();
    if ndim == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; ndim];
    let mut off_a = 0usize;
    let mut off_b = 0usize;
    for flat in 0..n {
        f(flat, off_a, off_b);
        for d in (0..ndim).rev() {
            idx[d] += 1;
            off_a += stride_a[d];
            off_b += stride_b[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            off_a -= stride_a[d] * out_shape[d];
            off_b -= stride_b[d] * out_shape[d];
        }
    }
}

/// Sum `g` (shaped `from`) down to `target`, undoing broadcast.
pub(crate) fn reduce_to_shape(g: &Buffer, from: &[usize], target: &[usize]) -> Buffer {
    if from == target {
        return g.clone();
    }
    let strides_t = broadcast_strides(target, from);
    let n_target: usize = target.iter().product();
    let mut out = Buffer::zeros(g.dtype(), n_target);
    let zero_strides = vec![0usize; from.len()];
    match (g, &mut out) {
        (Buffer::Real(gv), Buffer::Real(ov)) => {
            for_each_broadcast2(from, &strides_t, &zero_strides, |flat, off_t, _| {
                ov[off_t] += gv[flat];
            });
        }
        (Buffer::Complex(gv), Buffer::Complex(ov)) => {
            for_each_broadcast2(from, &strides_t, &zero_strides, |flat, off_t, _| {
                ov[off_t] += gv[flat];
            });
        }
        _ => unreachable!(),
    }
    out
}
