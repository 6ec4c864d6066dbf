//! Recorded operation graph and reverse-mode differentiation.
//!
//! A `Graph` owns every intermediate tensor of one forward pass. Ops are
//! appended in topological order, so the backward sweep is a single
//! reverse walk. `backward` consumes the graph; the next step records a
//! fresh one.

use std::collections::HashMap;

use super::matmul::{batched_matmul, conj_swap_last2};
use super::params::{ParamId, ParamSet};
use super::{
    broadcast_shape, broadcast_strides, for_each_broadcast2, reduce_to_shape, shrink_scalar,
    Buffer, Complex64, Dtype, Tensor,
};
use crate::error::{invalid, Error, Result};
use crate::spectral::fft;
use crate::spectral::modes;

/// Handle to a node in one specific `Graph`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    SoftShrink(Var, f64),
    Scale(Var, f64),
    Matmul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    LayerNorm { x: Var, scale: Var, shift: Var },
    Softmax(Var),
    Rfft2(Var),
    Irfft2 { s: Var, width: usize },
    TruncateModes { s: Var, rows: Vec<usize>, cols: usize },
    PadModes { s: Var, rows: Vec<usize>, full_wh: usize },
    CircConv1d { x: Var, taps: Var },
    Unpatchify { tokens: Var, grid_h: usize, grid_w: usize, patch: usize, channels: usize },
    ComplexToReal(Var),
    CrossEntropy { logits: Var, class: usize },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
    saved: Vec<Tensor>,
    pinned: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
    /// Evaluation mode: each op releases (or steals) the buffers of its
    /// non-pinned inputs, keeping the live set small. Leaves stay pinned.
    free_consumed: bool,
    param_cache: HashMap<ParamId, Var>,
}

/// Gradients of free (non-ParamSet) leaves, indexed by their `Var`.
pub struct Gradients {
    by_var: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_var.get(v.0).and_then(|t| t.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.by_var.get_mut(v.0).and_then(|t| t.take())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    /// A recording graph: ops touching a requires_grad leaf become
    /// differentiable.
    pub fn new() -> Graph {
        Graph {
            nodes: Vec::new(),
            recording: true,
            free_consumed: false,
            param_cache: HashMap::new(),
        }
    }

    /// Evaluation-only graph; `backward` on it is an error. Every
    /// intermediate value stays readable afterwards.
    pub fn no_grad() -> Graph {
        Graph {
            nodes: Vec::new(),
            recording: false,
            free_consumed: false,
            param_cache: HashMap::new(),
        }
    }

    /// Evaluation-only graph that releases intermediate buffers as soon
    /// as they are consumed (each non-leaf value feeds exactly one later
    /// op unless `retain` pins it). Used by latency-sensitive forward
    /// paths; only the final output is guaranteed readable.
    pub fn eval() -> Graph {
        Graph {
            nodes: Vec::new(),
            recording: false,
            free_consumed: true,
            param_cache: HashMap::new(),
        }
    }

    /// Pin a node so evaluation mode never releases its buffer; needed
    /// when straight-line code reads a non-leaf value more than once.
    pub fn retain(&mut self, v: Var) {
        self.nodes[v.0].pinned = true;
    }

    /// Steal the input buffer for in-place reuse when evaluation mode
    /// owns it exclusively.
    fn try_steal(&mut self, v: Var) -> Option<Buffer> {
        if !self.free_consumed {
            return None;
        }
        let node = &mut self.nodes[v.0];
        if node.pinned || matches!(node.op, Op::Leaf { .. }) {
            return None;
        }
        if node.value.numel() == 0 {
            return None;
        }
        let dtype = node.value.dtype();
        let shape = node.value.shape().to_vec();
        let husk = Tensor::from_buffer(&[0], Buffer::zeros(dtype, 0)).expect("husk");
        let taken = std::mem::replace(&mut node.value, husk);
        // keep the shape visible for later metadata reads
        let _ = shape;
        Some(taken.into_buffer())
    }

    /// Drop the buffers of all consumable inputs of the op just pushed.
    fn release_inputs(&mut self, op: &Op) {
        if !self.free_consumed {
            return;
        }
        for v in self.op_inputs(op) {
            let node = &mut self.nodes[v.0];
            if node.pinned || matches!(node.op, Op::Leaf { .. }) || node.value.numel() == 0 {
                continue;
            }
            let dtype = node.value.dtype();
            node.value = Tensor::from_buffer(&[0], Buffer::zeros(dtype, 0)).expect("husk");
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let t = self.value(v);
        if t.numel() != 1 {
            return Err(Error::NotScalarLoss {
                shape: t.shape().to_vec(),
            });
        }
        match t.buffer() {
            Buffer::Real(d) => Ok(d[0]),
            Buffer::Complex(_) => Err(Error::NotScalarLoss {
                shape: t.shape().to_vec(),
            }),
        }
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool, saved: Vec<Tensor>) -> Var {
        self.debug_check_finite(&op, &value);
        self.release_inputs(&op);
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            needs_grad: needs_grad && self.recording,
            saved,
            pinned: false,
        });
        v
    }

    /// Debug-build invariant: an op fed only finite inputs must not
    /// produce NaN. Overflow to infinity is allowed (the training loop
    /// guards against it at the loss), and NaN downstream of a non-finite
    /// input just propagates.
    fn debug_check_finite(&self, op: &Op, value: &Tensor) {
        if cfg!(debug_assertions) && value.buffer().has_nan() {
            let inputs_finite = self
                .op_inputs(op)
                .iter()
                .all(|v| self.nodes[v.0].value.buffer().all_finite());
            if inputs_finite {
                panic!("{}: NaN output from finite inputs", op_name(op));
            }
        }
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf { .. } => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => vec![*a, *b],
            Op::Relu(a)
            | Op::SoftShrink(a, _)
            | Op::Scale(a, _)
            | Op::Permute(a, _)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Softmax(a)
            | Op::Rfft2(a)
            | Op::ComplexToReal(a) => vec![*a],
            Op::Irfft2 { s, .. } | Op::TruncateModes { s, .. } | Op::PadModes { s, .. } => {
                vec![*s]
            }
            Op::LayerNorm { x, scale, shift } => vec![*x, *scale, *shift],
            Op::CircConv1d { x, taps } => vec![*x, *taps],
            Op::Unpatchify { tokens, .. } => vec![*tokens],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Insert a tensor as a leaf; its `requires_grad` flag decides whether
    /// gradients flow to it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(Op::Leaf { param: None }, t, rg, vec![])
    }

    /// Insert a tensor that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = t.with_requires_grad(false);
        self.push(Op::Leaf { param: None }, t, false, vec![])
    }

    /// Insert (or reuse) the leaf for a named parameter. Repeated calls
    /// with the same id share one leaf, so weight tying accumulates
    /// gradients correctly.
    pub fn param(&mut self, ps: &ParamSet, id: ParamId) -> Var {
        if let Some(&v) = self.param_cache.get(&id) {
            return v;
        }
        let t = ps.get(id).clone().with_requires_grad(true);
        let v = self.push(Op::Leaf { param: Some(id) }, t, true, vec![]);
        self.param_cache.insert(id, v);
        v
    }

    // ---- elementwise ----

    fn binary_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        fr: impl Fn(f64, f64) -> f64,
        fc: impl Fn(Complex64, Complex64) -> Complex64,
    ) -> Result<(Tensor, Vec<usize>)> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.dtype() != tb.dtype() {
            return Err(Error::DtypeMismatch { op: name });
        }
        // equal shapes skip the broadcast odometer entirely, reusing the
        // lhs buffer when evaluation mode owns it
        if ta.shape() == tb.shape() {
            let shape = ta.shape().to_vec();
            if let Some(mut buf) = self.try_steal(a) {
                match (&mut buf, self.nodes[b.0].value.buffer()) {
                    (Buffer::Real(av), Buffer::Real(bv)) => {
                        av.iter_mut().zip(bv).for_each(|(x, y)| *x = fr(*x, *y))
                    }
                    (Buffer::Complex(av), Buffer::Complex(bv)) => {
                        av.iter_mut().zip(bv).for_each(|(x, y)| *x = fc(*x, *y))
                    }
                    _ => unreachable!(),
                }
                return Ok((Tensor::from_buffer(&shape, buf)?, shape));
            }
            let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            let data = match (ta.buffer(), tb.buffer()) {
                (Buffer::Real(av), Buffer::Real(bv)) => {
                    Buffer::Real(av.iter().zip(bv).map(|(x, y)| fr(*x, *y)).collect())
                }
                (Buffer::Complex(av), Buffer::Complex(bv)) => {
                    Buffer::Complex(av.iter().zip(bv).map(|(x, y)| fc(*x, *y)).collect())
                }
                _ => unreachable!(),
            };
            return Ok((Tensor::from_buffer(&shape, data)?, shape));
        }
        let out_shape = broadcast_shape(ta.shape(), tb.shape()).ok_or(Error::ShapeMismatch {
            op: name,
            left: ta.shape().to_vec(),
            right: tb.shape().to_vec(),
        })?;
        let sa = broadcast_strides(ta.shape(), &out_shape);
        let sb = broadcast_strides(tb.shape(), &out_shape);
        let n: usize = out_shape.iter().product();
        let data = match (ta.buffer(), tb.buffer()) {
            (Buffer::Real(av), Buffer::Real(bv)) => {
                let mut out = vec![0.0; n];
                for_each_broadcast2(&out_shape, &sa, &sb, |flat, oa, ob| {
                    out[flat] = fr(av[oa], bv[ob]);
                });
                Buffer::Real(out)
            }
            (Buffer::Complex(av), Buffer::Complex(bv)) => {
                let mut out = vec![Complex64::new(0.0, 0.0); n];
                for_each_broadcast2(&out_shape, &sa, &sb, |flat, oa, ob| {
                    out[flat] = fc(av[oa], bv[ob]);
                });
                Buffer::Complex(out)
            }
            _ => unreachable!(),
        };
        Ok((Tensor::from_buffer(&out_shape, data)?, out_shape))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, _) = self.binary_broadcast("add", a, b, |x, y| x + y, |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), out, ng, vec![]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, _) = self.binary_broadcast("sub", a, b, |x, y| x - y, |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), out, ng, vec![]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, _) = self.binary_broadcast("mul", a, b, |x, y| x * y, |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), out, ng, vec![]))
    }

    /// ReLU; on complex tensors it applies to the real and imaginary
    /// components independently.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ng = self.needs(a);
        let shape = self.nodes[a.0].value.shape().to_vec();
        let data = if let Some(mut buf) = self.try_steal(a) {
            match &mut buf {
                Buffer::Real(v) => v.iter_mut().for_each(|x| *x = x.max(0.0)),
                Buffer::Complex(v) => v
                    .iter_mut()
                    .for_each(|z| *z = Complex64::new(z.re.max(0.0), z.im.max(0.0))),
            }
            buf
        } else {
            match self.nodes[a.0].value.buffer() {
                Buffer::Real(v) => Buffer::Real(v.iter().map(|&x| x.max(0.0)).collect()),
                Buffer::Complex(v) => Buffer::Complex(
                    v.iter()
                        .map(|z| Complex64::new(z.re.max(0.0), z.im.max(0.0)))
                        .collect(),
                ),
            }
        };
        let out = Tensor::from_buffer(&shape, data)?;
        Ok(self.push(Op::Relu(a), out, ng, vec![]))
    }

    pub fn soft_shrink(&mut self, a: Var, lambda: f64) -> Result<Var> {
        if lambda < 0.0 {
            return Err(invalid("soft_shrink", "lambda must be >= 0"));
        }
        let ng = self.needs(a);
        let shape = self.nodes[a.0].value.shape().to_vec();
        let out = if let Some(mut buf) = self.try_steal(a) {
            match &mut buf {
                Buffer::Real(v) => v.iter_mut().for_each(|x| *x = shrink_scalar(*x, lambda)),
                Buffer::Complex(v) => v.iter_mut().for_each(|z| {
                    *z = Complex64::new(shrink_scalar(z.re, lambda), shrink_scalar(z.im, lambda))
                }),
            }
            Tensor::from_buffer(&shape, buf)?
        } else {
            self.nodes[a.0].value.soft_shrink(lambda)?
        };
        Ok(self.push(Op::SoftShrink(a, lambda), out, ng, vec![]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ng = self.needs(a);
        let shape = self.nodes[a.0].value.shape().to_vec();
        let data = if let Some(mut buf) = self.try_steal(a) {
            match &mut buf {
                Buffer::Real(v) => v.iter_mut().for_each(|x| *x *= c),
                Buffer::Complex(v) => v.iter_mut().for_each(|z| *z *= c),
            }
            buf
        } else {
            match self.nodes[a.0].value.buffer() {
                Buffer::Real(v) => Buffer::Real(v.iter().map(|&x| x * c).collect()),
                Buffer::Complex(v) => Buffer::Complex(v.iter().map(|&z| z * c).collect()),
            }
        };
        let out = Tensor::from_buffer(&shape, data)?;
        Ok(self.push(Op::Scale(a, c), out, ng, vec![]))
    }

    // ---- linear algebra and shape ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = batched_matmul(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a, b), out, ng, vec![]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if perm.len() != ta.rank() {
            return Err(invalid("permute", format!("perm {perm:?} vs rank {}", ta.rank())));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(invalid("permute", format!("invalid permutation {perm:?}")));
            }
            seen[p] = true;
        }
        let out = permute_tensor(ta, perm)?;
        let ng = self.needs(a);
        Ok(self.push(Op::Permute(a, perm.to_vec()), out, ng, vec![]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[a.0].value.numel() {
            return Err(invalid(
                "reshape",
                format!("cannot reshape {:?} to {:?}", self.nodes[a.0].value.shape(), shape),
            ));
        }
        let ng = self.needs(a);
        let data = match self.try_steal(a) {
            Some(buf) => buf,
            None => self.nodes[a.0].value.buffer().clone(),
        };
        let out = Tensor::from_buffer(shape, data)?;
        Ok(self.push(Op::Reshape(a), out, ng, vec![]))
    }

    /// Sum of all elements of a real tensor; the usual loss reducer.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let total = match ta.buffer() {
            Buffer::Real(v) => v.iter().sum::<f64>(),
            Buffer::Complex(_) => return Err(Error::DtypeMismatch { op: "sum" }),
        };
        let ng = self.needs(a);
        Ok(self.push(Op::Sum(a), Tensor::scalar(total), ng, vec![]))
    }

    /// Per-row normalization over the last axis, then elementwise
    /// scale/shift. Real tensors only.
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let (tx, ts, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[scale.0].value,
            &self.nodes[shift.0].value,
        );
        let d = *tx.shape().last().ok_or_else(|| invalid("layer_norm", "rank 0 input"))?;
        if ts.shape() != [d] || tb.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: tx.shape().to_vec(),
                right: ts.shape().to_vec(),
            });
        }
        let xv = tx.real()?;
        let sv = ts.real()?;
        let bv = tb.real()?;
        let rows = tx.numel() / d;
        let mut out = vec![0.0; tx.numel()];
        let mut ynorm = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let y = (row[c] - mean) * is;
                ynorm[r * d + c] = y;
                out[r * d + c] = y * sv[c] + bv[c];
            }
        }
        let ng = self.needs(x) || self.needs(scale) || self.needs(shift);
        let saved = vec![
            Tensor::from_real(&[rows], inv_std)?,
            Tensor::from_real(tx.shape(), ynorm)?,
        ];
        let out = Tensor::from_real(tx.shape(), out)?;
        Ok(self.push(Op::LayerNorm { x, scale, shift }, out, ng, saved))
    }

    /// Numerically stable softmax over the last axis (real tensors).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let d = *ta.shape().last().ok_or_else(|| invalid("softmax", "rank 0 input"))?;
        ta.real()?;
        let shape = ta.shape().to_vec();
        let rows = ta.numel() / d;
        let ng = self.needs(a);
        let mut out = match self.try_steal(a) {
            Some(Buffer::Real(v)) => v,
            Some(_) => unreachable!("softmax input checked real"),
            None => self.nodes[a.0].value.real()?.to_vec(),
        };
        for r in 0..rows {
            let row = &mut out[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let out = Tensor::from_real(&shape, out)?;
        Ok(self.push(Op::Softmax(a), out, ng, vec![]))
    }

    // ---- spectral ----

    /// Unnormalized forward real transform [h, w, d] -> [h, w/2+1, d].
    pub fn rfft2(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() != 3 {
            return Err(invalid("rfft2", format!("expected [h, w, d], got {:?}", tx.shape())));
        }
        let (h, w, d) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let xv = tx.real().map_err(|_| Error::DtypeMismatch { op: "rfft2" })?;
        let s = fft::rfft2_raw(xv, h, w, d);
        let out = Tensor::from_complex(&[h, fft::half_width(w), d], s)?;
        let ng = self.needs(x);
        Ok(self.push(Op::Rfft2(x), out, ng, vec![]))
    }

    /// Inverse transform with 1/(h*w) normalization; `width` is the full
    /// spatial width the half-spectrum stands for.
    pub fn irfft2(&mut self, s: Var, width: usize) -> Result<Var> {
        let ts = &self.nodes[s.0].value;
        if ts.rank() != 3 {
            return Err(invalid("irfft2", format!("expected [h, w/2+1, d], got {:?}", ts.shape())));
        }
        let (h, wh, d) = (ts.shape()[0], ts.shape()[1], ts.shape()[2]);
        if fft::half_width(width) != wh {
            return Err(invalid(
                "irfft2",
                format!("width {width} inconsistent with half-spectrum width {wh}"),
            ));
        }
        let sv = ts.complex().map_err(|_| Error::DtypeMismatch { op: "irfft2" })?;
        let y = fft::irfft2_raw(sv, h, width, d);
        let out = Tensor::from_real(&[h, width, d], y)?;
        let ng = self.needs(s);
        Ok(self.push(Op::Irfft2 { s, width }, out, ng, vec![]))
    }

    /// Keep the lowest ceil(frac*h) absolute row frequencies (plus their
    /// conjugate partners) and the lowest ceil(frac*(w/2+1)) columns.
    pub fn truncate_modes(&mut self, s: Var, keep_fraction: f64) -> Result<Var> {
        let ts = &self.nodes[s.0].value;
        if ts.rank() != 3 {
            return Err(invalid("truncate_modes", format!("expected rank 3, got {:?}", ts.shape())));
        }
        let (h, wh, d) = (ts.shape()[0], ts.shape()[1], ts.shape()[2]);
        let rows = modes::kept_rows(h, modes::kept_count(h, keep_fraction)?);
        let cols = modes::kept_count(wh, keep_fraction)?.min(wh);
        let sv = ts.complex()?;
        let mut out = vec![Complex64::new(0.0, 0.0); rows.len() * cols * d];
        for (r, &a) in rows.iter().enumerate() {
            for b in 0..cols {
                for c in 0..d {
                    out[(r * cols + b) * d + c] = sv[(a * wh + b) * d + c];
                }
            }
        }
        let out = Tensor::from_complex(&[rows.len(), cols, d], out)?;
        let ng = self.needs(s);
        Ok(self.push(Op::TruncateModes { s, rows, cols }, out, ng, vec![]))
    }

    /// Restore a truncated spectrum to the full [h, w/2+1, d] layout,
    /// zero-filling discarded bins.
    pub fn pad_modes(&mut self, s: Var, full_h: usize, full_width: usize) -> Result<Var> {
        let ts = &self.nodes[s.0].value;
        if ts.rank() != 3 {
            return Err(invalid("pad_modes", format!("expected rank 3, got {:?}", ts.shape())));
        }
        let (kh, kw, d) = (ts.shape()[0], ts.shape()[1], ts.shape()[2]);
        let full_wh = fft::half_width(full_width);
        let rows = modes::rows_for_reduced(full_h, kh)?;
        if kw > full_wh {
            return Err(invalid("pad_modes", format!("{kw} columns exceed full layout {full_wh}")));
        }
        let sv = ts.complex()?;
        let mut out = vec![Complex64::new(0.0, 0.0); full_h * full_wh * d];
        for (r, &a) in rows.iter().enumerate() {
            for b in 0..kw {
                for c in 0..d {
                    out[(a * full_wh + b) * d + c] = sv[(r * kw + b) * d + c];
                }
            }
        }
        let out = Tensor::from_complex(&[full_h, full_wh, d], out)?;
        let ng = self.needs(s);
        Ok(self.push(Op::PadModes { s, rows, full_wh }, out, ng, vec![]))
    }

    /// View the components of a complex tensor as a trailing real axis:
    /// [s...] complex -> [s..., 2] real. Exact and linear; lets real
    /// reductions (sum, mse) consume complex values.
    pub fn complex_to_real(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let v = ta.complex().map_err(|_| Error::DtypeMismatch { op: "complex_to_real" })?;
        let mut out = Vec::with_capacity(v.len() * 2);
        for z in v {
            out.push(z.re);
            out.push(z.im);
        }
        let mut shape = ta.shape().to_vec();
        shape.push(2);
        let out = Tensor::from_real(&shape, out)?;
        let ng = self.needs(a);
        Ok(self.push(Op::ComplexToReal(a), out, ng, vec![]))
    }

    /// Cross-entropy of a rank-1 logit vector against one target class:
    /// logsumexp(logits) - logits[class].
    pub fn cross_entropy(&mut self, logits: Var, class: usize) -> Result<Var> {
        let tl = &self.nodes[logits.0].value;
        let lv = tl.real().map_err(|_| Error::DtypeMismatch { op: "cross_entropy" })?;
        if tl.rank() != 1 || class >= lv.len() {
            return Err(invalid(
                "cross_entropy",
                format!("logits {:?} vs class {class}", tl.shape()),
            ));
        }
        let m = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + lv.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        let loss = lse - lv[class];
        let ng = self.needs(logits);
        Ok(self.push(Op::CrossEntropy { logits, class }, Tensor::scalar(loss), ng, vec![]))
    }

    // ---- structured data movement ----

    /// Depthwise length-3 circular convolution along the flattened token
    /// sequence of [h, w, d]; taps have shape [3, d].
    pub fn circ_conv1d(&mut self, x: Var, taps: Var) -> Result<Var> {
        let (tx, tt) = (&self.nodes[x.0].value, &self.nodes[taps.0].value);
        if tx.rank() != 3 {
            return Err(invalid("circ_conv1d", format!("expected [h, w, d], got {:?}", tx.shape())));
        }
        let d = tx.shape()[2];
        if tt.shape() != [3, d] {
            return Err(Error::ShapeMismatch {
                op: "circ_conv1d",
                left: tx.shape().to_vec(),
                right: tt.shape().to_vec(),
            });
        }
        let n = tx.shape()[0] * tx.shape()[1];
        let xv = tx.real()?;
        let tv = tt.real()?;
        let mut out = vec![0.0; n * d];
        for t in 0..n {
            for o in 0..3usize {
                let src = (t + n + o - 1) % n;
                for c in 0..d {
                    out[t * d + c] += tv[o * d + c] * xv[src * d + c];
                }
            }
        }
        let out = Tensor::from_real(tx.shape(), out)?;
        let ng = self.needs(x) || self.needs(taps);
        Ok(self.push(Op::CircConv1d { x, taps }, out, ng, vec![]))
    }

    /// Scatter per-token patch pixels back to image layout:
    /// [grid_h*grid_w, p*p*c] -> [grid_h*p, grid_w*p, c].
    pub fn unpatchify(
        &mut self,
        tokens: Var,
        grid_h: usize,
        grid_w: usize,
        patch: usize,
        channels: usize,
    ) -> Result<Var> {
        let tt = &self.nodes[tokens.0].value;
        let want = [grid_h * grid_w, patch * patch * channels];
        if tt.shape() != want {
            return Err(Error::ShapeMismatch {
                op: "unpatchify",
                left: tt.shape().to_vec(),
                right: want.to_vec(),
            });
        }
        let tv = tt.real()?;
        let (hh, ww) = (grid_h * patch, grid_w * patch);
        let mut out = vec![0.0; hh * ww * channels];
        for gi in 0..grid_h {
            for gj in 0..grid_w {
                let tok = gi * grid_w + gj;
                for di in 0..patch {
                    for dj in 0..patch {
                        for c in 0..channels {
                            out[((gi * patch + di) * ww + gj * patch + dj) * channels + c] =
                                tv[tok * (patch * patch * channels) + (di * patch + dj) * channels + c];
                        }
                    }
                }
            }
        }
        let out = Tensor::from_real(&[hh, ww, channels], out)?;
        let ng = self.needs(tokens);
        Ok(self.push(
            Op::Unpatchify { tokens, grid_h, grid_w, patch, channels },
            out,
            ng,
            vec![],
        ))
    }

    // ---- backward ----

    /// Populate gradients on every requires_grad leaf reachable from
    /// `loss`, writing ParamSet leaves back into `params`. Consumes the
    /// graph.
    pub fn backward(self, loss: Var, params: &mut ParamSet) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(invalid("backward", "loss var does not belong to this graph"));
        }
        if !self.recording {
            return Err(invalid("backward", "graph was built in no-grad mode"));
        }
        {
            let lt = &self.nodes[loss.0].value;
            if lt.numel() != 1 || lt.dtype() != Dtype::Real64 {
                return Err(Error::NotScalarLoss {
                    shape: lt.shape().to_vec(),
                });
            }
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(invalid(
                "backward",
                "loss is not connected to any requires_grad leaf",
            ));
        }
        let n = self.nodes.len();
        let mut cot: Vec<Option<Buffer>> = (0..n).map(|_| None).collect();
        cot[loss.0] = Some(Buffer::Real(vec![1.0]));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                cot[idx] = None;
                continue;
            }
            let g = match cot[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.adjoint(idx, &g, &mut cot);
            if let Op::Leaf { .. } = self.nodes[idx].op {
                cot[idx] = Some(g);
            }
        }
        let mut grads = Gradients {
            by_var: (0..n).map(|_| None).collect(),
        };
        for idx in 0..n {
            if let Op::Leaf { param } = self.nodes[idx].op {
                if let Some(g) = cot[idx].take() {
                    if let Some(pid) = param {
                        params.set_grad(pid, g);
                    } else {
                        let t = Tensor::from_buffer(self.nodes[idx].value.shape(), g)
                            .expect("grad shape");
                        grads.by_var[idx] = Some(t);
                    }
                }
            }
        }
        Ok(grads)
    }

    fn acc(&self, cot: &mut [Option<Buffer>], v: Var, contrib: Buffer) {
        debug_assert_eq!(contrib.len(), self.nodes[v.0].value.numel());
        match &mut cot[v.0] {
            Some(existing) => existing.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn adjoint(&self, idx: usize, g: &Buffer, cot: &mut [Option<Buffer>]) {
        let node = &self.nodes[idx];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    self.acc(cot, *a, reduce_to_shape(g, out_shape, self.nodes[a.0].value.shape()));
                }
                if self.needs(*b) {
                    self.acc(cot, *b, reduce_to_shape(g, out_shape, self.nodes[b.0].value.shape()));
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    self.acc(cot, *a, reduce_to_shape(g, out_shape, self.nodes[a.0].value.shape()));
                }
                if self.needs(*b) {
                    let neg = scale_buffer(g, -1.0);
                    self.acc(cot, *b, reduce_to_shape(&neg, out_shape, self.nodes[b.0].value.shape()));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if self.needs(*a) {
                    let prod = mul_cotangent(g, out_shape, tb);
                    self.acc(cot, *a, reduce_to_shape(&prod, out_shape, ta.shape()));
                }
                if self.needs(*b) {
                    let prod = mul_cotangent(g, out_shape, ta);
                    self.acc(cot, *b, reduce_to_shape(&prod, out_shape, tb.shape()));
                }
            }
            Op::Relu(a) => {
                let masked = mask_like(g, self.nodes[a.0].value.buffer(), |x| x > 0.0);
                self.acc(cot, *a, masked);
            }
            Op::SoftShrink(a, lambda) => {
                let l = *lambda;
                let masked = mask_like(g, self.nodes[a.0].value.buffer(), move |x| x.abs() > l);
                self.acc(cot, *a, masked);
            }
            Op::Scale(a, c) => {
                self.acc(cot, *a, scale_buffer(g, *c));
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let gt = Tensor::from_buffer(out_shape, g.clone()).expect("matmul cot");
                if self.needs(*a) {
                    let bh = conj_swap_last2(tb);
                    let ga = batched_matmul(&gt, &bh).expect("matmul grad_a");
                    self.acc(
                        cot,
                        *a,
                        reduce_to_shape(ga.buffer(), ga.shape(), ta.shape()),
                    );
                }
                if self.needs(*b) {
                    let ah = conj_swap_last2(ta);
                    let gb = batched_matmul(&ah, &gt).expect("matmul grad_b");
                    self.acc(
                        cot,
                        *b,
                        reduce_to_shape(gb.buffer(), gb.shape(), tb.shape()),
                    );
                }
            }
            Op::Permute(a, perm) => {
                let inverse = invert_permutation(perm);
                let gt = Tensor::from_buffer(out_shape, g.clone()).expect("permute cot");
                let back = permute_tensor(&gt, &inverse).expect("permute adjoint");
                self.acc(cot, *a, back.into_buffer());
            }
            Op::Reshape(a) => {
                self.acc(cot, *a, g.clone());
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.numel();
                let gv = match g {
                    Buffer::Real(v) => v[0],
                    Buffer::Complex(_) => unreachable!("sum is real"),
                };
                self.acc(cot, *a, Buffer::Real(vec![gv; n]));
            }
            Op::LayerNorm { x, scale, shift } => {
                let gv = match g {
                    Buffer::Real(v) => v,
                    _ => unreachable!(),
                };
                let d = *out_shape.last().unwrap();
                let rows = gv.len() / d;
                let inv_std = node.saved[0].real().unwrap();
                let y = node.saved[1].real().unwrap();
                let sv = self.nodes[scale.0].value.real().unwrap();
                if self.needs(*x) {
                    let mut gx = vec![0.0; gv.len()];
                    for r in 0..rows {
                        let mut mean_gy = 0.0;
                        let mut mean_gyy = 0.0;
                        for c in 0..d {
                            let gy = gv[r * d + c] * sv[c];
                            mean_gy += gy;
                            mean_gyy += gy * y[r * d + c];
                        }
                        mean_gy /= d as f64;
                        mean_gyy /= d as f64;
                        for c in 0..d {
                            let gy = gv[r * d + c] * sv[c];
                            gx[r * d + c] = inv_std[r] * (gy - mean_gy - y[r * d + c] * mean_gyy);
                        }
                    }
                    self.acc(cot, *x, Buffer::Real(gx));
                }
                if self.needs(*scale) {
                    let mut gs = vec![0.0; d];
                    for r in 0..rows {
                        for c in 0..d {
                            gs[c] += gv[r * d + c] * y[r * d + c];
                        }
                    }
                    self.acc(cot, *scale, Buffer::Real(gs));
                }
                if self.needs(*shift) {
                    let mut gb = vec![0.0; d];
                    for r in 0..rows {
                        for c in 0..d {
                            gb[c] += gv[r * d + c];
                        }
                    }
                    self.acc(cot, *shift, Buffer::Real(gb));
                }
            }
            Op::Softmax(a) => {
                let gv = match g {
                    Buffer::Real(v) => v,
                    _ => unreachable!(),
                };
                let y = node.value.real().unwrap();
                let d = *out_shape.last().unwrap();
                let rows = gv.len() / d;
                let mut gx = vec![0.0; gv.len()];
                for r in 0..rows {
                    let mut dot = 0.0;
                    for c in 0..d {
                        dot += gv[r * d + c] * y[r * d + c];
                    }
                    for c in 0..d {
                        gx[r * d + c] = y[r * d + c] * (gv[r * d + c] - dot);
                    }
                }
                self.acc(cot, *a, Buffer::Real(gx));
            }
            Op::Rfft2(a) => {
                let gs = match g {
                    Buffer::Complex(v) => v,
                    _ => unreachable!(),
                };
                let sx = self.nodes[a.0].value.shape();
                let (h, w, d) = (sx[0], sx[1], sx[2]);
                let gx = fft::rfft2_adjoint_raw(gs, h, w, d);
                self.acc(cot, *a, Buffer::Real(gx));
            }
            Op::Irfft2 { s, width } => {
                let gy = match g {
                    Buffer::Real(v) => v,
                    _ => unreachable!(),
                };
                let sx = self.nodes[s.0].value.shape();
                let (h, d) = (sx[0], sx[2]);
                let gs = fft::irfft2_adjoint_raw(gy, h, *width, d);
                self.acc(cot, *s, Buffer::Complex(gs));
            }
            Op::TruncateModes { s, rows, cols } => {
                let gv = match g {
                    Buffer::Complex(v) => v,
                    _ => unreachable!(),
                };
                let sx = self.nodes[s.0].value.shape();
                let (wh, d) = (sx[1], sx[2]);
                let mut gs = vec![Complex64::new(0.0, 0.0); sx[0] * wh * d];
                for (r, &a) in rows.iter().enumerate() {
                    for b in 0..*cols {
                        for c in 0..d {
                            gs[(a * wh + b) * d + c] = gv[(r * cols + b) * d + c];
                        }
                    }
                }
                self.acc(cot, *s, Buffer::Complex(gs));
            }
            Op::PadModes { s, rows, full_wh, .. } => {
                let gv = match g {
                    Buffer::Complex(v) => v,
                    _ => unreachable!(),
                };
                let sx = self.nodes[s.0].value.shape();
                let (kw, d) = (sx[1], sx[2]);
                let mut gs = vec![Complex64::new(0.0, 0.0); sx[0] * kw * d];
                for (r, &a) in rows.iter().enumerate() {
                    for b in 0..kw {
                        for c in 0..d {
                            gs[(r * kw + b) * d + c] = gv[(a * full_wh + b) * d + c];
                        }
                    }
                }
                self.acc(cot, *s, Buffer::Complex(gs));
            }
            Op::CircConv1d { x, taps } => {
                let gv = match g {
                    Buffer::Real(v) => v,
                    _ => unreachable!(),
                };
                let tx = &self.nodes[x.0].value;
                let d = tx.shape()[2];
                let n = tx.shape()[0] * tx.shape()[1];
                let tv = self.nodes[taps.0].value.real().unwrap();
                let xv = tx.real().unwrap();
                if self.needs(*x) {
                    let mut gx = vec![0.0; n * d];
                    for t in 0..n {
                        for o in 0..3usize {
                            // out[t] took x[(t+o-1) % n]; flip for the adjoint
                            let dst = (t + n + o - 1) % n;
                            for c in 0..d {
                                gx[dst * d + c] += tv[o * d + c] * gv[t * d + c];
                            }
                        }
                    }
                    self.acc(cot, *x, Buffer::Real(gx));
                }
                if self.needs(*taps) {
                    let mut gt = vec![0.0; 3 * d];
                    for t in 0..n {
                        for o in 0..3usize {
                            let src = (t + n + o - 1) % n;
                            for c in 0..d {
                                gt[o * d + c] += gv[t * d + c] * xv[src * d + c];
                            }
                        }
                    }
                    self.acc(cot, *taps, Buffer::Real(gt));
                }
            }
            Op::Unpatchify { tokens, grid_h, grid_w, patch, channels } => {
                let gv = match g {
                    Buffer::Real(v) => v,
                    _ => unreachable!(),
                };
                let (p, c_n) = (*patch, *channels);
                let ww = grid_w * p;
                let mut gt = vec![0.0; grid_h * grid_w * p * p * c_n];
                for gi in 0..*grid_h {
                    for gj in 0..*grid_w {
                        let tok = gi * grid_w + gj;
                        for di in 0..p {
                            for dj in 0..p {
                                for c in 0..c_n {
                                    gt[tok * (p * p * c_n) + (di * p + dj) * c_n + c] =
                                        gv[((gi * p + di) * ww + gj * p + dj) * c_n + c];
                                }
                            }
                        }
                    }
                }
                self.acc(cot, *tokens, Buffer::Real(gt));
            }
            Op::ComplexToReal(a) => {
                let gv = match g {
                    Buffer::Real(v) => v,
                    _ => unreachable!(),
                };
                let packed: Vec<Complex64> = gv
                    .chunks_exact(2)
                    .map(|p| Complex64::new(p[0], p[1]))
                    .collect();
                self.acc(cot, *a, Buffer::Complex(packed));
            }
            Op::CrossEntropy { logits, class } => {
                let gv = match g {
                    Buffer::Real(v) => v[0],
                    _ => unreachable!(),
                };
                let lv = self.nodes[logits.0].value.real().unwrap();
                let m = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = lv.iter().map(|l| (l - m).exp()).sum();
                let mut gx = vec![0.0; lv.len()];
                for (i, l) in lv.iter().enumerate() {
                    let p = (l - m).exp() / z;
                    gx[i] = gv * (p - if i == *class { 1.0 } else { 0.0 });
                }
                self.acc(cot, *logits, Buffer::Real(gx));
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf { .. } => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Relu(..) => "relu",
        Op::SoftShrink(..) => "soft_shrink",
        Op::Scale(..) => "scale",
        Op::Matmul(..) => "matmul",
        Op::Permute(..) => "permute",
        Op::Reshape(..) => "reshape",
        Op::Sum(..) => "sum",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Softmax(..) => "softmax",
        Op::Rfft2(..) => "rfft2",
        Op::Irfft2 { .. } => "irfft2",
        Op::TruncateModes { .. } => "truncate_modes",
        Op::PadModes { .. } => "pad_modes",
        Op::CircConv1d { .. } => "circ_conv1d",
        Op::Unpatchify { .. } => "unpatchify",
        Op::ComplexToReal(..) => "complex_to_real",
        Op::CrossEntropy { .. } => "cross_entropy",
    }
}

fn scale_buffer(g: &Buffer, c: f64) -> Buffer {
    match g {
        Buffer::Real(v) => Buffer::Real(v.iter().map(|x| x * c).collect()),
        Buffer::Complex(v) => Buffer::Complex(v.iter().map(|x| x * c).collect()),
    }
}

/// Gradient mask for component-wise nonlinearities: keep the cotangent
/// component where `keep` holds on the matching input component.
fn mask_like(g: &Buffer, input: &Buffer, keep: impl Fn(f64) -> bool) -> Buffer {
    match (g, input) {
        (Buffer::Real(gv), Buffer::Real(iv)) => Buffer::Real(
            gv.iter()
                .zip(iv)
                .map(|(g, &x)| if keep(x) { *g } else { 0.0 })
                .collect(),
        ),
        (Buffer::Complex(gv), Buffer::Complex(iv)) => Buffer::Complex(
            gv.iter()
                .zip(iv)
                .map(|(g, x)| {
                    Complex64::new(
                        if keep(x.re) { g.re } else { 0.0 },
                        if keep(x.im) { g.im } else { 0.0 },
                    )
                })
                .collect(),
        ),
        _ => panic!("mask dtype mismatch"),
    }
}

/// out-shaped cotangent times the (conjugated) other operand, broadcast.
fn mul_cotangent(g: &Buffer, out_shape: &[usize], other: &Tensor) -> Buffer {
    let so = broadcast_strides(other.shape(), out_shape);
    let zeros = vec![0usize; out_shape.len()];
    match (g, other.buffer()) {
        (Buffer::Real(gv), Buffer::Real(ov)) => {
            let mut out = vec![0.0; gv.len()];
            for_each_broadcast2(out_shape, &so, &zeros, |flat, oo, _| {
                out[flat] = gv[flat] * ov[oo];
            });
            Buffer::Real(out)
        }
        (Buffer::Complex(gv), Buffer::Complex(ov)) => {
            let mut out = vec![Complex64::new(0.0, 0.0); gv.len()];
            for_each_broadcast2(out_shape, &so, &zeros, |flat, oo, _| {
                out[flat] = gv[flat] * ov[oo].conj();
            });
            Buffer::Complex(out)
        }
        _ => panic!("mul adjoint dtype mismatch"),
    }
}

fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn permute_tensor(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let in_shape = t.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut in_strides = vec![0usize; in_shape.len()];
    let mut acc = 1usize;
    for i in (0..in_shape.len()).rev() {
        in_strides[i] = acc;
        acc *= in_shape[i];
    }
    let perm_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0usize; out_shape.len()];
    let data = match t.buffer() {
        Buffer::Real(v) => {
            let mut out = vec![0.0; v.len()];
            for_each_broadcast2(&out_shape, &perm_strides, &zeros, |flat, off, _| {
                out[flat] = v[off];
            });
            Buffer::Real(out)
        }
        Buffer::Complex(v) => {
            let mut out = vec![Complex64::new(0.0, 0.0); v.len()];
            for_each_broadcast2(&out_shape, &perm_strides, &zeros, |flat, off, _| {
                out[flat] = v[off];
            });
            Buffer::Complex(out)
        }
    };
    Tensor::from_buffer(&out_shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_grad(t: Tensor, f: impl Fn(&mut Graph, Var) -> Var) -> Tensor {
        let mut g = Graph::new();
        let v = g.leaf(t.with_requires_grad(true));
        let loss = f(&mut g, v);
        let mut ps = ParamSet::new();
        let mut grads = g.backward(loss, &mut ps).unwrap();
        grads.take(v).unwrap()
    }

    #[test]
    fn linear_loss_grad_is_the_other_factor() {
        // loss = sum(w * x) => grad_w == x
        let w = Tensor::from_real(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let x = Tensor::from_real(&[3], vec![3.0, 4.0, 5.0]).unwrap();
        let gw = leaf_grad(w, |g, wv| {
            let xv = g.constant(x.clone());
            let p = g.mul(wv, xv).unwrap();
            g.sum(p).unwrap()
        });
        assert_eq!(gw.real().unwrap(), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn relu_grad_is_positive_indicator() {
        let w = Tensor::from_real(&[4], vec![-2.0, -0.5, 0.5, 3.0]).unwrap();
        let gw = leaf_grad(w, |g, wv| {
            let r = g.relu(wv).unwrap();
            g.sum(r).unwrap()
        });
        assert_eq!(gw.real().unwrap(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn relu_on_complex_acts_per_component() {
        let mut g = Graph::no_grad();
        let z = g.constant(
            Tensor::from_complex(&[1], vec![Complex64::new(-1.0, 2.0)]).unwrap(),
        );
        let r = g.relu(z).unwrap();
        assert_eq!(g.value(r).complex().unwrap()[0], Complex64::new(0.0, 2.0));
    }

    #[test]
    fn add_broadcasts_trailing_dims() {
        let mut g = Graph::no_grad();
        let a = g.constant(Tensor::from_real(&[2], vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::from_real(&[1], vec![10.0]).unwrap());
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).real().unwrap(), &[11.0, 12.0]);
    }

    #[test]
    fn backward_requires_scalar_real_loss() {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::from_real(&[2], vec![1.0, 2.0]).unwrap().with_requires_grad(true));
        let mut ps = ParamSet::new();
        assert!(matches!(
            g.backward(v, &mut ps),
            Err(Error::NotScalarLoss { .. })
        ));
    }

    #[test]
    fn backward_rejects_disconnected_loss() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(1.0));
        let mut ps = ParamSet::new();
        assert!(g.backward(c, &mut ps).is_err());
    }

    #[test]
    fn no_grad_graph_cannot_backward() {
        let mut g = Graph::no_grad();
        let c = g.leaf(Tensor::scalar(1.0).with_requires_grad(true));
        let mut ps = ParamSet::new();
        assert!(g.backward(c, &mut ps).is_err());
    }

    #[test]
    fn param_leaves_are_shared_and_grads_accumulate() {
        let mut ps = ParamSet::new();
        let w = ps.insert("w", Tensor::from_real(&[2], vec![1.0, 2.0]).unwrap());
        let mut g = Graph::new();
        let w1 = g.param(&ps, w);
        let w2 = g.param(&ps, w);
        assert_eq!(w1, w2);
        let s = g.add(w1, w2).unwrap();
        let loss = g.sum(s).unwrap();
        g.backward(loss, &mut ps).unwrap();
        let grad = ps.get(w).grad.as_ref().unwrap();
        assert_eq!(grad, &Buffer::Real(vec![2.0, 2.0]));
    }

    #[test]
    fn permute_round_trip() {
        let t = Tensor::from_real(&[2, 3, 4], (0..24).map(|i| i as f64).collect()).unwrap();
        let p = permute_tensor(&t, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        let back = permute_tensor(&p, &[1, 2, 0]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::no_grad();
        let x = g.constant(Tensor::from_real(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap());
        let y = g.softmax(x).unwrap();
        let v = g.value(y).real().unwrap();
        for r in 0..2 {
            let s: f64 = v[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_centers_and_scales() {
        let mut g = Graph::no_grad();
        let d = 8;
        let mut rng = crate::rng::StreamRng::new(5, "ln");
        let x = g.constant(Tensor::from_real(&[3, d], rng.normal_vec(3 * d, 2.0)).unwrap());
        let one = g.constant(Tensor::full_real(&[d], 1.0));
        let zero = g.constant(Tensor::zeros(Dtype::Real64, &[d]));
        let y = g.layer_norm(x, one, zero, 1e-6).unwrap();
        let v = g.value(y).real().unwrap();
        for r in 0..3 {
            let row = &v[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            assert!(mean.abs() < 1e-10, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }
}
