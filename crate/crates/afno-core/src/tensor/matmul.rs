//! Batched matrix multiplication kernels, real and complex.
//!
//! Shapes follow `[batch..., m, p] x [batch..., p, q] -> [batch..., m, q]`
//! with trailing-aligned broadcast over the batch dimensions. Each output
//! row is produced by exactly one task, so parallel and sequential runs
//! are bitwise identical.

use super::{broadcast_shape, broadcast_strides, Buffer, Complex64, Tensor};
use crate::error::{Error, Result};
use crate::parallel::for_each_row;

pub(crate) struct MatmulDims {
    pub batch: Vec<usize>,
    pub m: usize,
    pub p: usize,
    pub q: usize,
    /// flat offsets into a and b for each broadcast batch element
    pub offsets: Vec<(usize, usize)>,
}

pub(crate) fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<MatmulDims> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (m, p) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
    let (p2, q) = (b.shape()[b.rank() - 2], b.shape()[b.rank() - 1]);
    if p != p2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let batch_a = &a.shape()[..a.rank() - 2];
    let batch_b = &b.shape()[..b.rank() - 2];
    let batch = broadcast_shape(batch_a, batch_b).ok_or_else(|| Error::ShapeMismatch {
        op: "matmul",
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    })?;
    let sa = broadcast_strides(batch_a, &batch);
    let sb = broadcast_strides(batch_b, &batch);
    let n_batch: usize = batch.iter().product();
    let mut offsets = Vec::with_capacity(n_batch);
    super::for_each_broadcast2(&batch, &sa, &sb, |_, oa, ob| {
        offsets.push((oa * m * p, ob * p * q));
    });
    if batch.is_empty() {
        // for_each_broadcast2 emitted the single (0,0) entry already
        debug_assert_eq!(offsets.len(), 1);
    }
    Ok(MatmulDims {
        batch,
        m,
        p,
        q,
        offsets,
    })
}

pub(crate) fn batched_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dtype() != b.dtype() {
        return Err(Error::DtypeMismatch { op: "matmul" });
    }
    let dims = matmul_dims(a, b)?;
    let mut out_shape = dims.batch.clone();
    out_shape.push(dims.m);
    out_shape.push(dims.q);
    let (m, p, q) = (dims.m, dims.p, dims.q);
    let data = match (a.buffer(), b.buffer()) {
        (Buffer::Real(av), Buffer::Real(bv)) => {
            let mut out = vec![0.0f64; dims.offsets.len() * m * q];
            for_each_row(&mut out, q, |row_idx, row| {
                let (bi, i) = (row_idx / m, row_idx % m);
                let (oa, ob) = dims.offsets[bi];
                let a_row = &av[oa + i * p..oa + (i + 1) * p];
                for (l, &al) in a_row.iter().enumerate() {
                    let b_row = &bv[ob + l * q..ob + (l + 1) * q];
                    for (o, &bj) in row.iter_mut().zip(b_row) {
                        *o += al * bj;
                    }
                }
            });
            Buffer::Real(out)
        }
        (Buffer::Complex(av), Buffer::Complex(bv)) => {
            let mut out = vec![Complex64::new(0.0, 0.0); dims.offsets.len() * m * q];
            for_each_row(&mut out, q, |row_idx, row| {
                let (bi, i) = (row_idx / m, row_idx % m);
                let (oa, ob) = dims.offsets[bi];
                let a_row = &av[oa + i * p..oa + (i + 1) * p];
                for (l, &al) in a_row.iter().enumerate() {
                    let b_row = &bv[ob + l * q..ob + (l + 1) * q];
                    for (o, &bj) in row.iter_mut().zip(b_row) {
                        *o += al * bj;
                    }
                }
            });
            Buffer::Complex(out)
        }
        _ => unreachable!(),
    };
    Tensor::from_buffer(&out_shape, data)
}

/// Swap the last two axes and conjugate complex entries; the adjoint of a
/// matmul operand under the component-gradient convention.
pub(crate) fn conj_swap_last2(t: &Tensor) -> Tensor {
    let r = t.rank();
    assert!(r >= 2);
    let (m, p) = (t.shape()[r - 2], t.shape()[r - 1]);
    let n_batch: usize = t.shape()[..r - 2].iter().product();
    let mut shape = t.shape().to_vec();
    shape[r - 2] = p;
    shape[r - 1] = m;
    let data = match t.buffer() {
        Buffer::Real(v) => {
            let mut out = vec![0.0; v.len()];
            for bi in 0..n_batch {
                let base = bi * m * p;
                for i in 0..m {
                    for j in 0..p {
                        out[base + j * m + i] = v[base + i * p + j];
                    }
                }
            }
            Buffer::Real(out)
        }
        Buffer::Complex(v) => {
            let mut out = vec![Complex64::new(0.0, 0.0); v.len()];
            for bi in 0..n_batch {
                let base = bi * m * p;
                for i in 0..m {
                    for j in 0..p {
                        out[base + j * m + i] = v[base + i * p + j].conj();
                    }
                }
            }
            Buffer::Complex(out)
        }
    };
    Tensor::from_buffer(&shape, data).expect("conj_swap_last2")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, p: usize, q: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * q];
        for i in 0..m {
            for j in 0..q {
                let mut s = 0.0;
                for l in 0..p {
                    s += a[i * p + l] * b[l * q + j];
                }
                c[i * q + j] = s;
            }
        }
        c
    }

    #[test]
    fn identity_case() {
        let i2 = Tensor::eye(2);
        let b = Tensor::from_real(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = batched_matmul(&i2, &b).unwrap();
        assert_eq!(c.real().unwrap(), &[3.0, 4.0, 5.0, 6.0]);
        let c2 = batched_matmul(&b, &i2).unwrap();
        assert_eq!(c2.real().unwrap(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn conjugate_product() {
        let a = Tensor::from_complex(&[1, 1], vec![Complex64::new(1.0, 1.0)]).unwrap();
        let b = Tensor::from_complex(&[1, 1], vec![Complex64::new(1.0, -1.0)]).unwrap();
        let c = batched_matmul(&a, &b).unwrap();
        assert_eq!(c.complex().unwrap()[0], Complex64::new(2.0, 0.0));
    }

    #[test]
    fn random_3x4_by_4x2_matches_triple_loop_oracle() {
        let mut rng = crate::rng::StreamRng::new(42, "matmul-test");
        let av: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let bv: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let a = Tensor::from_real(&[3, 4], av.clone()).unwrap();
        let b = Tensor::from_real(&[4, 2], bv.clone()).unwrap();
        let c = batched_matmul(&a, &b).unwrap();
        let oracle = naive(&av, &bv, 3, 4, 2);
        let expected = Tensor::from_real(&[3, 2], oracle).unwrap();
        assert!(c.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn batch_broadcast_against_shared_weight() {
        let mut rng = crate::rng::StreamRng::new(1, "matmul-batch");
        let av: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.normal()).collect();
        let bv: Vec<f64> = (0..4 * 2).map(|_| rng.normal()).collect();
        let a = Tensor::from_real(&[2, 3, 4], av.clone()).unwrap();
        let b = Tensor::from_real(&[4, 2], bv.clone()).unwrap();
        let c = batched_matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2]);
        for bi in 0..2 {
            let oracle = naive(&av[bi * 12..(bi + 1) * 12], &bv, 3, 4, 2);
            for (k, &v) in oracle.iter().enumerate() {
                assert!((c.real().unwrap()[bi * 6 + k] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn inner_dim_mismatch_reports_both_shapes() {
        let a = Tensor::zeros(Dtype::Real64, &[3, 4]);
        let b = Tensor::zeros(Dtype::Real64, &[3, 2]);
        let err = batched_matmul(&a, &b).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("[3, 4]") && msg.contains("[3, 2]"), "{msg}");
    }

    use super::super::Dtype;
}
