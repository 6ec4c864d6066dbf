//! Raw 2D transform kernels on channel-last buffers.
//!
//! The 1D complex FFTs come from rustfft; everything above them (line
//! batching, Hermitian half-spectrum layout, mirroring, normalization,
//! adjoints) is defined here. Correctness is pinned by the naive DFT
//! oracle in the parent module, not by the FFT algorithm.

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};
use std::sync::{Arc, Mutex, OnceLock};

use crate::parallel::for_each_row;

fn plan(n: usize, dir: FftDirection) -> Arc<dyn Fft<f64>> {
    static PLANNER: OnceLock<Mutex<FftPlanner<f64>>> = OnceLock::new();
    let mut planner = PLANNER
        .get_or_init(|| Mutex::new(FftPlanner::new()))
        .lock()
        .expect("fft planner lock");
    planner.plan_fft(n, dir)
}

/// Half-spectrum width for a given full width.
pub fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// Transform `lines` rows of length `len`, gathered from `src` at
/// `start + k*stride` per line, writing back through `dst_index`.
fn fft_lines(
    src: &[Complex64],
    dst: &mut [Complex64],
    line_starts: &[(usize, usize)], // (src_start, dst_start)
    src_stride: usize,
    dst_stride: usize,
    len: usize,
    dir: FftDirection,
) {
    let fft = plan(len, dir);
    let mut gathered = vec![Complex64::new(0.0, 0.0); line_starts.len() * len];
    for (li, &(s, _)) in line_starts.iter().enumerate() {
        for k in 0..len {
            gathered[li * len + k] = src[s + k * src_stride];
        }
    }
    for_each_row(&mut gathered, len, |_, line| {
        let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        fft.process_with_scratch(line, &mut scratch);
    });
    for (li, &(_, d)) in line_starts.iter().enumerate() {
        for k in 0..len {
            dst[d + k * dst_stride] = gathered[li * len + k];
        }
    }
}

/// In-place variant: gather from `buf`, transform, scatter back to the
/// same offsets. Avoids cloning the source array.
fn fft_lines_inplace(
    buf: &mut [Complex64],
    line_starts: &[usize],
    stride: usize,
    len: usize,
    dir: FftDirection,
) {
    let fft = plan(len, dir);
    let mut gathered = vec![Complex64::new(0.0, 0.0); line_starts.len() * len];
    for (li, &s) in line_starts.iter().enumerate() {
        for k in 0..len {
            gathered[li * len + k] = buf[s + k * stride];
        }
    }
    for_each_row(&mut gathered, len, |_, line| {
        let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        fft.process_with_scratch(line, &mut scratch);
    });
    for (li, &s) in line_starts.iter().enumerate() {
        for k in 0..len {
            buf[s + k * stride] = gathered[li * len + k];
        }
    }
}

/// Unnormalized forward transform of a real [h, w, d] buffer onto the
/// Hermitian half-spectrum [h, w/2+1, d].
pub fn rfft2_raw(x: &[f64], h: usize, w: usize, d: usize) -> Vec<Complex64> {
    let work: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    full_to_half(work, h, w, d, FftDirection::Forward)
}

/// Same as `rfft2_raw` but starting from a complex buffer. Used by the
/// adjoint of `irfft2` and by complex-input forward paths.
fn full_to_half(mut work: Vec<Complex64>, h: usize, w: usize, d: usize, dir: FftDirection) -> Vec<Complex64> {
    let wh = half_width(w);
    // width-axis lines: one per (row, channel), stride d
    let starts: Vec<usize> = (0..h * d)
        .map(|i| {
            let (r, c) = (i / d, i % d);
            r * w * d + c
        })
        .collect();
    fft_lines_inplace(&mut work, &starts, d, w, dir);
    // height-axis lines: only the kept columns, one per (col, channel)
    let mut out = vec![Complex64::new(0.0, 0.0); h * wh * d];
    let starts2: Vec<(usize, usize)> = (0..wh * d)
        .map(|i| {
            let (b, c) = (i / d, i % d);
            (b * d + c, b * d + c)
        })
        .collect();
    fft_lines(&work, &mut out, &starts2, w * d, wh * d, h, dir);
    out
}

/// Mirror a half-spectrum [h, wh, d] into the full [h, w, d] layout using
/// Hermitian symmetry. Self-paired columns (0 and w/2 for even w) are
/// symmetrized so the synthesis below is real to machine precision.
pub fn mirror_half_to_full(s: &[Complex64], h: usize, w: usize, d: usize) -> Vec<Complex64> {
    let wh = half_width(w);
    let mut full = vec![Complex64::new(0.0, 0.0); h * w * d];
    let self_paired = |b: usize| b == 0 || (w % 2 == 0 && b == w / 2);
    for a in 0..h {
        let am = (h - a) % h;
        for b in 0..wh {
            for c in 0..d {
                let v = s[(a * wh + b) * d + c];
                full[(a * w + b) * d + c] = if self_paired(b) {
                    0.5 * (v + s[(am * wh + b) * d + c].conj())
                } else {
                    v
                };
            }
        }
        for b in wh..w {
            let bm = w - b;
            for c in 0..d {
                full[(a * w + b) * d + c] = s[(am * wh + bm) * d + c].conj();
            }
        }
    }
    full
}

/// Full complex 2D transform in place over [h, w, d].
pub fn c2c_2d(buf: &mut [Complex64], h: usize, w: usize, d: usize, dir: FftDirection) {
    let starts: Vec<usize> = (0..h * d)
        .map(|i| {
            let (r, c) = (i / d, i % d);
            r * w * d + c
        })
        .collect();
    fft_lines_inplace(buf, &starts, d, w, dir);
    let starts2: Vec<usize> = (0..w * d)
        .map(|i| {
            let (b, c) = (i / d, i % d);
            b * d + c
        })
        .collect();
    fft_lines_inplace(buf, &starts2, w * d, h, dir);
}

/// Inverse transform of a Hermitian half-spectrum with 1/(h*w)
/// normalization. The imaginary residue after Hermitian symmetrization is
/// floating-point noise; debug builds assert it stays below 1e-10.
pub fn irfft2_raw(s: &[Complex64], h: usize, w: usize, d: usize) -> Vec<f64> {
    let mut full = mirror_half_to_full(s, h, w, d);
    c2c_2d(&mut full, h, w, d, FftDirection::Inverse);
    let norm = 1.0 / (h * w) as f64;
    #[cfg(debug_assertions)]
    {
        let max_im = full.iter().map(|z| (z.im * norm).abs()).fold(0.0, f64::max);
        debug_assert!(
            max_im < 1e-10,
            "irfft2 imaginary residue {max_im:e} exceeds 1e-10"
        );
    }
    full.iter().map(|z| z.re * norm).collect()
}

/// Adjoint of `rfft2_raw`: synthesis of the half-spectrum cotangent over
/// the stored bins only (no Hermitian mirroring), real part taken.
pub fn rfft2_adjoint_raw(gs: &[Complex64], h: usize, w: usize, d: usize) -> Vec<f64> {
    let wh = half_width(w);
    let mut full = vec![Complex64::new(0.0, 0.0); h * w * d];
    for a in 0..h {
        for b in 0..wh {
            for c in 0..d {
                full[(a * w + b) * d + c] = gs[(a * wh + b) * d + c];
            }
        }
    }
    c2c_2d(&mut full, h, w, d, FftDirection::Inverse);
    full.iter().map(|z| z.re).collect()
}

/// Adjoint of `irfft2_raw`: a forward transform of the real cotangent,
/// scaled by c_b/(h*w) where c_b is 1 on self-paired columns and 2
/// elsewhere (the mirrored columns each appear twice in the synthesis).
pub fn irfft2_adjoint_raw(gy: &[f64], h: usize, w: usize, d: usize) -> Vec<Complex64> {
    let wh = half_width(w);
    let mut gs = rfft2_raw(gy, h, w, d);
    let norm = 1.0 / (h * w) as f64;
    let self_paired = |b: usize| b == 0 || (w % 2 == 0 && b == w / 2);
    for a in 0..h {
        for b in 0..wh {
            let cb = if self_paired(b) { 1.0 } else { 2.0 };
            for c in 0..d {
                gs[(a * wh + b) * d + c] *= cb * norm;
            }
        }
    }
    gs
}
