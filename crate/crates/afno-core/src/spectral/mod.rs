//! 2D discrete Fourier transforms over token grids, a naive DFT oracle,
//! and frequency-mode truncation/padding.
//!
//! Conventions: the forward transform is unnormalized, the inverse
//! carries the 1/(h*w) factor, so `irfft2(rfft2(x)) == x` for real x.
//! Real transforms store the Hermitian half-spectrum [h, w/2+1, d].

pub mod fft;
pub mod modes;

use crate::error::{invalid, Error, Result};
use crate::tensor::{Complex64, Tensor};

/// Half-plane complex frequency tensor in real-FFT layout.
#[derive(Clone, Debug)]
pub struct Spectrum {
    /// The full spatial width the half-spectrum stands for.
    pub full_width: usize,
    /// Complex tensor of shape [h, w/2+1, d].
    pub data: Tensor,
}

impl Spectrum {
    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn half_width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }
}

/// A spectrum reduced to its kept low-frequency bins.
#[derive(Clone, Debug)]
pub struct TruncatedSpectrum {
    pub full_h: usize,
    pub full_width: usize,
    /// Physical row indices of the full layout that the reduced rows map to.
    pub rows: Vec<usize>,
    /// Number of kept half-spectrum columns (always the lowest ones).
    pub cols: usize,
    /// Complex tensor of shape [rows.len(), cols, d].
    pub data: Tensor,
}

/// Unnormalized forward transform of a real [h, w, d] tensor.
pub fn rfft2(x: &Tensor) -> Result<Spectrum> {
    if x.rank() != 3 {
        return Err(invalid("rfft2", format!("expected [h, w, d], got {:?}", x.shape())));
    }
    let (h, w, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let xv = x.real().map_err(|_| Error::DtypeMismatch { op: "rfft2" })?;
    let s = fft::rfft2_raw(xv, h, w, d);
    Ok(Spectrum {
        full_width: w,
        data: Tensor::from_complex(&[h, fft::half_width(w), d], s)?,
    })
}

/// Inverse transform with 1/(h*w) normalization; strictly real output.
pub fn irfft2(s: &Spectrum) -> Result<Tensor> {
    let t = &s.data;
    if t.rank() != 3 {
        return Err(invalid("irfft2", format!("expected [h, w/2+1, d], got {:?}", t.shape())));
    }
    let (h, wh, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if fft::half_width(s.full_width) != wh {
        return Err(invalid(
            "irfft2",
            format!("width {} inconsistent with half-spectrum width {wh}", s.full_width),
        ));
    }
    let sv = t.complex()?;
    let y = fft::irfft2_raw(sv, h, s.full_width, d);
    Tensor::from_real(&[h, s.full_width, d], y)
}

/// O((hw)^2) direct-summation DFT; the test oracle. Accepts real or
/// complex input and returns the full (not half) spectrum.
pub fn naive_dft2(x: &Tensor) -> Result<Tensor> {
    naive_transform(x, -1.0, 1.0)
}

/// Direct-summation inverse DFT with 1/(hw) normalization.
pub fn naive_idft2(z: &Tensor) -> Result<Tensor> {
    let (h, w) = (z.shape()[0], z.shape()[1]);
    naive_transform(z, 1.0, 1.0 / (h * w) as f64)
}

fn naive_transform(x: &Tensor, sign: f64, norm: f64) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(invalid("naive_dft2", format!("expected [h, w, d], got {:?}", x.shape())));
    }
    let (h, w, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let input: Vec<Complex64> = match x.dtype() {
        crate::tensor::Dtype::Real64 => x
            .real()?
            .iter()
            .map(|&v| Complex64::new(v, 0.0))
            .collect(),
        crate::tensor::Dtype::Complex128 => x.complex()?.to_vec(),
    };
    let tau = 2.0 * std::f64::consts::PI;
    let mut out = vec![Complex64::new(0.0, 0.0); h * w * d];
    for a in 0..h {
        for b in 0..w {
            for p in 0..h {
                for q in 0..w {
                    let angle = sign
                        * tau
                        * (a as f64 * p as f64 / h as f64 + b as f64 * q as f64 / w as f64);
                    let tw = Complex64::new(angle.cos(), angle.sin());
                    for c in 0..d {
                        out[(a * w + b) * d + c] += input[(p * w + q) * d + c] * tw;
                    }
                }
            }
            for c in 0..d {
                out[(a * w + b) * d + c] *= norm;
            }
        }
    }
    Tensor::from_complex(&[h, w, d], out)
}

/// Keep the lowest ceil(frac*h) absolute row frequencies and the lowest
/// ceil(frac*(w/2+1)) columns.
pub fn truncate_modes(s: &Spectrum, keep_fraction: f64) -> Result<TruncatedSpectrum> {
    let (h, wh, d) = (s.height(), s.half_width(), s.channels());
    let rows = modes::kept_rows(h, modes::kept_count(h, keep_fraction)?);
    let cols = modes::kept_count(wh, keep_fraction)?;
    let sv = s.data.complex()?;
    let mut out = vec![Complex64::new(0.0, 0.0); rows.len() * cols * d];
    for (r, &a) in rows.iter().enumerate() {
        for b in 0..cols {
            for c in 0..d {
                out[(r * cols + b) * d + c] = sv[(a * wh + b) * d + c];
            }
        }
    }
    let data = Tensor::from_complex(&[rows.len(), cols, d], out)?;
    Ok(TruncatedSpectrum {
        full_h: h,
        full_width: s.full_width,
        rows,
        cols,
        data,
    })
}

/// Real [h, w, d] input whose spectrum has unit magnitude in every bin
/// (random phases, Hermitian-consistent by construction), rescaled into
/// [-1, 1]. Finite-difference audits use it so that no spectral gradient
/// component degenerates to the floating-point noise floor.
pub fn flat_spectrum_input(h: usize, w: usize, d: usize, seed: u64) -> Result<Tensor> {
    let wh = fft::half_width(w);
    let mut rng = crate::rng::StreamRng::new(seed, "flat-input");
    let mut spec = vec![Complex64::new(0.0, 0.0); h * wh * d];
    for b in 0..wh {
        let self_paired = b == 0 || (w % 2 == 0 && b == w / 2);
        for a in 0..h {
            for c in 0..d {
                if !self_paired {
                    let phase = rng.uniform() * std::f64::consts::TAU;
                    spec[(a * wh + b) * d + c] = Complex64::new(phase.cos(), phase.sin());
                } else {
                    let am = (h - a) % h;
                    if am == a {
                        let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                        spec[(a * wh + b) * d + c] = Complex64::new(sign, 0.0);
                    } else if a < am {
                        let phase = rng.uniform() * std::f64::consts::TAU;
                        let z = Complex64::new(phase.cos(), phase.sin());
                        spec[(a * wh + b) * d + c] = z;
                        spec[(am * wh + b) * d + c] = z.conj();
                    }
                }
            }
        }
    }
    let x = irfft2(&Spectrum {
        full_width: w,
        data: Tensor::from_complex(&[h, wh, d], spec)?,
    })?;
    let m = x.real()?.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let scaled: Vec<f64> = x.real()?.iter().map(|v| v / m).collect();
    Tensor::from_real(&[h, w, d], scaled)
}

/// Zero-fill a truncated spectrum back to the full [h, w/2+1, d] layout;
/// the identity on kept bins.
pub fn pad_modes(t: &TruncatedSpectrum) -> Result<Spectrum> {
    let d = t.data.shape()[2];
    let wh = fft::half_width(t.full_width);
    let sv = t.data.complex()?;
    let mut out = vec![Complex64::new(0.0, 0.0); t.full_h * wh * d];
    for (r, &a) in t.rows.iter().enumerate() {
        for b in 0..t.cols {
            for c in 0..d {
                out[(a * wh + b) * d + c] = sv[(r * t.cols + b) * d + c];
            }
        }
    }
    Ok(Spectrum {
        full_width: t.full_width,
        data: Tensor::from_complex(&[t.full_h, wh, d], out)?,
    })
}
