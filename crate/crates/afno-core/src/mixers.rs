//! The four token mixers: self-attention, GFN (diagonal spectral gating),
//! FNO (per-mode full channel mixing), and AFNO (block-diagonal shared MLP
//! with soft-shrinkage). Each maps [h, w, d] -> [h, w, d].

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::rng::StreamRng;
use crate::spectral::fft;
use crate::tensor::{Complex64, Graph, ParamId, ParamSet, Tensor, Var};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum MixerKind {
    Sa,
    Gfn,
    Fno,
    Afno,
}

impl fmt::Display for MixerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MixerKind::Sa => "sa",
            MixerKind::Gfn => "gfn",
            MixerKind::Fno => "fno",
            MixerKind::Afno => "afno",
        };
        f.write_str(s)
    }
}

impl FromStr for MixerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<MixerKind> {
        match s {
            "sa" => Ok(MixerKind::Sa),
            "gfn" => Ok(MixerKind::Gfn),
            "fno" => Ok(MixerKind::Fno),
            "afno" => Ok(MixerKind::Afno),
            other => Err(invalid("mixer", format!("unknown mixer kind '{other}'"))),
        }
    }
}

/// Residual path added after the spectral branch of AFNO.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BiasMode {
    IdentityResidual,
    Conv1dResidual,
}

/// Nonlinearity inside the block MLP. `Identity` exists for the linear
/// regime used by equivariance and resolution diagnostics.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Activation {
    Relu,
    Identity,
}

// ---------------------------------------------------------------------
// parameter sets
// ---------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub num_heads: usize,
}

impl AttentionParams {
    pub fn init(
        ps: &mut ParamSet,
        prefix: &str,
        d: usize,
        num_heads: usize,
        rng: &mut StreamRng,
    ) -> Result<AttentionParams> {
        if num_heads == 0 || d % num_heads != 0 {
            return Err(invalid(
                "self_attention",
                format!("num_heads {num_heads} must divide hidden size {d}"),
            ));
        }
        let mut mat = |name: &str, rng: &mut StreamRng| {
            let t = Tensor::from_real(&[d, d], rng.normal_vec(d * d, 0.02)).unwrap();
            ps.insert(&format!("{prefix}.{name}"), t)
        };
        Ok(AttentionParams {
            w_q: mat("w_q", rng),
            w_k: mat("w_k", rng),
            w_v: mat("w_v", rng),
            num_heads,
        })
    }
}

#[derive(Clone, Debug)]
pub struct GfnParams {
    pub filter: ParamId,
    /// Token-grid height the filter was built for.
    pub grid_h: usize,
    /// Full token-grid width the filter was built for.
    pub grid_w: usize,
}

impl GfnParams {
    /// Filter initialized near the identity gate (1 + small noise).
    pub fn init(
        ps: &mut ParamSet,
        prefix: &str,
        grid_h: usize,
        grid_w: usize,
        d: usize,
        rng: &mut StreamRng,
    ) -> GfnParams {
        let wh = fft::half_width(grid_w);
        let vals: Vec<Complex64> = (0..grid_h * wh * d)
            .map(|_| Complex64::new(1.0 + rng.normal() * 0.01, rng.normal() * 0.01))
            .collect();
        let t = Tensor::from_complex(&[grid_h, wh, d], vals).unwrap();
        GfnParams {
            filter: ps.insert(&format!("{prefix}.filter"), t),
            grid_h,
            grid_w,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FnoParams {
    pub weight: ParamId,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl FnoParams {
    pub fn init(
        ps: &mut ParamSet,
        prefix: &str,
        grid_h: usize,
        grid_w: usize,
        d: usize,
        rng: &mut StreamRng,
    ) -> FnoParams {
        let wh = fft::half_width(grid_w);
        let std = 0.02 / (d as f64).sqrt();
        let vals: Vec<Complex64> = (0..grid_h * wh * d * d)
            .map(|_| Complex64::new(rng.normal() * std, rng.normal() * std))
            .collect();
        let t = Tensor::from_complex(&[grid_h, wh, d, d], vals).unwrap();
        FnoParams {
            weight: ps.insert(&format!("{prefix}.w"), t),
            grid_h,
            grid_w,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AfnoParams {
    pub w1: ParamId,
    pub w2: ParamId,
    pub b1: ParamId,
    pub b2: ParamId,
    /// Block count k; must divide the channel size.
    pub blocks: usize,
    /// Soft-shrinkage threshold.
    pub lambda: f64,
    /// Fraction of low-frequency modes kept per axis; 1.0 disables
    /// truncation.
    pub keep_fraction: f64,
    pub bias_mode: BiasMode,
    pub activation: Activation,
    /// Depthwise conv taps [3, d]; present in Conv1dResidual mode.
    pub conv_bias: Option<ParamId>,
}

impl AfnoParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        ps: &mut ParamSet,
        prefix: &str,
        d: usize,
        blocks: usize,
        lambda: f64,
        keep_fraction: f64,
        bias_mode: BiasMode,
        rng: &mut StreamRng,
    ) -> Result<AfnoParams> {
        if blocks == 0 || d % blocks != 0 {
            return Err(invalid(
                "afno",
                format!("block count {blocks} must divide hidden size {d}"),
            ));
        }
        if lambda < 0.0 {
            return Err(invalid("afno", "lambda must be >= 0"));
        }
        if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
            return Err(invalid("afno", "keep_fraction must be in (0, 1]"));
        }
        let dk = d / blocks;
        let std = 0.02 / (dk as f64).sqrt();
        let mut cmat = |name: &str, shape: Vec<usize>, std: f64, rng: &mut StreamRng| {
            let n: usize = shape.iter().product();
            let vals: Vec<Complex64> = (0..n)
                .map(|_| Complex64::new(rng.normal() * std, rng.normal() * std))
                .collect();
            ps.insert(
                &format!("{prefix}.{name}"),
                Tensor::from_complex(&shape, vals).unwrap(),
            )
        };
        let w1 = cmat("w1", vec![blocks, dk, dk], std, rng);
        let w2 = cmat("w2", vec![blocks, dk, dk], std, rng);
        let b1 = cmat("b1", vec![blocks, dk], 0.0, rng);
        let b2 = cmat("b2", vec![blocks, dk], 0.0, rng);
        let conv_bias = match bias_mode {
            BiasMode::IdentityResidual => None,
            BiasMode::Conv1dResidual => {
                // identity-like at init: center tap 1, outer taps 0
                let mut taps = vec![0.0; 3 * d];
                taps[d..2 * d].iter_mut().for_each(|v| *v = 1.0);
                Some(ps.insert(
                    &format!("{prefix}.conv_bias"),
                    Tensor::from_real(&[3, d], taps).unwrap(),
                ))
            }
        };
        Ok(AfnoParams {
            w1,
            w2,
            b1,
            b2,
            blocks,
            lambda,
            keep_fraction,
            bias_mode,
            activation: Activation::Relu,
            conv_bias,
        })
    }

    pub fn channel_size(&self, ps: &ParamSet) -> usize {
        let s = ps.get(self.w1).shape();
        s[0] * s[1]
    }
}

/// Tagged union over the four mixer parameter sets.
#[derive(Clone, Debug)]
pub enum MixerParams {
    Sa(AttentionParams),
    Gfn(GfnParams),
    Fno(FnoParams),
    Afno(AfnoParams),
}

impl MixerParams {
    pub fn kind(&self) -> MixerKind {
        match self {
            MixerParams::Sa(_) => MixerKind::Sa,
            MixerParams::Gfn(_) => MixerKind::Gfn,
            MixerParams::Fno(_) => MixerKind::Fno,
            MixerParams::Afno(_) => MixerKind::Afno,
        }
    }
}

// ---------------------------------------------------------------------
// forwards
// ---------------------------------------------------------------------

fn grid_dims(g: &Graph, x: Var) -> Result<(usize, usize, usize)> {
    let s = g.value(x).shape();
    if s.len() != 3 {
        return Err(invalid("mixer", format!("expected [h, w, d] input, got {s:?}")));
    }
    Ok((s[0], s[1], s[2]))
}

/// Multi-head scaled dot-product attention over the flattened token
/// sequence. With one head this is exactly
/// softmax(X Wq (X Wk)^T / sqrt(d)) X Wv.
pub fn self_attention(
    g: &mut Graph,
    ps: &ParamSet,
    x: Var,
    p: &AttentionParams,
) -> Result<Var> {
    let (h, w, d) = grid_dims(g, x)?;
    if p.num_heads == 0 || d % p.num_heads != 0 {
        return Err(invalid(
            "self_attention",
            format!("num_heads {} must divide hidden size {d}", p.num_heads),
        ));
    }
    let n = h * w;
    let dh = d / p.num_heads;
    let tokens = g.reshape(x, &[n, d])?;
    g.retain(tokens); // feeds all three projections
    let wq = g.param(ps, p.w_q);
    let wk = g.param(ps, p.w_k);
    let wv = g.param(ps, p.w_v);
    let q = g.matmul(tokens, wq)?;
    let k = g.matmul(tokens, wk)?;
    let v = g.matmul(tokens, wv)?;
    // scale queries up front so the n x n score tensor is built once
    let q = g.scale(q, 1.0 / (dh as f64).sqrt())?;
    let heads = p.num_heads;
    let split = |g: &mut Graph, t: Var| -> Result<Var> {
        let t = g.reshape(t, &[n, heads, dh])?;
        g.permute(t, &[1, 0, 2])
    };
    let qh = split(g, q)?;
    let kh = split(g, k)?;
    let vh = split(g, v)?;
    let kt = g.permute(kh, &[0, 2, 1])?;
    let scores = g.matmul(qh, kt)?;
    let attn = g.softmax(scores)?;
    let mixed = g.matmul(attn, vh)?;
    let merged = g.permute(mixed, &[1, 0, 2])?;
    let merged = g.reshape(merged, &[n, d])?;
    g.reshape(merged, &[h, w, d])
}

/// Frequency gating: irfft2(rfft2(x) * filter).
pub fn gfn_mix(g: &mut Graph, ps: &ParamSet, x: Var, p: &GfnParams) -> Result<Var> {
    let (h, w, _d) = grid_dims(g, x)?;
    if h != p.grid_h || w != p.grid_w {
        return Err(Error::ShapeMismatch {
            op: "gfn_mix",
            left: vec![h, w],
            right: vec![p.grid_h, p.grid_w],
        });
    }
    let filter = g.param(ps, p.filter);
    let s = g.rfft2(x)?;
    let gated = g.mul(s, filter)?;
    g.irfft2(gated, w)
}

/// Bilinear interpolation of the filter (real and imaginary parts
/// independently) onto a new token grid. Replaces the stored filter in
/// place so checkpoints keep one entry per layer.
pub fn gfn_filter_resize(
    ps: &mut ParamSet,
    p: &GfnParams,
    new_h: usize,
    new_w: usize,
) -> Result<GfnParams> {
    if new_h < 2 || new_w < 2 {
        return Err(invalid(
            "gfn_filter_resize",
            format!("degenerate target size {new_h}x{new_w}"),
        ));
    }
    let old = ps.get(p.filter);
    let (h, wh, d) = (old.shape()[0], old.shape()[1], old.shape()[2]);
    let new_wh = fft::half_width(new_w);
    let resized = bilinear_resize(old.complex()?, h, wh, d, new_h, new_wh);
    ps.replace(
        p.filter,
        Tensor::from_complex(&[new_h, new_wh, d], resized)?,
    );
    Ok(GfnParams {
        filter: p.filter,
        grid_h: new_h,
        grid_w: new_w,
    })
}

/// Bilinear resampling on a [h, w, d] complex grid with corner-aligned
/// coordinates; the midpoint of a 2x2 cell is the mean of its corners.
pub fn bilinear_resize(
    src: &[Complex64],
    h: usize,
    w: usize,
    d: usize,
    nh: usize,
    nw: usize,
) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); nh * nw * d];
    let map = |i: usize, n_dst: usize, n_src: usize| -> f64 {
        if n_dst <= 1 || n_src <= 1 {
            0.0
        } else {
            i as f64 * (n_src - 1) as f64 / (n_dst - 1) as f64
        }
    };
    for i in 0..nh {
        let fi = map(i, nh, h);
        let i0 = fi.floor() as usize;
        let i1 = (i0 + 1).min(h.saturating_sub(1));
        let ti = fi - i0 as f64;
        for j in 0..nw {
            let fj = map(j, nw, w);
            let j0 = fj.floor() as usize;
            let j1 = (j0 + 1).min(w.saturating_sub(1));
            let tj = fj - j0 as f64;
            for c in 0..d {
                let v00 = src[(i0 * w + j0) * d + c];
                let v01 = src[(i0 * w + j1) * d + c];
                let v10 = src[(i1 * w + j0) * d + c];
                let v11 = src[(i1 * w + j1) * d + c];
                let top = v00 * (1.0 - tj) + v01 * tj;
                let bot = v10 * (1.0 - tj) + v11 * tj;
                out[(i * nw + j) * d + c] = top * (1.0 - ti) + bot * ti;
            }
        }
    }
    out
}

/// Per-mode full channel mixing: z~_{m,n} = W_{m,n} z_{m,n} (matrix times
/// column vector), then the inverse transform.
pub fn fno_mix(g: &mut Graph, ps: &ParamSet, x: Var, p: &FnoParams) -> Result<Var> {
    let (h, w, d) = grid_dims(g, x)?;
    if h != p.grid_h || w != p.grid_w {
        return Err(Error::ShapeMismatch {
            op: "fno_mix",
            left: vec![h, w],
            right: vec![p.grid_h, p.grid_w],
        });
    }
    let wt = ps.get(p.weight).shape().to_vec();
    let wh = fft::half_width(w);
    if wt != [h, wh, d, d] {
        return Err(Error::ShapeMismatch {
            op: "fno_mix",
            left: wt,
            right: vec![h, wh, d, d],
        });
    }
    let weight = g.param(ps, p.weight);
    let s = g.rfft2(x)?;
    let cols = g.reshape(s, &[h * wh, d, 1])?;
    let wmat = g.reshape(weight, &[h * wh, d, d])?;
    let mixed = g.matmul(wmat, cols)?;
    let mixed = g.reshape(mixed, &[h, wh, d])?;
    g.irfft2(mixed, w)
}

/// Component-wise soft thresholding as a graph operation.
pub fn soft_shrink(g: &mut Graph, z: Var, lambda: f64) -> Result<Var> {
    g.soft_shrink(z, lambda)
}

/// Two-layer complex MLP applied per block, identical weights for every
/// mode: MatMul(x, W1) + b1 -> ReLU -> MatMul(x, W2) + b2.
pub fn block_mlp(g: &mut Graph, ps: &ParamSet, z: Var, p: &AfnoParams) -> Result<Var> {
    let zs = g.value(z).shape().to_vec();
    if zs.len() != 3 {
        return Err(invalid("block_mlp", format!("expected [modes, k, d/k], got {zs:?}")));
    }
    let (modes, k, dk) = (zs[0], zs[1], zs[2]);
    let w1s = ps.get(p.w1).shape().to_vec();
    if w1s != [k, dk, dk] {
        return Err(Error::ShapeMismatch {
            op: "block_mlp",
            left: zs,
            right: w1s,
        });
    }
    let w1 = g.param(ps, p.w1);
    let w2 = g.param(ps, p.w2);
    let b1 = g.param(ps, p.b1);
    let b2 = g.param(ps, p.b2);
    let b1r = g.reshape(b1, &[k, 1, dk])?;
    let b2r = g.reshape(b2, &[k, 1, dk])?;
    // rows stay in their natural [modes, k, ...] layout; the per-block
    // weights broadcast over the mode batch axis
    let zr = g.reshape(z, &[modes, k, 1, dk])?;
    let h1 = g.matmul(zr, w1)?;
    let h1 = g.add(h1, b1r)?;
    let a = match p.activation {
        Activation::Relu => g.relu(h1)?,
        Activation::Identity => h1,
    };
    let h2 = g.matmul(a, w2)?;
    let h2 = g.add(h2, b2r)?;
    let back = g.reshape(h2, &[modes, k, dk])?;
    debug_assert_eq!(g.value(back).shape(), &[modes, k, dk]);
    Ok(back)
}

/// Where each reduced spectrum bin of one AFNO layer sits in the full
/// [h, w/2+1] layout, plus the post-shrink spectrum itself. Consumed by
/// the sparsity statistics.
#[derive(Clone, Debug)]
pub struct AfnoProbe {
    /// Post-shrink spectrum, shape [rows.len(), cols, d].
    pub post_shrink: Var,
    /// Full-layout row index of each reduced row.
    pub rows: Vec<usize>,
    /// Number of kept half-spectrum columns.
    pub cols: usize,
    pub full_h: usize,
    pub full_width: usize,
}

/// The full AFNO pipeline: transform, optional hard truncation, shared
/// block MLP, soft shrinkage, inverse transform, residual.
pub fn afno_mix(g: &mut Graph, ps: &ParamSet, x: Var, p: &AfnoParams) -> Result<Var> {
    afno_mix_probed(g, ps, x, p).map(|(v, _)| v)
}

/// `afno_mix` that also hands back the post-shrink spectrum location.
pub fn afno_mix_probed(
    g: &mut Graph,
    ps: &ParamSet,
    x: Var,
    p: &AfnoParams,
) -> Result<(Var, AfnoProbe)> {
    let (h, w, d) = grid_dims(g, x)?;
    let k = p.blocks;
    if k == 0 || d % k != 0 {
        return Err(invalid(
            "afno_mix",
            format!("block count {k} must divide hidden size {d}"),
        ));
    }
    let dk = d / k;
    let bias = match p.bias_mode {
        BiasMode::IdentityResidual => x,
        BiasMode::Conv1dResidual => {
            let taps = p
                .conv_bias
                .ok_or_else(|| invalid("afno_mix", "conv1d residual needs conv_bias taps"))?;
            let tv = g.param(ps, taps);
            g.circ_conv1d(x, tv)?
        }
    };
    let s = g.rfft2(x)?;
    let truncated = p.keep_fraction < 1.0;
    let spec = if truncated {
        g.truncate_modes(s, p.keep_fraction)?
    } else {
        s
    };
    let ss = g.value(spec).shape().to_vec();
    let modes = ss[0] * ss[1];
    let z = g.reshape(spec, &[modes, k, dk])?;
    let z = block_mlp(g, ps, z, p)?;
    let z = g.reshape(z, &[ss[0], ss[1], d])?;
    let z = g.soft_shrink(z, p.lambda)?;
    let rows = if truncated {
        crate::spectral::modes::rows_for_reduced(h, ss[0])?
    } else {
        (0..h).collect()
    };
    let probe = AfnoProbe {
        post_shrink: z,
        rows,
        cols: ss[1],
        full_h: h,
        full_width: w,
    };
    let z = if truncated { g.pad_modes(z, h, w)? } else { z };
    let y = g.irfft2(z, w)?;
    let out = g.add(y, bias)?;
    Ok((out, probe))
}

/// Parameter sets sized for finite-difference audits: magnitudes chosen
/// so every branch is active (attention logits spread, soft shrinkage
/// passing some coefficients and zeroing others) and no gradient
/// component sits at the floating-point noise floor of the check.
pub fn audit_mixer(
    ps: &mut ParamSet,
    kind: MixerKind,
    prefix: &str,
    grid_h: usize,
    grid_w: usize,
    d: usize,
    rng: &mut StreamRng,
) -> Result<MixerParams> {
    Ok(match kind {
        MixerKind::Sa => {
            let p = AttentionParams::init(ps, prefix, d, 2, rng)?;
            for id in [p.w_q, p.w_k, p.w_v] {
                let vals = rng.normal_vec(d * d, 0.3);
                ps.replace(id, Tensor::from_real(&[d, d], vals)?);
            }
            MixerParams::Sa(p)
        }
        MixerKind::Gfn => MixerParams::Gfn(GfnParams::init(ps, prefix, grid_h, grid_w, d, rng)),
        MixerKind::Fno => MixerParams::Fno(FnoParams::init(ps, prefix, grid_h, grid_w, d, rng)),
        MixerKind::Afno => {
            let k = if d % 4 == 0 { 4 } else { 1 };
            let p = AfnoParams::init(ps, prefix, d, k, 0.05, 1.0, BiasMode::IdentityResidual, rng)?;
            let dk = d / k;
            let cplx = |n: usize, std: f64, rng: &mut StreamRng| -> Vec<Complex64> {
                (0..n)
                    .map(|_| Complex64::new(rng.normal() * std, rng.normal() * std))
                    .collect()
            };
            ps.replace(p.w1, Tensor::from_complex(&[k, dk, dk], cplx(k * dk * dk, 0.5, rng))?);
            ps.replace(p.w2, Tensor::from_complex(&[k, dk, dk], cplx(k * dk * dk, 0.5, rng))?);
            ps.replace(p.b1, Tensor::from_complex(&[k, dk], cplx(k * dk, 0.3, rng))?);
            ps.replace(p.b2, Tensor::from_complex(&[k, dk], cplx(k * dk, 0.3, rng))?);
            MixerParams::Afno(p)
        }
    })
}

/// Dispatch a mixer forward by parameter kind.
pub fn mix(g: &mut Graph, ps: &ParamSet, x: Var, p: &MixerParams) -> Result<Var> {
    match p {
        MixerParams::Sa(p) => self_attention(g, ps, x, p),
        MixerParams::Gfn(p) => gfn_mix(g, ps, x, p),
        MixerParams::Fno(p) => fno_mix(g, ps, x, p),
        MixerParams::Afno(p) => afno_mix(g, ps, x, p),
    }
}

/// Evaluation-only convenience: run a mixer on a plain tensor. Uses the
/// buffer-releasing evaluation mode, so intermediate activations never
/// pile up.
pub fn mix_tensor(ps: &ParamSet, p: &MixerParams, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::eval();
    let xv = g.constant(x.clone());
    let y = mix(&mut g, ps, xv, p)?;
    Ok(g.value(y).clone())
}
