//! Toy ViT-style transformer: patch embedding, pre-norm blocks
//! (mixer + channel MLP), and task heads.

use std::path::Path;

use crate::error::{invalid, Result};
use crate::mixers::{
    afno_mix_probed, mix, AfnoParams, AfnoProbe, AttentionParams, BiasMode, FnoParams, GfnParams,
    MixerKind, MixerParams,
};
use crate::rng::StreamRng;
use crate::tensor::{io, Graph, ParamId, ParamSet, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, PartialEq, Debug)]
pub enum HeadKind {
    Reconstruction,
    Classification(usize),
    None,
}

/// Backbone hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub hidden: usize,
    pub mixer_kind: MixerKind,
    /// Attention heads (SA only).
    pub num_heads: usize,
    /// AFNO block count k.
    pub blocks_k: usize,
    pub lambda: f64,
    pub keep_fraction: f64,
    pub mlp_ratio: f64,
    pub bias_mode: BiasMode,
    pub head: HeadKind,
}

impl ModelConfig {
    pub fn grid_h(&self) -> usize {
        self.image_h / self.patch_size
    }

    pub fn grid_w(&self) -> usize {
        self.image_w / self.patch_size
    }

    pub fn mlp_width(&self) -> usize {
        ((self.mlp_ratio * self.hidden as f64).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || self.image_h % self.patch_size != 0
            || self.image_w % self.patch_size != 0
        {
            return Err(invalid(
                "model_config",
                format!(
                    "patch size {} must divide image {}x{}",
                    self.patch_size, self.image_h, self.image_w
                ),
            ));
        }
        if self.hidden == 0 {
            return Err(invalid("model_config", "hidden size must be positive"));
        }
        if self.mixer_kind == MixerKind::Afno
            && (self.blocks_k == 0 || self.hidden % self.blocks_k != 0)
        {
            return Err(invalid(
                "model_config",
                format!("block count {} must divide hidden {}", self.blocks_k, self.hidden),
            ));
        }
        if self.mixer_kind == MixerKind::Sa
            && (self.num_heads == 0 || self.hidden % self.num_heads != 0)
        {
            return Err(invalid(
                "model_config",
                format!("num_heads {} must divide hidden {}", self.num_heads, self.hidden),
            ));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_h: 32,
            image_w: 32,
            channels: 3,
            patch_size: 4,
            depth: 2,
            hidden: 32,
            mixer_kind: MixerKind::Afno,
            num_heads: 4,
            blocks_k: 4,
            lambda: 0.01,
            keep_fraction: 1.0,
            mlp_ratio: 4.0,
            bias_mode: BiasMode::IdentityResidual,
            head: HeadKind::Reconstruction,
        }
    }
}

/// One pre-norm transformer block: x + mixer(norm1(x)), then
/// x' + mlp(norm2(x')).
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1_scale: ParamId,
    pub norm1_shift: ParamId,
    pub mixer: MixerParams,
    pub norm2_scale: ParamId,
    pub norm2_shift: ParamId,
    pub fc1: ParamId,
    pub fc1_bias: ParamId,
    pub fc2: ParamId,
    pub fc2_bias: ParamId,
}

#[derive(Clone, Debug)]
pub enum HeadParams {
    Reconstruction(ParamId),
    Classification(ParamId),
    None,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub patch_embed: ParamId,
    /// Learned additive positional embedding; enabled for SA (the Fourier
    /// basis already encodes position for spectral mixers).
    pub pos_embed: Option<ParamId>,
    pub blocks: Vec<TransformerBlock>,
    pub head: HeadParams,
    pub seed: u64,
}

impl Model {
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = StreamRng::new(seed, "model-init");
        let mut ps = ParamSet::new();
        let d = cfg.hidden;
        let ppc = cfg.patch_size * cfg.patch_size * cfg.channels;
        let patch_embed = ps.insert(
            "embed.proj",
            Tensor::from_real(&[ppc, d], rng.normal_vec(ppc * d, 0.02))?,
        );
        let n = cfg.grid_h() * cfg.grid_w();
        let pos_embed = if cfg.mixer_kind == MixerKind::Sa {
            Some(ps.insert(
                "embed.pos",
                Tensor::from_real(&[n, d], rng.normal_vec(n * d, 0.02))?,
            ))
        } else {
            None
        };
        let m = cfg.mlp_width();
        let mut blocks = Vec::with_capacity(cfg.depth);
        for layer in 0..cfg.depth {
            let norm1_scale =
                ps.insert(&format!("block.{layer}.norm1.scale"), Tensor::full_real(&[d], 1.0));
            let norm1_shift =
                ps.insert(&format!("block.{layer}.norm1.shift"), Tensor::full_real(&[d], 0.0));
            let mixer = match cfg.mixer_kind {
                MixerKind::Sa => MixerParams::Sa(AttentionParams::init(
                    &mut ps,
                    &format!("mixer.{layer}"),
                    d,
                    cfg.num_heads,
                    &mut rng,
                )?),
                MixerKind::Gfn => MixerParams::Gfn(GfnParams::init(
                    &mut ps,
                    &format!("mixer.{layer}"),
                    cfg.grid_h(),
                    cfg.grid_w(),
                    d,
                    &mut rng,
                )),
                MixerKind::Fno => MixerParams::Fno(FnoParams::init(
                    &mut ps,
                    &format!("mixer.{layer}"),
                    cfg.grid_h(),
                    cfg.grid_w(),
                    d,
                    &mut rng,
                )),
                MixerKind::Afno => MixerParams::Afno(AfnoParams::init(
                    &mut ps,
                    &format!("mixer.{layer}"),
                    d,
                    cfg.blocks_k,
                    cfg.lambda,
                    cfg.keep_fraction,
                    cfg.bias_mode,
                    &mut rng,
                )?),
            };
            let norm2_scale =
                ps.insert(&format!("block.{layer}.norm2.scale"), Tensor::full_real(&[d], 1.0));
            let norm2_shift =
                ps.insert(&format!("block.{layer}.norm2.shift"), Tensor::full_real(&[d], 0.0));
            let fc1 = ps.insert(
                &format!("block.{layer}.mlp.fc1"),
                Tensor::from_real(&[d, m], rng.normal_vec(d * m, 0.02))?,
            );
            let fc1_bias = ps.insert(
                &format!("block.{layer}.mlp.fc1_bias"),
                Tensor::full_real(&[m], 0.0),
            );
            let fc2 = ps.insert(
                &format!("block.{layer}.mlp.fc2"),
                Tensor::from_real(&[m, d], rng.normal_vec(m * d, 0.02))?,
            );
            let fc2_bias = ps.insert(
                &format!("block.{layer}.mlp.fc2_bias"),
                Tensor::full_real(&[d], 0.0),
            );
            blocks.push(TransformerBlock {
                norm1_scale,
                norm1_shift,
                mixer,
                norm2_scale,
                norm2_shift,
                fc1,
                fc1_bias,
                fc2,
                fc2_bias,
            });
        }
        let head = match cfg.head {
            HeadKind::Reconstruction => HeadParams::Reconstruction(ps.insert(
                "head.w",
                Tensor::from_real(&[d, ppc], rng.normal_vec(d * ppc, 0.02))?,
            )),
            HeadKind::Classification(ncls) => HeadParams::Classification(ps.insert(
                "head.w",
                Tensor::from_real(&[d, ncls], rng.normal_vec(d * ncls, 0.02))?,
            )),
            HeadKind::None => HeadParams::None,
        };
        Ok(Model {
            cfg,
            params: ps,
            patch_embed,
            pos_embed,
            blocks,
            head,
            seed,
        })
    }

    /// Forward pass on one [H, W, c] image; the grid size adapts to the
    /// input, so mixers with mode-shared weights run at any resolution.
    pub fn forward(&self, g: &mut Graph, image: &Tensor) -> Result<Var> {
        self.forward_inner(g, image, None)
    }

    /// Forward pass that also collects the post-shrink spectra of every
    /// AFNO layer, for sparsity statistics.
    pub fn forward_probed(
        &self,
        g: &mut Graph,
        image: &Tensor,
        probes: &mut Vec<AfnoProbe>,
    ) -> Result<Var> {
        self.forward_inner(g, image, Some(probes))
    }

    fn forward_inner(
        &self,
        g: &mut Graph,
        image: &Tensor,
        mut probes: Option<&mut Vec<AfnoProbe>>,
    ) -> Result<Var> {
        let p = self.cfg.patch_size;
        let raw = patchify(image, p)?;
        let n = raw.shape()[0];
        let (grid_h, grid_w) = (image.shape()[0] / p, image.shape()[1] / p);
        let raw = g.constant(raw);
        let e = g.param(&self.params, self.patch_embed);
        let mut tok = g.matmul(raw, e)?;
        if let Some(pos) = self.pos_embed {
            let pv = g.param(&self.params, pos);
            if g.value(pv).shape()[0] != n {
                return Err(invalid(
                    "model_forward",
                    format!(
                        "positional embedding covers {} tokens, image yields {n}",
                        g.value(pv).shape()[0]
                    ),
                ));
            }
            tok = g.add(tok, pv)?;
        }
        let d = self.cfg.hidden;
        let mut grid = g.reshape(tok, &[grid_h, grid_w, d])?;
        for blk in &self.blocks {
            grid = block_forward(g, &self.params, grid, blk, probes.as_deref_mut())?;
        }
        match &self.head {
            HeadParams::Reconstruction(w) => {
                let flat = g.reshape(grid, &[n, d])?;
                let wv = g.param(&self.params, *w);
                let pix = g.matmul(flat, wv)?;
                g.unpatchify(pix, grid_h, grid_w, p, self.cfg.channels)
            }
            HeadParams::Classification(w) => {
                let flat = g.reshape(grid, &[n, d])?;
                let pool = g.constant(Tensor::full_real(&[1, n], 1.0 / n as f64));
                let mean = g.matmul(pool, flat)?;
                let wv = g.param(&self.params, *w);
                let logits = g.matmul(mean, wv)?;
                let ncls = g.value(logits).shape()[1];
                g.reshape(logits, &[ncls])
            }
            HeadParams::None => Ok(grid),
        }
    }

    /// Evaluation-only forward returning a plain tensor.
    pub fn forward_tensor(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let out = self.forward(&mut g, image)?;
        Ok(g.value(out).clone())
    }

    /// Resize every GFN filter to a new token grid via bilinear
    /// interpolation; spectral gating is not resolution invariant and
    /// needs this adaptation step.
    pub fn resize_gfn_filters(&mut self, new_grid_h: usize, new_grid_w: usize) -> Result<()> {
        for blk in &mut self.blocks {
            if let MixerParams::Gfn(p) = &blk.mixer {
                let resized =
                    crate::mixers::gfn_filter_resize(&mut self.params, p, new_grid_h, new_grid_w)?;
                blk.mixer = MixerParams::Gfn(resized);
            }
        }
        Ok(())
    }

    pub fn count_params(&self) -> usize {
        self.params.total_real_scalars()
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let entries: Vec<(String, &Tensor)> = self
            .params
            .entries()
            .map(|(n, t)| (n.to_string(), t))
            .collect();
        io::write_container(path, &entries)
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let entries = io::read_container(path)?;
        self.params.load_from(&entries)
    }

    /// Structured text manifest: config echo, entry names, creation seed.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        out.push_str("# model manifest\n");
        out.push_str(&format!("seed = {}\n", self.seed));
        let c = &self.cfg;
        out.push_str(&format!("model.image_h = {}\n", c.image_h));
        out.push_str(&format!("model.image_w = {}\n", c.image_w));
        out.push_str(&format!("model.channels = {}\n", c.channels));
        out.push_str(&format!("model.patch_size = {}\n", c.patch_size));
        out.push_str(&format!("model.depth = {}\n", c.depth));
        out.push_str(&format!("model.hidden = {}\n", c.hidden));
        out.push_str(&format!("model.mixer = {}\n", c.mixer_kind));
        out.push_str(&format!("model.num_heads = {}\n", c.num_heads));
        out.push_str(&format!("model.blocks = {}\n", c.blocks_k));
        out.push_str(&format!("model.lambda = {}\n", c.lambda));
        out.push_str(&format!("model.keep_fraction = {}\n", c.keep_fraction));
        out.push_str(&format!("model.mlp_ratio = {}\n", c.mlp_ratio));
        out.push_str(&format!(
            "model.bias_mode = {}\n",
            match c.bias_mode {
                BiasMode::IdentityResidual => "identity",
                BiasMode::Conv1dResidual => "conv1d",
            }
        ));
        out.push_str(&format!(
            "model.head = {}\n",
            match c.head {
                HeadKind::Reconstruction => "reconstruction".to_string(),
                HeadKind::Classification(n) => format!("classification:{n}"),
                HeadKind::None => "none".to_string(),
            }
        ));
        out.push_str(&format!("param_scalars = {}\n", self.count_params()));
        out.push_str("entries:\n");
        for (name, t) in self.params.entries() {
            out.push_str(&format!("  {name} {:?} {:?}\n", t.shape(), t.dtype()));
        }
        out
    }
}

/// Flatten each non-overlapping p x p x c patch of an [H, W, c] image into
/// a row: output [grid_h*grid_w, p*p*c], row-major over (di, dj, channel).
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    if image.rank() != 3 {
        return Err(invalid("patchify", format!("expected [H, W, c], got {:?}", image.shape())));
    }
    let (hh, ww, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if p == 0 || hh % p != 0 || ww % p != 0 {
        return Err(invalid(
            "patchify",
            format!("patch size {p} must divide image {hh}x{ww}"),
        ));
    }
    let (gh, gw) = (hh / p, ww / p);
    let iv = image.real()?;
    let mut out = vec![0.0; gh * gw * p * p * c];
    for gi in 0..gh {
        for gj in 0..gw {
            let tok = gi * gw + gj;
            for di in 0..p {
                for dj in 0..p {
                    for ch in 0..c {
                        out[tok * (p * p * c) + (di * p + dj) * c + ch] =
                            iv[((gi * p + di) * ww + gj * p + dj) * c + ch];
                    }
                }
            }
        }
    }
    Tensor::from_real(&[gh * gw, p * p * c], out)
}

/// Linear projection of flattened patches to d-dimensional tokens.
pub fn patch_embed(g: &mut Graph, image: &Tensor, p: usize, e: Var) -> Result<Var> {
    let raw = patchify(image, p)?;
    let (gh, gw) = (image.shape()[0] / p, image.shape()[1] / p);
    let d = g.value(e).shape()[1];
    let raw = g.constant(raw);
    let tok = g.matmul(raw, e)?;
    g.reshape(tok, &[gh, gw, d])
}

/// Pre-norm block: x + mixer(norm1(x)) fed to x' + mlp(norm2(x')).
pub fn block_forward(
    g: &mut Graph,
    ps: &ParamSet,
    x: Var,
    blk: &TransformerBlock,
    probes: Option<&mut Vec<AfnoProbe>>,
) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let (gh, gw, d) = (shape[0], shape[1], shape[2]);
    let s1 = g.param(ps, blk.norm1_scale);
    let b1 = g.param(ps, blk.norm1_shift);
    let n1 = g.layer_norm(x, s1, b1, LAYER_NORM_EPS)?;
    let mixed = match (&blk.mixer, probes) {
        (MixerParams::Afno(p), Some(probes)) => {
            let (out, probe) = afno_mix_probed(g, ps, n1, p)?;
            probes.push(probe);
            out
        }
        (m, _) => mix(g, ps, n1, m)?,
    };
    let x1 = g.add(x, mixed)?;

    let s2 = g.param(ps, blk.norm2_scale);
    let b2 = g.param(ps, blk.norm2_shift);
    let n2 = g.layer_norm(x1, s2, b2, LAYER_NORM_EPS)?;
    let flat = g.reshape(n2, &[gh * gw, d])?;
    let w1 = g.param(ps, blk.fc1);
    let w1b = g.param(ps, blk.fc1_bias);
    let w2 = g.param(ps, blk.fc2);
    let w2b = g.param(ps, blk.fc2_bias);
    let h = g.matmul(flat, w1)?;
    let h = g.add(h, w1b)?;
    let h = g.relu(h)?;
    let o = g.matmul(h, w2)?;
    let o = g.add(o, w2b)?;
    let o = g.reshape(o, &[gh, gw, d])?;
    g.add(x1, o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dtype;

    fn toy_image(hh: usize, ww: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = StreamRng::new(seed, "backbone-img");
        Tensor::from_real(&[hh, ww, c], rng.normal_vec(hh * ww * c, 1.0)).unwrap()
    }

    fn small_cfg(kind: MixerKind, depth: usize, head: HeadKind) -> ModelConfig {
        ModelConfig {
            image_h: 8,
            image_w: 8,
            channels: 1,
            patch_size: 4,
            depth,
            hidden: 8,
            mixer_kind: kind,
            num_heads: 2,
            blocks_k: 2,
            lambda: 0.01,
            keep_fraction: 1.0,
            mlp_ratio: 2.0,
            bias_mode: BiasMode::IdentityResidual,
            head,
        }
    }

    #[test]
    fn patchify_single_token_and_identity_selection() {
        // p = H = W: one token equal to the flattened image
        let img = toy_image(4, 4, 2, 1);
        let raw = patchify(&img, 4).unwrap();
        assert_eq!(raw.shape(), &[1, 32]);
        assert_eq!(raw.real().unwrap(), img.real().unwrap());

        // E = I: tokens are raw patches
        let mut g = Graph::no_grad();
        let e = g.constant(Tensor::eye(32));
        let tok = patch_embed(&mut g, &img, 4, e).unwrap();
        assert_eq!(g.value(tok).shape(), &[1, 1, 32]);
        assert_eq!(g.value(tok).real().unwrap(), img.real().unwrap());
    }

    #[test]
    fn unpatchify_inverts_patchify() {
        let img = toy_image(8, 12, 3, 2);
        let raw = patchify(&img, 4).unwrap();
        let mut g = Graph::no_grad();
        let rawv = g.constant(raw);
        let back = g.unpatchify(rawv, 2, 3, 4, 3).unwrap();
        assert_eq!(g.value(back), &img);
    }

    #[test]
    fn zero_depth_reconstruction_is_linear_with_projection_oracle() {
        // head = E^T with orthonormal E reproduces the least-squares
        // projection of each patch onto span(E)
        let cfg = small_cfg(MixerKind::Afno, 0, HeadKind::Reconstruction);
        let mut model = Model::build(cfg, 5).unwrap();
        let ppc = 16;
        let d = 8;
        // orthonormal E via Gram-Schmidt on random columns
        let mut rng = StreamRng::new(6, "gs");
        let mut cols: Vec<Vec<f64>> = (0..d).map(|_| rng.normal_vec(ppc, 1.0)).collect();
        for i in 0..d {
            for j in 0..i {
                let dot: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                let cj = cols[j].clone();
                for (a, b) in cols[i].iter_mut().zip(cj) {
                    *a -= dot * b;
                }
            }
            let norm: f64 = cols[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            for a in cols[i].iter_mut() {
                *a /= norm;
            }
        }
        let mut e = vec![0.0; ppc * d];
        let mut et = vec![0.0; d * ppc];
        for j in 0..d {
            for i in 0..ppc {
                e[i * d + j] = cols[j][i];
                et[j * ppc + i] = cols[j][i];
            }
        }
        model
            .params
            .replace(model.patch_embed, Tensor::from_real(&[ppc, d], e.clone()).unwrap());
        if let HeadParams::Reconstruction(w) = model.head {
            model
                .params
                .replace(w, Tensor::from_real(&[d, ppc], et).unwrap());
        }
        let img = toy_image(8, 8, 1, 7);
        let out = model.forward_tensor(&img).unwrap();
        assert_eq!(out.shape(), &[8, 8, 1]);

        // oracle: per patch x, projection P x with P = E E^T (least squares
        // because E is orthonormal)
        let raw = patchify(&img, 4).unwrap();
        let rv = raw.real().unwrap();
        let n = raw.shape()[0];
        let mut proj = vec![0.0; n * ppc];
        for t in 0..n {
            for i in 0..ppc {
                let mut acc = 0.0;
                for j in 0..d {
                    let mut coef = 0.0;
                    for ii in 0..ppc {
                        coef += cols[j][ii] * rv[t * ppc + ii];
                    }
                    acc += cols[j][i] * coef;
                }
                proj[t * ppc + i] = acc;
            }
        }
        let oracle_raw = Tensor::from_real(&[n, ppc], proj).unwrap();
        let mut g = Graph::no_grad();
        let o = g.constant(oracle_raw);
        let oracle_img = g.unpatchify(o, 2, 2, 4, 1).unwrap();
        assert!(out.max_abs_diff(g.value(oracle_img)) < 1e-10);

        // oracle MSE agrees with the model's reconstruction MSE
        let mse = |a: &Tensor, b: &Tensor| -> f64 {
            a.real()
                .unwrap()
                .iter()
                .zip(b.real().unwrap())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / a.numel() as f64
        };
        let m_model = mse(&out, &img);
        let m_oracle = mse(g.value(oracle_img), &img);
        assert!((m_model - m_oracle).abs() < 1e-12);

        // and the whole map is linear: f(2x) = 2 f(x)
        let doubled: Vec<f64> = img.real().unwrap().iter().map(|v| 2.0 * v).collect();
        let out2 = model
            .forward_tensor(&Tensor::from_real(&[8, 8, 1], doubled).unwrap())
            .unwrap();
        let scaled: Vec<f64> = out.real().unwrap().iter().map(|v| 2.0 * v).collect();
        assert!(out2.max_abs_diff(&Tensor::from_real(&[8, 8, 1], scaled).unwrap()) < 1e-10);
    }

    #[test]
    fn dead_block_is_identity() {
        // norm scales and shifts zero, MLP weights and biases zero: both
        // residual branches contribute nothing
        let d = 8;
        let mut ps = ParamSet::new();
        let mut rng = StreamRng::new(11, "dead-block");
        for kind in [MixerKind::Sa, MixerKind::Afno] {
            let mixer = match kind {
                MixerKind::Sa => MixerParams::Sa(
                    AttentionParams::init(&mut ps, &format!("mx.{kind}"), d, 2, &mut rng).unwrap(),
                ),
                _ => MixerParams::Afno(
                    AfnoParams::init(
                        &mut ps,
                        &format!("mx.{kind}"),
                        d,
                        2,
                        0.0,
                        1.0,
                        BiasMode::IdentityResidual,
                        &mut rng,
                    )
                    .unwrap(),
                ),
            };
            let blk = TransformerBlock {
                norm1_scale: ps.insert("n1s", Tensor::zeros(Dtype::Real64, &[d])),
                norm1_shift: ps.insert("n1b", Tensor::zeros(Dtype::Real64, &[d])),
                mixer,
                norm2_scale: ps.insert("n2s", Tensor::zeros(Dtype::Real64, &[d])),
                norm2_shift: ps.insert("n2b", Tensor::zeros(Dtype::Real64, &[d])),
                fc1: ps.insert("fc1", Tensor::zeros(Dtype::Real64, &[d, 2 * d])),
                fc1_bias: ps.insert("fc1b", Tensor::zeros(Dtype::Real64, &[2 * d])),
                fc2: ps.insert("fc2", Tensor::zeros(Dtype::Real64, &[2 * d, d])),
                fc2_bias: ps.insert("fc2b", Tensor::zeros(Dtype::Real64, &[d])),
            };
            let tokens = toy_image(2, 2, d, 12);
            let mut g = Graph::no_grad();
            let xv = g.constant(tokens.clone());
            let out = block_forward(&mut g, &ps, xv, &blk, None).unwrap();
            assert!(
                g.value(out).max_abs_diff(&tokens) == 0.0,
                "dead {kind} block must be the identity"
            );
        }
    }

    #[test]
    fn single_token_sa_block_matches_hand_composition() {
        let d = 4;
        let mut ps = ParamSet::new();
        let mut rng = StreamRng::new(13, "hand-block");
        let sa = AttentionParams::init(&mut ps, "mx", d, 1, &mut rng).unwrap();
        let blk = TransformerBlock {
            norm1_scale: ps.insert("n1s", Tensor::from_real(&[d], rng.normal_vec(d, 1.0)).unwrap()),
            norm1_shift: ps.insert("n1b", Tensor::from_real(&[d], rng.normal_vec(d, 0.3)).unwrap()),
            mixer: MixerParams::Sa(sa.clone()),
            norm2_scale: ps.insert("n2s", Tensor::from_real(&[d], rng.normal_vec(d, 1.0)).unwrap()),
            norm2_shift: ps.insert("n2b", Tensor::from_real(&[d], rng.normal_vec(d, 0.3)).unwrap()),
            fc1: ps.insert(
                "fc1",
                Tensor::from_real(&[d, 2 * d], rng.normal_vec(2 * d * d, 0.5)).unwrap(),
            ),
            fc1_bias: ps.insert("fc1b", Tensor::from_real(&[2 * d], rng.normal_vec(2 * d, 0.2)).unwrap()),
            fc2: ps.insert(
                "fc2",
                Tensor::from_real(&[2 * d, d], rng.normal_vec(2 * d * d, 0.5)).unwrap(),
            ),
            fc2_bias: ps.insert("fc2b", Tensor::from_real(&[d], rng.normal_vec(d, 0.2)).unwrap()),
        };
        let x = toy_image(1, 1, d, 14);
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let out = block_forward(&mut g, &ps, xv, &blk, None).unwrap();

        // hand composition with scalar loops
        let ln = |x: &[f64], s: &[f64], b: &[f64]| -> Vec<f64> {
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            (0..d).map(|i| (x[i] - mean) * inv * s[i] + b[i]).collect()
        };
        let getp = |id: ParamId| ps.get(id).real().unwrap().to_vec();
        let xv0 = x.real().unwrap();
        let n1 = ln(xv0, &getp(blk.norm1_scale), &getp(blk.norm1_shift));
        // single-token attention reduces to n1 . W_v
        let wv = getp(sa.w_v);
        let mut attn = vec![0.0; d];
        for j in 0..d {
            for c in 0..d {
                attn[j] += n1[c] * wv[c * d + j];
            }
        }
        let x1: Vec<f64> = (0..d).map(|i| xv0[i] + attn[i]).collect();
        let n2 = ln(&x1, &getp(blk.norm2_scale), &getp(blk.norm2_shift));
        let (fc1, fc1b, fc2, fc2b) = (
            getp(blk.fc1),
            getp(blk.fc1_bias),
            getp(blk.fc2),
            getp(blk.fc2_bias),
        );
        let m = 2 * d;
        let mut hdn = vec![0.0; m];
        for j in 0..m {
            let mut acc = fc1b[j];
            for c in 0..d {
                acc += n2[c] * fc1[c * m + j];
            }
            hdn[j] = acc.max(0.0);
        }
        let mut mlp = vec![0.0; d];
        for j in 0..d {
            let mut acc = fc2b[j];
            for c in 0..m {
                acc += hdn[c] * fc2[c * d + j];
            }
            mlp[j] = acc;
        }
        let want: Vec<f64> = (0..d).map(|i| x1[i] + mlp[i]).collect();
        let got = g.value(out).real().unwrap();
        for i in 0..d {
            assert!((got[i] - want[i]).abs() < 1e-12, "{i}: {} vs {}", got[i], want[i]);
        }
    }

    #[test]
    fn classification_head_contract() {
        let cfg = small_cfg(MixerKind::Gfn, 1, HeadKind::Classification(5));
        let model = Model::build(cfg, 15).unwrap();
        let img = toy_image(8, 8, 1, 16);
        let logits = model.forward_tensor(&img).unwrap();
        assert_eq!(logits.shape(), &[5]);
        // softmax over logits sums to 1
        let mut g = Graph::no_grad();
        let l = g.constant(logits.clone());
        let l = g.reshape(l, &[1, 5]).unwrap();
        let sm = g.softmax(l).unwrap();
        let s: f64 = g.value(sm).real().unwrap().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);

        // permuting class-head columns permutes logits identically
        let mut permuted = model;
        if let HeadParams::Classification(w) = permuted.head {
            let t = permuted.params.get(w).clone();
            let (d, nc) = (t.shape()[0], t.shape()[1]);
            let tv = t.real().unwrap();
            let perm = [3usize, 0, 4, 1, 2];
            let mut pv = vec![0.0; d * nc];
            for (dst, &src) in perm.iter().enumerate() {
                for r in 0..d {
                    pv[r * nc + dst] = tv[r * nc + src];
                }
            }
            permuted
                .params
                .replace(w, Tensor::from_real(&[d, nc], pv).unwrap());
            let plog = permuted.forward_tensor(&img).unwrap();
            for (dst, &src) in perm.iter().enumerate() {
                assert!((plog.real().unwrap()[dst] - logits.real().unwrap()[src]).abs() < 1e-12);
            }
        } else {
            unreachable!();
        }
    }

    #[test]
    fn seeded_builds_and_forwards_are_bitwise_identical() {
        let cfg = small_cfg(MixerKind::Afno, 2, HeadKind::Reconstruction);
        let m1 = Model::build(cfg.clone(), 99).unwrap();
        let m2 = Model::build(cfg, 99).unwrap();
        let img = toy_image(8, 8, 1, 17);
        let o1 = m1.forward_tensor(&img).unwrap();
        let o2 = m2.forward_tensor(&img).unwrap();
        assert!(o1.max_abs_diff(&o2) == 0.0);
    }

    #[test]
    fn checkpoint_round_trip_preserves_params_and_count() {
        let cfg = small_cfg(MixerKind::Afno, 2, HeadKind::Reconstruction);
        let mut model = Model::build(cfg.clone(), 23).unwrap();
        let count = model.count_params();
        let dir = std::env::temp_dir().join("afno-backbone-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ckpt.afnt");
        model.save_checkpoint(&path).unwrap();
        let img = toy_image(8, 8, 1, 24);
        let before = model.forward_tensor(&img).unwrap();
        // perturb, then load back
        let ids: Vec<ParamId> = model.params.ids().collect();
        for id in ids {
            let t = model.params.get(id);
            let z = Tensor::zeros(t.dtype(), t.shape());
            model.params.replace(id, z);
        }
        model.load_checkpoint(&path).unwrap();
        assert_eq!(model.count_params(), count);
        let after = model.forward_tensor(&img).unwrap();
        assert!(before.max_abs_diff(&after) == 0.0);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn depth1_model_gradients_match_fd() {
        let cfg = small_cfg(MixerKind::Afno, 1, HeadKind::Reconstruction);
        let model = Model::build(cfg, 31).unwrap();
        let img = toy_image(8, 8, 1, 32);
        let target = toy_image(8, 8, 1, 33);
        let blocks = model.blocks.clone();
        let head = model.head.clone();
        let cfg2 = model.cfg.clone();
        let (pe, pos, seed) = (model.patch_embed, model.pos_embed, model.seed);
        let report = crate::tensor::grad_check_params(
            move |g, ps| {
                let m = Model {
                    cfg: cfg2.clone(),
                    params: ps.clone(),
                    patch_embed: pe,
                    pos_embed: pos,
                    blocks: blocks.clone(),
                    head: head.clone(),
                    seed,
                };
                let pred = m.forward(g, &img)?;
                let tv = g.constant(target.clone());
                let diff = g.sub(pred, tv)?;
                let sq = g.mul(diff, diff)?;
                let total = g.sum(sq)?;
                g.scale(total, 1.0 / 64.0)
            },
            &model.params,
            1e-5,
        )
        .unwrap();
        for (name, err) in report {
            assert!(err < 1e-4, "param {name}: fd error {err}");
        }
    }
}
