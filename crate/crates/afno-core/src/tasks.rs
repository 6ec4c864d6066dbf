//! Desk-scale training tasks: random-walk-masked inpainting, a tiny
//! orientation-classification task, PSNR/SSIM metrics, and the
//! Adam + cosine-schedule optimizer stack.

use std::path::Path;

use crate::backbone::{HeadParams, Model};
use crate::error::{invalid, Error, Result};
use crate::rng::StreamRng;
use crate::spectral;
use crate::tensor::{Buffer, Complex64, Graph, ParamSet, Tensor, Var};

// ---------------------------------------------------------------------
// random-walk masking
// ---------------------------------------------------------------------

/// Inpainting corruption pattern from a uniform 4-neighbor random walk.
#[derive(Clone, Debug)]
pub struct MaskSpec {
    pub steps: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// true = masked to zero; row-major [height, width].
    pub mask: Vec<bool>,
}

impl MaskSpec {
    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Fraction of unique masked cells; revisits along the walk do not
    /// count twice.
    pub fn masked_fraction(&self) -> f64 {
        self.masked_count() as f64 / (self.height * self.width) as f64
    }

    /// 0/1 tensor of shape [height, width, 1]; 1 marks a masked cell.
    pub fn to_tensor(&self) -> Tensor {
        let data: Vec<f64> = self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        Tensor::from_real(&[self.height, self.width, 1], data).expect("mask tensor")
    }

    /// Binary PGM preview: masked pixels black, the rest white.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut bytes = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend(self.mask.iter().map(|&m| if m { 0u8 } else { 255u8 }));
        std::fs::write(path, bytes)?;
        Ok(())
    }
}

/// Start uniformly on the grid, then take `steps` uniform 4-neighbor
/// moves; out-of-bounds proposals are resampled, so the walk never leaves
/// the grid. Every visited cell is masked.
pub fn random_walk_mask(h: usize, w: usize, steps: usize, seed: u64) -> Result<MaskSpec> {
    if h == 0 || w == 0 {
        return Err(invalid("random_walk_mask", "zero-sized grid"));
    }
    let mut rng = StreamRng::new(seed, "mask");
    let mut mask = vec![false; h * w];
    let start = rng.range((h * w) as u64) as usize;
    let mut i = start / w;
    let mut j = start % w;
    mask[i * w + j] = true;
    let has_neighbor = h > 1 || w > 1;
    for _ in 0..steps {
        if !has_neighbor {
            break;
        }
        loop {
            let dir = rng.range(4);
            let (ni, nj) = match dir {
                0 => (i.wrapping_sub(1), j),
                1 => (i + 1, j),
                2 => (i, j.wrapping_sub(1)),
                _ => (i, j + 1),
            };
            if ni < h && nj < w {
                i = ni;
                j = nj;
                break;
            }
        }
        mask[i * w + j] = true;
    }
    Ok(MaskSpec {
        steps,
        seed,
        height: h,
        width: w,
        mask,
    })
}

/// Default walk length for a grid, preserving the masked-area regime of a
/// 3136-step walk on 224x224: steps = H*W/16.
pub fn default_mask_steps(h: usize, w: usize) -> usize {
    ((h * w) as f64 * 0.0625).round() as usize
}

/// Zero out masked pixels across all channels.
pub fn apply_mask(image: &Tensor, mask: &MaskSpec) -> Result<Tensor> {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if h != mask.height || w != mask.width {
        return Err(Error::ShapeMismatch {
            op: "apply_mask",
            left: image.shape().to_vec(),
            right: vec![mask.height, mask.width],
        });
    }
    let iv = image.real()?;
    let mut out = iv.to_vec();
    for t in 0..h * w {
        if mask.mask[t] {
            for ch in 0..c {
                out[t * c + ch] = 0.0;
            }
        }
    }
    Tensor::from_real(image.shape(), out)
}

// ---------------------------------------------------------------------
// losses and metrics
// ---------------------------------------------------------------------

/// Differentiable MSE restricted to masked cells; 0 for an empty mask.
pub fn inpaint_loss(g: &mut Graph, pred: Var, target: &Tensor, mask: &MaskSpec) -> Result<Var> {
    let c = target.shape()[2];
    let count = mask.masked_count() * c;
    if count == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let tv = g.constant(target.clone());
    let mv = g.constant(mask.to_tensor());
    let diff = g.sub(pred, tv)?;
    let masked = g.mul(diff, mv)?;
    let sq = g.mul(masked, masked)?;
    let total = g.sum(sq)?;
    g.scale(total, 1.0 / count as f64)
}

/// Plain-tensor masked MSE (evaluation path).
pub fn inpaint_mse(pred: &Tensor, target: &Tensor, mask: &MaskSpec) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "inpaint_mse",
            left: pred.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    let c = target.shape()[2];
    let count = mask.masked_count() * c;
    if count == 0 {
        return Ok(0.0);
    }
    let (pv, tv) = (pred.real()?, target.real()?);
    let mut acc = 0.0;
    for t in 0..mask.height * mask.width {
        if mask.mask[t] {
            for ch in 0..c {
                let d = pv[t * c + ch] - tv[t * c + ch];
                acc += d * d;
            }
        }
    }
    Ok(acc / count as f64)
}

/// Peak signal-to-noise ratio in dB, capped at 100 when the MSE vanishes.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse < 1e-10 {
        return 100.0;
    }
    (10.0 * (peak * peak / mse).log10()).min(100.0)
}

pub fn psnr(pred: &Tensor, target: &Tensor, peak: f64) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            left: pred.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    if peak <= 0.0 {
        return Err(invalid("psnr", "peak must be positive"));
    }
    let (pv, tv) = (pred.real()?, target.real()?);
    let mse = pv
        .iter()
        .zip(tv)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pv.len() as f64;
    Ok(psnr_from_mse(mse, peak))
}

/// Single-scale SSIM with a uniform 8x8 window (shrunk on tiny images),
/// C1 = (0.01*peak)^2, C2 = (0.03*peak)^2, biased variances, averaged
/// over all fully-contained windows and channels. Uses summed-area tables;
/// the test oracle recomputes every window directly.
pub fn ssim(pred: &Tensor, target: &Tensor, peak: f64) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            left: pred.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    let (h, w, c) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    let win = 8usize.min(h).min(w);
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);
    let (pv, tv) = (pred.real()?, target.real()?);

    // summed-area tables per channel for x, y, x^2, y^2, xy
    let idx = |i: usize, j: usize| i * w + j;
    let mut total = 0.0;
    let mut windows = 0usize;
    for ch in 0..c {
        let mut sx = vec![0.0; (h + 1) * (w + 1)];
        let mut sy = vec![0.0; (h + 1) * (w + 1)];
        let mut sxx = vec![0.0; (h + 1) * (w + 1)];
        let mut syy = vec![0.0; (h + 1) * (w + 1)];
        let mut sxy = vec![0.0; (h + 1) * (w + 1)];
        for i in 0..h {
            for j in 0..w {
                let x = pv[idx(i, j) * c + ch];
                let y = tv[idx(i, j) * c + ch];
                let at = (i + 1) * (w + 1) + (j + 1);
                let up = i * (w + 1) + (j + 1);
                let left = (i + 1) * (w + 1) + j;
                let diag = i * (w + 1) + j;
                sx[at] = x + sx[up] + sx[left] - sx[diag];
                sy[at] = y + sy[up] + sy[left] - sy[diag];
                sxx[at] = x * x + sxx[up] + sxx[left] - sxx[diag];
                syy[at] = y * y + syy[up] + syy[left] - syy[diag];
                sxy[at] = x * y + sxy[up] + sxy[left] - sxy[diag];
            }
        }
        let area = |s: &[f64], i0: usize, j0: usize| -> f64 {
            s[(i0 + win) * (w + 1) + (j0 + win)] - s[i0 * (w + 1) + (j0 + win)]
                - s[(i0 + win) * (w + 1) + j0]
                + s[i0 * (w + 1) + j0]
        };
        let n = (win * win) as f64;
        for i0 in 0..=h - win {
            for j0 in 0..=w - win {
                let mx = area(&sx, i0, j0) / n;
                let my = area(&sy, i0, j0) / n;
                let vx = area(&sxx, i0, j0) / n - mx * mx;
                let vy = area(&syy, i0, j0) / n - my * my;
                let cov = area(&sxy, i0, j0) / n - mx * my;
                let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                total += s;
                windows += 1;
            }
        }
    }
    Ok(total / windows as f64)
}

// ---------------------------------------------------------------------
// synthetic dataset
// ---------------------------------------------------------------------

/// Band-limited random images with power-law spectra, plus a
/// dominant-orientation class label in {0..3}.
pub struct SyntheticDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
}

/// Inverse transforms of spectra with |f|^-1.5 power-law decay, random
/// phases, and an orientation-dependent gain that defines the label.
/// Pixels are normalized per channel into [0, 1].
pub fn make_synthetic_dataset(
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    if n == 0 || h == 0 || w == 0 || c == 0 {
        return Err(invalid("make_synthetic_dataset", "empty dataset dims"));
    }
    let wh = w / 2 + 1;
    let mut images = Vec::with_capacity(n);
    // stratified labels: a shuffled balanced list, so class counts stay
    // within one sample of each other at any n
    let mut labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
    let mut label_rng = StreamRng::new(seed, "dataset/labels");
    label_rng.shuffle(&mut labels);
    for s in 0..n {
        let mut rng = StreamRng::new(seed, &format!("dataset/{s}"));
        let label = labels[s];
        let theta = label as f64 * std::f64::consts::PI / 4.0;
        let mut spec = vec![Complex64::new(0.0, 0.0); h * wh * c];
        for a in 0..h {
            let fr = if a <= h / 2 { a as f64 } else { a as f64 - h as f64 };
            for b in 0..wh {
                let fc = b as f64;
                for ch in 0..c {
                    if a == 0 && b == 0 {
                        continue; // DC fixed by normalization
                    }
                    let f = (fr * fr + fc * fc).sqrt();
                    let phi = fr.atan2(fc);
                    let gain = (3.0 * ((2.0 * (phi - theta)).cos() - 1.0)).exp();
                    let amp = (1.0 + f).powf(-1.5) * (0.2 + 2.0 * gain);
                    let phase = rng.uniform() * 2.0 * std::f64::consts::PI;
                    let mag = amp * (0.5 + rng.uniform());
                    spec[(a * wh + b) * c + ch] =
                        Complex64::new(mag * phase.cos(), mag * phase.sin());
                }
            }
        }
        let img = spectral::irfft2(&spectral::Spectrum {
            full_width: w,
            data: Tensor::from_complex(&[h, wh, c], spec)?,
        })?;
        // normalize each channel into [0, 1]
        let iv = img.real()?;
        let mut out = vec![0.0; h * w * c];
        for ch in 0..c {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for t in 0..h * w {
                lo = lo.min(iv[t * c + ch]);
                hi = hi.max(iv[t * c + ch]);
            }
            let span = hi - lo;
            for t in 0..h * w {
                out[t * c + ch] = if span > 1e-12 {
                    (iv[t * c + ch] - lo) / span
                } else {
                    0.5
                };
            }
        }
        images.push(Tensor::from_real(&[h, w, c], out)?);
    }
    Ok(SyntheticDataset {
        images,
        labels,
        height: h,
        width: w,
        channels: c,
        num_classes: 4,
    })
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Cache to an AFNT container: per-image entries plus a label vector.
    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let labels = Tensor::from_real(
            &[self.labels.len()],
            self.labels.iter().map(|&l| l as f64).collect(),
        )?;
        let mut entries: Vec<(String, &Tensor)> = self
            .images
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("image.{i}"), t))
            .collect();
        entries.push(("labels".to_string(), &labels));
        crate::tensor::io::write_container(path, &entries)
    }

    pub fn load_cache(path: &Path) -> Result<SyntheticDataset> {
        let entries = crate::tensor::io::read_container(path)?;
        let labels_t = entries
            .iter()
            .find(|(n, _)| n == "labels")
            .ok_or_else(|| invalid("dataset cache", "missing labels entry"))?
            .1
            .clone();
        let labels: Vec<usize> = labels_t.real()?.iter().map(|&v| v as usize).collect();
        let mut images = Vec::with_capacity(labels.len());
        for i in 0..labels.len() {
            let name = format!("image.{i}");
            let img = entries
                .iter()
                .find(|(n, _)| n == &name)
                .ok_or_else(|| invalid("dataset cache", format!("missing {name}")))?
                .1
                .clone();
            images.push(img);
        }
        let shape = images[0].shape().to_vec();
        Ok(SyntheticDataset {
            height: shape[0],
            width: shape[1],
            channels: shape[2],
            images,
            labels,
            num_classes: 4,
        })
    }
}

// ---------------------------------------------------------------------
// optimizer and training loop
// ---------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Task {
    Inpaint,
    Classify,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Random-walk length per mask; None derives it from the image area.
    pub mask_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 125,
            batch_size: 16,
            lr: 1e-3,
            min_lr: 1e-5,
            warmup_steps: 100,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
            mask_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= self.min_lr && self.min_lr > 0.0) {
            return Err(invalid("train_config", "need lr >= min_lr > 0"));
        }
        if self.grad_clip <= 0.0 {
            return Err(invalid("train_config", "grad_clip must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid("train_config", "epochs and batch_size must be positive"));
        }
        Ok(())
    }
}

/// Linear warmup to `lr`, then cosine decay hitting `min_lr` exactly on
/// the final step.
pub fn lr_at(tc: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    if tc.warmup_steps > 0 && step < tc.warmup_steps {
        return tc.lr * (step + 1) as f64 / tc.warmup_steps as f64;
    }
    let decay_len = total_steps.saturating_sub(tc.warmup_steps);
    if decay_len <= 1 {
        return tc.lr;
    }
    let t = (step - tc.warmup_steps) as f64;
    let horizon = (decay_len - 1) as f64;
    tc.min_lr + (tc.lr - tc.min_lr) * (1.0 + (std::f64::consts::PI * t / horizon).cos()) / 2.0
}

/// Scale factor that caps the global gradient norm at `clip`.
pub fn clip_scale(grad_norm: f64, clip: f64) -> f64 {
    if grad_norm > clip && grad_norm > 0.0 {
        clip / grad_norm
    } else {
        1.0
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(ps: &ParamSet) -> Adam {
        let sizes: Vec<usize> = ps
            .ids()
            .map(|id| ps.get(id).buffer().real_scalar_count())
            .collect();
        Adam {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// One decoupled-weight-decay Adam step over clipped gradients.
    /// Returns the pre-clip global gradient norm.
    fn step(&mut self, ps: &mut ParamSet, lr: f64, weight_decay: f64, clip: f64) -> f64 {
        let mut norm_sq = 0.0;
        for id in ps.ids() {
            if let Some(gr) = &ps.get(id).grad {
                norm_sq += match gr {
                    Buffer::Real(v) => v.iter().map(|g| g * g).sum::<f64>(),
                    Buffer::Complex(v) => v.iter().map(|z| z.re * z.re + z.im * z.im).sum::<f64>(),
                };
            }
        }
        let grad_norm = norm_sq.sqrt();
        let scale = clip_scale(grad_norm, clip);
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let ids: Vec<_> = ps.ids().collect();
        for (pi, id) in ids.into_iter().enumerate() {
            let t = ps.get_mut(id);
            let grad = match t.grad.take() {
                Some(g) => g,
                None => continue,
            };
            let comps: Vec<f64> = match &grad {
                Buffer::Real(v) => v.iter().map(|g| g * scale).collect(),
                Buffer::Complex(v) => v
                    .iter()
                    .flat_map(|z| [z.re * scale, z.im * scale])
                    .collect(),
            };
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            let mut update = vec![0.0; comps.len()];
            for (i, g) in comps.iter().enumerate() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                update[i] = mh / (vh.sqrt() + ADAM_EPS);
            }
            match t.buffer_mut() {
                Buffer::Real(data) => {
                    for (i, p) in data.iter_mut().enumerate() {
                        *p -= lr * (update[i] + weight_decay * *p);
                    }
                }
                Buffer::Complex(data) => {
                    for (i, z) in data.iter_mut().enumerate() {
                        z.re -= lr * (update[2 * i] + weight_decay * z.re);
                        z.im -= lr * (update[2 * i + 1] + weight_decay * z.im);
                    }
                }
            }
        }
        grad_norm
    }
}

#[derive(Clone, Debug)]
pub struct HistoryRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Masked-region PSNR (inpainting) or batch accuracy (classification).
    pub metric: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,lr,loss,psnr_or_acc,grad_norm\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.epoch, r.lr, r.loss, r.metric, r.grad_norm
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }
}

/// Train a model in place. Adam (beta 0.9/0.999, eps 1e-8), decoupled
/// weight decay, global-norm clipping, linear warmup then cosine decay.
/// Emits one history row per step; aborts on a non-finite loss. When
/// `out` is given, history.csv, checkpoint.afnt, and manifest.txt land
/// there.
pub fn train(
    model: &mut Model,
    task: Task,
    data: &SyntheticDataset,
    tc: &TrainConfig,
    out: Option<&Path>,
) -> Result<History> {
    tc.validate()?;
    match (task, &model.head) {
        (Task::Inpaint, HeadParams::Reconstruction(_)) => {}
        (Task::Classify, HeadParams::Classification(_)) => {}
        _ => {
            return Err(invalid(
                "train",
                format!("model head does not match task {task:?}"),
            ))
        }
    }
    let n = data.len();
    let bs = tc.batch_size.min(n);
    let steps_per_epoch = (n / bs).max(1);
    let total_steps = tc.epochs * steps_per_epoch;
    let mask_steps = tc
        .mask_steps
        .unwrap_or_else(|| default_mask_steps(data.height, data.width));
    let mut adam = Adam::new(&model.params);
    let mut history = History::default();
    let mut step = 0usize;
    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = StreamRng::new(tc.seed, &format!("shuffle/{epoch}"));
        shuffle_rng.shuffle(&mut order);
        for s in 0..steps_per_epoch {
            let lr = lr_at(tc, step, total_steps);
            let batch = &order[s * bs..(s + 1) * bs];
            let mut g = Graph::new();
            let mut losses = Vec::with_capacity(bs);
            let mut correct = 0usize;
            for (slot, &idx) in batch.iter().enumerate() {
                let img = &data.images[idx];
                match task {
                    Task::Inpaint => {
                        let mask = random_walk_mask(
                            data.height,
                            data.width,
                            mask_steps,
                            splitmix_fold(tc.seed, epoch, s, slot),
                        )?;
                        let input = apply_mask(img, &mask)?;
                        let pred = model.forward(&mut g, &input)?;
                        losses.push(inpaint_loss(&mut g, pred, img, &mask)?);
                    }
                    Task::Classify => {
                        let pred = model.forward(&mut g, img)?;
                        let logits = g.value(pred).real()?.to_vec();
                        let argmax = logits
                            .iter()
                            .enumerate()
                            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                            .map(|(i, _)| i)
                            .unwrap_or(0);
                        if argmax == data.labels[idx] {
                            correct += 1;
                        }
                        losses.push(g.cross_entropy(pred, data.labels[idx])?);
                    }
                }
            }
            let mut total = losses[0];
            for l in &losses[1..] {
                total = g.add(total, *l)?;
            }
            let loss_var = g.scale(total, 1.0 / bs as f64)?;
            let loss = g.scalar_value(loss_var)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    lr,
                    grad_norm: history.rows.last().map(|r| r.grad_norm).unwrap_or(0.0),
                });
            }
            model.params.zero_grads();
            g.backward(loss_var, &mut model.params)?;
            let grad_norm = adam.step(&mut model.params, lr, tc.weight_decay, tc.grad_clip);
            let metric = match task {
                Task::Inpaint => psnr_from_mse(loss, 1.0),
                Task::Classify => correct as f64 / bs as f64,
            };
            history.rows.push(HistoryRow {
                step,
                epoch,
                lr,
                loss,
                metric,
                grad_norm,
            });
            step += 1;
        }
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        history.write_csv(&dir.join("history.csv"))?;
        model.save_checkpoint(&dir.join("checkpoint.afnt"))?;
        std::fs::write(dir.join("manifest.txt"), model.manifest())?;
    }
    Ok(history)
}

/// Stable per-(epoch, step, slot) mask seed derived from the run seed.
fn splitmix_fold(seed: u64, epoch: usize, step: usize, slot: usize) -> u64 {
    let mut r = StreamRng::new(seed, &format!("mask-seed/{epoch}/{step}/{slot}"));
    r.next_u64()
}

/// Pooled masked-region PSNR and SSIM of a reconstruction model over a
/// dataset, against the zero-fill baseline.
pub struct InpaintEval {
    pub masked_psnr: f64,
    pub baseline_psnr: f64,
    pub mean_ssim: f64,
    pub masked_fraction: f64,
}

pub fn eval_inpaint(
    model: &Model,
    data: &SyntheticDataset,
    mask_steps: usize,
    mask_seed: u64,
) -> Result<InpaintEval> {
    let mut sq_model = 0.0;
    let mut sq_base = 0.0;
    let mut count = 0usize;
    let mut ssim_total = 0.0;
    let mut frac = 0.0;
    let c = data.channels;
    for (i, img) in data.images.iter().enumerate() {
        let mask = random_walk_mask(
            data.height,
            data.width,
            mask_steps,
            splitmix_fold(mask_seed, usize::MAX, i, 0),
        )?;
        frac += mask.masked_fraction() / data.len() as f64;
        let input = apply_mask(img, &mask)?;
        let pred = model.forward_tensor(&input)?;
        let (pv, tv, bv) = (pred.real()?, img.real()?, input.real()?);
        for t in 0..data.height * data.width {
            if mask.mask[t] {
                for ch in 0..c {
                    let dm = pv[t * c + ch] - tv[t * c + ch];
                    let db = bv[t * c + ch] - tv[t * c + ch];
                    sq_model += dm * dm;
                    sq_base += db * db;
                    count += 1;
                }
            }
        }
        ssim_total += ssim(&pred, img, 1.0)? / data.len() as f64;
    }
    let count = count.max(1) as f64;
    Ok(InpaintEval {
        masked_psnr: psnr_from_mse(sq_model / count, 1.0),
        baseline_psnr: psnr_from_mse(sq_base / count, 1.0),
        mean_ssim: ssim_total,
        masked_fraction: frac,
    })
}

/// Classification accuracy over a dataset.
pub fn eval_classify(model: &Model, data: &SyntheticDataset) -> Result<f64> {
    let mut correct = 0usize;
    for (img, &label) in data.images.iter().zip(&data.labels) {
        let logits = model.forward_tensor(img)?;
        let lv = logits.real()?;
        let argmax = lv
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        if argmax == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{HeadKind, ModelConfig};
    use crate::mixers::MixerKind;

    // Frozen by the pre-build Monte-Carlo reference simulation:
    // 1000 walks of 3136 steps on a 224x224 grid.
    const REF_MASK_MEAN: f64 = 0.019170;
    const REF_MASK_STD: f64 = 0.0026549;

    #[test]
    fn zero_steps_masks_exactly_one_cell() {
        let m = random_walk_mask(8, 8, 0, 7).unwrap();
        assert_eq!(m.masked_count(), 1);
    }

    #[test]
    fn degenerate_grid_masks_its_single_cell() {
        let m = random_walk_mask(1, 1, 50, 3).unwrap();
        assert_eq!(m.masked_count(), 1);
        assert!(m.mask[0]);
        assert!(random_walk_mask(0, 4, 1, 1).is_err());
    }

    #[test]
    fn walk_never_leaves_grid_and_masked_cells_are_bounded() {
        for seed in 0..20 {
            let m = random_walk_mask(5, 9, 200, seed).unwrap();
            assert!(m.masked_count() <= 201);
            assert!(m.masked_count() >= 1);
        }
    }

    #[test]
    fn masked_fraction_matches_frozen_monte_carlo_reference() {
        // mean over 1000 fresh seeds must match the recorded mean within
        // two standard errors
        let n = 1000;
        let mut acc = 0.0;
        for s in 0..n {
            let m = random_walk_mask(224, 224, 3136, 0x00C0FFEE + s as u64).unwrap();
            acc += m.masked_fraction();
        }
        let mean = acc / n as f64;
        let tol = 2.0 * REF_MASK_STD / (n as f64).sqrt();
        assert!(
            (mean - REF_MASK_MEAN).abs() <= tol,
            "mean {mean} vs reference {REF_MASK_MEAN} (tol {tol})"
        );
    }

    #[test]
    fn inpaint_loss_cases() {
        let img = Tensor::from_real(&[2, 2, 1], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mask = MaskSpec {
            steps: 0,
            seed: 0,
            height: 2,
            width: 2,
            mask: vec![true, false, false, false],
        };
        // pred == target -> 0
        let mut g = Graph::no_grad();
        let p = g.constant(img.clone());
        let l = inpaint_loss(&mut g, p, &img, &mask).unwrap();
        assert_eq!(g.scalar_value(l).unwrap(), 0.0);
        // single masked pixel, diff 0.5 -> 0.25
        let mut pred = img.clone();
        pred.real_mut().unwrap()[0] += 0.5;
        let mut g = Graph::no_grad();
        let p = g.constant(pred);
        let l = inpaint_loss(&mut g, p, &img, &mask).unwrap();
        assert!((g.scalar_value(l).unwrap() - 0.25).abs() < 1e-15);
        // empty mask -> defined as 0
        let empty = MaskSpec {
            mask: vec![false; 4],
            ..mask
        };
        let mut g = Graph::no_grad();
        let p = g.constant(img.clone());
        let l = inpaint_loss(&mut g, p, &img, &empty).unwrap();
        assert_eq!(g.scalar_value(l).unwrap(), 0.0);
    }

    #[test]
    fn inpaint_loss_matches_scalar_loop_oracle() {
        let mut rng = StreamRng::new(5, "loss-oracle");
        let (h, w, c) = (6, 5, 3);
        let target = Tensor::from_real(&[h, w, c], rng.normal_vec(h * w * c, 1.0)).unwrap();
        let pred = Tensor::from_real(&[h, w, c], rng.normal_vec(h * w * c, 1.0)).unwrap();
        let mask = random_walk_mask(h, w, 10, 77).unwrap();
        let mut g = Graph::no_grad();
        let p = g.constant(pred.clone());
        let l = inpaint_loss(&mut g, p, &target, &mask).unwrap();
        let got = g.scalar_value(l).unwrap();
        // oracle
        let (pv, tv) = (pred.real().unwrap(), target.real().unwrap());
        let mut acc = 0.0;
        let mut cnt = 0;
        for t in 0..h * w {
            if mask.mask[t] {
                for ch in 0..c {
                    let d = pv[t * c + ch] - tv[t * c + ch];
                    acc += d * d;
                    cnt += 1;
                }
            }
        }
        assert!((got - acc / cnt as f64).abs() < 1e-12);
    }

    #[test]
    fn psnr_formula_and_cap() {
        let a = Tensor::from_real(&[2, 2, 1], vec![0.0, 0.5, 1.0, 0.25]).unwrap();
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 100.0);
        // MSE = 0.01, peak 1 -> 20 dB
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
        assert_eq!(ssim(&a, &a, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn psnr_decreases_with_growing_noise() {
        let mut rng = StreamRng::new(31, "psnr-mono");
        let a = Tensor::from_real(&[8, 8, 1], rng.normal_vec(64, 1.0)).unwrap();
        let mut last = f64::INFINITY;
        for level in [0.01, 0.05, 0.2, 0.8] {
            let noisy: Vec<f64> = a
                .real()
                .unwrap()
                .iter()
                .map(|v| v + rng.normal() * level)
                .collect();
            let b = Tensor::from_real(&[8, 8, 1], noisy).unwrap();
            let p = psnr(&a, &b, 1.0).unwrap();
            assert!(p < last, "psnr must strictly decrease: {p} vs {last}");
            last = p;
        }
    }

    #[test]
    fn ssim_matches_direct_window_oracle() {
        let mut rng = StreamRng::new(41, "ssim-oracle");
        let (h, w, c) = (12, 10, 2);
        let a = Tensor::from_real(&[h, w, c], (0..h * w * c).map(|_| rng.uniform()).collect())
            .unwrap();
        let b = Tensor::from_real(&[h, w, c], (0..h * w * c).map(|_| rng.uniform()).collect())
            .unwrap();
        let got = ssim(&a, &b, 1.0).unwrap();

        // direct per-window loops
        let win = 8;
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let (av, bv) = (a.real().unwrap(), b.real().unwrap());
        let mut total = 0.0;
        let mut windows = 0;
        for ch in 0..c {
            for i0 in 0..=h - win {
                for j0 in 0..=w - win {
                    let mut xs = Vec::new();
                    let mut ys = Vec::new();
                    for i in i0..i0 + win {
                        for j in j0..j0 + win {
                            xs.push(av[(i * w + j) * c + ch]);
                            ys.push(bv[(i * w + j) * c + ch]);
                        }
                    }
                    let n = xs.len() as f64;
                    let mx = xs.iter().sum::<f64>() / n;
                    let my = ys.iter().sum::<f64>() / n;
                    let vx = xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>() / n;
                    let vy = ys.iter().map(|y| (y - my) * (y - my)).sum::<f64>() / n;
                    let cov = xs
                        .iter()
                        .zip(&ys)
                        .map(|(x, y)| (x - mx) * (y - my))
                        .sum::<f64>()
                        / n;
                    total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    windows += 1;
                }
            }
        }
        let oracle = total / windows as f64;
        assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
    }

    #[test]
    fn dataset_is_deterministic_in_range_and_balanced() {
        let d1 = make_synthetic_dataset(64, 16, 16, 2, 9).unwrap();
        let d2 = make_synthetic_dataset(64, 16, 16, 2, 9).unwrap();
        for (a, b) in d1.images.iter().zip(&d2.images) {
            assert!(a.max_abs_diff(b) == 0.0);
        }
        assert_eq!(d1.labels, d2.labels);
        for img in &d1.images {
            for &v in img.real().unwrap() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
        // class balance within +-5% over 4096 samples
        let big = make_synthetic_dataset(4096, 8, 8, 1, 1234).unwrap();
        let mut counts = [0usize; 4];
        for &l in &big.labels {
            counts[l] += 1;
        }
        for (cls, &cnt) in counts.iter().enumerate() {
            let expect = 1024.0;
            assert!(
                (cnt as f64 - expect).abs() <= expect * 0.05,
                "class {cls} count {cnt}"
            );
        }
    }

    #[test]
    fn dataset_cache_round_trips() {
        let d = make_synthetic_dataset(5, 8, 8, 2, 3).unwrap();
        let dir = std::env::temp_dir().join("afno-dataset-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("dataset.afnt");
        d.save_cache(&path).unwrap();
        let back = SyntheticDataset::load_cache(&path).unwrap();
        assert_eq!(back.labels, d.labels);
        for (a, b) in d.images.iter().zip(&back.images) {
            assert!(a.max_abs_diff(b) == 0.0);
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn schedule_endpoints_and_clipping() {
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 1,
            lr: 1e-3,
            min_lr: 1e-5,
            warmup_steps: 10,
            ..TrainConfig::default()
        };
        let total = 110;
        // first step after warmup is exactly lr
        assert!((lr_at(&tc, 10, total) - 1e-3).abs() < 1e-18);
        // final step is exactly min_lr
        assert!((lr_at(&tc, total - 1, total) - 1e-5).abs() < 1e-18);
        // warmup ramps linearly
        assert!((lr_at(&tc, 0, total) - 1e-4).abs() < 1e-18);
        assert!((lr_at(&tc, 4, total) - 5e-4).abs() < 1e-18);
        // synthetic gradient of norm 10 with clip 1.0 scales by 0.1
        assert!((clip_scale(10.0, 1.0) - 0.1).abs() < 1e-15);
        assert_eq!(clip_scale(0.5, 1.0), 1.0);
    }

    fn tiny_train_cfg(kind: MixerKind, head: HeadKind) -> ModelConfig {
        ModelConfig {
            image_h: 8,
            image_w: 8,
            channels: 1,
            patch_size: 4,
            depth: 1,
            hidden: 8,
            mixer_kind: kind,
            num_heads: 2,
            blocks_k: 2,
            lambda: 0.01,
            keep_fraction: 1.0,
            mlp_ratio: 2.0,
            bias_mode: crate::mixers::BiasMode::IdentityResidual,
            head,
        }
    }

    #[test]
    fn short_training_runs_are_finite_for_all_mixers() {
        let data = make_synthetic_dataset(8, 8, 8, 1, 21).unwrap();
        for kind in [MixerKind::Sa, MixerKind::Gfn, MixerKind::Fno, MixerKind::Afno] {
            let mut model = Model::build(tiny_train_cfg(kind, HeadKind::Reconstruction), 5).unwrap();
            let tc = TrainConfig {
                epochs: 4,
                batch_size: 4,
                warmup_steps: 2,
                seed: 11,
                ..TrainConfig::default()
            };
            let hist = train(&mut model, Task::Inpaint, &data, &tc, None).unwrap();
            assert_eq!(hist.rows.len(), 8);
            assert!(hist.rows.iter().all(|r| r.loss.is_finite()), "{kind}");
        }
    }

    #[test]
    fn classify_training_improves_over_chance_on_trainset() {
        let data = make_synthetic_dataset(32, 8, 8, 1, 23).unwrap();
        let mut model =
            Model::build(tiny_train_cfg(MixerKind::Afno, HeadKind::Classification(4)), 7).unwrap();
        let tc = TrainConfig {
            epochs: 60,
            batch_size: 8,
            lr: 3e-3,
            warmup_steps: 10,
            seed: 13,
            ..TrainConfig::default()
        };
        let hist = train(&mut model, Task::Classify, &data, &tc, None).unwrap();
        let k = hist.rows.len();
        let first: f64 = hist.rows[..8].iter().map(|r| r.loss).sum::<f64>() / 8.0;
        let last: f64 = hist.rows[k - 8..].iter().map(|r| r.loss).sum::<f64>() / 8.0;
        assert!(last < first, "CE should drop: {first} -> {last}");
        let acc = eval_classify(&model, &data).unwrap();
        assert!(acc > 0.4, "train accuracy {acc} should beat chance 0.25");
    }

    #[test]
    fn sixteen_sample_overfit_drops_loss_by_ninety_percent() {
        // capacity sanity check: each mixer kind memorizes a fixed
        // 16-sample set within 1500 steps
        let data = make_synthetic_dataset(16, 16, 16, 1, 61).unwrap();
        for kind in [MixerKind::Sa, MixerKind::Gfn, MixerKind::Fno, MixerKind::Afno] {
            let mut cfg = tiny_train_cfg(kind, HeadKind::Reconstruction);
            cfg.image_h = 16;
            cfg.image_w = 16;
            cfg.hidden = 32;
            cfg.blocks_k = 4;
            cfg.num_heads = 4;
            let mut model = Model::build(cfg, 62).unwrap();
            let tc = TrainConfig {
                epochs: 1500, // batch 16 of 16 samples: one step per epoch
                batch_size: 16,
                lr: 5e-3,
                min_lr: 1e-5,
                warmup_steps: 50,
                weight_decay: 0.0,
                grad_clip: 1.0,
                seed: 63,
                mask_steps: None,
            };
            let hist = train(&mut model, Task::Inpaint, &data, &tc, None).unwrap();
            let initial = hist.rows[0].loss;
            let late: f64 = hist.rows[hist.rows.len() - 50..]
                .iter()
                .map(|r| r.loss)
                .sum::<f64>()
                / 50.0;
            assert!(
                late <= 0.1 * initial,
                "{kind}: loss {initial:.5} -> {late:.5} is less than a 90% drop"
            );
        }
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let data = make_synthetic_dataset(8, 8, 8, 1, 29).unwrap();
        let run = || {
            let mut model =
                Model::build(tiny_train_cfg(MixerKind::Afno, HeadKind::Reconstruction), 9).unwrap();
            let tc = TrainConfig {
                epochs: 3,
                batch_size: 4,
                warmup_steps: 2,
                seed: 17,
                ..TrainConfig::default()
            };
            train(&mut model, Task::Inpaint, &data, &tc, None).unwrap().to_csv()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mismatched_head_is_rejected() {
        let data = make_synthetic_dataset(4, 8, 8, 1, 31).unwrap();
        let mut model =
            Model::build(tiny_train_cfg(MixerKind::Afno, HeadKind::Classification(4)), 3).unwrap();
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::default()
        };
        assert!(train(&mut model, Task::Inpaint, &data, &tc, None).is_err());
    }

    #[test]
    fn absurd_learning_rate_aborts_with_nonfinite_loss() {
        let data = make_synthetic_dataset(8, 8, 8, 1, 37).unwrap();
        let mut model =
            Model::build(tiny_train_cfg(MixerKind::Afno, HeadKind::Reconstruction), 11).unwrap();
        let tc = TrainConfig {
            epochs: 200,
            batch_size: 4,
            lr: 1e18,
            min_lr: 1e17,
            warmup_steps: 0,
            grad_clip: 1e30,
            seed: 19,
            ..TrainConfig::default()
        };
        match train(&mut model, Task::Inpaint, &data, &tc, None) {
            Err(Error::NonFiniteLoss { .. }) => {}
            other => panic!("expected non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn pgm_preview_counts_masked_pixels() {
        let m = random_walk_mask(8, 8, 0, 1).unwrap();
        let dir = std::env::temp_dir().join("afno-pgm-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("mask.pgm");
        m.write_pgm(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_end = bytes.windows(4).position(|w| w == b"255\n").unwrap() + 4;
        let zeros = bytes[header_end..].iter().filter(|&&b| b == 0).count();
        assert_eq!(zeros, 1);
        std::fs::remove_file(&path).ok();
    }
}


