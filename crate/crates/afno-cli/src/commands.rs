//! Subcommand implementations. Every artifact lands inside the
//! designated output directory.

use std::path::Path;

use afno_core::analysis;
use afno_core::backbone::Model;
use afno_core::error::{Error, Result};
use afno_core::mixers::{self, MixerKind};
use afno_core::rng::StreamRng;
use afno_core::tasks::{self, Task};
use afno_core::tensor::{grad_check_params, io, ParamSet, Tensor};

use crate::config::RunConfig;

fn arg_err(message: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op: "cli",
        message: message.into(),
    }
}

#[derive(Default, Clone, Debug)]
pub struct TrainOverrides {
    pub seed: Option<u64>,
    pub mixer: Option<MixerKind>,
    pub lambda: Option<f64>,
    pub blocks: Option<usize>,
    pub keep_fraction: Option<f64>,
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| arg_err(format!("config {}: {e}", path.display())))?;
    RunConfig::parse(&text)
}

/// Train per config (plus flag overrides), then evaluate on a held-out
/// synthetic set. Writes history.csv, checkpoint.afnt, manifest.txt, and
/// eval.txt into the output directory.
pub fn cmd_train(config_path: &Path, out: &Path, ov: &TrainOverrides) -> Result<()> {
    let mut cfg = load_config(config_path)?;
    if let Some(s) = ov.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(m) = ov.mixer {
        cfg.model.mixer_kind = m;
    }
    if let Some(l) = ov.lambda {
        cfg.model.lambda = l;
    }
    if let Some(b) = ov.blocks {
        cfg.model.blocks_k = b;
    }
    if let Some(f) = ov.keep_fraction {
        cfg.model.keep_fraction = f;
    }
    cfg.model.validate()?;
    std::fs::create_dir_all(out)?;

    let data = tasks::make_synthetic_dataset(
        cfg.data_train,
        cfg.model.image_h,
        cfg.model.image_w,
        cfg.model.channels,
        cfg.seed,
    )?;
    let eval_seed = StreamRng::new(cfg.seed, "eval-data").next_u64();
    let eval_data = tasks::make_synthetic_dataset(
        cfg.data_eval,
        cfg.model.image_h,
        cfg.model.image_w,
        cfg.model.channels,
        eval_seed,
    )?;

    let mut model = Model::build(cfg.model.clone(), cfg.seed)?;
    let history = tasks::train(&mut model, cfg.task, &data, &cfg.train, Some(out))?;
    std::fs::write(out.join("config.txt"), cfg.serialize())?;

    let mut eval_report = String::new();
    match cfg.task {
        Task::Inpaint => {
            let steps = cfg
                .train
                .mask_steps
                .unwrap_or_else(|| tasks::default_mask_steps(cfg.model.image_h, cfg.model.image_w));
            let ev = tasks::eval_inpaint(&model, &eval_data, steps, cfg.seed)?;
            eval_report.push_str(&format!("masked_psnr_db = {}\n", ev.masked_psnr));
            eval_report.push_str(&format!("baseline_psnr_db = {}\n", ev.baseline_psnr));
            eval_report.push_str(&format!("mean_ssim = {}\n", ev.mean_ssim));
            eval_report.push_str(&format!("masked_fraction = {}\n", ev.masked_fraction));
            println!(
                "eval: masked PSNR {:.3} dB (zero-fill baseline {:.3} dB), SSIM {:.4}",
                ev.masked_psnr, ev.baseline_psnr, ev.mean_ssim
            );
        }
        Task::Classify => {
            let acc = tasks::eval_classify(&model, &eval_data)?;
            eval_report.push_str(&format!("accuracy = {acc}\n"));
            println!("eval: accuracy {acc:.4}");
        }
    }
    std::fs::write(out.join("eval.txt"), eval_report)?;
    println!(
        "trained {} steps; artifacts in {}",
        history.rows.len(),
        out.display()
    );
    Ok(())
}

pub fn parse_sizes(spec: &str) -> Result<Vec<(usize, usize)>> {
    spec.split(',')
        .map(|tok| {
            let (h, w) = tok
                .trim()
                .split_once('x')
                .ok_or_else(|| arg_err(format!("size '{tok}' is not HxW")))?;
            Ok((
                h.parse::<usize>().map_err(|_| arg_err(format!("bad height '{h}'")))?,
                w.parse::<usize>().map_err(|_| arg_err(format!("bad width '{w}'")))?,
            ))
        })
        .collect()
}

pub fn cmd_bench(
    mixer: MixerKind,
    sizes: &[(usize, usize)],
    d: usize,
    k: usize,
    repeats: usize,
    warmup: usize,
    out: Option<&Path>,
) -> Result<()> {
    let rows = analysis::bench_latency(mixer, sizes, d, k, repeats, warmup)?;
    println!("kind  grid        N      median(s)    iqr(s)");
    for r in &rows {
        println!(
            "{:<5} {:>4}x{:<4} {:>6}  {:>10.6}  {:>9.6}",
            r.kind.to_string(),
            r.grid_h,
            r.grid_w,
            r.n,
            r.median_seconds,
            r.iqr_seconds
        );
    }
    if rows.len() >= 2 {
        let ratio = rows.last().unwrap().median_seconds / rows[0].median_seconds;
        let nratio = rows.last().unwrap().n as f64 / rows[0].n as f64;
        println!("growth: t({}N)/t(N) = {ratio:.2}", nratio);
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("bench.csv"), analysis::latency_csv(&rows))?;
    }
    Ok(())
}

/// Prints the bare formula value (integers without a trailing .0), or the
/// full per-kind table plus model-scale estimates with --table.
pub fn cmd_flops(
    kind: MixerKind,
    n: usize,
    d: usize,
    k: usize,
    table: bool,
    out: Option<&Path>,
) -> Result<()> {
    let v = analysis::flops_formula(kind, n, d, k)?;
    if !table {
        println!("{}", format_count(v));
        return Ok(());
    }
    println!("mixer FLOPs and parameter formulas at N={n}, d={d}, k={k} (log2):");
    println!("kind   formula_flops      formula_params");
    for kk in [MixerKind::Sa, MixerKind::Gfn, MixerKind::Fno, MixerKind::Afno] {
        println!(
            "{:<5}  {:>16}  {:>16}",
            kk.to_string(),
            format_count(analysis::flops_formula(kk, n, d, k)?),
            format_count(analysis::params_formula(kk, n, d, k)?)
        );
    }
    println!();
    println!("model-scale estimates (12 layers, 56x56 tokens, d=768, 4x4x3 patches):");
    for kk in [MixerKind::Sa, MixerKind::Gfn, MixerKind::Fno, MixerKind::Afno] {
        let est = analysis::vit_b4_estimate(kk, k.max(1))?;
        println!("{:<5}  {:>10.1} GFLOPs", kk.to_string(), est.total() / 1e9);
    }
    println!(
        "afno quadratic-dominance crossover at d={d}, k={k}: N* = {}",
        analysis::afno_sa_crossover(d, k.max(1))?
    );
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.csv"), analysis::standard_report(n, d, k)?)?;
    }
    Ok(())
}

// integers print bare; everything else keeps the float form
fn format_count(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 9.0e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

pub fn cmd_sparsity(
    config_path: &Path,
    checkpoint: &Path,
    inputs: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config_path)?;
    let mut model = Model::build(cfg.model.clone(), cfg.seed)?;
    model.load_checkpoint(checkpoint)?;
    let data = tasks::make_synthetic_dataset(
        inputs.max(1),
        cfg.model.image_h,
        cfg.model.image_w,
        cfg.model.channels,
        StreamRng::new(seed, "sparsity-inputs").next_u64(),
    )?;
    let stats = analysis::sparsity_stats(&model, &data.images)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("sparsity.csv"), analysis::sparsity_csv(&stats))?;
    for layer in &stats {
        let (bottom, top) = analysis::quartile_sparsity(layer);
        println!(
            "layer {}: mean zero-fraction {:.4} (bottom quartile {:.4}, top quartile {:.4})",
            layer.layer, layer.average, bottom, top
        );
    }
    Ok(())
}

/// Finite-difference audit of every mixer's parameters on a 4x4x8 input.
/// Returns false when any parameter exceeds the tolerance.
pub fn cmd_gradcheck(kinds: &[MixerKind], eps: f64, tol: f64, seed: u64) -> Result<bool> {
    let (h, w, d) = (4usize, 4usize, 8usize);
    let x = afno_core::spectral::flat_spectrum_input(h, w, d, seed)?;
    let n = (h * w * d) as f64;
    let mut all_ok = true;
    for &kind in kinds {
        let mut rng = StreamRng::new(seed, &format!("gradcheck/{kind}"));
        let mut ps = ParamSet::new();
        let params = mixers::audit_mixer(&mut ps, kind, "m", h, w, d, &mut rng)?;
        let xc = x.clone();
        let pc = params.clone();
        let report = grad_check_params(
            move |g, ps| {
                let xv = g.constant(xc.clone());
                let y = mixers::mix(g, ps, xv, &pc)?;
                let sq = g.mul(y, y)?;
                let t = g.sum(sq)?;
                g.scale(t, 1.0 / n)
            },
            &ps,
            eps,
        )?;
        for (name, err) in report {
            let ok = err < tol;
            all_ok &= ok;
            println!(
                "{kind:<5} {name:<14} max_rel_error {err:.3e}  {}",
                if ok { "ok" } else { "FAIL" }
            );
        }
    }
    Ok(all_ok)
}

pub fn cmd_maskgen(h: usize, w: usize, steps: usize, seed: u64, out: &Path) -> Result<()> {
    let mask = tasks::random_walk_mask(h, w, steps, seed)?;
    std::fs::create_dir_all(out)?;
    let data: Vec<f64> = mask.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let t = Tensor::from_real(&[h, w], data)?;
    io::write_tensor(&out.join("mask.afnt"), &t)?;
    mask.write_pgm(&out.join("mask.pgm"))?;
    println!(
        "masked {} of {} cells ({:.4} fraction) over {} steps",
        mask.masked_count(),
        h * w,
        mask.masked_fraction(),
        steps
    );
    Ok(())
}

pub fn parse_mixer(s: &str) -> Result<MixerKind> {
    s.parse::<MixerKind>()
}
