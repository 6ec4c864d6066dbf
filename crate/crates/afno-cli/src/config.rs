//! Flat, line-oriented run configuration: `key = value` pairs with `#`
//! comments and dotted sections. Parsing and serialization round-trip to
//! identity.

use afno_core::backbone::{HeadKind, ModelConfig};
use afno_core::error::{Error, Result};
use afno_core::mixers::{BiasMode, MixerKind};
use afno_core::tasks::{Task, TrainConfig};

fn cfg_err(message: impl Into<String>) -> Error {
    Error::Format {
        message: message.into(),
    }
}

/// Merged model + training + task + data configuration for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub task: Task,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data_train: usize,
    pub data_eval: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            task: Task::Inpaint,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data_train: 256,
            data_eval: 32,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| cfg_err(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        // one seed drives the whole run
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let pu = |v: &str| -> Result<usize> {
            v.parse::<usize>()
                .map_err(|_| cfg_err(format!("expected integer, got '{v}'")))
        };
        let pf = |v: &str| -> Result<f64> {
            v.parse::<f64>()
                .map_err(|_| cfg_err(format!("expected number, got '{v}'")))
        };
        match key {
            "seed" => {
                self.seed = value
                    .parse::<u64>()
                    .map_err(|_| cfg_err(format!("expected u64 seed, got '{value}'")))?;
            }
            "task" => {
                self.task = match value {
                    "inpaint" => Task::Inpaint,
                    "classify" => Task::Classify,
                    other => return Err(cfg_err(format!("unknown task '{other}'"))),
                };
            }
            "model.image_h" => self.model.image_h = pu(value)?,
            "model.image_w" => self.model.image_w = pu(value)?,
            "model.channels" => self.model.channels = pu(value)?,
            "model.patch_size" => self.model.patch_size = pu(value)?,
            "model.depth" => self.model.depth = pu(value)?,
            "model.hidden" => self.model.hidden = pu(value)?,
            "model.mixer" => self.model.mixer_kind = value.parse::<MixerKind>()?,
            "model.num_heads" => self.model.num_heads = pu(value)?,
            "model.blocks" => self.model.blocks_k = pu(value)?,
            "model.lambda" => self.model.lambda = pf(value)?,
            "model.keep_fraction" => self.model.keep_fraction = pf(value)?,
            "model.mlp_ratio" => self.model.mlp_ratio = pf(value)?,
            "model.bias_mode" => {
                self.model.bias_mode = match value {
                    "identity" => BiasMode::IdentityResidual,
                    "conv1d" => BiasMode::Conv1dResidual,
                    other => return Err(cfg_err(format!("unknown bias mode '{other}'"))),
                };
            }
            "model.head" => {
                self.model.head = if value == "reconstruction" {
                    HeadKind::Reconstruction
                } else if value == "none" {
                    HeadKind::None
                } else if let Some(n) = value.strip_prefix("classification:") {
                    HeadKind::Classification(pu(n)?)
                } else {
                    return Err(cfg_err(format!("unknown head '{value}'")));
                };
            }
            "train.epochs" => self.train.epochs = pu(value)?,
            "train.batch_size" => self.train.batch_size = pu(value)?,
            "train.lr" => self.train.lr = pf(value)?,
            "train.min_lr" => self.train.min_lr = pf(value)?,
            "train.warmup_steps" => self.train.warmup_steps = pu(value)?,
            "train.weight_decay" => self.train.weight_decay = pf(value)?,
            "train.grad_clip" => self.train.grad_clip = pf(value)?,
            "train.mask_steps" => {
                self.train.mask_steps = if value == "auto" {
                    None
                } else {
                    Some(pu(value)?)
                };
            }
            "data.train" => self.data_train = pu(value)?,
            "data.eval" => self.data_eval = pu(value)?,
            other => return Err(cfg_err(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut out = String::new();
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!(
            "task = {}\n",
            match self.task {
                Task::Inpaint => "inpaint",
                Task::Classify => "classify",
            }
        ));
        out.push('\n');
        out.push_str(&format!("model.image_h = {}\n", m.image_h));
        out.push_str(&format!("model.image_w = {}\n", m.image_w));
        out.push_str(&format!("model.channels = {}\n", m.channels));
        out.push_str(&format!("model.patch_size = {}\n", m.patch_size));
        out.push_str(&format!("model.depth = {}\n", m.depth));
        out.push_str(&format!("model.hidden = {}\n", m.hidden));
        out.push_str(&format!("model.mixer = {}\n", m.mixer_kind));
        out.push_str(&format!("model.num_heads = {}\n", m.num_heads));
        out.push_str(&format!("model.blocks = {}\n", m.blocks_k));
        out.push_str(&format!("model.lambda = {}\n", m.lambda));
        out.push_str(&format!("model.keep_fraction = {}\n", m.keep_fraction));
        out.push_str(&format!("model.mlp_ratio = {}\n", m.mlp_ratio));
        out.push_str(&format!(
            "model.bias_mode = {}\n",
            match m.bias_mode {
                BiasMode::IdentityResidual => "identity",
                BiasMode::Conv1dResidual => "conv1d",
            }
        ));
        out.push_str(&format!(
            "model.head = {}\n",
            match m.head {
                HeadKind::Reconstruction => "reconstruction".to_string(),
                HeadKind::Classification(n) => format!("classification:{n}"),
                HeadKind::None => "none".to_string(),
            }
        ));
        out.push('\n');
        out.push_str(&format!("train.epochs = {}\n", t.epochs));
        out.push_str(&format!("train.batch_size = {}\n", t.batch_size));
        out.push_str(&format!("train.lr = {}\n", t.lr));
        out.push_str(&format!("train.min_lr = {}\n", t.min_lr));
        out.push_str(&format!("train.warmup_steps = {}\n", t.warmup_steps));
        out.push_str(&format!("train.weight_decay = {}\n", t.weight_decay));
        out.push_str(&format!("train.grad_clip = {}\n", t.grad_clip));
        out.push_str(&format!(
            "train.mask_steps = {}\n",
            match t.mask_steps {
                None => "auto".to_string(),
                Some(s) => s.to_string(),
            }
        ));
        out.push('\n');
        out.push_str(&format!("data.train = {}\n", self.data_train));
        out.push_str(&format!("data.eval = {}\n", self.data_eval));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        let mut cfg = RunConfig::default();
        cfg.seed = 99;
        cfg.task = Task::Classify;
        cfg.model.hidden = 64;
        cfg.model.lambda = 0.015;
        cfg.model.head = HeadKind::Classification(4);
        cfg.model.mixer_kind = MixerKind::Gfn;
        cfg.train.mask_steps = Some(77);
        cfg.train.lr = 0.0025;
        cfg.train.seed = 99;
        let text = cfg.serialize();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        // and a second round trip is byte-stable
        assert_eq!(back.serialize(), text);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "# a comment\n\nseed = 7   # trailing\nmodel.hidden = 16\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.hidden, 16);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::parse("bogus.key = 3\n").is_err());
        assert!(RunConfig::parse("model.hidden = banana\n").is_err());
        assert!(RunConfig::parse("no equals sign\n").is_err());
        // invariant violations surface at parse time
        assert!(RunConfig::parse("model.patch_size = 5\n").is_err());
        assert!(RunConfig::parse("train.lr = 0\n").is_err());
    }

    #[test]
    fn top_level_seed_flows_into_training() {
        let cfg = RunConfig::parse("seed = 1234\n").unwrap();
        assert_eq!(cfg.train.seed, 1234);
    }
}
