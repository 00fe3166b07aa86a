//! Flat `key = value` run configuration with CLI overrides.
//!
//! Unknown keys are fatal so that typos never silently fall back to a
//! default. `#` starts a comment. The serialized form is deterministic and
//! is what checkpoint files embed.

use std::path::PathBuf;

use crate::backbone::{BackboneConfig, BlockPlacement};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: usize,
    /// Raw-mask grid size.
    pub k: usize,
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub lr: f64,
    /// Desk-scale batch; the reference setup trains with batch 32.
    pub batch: usize,
    pub steps: usize,
    /// Extra checkpoint cadence; 0 writes only the final checkpoint.
    pub save_every: usize,
    pub preset: String,
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub d_text: usize,
    pub vocab_size: usize,
    /// Minimum anomalous-pixel fraction for a raw-mask cell to activate.
    pub min_mask_fraction: f64,
    /// Persisted vocabulary rows (populated in checkpoint snapshots).
    pub vocab_tokens: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            image_size: 32,
            k: 5,
            t_steps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
            lr: 1e-4,
            batch: 4,
            steps: 2000,
            save_every: 0,
            preset: "default".into(),
            dataset: PathBuf::from("fixtures"),
            checkpoint: PathBuf::from("model.dhd"),
            loss_csv: PathBuf::from("loss.csv"),
            base_channels: 16,
            channel_mult: vec![1, 1, 2, 2],
            d_text: 64,
            vocab_size: 64,
            min_mask_fraction: 0.0,
            vocab_tokens: Vec::new(),
        }
    }
}

fn join_usize(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    pub fn depth(&self) -> usize {
        self.channel_mult.len()
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            image_size: self.image_size,
            base_channels: self.base_channels,
            depth: self.depth(),
            channel_mult: self.channel_mult.clone(),
            n_heads: 1,
            vocab_size: self.vocab_size,
            d_text: self.d_text,
            norm_groups: 4,
        }
    }

    pub fn placement(&self) -> Result<BlockPlacement> {
        BlockPlacement::preset(&self.preset, self.depth())
    }

    pub fn validate(&self) -> Result<()> {
        for (name, ok) in [
            ("image_size", self.image_size > 0),
            ("k", self.k > 0),
            ("t_steps", self.t_steps > 0),
            ("batch", self.batch > 0),
            ("base_channels", self.base_channels > 0),
            ("d_text", self.d_text > 0),
            ("vocab_size", self.vocab_size > 1),
        ] {
            if !ok {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::Config("beta range invalid".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.min_mask_fraction) {
            return Err(Error::Config("min_mask_fraction must be in [0,1]".into()));
        }
        if self.k > self.image_size {
            return Err(Error::Config(format!(
                "k = {} exceeds image size {}",
                self.k, self.image_size
            )));
        }
        self.placement()?;
        self.backbone().validate()
    }

    /// Deterministic serialization; `parse` round-trips it.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("# helix-diff run configuration (desk scale).\n");
        s.push_str("# Reference-scale training uses lr = 1e-4 at batch 32 on 256px data;\n");
        s.push_str("# the defaults here keep every check runnable on one CPU core.\n");
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("image_size = {}\n", self.image_size));
        s.push_str(&format!("k = {}\n", self.k));
        s.push_str(&format!("t_steps = {}\n", self.t_steps));
        s.push_str(&format!("beta_start = {}\n", self.beta_start));
        s.push_str(&format!("beta_end = {}\n", self.beta_end));
        s.push_str(&format!("lr = {}\n", self.lr));
        s.push_str(&format!("batch = {}\n", self.batch));
        s.push_str(&format!("steps = {}\n", self.steps));
        s.push_str(&format!("save_every = {}\n", self.save_every));
        s.push_str(&format!("preset = {}\n", self.preset));
        s.push_str(&format!("dataset = {}\n", self.dataset.display()));
        s.push_str(&format!("checkpoint = {}\n", self.checkpoint.display()));
        s.push_str(&format!("loss_csv = {}\n", self.loss_csv.display()));
        s.push_str(&format!("base_channels = {}\n", self.base_channels));
        s.push_str(&format!("channel_mult = {}\n", join_usize(&self.channel_mult)));
        s.push_str(&format!("d_text = {}\n", self.d_text));
        s.push_str(&format!("vocab_size = {}\n", self.vocab_size));
        s.push_str(&format!("min_mask_fraction = {}\n", self.min_mask_fraction));
        s.push_str(&format!("vocab_tokens = {}\n", self.vocab_tokens.join(",")));
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    lineno + 1
                )));
            };
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Apply one key/value pair; unknown keys are fatal.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "image_size" => self.image_size = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "t_steps" => self.t_steps = num(key, value)?,
            "beta_start" => self.beta_start = num(key, value)?,
            "beta_end" => self.beta_end = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "save_every" => self.save_every = num(key, value)?,
            "preset" => self.preset = value.to_string(),
            "dataset" => self.dataset = PathBuf::from(value),
            "checkpoint" => self.checkpoint = PathBuf::from(value),
            "loss_csv" => self.loss_csv = PathBuf::from(value),
            "base_channels" => self.base_channels = num(key, value)?,
            "channel_mult" => {
                self.channel_mult = value
                    .split(',')
                    .map(|v| num::<usize>(key, v.trim()))
                    .collect::<Result<_>>()?;
            }
            "d_text" => self.d_text = num(key, value)?,
            "vocab_size" => self.vocab_size = num(key, value)?,
            "min_mask_fraction" => self.min_mask_fraction = num(key, value)?,
            "vocab_tokens" => {
                self.vocab_tokens = if value.is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|v| v.trim().to_string()).collect()
                };
            }
            other => {
                return Err(Error::Config(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn unknown_key_is_fatal() {
        let err = RunConfig::parse("sed = 5\n").unwrap_err();
        assert!(err.to_string().contains("unknown config key 'sed'"));
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = RunConfig::parse("# comment\n\nseed = 9 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn vocab_tokens_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.vocab_tokens = vec!["bent".into(), "grid".into()];
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back.vocab_tokens, cfg.vocab_tokens);
    }

    #[test]
    fn validation_rejects_bad_presets_and_ranges() {
        let mut cfg = RunConfig::default();
        cfg.preset = "tab9".into();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.beta_end = 1.5;
        assert!(cfg.validate().is_err());
    }
}
