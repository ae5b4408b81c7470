//! Run configuration: flat `key = value` text with `#` comments.
//!
//! Every key is optional and falls back to its default. Unknown or repeated
//! keys are errors. [`RunConfig::to_text`] emits the canonical form used as
//! the checkpoint snapshot; parsing it back yields an equal config.

use std::fmt::Write as _;
use std::path::PathBuf;

use thiserror::Error;

use crate::arm::StatsMode;
use crate::data::{SplitRatios, Vocabulary};
use crate::esam::NegativesMode;
use crate::model::{LossConfig, LossFlags, ModelConfig, QuerySource};
use crate::numerics::AdamWConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key {key:?}")]
    Duplicate { line: usize, key: String },
    #[error("{key}: {message}")]
    Value { key: String, message: String },
}

fn bad(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub n_triplets: usize,
    pub image_size: usize,
    pub split_ratios: SplitRatios,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub mlp_ratio: usize,
    pub share_image_encoders: bool,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub negatives_mode: NegativesMode,
    pub attention_negatives: NegativesMode,
    pub query_source: QuerySource,
    pub stats_mode: StatsMode,
    pub use_late: bool,
    pub use_attention: bool,
    pub use_res: bool,
    pub use_pi: bool,
    pub ablation_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: PathBuf::from("data"),
            out: PathBuf::from("runs"),
            n_triplets: 640,
            image_size: 32,
            split_ratios: SplitRatios::default(),
            embed_dim: 64,
            layers: 2,
            heads: 4,
            patch_size: 8,
            mlp_ratio: 2,
            share_image_encoders: true,
            lambda1: 0.5,
            lambda2: 0.5,
            tau: 0.07,
            lr: 1e-3,
            weight_decay: 0.05,
            batch_size: 32,
            epochs: 30,
            negatives_mode: NegativesMode::InBatch,
            attention_negatives: NegativesMode::AsWritten,
            query_source: QuerySource::U,
            stats_mode: StatsMode::PerBatch,
            use_late: true,
            use_attention: true,
            use_res: true,
            use_pi: true,
            ablation_seeds: vec![0, 1, 2],
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "dataset",
    "out",
    "n_triplets",
    "image_size",
    "split_train",
    "split_val",
    "split_test",
    "embed_dim",
    "layers",
    "heads",
    "patch_size",
    "mlp_ratio",
    "share_image_encoders",
    "lambda1",
    "lambda2",
    "tau",
    "lr",
    "weight_decay",
    "batch_size",
    "epochs",
    "negatives_mode",
    "attention_negatives",
    "query_source",
    "stats_mode",
    "use_late",
    "use_attention",
    "use_res",
    "use_pi",
    "ablation_seeds",
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| bad(key, format!("cannot parse {v:?}")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64, ConfigError> {
    let x: f64 = parse_num(key, v)?;
    if !x.is_finite() {
        return Err(bad(key, "must be finite"));
    }
    Ok(x)
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, format!("expected true or false, got {v:?}"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: line_no })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: line_no });
            }
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line: line_no,
                    key: key.to_string(),
                });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate {
                    line: line_no,
                    key: key.to_string(),
                });
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "dataset" => self.dataset = PathBuf::from(v),
            "out" => self.out = PathBuf::from(v),
            "n_triplets" => self.n_triplets = parse_num(key, v)?,
            "image_size" => self.image_size = parse_num(key, v)?,
            "split_train" => self.split_ratios.0[0] = parse_f64(key, v)?,
            "split_val" => self.split_ratios.0[1] = parse_f64(key, v)?,
            "split_test" => self.split_ratios.0[2] = parse_f64(key, v)?,
            "embed_dim" => self.embed_dim = parse_num(key, v)?,
            "layers" => self.layers = parse_num(key, v)?,
            "heads" => self.heads = parse_num(key, v)?,
            "patch_size" => self.patch_size = parse_num(key, v)?,
            "mlp_ratio" => self.mlp_ratio = parse_num(key, v)?,
            "share_image_encoders" => self.share_image_encoders = parse_bool(key, v)?,
            "lambda1" => self.lambda1 = parse_f64(key, v)?,
            "lambda2" => self.lambda2 = parse_f64(key, v)?,
            "tau" => self.tau = parse_f64(key, v)?,
            "lr" => self.lr = parse_f64(key, v)?,
            "weight_decay" => self.weight_decay = parse_f64(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "negatives_mode" => self.negatives_mode = v.parse().map_err(|e: crate::esam::LossError| bad(key, e.to_string()))?,
            "attention_negatives" => {
                self.attention_negatives = v.parse().map_err(|e: crate::esam::LossError| bad(key, e.to_string()))?
            }
            "query_source" => self.query_source = v.parse().map_err(|e: String| bad(key, e))?,
            "stats_mode" => self.stats_mode = v.parse().map_err(|e: String| bad(key, e))?,
            "use_late" => self.use_late = parse_bool(key, v)?,
            "use_attention" => self.use_attention = parse_bool(key, v)?,
            "use_res" => self.use_res = parse_bool(key, v)?,
            "use_pi" => self.use_pi = parse_bool(key, v)?,
            "ablation_seeds" => {
                let seeds: Result<Vec<u64>, _> = v.split(',').map(|s| parse_num(key, s.trim())).collect();
                self.ablation_seeds = seeds?;
            }
            _ => unreachable!("key list and setter disagree"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.split_ratios
            .validate()
            .map_err(|e| bad("split_train/split_val/split_test", e.to_string()))?;
        if self.n_triplets < 10 {
            return Err(bad("n_triplets", "must be at least 10"));
        }
        for (k, x) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(0.0..=1.0).contains(&x) {
                return Err(bad(k, format!("{x} outside [0, 1]")));
            }
        }
        if self.tau <= 0.0 {
            return Err(bad("tau", "must be positive"));
        }
        if self.lr <= 0.0 {
            return Err(bad("lr", "must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(bad("weight_decay", "must be non-negative"));
        }
        if self.batch_size < 2 {
            return Err(bad("batch_size", "contrastive batches need at least 2 items"));
        }
        if self.layers == 0 {
            return Err(bad("layers", "must be positive"));
        }
        if !self.flags().any() {
            return Err(bad("use_*", "at least one loss term must be enabled"));
        }
        if self.ablation_seeds.is_empty() {
            return Err(bad("ablation_seeds", "must list at least one seed"));
        }
        self.model_config().validate().map_err(|m| bad("model", m))?;
        Ok(())
    }

    pub fn flags(&self) -> LossFlags {
        LossFlags {
            late: self.use_late,
            attention: self.use_attention,
            res: self.use_res,
            pi: self.use_pi,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            tau: self.tau,
            negatives: self.negatives_mode,
            attention_negatives: self.attention_negatives,
            flags: self.flags(),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let regions = if self.patch_size > 0 {
            (self.image_size / self.patch_size).pow(2)
        } else {
            0
        };
        ModelConfig {
            embed_dim: self.embed_dim,
            layers: self.layers,
            heads: self.heads,
            patch_size: self.patch_size,
            image_size: self.image_size,
            vocab_size: Vocabulary::standard().len(),
            // prompt vectors plus the longest templated edit
            max_text_len: regions + 8,
            mlp_ratio: self.mlp_ratio,
            share_image_encoders: self.share_image_encoders,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// Canonical text form, one line per key in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let seeds: Vec<String> = self.ablation_seeds.iter().map(u64::to_string).collect();
        let r = self.split_ratios.0;
        let values: Vec<String> = vec![
            self.seed.to_string(),
            self.dataset.display().to_string(),
            self.out.display().to_string(),
            self.n_triplets.to_string(),
            self.image_size.to_string(),
            format!("{:?}", r[0]),
            format!("{:?}", r[1]),
            format!("{:?}", r[2]),
            self.embed_dim.to_string(),
            self.layers.to_string(),
            self.heads.to_string(),
            self.patch_size.to_string(),
            self.mlp_ratio.to_string(),
            self.share_image_encoders.to_string(),
            format!("{:?}", self.lambda1),
            format!("{:?}", self.lambda2),
            format!("{:?}", self.tau),
            format!("{:?}", self.lr),
            format!("{:?}", self.weight_decay),
            self.batch_size.to_string(),
            self.epochs.to_string(),
            self.negatives_mode.to_string(),
            self.attention_negatives.to_string(),
            self.query_source.to_string(),
            self.stats_mode.to_string(),
            self.use_late.to_string(),
            self.use_attention.to_string(),
            self.use_res.to_string(),
            self.use_pi.to_string(),
            seeds.join(","),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::parse("# only a comment\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut c = RunConfig::default();
        c.lambda2 = 0.25;
        c.query_source = QuerySource::MeanUPrime;
        c.use_pi = false;
        c.ablation_seeds = vec![4, 9];
        let text = c.to_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
        assert_eq!(RunConfig::parse(&text).unwrap().to_text(), text);
    }

    #[test]
    fn parses_values_and_comments() {
        let c = RunConfig::parse("seed = 7 # trailing\nlr=1e-3\nnegatives_mode = as_written\nuse_res = false\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.lr, 1e-3);
        assert_eq!(c.negatives_mode, NegativesMode::AsWritten);
        assert!(!c.use_res);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(RunConfig::parse("colour = red"), Err(ConfigError::UnknownKey { line: 1, .. })));
        assert!(matches!(RunConfig::parse("seed = 1\nseed = 2"), Err(ConfigError::Duplicate { line: 2, .. })));
        assert!(matches!(RunConfig::parse("seed 1"), Err(ConfigError::Syntax { line: 1 })));
        for text in [
            "seed = -1",
            "lambda1 = 1.5",
            "tau = 0",
            "tau = nan",
            "batch_size = 1",
            "split_train = 0.5",
            "patch_size = 7",
            "heads = 3",
            "use_late = yes",
            "query_source = v",
            "stats_mode = ema",
            "negatives_mode = all",
            "use_late = false\nuse_attention = false\nuse_res = false\nuse_pi = false",
            "ablation_seeds = 1,,2",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(ConfigError::Value { .. })), "{text}");
        }
    }
}
