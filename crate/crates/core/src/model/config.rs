use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::sparse_attn::AttnConfig;

/// Byte-level vocabulary: 256 byte tokens plus BOS and EOS.
pub const BYTE_VOCAB: usize = 258;
pub const BOS: usize = 256;
pub const EOS: usize = 257;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub vocab_size: usize,
    pub attn_ratio: f64,
    /// Sparse attention settings; its `d_k`/`d_v` mirror the model's.
    pub attn: AttnConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 8,
            d_model: 128,
            d_k: 64,
            d_v: 64,
            vocab_size: BYTE_VOCAB,
            attn_ratio: 0.25,
            attn: AttnConfig::default(),
            seed: 0,
        }
    }
}

/// Keys accepted by [`ModelConfig::set`] and the config file, in file order.
pub const CONFIG_KEYS: [&str; 11] = [
    "n_layers",
    "d_model",
    "d_k",
    "d_v",
    "vocab_size",
    "attn_ratio",
    "seed",
    "chunk_size",
    "top_k",
    "cache_budget",
    "obs_window",
];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("vocab_size", self.vocab_size),
        ] {
            if v < 1 {
                return Err(Error::InvalidConfig(format!("{name} >= 1 violated")));
            }
        }
        if !(0.0..=1.0).contains(&self.attn_ratio) {
            return Err(Error::InvalidConfig("attn_ratio in [0, 1] violated".into()));
        }
        if self.attn.d_k != self.d_k || self.attn.d_v != self.d_v {
            return Err(Error::InvalidConfig("attention dims must match d_k and d_v".into()));
        }
        self.attn.validate()
    }

    /// Sets one field from its text form; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::InvalidConfig(format!("bad value `{value}` for `{key}`"));
        let count = || value.parse::<usize>().map_err(|_| bad());
        match key {
            "n_layers" => self.n_layers = count()?,
            "d_model" => self.d_model = count()?,
            "d_k" => {
                self.d_k = count()?;
                self.attn.d_k = self.d_k;
            }
            "d_v" => {
                self.d_v = count()?;
                self.attn.d_v = self.d_v;
            }
            "vocab_size" => self.vocab_size = count()?,
            "attn_ratio" => self.attn_ratio = value.parse().map_err(|_| bad())?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "chunk_size" => self.attn.chunk_size = count()?,
            "top_k" => self.attn.top_k = count()?,
            "cache_budget" => {
                self.attn.cache_budget = match value {
                    "none" | "inf" => None,
                    _ => Some(count()?),
                }
            }
            "obs_window" => self.attn.obs_window = count()?,
            _ => return Err(Error::InvalidConfig(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("override `{}` is not key=value", o.as_ref())))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Parses the flat `key = value` format. Blank lines and `#` comments are
    /// ignored; keys not present keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let budget = self
            .attn
            .cache_budget
            .map_or_else(|| "none".to_string(), |m| m.to_string());
        let values = [
            self.n_layers.to_string(),
            self.d_model.to_string(),
            self.d_k.to_string(),
            self.d_v.to_string(),
            self.vocab_size.to_string(),
            self.attn_ratio.to_string(),
            self.seed.to_string(),
            self.attn.chunk_size.to_string(),
            self.attn.top_k.to_string(),
            budget,
            self.attn.obs_window.to_string(),
        ];
        for (k, v) in CONFIG_KEYS.iter().zip(values) {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }
}
