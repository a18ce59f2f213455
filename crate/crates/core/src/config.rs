//! Run configuration: desk-scale defaults, flat `key = value` files, and a
//! printable dump of every setting.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}: {why}")]
    BadValue {
        key: String,
        value: String,
        why: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

impl DecodeMode {
    fn parse(s: &str) -> Option<Self> {
        if s == "greedy" {
            return Some(DecodeMode::Greedy);
        }
        if let Some(w) = s.strip_prefix("beam:") {
            let width: usize = w.parse().ok()?;
            if width >= 1 {
                return Some(DecodeMode::Beam(width));
            }
        }
        None
    }
}

impl std::fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DecodeMode::Greedy => write!(f, "greedy"),
            DecodeMode::Beam(w) => write!(f, "beam:{w}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    // model
    pub dim: usize,
    pub heads: usize,
    pub dec_layers: usize,
    pub ffn_mult: usize,
    pub mlp_hidden: usize,
    pub video_tokens: usize,
    pub feature_dim: usize,
    pub intervals: usize,
    pub parts: usize,
    pub max_caption_len: usize,
    pub prompt_slots: usize,
    pub slots_per_gap: usize,
    pub score_decimals: usize,
    // losses and optimizer
    pub lambda_sparse: f64,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_fraction: f64,
    pub total_steps: u64,
    // data
    pub n_train: usize,
    pub n_test: usize,
    pub captions_per_sample: usize,
    pub noise_sigma: f64,
    pub score_min: f64,
    pub score_max: f64,
    // decoding
    pub decode: DecodeMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 17,
            dim: 32,
            heads: 4,
            dec_layers: 2,
            ffn_mult: 2,
            mlp_hidden: 32,
            video_tokens: 8,
            feature_dim: 16,
            intervals: 8,
            parts: 2,
            max_caption_len: 24,
            prompt_slots: 6,
            slots_per_gap: 2,
            score_decimals: 1,
            lambda_sparse: 5.0,
            peak_lr: 3e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_fraction: 0.10,
            total_steps: 3000,
            n_train: 32,
            n_test: 10,
            captions_per_sample: 2,
            noise_sigma: 0.01,
            score_min: 0.0,
            score_max: 100.0,
            decode: DecodeMode::Greedy,
        }
    }
}

macro_rules! config_fields {
    ($macro:ident) => {
        $macro! {
            seed, dim, heads, dec_layers, ffn_mult, mlp_hidden, video_tokens,
            feature_dim, intervals, parts, max_caption_len, prompt_slots,
            slots_per_gap, score_decimals, lambda_sparse, peak_lr,
            weight_decay, beta1, beta2, adam_eps, warmup_fraction,
            total_steps, n_train, n_test, captions_per_sample, noise_sigma,
            score_min, score_max
        }
    };
}

impl RunConfig {
    /// Parse a flat `key = value` document over the defaults. `#` starts a
    /// comment; blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Malformed {
                line: lineno + 1,
                text: raw.to_string(),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e: T::Err| ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
                why: e.to_string(),
            })
        }
        macro_rules! assign {
            ($($field:ident),* $(,)?) => {
                match key {
                    $(stringify!($field) => { self.$field = parse_as(key, value)?; return Ok(()); })*
                    _ => {}
                }
            };
        }
        config_fields!(assign);
        if key == "decode" {
            self.decode = DecodeMode::parse(value).ok_or_else(|| ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
                why: "expected greedy or beam:<width>".to_string(),
            })?;
            return Ok(());
        }
        Err(ConfigError::UnknownKey(key.to_string()))
    }

    /// All settings as a parseable document.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        macro_rules! emit {
            ($($field:ident),* $(,)?) => {
                $(writeln!(out, "{} = {}", stringify!($field), self.$field).unwrap();)*
            };
        }
        config_fields!(emit);
        writeln!(out, "decode = {}", self.decode).unwrap();
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive: [(&str, usize); 12] = [
            ("dim", self.dim),
            ("heads", self.heads),
            ("dec_layers", self.dec_layers),
            ("ffn_mult", self.ffn_mult),
            ("mlp_hidden", self.mlp_hidden),
            ("video_tokens", self.video_tokens),
            ("feature_dim", self.feature_dim),
            ("intervals", self.intervals),
            ("parts", self.parts),
            ("max_caption_len", self.max_caption_len),
            ("captions_per_sample", self.captions_per_sample),
            ("n_train", self.n_train),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        if self.dim % self.heads != 0 {
            return Err(ConfigError::Invalid(format!(
                "dim {} must be divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(ConfigError::Invalid(
                "warmup_fraction must lie in (0, 1)".to_string(),
            ));
        }
        if !(self.score_max > self.score_min) {
            return Err(ConfigError::Invalid(
                "score_max must exceed score_min".to_string(),
            ));
        }
        if self.score_decimals > 2 {
            return Err(ConfigError::Invalid(
                "score_decimals must be 0..=2".to_string(),
            ));
        }
        Ok(())
    }

    pub fn schedule(&self) -> crate::optim::Schedule {
        crate::optim::Schedule {
            total_steps: self.total_steps,
            warmup_fraction: self.warmup_fraction,
            peak_lr: self.peak_lr,
            weight_decay: self.weight_decay,
        }
    }

    pub fn adam(&self) -> crate::optim::AdamConfig {
        crate::optim::AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}
