//! Run configuration and its flat `key=value` text format.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are rejected and
//! missing keys keep their defaults (group size 8, clip 0.2, β 0.4, λ 0.95,
//! 6 turns, temperature 0.9, 2% warmup).

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: cannot parse value {value:?} for {key}")]
    BadValue { line: usize, key: String, value: String },
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("line {line}: invalid {key}: {reason}")]
    Invalid { line: usize, key: String, reason: String },
}

macro_rules! text_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum $name { $($variant),+ }

        impl FromStr for $name {
            type Err = ();
            fn from_str(s: &str) -> Result<Self, ()> {
                match s { $($text => Ok(Self::$variant),)+ _ => Err(()) }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $text),+ })
            }
        }
    };
}

text_enum!(RatioMode { Token => "token", Sequence => "sequence" });
text_enum!(Estimator { Mapo => "mapo", Grpo => "grpo", PpoLite => "ppo_lite", Reinforce => "reinforce" });
text_enum!(Schedule { Cosine => "cosine", Constant => "constant" });
text_enum!(SemanticScoring { Discounted => "discounted", Sum => "sum" });
text_enum!(SemNormalization { ZScore => "zscore", Mean => "mean" });

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub group_size: usize,
    pub epsilon: f64,
    pub beta: f64,
    pub lambda: f64,
    pub max_turns: usize,
    pub temperature: f64,
    pub ratio_mode: RatioMode,
    pub estimator: Estimator,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub schedule: Schedule,
    pub iterations: usize,
    pub batch_queries: usize,
    pub update_epochs: usize,
    pub seed: u64,
    pub grid_size: usize,
    pub embed_dim: usize,
    pub embed_seed: u64,
    pub label_max_tokens: usize,
    pub sem_scoring: SemanticScoring,
    pub sem_normalization: SemNormalization,
    pub max_grad_norm: f64,
    pub weight_decay: f64,
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            epsilon: 0.2,
            beta: 0.4,
            lambda: 0.95,
            max_turns: 6,
            temperature: 0.9,
            ratio_mode: RatioMode::Token,
            estimator: Estimator::Mapo,
            learning_rate: 0.05,
            warmup_fraction: 0.02,
            schedule: Schedule::Cosine,
            iterations: 300,
            batch_queries: 8,
            update_epochs: 1,
            seed: 0,
            grid_size: 8,
            embed_dim: 64,
            embed_seed: 17,
            label_max_tokens: 8,
            sem_scoring: SemanticScoring::Discounted,
            sem_normalization: SemNormalization::ZScore,
            max_grad_norm: 1.0,
            weight_decay: 0.0,
            checkpoint_every: 50,
        }
    }
}

const KEYS: &[&str] = &[
    "group_size", "epsilon", "beta", "lambda", "max_turns", "temperature", "ratio_mode", "estimator",
    "learning_rate", "warmup_fraction", "schedule", "iterations", "batch_queries", "update_epochs", "seed",
    "grid_size", "embed_dim", "embed_seed", "label_max_tokens", "sem_scoring", "sem_normalization",
    "max_grad_norm", "weight_decay", "checkpoint_every",
];

impl RunConfig {
    /// Invariant check; the error names the offending key.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        let fail = |k: &'static str, r: &str| Err((k, r.to_string()));
        if self.group_size < 2 {
            return fail("group_size", "must be at least 2");
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return fail("epsilon", "must lie in (0, 1)");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail("beta", "must be finite and non-negative");
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return fail("lambda", "must lie in (0, 1]");
        }
        if self.max_turns < 1 {
            return fail("max_turns", "must be at least 1");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail("temperature", "must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate", "must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return fail("warmup_fraction", "must lie in [0, 1)");
        }
        if self.iterations < 1 {
            return fail("iterations", "must be at least 1");
        }
        if self.batch_queries < 1 {
            return fail("batch_queries", "must be at least 1");
        }
        if self.update_epochs < 1 {
            return fail("update_epochs", "must be at least 1");
        }
        if self.grid_size < 2 {
            return fail("grid_size", "must be at least 2");
        }
        if self.grid_size * self.grid_size > self.embed_dim {
            return fail("grid_size", "grid_size² must not exceed embed_dim");
        }
        if self.label_max_tokens < 3 {
            return fail("label_max_tokens", "labels need room for three words");
        }
        if !(self.max_grad_norm > 0.0) {
            return fail("max_grad_norm", "must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight_decay", "must be non-negative");
        }
        Ok(())
    }

    /// Semantic weight actually used: the GRPO estimator drops the semantic term.
    pub fn effective_beta(&self) -> f64 {
        if self.estimator == Estimator::Grpo { 0.0 } else { self.beta }
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), ()> {
        fn p<T: FromStr>(v: &str) -> Result<T, ()> {
            v.parse().map_err(|_| ())
        }
        match key {
            "group_size" => self.group_size = p(value)?,
            "epsilon" => self.epsilon = p(value)?,
            "beta" => self.beta = p(value)?,
            "lambda" => self.lambda = p(value)?,
            "max_turns" => self.max_turns = p(value)?,
            "temperature" => self.temperature = p(value)?,
            "ratio_mode" => self.ratio_mode = p(value)?,
            "estimator" => self.estimator = p(value)?,
            "learning_rate" => self.learning_rate = p(value)?,
            "warmup_fraction" => self.warmup_fraction = p(value)?,
            "schedule" => self.schedule = p(value)?,
            "iterations" => self.iterations = p(value)?,
            "batch_queries" => self.batch_queries = p(value)?,
            "update_epochs" => self.update_epochs = p(value)?,
            "seed" => self.seed = p(value)?,
            "grid_size" => self.grid_size = p(value)?,
            "embed_dim" => self.embed_dim = p(value)?,
            "embed_seed" => self.embed_seed = p(value)?,
            "label_max_tokens" => self.label_max_tokens = p(value)?,
            "sem_scoring" => self.sem_scoring = p(value)?,
            "sem_normalization" => self.sem_normalization = p(value)?,
            "max_grad_norm" => self.max_grad_norm = p(value)?,
            "weight_decay" => self.weight_decay = p(value)?,
            "checkpoint_every" => self.checkpoint_every = p(value)?,
            _ => unreachable!("key list and setter out of sync"),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut key_lines: Vec<(&'static str, usize)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            let known = KEYS
                .iter()
                .find(|k| **k == key)
                .ok_or_else(|| ConfigError::UnknownKey { line, key: key.to_string() })?;
            cfg.set(key, value).map_err(|_| ConfigError::BadValue {
                line,
                key: key.to_string(),
                value: value.to_string(),
            })?;
            key_lines.retain(|(k, _)| k != known);
            key_lines.push((known, line));
        }
        cfg.validate().map_err(|(key, reason)| {
            let line = key_lines.iter().find(|(k, _)| *k == key).map_or(0, |(_, l)| *l);
            ConfigError::Invalid { line, key: key.to_string(), reason }
        })?;
        Ok(cfg)
    }

    /// Canonical text: every key, fixed order. `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let values: [String; 24] = [
            self.group_size.to_string(),
            fmt_f64(self.epsilon),
            fmt_f64(self.beta),
            fmt_f64(self.lambda),
            self.max_turns.to_string(),
            fmt_f64(self.temperature),
            self.ratio_mode.to_string(),
            self.estimator.to_string(),
            fmt_f64(self.learning_rate),
            fmt_f64(self.warmup_fraction),
            self.schedule.to_string(),
            self.iterations.to_string(),
            self.batch_queries.to_string(),
            self.update_epochs.to_string(),
            self.seed.to_string(),
            self.grid_size.to_string(),
            self.embed_dim.to_string(),
            self.embed_seed.to_string(),
            self.label_max_tokens.to_string(),
            self.sem_scoring.to_string(),
            self.sem_normalization.to_string(),
            fmt_f64(self.max_grad_norm),
            fmt_f64(self.weight_decay),
            self.checkpoint_every.to_string(),
        ];
        KEYS.iter().zip(values).map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

// Shortest round-tripping representation.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}
