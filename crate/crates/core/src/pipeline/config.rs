//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Every key has a default, so an
//! empty file is a valid configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::tokens::TokenGroupSpec;
use crate::error::{Error, Result};
use crate::model::Pooling;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    /// Train-free toy model and synthetic corpus generated in process.
    Simulate,
    /// Activations read from a dump file.
    Dump,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphContexts {
    /// Correlations over rare-token contexts only.
    Rare,
    /// Correlations over every context.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub source: Source,
    pub dump_path: Option<PathBuf>,

    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub seq_len: usize,

    pub n_sequences: usize,
    pub zipf_exponent: f64,
    /// Plant specialist neurons and the matching bigram rule.
    pub plant: bool,
    pub successor_groups: usize,
    pub successor_first_token: u32,
    pub successor_probability: f64,

    pub split: TokenGroupSpec,
    /// Restrict rare contexts to tokens with a matched common partner (and vice versa).
    pub matched_only: bool,
    pub max_contexts: usize,

    pub pooling: Pooling,
    pub plateau_threshold: f64,
    pub rapid_decay_threshold: f64,

    pub graph_threshold: f64,
    pub graph_contexts: GraphContexts,
    pub louvain_restarts: usize,
    pub n_controls: usize,
    pub n_bootstrap: usize,
    pub spectral_k_min: usize,
    pub spectral_k_max: usize,

    /// First and last analyzed attention layer; `None` is the final third.
    pub attention_layers: Option<(usize, usize)>,
    pub n_random_heads: usize,
    pub r_threshold: f64,

    /// Plateau neurons for dump input, where no influence is computed.
    pub plateau_neurons: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            source: Source::Simulate,
            dump_path: None,
            n_layers: 3,
            n_heads: 4,
            d_model: 32,
            d_mlp: 64,
            vocab_size: 120,
            seq_len: 16,
            n_sequences: 1000,
            zipf_exponent: 1.1,
            plant: true,
            successor_groups: 4,
            successor_first_token: 90,
            successor_probability: 0.9,
            split: TokenGroupSpec::default(),
            matched_only: false,
            max_contexts: 120,
            pooling: Pooling::Pooled,
            plateau_threshold: 0.5,
            rapid_decay_threshold: -0.5,
            graph_threshold: crate::graph::DEFAULT_THRESHOLD,
            graph_contexts: GraphContexts::Rare,
            louvain_restarts: 20,
            n_controls: 100,
            n_bootstrap: 50,
            spectral_k_min: 2,
            spectral_k_max: 8,
            attention_layers: None,
            n_random_heads: 10,
            r_threshold: crate::routing::DEFAULT_R_THRESHOLD,
            plateau_neurons: Vec::new(),
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master random seed"),
    ("source", "simulate | dump"),
    ("dump_path", "activation dump to read when source = dump"),
    ("n_layers", "toy model layers"),
    ("n_heads", "attention heads per layer"),
    ("d_model", "residual width"),
    ("d_mlp", "MLP hidden width"),
    ("vocab_size", "vocabulary size"),
    ("seq_len", "sequence length"),
    ("n_sequences", "synthetic corpus size"),
    ("zipf_exponent", "unigram Zipf exponent"),
    ("plant", "plant specialist neurons (true | false)"),
    ("successor_groups", "planted successor groups"),
    ("successor_first_token", "first token id following the planted rule"),
    ("successor_probability", "probability of the planted successor"),
    ("split_mode", "percentile | absolute"),
    ("split_percentile", "rare share of the vocabulary, percent"),
    ("rare_max", "absolute mode: counts below are rare"),
    ("common_min", "absolute mode: counts above are common"),
    ("matched_only", "keep only feature-matched token pairs"),
    ("max_contexts", "contexts sampled per token group"),
    ("pooling", "pooled | per-position ablation means"),
    ("plateau_threshold", "residual above which a neuron is plateau"),
    ("rapid_decay_threshold", "residual below which a neuron is rapid-decay"),
    ("graph_threshold", "minimum |r| for a correlation edge"),
    ("graph_contexts", "rare | all contexts for correlations"),
    ("louvain_restarts", "Louvain restarts"),
    ("n_controls", "random control groups"),
    ("n_bootstrap", "context resamples for intervals"),
    ("spectral_k_min", "smallest spectral cluster count"),
    ("spectral_k_max", "largest spectral cluster count"),
    ("attention_layers", "first-last analyzed layers, e.g. 1-2 (default final third)"),
    ("n_random_heads", "heads drawn for the random-head ablation"),
    ("r_threshold", "mean correlation at or above which routing is shared"),
    ("plateau_neurons", "comma-separated neuron ids (dump input)"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("invalid value {value:?} for {key}, expected true or false"))),
    }
}

fn parse_range(key: &str, value: &str) -> Result<(usize, usize)> {
    let (a, b) = value
        .split_once('-')
        .ok_or_else(|| Error::config(format!("invalid value {value:?} for {key}, expected first-last")))?;
    Ok((parse(key, a.trim())?, parse(key, b.trim())?))
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| match e {
                    Error::Config(m) => Error::config(format!("line {}: {m}", i + 1)),
                    other => other,
                })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        ExperimentConfig::from_text(&text)
    }

    /// Sets one key from its text form. Does not validate cross-key constraints.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "source" => {
                self.source = match value {
                    "simulate" => Source::Simulate,
                    "dump" => Source::Dump,
                    _ => return Err(Error::config(format!("invalid source {value:?}"))),
                }
            }
            "dump_path" => self.dump_path = (!value.is_empty()).then(|| PathBuf::from(value)),
            "n_layers" => self.n_layers = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "d_mlp" => self.d_mlp = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "seq_len" => self.seq_len = parse(key, value)?,
            "n_sequences" => self.n_sequences = parse(key, value)?,
            "zipf_exponent" => self.zipf_exponent = parse(key, value)?,
            "plant" => self.plant = parse_bool(key, value)?,
            "successor_groups" => self.successor_groups = parse(key, value)?,
            "successor_first_token" => self.successor_first_token = parse(key, value)?,
            "successor_probability" => self.successor_probability = parse(key, value)?,
            "split_mode" => {
                self.split = match (value, &self.split) {
                    ("percentile", TokenGroupSpec::Percentile { .. }) | ("absolute", TokenGroupSpec::Absolute { .. }) => {
                        self.split.clone()
                    }
                    ("percentile", _) => TokenGroupSpec::default(),
                    ("absolute", _) => TokenGroupSpec::Absolute {
                        rare_max: 100,
                        common_min: 10_000,
                    },
                    _ => return Err(Error::config(format!("invalid split_mode {value:?}"))),
                }
            }
            "split_percentile" => match &mut self.split {
                TokenGroupSpec::Percentile { percentile } => *percentile = parse(key, value)?,
                _ => return Err(Error::config("split_percentile needs split_mode = percentile before it")),
            },
            "rare_max" => match &mut self.split {
                TokenGroupSpec::Absolute { rare_max, .. } => *rare_max = parse(key, value)?,
                _ => return Err(Error::config("rare_max needs split_mode = absolute before it")),
            },
            "common_min" => match &mut self.split {
                TokenGroupSpec::Absolute { common_min, .. } => *common_min = parse(key, value)?,
                _ => return Err(Error::config("common_min needs split_mode = absolute before it")),
            },
            "matched_only" => self.matched_only = parse_bool(key, value)?,
            "max_contexts" => self.max_contexts = parse(key, value)?,
            "pooling" => {
                self.pooling = match value {
                    "pooled" => Pooling::Pooled,
                    "per-position" => Pooling::PerPosition,
                    _ => return Err(Error::config(format!("invalid pooling {value:?}"))),
                }
            }
            "plateau_threshold" => self.plateau_threshold = parse(key, value)?,
            "rapid_decay_threshold" => self.rapid_decay_threshold = parse(key, value)?,
            "graph_threshold" => self.graph_threshold = parse(key, value)?,
            "graph_contexts" => {
                self.graph_contexts = match value {
                    "rare" => GraphContexts::Rare,
                    "all" => GraphContexts::All,
                    _ => return Err(Error::config(format!("invalid graph_contexts {value:?}"))),
                }
            }
            "louvain_restarts" => self.louvain_restarts = parse(key, value)?,
            "n_controls" => self.n_controls = parse(key, value)?,
            "n_bootstrap" => self.n_bootstrap = parse(key, value)?,
            "spectral_k_min" => self.spectral_k_min = parse(key, value)?,
            "spectral_k_max" => self.spectral_k_max = parse(key, value)?,
            "attention_layers" => {
                self.attention_layers = match value {
                    "" | "auto" => None,
                    _ => Some(parse_range(key, value)?),
                }
            }
            "n_random_heads" => self.n_random_heads = parse(key, value)?,
            "r_threshold" => self.r_threshold = parse(key, value)?,
            "plateau_neurons" => {
                self.plateau_neurons = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        if self.source == Source::Dump && self.dump_path.is_none() {
            return Err(Error::config("source = dump needs dump_path"));
        }
        if self.seq_len < 2 {
            return Err(Error::config("seq_len must be at least 2"));
        }
        if self.n_sequences == 0 || self.vocab_size < 2 {
            return Err(Error::config("the corpus needs sequences and at least two tokens"));
        }
        if !(self.zipf_exponent > 0.0 && self.zipf_exponent.is_finite()) {
            return Err(Error::config("zipf_exponent must be positive"));
        }
        if !(0.0..=1.0).contains(&self.successor_probability) {
            return Err(Error::config("successor_probability outside [0, 1]"));
        }
        if self.plant && (self.successor_groups == 0 || self.successor_first_token as usize >= self.vocab_size) {
            return Err(Error::config("planting needs successor groups and a first token inside the vocabulary"));
        }
        if self.max_contexts < 2 {
            return Err(Error::config("max_contexts must be at least 2"));
        }
        if !(self.plateau_threshold > 0.0) || !(self.rapid_decay_threshold < 0.0) {
            return Err(Error::config("plateau_threshold must be positive and rapid_decay_threshold negative"));
        }
        if !(0.0..1.0).contains(&self.graph_threshold) {
            return Err(Error::config("graph_threshold outside [0, 1)"));
        }
        if self.louvain_restarts == 0 || self.n_controls < 2 {
            return Err(Error::config("need louvain_restarts >= 1 and n_controls >= 2"));
        }
        if self.spectral_k_min < 1 || self.spectral_k_min > self.spectral_k_max {
            return Err(Error::config("need 1 <= spectral_k_min <= spectral_k_max"));
        }
        if let Some((a, b)) = self.attention_layers {
            if a > b {
                return Err(Error::config(format!("attention_layers {a}-{b} is empty")));
            }
        }
        if !(-1.0..=1.0).contains(&self.r_threshold) {
            return Err(Error::config("r_threshold outside [-1, 1]"));
        }
        Ok(())
    }

    /// Text form that [`ExperimentConfig::from_text`] parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put(
            "source",
            match self.source {
                Source::Simulate => "simulate",
                Source::Dump => "dump",
            }
            .into(),
        );
        put(
            "dump_path",
            self.dump_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        put("n_layers", self.n_layers.to_string());
        put("n_heads", self.n_heads.to_string());
        put("d_model", self.d_model.to_string());
        put("d_mlp", self.d_mlp.to_string());
        put("vocab_size", self.vocab_size.to_string());
        put("seq_len", self.seq_len.to_string());
        put("n_sequences", self.n_sequences.to_string());
        put("zipf_exponent", self.zipf_exponent.to_string());
        put("plant", self.plant.to_string());
        put("successor_groups", self.successor_groups.to_string());
        put("successor_first_token", self.successor_first_token.to_string());
        put("successor_probability", self.successor_probability.to_string());
        match self.split {
            TokenGroupSpec::Percentile { percentile } => {
                put("split_mode", "percentile".into());
                put("split_percentile", percentile.to_string());
            }
            TokenGroupSpec::Absolute { rare_max, common_min } => {
                put("split_mode", "absolute".into());
                put("rare_max", rare_max.to_string());
                put("common_min", common_min.to_string());
            }
        }
        put("matched_only", self.matched_only.to_string());
        put("max_contexts", self.max_contexts.to_string());
        put(
            "pooling",
            match self.pooling {
                Pooling::Pooled => "pooled",
                Pooling::PerPosition => "per-position",
            }
            .into(),
        );
        put("plateau_threshold", self.plateau_threshold.to_string());
        put("rapid_decay_threshold", self.rapid_decay_threshold.to_string());
        put("graph_threshold", self.graph_threshold.to_string());
        put(
            "graph_contexts",
            match self.graph_contexts {
                GraphContexts::Rare => "rare",
                GraphContexts::All => "all",
            }
            .into(),
        );
        put("louvain_restarts", self.louvain_restarts.to_string());
        put("n_controls", self.n_controls.to_string());
        put("n_bootstrap", self.n_bootstrap.to_string());
        put("spectral_k_min", self.spectral_k_min.to_string());
        put("spectral_k_max", self.spectral_k_max.to_string());
        put(
            "attention_layers",
            self.attention_layers.map_or("auto".into(), |(a, b)| format!("{a}-{b}")),
        );
        put("n_random_heads", self.n_random_heads.to_string());
        put("r_threshold", self.r_threshold.to_string());
        put(
            "plateau_neurons",
            self.plateau_neurons.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(","),
        );
        out
    }
}
