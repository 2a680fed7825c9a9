//! Deterministic decoder-only toy transformer with intervention points.
//!
//! Pre-norm residual blocks, multi-head causal self-attention, GELU MLP,
//! final layer norm and an untied unembedding. All arithmetic is `f64`;
//! initial weights are rounded to `f32` so they survive the dump format
//! unchanged.

mod corpus;
mod forward;
mod means;
pub mod planted;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use corpus::{generate_corpus, generate_corpus_with, SuccessorRule, SyntheticCorpus};
pub use forward::{ForwardTrace, Intervention, PatchSource};
pub use means::{NeuronMeans, Pooling};

use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    /// MLP hidden width.
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: DVector<f64>,
    pub ln1_bias: DVector<f64>,
    /// Per-head projections, each `d_model x d_head`.
    pub w_q: Vec<DMatrix<f64>>,
    pub w_k: Vec<DMatrix<f64>>,
    pub w_v: Vec<DMatrix<f64>>,
    /// Output projection from concatenated head outputs, `d_model x d_model`.
    pub w_o: DMatrix<f64>,
    pub ln2_gain: DVector<f64>,
    pub ln2_bias: DVector<f64>,
    pub w_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    pub w_out: DMatrix<f64>,
    pub b_out: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// `vocab_size x d_model`
    pub embed: DMatrix<f64>,
    /// `max_seq_len x d_model`
    pub pos: DMatrix<f64>,
    pub layers: Vec<LayerWeights>,
    pub lnf_gain: DVector<f64>,
    pub lnf_bias: DVector<f64>,
    /// `d_model x vocab_size`
    pub unembed: DMatrix<f64>,
}

impl Weights {
    /// Every parameter tensor as `(name, rows, cols, row-major values)` in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, usize, usize, Vec<f64>)> {
        fn mat(name: String, m: &DMatrix<f64>) -> (String, usize, usize, Vec<f64>) {
            let rows = m.nrows();
            let cols = m.ncols();
            let data = (0..rows)
                .flat_map(|r| (0..cols).map(move |c| (r, c)))
                .map(|(r, c)| m[(r, c)])
                .collect();
            (name, rows, cols, data)
        }
        fn vec(name: String, v: &DVector<f64>) -> (String, usize, usize, Vec<f64>) {
            (name, 1, v.len(), v.iter().copied().collect())
        }
        let mut out = vec![mat("embed".into(), &self.embed), mat("pos".into(), &self.pos)];
        for (l, lw) in self.layers.iter().enumerate() {
            out.push(vec(format!("layers.{l}.ln1_gain"), &lw.ln1_gain));
            out.push(vec(format!("layers.{l}.ln1_bias"), &lw.ln1_bias));
            for h in 0..lw.w_q.len() {
                out.push(mat(format!("layers.{l}.w_q.{h}"), &lw.w_q[h]));
                out.push(mat(format!("layers.{l}.w_k.{h}"), &lw.w_k[h]));
                out.push(mat(format!("layers.{l}.w_v.{h}"), &lw.w_v[h]));
            }
            out.push(mat(format!("layers.{l}.w_o"), &lw.w_o));
            out.push(vec(format!("layers.{l}.ln2_gain"), &lw.ln2_gain));
            out.push(vec(format!("layers.{l}.ln2_bias"), &lw.ln2_bias));
            out.push(mat(format!("layers.{l}.w_in"), &lw.w_in));
            out.push(vec(format!("layers.{l}.b_in"), &lw.b_in));
            out.push(mat(format!("layers.{l}.w_out"), &lw.w_out));
            out.push(vec(format!("layers.{l}.b_out"), &lw.b_out));
        }
        out.push(vec("lnf_gain".into(), &self.lnf_gain));
        out.push(vec("lnf_bias".into(), &self.lnf_bias));
        out.push(mat("unembed".into(), &self.unembed));
        out
    }

    /// Inverse of [`Weights::named_tensors`]; shapes are taken from `config`.
    pub fn from_named_tensors(
        config: &ModelConfig,
        mut lookup: impl FnMut(&str) -> Option<Vec<f64>>,
    ) -> Result<Weights> {
        let mut fetch_mat = |name: &str, rows: usize, cols: usize| -> Result<DMatrix<f64>> {
            let data = lookup(name).ok_or_else(|| Error::invalid(format!("missing weight tensor `{name}`")))?;
            if data.len() != rows * cols {
                return Err(Error::invalid(format!(
                    "weight tensor `{name}` has {} values, expected {}",
                    data.len(),
                    rows * cols
                )));
            }
            Ok(DMatrix::from_row_slice(rows, cols, &data))
        };
        let d = config.d_model;
        let dh = config.d_head();
        let as_vec = |m: DMatrix<f64>| DVector::from_iterator(m.len(), m.iter().copied());
        let embed = fetch_mat("embed", config.vocab_size, d)?;
        let pos = fetch_mat("pos", config.max_seq_len, d)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let ln1_gain = as_vec(fetch_mat(&format!("layers.{l}.ln1_gain"), 1, d)?);
            let ln1_bias = as_vec(fetch_mat(&format!("layers.{l}.ln1_bias"), 1, d)?);
            let mut w_q = Vec::new();
            let mut w_k = Vec::new();
            let mut w_v = Vec::new();
            for h in 0..config.n_heads {
                w_q.push(fetch_mat(&format!("layers.{l}.w_q.{h}"), d, dh)?);
                w_k.push(fetch_mat(&format!("layers.{l}.w_k.{h}"), d, dh)?);
                w_v.push(fetch_mat(&format!("layers.{l}.w_v.{h}"), d, dh)?);
            }
            let w_o = fetch_mat(&format!("layers.{l}.w_o"), d, d)?;
            let ln2_gain = as_vec(fetch_mat(&format!("layers.{l}.ln2_gain"), 1, d)?);
            let ln2_bias = as_vec(fetch_mat(&format!("layers.{l}.ln2_bias"), 1, d)?);
            let w_in = fetch_mat(&format!("layers.{l}.w_in"), d, config.d_mlp)?;
            let b_in = as_vec(fetch_mat(&format!("layers.{l}.b_in"), 1, config.d_mlp)?);
            let w_out = fetch_mat(&format!("layers.{l}.w_out"), config.d_mlp, d)?;
            let b_out = as_vec(fetch_mat(&format!("layers.{l}.b_out"), 1, d)?);
            layers.push(LayerWeights {
                ln1_gain,
                ln1_bias,
                w_q,
                w_k,
                w_v,
                w_o,
                ln2_gain,
                ln2_bias,
                w_in,
                b_in,
                w_out,
                b_out,
            });
        }
        let lnf_gain = as_vec(fetch_mat("lnf_gain", 1, d)?);
        let lnf_bias = as_vec(fetch_mat("lnf_bias", 1, d)?);
        let unembed = fetch_mat("unembed", d, config.vocab_size)?;
        Ok(Weights {
            embed,
            pos,
            layers,
            lnf_gain,
            lnf_bias,
            unembed,
        })
    }
}

/// An immutable model instance. Forward passes take `&self` and may run concurrently.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    weights: Weights,
}

/// Build a model with seeded Gaussian weights (mean 0, std 0.02), zero biases
/// and unit layer-norm gains.
pub fn init_model(config: ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut gaussian = |rows: usize, cols: usize| -> DMatrix<f64> {
        // Row-major draw order, so the stream layout does not depend on nalgebra's storage.
        let vals: Vec<f64> = (0..rows * cols)
            .map(|_| normal.sample(&mut rng) as f32 as f64)
            .collect();
        DMatrix::from_row_slice(rows, cols, &vals)
    };
    let d = config.d_model;
    let dh = config.d_head();
    let embed = gaussian(config.vocab_size, d);
    let pos = gaussian(config.max_seq_len, d);
    let layers = (0..config.n_layers)
        .map(|_| {
            let w_q = (0..config.n_heads).map(|_| gaussian(d, dh)).collect();
            let w_k = (0..config.n_heads).map(|_| gaussian(d, dh)).collect();
            let w_v = (0..config.n_heads).map(|_| gaussian(d, dh)).collect();
            let w_o = gaussian(d, d);
            let w_in = gaussian(d, config.d_mlp);
            let w_out = gaussian(config.d_mlp, d);
            LayerWeights {
                ln1_gain: DVector::from_element(d, 1.0),
                ln1_bias: DVector::zeros(d),
                w_q,
                w_k,
                w_v,
                w_o,
                ln2_gain: DVector::from_element(d, 1.0),
                ln2_bias: DVector::zeros(d),
                w_in,
                b_in: DVector::zeros(config.d_mlp),
                w_out,
                b_out: DVector::zeros(d),
            }
        })
        .collect();
    let unembed = gaussian(d, config.vocab_size);
    let weights = Weights {
        embed,
        pos,
        layers,
        lnf_gain: DVector::from_element(d, 1.0),
        lnf_bias: DVector::zeros(d),
        unembed,
    };
    Ok(Model { config, weights })
}

impl Model {
    /// Assemble a model from explicit weights, checking every shape against `config`.
    pub fn from_weights(config: ModelConfig, weights: Weights) -> Result<Model> {
        config.validate()?;
        let d = config.d_model;
        let dh = config.d_head();
        let check = |name: &str, got: (usize, usize), want: (usize, usize)| -> Result<()> {
            if got != want {
                return Err(Error::config(format!(
                    "weight `{name}` has shape {got:?}, expected {want:?}"
                )));
            }
            Ok(())
        };
        check("embed", weights.embed.shape(), (config.vocab_size, d))?;
        check("pos", weights.pos.shape(), (config.max_seq_len, d))?;
        check("unembed", weights.unembed.shape(), (d, config.vocab_size))?;
        check("lnf_gain", (weights.lnf_gain.len(), 1), (d, 1))?;
        check("lnf_bias", (weights.lnf_bias.len(), 1), (d, 1))?;
        if weights.layers.len() != config.n_layers {
            return Err(Error::config(format!(
                "{} layers given, config says {}",
                weights.layers.len(),
                config.n_layers
            )));
        }
        for (l, lw) in weights.layers.iter().enumerate() {
            for proj in [&lw.w_q, &lw.w_k, &lw.w_v] {
                if proj.len() != config.n_heads {
                    return Err(Error::config(format!("layer {l}: wrong number of head projections")));
                }
                for m in proj {
                    check(&format!("layers.{l} head projection"), m.shape(), (d, dh))?;
                }
            }
            check(&format!("layers.{l}.w_o"), lw.w_o.shape(), (d, d))?;
            check(&format!("layers.{l}.w_in"), lw.w_in.shape(), (d, config.d_mlp))?;
            check(&format!("layers.{l}.w_out"), lw.w_out.shape(), (config.d_mlp, d))?;
            check(&format!("layers.{l}.b_in"), (lw.b_in.len(), 1), (config.d_mlp, 1))?;
            for (name, v) in [
                ("ln1_gain", &lw.ln1_gain),
                ("ln1_bias", &lw.ln1_bias),
                ("ln2_gain", &lw.ln2_gain),
                ("ln2_bias", &lw.ln2_bias),
                ("b_out", &lw.b_out),
            ] {
                check(&format!("layers.{l}.{name}"), (v.len(), 1), (d, 1))?;
            }
        }
        Ok(Model { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn into_weights(self) -> Weights {
        self.weights
    }

    /// SHA-256 over the configuration and every parameter (little-endian f64), hex encoded.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        let c = &self.config;
        for v in [c.n_layers, c.n_heads, c.d_model, c.d_mlp, c.vocab_size, c.max_seq_len] {
            hasher.update((v as u64).to_le_bytes());
        }
        hasher.update(c.seed.to_le_bytes());
        for (name, _, _, data) in self.weights.named_tensors() {
            hasher.update(name.as_bytes());
            for x in data {
                hasher.update(x.to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
