#![allow(dead_code)]

//! Test-only reference implementations, written with plain loops and no
//! shared code with the library's forward pass.

use plateau_core::model::{Model, ModelConfig};

pub fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_mlp: 16,
        vocab_size: 20,
        max_seq_len: 12,
        seed,
    }
}

fn ln(row: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d;
    row.iter()
        .enumerate()
        .map(|(i, x)| (x - mean) / (var + 1e-5).sqrt() * gain[i] + bias[i])
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub struct OracleOptions<'a> {
    /// (layer, head) pairs whose output is removed.
    pub zero_heads: &'a [(usize, usize)],
    /// Replacement hidden vectors: (layer, values for every neuron), applied at every position.
    pub hidden_override: Option<(usize, &'a [f64])>,
    /// (layer, neuron, value): one hidden unit pinned at every position.
    pub neuron_override: Option<(usize, usize, f64)>,
}

impl Default for OracleOptions<'_> {
    fn default() -> Self {
        OracleOptions {
            zero_heads: &[],
            hidden_override: None,
            neuron_override: None,
        }
    }
}

/// Per-position next-token losses from a naive forward pass.
pub fn oracle_losses(model: &Model, tokens: &[u32], opts: &OracleOptions) -> Vec<f64> {
    oracle_run(model, tokens, opts).0
}

/// Losses plus hidden activations `[layer][position][neuron]`.
pub fn oracle_run(model: &Model, tokens: &[u32], opts: &OracleOptions) -> (Vec<f64>, Vec<Vec<Vec<f64>>>) {
    let cfg = model.config();
    let w = model.weights();
    let n = tokens.len();
    let d = cfg.d_model;
    let dh = d / cfg.n_heads;
    let col = |v: &nalgebra::DVector<f64>| v.iter().copied().collect::<Vec<f64>>();
    let mut x: Vec<Vec<f64>> = (0..n)
        .map(|t| (0..d).map(|c| w.embed[(tokens[t] as usize, c)] + w.pos[(t, c)]).collect())
        .collect();
    let mut hiddens = Vec::new();
    for (l, lw) in w.layers.iter().enumerate() {
        let mut layer_hidden = Vec::new();
        let h: Vec<Vec<f64>> = x.iter().map(|r| ln(r, &col(&lw.ln1_gain), &col(&lw.ln1_bias))).collect();
        let mut concat = vec![vec![0.0; d]; n];
        for head in 0..cfg.n_heads {
            if opts.zero_heads.contains(&(l, head)) {
                continue;
            }
            let proj = |m: &nalgebra::DMatrix<f64>, r: &Vec<f64>| -> Vec<f64> {
                (0..dh).map(|j| (0..d).map(|i| r[i] * m[(i, j)]).sum()).collect()
            };
            let q: Vec<Vec<f64>> = h.iter().map(|r| proj(&lw.w_q[head], r)).collect();
            let k: Vec<Vec<f64>> = h.iter().map(|r| proj(&lw.w_k[head], r)).collect();
            let v: Vec<Vec<f64>> = h.iter().map(|r| proj(&lw.w_v[head], r)).collect();
            for i in 0..n {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| (0..dh).map(|e| q[i][e] * k[j][e]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for j in 0..=i {
                    let a = (scores[j] - m).exp() / z;
                    for e in 0..dh {
                        concat[i][head * dh + e] += a * v[j][e];
                    }
                }
            }
        }
        for i in 0..n {
            for c in 0..d {
                x[i][c] += (0..d).map(|e| concat[i][e] * lw.w_o[(e, c)]).sum::<f64>();
            }
        }
        for i in 0..n {
            let h2 = ln(&x[i], &col(&lw.ln2_gain), &col(&lw.ln2_bias));
            let mut hidden: Vec<f64> = match opts.hidden_override {
                Some((ol, vals)) if ol == l => vals.to_vec(),
                _ => (0..cfg.d_mlp)
                    .map(|u| gelu((0..d).map(|c| h2[c] * lw.w_in[(c, u)]).sum::<f64>() + lw.b_in[u]))
                    .collect(),
            };
            if let Some((ol, u, v)) = opts.neuron_override {
                if ol == l {
                    hidden[u] = v;
                }
            }
            for c in 0..d {
                x[i][c] += (0..cfg.d_mlp).map(|u| hidden[u] * lw.w_out[(u, c)]).sum::<f64>() + lw.b_out[c];
            }
            layer_hidden.push(hidden);
        }
        hiddens.push(layer_hidden);
    }
    let losses = (0..n.saturating_sub(1))
        .map(|t| {
            let hf = ln(&x[t], &col(&w.lnf_gain), &col(&w.lnf_bias));
            let logits: Vec<f64> = (0..cfg.vocab_size)
                .map(|v| (0..d).map(|c| hf[c] * w.unembed[(c, v)]).sum())
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            lse - logits[tokens[t + 1] as usize]
        })
        .collect();
    (losses, hiddens)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
