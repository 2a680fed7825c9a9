//! Weight surgery that plants rare-token specialist neurons into the final
//! MLP layer of a toy model.
//!
//! Each planted neuron `j` owns one residual "marker" dimension `j` and one
//! "readout" dimension `n + j`. Rare tokens of successor group `j` get a
//! large marker in their embedding; neuron `j` fires on that marker and
//! writes into its readout dimension, which the unembedding maps onto the
//! group's designated successor token. Every head of that layer also copies
//! the markers it attends to into relay dimensions `2n + j` that neuron `j`
//! reads as well, so part of each neuron's drive arrives through attention
//! spread over all heads. A constant anchor dimension shared by all tokens
//! keeps the layer-norm scale of unmarked tokens away from zero. With a corpus generated under the
//! same [`SuccessorRule`], the neurons cut next-token loss on rare contexts
//! and stay silent elsewhere.

use super::{Model, SuccessorRule};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PlateauPlant {
    /// Embedding marker added to rare tokens. After layer norm it reads as
    /// roughly `sqrt(d_model)`, well above the unit-scale background.
    pub marker: f64,
    /// Input gain of planted neurons on their marker dimension.
    pub input_gain: f64,
    /// Input gain of planted neurons on their relay dimension.
    pub relay_gain: f64,
    /// Input bias of planted neurons.
    pub input_bias: f64,
    /// Output weight of planted neurons onto their readout dimension.
    pub output_gain: f64,
    /// Unembedding weight from a readout dimension to its successor token.
    pub readout_gain: f64,
    /// Total value weight, split evenly over the heads of the last layer,
    /// with which the heads copy the marker they attend to into a relay
    /// dimension the neuron also reads. Zero disables the relay.
    pub head_relay: f64,
    /// Query and key weight folding residual dimension `i` onto head slot
    /// `i mod d_head` in the last layer, so every position attends mostly
    /// to itself. Zero keeps the random attention weights.
    pub self_attention: f64,
    /// Constant added to one otherwise unused residual dimension of every
    /// token. It fixes the layer-norm scale of unmarked tokens, so small
    /// relay leakage from earlier rare tokens is not amplified into firing.
    pub anchor: f64,
}

impl Default for PlateauPlant {
    fn default() -> Self {
        PlateauPlant {
            marker: 1.0,
            input_gain: 4.0,
            relay_gain: 2.0,
            input_bias: -10.0,
            output_gain: 1.0,
            readout_gain: 0.5,
            head_relay: 0.25,
            self_attention: 1.5,
            anchor: 1.0,
        }
    }
}

/// Plant one specialist per successor group into the last layer.
/// Returns the new model and the planted neuron ids (neuron `j` serves group `j`).
pub fn plant_plateau(model: Model, rule: &SuccessorRule, plant: &PlateauPlant) -> Result<(Model, Vec<usize>)> {
    let cfg = model.config().clone();
    let n = rule.n_groups;
    if 2 * n > cfg.d_model {
        return Err(Error::config(format!(
            "planting {n} neurons needs d_model >= {}, got {}",
            2 * n,
            cfg.d_model
        )));
    }
    if n > cfg.d_mlp {
        return Err(Error::config(format!("planting {n} neurons needs d_mlp >= {n}")));
    }
    if plant.head_relay != 0.0 && (n > cfg.d_head() || 3 * n > cfg.d_model) {
        return Err(Error::config(format!(
            "relaying {n} markers needs d_head >= {n} and d_model >= {}, got {} and {}",
            3 * n,
            cfg.d_head(),
            cfg.d_model
        )));
    }
    let anchor = if plant.head_relay != 0.0 { 3 * n } else { 2 * n };
    if plant.anchor != 0.0 && anchor >= cfg.d_model {
        return Err(Error::config(format!(
            "the anchor dimension needs d_model > {anchor}, got {}",
            cfg.d_model
        )));
    }
    let mut w = model.into_weights();
    for token in 0..cfg.vocab_size {
        let t = token as u32;
        if rule.applies(t) {
            w.embed[(token, rule.group(t))] += plant.marker;
        }
        w.embed[(token, anchor)] += plant.anchor;
    }
    let last = w.layers.len() - 1;
    let lw = &mut w.layers[last];
    if plant.self_attention != 0.0 {
        for h in 0..cfg.n_heads {
            for m in [&mut lw.w_q[h], &mut lw.w_k[h]] {
                m.fill(0.0);
                for i in (0..cfg.d_model).filter(|&i| plant.anchor == 0.0 || i != anchor) {
                    m[(i, i % cfg.d_head())] = plant.self_attention;
                }
            }
        }
    }
    for j in 0..n {
        lw.w_in.column_mut(j).fill(0.0);
        lw.w_in[(j, j)] = plant.input_gain;
        lw.b_in[j] = plant.input_bias;
        lw.w_out.row_mut(j).fill(0.0);
        lw.w_out[(j, n + j)] = plant.output_gain;
        // Group j's successor token is token j.
        w.unembed[(n + j, j)] += plant.readout_gain;
        if plant.head_relay != 0.0 {
            let relay = 2 * n + j;
            lw.w_in[(relay, j)] = plant.relay_gain;
            for h in 0..cfg.n_heads {
                lw.w_v[h][(j, j)] = plant.head_relay / cfg.n_heads as f64;
                lw.w_o[(h * cfg.d_head() + j, relay)] = 1.0;
            }
        }
    }
    let model = Model::from_weights(cfg, w)?;
    Ok((model, (0..n).collect()))
}
