use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ForwardTrace, Model};
use crate::dataset::Context;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// One mean per neuron, over the target positions of the reference contexts.
    Pooled,
    /// One mean per neuron and absolute position, over every position of the
    /// reference sequences.
    PerPosition,
}

#[derive(Debug, Clone, PartialEq)]
enum Table {
    Pooled(DVector<f64>),
    PerPosition { means: DMatrix<f64>, counts: Vec<usize> },
}

/// Frozen per-neuron MLP activation means used by mean ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronMeans {
    pooling: Pooling,
    layers: Vec<Table>,
}

impl NeuronMeans {
    /// Means over a reference dataset of contexts.
    pub fn compute(model: &Model, contexts: &[Context], pooling: Pooling) -> Result<NeuronMeans> {
        if contexts.is_empty() {
            return Err(Error::invalid("neuron means need a non-empty reference dataset"));
        }
        let traces: Vec<ForwardTrace> = contexts
            .par_iter()
            .map(|c| model.forward(&c.tokens, &[]))
            .collect::<Result<_>>()?;
        let targets: Vec<usize> = contexts.iter().map(|c| c.target).collect();
        Self::from_traces(model, &traces, &targets, pooling)
    }

    /// Means from already computed baseline traces; `targets[i]` belongs to `traces[i]`.
    pub fn from_traces(model: &Model, traces: &[ForwardTrace], targets: &[usize], pooling: Pooling) -> Result<NeuronMeans> {
        if traces.is_empty() || traces.len() != targets.len() {
            return Err(Error::invalid("neuron means: traces and targets must be non-empty and aligned"));
        }
        let cfg = model.config();
        let layers = (0..cfg.n_layers)
            .map(|l| match pooling {
                Pooling::Pooled => {
                    let mut sum = DVector::zeros(cfg.d_mlp);
                    for (trace, &t) in traces.iter().zip(targets) {
                        sum += trace.mlp_activations[l].row(t).transpose();
                    }
                    Table::Pooled(sum / traces.len() as f64)
                }
                Pooling::PerPosition => {
                    let mut sums = DMatrix::zeros(cfg.max_seq_len, cfg.d_mlp);
                    let mut counts = vec![0usize; cfg.max_seq_len];
                    for trace in traces {
                        let acts = &trace.mlp_activations[l];
                        for t in 0..acts.nrows() {
                            let mut row = sums.row_mut(t);
                            row += acts.row(t);
                            counts[t] += 1;
                        }
                    }
                    for (t, &c) in counts.iter().enumerate() {
                        if c > 0 {
                            let mut row = sums.row_mut(t);
                            row /= c as f64;
                        }
                    }
                    Table::PerPosition { means: sums, counts }
                }
            })
            .collect();
        Ok(NeuronMeans { pooling, layers })
    }

    /// Pooled means given directly, one vector of length `d_mlp` per layer.
    pub fn from_pooled(layers: Vec<DVector<f64>>) -> NeuronMeans {
        NeuronMeans {
            pooling: Pooling::Pooled,
            layers: layers.into_iter().map(Table::Pooled).collect(),
        }
    }

    pub fn pooling(&self) -> Pooling {
        self.pooling
    }

    /// Mean used to replace `neuron` of `layer` at `position`.
    pub fn value(&self, layer: usize, neuron: usize, position: usize) -> f64 {
        match &self.layers[layer] {
            Table::Pooled(v) => v[neuron],
            Table::PerPosition { means, .. } => means[(position, neuron)],
        }
    }

    /// Pooled mean vector of a layer (for per-position tables, the count-weighted average).
    pub fn layer_means(&self, layer: usize) -> DVector<f64> {
        match &self.layers[layer] {
            Table::Pooled(v) => v.clone(),
            Table::PerPosition { means, counts } => {
                let total: usize = counts.iter().sum();
                let mut acc = DVector::zeros(means.ncols());
                for (t, &c) in counts.iter().enumerate() {
                    acc += means.row(t).transpose() * c as f64;
                }
                acc / total.max(1) as f64
            }
        }
    }

    pub(crate) fn check_available(&self, layer: usize, seq_len: usize) -> Result<()> {
        match self.layers.get(layer) {
            None => Err(Error::invalid(format!("no neuron means for layer {layer}"))),
            Some(Table::Pooled(_)) => Ok(()),
            Some(Table::PerPosition { counts, .. }) => {
                if counts.iter().take(seq_len).any(|&c| c == 0) || counts.len() < seq_len {
                    Err(Error::invalid(format!(
                        "per-position means unavailable for some position below {seq_len}"
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }
}
