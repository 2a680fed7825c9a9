//! Contexts, token groups and the activation dataset shared by every stage.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenGroup {
    Rare,
    Common,
}

impl TokenGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenGroup::Rare => "rare",
            TokenGroup::Common => "common",
        }
    }
}

/// A token sequence with the position of one analyzed token occurrence.
///
/// The context's loss is the next-token cross-entropy of the prediction made
/// at `target`, so `target` must leave room for a following token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Context {
    pub tokens: Vec<TokenId>,
    pub target: usize,
}

impl Context {
    pub fn new(tokens: Vec<TokenId>, target: usize) -> Result<Self> {
        let ctx = Context { tokens, target };
        ctx.validate()?;
        Ok(ctx)
    }

    pub fn validate(&self) -> Result<()> {
        if self.target + 1 >= self.tokens.len() {
            return Err(Error::invalid(format!(
                "context target {} needs a following token (length {})",
                self.target,
                self.tokens.len()
            )));
        }
        Ok(())
    }

    pub fn target_token(&self) -> TokenId {
        self.tokens[self.target]
    }
}

/// Per-context metadata carried alongside activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextRecord {
    pub tokens: Vec<TokenId>,
    pub target: usize,
    pub group: Option<TokenGroup>,
    pub loss: f64,
}

impl ContextRecord {
    pub fn context(&self) -> Context {
        Context {
            tokens: self.tokens.clone(),
            target: self.target,
        }
    }
}

/// Attention rows captured at each context's target position:
/// `[context][layer][head][key position]`, zero-padded to `key_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRows {
    pub layers: Vec<usize>,
    pub n_heads: usize,
    pub key_len: usize,
    /// Flat row-major payload of shape `[n_contexts, layers.len(), n_heads, key_len]`.
    pub data: Vec<f64>,
}

impl AttentionRows {
    pub fn row(&self, context: usize, layer_idx: usize, head: usize) -> &[f64] {
        let stride_h = self.key_len;
        let stride_l = self.n_heads * stride_h;
        let stride_c = self.layers.len() * stride_l;
        let start = context * stride_c + layer_idx * stride_l + head * stride_h;
        &self.data[start..start + self.key_len]
    }

    pub fn n_contexts(&self) -> usize {
        let per = self.layers.len() * self.n_heads * self.key_len;
        if per == 0 {
            0
        } else {
            self.data.len() / per
        }
    }
}

/// Neuron x context activation matrix of one MLP layer plus per-context
/// metadata and, optionally, attention rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDataset {
    pub layer: usize,
    /// Rows are neurons, columns are contexts.
    pub activations: DMatrix<f64>,
    pub contexts: Vec<ContextRecord>,
    pub attention: Option<AttentionRows>,
}

impl ActivationDataset {
    pub fn n_neurons(&self) -> usize {
        self.activations.nrows()
    }

    pub fn n_contexts(&self) -> usize {
        self.contexts.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.activations.ncols() != self.contexts.len() {
            return Err(Error::invalid(format!(
                "activation matrix has {} context columns but {} context records",
                self.activations.ncols(),
                self.contexts.len()
            )));
        }
        for (i, c) in self.contexts.iter().enumerate() {
            if c.target >= c.tokens.len() {
                return Err(Error::invalid(format!("context {i}: target outside sequence")));
            }
        }
        if let Some(att) = &self.attention {
            if att.n_contexts() != self.contexts.len() {
                return Err(Error::invalid("attention rows do not match context count"));
            }
        }
        Ok(())
    }

    /// Column indices of contexts belonging to `group`.
    pub fn group_indices(&self, group: TokenGroup) -> Vec<usize> {
        self.contexts
            .iter()
            .enumerate()
            .filter(|(_, c)| c.group == Some(group))
            .map(|(i, _)| i)
            .collect()
    }

    /// Neuron x context sub-matrix restricted to the given context columns.
    pub fn columns(&self, idx: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(self.activations.nrows(), idx.len(), |r, c| {
            self.activations[(r, idx[c])]
        })
    }
}
