use nalgebra::{DMatrix, DVector};

use super::means::NeuronMeans;
use super::{Model, LN_EPS};
use crate::dataset::TokenId;
use crate::error::{Error, Result};

/// Attention output captured from another run, used as an activation patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSource {
    /// Identifier of the context the activation came from, for bookkeeping.
    pub context: Option<usize>,
    /// `seq_len x d_model` attention-block output (after the output projection).
    pub attn_out: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Intervention {
    /// Replace one MLP hidden unit with its reference-dataset mean at every position.
    NeuronMeanAblate { layer: usize, neuron: usize },
    /// Remove one head: its attention pattern is zeroed, so nothing of its
    /// value stream reaches the output projection.
    HeadZero { layer: usize, head: usize },
    /// Multiply the head's pre-softmax scores by zero (the literal mask
    /// reading). The head then attends uniformly over its causal window.
    HeadLogitMask { layer: usize, head: usize },
    /// Remove every head of a layer.
    LayerHeadsZero { layer: usize },
    /// Zero one MLP hidden unit; used as a non-attention control ablation.
    NonAttentionControl { layer: usize, neuron: usize },
    /// Replace the attention-block output of `layer` with a recorded one.
    ActivationPatch { layer: usize, source: PatchSource },
}

impl Intervention {
    pub fn layer(&self) -> usize {
        match self {
            Intervention::NeuronMeanAblate { layer, .. }
            | Intervention::HeadZero { layer, .. }
            | Intervention::HeadLogitMask { layer, .. }
            | Intervention::LayerHeadsZero { layer }
            | Intervention::NonAttentionControl { layer, .. }
            | Intervention::ActivationPatch { layer, .. } => *layer,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Intervention::NeuronMeanAblate { .. } => "neuron-mean-ablate",
            Intervention::HeadZero { .. } => "head-zero",
            Intervention::HeadLogitMask { .. } => "head-logit-mask",
            Intervention::LayerHeadsZero { .. } => "layer-heads-zero",
            Intervention::NonAttentionControl { .. } => "non-attention-control",
            Intervention::ActivationPatch { .. } => "activation-patch",
        }
    }
}

/// Everything recorded during one forward pass over a single sequence.
///
/// Matrices are position-major: row `t` belongs to sequence position `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub tokens: Vec<TokenId>,
    /// Residual stream entering each layer.
    pub resid_pre: Vec<DMatrix<f64>>,
    /// Attention-block output of each layer, `seq_len x d_model`.
    pub attn_out: Vec<DMatrix<f64>>,
    /// Residual stream between attention and MLP of each layer.
    pub resid_mid: Vec<DMatrix<f64>>,
    /// Post-GELU MLP hidden activations of each layer, `seq_len x d_mlp`.
    pub mlp_activations: Vec<DMatrix<f64>>,
    /// `[layer][head]` attention patterns, `seq_len x seq_len`, causal.
    pub attention_weights: Vec<Vec<DMatrix<f64>>>,
    pub logits: DMatrix<f64>,
    /// Cross-entropy (nats) of predicting token `t + 1` at position `t`.
    pub position_losses: Vec<f64>,
    /// Mean of `position_losses`; zero for single-token sequences.
    pub loss: f64,
}

impl ForwardTrace {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn context_loss(&self, target: usize) -> Result<f64> {
        self.position_losses
            .get(target)
            .copied()
            .ok_or_else(|| Error::invalid(format!("no next-token loss at position {target}")))
    }
}

pub(crate) fn layer_norm(x: &DMatrix<f64>, gain: &DVector<f64>, bias: &DVector<f64>) -> DMatrix<f64> {
    let (n, d) = x.shape();
    let mut out = DMatrix::zeros(n, d);
    for r in 0..n {
        let row = x.row(r);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for c in 0..d {
            out[(r, c)] = (x[(r, c)] - mean) * inv * gain[c] + bias[c];
        }
    }
    out
}

/// GELU, tanh approximation.
pub(crate) fn gelu(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + (K * (x + 0.044_715 * x * x * x)).tanh())
}

fn log_softmax_at(row: &[f64], index: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[index] - lse
}

#[derive(Default)]
struct LayerPlan<'a> {
    zero_heads: Vec<usize>,
    mask_heads: Vec<usize>,
    mean_ablate: Vec<usize>,
    zero_neurons: Vec<usize>,
    patch: Option<&'a PatchSource>,
}

impl Model {
    /// Forward pass with interventions. Mean ablation needs [`Model::forward_with_means`].
    pub fn forward(&self, tokens: &[TokenId], interventions: &[Intervention]) -> Result<ForwardTrace> {
        self.run(tokens, interventions, None)
    }

    pub fn forward_with_means(
        &self,
        tokens: &[TokenId],
        interventions: &[Intervention],
        means: &NeuronMeans,
    ) -> Result<ForwardTrace> {
        self.run(tokens, interventions, Some(means))
    }

    /// Re-run `tokens` with the attention output of `layer` replaced by the
    /// one recorded in `clean`; everything downstream is recomputed.
    pub fn patch_activation(&self, tokens: &[TokenId], clean: &ForwardTrace, layer: usize) -> Result<ForwardTrace> {
        if clean.seq_len() != tokens.len() {
            return Err(Error::invalid(format!(
                "patch shape mismatch: clean trace has {} positions, sequence has {}",
                clean.seq_len(),
                tokens.len()
            )));
        }
        let attn_out = clean
            .attn_out
            .get(layer)
            .ok_or_else(|| Error::invalid(format!("layer {layer} out of range")))?
            .clone();
        self.forward(
            tokens,
            &[Intervention::ActivationPatch {
                layer,
                source: PatchSource { context: None, attn_out },
            }],
        )
    }

    fn validate_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(t) = tokens.iter().find(|t| **t as usize >= self.config.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {t} out of range for vocab_size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn plan<'a>(
        &self,
        seq_len: usize,
        interventions: &'a [Intervention],
        means: Option<&NeuronMeans>,
    ) -> Result<Vec<LayerPlan<'a>>> {
        let cfg = &self.config;
        let mut plans: Vec<LayerPlan> = (0..cfg.n_layers).map(|_| LayerPlan::default()).collect();
        for iv in interventions {
            let layer = iv.layer();
            if layer >= cfg.n_layers {
                return Err(Error::invalid(format!(
                    "{} targets layer {layer}, model has {}",
                    iv.kind(),
                    cfg.n_layers
                )));
            }
            let plan = &mut plans[layer];
            match iv {
                Intervention::HeadZero { head, .. } | Intervention::HeadLogitMask { head, .. } => {
                    if *head >= cfg.n_heads {
                        return Err(Error::invalid(format!("head {head} out of range ({} heads)", cfg.n_heads)));
                    }
                    if matches!(iv, Intervention::HeadZero { .. }) {
                        plan.zero_heads.push(*head);
                    } else {
                        plan.mask_heads.push(*head);
                    }
                }
                Intervention::LayerHeadsZero { .. } => plan.zero_heads.extend(0..cfg.n_heads),
                Intervention::NeuronMeanAblate { neuron, .. } | Intervention::NonAttentionControl { neuron, .. } => {
                    if *neuron >= cfg.d_mlp {
                        return Err(Error::invalid(format!("neuron {neuron} out of range ({} neurons)", cfg.d_mlp)));
                    }
                    if matches!(iv, Intervention::NeuronMeanAblate { .. }) {
                        let means = means.ok_or_else(|| {
                            Error::invalid("mean ablation requested before neuron means were computed")
                        })?;
                        means.check_available(layer, seq_len)?;
                        plan.mean_ablate.push(*neuron);
                    } else {
                        plan.zero_neurons.push(*neuron);
                    }
                }
                Intervention::ActivationPatch { source, .. } => {
                    if source.attn_out.shape() != (seq_len, cfg.d_model) {
                        return Err(Error::invalid(format!(
                            "patch shape mismatch: source {:?}, expected {:?}",
                            source.attn_out.shape(),
                            (seq_len, cfg.d_model)
                        )));
                    }
                    plan.patch = Some(source);
                }
            }
        }
        Ok(plans)
    }

    fn run(&self, tokens: &[TokenId], interventions: &[Intervention], means: Option<&NeuronMeans>) -> Result<ForwardTrace> {
        self.validate_tokens(tokens)?;
        let n = tokens.len();
        let plans = self.plan(n, interventions, means)?;
        let w = &self.weights;
        let d = self.config.d_model;

        let mut x = DMatrix::from_fn(n, d, |t, c| w.embed[(tokens[t] as usize, c)] + w.pos[(t, c)]);
        let mut resid_pre = Vec::with_capacity(self.config.n_layers);
        let mut attn_outs = Vec::with_capacity(self.config.n_layers);
        let mut resid_mid = Vec::with_capacity(self.config.n_layers);
        let mut mlp_acts = Vec::with_capacity(self.config.n_layers);
        let mut attention = Vec::with_capacity(self.config.n_layers);

        for (l, plan) in plans.iter().enumerate() {
            resid_pre.push(x.clone());
            let (attn_out, patterns) = self.attention_block(l, &x, plan);
            x += &attn_out;
            attn_outs.push(attn_out);
            attention.push(patterns);
            resid_mid.push(x.clone());

            let mut act = self.mlp_hidden(l, &x);
            for &neuron in &plan.mean_ablate {
                let means = means.expect("checked in plan");
                for t in 0..n {
                    act[(t, neuron)] = means.value(l, neuron, t);
                }
            }
            for &neuron in &plan.zero_neurons {
                act.column_mut(neuron).fill(0.0);
            }
            x += self.mlp_output(l, &act);
            mlp_acts.push(act);
        }

        let logits = self.unembed(&x);
        let position_losses: Vec<f64> = (0..n.saturating_sub(1))
            .map(|t| {
                let row: Vec<f64> = logits.row(t).iter().copied().collect();
                -log_softmax_at(&row, tokens[t + 1] as usize)
            })
            .collect();
        let loss = if position_losses.is_empty() {
            0.0
        } else {
            position_losses.iter().sum::<f64>() / position_losses.len() as f64
        };
        Ok(ForwardTrace {
            tokens: tokens.to_vec(),
            resid_pre,
            attn_out: attn_outs,
            resid_mid,
            mlp_activations: mlp_acts,
            attention_weights: attention,
            logits,
            position_losses,
            loss,
        })
    }

    fn attention_block(&self, l: usize, x: &DMatrix<f64>, plan: &LayerPlan) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        let lw = &self.weights.layers[l];
        let n = x.nrows();
        let dh = self.config.d_head();
        let scale = 1.0 / (dh as f64).sqrt();
        let h = layer_norm(x, &lw.ln1_gain, &lw.ln1_bias);
        let mut concat = DMatrix::zeros(n, self.config.d_model);
        let mut patterns = Vec::with_capacity(self.config.n_heads);
        for head in 0..self.config.n_heads {
            let mut pattern = DMatrix::zeros(n, n);
            if !plan.zero_heads.contains(&head) {
                let q = &h * &lw.w_q[head];
                let k = &h * &lw.w_k[head];
                let masked = plan.mask_heads.contains(&head);
                for i in 0..n {
                    let mut scores: Vec<f64> = (0..=i)
                        .map(|j| {
                            if masked {
                                0.0
                            } else {
                                q.row(i).dot(&k.row(j)) * scale
                            }
                        })
                        .collect();
                    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    for (j, s) in scores.iter().enumerate() {
                        pattern[(i, j)] = s / total;
                    }
                }
                let v = &h * &lw.w_v[head];
                let z = &pattern * v;
                concat.columns_mut(head * dh, dh).copy_from(&z);
            }
            patterns.push(pattern);
        }
        let out = match plan.patch {
            Some(src) => src.attn_out.clone(),
            None => concat * &lw.w_o,
        };
        (out, patterns)
    }

    fn mlp_hidden(&self, l: usize, x: &DMatrix<f64>) -> DMatrix<f64> {
        let lw = &self.weights.layers[l];
        let h = layer_norm(x, &lw.ln2_gain, &lw.ln2_bias);
        let mut pre = h * &lw.w_in;
        for mut row in pre.row_iter_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = gelu(*v + lw.b_in[c]);
            }
        }
        pre
    }

    fn mlp_output(&self, l: usize, act: &DMatrix<f64>) -> DMatrix<f64> {
        let lw = &self.weights.layers[l];
        let mut out = act * &lw.w_out;
        for mut row in out.row_iter_mut() {
            row += lw.b_out.transpose();
        }
        out
    }

    fn unembed(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let w = &self.weights;
        layer_norm(x, &w.lnf_gain, &w.lnf_bias) * &w.unembed
    }

    /// Target-position loss after replacing MLP hidden unit `neuron` of `layer`
    /// by its mean, resuming from a recorded baseline trace.
    ///
    /// Positions after `target` cannot influence it and are skipped; when
    /// `layer` is the last layer only the target row is recomputed. Agrees
    /// with a full [`Model::forward_with_means`] pass.
    pub fn mean_ablated_context_loss(
        &self,
        trace: &ForwardTrace,
        layer: usize,
        neuron: usize,
        target: usize,
        means: &NeuronMeans,
    ) -> Result<f64> {
        if layer >= self.config.n_layers || neuron >= self.config.d_mlp {
            return Err(Error::invalid("mean ablation index out of range"));
        }
        if target + 1 >= trace.seq_len() {
            return Err(Error::invalid(format!("no next-token loss at position {target}")));
        }
        means.check_available(layer, target + 1)?;
        let lw = &self.weights.layers[layer];
        let keep = target + 1;
        // Residual after the ablated MLP, for positions 0..=target.
        let mut x = trace.resid_pre[layer].rows(0, keep).into_owned();
        x += trace.attn_out[layer].rows(0, keep);
        let mut act = trace.mlp_activations[layer].rows(0, keep).into_owned();
        for t in 0..keep {
            act[(t, neuron)] = means.value(layer, neuron, t);
        }
        if layer + 1 == self.config.n_layers {
            // Only the target row matters for the final readout.
            let mut row = x.rows(target, 1).into_owned();
            row += act.rows(target, 1) * &lw.w_out;
            row += lw.b_out.transpose();
            let logits = self.unembed(&row);
            let logits: Vec<f64> = logits.row(0).iter().copied().collect();
            return Ok(-log_softmax_at(&logits, trace.tokens[target + 1] as usize));
        }
        x += self.mlp_output(layer, &act);
        let empty = LayerPlan::default();
        for l in layer + 1..self.config.n_layers {
            let (attn_out, _) = self.attention_block(l, &x, &empty);
            x += attn_out;
            let hidden = self.mlp_hidden(l, &x);
            x += self.mlp_output(l, &hidden);
        }
        let logits = self.unembed(&x.rows(target, 1).into_owned());
        let logits: Vec<f64> = logits.row(0).iter().copied().collect();
        Ok(-log_softmax_at(&logits, trace.tokens[target + 1] as usize))
    }
}
