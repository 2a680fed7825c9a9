//! Attention routing into plateau neurons: how concentrated the attention
//! at analyzed token positions is, whether rare and common tokens are routed
//! alike, and how much head ablations move plateau activations.

use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{AttentionRows, Context, ContextRecord, TokenGroup};
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, Intervention, Model};
use crate::stats::{self, MeanSd, Method, TestResult};

pub const DEFAULT_R_THRESHOLD: f64 = 0.8;
pub const GINI_ALPHA: f64 = 0.05;
/// Allowed deviation of an attention row sum from one (rows may come from `f32` dumps).
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

/// The final third of the layers, rounded up.
pub fn default_layer_range(n_layers: usize) -> RangeInclusive<usize> {
    let n = n_layers.max(1);
    let width = n.div_ceil(3);
    (n - width)..=(n - 1)
}

fn check_range(range: &RangeInclusive<usize>, n_layers: usize) -> Result<()> {
    if range.is_empty() || *range.end() >= n_layers {
        return Err(Error::config(format!(
            "layer range {}..={} outside a {n_layers}-layer model",
            range.start(),
            range.end()
        )));
    }
    Ok(())
}

/// Records each context's attention rows at its target position.
pub fn capture_attention(model: &Model, contexts: &[Context], layers: RangeInclusive<usize>) -> Result<AttentionRows> {
    let cfg = model.config();
    check_range(&layers, cfg.n_layers)?;
    let key_len = contexts.iter().map(|c| c.target + 1).max().unwrap_or(0);
    let layer_list: Vec<usize> = layers.collect();
    let chunks: Vec<Vec<f64>> = contexts
        .par_iter()
        .map(|c| {
            c.validate()?;
            let trace = model.forward(&c.tokens, &[])?;
            let mut out = Vec::with_capacity(layer_list.len() * cfg.n_heads * key_len);
            for &l in &layer_list {
                for h in 0..cfg.n_heads {
                    let pattern = &trace.attention_weights[l][h];
                    out.extend((0..key_len).map(|k| if k <= c.target { pattern[(c.target, k)] } else { 0.0 }));
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(AttentionRows {
        layers: layer_list,
        n_heads: cfg.n_heads,
        key_len,
        data: chunks.concat(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub token_group: Option<TokenGroup>,
    pub layers: Vec<usize>,
    pub n_heads: usize,
    pub n_contexts: usize,
    /// `[layer][head][key]` mean attention row, zero-padded past each context's target.
    pub mean_distributions: Vec<Vec<Vec<f64>>>,
    /// `[layer][head]` Gini coefficient of each row over its causal window, averaged over contexts.
    pub gini_per_head: Vec<Vec<f64>>,
}

impl AttentionSummary {
    pub fn gini_values(&self) -> Vec<f64> {
        self.gini_per_head.iter().flatten().copied().collect()
    }
}

/// Attention summary of a model over contexts of one token group.
pub fn summarize_attention(
    model: &Model,
    contexts: &[Context],
    token_group: Option<TokenGroup>,
    layers: RangeInclusive<usize>,
) -> Result<AttentionSummary> {
    if contexts.is_empty() {
        return Err(Error::invalid("attention summary of an empty token group"));
    }
    let rows = capture_attention(model, contexts, layers.clone())?;
    let targets: Vec<usize> = contexts.iter().map(|c| c.target).collect();
    let idx: Vec<usize> = (0..contexts.len()).collect();
    summarize_rows(&rows, &targets, &idx, token_group, layers)
}

/// Attention summary from recorded rows, e.g. an ingested dump.
pub fn summarize_attention_rows(
    rows: &AttentionRows,
    records: &[ContextRecord],
    context_idx: &[usize],
    token_group: Option<TokenGroup>,
    layers: RangeInclusive<usize>,
) -> Result<AttentionSummary> {
    if rows.n_contexts() != records.len() {
        return Err(Error::invalid(format!(
            "{} attention contexts for {} records",
            rows.n_contexts(),
            records.len()
        )));
    }
    let targets: Vec<usize> = records.iter().map(|r| r.target).collect();
    summarize_rows(rows, &targets, context_idx, token_group, layers)
}

fn summarize_rows(
    rows: &AttentionRows,
    targets: &[usize],
    context_idx: &[usize],
    token_group: Option<TokenGroup>,
    layers: RangeInclusive<usize>,
) -> Result<AttentionSummary> {
    if context_idx.is_empty() {
        return Err(Error::invalid("attention summary of an empty token group"));
    }
    let mut layer_slots = Vec::new();
    for l in layers {
        let slot = rows
            .layers
            .iter()
            .position(|&x| x == l)
            .ok_or_else(|| Error::invalid(format!("no attention recorded for layer {l}")))?;
        layer_slots.push((l, slot));
    }
    let key_len = context_idx.iter().map(|&c| targets[c] + 1).max().unwrap_or(0);
    if key_len > rows.key_len {
        return Err(Error::invalid("attention rows shorter than the target positions"));
    }
    let n = context_idx.len() as f64;
    let mut mean_distributions = Vec::new();
    let mut gini_per_head = Vec::new();
    for &(l, slot) in &layer_slots {
        let mut dists = Vec::new();
        let mut ginis = Vec::new();
        for h in 0..rows.n_heads {
            let mut dist = vec![0.0; key_len];
            let mut g = 0.0;
            for &c in context_idx {
                let window = &rows.row(c, slot, h)[..=targets[c]];
                let total: f64 = window.iter().sum();
                if (total - 1.0).abs() > ROW_SUM_TOLERANCE {
                    return Err(Error::invalid(format!(
                        "attention row of context {c}, layer {l}, head {h} sums to {total}"
                    )));
                }
                for (d, w) in dist.iter_mut().zip(window) {
                    *d += w / n;
                }
                g += stats::gini(window)? / n;
            }
            dists.push(dist);
            ginis.push(g);
        }
        mean_distributions.push(dists);
        gini_per_head.push(ginis);
    }
    Ok(AttentionSummary {
        token_group,
        layers: layer_slots.iter().map(|x| x.0).collect(),
        n_heads: rows.n_heads,
        n_contexts: context_idx.len(),
        mean_distributions,
        gini_per_head,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadCorrelation {
    pub layer: usize,
    pub head: usize,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingComparison {
    pub per_head: Vec<HeadCorrelation>,
    pub mean_r: f64,
    pub sd_r: f64,
    pub gini_rare: MeanSd,
    pub gini_common: MeanSd,
    /// Welch test of rare vs common per-head Gini; absent with fewer than two heads.
    pub gini_test: Option<TestResult>,
    pub r_threshold: f64,
    pub no_selective_routing: bool,
}

/// Correlation of two attention distributions over the keys either of them
/// attends to. Without variance on that support, identical distributions
/// count as `r = 1` and anything else as `r = 0`.
pub fn distribution_correlation(a: &[f64], b: &[f64]) -> f64 {
    let len = a.len().max(b.len());
    let at = |v: &[f64], i: usize| v.get(i).copied().unwrap_or(0.0);
    let support: Vec<usize> = (0..len).filter(|&i| at(a, i) > 0.0 || at(b, i) > 0.0).collect();
    let xa: Vec<f64> = support.iter().map(|&i| at(a, i)).collect();
    let xb: Vec<f64> = support.iter().map(|&i| at(b, i)).collect();
    match stats::pearson(&xa, &xb) {
        Ok(r) => r,
        Err(_) => {
            if xa.iter().zip(&xb).all(|(p, q)| (p - q).abs() <= 1e-12) {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Welch test on two Gini samples. Samples without any variance give
/// `p = 1` when their means agree and `p = 0` otherwise.
pub fn gini_test(rare: &[f64], common: &[f64]) -> Result<TestResult> {
    match stats::welch_t(rare, common) {
        Err(Error::Degenerate(_)) => {
            let same = (stats::mean(rare) - stats::mean(common)).abs() <= 1e-12;
            Ok(TestResult {
                statistic: if same { 0.0 } else { f64::INFINITY.copysign(stats::mean(rare) - stats::mean(common)) },
                p_value: if same { 1.0 } else { 0.0 },
                effect_size: None,
                n_a: rare.len(),
                n_b: common.len(),
                method: Method::TDistribution,
            })
        }
        other => other,
    }
}

pub fn compare_routing(rare: &AttentionSummary, common: &AttentionSummary) -> Result<RoutingComparison> {
    compare_routing_with(rare, common, DEFAULT_R_THRESHOLD)
}

pub fn compare_routing_with(
    rare: &AttentionSummary,
    common: &AttentionSummary,
    r_threshold: f64,
) -> Result<RoutingComparison> {
    if rare.layers != common.layers || rare.n_heads != common.n_heads {
        return Err(Error::invalid(format!(
            "attention summaries differ in shape: layers {:?} x {} heads vs {:?} x {} heads",
            rare.layers, rare.n_heads, common.layers, common.n_heads
        )));
    }
    let mut per_head = Vec::new();
    for (li, &layer) in rare.layers.iter().enumerate() {
        for head in 0..rare.n_heads {
            let r = distribution_correlation(&rare.mean_distributions[li][head], &common.mean_distributions[li][head]);
            per_head.push(HeadCorrelation { layer, head, r });
        }
    }
    let rs: Vec<f64> = per_head.iter().map(|h| h.r).collect();
    let g_rare = rare.gini_values();
    let g_common = common.gini_values();
    let gini_test = if g_rare.len() >= 2 { Some(gini_test(&g_rare, &g_common)?) } else { None };
    let mean_r = stats::mean(&rs);
    let no_selective_routing = mean_r >= r_threshold && gini_test.as_ref().is_none_or(|t| t.p_value >= GINI_ALPHA);
    Ok(RoutingComparison {
        per_head,
        mean_r,
        sd_r: stats::std_dev(&rs),
        gini_rare: MeanSd::of(&g_rare),
        gini_common: MeanSd::of(&g_common),
        gini_test,
        r_threshold,
        no_selective_routing,
    })
}

/// MLP neurons whose activation the ablations are measured on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlateauNeurons {
    pub layer: usize,
    pub neurons: Vec<usize>,
}

impl PlateauNeurons {
    fn validate(&self, model: &Model) -> Result<()> {
        let cfg = model.config();
        if self.neurons.is_empty() {
            return Err(Error::invalid("no plateau neurons to measure"));
        }
        if self.layer >= cfg.n_layers {
            return Err(Error::invalid(format!("plateau layer {} outside the model", self.layer)));
        }
        if let Some(n) = self.neurons.iter().find(|&&n| n >= cfg.d_mlp) {
            return Err(Error::invalid(format!("plateau neuron {n} outside the {}-unit MLP", cfg.d_mlp)));
        }
        Ok(())
    }

    /// Mean absolute activation of the set at `position`.
    pub fn activation(&self, trace: &ForwardTrace, position: usize) -> f64 {
        let acts = &trace.mlp_activations[self.layer];
        self.neurons.iter().map(|&n| acts[(position, n)].abs()).sum::<f64>() / self.neurons.len() as f64
    }
}

/// Plateau activation of each context without interventions.
pub fn baseline_activations(model: &Model, contexts: &[Context], plateau: &PlateauNeurons) -> Result<Vec<f64>> {
    plateau.validate(model)?;
    activations_under(model, contexts, plateau, &[])
}

fn activations_under(
    model: &Model,
    contexts: &[Context],
    plateau: &PlateauNeurons,
    interventions: &[Intervention],
) -> Result<Vec<f64>> {
    contexts
        .par_iter()
        .map(|c| {
            c.validate()?;
            let trace = model.forward(&c.tokens, interventions)?;
            Ok(plateau.activation(&trace, c.target))
        })
        .collect()
}

/// Effect of one set of interventions on plateau activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEffect {
    pub baseline: f64,
    pub ablated: f64,
    /// `|baseline - ablated| / baseline`.
    pub impact: f64,
    /// Per-context change as a percentage of the shared baseline; their mean is the overall change.
    pub deltas: Vec<f64>,
}

impl AblationEffect {
    pub fn change_percent(&self) -> f64 {
        100.0 * (self.ablated - self.baseline) / self.baseline
    }
}

fn effect_from(baseline_per_context: &[f64], ablated_per_context: &[f64]) -> Result<AblationEffect> {
    let baseline = stats::mean(baseline_per_context);
    if !(baseline > 0.0) {
        return Err(Error::degenerate("plateau neurons have zero baseline activation"));
    }
    let ablated = stats::mean(ablated_per_context);
    Ok(AblationEffect {
        baseline,
        ablated,
        impact: (baseline - ablated).abs() / baseline,
        deltas: baseline_per_context
            .iter()
            .zip(ablated_per_context)
            .map(|(b, a)| 100.0 * (a - b) / baseline)
            .collect(),
    })
}

/// Relative change of mean absolute plateau activation at target positions
/// when `interventions` are applied. An empty list has impact exactly 0.
pub fn head_ablation_impact(
    model: &Model,
    contexts: &[Context],
    plateau: &PlateauNeurons,
    interventions: &[Intervention],
) -> Result<AblationEffect> {
    let base = baseline_activations(model, contexts, plateau)?;
    ablation_against(model, contexts, plateau, &base, interventions)
}

fn ablation_against(
    model: &Model,
    contexts: &[Context],
    plateau: &PlateauNeurons,
    base: &[f64],
    interventions: &[Intervention],
) -> Result<AblationEffect> {
    if contexts.is_empty() {
        return Err(Error::invalid("ablation over no contexts"));
    }
    let ablated = if interventions.is_empty() {
        base.to_vec()
    } else {
        activations_under(model, contexts, plateau, interventions)?
    };
    effect_from(base, &ablated)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationTarget {
    SingleHeadMax,
    RandomHead,
    AllHeads,
    Control,
}

impl AblationTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationTarget::SingleHeadMax => "single-head-max",
            AblationTarget::RandomHead => "random-head",
            AblationTarget::AllHeads => "all-heads",
            AblationTarget::Control => "control",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub target: AblationTarget,
    pub detail: String,
    pub impact: f64,
    /// Mean relative change of plateau activation, percent.
    pub activation_change: f64,
    /// Standard deviation of the per-context changes, percent.
    pub change_sd: f64,
    /// Mean per-context change over its standard deviation.
    pub effect_size: f64,
    pub p_value: f64,
}

impl AblationRow {
    fn new(target: AblationTarget, detail: String, impact: f64, deltas: &[f64]) -> Result<AblationRow> {
        let (effect_size, p_value) = if deltas.iter().all(|d| *d == 0.0) {
            (0.0, 1.0)
        } else {
            match stats::one_sample_t(deltas) {
                Ok(t) => (t.effect_size.unwrap_or(0.0), t.p_value),
                // Identical non-zero changes in every context.
                Err(Error::Degenerate(_)) => (f64::MAX.copysign(deltas[0]), 0.0),
                Err(e) => return Err(e),
            }
        };
        Ok(AblationRow {
            target,
            detail,
            impact,
            activation_change: stats::mean(deltas),
            change_sd: stats::std_dev(deltas),
            effect_size,
            p_value,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadImpact {
    pub layer: usize,
    pub head: usize,
    pub impact: f64,
    pub activation_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub plateau: PlateauNeurons,
    pub layer_range: (usize, usize),
    pub n_contexts: usize,
    pub baseline_activation: f64,
    /// Fixed order: single-head-max, random-head (if requested), all-heads, control.
    pub rows: Vec<AblationRow>,
    pub head_impacts: Vec<HeadImpact>,
    /// Impact of removing every head of each layer in range.
    pub layer_impacts: Vec<HeadImpact>,
}

impl AblationReport {
    pub fn row(&self, target: AblationTarget) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.target == target)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("target,detail,impact,activation_change,change_sd,effect_size,p_value\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.target.as_str(),
                r.detail,
                r.impact,
                r.activation_change,
                r.change_sd,
                r.effect_size,
                r.p_value
            ));
        }
        out
    }
}

/// Head-removal ablations on the plateau neurons:
///
/// * `single-head-max`: the single head in range with the largest impact;
/// * `random-head`: average over `n_random_heads` heads drawn uniformly with
///   replacement (row omitted when zero);
/// * `all-heads`: every head of one layer removed, for the layer in range
///   with the largest impact;
/// * `control`: one random MLP unit zeroed in a layer before the plateau
///   layer (or a non-plateau unit of the plateau layer itself in a
///   single-layer model).
pub fn run_ablation_suite(
    model: &Model,
    contexts: &[Context],
    plateau: &PlateauNeurons,
    layer_range: RangeInclusive<usize>,
    n_random_heads: usize,
    seed: u64,
) -> Result<AblationReport> {
    let cfg = model.config();
    check_range(&layer_range, cfg.n_layers)?;
    if contexts.len() < 2 {
        return Err(Error::invalid("the ablation suite needs at least two contexts"));
    }
    let base = baseline_activations(model, contexts, plateau)?;

    let heads: Vec<(usize, usize)> = layer_range
        .clone()
        .flat_map(|l| (0..cfg.n_heads).map(move |h| (l, h)))
        .collect();
    let head_effects: Vec<AblationEffect> = heads
        .par_iter()
        .map(|&(layer, head)| ablation_against(model, contexts, plateau, &base, &[Intervention::HeadZero { layer, head }]))
        .collect::<Result<_>>()?;
    let layer_effects: Vec<(usize, AblationEffect)> = layer_range
        .clone()
        .into_par_iter()
        .map(|layer| Ok((layer, ablation_against(model, contexts, plateau, &base, &[Intervention::LayerHeadsZero { layer }])?)))
        .collect::<Result<_>>()?;

    let argmax = |xs: &[f64]| {
        let mut best = 0;
        for (i, x) in xs.iter().enumerate() {
            if *x > xs[best] {
                best = i;
            }
        }
        best
    };

    let mut rows = Vec::new();
    let best_head = argmax(&head_effects.iter().map(|e| e.impact).collect::<Vec<_>>());
    let (bl, bh) = heads[best_head];
    rows.push(AblationRow::new(
        AblationTarget::SingleHeadMax,
        format!("L{bl}H{bh}"),
        head_effects[best_head].impact,
        &head_effects[best_head].deltas,
    )?);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if n_random_heads > 0 {
        let draws: Vec<usize> = (0..n_random_heads).map(|_| rng.gen_range(0..heads.len())).collect();
        let mut deltas = vec![0.0; contexts.len()];
        let mut impact = 0.0;
        for &d in &draws {
            impact += head_effects[d].impact / n_random_heads as f64;
            for (acc, x) in deltas.iter_mut().zip(&head_effects[d].deltas) {
                *acc += x / n_random_heads as f64;
            }
        }
        let detail = draws
            .iter()
            .map(|&d| format!("L{}H{}", heads[d].0, heads[d].1))
            .collect::<Vec<_>>()
            .join(" ");
        rows.push(AblationRow::new(AblationTarget::RandomHead, detail, impact, &deltas)?);
    }

    let best_layer = argmax(&layer_effects.iter().map(|e| e.1.impact).collect::<Vec<_>>());
    let (ll, le) = &layer_effects[best_layer];
    rows.push(AblationRow::new(AblationTarget::AllHeads, format!("L{ll}"), le.impact, &le.deltas)?);

    let (control_layer, control_neuron) = if plateau.layer > 0 {
        (rng.gen_range(0..plateau.layer), rng.gen_range(0..cfg.d_mlp))
    } else {
        let free: Vec<usize> = (0..cfg.d_mlp).filter(|n| !plateau.neurons.contains(n)).collect();
        if free.is_empty() {
            return Err(Error::invalid("no MLP unit left for the control ablation"));
        }
        (0, free[rng.gen_range(0..free.len())])
    };
    let control = ablation_against(
        model,
        contexts,
        plateau,
        &base,
        &[Intervention::NonAttentionControl {
            layer: control_layer,
            neuron: control_neuron,
        }],
    )?;
    rows.push(AblationRow::new(
        AblationTarget::Control,
        format!("L{control_layer}N{control_neuron}"),
        control.impact,
        &control.deltas,
    )?);

    Ok(AblationReport {
        plateau: plateau.clone(),
        layer_range: (*layer_range.start(), *layer_range.end()),
        n_contexts: contexts.len(),
        baseline_activation: stats::mean(&base),
        rows,
        head_impacts: heads
            .iter()
            .zip(&head_effects)
            .map(|(&(layer, head), e)| HeadImpact {
                layer,
                head,
                impact: e.impact,
                activation_change: e.change_percent(),
            })
            .collect(),
        layer_impacts: layer_effects
            .iter()
            .map(|(layer, e)| HeadImpact {
                layer: *layer,
                head: cfg.n_heads,
                impact: e.impact,
                activation_change: e.change_percent(),
            })
            .collect(),
    })
}
