//! Stage orchestration and the experiment report.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::RangeInclusive;
use std::path::Path;

use log::{info, warn};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, GraphContexts, Source};
use super::dump::{ingest_dump, dump_from_dataset, ActivationDump, DumpManifest};
use super::tokens::{match_tokens, position_bucket, split_tokens, PositionBucket, TokenAnnotation, TokenMatching, TokenSplit};
use crate::dataset::{ActivationDataset, Context, ContextRecord, TokenGroup, TokenId};
use crate::error::{Error, Result, StageExt};
use crate::graph::{build_graph, group_clustering_test, SignedGraph, ClusterMethod, GroupModularityResult, GroupTestConfig};
use crate::influence::{
    classify_regimes_with, compare_groups, compute_influences, fit_power_law_with, profile_csv, DualRegimeReport,
    InfluenceProfile, PowerLawFit, RegimeLabels, RegimeThresholds,
};
use crate::model::planted::{plant_plateau, PlateauPlant};
use crate::model::{generate_corpus_with, init_model, Model, ModelConfig, SuccessorRule, SyntheticCorpus};
use crate::routing::{
    capture_attention, compare_routing_with, default_layer_range, run_ablation_suite, summarize_attention_rows,
    AblationReport, PlateauNeurons, RoutingComparison,
};
use crate::stats::{self, MeanSd};

/// Model, contexts and activations every later stage reads.
#[derive(Debug, Clone)]
pub struct Substrate {
    pub config: ExperimentConfig,
    /// Present for simulated input only.
    pub model: Option<Model>,
    pub model_label: String,
    pub planted_neurons: Vec<usize>,
    /// Rare contexts first, then common ones; attention over `layer_range`.
    pub dataset: ActivationDataset,
    pub split: TokenSplit,
    pub matching: Option<TokenMatching>,
    pub manifest: DumpManifest,
    pub layer_range: (usize, usize),
}

impl Substrate {
    pub fn contexts(&self, group: TokenGroup) -> Vec<Context> {
        self.dataset
            .group_indices(group)
            .into_iter()
            .map(|i| self.dataset.contexts[i].context())
            .collect()
    }

    pub fn layers(&self) -> RangeInclusive<usize> {
        self.layer_range.0..=self.layer_range.1
    }

    pub fn to_dump(&self) -> Result<ActivationDump> {
        dump_from_dataset(&self.dataset, self.manifest.clone())
    }

    fn model(&self, stage: &str) -> Result<&Model> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::config(format!("{stage} needs a model; dump input carries activations only")))
    }
}

fn model_config(cfg: &ExperimentConfig) -> ModelConfig {
    ModelConfig {
        n_layers: cfg.n_layers,
        n_heads: cfg.n_heads,
        d_model: cfg.d_model,
        d_mlp: cfg.d_mlp,
        vocab_size: cfg.vocab_size,
        max_seq_len: cfg.seq_len,
        seed: cfg.seed,
    }
}

/// Surface length and most frequent position third of every corpus token.
fn corpus_annotations(corpus: &SyntheticCorpus) -> BTreeMap<TokenId, TokenAnnotation> {
    let mut buckets: BTreeMap<TokenId, [u64; 3]> = BTreeMap::new();
    for seq in &corpus.sequences {
        for (pos, &t) in seq.iter().enumerate() {
            buckets.entry(t).or_default()[position_bucket(pos, seq.len()) as usize] += 1;
        }
    }
    buckets
        .into_iter()
        .map(|(t, counts)| {
            let best = (0..3).fold(0, |b, i| if counts[i] > counts[b] { i } else { b });
            let position = [PositionBucket::Beginning, PositionBucket::Middle, PositionBucket::End][best];
            (
                t,
                TokenAnnotation {
                    length: corpus.surface(t).chars().count(),
                    pos_tag: None,
                    position,
                },
            )
        })
        .collect()
}

fn sample_contexts(
    corpus: &SyntheticCorpus,
    tokens: &BTreeSet<TokenId>,
    max: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Context> {
    let mut found: Vec<(usize, usize)> = Vec::new();
    for (s, seq) in corpus.sequences.iter().enumerate() {
        for t in 0..seq.len().saturating_sub(1) {
            if tokens.contains(&seq[t]) {
                found.push((s, t));
            }
        }
    }
    found.shuffle(rng);
    found.truncate(max);
    found.sort_unstable();
    found
        .into_iter()
        .map(|(s, t)| Context {
            tokens: corpus.sequences[s].clone(),
            target: t,
        })
        .collect()
}

fn resolve_range(cfg: &ExperimentConfig, n_layers: usize) -> Result<(usize, usize)> {
    let (a, b) = match cfg.attention_layers {
        Some(r) => r,
        None => {
            let r = default_layer_range(n_layers);
            (*r.start(), *r.end())
        }
    };
    if b >= n_layers {
        return Err(Error::config(format!("attention_layers {a}-{b} outside a {n_layers}-layer model")));
    }
    Ok((a, b))
}

fn matched_sets(matching: &TokenMatching) -> TokenSplit {
    TokenSplit {
        rare: matching.pairs.iter().map(|p| p.rare).collect(),
        common: matching.pairs.iter().map(|p| p.common).collect(),
    }
}

/// Builds the toy model and corpus (or ingests a dump) and the rare/common contexts.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Substrate> {
    cfg.validate()?;
    match cfg.source {
        Source::Simulate => simulate(cfg).stage("substrate"),
        Source::Dump => from_dump(cfg).stage("ingest"),
    }
}

fn simulate(cfg: &ExperimentConfig) -> Result<Substrate> {
    let rule = cfg.plant.then(|| SuccessorRule {
        first_token: cfg.successor_first_token,
        n_groups: cfg.successor_groups,
        probability: cfg.successor_probability,
    });
    let corpus = generate_corpus_with(
        cfg.vocab_size,
        cfg.n_sequences,
        cfg.seq_len,
        cfg.zipf_exponent,
        cfg.seed,
        rule.clone(),
    )?;
    let mut model = init_model(model_config(cfg))?;
    let mut planted = Vec::new();
    if let Some(rule) = &rule {
        let (m, p) = plant_plateau(model, rule, &PlateauPlant::default())?;
        model = m;
        planted = p;
    }
    info!("model {} with {} planted neurons", model.checksum(), planted.len());

    let split = split_tokens(&corpus.token_frequencies, &cfg.split)?;
    let annotations = corpus_annotations(&corpus);
    let matching = match_tokens(&split.rare, &split.common, &annotations)?;
    info!(
        "{} rare and {} common tokens, {} matched pairs",
        split.rare.len(),
        split.common.len(),
        matching.pairs.len()
    );
    let used = if cfg.matched_only {
        if matching.pairs.is_empty() {
            return Err(Error::invalid("matched_only set but no token pair matches"));
        }
        matched_sets(&matching)
    } else {
        split.clone()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC0_47E7);
    let rare = sample_contexts(&corpus, &used.rare, cfg.max_contexts, &mut rng);
    let common = sample_contexts(&corpus, &used.common, cfg.max_contexts, &mut rng);
    if rare.len() < 2 || common.len() < 2 {
        return Err(Error::invalid(format!(
            "{} rare and {} common contexts; need at least two of each",
            rare.len(),
            common.len()
        )));
    }

    let layer = cfg.n_layers - 1;
    let layer_range = resolve_range(cfg, cfg.n_layers)?;
    let groups: Vec<(Context, TokenGroup)> = rare
        .into_iter()
        .map(|c| (c, TokenGroup::Rare))
        .chain(common.into_iter().map(|c| (c, TokenGroup::Common)))
        .collect();
    let contexts: Vec<Context> = groups.iter().map(|g| g.0.clone()).collect();
    let mut records = Vec::with_capacity(groups.len());
    let mut activations = DMatrix::zeros(cfg.d_mlp, groups.len());
    for (i, (ctx, group)) in groups.iter().enumerate() {
        let trace = model.forward(&ctx.tokens, &[])?;
        activations.set_column(i, &trace.mlp_activations[layer].row(ctx.target).transpose());
        records.push(ContextRecord {
            tokens: ctx.tokens.clone(),
            target: ctx.target,
            group: Some(*group),
            loss: trace.context_loss(ctx.target)?,
        });
    }
    let attention = capture_attention(&model, &contexts, layer_range.0..=layer_range.1)?;
    let dataset = ActivationDataset {
        layer,
        activations,
        contexts: records,
        attention: Some(attention),
    };
    dataset.validate()?;

    let manifest = DumpManifest {
        model: format!("toy-{}", model.checksum()),
        tokenizer: None,
        mlp_layer: layer,
        attention_layers: Vec::new(),
        contexts: Vec::new(),
        surfaces: corpus.token_frequencies.keys().map(|&t| (t, corpus.surface(t))).collect(),
        token_frequencies: corpus.token_frequencies.clone(),
        annotations,
        annotation_degraded: true,
    };
    Ok(Substrate {
        config: cfg.clone(),
        model_label: manifest.model.clone(),
        model: Some(model),
        planted_neurons: planted,
        dataset,
        split,
        matching: Some(matching),
        manifest,
        layer_range,
    })
}

fn from_dump(cfg: &ExperimentConfig) -> Result<Substrate> {
    let path = cfg
        .dump_path
        .as_ref()
        .ok_or_else(|| Error::config("source = dump needs dump_path"))?;
    let (dataset, manifest) = ingest_dump(path)?;
    if dataset.group_indices(TokenGroup::Rare).len() < 2 || dataset.group_indices(TokenGroup::Common).len() < 2 {
        return Err(Error::invalid("the dump needs at least two rare and two common contexts"));
    }
    let split = if manifest.token_frequencies.is_empty() {
        let mut s = TokenSplit {
            rare: BTreeSet::new(),
            common: BTreeSet::new(),
        };
        for c in &dataset.contexts {
            match c.group {
                Some(TokenGroup::Rare) => s.rare.insert(c.tokens[c.target]),
                Some(TokenGroup::Common) => s.common.insert(c.tokens[c.target]),
                None => false,
            };
        }
        s
    } else {
        split_tokens(&manifest.token_frequencies, &cfg.split)?
    };
    let matching = if manifest.annotations.is_empty() {
        None
    } else {
        match match_tokens(&split.rare, &split.common, &manifest.annotations) {
            Ok(m) => Some(m),
            Err(e) => {
                warn!("token matching skipped: {e}");
                None
            }
        }
    };
    let layer_range = match (&dataset.attention, cfg.attention_layers) {
        (Some(rows), Some((a, b))) => {
            if !(a..=b).all(|l| rows.layers.contains(&l)) {
                return Err(Error::config(format!("attention_layers {a}-{b} not all present in the dump")));
            }
            (a, b)
        }
        (Some(rows), None) => {
            let (a, b) = (rows.layers[0], *rows.layers.last().unwrap_or(&rows.layers[0]));
            if (a..=b).any(|l| !rows.layers.contains(&l)) {
                return Err(Error::config("dump attention layers are not contiguous; set attention_layers"));
            }
            (a, b)
        }
        (None, _) => (dataset.layer, dataset.layer),
    };
    Ok(Substrate {
        config: cfg.clone(),
        model: None,
        model_label: manifest.model.clone(),
        planted_neurons: Vec::new(),
        dataset,
        split,
        matching,
        manifest,
        layer_range,
    })
}

/// Influence profiles, fits and regime labels of both token groups.
#[derive(Debug, Clone)]
pub struct InfluenceStage {
    pub rare: (InfluenceProfile, PowerLawFit, RegimeLabels),
    pub common: (InfluenceProfile, PowerLawFit, RegimeLabels),
    pub report: DualRegimeReport,
}

impl InfluenceStage {
    /// Rare-group plateau neurons with the sign of their ablation effect.
    pub fn plateau(&self) -> Vec<PlateauNeuron> {
        let (profile, _, labels) = &self.rare;
        let delta: BTreeMap<usize, f64> = profile.entries().iter().map(|e| (e.neuron, e.signed_delta)).collect();
        labels
            .plateau_neurons()
            .into_iter()
            .map(|n| PlateauNeuron {
                neuron: n,
                signed_delta: delta.get(&n).copied(),
            })
            .collect()
    }
}

pub fn run_influence(sub: &Substrate) -> Result<InfluenceStage> {
    let stage = || -> Result<InfluenceStage> {
        let model = sub.model("influence")?;
        let cfg = &sub.config;
        let thresholds = RegimeThresholds {
            plateau: cfg.plateau_threshold,
            rapid_decay: cfg.rapid_decay_threshold,
        };
        let one = |group: TokenGroup| -> Result<(InfluenceProfile, PowerLawFit, RegimeLabels)> {
            let profile = compute_influences(model, &sub.contexts(group), group, sub.dataset.layer, cfg.pooling)?;
            let fit = fit_power_law_with(&profile, &thresholds)?;
            let labels = classify_regimes_with(&profile, &fit, &thresholds)?;
            Ok((profile, fit, labels))
        };
        let rare = one(TokenGroup::Rare)?;
        let common = one(TokenGroup::Common)?;
        let report = compare_groups((&rare.0, &rare.1, &rare.2), (&common.0, &common.1, &common.2));
        info!(
            "plateau neurons: {} rare, {} common",
            report.rare.plateau_count, report.common.plateau_count
        );
        Ok(InfluenceStage { rare, common, report })
    };
    stage().stage("influence")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauNeuron {
    pub neuron: usize,
    /// Loss change under ablation; positive when the neuron lowers loss. Unknown for dump input.
    pub signed_delta: Option<f64>,
}

/// Plateau neurons named in the configuration (dump input).
pub fn configured_plateau(sub: &Substrate) -> Vec<PlateauNeuron> {
    sub.config
        .plateau_neurons
        .iter()
        .map(|&n| PlateauNeuron {
            neuron: n,
            signed_delta: None,
        })
        .collect()
}

/// One row of the community table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommunityRow {
    pub neuron_group: String,
    pub n_neurons: usize,
    /// Over context resamples, or the point estimate when resampling is off.
    pub signed_modularity: MeanSd,
    pub communities: MeanSd,
    pub p_value: Option<f64>,
    pub p_value_bonferroni: Option<f64>,
    pub cohens_d: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommunityStage {
    pub graph_contexts: GraphContexts,
    /// Tested groups, then the random control.
    pub rows: Vec<CommunityRow>,
    pub spectral: Option<CommunityRow>,
    pub spectral_control: Option<MeanSd>,
    pub notes: Vec<String>,
    #[serde(skip)]
    pub edges_csv: String,
    #[serde(skip)]
    pub partition_csv: String,
}

fn row_of(name: &str, r: &GroupModularityResult) -> CommunityRow {
    let point = |x: f64| MeanSd { mean: x, sd: 0.0 };
    CommunityRow {
        neuron_group: name.to_string(),
        n_neurons: r.group.len(),
        signed_modularity: r
            .bootstrap_signed_modularity
            .clone()
            .unwrap_or_else(|| point(r.partition.signed_modularity)),
        communities: r
            .bootstrap_communities
            .clone()
            .unwrap_or_else(|| point(r.partition.n_communities as f64)),
        p_value: Some(r.p_value),
        p_value_bonferroni: None,
        cohens_d: r.cohens_d,
    }
}

/// Correlation graph over the given neurons, on the contexts selected by `graph_contexts`.
pub fn neuron_graph(sub: &Substrate, neurons: &[usize]) -> Result<SignedGraph> {
    let columns: Vec<usize> = match sub.config.graph_contexts {
        GraphContexts::Rare => sub.dataset.group_indices(TokenGroup::Rare),
        GraphContexts::All => (0..sub.dataset.n_contexts()).collect(),
    };
    if let Some(n) = neurons.iter().find(|&&n| n >= sub.dataset.n_neurons()) {
        return Err(Error::invalid(format!(
            "neuron {n} outside the {}-unit layer",
            sub.dataset.n_neurons()
        )));
    }
    let acts = sub.dataset.columns(&columns);
    let rows = DMatrix::from_fn(neurons.len(), acts.ncols(), |r, c| acts[(neurons[r], c)]);
    build_graph(&rows, neurons, sub.config.graph_threshold)
}

pub fn run_communities(sub: &Substrate, plateau: &[PlateauNeuron]) -> Result<CommunityStage> {
    let stage = || -> Result<CommunityStage> {
        let cfg = &sub.config;
        let columns: Vec<usize> = match cfg.graph_contexts {
            GraphContexts::Rare => sub.dataset.group_indices(TokenGroup::Rare),
            GraphContexts::All => (0..sub.dataset.n_contexts()).collect(),
        };
        let acts = sub.dataset.columns(&columns);
        let n = acts.nrows();
        if let Some(p) = plateau.iter().find(|p| p.neuron >= n) {
            return Err(Error::invalid(format!("plateau neuron {} outside the {n}-unit layer", p.neuron)));
        }

        let mut groups: Vec<(&str, Vec<usize>)> = Vec::new();
        let mut notes = Vec::new();
        if plateau.iter().all(|p| p.signed_delta.is_some()) {
            let exc: Vec<usize> = plateau.iter().filter(|p| p.signed_delta > Some(0.0)).map(|p| p.neuron).collect();
            let inh: Vec<usize> = plateau.iter().filter(|p| p.signed_delta < Some(0.0)).map(|p| p.neuron).collect();
            for (name, g) in [("plateau-excitatory", exc), ("plateau-inhibitory", inh)] {
                if g.len() >= 2 {
                    groups.push((name, g));
                } else {
                    notes.push(format!("{name}: {} neurons, not tested", g.len()));
                }
            }
        } else if plateau.len() >= 2 {
            groups.push(("plateau", plateau.iter().map(|p| p.neuron).collect()));
        } else {
            notes.push(format!("plateau: {} neurons, not tested", plateau.len()));
        }
        let groups: Vec<(&str, Vec<usize>)> = groups
            .into_iter()
            .filter(|(name, g)| {
                let ok = 2 * g.len() <= n;
                if !ok {
                    notes.push(format!("{name}: group larger than the remaining neurons, not tested"));
                }
                ok
            })
            .collect();

        let louvain_cfg = GroupTestConfig {
            method: ClusterMethod::Louvain,
            n_controls: cfg.n_controls,
            louvain_restarts: cfg.louvain_restarts,
            threshold: cfg.graph_threshold,
            n_bootstrap: cfg.n_bootstrap,
            confidence: 0.95,
        };
        let mut results = Vec::new();
        for (i, (name, g)) in groups.iter().enumerate() {
            let r = group_clustering_test(&acts, g, &louvain_cfg, cfg.seed.wrapping_add(i as u64))?;
            info!("{name}: Q_signed {:.3}, p {:.4}", r.partition.signed_modularity, r.p_value);
            results.push((*name, r));
        }
        let adjusted = if results.is_empty() {
            Vec::new()
        } else {
            stats::bonferroni(&results.iter().map(|r| r.1.p_value).collect::<Vec<_>>())?
        };
        let mut rows: Vec<CommunityRow> = results
            .iter()
            .zip(&adjusted)
            .map(|((name, r), adj)| CommunityRow {
                p_value_bonferroni: Some(*adj),
                ..row_of(name, r)
            })
            .collect();

        let (mut spectral, mut spectral_control) = (None, None);
        let (mut edges_csv, mut partition_csv) = (String::new(), String::new());
        if let Some((name, first)) = results.first() {
            rows.push(CommunityRow {
                neuron_group: "random-control".into(),
                n_neurons: first.group.len(),
                signed_modularity: first.control_signed_modularity.clone(),
                communities: first.control_communities.clone(),
                p_value: None,
                p_value_bonferroni: None,
                cohens_d: None,
            });
            let graph_rows = DMatrix::from_fn(first.group.len(), acts.ncols(), |r, c| acts[(first.group[r], c)]);
            let graph = build_graph(&graph_rows, &first.group, cfg.graph_threshold)?;
            edges_csv = graph.edges_csv();
            partition_csv = first.partition.to_csv(&graph);

            let spectral_cfg = GroupTestConfig {
                method: ClusterMethod::Spectral {
                    k_min: cfg.spectral_k_min,
                    k_max: cfg.spectral_k_max,
                },
                n_bootstrap: 0,
                ..louvain_cfg.clone()
            };
            let s = group_clustering_test(&acts, &first.group, &spectral_cfg, cfg.seed)?;
            spectral_control = Some(s.control_signed_modularity.clone());
            spectral = Some(row_of(name, &s));
        }
        Ok(CommunityStage {
            graph_contexts: cfg.graph_contexts,
            rows,
            spectral,
            spectral_control,
            notes,
            edges_csv,
            partition_csv,
        })
    };
    stage().stage("communities")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingStage {
    pub layer_range: (usize, usize),
    pub comparison: RoutingComparison,
    /// Head-removal ablations; absent for dump input or without plateau neurons.
    pub ablation: Option<AblationReport>,
}

impl RoutingStage {
    pub fn heads_csv(&self) -> String {
        let mut out = String::from("layer,head,r\n");
        for h in &self.comparison.per_head {
            out.push_str(&format!("{},{},{}\n", h.layer, h.head, h.r));
        }
        out
    }
}

/// Rare versus common attention over the analyzed layers.
pub fn run_attention(sub: &Substrate) -> Result<RoutingComparison> {
    let stage = || -> Result<RoutingComparison> {
        let rows = sub
            .dataset
            .attention
            .as_ref()
            .ok_or_else(|| Error::invalid("no attention rows recorded"))?;
        let summary = |group: TokenGroup| {
            summarize_attention_rows(
                rows,
                &sub.dataset.contexts,
                &sub.dataset.group_indices(group),
                Some(group),
                sub.layers(),
            )
        };
        let comparison = compare_routing_with(
            &summary(TokenGroup::Rare)?,
            &summary(TokenGroup::Common)?,
            sub.config.r_threshold,
        )?;
        info!(
            "mean head correlation {:.3}, selective routing {}",
            comparison.mean_r, !comparison.no_selective_routing
        );
        Ok(comparison)
    };
    stage().stage("attention")
}

/// Head-removal ablations measured on the plateau neurons over rare contexts.
pub fn run_ablation(sub: &Substrate, plateau: &[PlateauNeuron]) -> Result<AblationReport> {
    let stage = || -> Result<AblationReport> {
        let model = sub.model("ablation")?;
        let neurons = PlateauNeurons {
            layer: sub.dataset.layer,
            neurons: plateau.iter().map(|p| p.neuron).collect(),
        };
        run_ablation_suite(
            model,
            &sub.contexts(TokenGroup::Rare),
            &neurons,
            sub.layers(),
            sub.config.n_random_heads,
            sub.config.seed,
        )
    };
    stage().stage("ablation")
}

pub fn run_routing(sub: &Substrate, plateau: &[PlateauNeuron]) -> Result<RoutingStage> {
    let comparison = run_attention(sub)?;
    let ablation = if sub.model.is_some() && !plateau.is_empty() {
        Some(run_ablation(sub, plateau)?)
    } else {
        None
    };
    Ok(RoutingStage {
        layer_range: sub.layer_range,
        comparison,
        ablation,
    })
}

/// Plateau neurons named in the configuration, or else those found by the
/// influence stage (returned alongside). Dump input must name them.
pub fn resolve_plateau(sub: &Substrate) -> Result<(Vec<PlateauNeuron>, Option<InfluenceStage>)> {
    if !sub.config.plateau_neurons.is_empty() {
        return Ok((configured_plateau(sub), None));
    }
    if sub.model.is_none() {
        return Err(Error::config("dump input needs plateau_neurons"));
    }
    let stage = run_influence(sub)?;
    Ok((stage.plateau(), Some(stage)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenReport {
    pub n_rare: usize,
    pub n_common: usize,
    pub rare_contexts: usize,
    pub common_contexts: usize,
    pub matched_pairs: Option<usize>,
    pub unmatched_rare: Option<usize>,
    pub annotation_degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub stage: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: ExperimentConfig,
    pub model: String,
    pub planted_neurons: Vec<usize>,
    pub tokens: TokenReport,
    pub influence: Option<DualRegimeReport>,
    pub plateau: Vec<PlateauNeuron>,
    pub communities: Option<CommunityStage>,
    pub routing: Option<RoutingStage>,
    pub table1: Vec<Table1Row>,
    pub table2: Vec<Table2Row>,
    pub skipped: Vec<Skipped>,
}

/// Canonical JSON report (sorted keys) plus CSV tables keyed by file name.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub report: Report,
    pub json: String,
    pub files: BTreeMap<String, String>,
}

impl ReportBundle {
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), &self.json)?;
        for (name, body) in &self.files {
            std::fs::write(dir.join(name), body)?;
        }
        Ok(())
    }
}

/// Row of the community table: signed modularity and community count per neuron group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub model: String,
    pub method: String,
    pub neuron_group: String,
    pub n_neurons: usize,
    pub signed_modularity_mean: f64,
    pub signed_modularity_sd: f64,
    pub communities_mean: f64,
    pub communities_sd: f64,
    pub p_value: Option<f64>,
    pub p_value_bonferroni: Option<f64>,
    pub cohens_d: Option<f64>,
}

/// Row of the ablation table: relative plateau activation change per target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    pub model: String,
    pub ablation_target: String,
    pub detail: String,
    pub activation_change_mean: f64,
    pub activation_change_sd: f64,
    pub effect_size: f64,
    pub p_value: f64,
    pub impact: f64,
}

pub fn table1(model: &str, stage: &CommunityStage) -> Vec<Table1Row> {
    let rows = stage.rows.iter().map(|r| ("louvain", r)).chain(stage.spectral.iter().map(|r| ("spectral", r)));
    rows.map(|(method, r)| Table1Row {
        model: model.to_string(),
        method: method.to_string(),
        neuron_group: r.neuron_group.clone(),
        n_neurons: r.n_neurons,
        signed_modularity_mean: r.signed_modularity.mean,
        signed_modularity_sd: r.signed_modularity.sd,
        communities_mean: r.communities.mean,
        communities_sd: r.communities.sd,
        p_value: r.p_value,
        p_value_bonferroni: r.p_value_bonferroni,
        cohens_d: r.cohens_d,
    })
    .collect()
}

pub fn table2(model: &str, report: &AblationReport) -> Vec<Table2Row> {
    report
        .rows
        .iter()
        .map(|r| Table2Row {
            model: model.to_string(),
            ablation_target: r.target.as_str().to_string(),
            detail: r.detail.clone(),
            activation_change_mean: r.activation_change,
            activation_change_sd: r.change_sd,
            effect_size: r.effect_size,
            p_value: r.p_value,
            impact: r.impact,
        })
        .collect()
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn table1_csv(rows: &[Table1Row]) -> String {
    let mut out = String::from(
        "model,method,neuron_group,n_neurons,signed_modularity_mean,signed_modularity_sd,communities_mean,communities_sd,p_value,p_value_bonferroni,cohens_d\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.model,
            r.method,
            r.neuron_group,
            r.n_neurons,
            r.signed_modularity_mean,
            r.signed_modularity_sd,
            r.communities_mean,
            r.communities_sd,
            opt(r.p_value),
            opt(r.p_value_bonferroni),
            opt(r.cohens_d)
        ));
    }
    out
}

pub fn table2_csv(rows: &[Table2Row]) -> String {
    let mut out =
        String::from("model,ablation_target,detail,activation_change_mean,activation_change_sd,effect_size,p_value,impact\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.model,
            r.ablation_target,
            r.detail,
            r.activation_change_mean,
            r.activation_change_sd,
            r.effect_size,
            r.p_value,
            r.impact
        ));
    }
    out
}

fn pairs_csv(m: &TokenMatching, surfaces: &BTreeMap<TokenId, String>) -> String {
    let surface = |t: &TokenId| surfaces.get(t).cloned().unwrap_or_default();
    let mut out = String::from("rare,rare_surface,common,common_surface,length_delta,same_pos,same_position\n");
    for p in &m.pairs {
        out.push_str(&format!(
            "{},{:?},{},{:?},{},{},{}\n",
            p.rare,
            surface(&p.rare),
            p.common,
            surface(&p.common),
            p.length_delta,
            p.same_pos,
            p.same_position
        ));
    }
    out
}

/// Runs every applicable stage. Dump input skips influence and ablation and
/// takes its plateau neurons from the configuration; simulated input uses
/// configured plateau neurons when given, else the rare-group plateau.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ReportBundle> {
    let sub = prepare(cfg)?;
    let mut files = BTreeMap::new();
    let mut skipped = Vec::new();
    let mut table1_rows = Vec::new();
    let mut table2_rows = Vec::new();

    let (influence, plateau) = if sub.model.is_some() {
        let stage = run_influence(&sub)?;
        for (name, (p, f, l)) in [("rare", &stage.rare), ("common", &stage.common)] {
            files.insert(format!("influence_{name}.csv"), profile_csv(p, f, l));
        }
        let plateau = if cfg.plateau_neurons.is_empty() {
            stage.plateau()
        } else {
            configured_plateau(&sub)
        };
        (Some(stage.report), plateau)
    } else {
        skipped.push(Skipped {
            stage: "influence".into(),
            reason: "dump input has no model to ablate".into(),
        });
        (None, configured_plateau(&sub))
    };

    let communities = if plateau.len() >= 2 {
        let stage = run_communities(&sub, &plateau)?;
        table1_rows = table1(&sub.model_label, &stage);
        files.insert("table1_communities.csv".into(), table1_csv(&table1_rows));
        if !stage.edges_csv.is_empty() {
            files.insert("plateau_edges.csv".into(), stage.edges_csv.clone());
            files.insert("plateau_partition.csv".into(), stage.partition_csv.clone());
        }
        Some(stage)
    } else {
        skipped.push(Skipped {
            stage: "communities".into(),
            reason: format!("{} plateau neurons; at least two needed", plateau.len()),
        });
        None
    };

    let routing = if sub.dataset.attention.is_some() {
        let stage = run_routing(&sub, &plateau)?;
        files.insert("attention_heads.csv".into(), stage.heads_csv());
        match &stage.ablation {
            Some(a) => {
                table2_rows = table2(&sub.model_label, a);
                files.insert("table2_ablation.csv".into(), table2_csv(&table2_rows));
            }
            None => skipped.push(Skipped {
                stage: "ablation".into(),
                reason: if sub.model.is_none() {
                    "dump input has no model to ablate".into()
                } else {
                    "no plateau neurons".into()
                },
            }),
        }
        Some(stage)
    } else {
        skipped.push(Skipped {
            stage: "routing".into(),
            reason: "no attention rows recorded".into(),
        });
        None
    };
    if let Some(m) = &sub.matching {
        files.insert("token_pairs.csv".into(), pairs_csv(m, &sub.manifest.surfaces));
    }
    files.insert("config.txt".into(), cfg.to_text());

    let report = Report {
        config: cfg.clone(),
        model: sub.model_label.clone(),
        planted_neurons: sub.planted_neurons.clone(),
        tokens: TokenReport {
            n_rare: sub.split.rare.len(),
            n_common: sub.split.common.len(),
            rare_contexts: sub.dataset.group_indices(TokenGroup::Rare).len(),
            common_contexts: sub.dataset.group_indices(TokenGroup::Common).len(),
            matched_pairs: sub.matching.as_ref().map(|m| m.pairs.len()),
            unmatched_rare: sub.matching.as_ref().map(|m| m.unmatched.len()),
            annotation_degraded: sub.manifest.annotation_degraded,
        },
        influence,
        plateau,
        communities,
        routing,
        table1: table1_rows,
        table2: table2_rows,
        skipped,
    };
    let value = serde_json::to_value(&report).map_err(|e| Error::Invariant(format!("report serialization: {e}")))?;
    let json = serde_json::to_string_pretty(&value).map_err(|e| Error::Invariant(format!("report serialization: {e}")))?;
    Ok(ReportBundle { report, json, files })
}
