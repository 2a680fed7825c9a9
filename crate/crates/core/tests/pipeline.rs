use std::collections::{BTreeMap, BTreeSet};

use plateau_core::dataset::TokenGroup;
use plateau_core::pipeline::dump::{dataset_from_dump, ActivationDump, Tensor, ATTENTION_TENSOR, MLP_TENSOR};
use plateau_core::pipeline::tokens::{position_bucket, PositionBucket, TokenAnnotation};
use plateau_core::pipeline::*;
use plateau_core::Error;

fn small_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.max_contexts = 60;
    cfg.n_controls = 30;
    cfg.n_bootstrap = 10;
    cfg.louvain_restarts = 10;
    cfg.n_random_heads = 4;
    cfg
}

fn sample_dump() -> ActivationDump {
    prepare(&small_config(1)).unwrap().to_dump().unwrap()
}

fn freq(pairs: &[(u32, u64)]) -> BTreeMap<u32, u64> {
    pairs.iter().copied().collect()
}

fn set(xs: &[u32]) -> BTreeSet<u32> {
    xs.iter().copied().collect()
}

fn ann(length: usize, pos: Option<&str>, position: PositionBucket) -> TokenAnnotation {
    TokenAnnotation {
        length,
        pos_tag: pos.map(str::to_string),
        position,
    }
}

fn dump_error(bytes: &[u8]) -> DumpError {
    match ActivationDump::read_from(&mut &bytes[..]) {
        Err(Error::Dump(e)) => e,
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("corrupt dump accepted"),
    }
}

#[test]
fn dump_round_trip_is_bit_exact() {
    let dump = sample_dump();
    let bytes = dump.to_bytes().unwrap();
    let back = ActivationDump::read_from(&mut &bytes[..]).unwrap();
    assert_eq!(back, dump);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("acts.actv");
    write_dump(&path, &dump).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    let (dataset, manifest) = ingest_dump(&path).unwrap();
    assert_eq!(manifest, dump.manifest);
    let mlp = dump.tensor(MLP_TENSOR).unwrap();
    let n = dataset.n_neurons();
    for (c, ctx) in dataset.contexts.iter().enumerate() {
        assert_eq!(ctx.tokens, manifest.contexts[c].tokens);
        for i in 0..n {
            assert_eq!(dataset.activations[(i, c)].to_bits(), (mlp.data[c * n + i] as f64).to_bits());
        }
    }
}

#[test]
fn corrupt_dumps_get_distinct_diagnostics() {
    let bytes = sample_dump().to_bytes().unwrap();

    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"NOPE");
    assert!(matches!(dump_error(&bad), DumpError::BadMagic { .. }));

    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(dump_error(&bad), DumpError::UnsupportedVersion { found: 7, .. }));

    assert!(matches!(dump_error(&bytes[..10]), DumpError::TruncatedHeader(_)));

    let e = dump_error(&bytes[..bytes.len() - 3]);
    match &e {
        DumpError::TruncatedPayload { tensor, .. } => assert_eq!(tensor, ATTENTION_TENSOR),
        other => panic!("expected a truncated payload, got {other}"),
    }
    assert!(e.to_string().contains(ATTENTION_TENSOR), "{e}");

    let mut bad = bytes.clone();
    bad.extend_from_slice(&[1, 0]);
    assert!(matches!(dump_error(&bad), DumpError::TruncatedRecord { .. }));
}

#[test]
fn invalid_contents_are_rejected_on_ingest() {
    let dump = sample_dump();
    let mlp_idx = dump.tensors.iter().position(|t| t.name == MLP_TENSOR).unwrap();

    // Manifest context count must equal tensor rows.
    let mut d = dump.clone();
    d.manifest.contexts.pop();
    assert!(matches!(
        dataset_from_dump(&d).unwrap_err(),
        Error::Dump(DumpError::DimensionMismatch { .. })
    ));

    let mut d = dump.clone();
    let t = &d.tensors[mlp_idx];
    d.tensors[mlp_idx] = Tensor {
        name: t.name.clone(),
        dims: vec![t.dims[0], t.dims[1] - 1],
        data: t.data.clone(),
    };
    assert!(matches!(
        dataset_from_dump(&d).unwrap_err(),
        Error::Dump(DumpError::DimensionMismatch { .. })
    ));

    let mut d = dump.clone();
    d.tensors[mlp_idx].data[3] = f32::NAN;
    assert!(dataset_from_dump(&d).is_err());

    let mut d = dump.clone();
    d.tensors.remove(mlp_idx);
    assert!(matches!(
        dataset_from_dump(&d).unwrap_err(),
        Error::Dump(DumpError::MissingTensor(_))
    ));

    let mut d = dump.clone();
    let att = d.tensors.iter_mut().find(|t| t.name == ATTENTION_TENSOR).unwrap();
    att.data[0] += 0.5;
    assert!(dataset_from_dump(&d).is_err());

    assert_eq!(Error::from(DumpError::MissingTensor("x".into())).exit_code(), 3);
}

#[test]
fn percentile_split_examples() {
    let s = split_tokens(&freq(&[(0, 1), (1, 2), (2, 100), (3, 200)]), &TokenGroupSpec::default()).unwrap();
    assert_eq!(s.rare, set(&[0, 1]));
    assert_eq!(s.common, set(&[2, 3]));

    let equal = freq(&[(5, 7), (2, 7), (9, 7), (4, 7)]);
    let s = split_tokens(&equal, &TokenGroupSpec::default()).unwrap();
    assert_eq!(s.rare, set(&[2, 4]));
    assert_eq!(s.common, set(&[5, 9]));
    assert_eq!(split_tokens(&equal, &TokenGroupSpec::default()).unwrap(), s);
}

#[test]
fn absolute_split_drops_the_middle_band() {
    let spec = TokenGroupSpec::Absolute {
        rare_max: 100,
        common_min: 10_000,
    };
    let s = split_tokens(&freq(&[(0, 50), (1, 5000), (2, 20000)]), &spec).unwrap();
    assert_eq!(s.rare, set(&[0]));
    assert_eq!(s.common, set(&[2]));

    assert!(split_tokens(&freq(&[(0, 5000), (1, 20000)]), &spec).is_err());
    assert!(split_tokens(&BTreeMap::new(), &TokenGroupSpec::default()).is_err());
}

#[test]
fn split_partitions_the_vocabulary() {
    for n in 2..40u32 {
        let table: BTreeMap<u32, u64> = (0..n).map(|t| (t, ((t * 7919) % 13) as u64)).collect();
        for p in [10.0, 33.3, 50.0, 90.0] {
            let s = split_tokens(&table, &TokenGroupSpec::Percentile { percentile: p }).unwrap();
            assert!(s.rare.is_disjoint(&s.common));
            assert_eq!(s.rare.len() + s.common.len(), n as usize);
            let max_rare = s.rare.iter().map(|t| table[t]).max().unwrap();
            let min_common = s.common.iter().map(|t| table[t]).min().unwrap();
            assert!(max_rare <= min_common);
        }
    }
}

#[test]
fn matching_respects_the_length_window() {
    let b = PositionBucket::Middle;
    let annotations: BTreeMap<u32, TokenAnnotation> =
        [(0, ann(5, None, b)), (1, ann(4, None, b)), (2, ann(6, None, b)), (3, ann(9, None, b))]
            .into_iter()
            .collect();
    let m = match_tokens(&set(&[0]), &set(&[1, 2, 3]), &annotations).unwrap();
    assert_eq!(m.pairs.len(), 1);
    assert!([1, 2].contains(&m.pairs[0].common));
    assert!(m.unmatched.is_empty());

    let m = match_tokens(&set(&[0]), &set(&[3]), &annotations).unwrap();
    assert!(m.pairs.is_empty());
    assert_eq!(m.unmatched, vec![0]);

    assert!(match_tokens(&set(&[0]), &set(&[7]), &annotations).is_err());
    assert!(match_tokens(&set(&[]), &set(&[1]), &annotations).is_err());
}

#[test]
fn matching_prefers_shared_features() {
    let annotations: BTreeMap<u32, TokenAnnotation> = [
        (0, ann(3, Some("NOUN"), PositionBucket::End)),
        (10, ann(3, Some("VERB"), PositionBucket::End)),
        (11, ann(4, Some("NOUN"), PositionBucket::End)),
    ]
    .into_iter()
    .collect();
    let m = match_tokens(&set(&[0]), &set(&[10, 11]), &annotations).unwrap();
    assert_eq!(m.pairs[0].common, 11);
    assert!(m.pairs[0].same_pos && m.pairs[0].same_position);
}

/// Rare token `i` has length `3 i` and a unique partner of the same length;
/// a greedy pass over a shuffled candidate list can strand tokens whose only
/// partner was already taken, the optimal assignment never does.
#[test]
fn recovers_a_planted_perfect_matching() {
    let n = 12u32;
    let mut annotations = BTreeMap::new();
    for i in 0..n {
        annotations.insert(i, ann(3 * i as usize + 1, Some("X"), position_bucket(i as usize, n as usize)));
        annotations.insert(100 + i, ann(3 * i as usize + 2, Some("X"), position_bucket(i as usize, n as usize)));
    }
    // Decoys: within one character of two rare tokens, so greedy choices conflict.
    for i in 0..n - 1 {
        annotations.insert(200 + i, ann(3 * i as usize + 3, None, PositionBucket::Beginning));
    }
    let rare: BTreeSet<u32> = (0..n).collect();
    let common: BTreeSet<u32> = (100..100 + n).chain(200..200 + n - 1).collect();
    let m = match_tokens(&rare, &common, &annotations).unwrap();
    assert_eq!(m.pairs.len(), n as usize);
    assert!(m.unmatched.is_empty());
    let partners: BTreeSet<u32> = m.pairs.iter().map(|p| p.common).collect();
    assert_eq!(partners.len(), n as usize);
    for p in &m.pairs {
        assert_eq!(p.common, 100 + p.rare, "pair {p:?}");
        assert!(p.length_delta <= 1);
    }
}

#[test]
fn planted_toy_model_shows_dual_regimes() {
    let bundle = run_experiment(&small_config(0)).unwrap();
    let r = &bundle.report;
    let influence = r.influence.as_ref().unwrap();
    assert!(influence.dual_regime, "{influence:?}");
    assert!(influence.rare.plateau_count > 0);
    assert_eq!(influence.common.plateau_count, 0);
    let mut found: Vec<usize> = r.plateau.iter().map(|p| p.neuron).collect();
    found.sort_unstable();
    assert_eq!(found, r.planted_neurons);
    assert!(r.skipped.is_empty(), "{:?}", r.skipped);
}

#[test]
fn report_is_deterministic() {
    let cfg = small_config(3);
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a.json, b.json);
    assert_eq!(a.files, b.files);
    let other = run_experiment(&small_config(4)).unwrap();
    assert_ne!(a.json, other.json);
}

#[test]
fn report_carries_both_tables() {
    let bundle = run_experiment(&small_config(0)).unwrap();
    let json: serde_json::Value = serde_json::from_str(&bundle.json).unwrap();
    let t1 = json["table1"].as_array().unwrap();
    assert!(t1.len() >= 2);
    for key in [
        "model",
        "neuron_group",
        "signed_modularity_mean",
        "signed_modularity_sd",
        "communities_mean",
        "communities_sd",
        "p_value",
    ] {
        assert!(t1.iter().all(|row| row.get(key).is_some()), "table1 lacks {key}");
    }
    assert!(t1.iter().any(|row| row["neuron_group"] == "random-control"));
    let t2 = json["table2"].as_array().unwrap();
    let targets: Vec<&str> = t2.iter().map(|row| row["ablation_target"].as_str().unwrap()).collect();
    assert_eq!(targets, ["single-head-max", "random-head", "all-heads", "control"]);
    for key in [
        "model",
        "ablation_target",
        "activation_change_mean",
        "activation_change_sd",
        "effect_size",
        "p_value",
    ] {
        assert!(t2.iter().all(|row| row.get(key).is_some()), "table2 lacks {key}");
    }
    for name in [
        "influence_rare.csv",
        "influence_common.csv",
        "table1_communities.csv",
        "table2_ablation.csv",
        "attention_heads.csv",
        "token_pairs.csv",
    ] {
        assert!(bundle.files.contains_key(name), "missing {name}");
    }
    assert!(bundle.files["table2_ablation.csv"].starts_with("model,ablation_target,"));

    // Keys are sorted at every level.
    fn sorted(v: &serde_json::Value) -> bool {
        match v {
            serde_json::Value::Object(m) => {
                let keys: Vec<&String> = m.keys().collect();
                keys.windows(2).all(|w| w[0] < w[1]) && m.values().all(sorted)
            }
            serde_json::Value::Array(a) => a.iter().all(sorted),
            _ => true,
        }
    }
    assert!(sorted(&json));
    let pos = |k: &str| bundle.json.find(&format!("\"{k}\"")).unwrap();
    assert!(pos("communities") < pos("config") && pos("config") < pos("influence"));
}

#[test]
fn dump_input_skips_model_stages() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("acts.actv");
    write_dump(&path, &sample_dump()).unwrap();
    let mut cfg = small_config(1);
    cfg.source = Source::Dump;
    cfg.dump_path = Some(path);
    cfg.plateau_neurons = vec![0, 1, 2, 3];
    let bundle = run_experiment(&cfg).unwrap();
    let r = &bundle.report;
    assert!(r.influence.is_none());
    assert!(r.table2.is_empty());
    let skipped: Vec<&str> = r.skipped.iter().map(|s| s.stage.as_str()).collect();
    assert_eq!(skipped, ["influence", "ablation"]);
    assert_eq!(r.table1.iter().filter(|t| t.neuron_group == "plateau").count(), 2);
    assert!(r.routing.is_some());

    let sim = run_experiment(&small_config(1)).unwrap();
    assert_eq!(
        sim.report.routing.as_ref().unwrap().comparison.per_head.len(),
        r.routing.as_ref().unwrap().comparison.per_head.len()
    );
    assert_eq!(r.tokens.rare_contexts, sim.report.tokens.rare_contexts);
}

#[test]
fn stage_failures_are_attributed() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(0);
    cfg.source = Source::Dump;
    cfg.dump_path = Some(dir.path().join("missing.actv"));
    let e = run_experiment(&cfg).unwrap_err();
    assert!(e.to_string().contains("ingest"), "{e}");
    assert_eq!(e.exit_code(), 3);

    let mut cfg = small_config(0);
    cfg.attention_layers = Some((1, 9));
    assert_eq!(run_experiment(&cfg).unwrap_err().exit_code(), 2);

    let path = dir.path().join("acts.actv");
    write_dump(&path, &sample_dump()).unwrap();
    let mut cfg = small_config(0);
    cfg.source = Source::Dump;
    cfg.dump_path = Some(path);
    cfg.plateau_neurons = vec![0, 999];
    let e = run_experiment(&cfg).unwrap_err();
    assert!(e.to_string().contains("communities"), "{e}");
}

#[test]
fn written_bundle_matches_memory() {
    let bundle = run_experiment(&small_config(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    bundle.write_to(dir.path()).unwrap();
    assert_eq!(std::fs::read_to_string(dir.path().join("report.json")).unwrap(), bundle.json);
    for (name, body) in &bundle.files {
        assert_eq!(&std::fs::read_to_string(dir.path().join(name)).unwrap(), body);
    }
    let cfg = ExperimentConfig::from_text(&bundle.files["config.txt"]).unwrap();
    assert_eq!(cfg, small_config(2));
    assert_eq!(
        bundle.report.tokens.rare_contexts,
        prepare(&cfg).unwrap().dataset.group_indices(TokenGroup::Rare).len()
    );
}
