use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use serde_json::{json, Value};

use plateau_core::dataset::TokenGroup;
use plateau_core::graph::louvain;
use plateau_core::influence::{profile_csv, InfluenceProfile, PowerLawFit, RegimeLabels};
use plateau_core::pipeline::*;
use plateau_core::{Error, Result};

const SUBCOMMANDS: &[(&str, &str)] = &[
    ("simulate", "build the toy model and corpus and write an activation dump"),
    ("influence", "mean-ablation influence profiles for rare and common tokens"),
    ("regimes", "power-law fits and plateau / rapid-decay labels"),
    ("graph", "signed correlation graph of the plateau neurons"),
    ("communities", "clustering of plateau neurons against random controls"),
    ("attention", "rare versus common attention distributions"),
    ("ablate", "head-removal ablations on plateau activation"),
    ("report", "every stage, written as a report directory"),
    ("ingest", "validate an activation dump and summarize it"),
];

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

fn cli() -> Command {
    let mut common = vec![
        Arg::new("config")
            .long("config")
            .short('c')
            .value_name("FILE")
            .help("key = value configuration file; flags override it"),
        Arg::new("out")
            .long("out")
            .short('o')
            .value_name("DIR")
            .help("directory for CSV and JSON outputs"),
    ];
    for (key, help) in KEYS {
        common.push(
            Arg::new(*key)
                .long(flag(key))
                .value_name("VALUE")
                .help(*help)
                .help_heading("Configuration"),
        );
    }
    let mut cmd = Command::new("plateau")
        .about("Rare-token plateau neuron analysis")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in SUBCOMMANDS {
        let mut sub = Command::new(*name).about(*about).args(common.clone());
        sub = match *name {
            "simulate" => sub.arg(
                Arg::new("dump")
                    .long("dump")
                    .value_name("FILE")
                    .help("dump file to write (default: <out>/activations.actv or activations.actv)"),
            ),
            "ingest" => sub.arg(Arg::new("file").required(true).value_name("FILE").help("dump to validate")),
            "report" => sub.arg(
                Arg::new("print")
                    .long("print")
                    .action(ArgAction::SetTrue)
                    .help("also print the JSON report"),
            ),
            _ => sub,
        };
        cmd = cmd.subcommand(sub);
    }
    cmd
}

fn load_config(m: &ArgMatches) -> Result<ExperimentConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(path) => ExperimentConfig::from_file(Path::new(path))?,
        None => ExperimentConfig::default(),
    };
    // Mode switches first so that mode-specific keys can follow.
    let mut keys: Vec<&str> = KEYS.iter().map(|k| k.0).collect();
    keys.sort_by_key(|k| *k != "split_mode");
    for key in keys {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_files(out: Option<&PathBuf>, files: &[(&str, String)]) -> Result<()> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        for (name, body) in files {
            std::fs::write(dir.join(name), body)?;
        }
    }
    Ok(())
}

fn to_value<T: serde::Serialize>(x: &T) -> Result<Value> {
    serde_json::to_value(x).map_err(|e| Error::Invariant(format!("serialization: {e}")))
}

fn run(name: &str, m: &ArgMatches) -> Result<Value> {
    if name == "ingest" {
        let path = PathBuf::from(m.get_one::<String>("file").expect("required"));
        let (dataset, manifest) = ingest_dump(&path)?;
        return Ok(json!({
            "model": manifest.model,
            "tokenizer": manifest.tokenizer,
            "mlp_layer": dataset.layer,
            "neurons": dataset.n_neurons(),
            "contexts": dataset.n_contexts(),
            "rare_contexts": dataset.group_indices(TokenGroup::Rare).len(),
            "common_contexts": dataset.group_indices(TokenGroup::Common).len(),
            "attention_layers": manifest.attention_layers,
            "annotation_degraded": manifest.annotation_degraded,
        }));
    }

    let cfg = load_config(m)?;
    let out = m.get_one::<String>("out").map(PathBuf::from);
    if name == "report" {
        let bundle = run_experiment(&cfg)?;
        let dir = out.unwrap_or_else(|| PathBuf::from("report"));
        bundle.write_to(&dir)?;
        let mut summary = json!({
            "directory": dir.display().to_string(),
            "files": bundle.files.keys().chain(std::iter::once(&"report.json".to_string())).collect::<Vec<_>>(),
        });
        if m.get_flag("print") {
            summary["report"] = serde_json::from_str(&bundle.json).map_err(|e| Error::Invariant(e.to_string()))?;
        }
        return Ok(summary);
    }

    let sub = prepare(&cfg)?;
    match name {
        "simulate" => {
            let path = match (m.get_one::<String>("dump"), &out) {
                (Some(p), _) => PathBuf::from(p),
                (None, Some(dir)) => {
                    std::fs::create_dir_all(dir)?;
                    dir.join("activations.actv")
                }
                (None, None) => PathBuf::from("activations.actv"),
            };
            write_dump(&path, &sub.to_dump()?)?;
            Ok(json!({
                "dump": path.display().to_string(),
                "model": sub.model_label,
                "planted_neurons": sub.planted_neurons,
                "neurons": sub.dataset.n_neurons(),
                "rare_tokens": sub.split.rare.len(),
                "common_tokens": sub.split.common.len(),
                "rare_contexts": sub.dataset.group_indices(TokenGroup::Rare).len(),
                "common_contexts": sub.dataset.group_indices(TokenGroup::Common).len(),
                "attention_layers": [sub.layer_range.0, sub.layer_range.1],
            }))
        }
        "influence" | "regimes" => {
            let stage = run_influence(&sub)?;
            let csv = |g: &(InfluenceProfile, PowerLawFit, RegimeLabels)| profile_csv(&g.0, &g.1, &g.2);
            write_files(
                out.as_ref(),
                &[("influence_rare.csv", csv(&stage.rare)), ("influence_common.csv", csv(&stage.common))],
            )?;
            if name == "influence" {
                let top = |g: &(InfluenceProfile, PowerLawFit, RegimeLabels)| -> Value {
                    g.0.entries()
                        .iter()
                        .take(10)
                        .map(|e| json!({"neuron": e.neuron, "influence": e.influence, "signed_delta": e.signed_delta}))
                        .collect()
                };
                Ok(json!({"rare_top": top(&stage.rare), "common_top": top(&stage.common), "layer": sub.dataset.layer}))
            } else {
                Ok(json!({"regimes": to_value(&stage.report)?, "plateau": to_value(&stage.plateau())?}))
            }
        }
        "graph" => {
            let (plateau, _) = resolve_plateau(&sub)?;
            let ids: Vec<usize> = plateau.iter().map(|p| p.neuron).collect();
            let graph = neuron_graph(&sub, &ids)?;
            let partition = louvain(&graph, cfg.louvain_restarts, cfg.seed)?;
            write_files(
                out.as_ref(),
                &[
                    ("plateau_edges.csv", graph.edges_csv()),
                    ("plateau_partition.csv", partition.to_csv(&graph)),
                ],
            )?;
            Ok(json!({
                "nodes": ids,
                "edges": graph.edges().len(),
                "threshold": graph.threshold(),
                "communities": partition.n_communities,
                "modularity": partition.modularity,
                "signed_modularity": partition.signed_modularity,
            }))
        }
        "communities" => {
            let (plateau, _) = resolve_plateau(&sub)?;
            let stage = run_communities(&sub, &plateau)?;
            let rows = table1(&sub.model_label, &stage);
            write_files(out.as_ref(), &[("table1_communities.csv", table1_csv(&rows))])?;
            Ok(json!({"table1": to_value(&rows)?, "notes": stage.notes}))
        }
        "attention" => {
            let comparison = run_attention(&sub)?;
            let mut csv = String::from("layer,head,r\n");
            for h in &comparison.per_head {
                csv.push_str(&format!("{},{},{}\n", h.layer, h.head, h.r));
            }
            write_files(out.as_ref(), &[("attention_heads.csv", csv)])?;
            to_value(&comparison)
        }
        "ablate" => {
            let (plateau, _) = resolve_plateau(&sub)?;
            let report = run_ablation(&sub, &plateau)?;
            let rows = table2(&sub.model_label, &report);
            write_files(out.as_ref(), &[("table2_ablation.csv", table2_csv(&rows))])?;
            Ok(json!({
                "table2": to_value(&rows)?,
                "baseline_activation": report.baseline_activation,
                "plateau": report.plateau.neurons,
            }))
        }
        _ => unreachable!("unknown subcommand {name}"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PLATEAU_LOG", "warn")).init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let (name, m) = matches.subcommand().expect("subcommand required");
    match run(name, m) {
        Ok(v) => {
            let text = serde_json::to_string_pretty(&v).expect("JSON values serialize");
            // A closed pipe on stdout is not a failure of the analysis.
            let _ = writeln!(std::io::stdout().lock(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::debug!("{name} failed");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
