//! End-to-end orchestration: token groups, dump ingestion, configuration
//! and report generation.

pub mod config;
pub mod dump;
pub mod report;
pub mod tokens;

pub use config::{ExperimentConfig, GraphContexts, Source, KEYS};
pub use dump::{ingest_dump, read_dump, write_dump, ActivationDump, DumpError, DumpManifest};
pub use report::{
    configured_plateau, neuron_graph, prepare, resolve_plateau, run_ablation, run_attention, run_communities, run_experiment,
    run_influence, run_routing, table1, table1_csv, table2, table2_csv, CommunityRow, CommunityStage,
    InfluenceStage, PlateauNeuron, Report, ReportBundle, RoutingStage, Substrate, Table1Row, Table2Row,
};
pub use tokens::{match_tokens, split_tokens, TokenGroupSpec};
