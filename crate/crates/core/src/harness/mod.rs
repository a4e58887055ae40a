//! In-context-learning experiments: datasets, label-restricted decoding,
//! metrics and significance testing.

pub mod dataset;
pub mod experiment;
pub mod metrics;
pub mod stats;
pub mod trie;

pub use dataset::{load_dataset, parse_dataset, Dataset, Document, Record};
pub use experiment::{
    run_experiment, sweep_b, DocAssignment, EpisodeReport, Evaluator, ExperimentConfig, ExperimentReport, Mode,
    ReportConfig, SeedOutcome, SweepReport,
};
pub use metrics::{exact_match, normalize_answer, token_f1};
pub use stats::{mean, std_dev, welch_t_test, StdKind, WelchResult};
pub use trie::{build_label_trie, build_label_trie_with, constrained_decode, LabelTrie};
