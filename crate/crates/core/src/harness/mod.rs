//! Dataset ingestion, grouped splits, grid search, leave-one-group-out
//! evaluation and result persistence.

mod dataset;
mod grid;
mod lomo;
mod output;
mod prepare;

pub use dataset::{
    assign_groups, load_dataset, split_dataset, suggest_max_lengths, synth, Dataset, Format, Record, Split, SynthConfig,
};
pub use grid::{grid_search, search_space, Expansion, GridConfig, GridData, GridResult, GridRow, GridSpace};
pub use lomo::{lomo_evaluate, Fold, FoldManifest, LomoConfig, LomoResult};
pub use output::{
    grid_rows, lomo_rows, read_scores, sha256_hex, write_scores, write_history_jsonl, write_results_csv, DatasetInfo, Manifest, ResultRow,
    SplitManifest,
};
pub use prepare::{encode_dataset, prepare, EmbeddingSource, Prepared};
