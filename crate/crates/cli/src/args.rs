use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Experiments with bi-sequence (context + target) text classifiers.
#[derive(Debug, Parser)]
#[command(name = "biseq", version, propagate_version = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one spec on a grouped train/valid/test split.
    Train(TrainArgs),
    /// Grid search over hyperparameter axes; the best cell by validation metric is tested.
    Grid(GridArgs),
    /// Leave-one-group-out evaluation with macro-averaged metrics.
    Lomo(LomoArgs),
    /// Ranking metrics over a `score<TAB>label[<TAB>group]` file.
    Eval(EvalArgs),
    /// Print the 19 architecture specs, one per line.
    Enumerate(EnumerateArgs),
    /// Write the synthetic containment dataset as TSV.
    Synth(SynthArgs),
}

/// Model spec flags; each mirrors a spec key.
#[derive(Debug, Default, Args)]
#[command(rename_all = "snake_case")]
pub struct SpecArgs {
    /// Combination: concat, bilinear, conditional_state, conditional_input, conditional_state_input, concat_sentence.
    #[arg(long, value_name = "NAME")]
    pub combination: Option<String>,
    /// Context encoder: cbow, rnn, cnn or none.
    #[arg(long, value_name = "NAME")]
    pub context: Option<String>,
    /// Target encoder: rnn, cnn or none.
    #[arg(long, value_name = "NAME")]
    pub target: Option<String>,
    /// Recurrent cell: gru or lstm.
    #[arg(long, value_name = "NAME")]
    pub cell: Option<String>,
    /// Recurrent state width.
    #[arg(long, value_name = "N")]
    pub rnn_size: Option<String>,
    /// CNN filter windows joined by `+`, e.g. 3+4+5.
    #[arg(long, value_name = "LIST")]
    pub windows: Option<String>,
    /// CNN filters per window.
    #[arg(long, value_name = "N")]
    pub filters: Option<String>,
    /// L2 coefficient on CNN filter weights.
    #[arg(long, value_name = "X")]
    pub l2: Option<String>,
    /// Adam learning rate.
    #[arg(long, value_name = "X")]
    pub lr: Option<String>,
    /// Number of classes; defaults to the dataset's label count.
    #[arg(long, value_name = "N")]
    pub classes: Option<String>,
    /// Context truncation length in tokens.
    #[arg(long, value_name = "N")]
    pub ctx_len: Option<String>,
    /// Target truncation length in tokens.
    #[arg(long, value_name = "N")]
    pub tgt_len: Option<String>,
    /// Seed for initialisation, splits and shuffling.
    #[arg(long, value_name = "N")]
    pub seed: Option<String>,
    /// Per-class bias on bilinear scores: true or false.
    #[arg(long, value_name = "BOOL")]
    pub bilinear_bias: Option<String>,
}

/// Data, embedding, training-loop and output flags shared by train, grid and lomo.
#[derive(Debug, Default, Args)]
#[command(rename_all = "snake_case")]
pub struct RunArgs {
    /// Dataset file.
    #[arg(long, value_name = "PATH")]
    pub data: Option<String>,
    /// Dataset format: tsv-pairs, snli-jsonl or wikiqa-tsv [default: tsv-pairs].
    #[arg(long, value_name = "NAME")]
    pub format: Option<String>,
    /// Pretrained vector file; random embeddings when absent.
    #[arg(long, value_name = "PATH")]
    pub embeddings: Option<String>,
    /// Width of random embeddings [default: 50].
    #[arg(long, value_name = "N")]
    pub embed_dim: Option<String>,
    /// Minimum token count for the vocabulary [default: 1].
    #[arg(long, value_name = "N")]
    pub min_count: Option<String>,
    /// Keep embeddings fixed during training.
    #[arg(long)]
    pub freeze_embeddings: bool,
    /// Set ctx_len and tgt_len to this token-length percentile of the data.
    #[arg(long, value_name = "P")]
    pub length_percentile: Option<String>,
    /// Mini-batch size [default: 64].
    #[arg(long, value_name = "N")]
    pub batch_size: Option<String>,
    /// Epoch cap [default: 50].
    #[arg(long, value_name = "N")]
    pub max_epochs: Option<String>,
    /// Epochs without validation improvement before stopping [default: 5].
    #[arg(long, value_name = "N")]
    pub patience: Option<String>,
    /// Validation metric for early stopping and selection: avgp, auc or accuracy [default: avgp].
    #[arg(long, value_name = "NAME")]
    pub metric: Option<String>,
    /// Global gradient-norm cap, or `none` [default: 5].
    #[arg(long, value_name = "X")]
    pub clip_norm: Option<String>,
    /// Loss weight for the positive class [default: none].
    #[arg(long, value_name = "X")]
    pub pos_weight: Option<String>,
    /// Record wall-clock times in the outputs (breaks byte-identical reruns).
    #[arg(long)]
    pub timings: bool,
    /// Output directory [default: out].
    #[arg(long, value_name = "DIR")]
    pub out: Option<String>,
    /// Worker threads; 0 uses every core [default: 0].
    #[arg(long, value_name = "N", env = "BISEQ_WORKERS")]
    pub workers: Option<String>,
    /// Key-value file (`key=value` lines, `#` comments) read before flags.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Extra `key=value` settings applied last, e.g. a line printed by enumerate.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
#[command(rename_all = "snake_case")]
pub struct TrainArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[command(flatten)]
    pub run: RunArgs,
    /// Train:valid:test ratios [default: 0.6,0.1,0.3].
    #[arg(long, value_name = "A,B,C")]
    pub split: Option<String>,
}

#[derive(Debug, Args)]
#[command(rename_all = "snake_case")]
pub struct GridArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[command(flatten)]
    pub run: RunArgs,
    /// Train:valid:test ratios [default: 0.6,0.1,0.3].
    #[arg(long, value_name = "A,B,C")]
    pub split: Option<String>,
    /// Start from the published search space instead of the spec's own values.
    #[arg(long)]
    pub paper_grid: bool,
    /// Cell axis, comma separated, e.g. gru,lstm.
    #[arg(long, value_name = "LIST")]
    pub grid_cell: Option<String>,
    /// rnn_size axis, comma separated.
    #[arg(long, value_name = "LIST")]
    pub grid_rnn_size: Option<String>,
    /// Window-set axis, comma separated sets joined by `+`, e.g. 3,3+4,3+4+5.
    #[arg(long, value_name = "LIST")]
    pub grid_windows: Option<String>,
    /// Filter-count axis, comma separated.
    #[arg(long, value_name = "LIST")]
    pub grid_filters: Option<String>,
    /// CNN L2 axis, comma separated.
    #[arg(long, value_name = "LIST")]
    pub grid_l2: Option<String>,
    /// Learning-rate axis, comma separated.
    #[arg(long, value_name = "LIST")]
    pub grid_lr: Option<String>,
    /// Evaluate every cell on the test split, not only the winner.
    #[arg(long)]
    pub full_table: bool,
}

#[derive(Debug, Args)]
#[command(rename_all = "snake_case")]
pub struct LomoArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[command(flatten)]
    pub run: RunArgs,
    /// Share of each fold's training data held out for early stopping [default: 0.1].
    #[arg(long, value_name = "X")]
    pub holdout: Option<String>,
}

#[derive(Debug, Args)]
#[command(rename_all = "snake_case")]
pub struct EvalArgs {
    /// Score file: `score<TAB>label[<TAB>group]` per line.
    #[arg(long, value_name = "PATH")]
    pub scores: PathBuf,
    /// Cut-off for P/R/F1@K; repeatable [default: 200, 50, 20, 10, 5].
    #[arg(long, value_name = "K")]
    pub k: Vec<usize>,
}

#[derive(Debug, Args)]
#[command(rename_all = "snake_case")]
pub struct EnumerateArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
}

#[derive(Debug, Args)]
#[command(rename_all = "snake_case")]
pub struct SynthArgs {
    /// Number of records.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Number of groups, assigned round-robin.
    #[arg(long, default_value_t = 5)]
    pub groups: usize,
    /// Number of distinct words.
    #[arg(long, default_value_t = 50)]
    pub vocab: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Negatives carry a topic word other than the context's.
    #[arg(long)]
    pub distractors: bool,
    /// Output TSV file.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}
