//! Context-combination schemes and the architecture catalogue.
//!
//! A [`ModelSpec`] names one architecture (how context and target are encoded
//! and combined) together with its hyperparameters. [`enumerate_architectures`]
//! expands a base spec into the full set of 19 variants:
//!
//! * concat / bilinear × {cbow, rnn, cnn} context × {rnn, cnn} target (12)
//! * conditional state / input / state+input × {rnn, cnn} context, rnn target (6)
//! * concat-sentence: one RNN over `context ⊕ SEP ⊕ target` (1)

mod model;

pub use model::{probabilities, BilinearParams, ClassifierHead, Combiner, Encoder, Model};

use std::fmt;
use std::str::FromStr;

use crate::encoders::CellKind;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Combination {
    Concat,
    Bilinear,
    ConditionalState,
    ConditionalInput,
    ConditionalStateInput,
    ConcatSentence,
}

impl Combination {
    pub const ALL: [Combination; 6] = [
        Combination::Concat,
        Combination::Bilinear,
        Combination::ConditionalState,
        Combination::ConditionalInput,
        Combination::ConditionalStateInput,
        Combination::ConcatSentence,
    ];

    pub fn is_conditional(self) -> bool {
        matches!(
            self,
            Combination::ConditionalState | Combination::ConditionalInput | Combination::ConditionalStateInput
        )
    }

    /// Context vector becomes the target RNN's initial state.
    pub fn feeds_state(self) -> bool {
        matches!(self, Combination::ConditionalState | Combination::ConditionalStateInput)
    }

    /// Context vector is appended to every target input.
    pub fn feeds_input(self) -> bool {
        matches!(self, Combination::ConditionalInput | Combination::ConditionalStateInput)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Combination::Concat => "concat",
            Combination::Bilinear => "bilinear",
            Combination::ConditionalState => "conditional_state",
            Combination::ConditionalInput => "conditional_input",
            Combination::ConditionalStateInput => "conditional_state_input",
            Combination::ConcatSentence => "concat_sentence",
        }
    }
}

impl fmt::Display for Combination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Combination {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Combination::ALL
            .into_iter()
            .find(|c| c.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown combination `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ContextEncoder {
    Cbow,
    Rnn,
    Cnn,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TargetEncoder {
    Rnn,
    Cnn,
    None,
}

impl fmt::Display for ContextEncoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContextEncoder::Cbow => "cbow",
            ContextEncoder::Rnn => "rnn",
            ContextEncoder::Cnn => "cnn",
            ContextEncoder::None => "none",
        })
    }
}

impl FromStr for ContextEncoder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cbow" => Ok(ContextEncoder::Cbow),
            "rnn" => Ok(ContextEncoder::Rnn),
            "cnn" => Ok(ContextEncoder::Cnn),
            "none" => Ok(ContextEncoder::None),
            other => Err(Error::Config(format!("unknown context encoder `{other}`"))),
        }
    }
}

impl fmt::Display for TargetEncoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetEncoder::Rnn => "rnn",
            TargetEncoder::Cnn => "cnn",
            TargetEncoder::None => "none",
        })
    }
}

impl FromStr for TargetEncoder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rnn" => Ok(TargetEncoder::Rnn),
            "cnn" => Ok(TargetEncoder::Cnn),
            "none" => Ok(TargetEncoder::None),
            other => Err(Error::Config(format!("unknown target encoder `{other}`"))),
        }
    }
}

/// Architecture and hyperparameters of one model.
///
/// Serialises to a single line of `key=value` pairs, e.g.
/// `combination=concat context=rnn target=cnn cell=lstm rnn_size=200 windows=3+4+5 filters=20 l2=0.01 lr=0.001 …`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub combination: Combination,
    pub context: ContextEncoder,
    pub target: TargetEncoder,
    pub cell: CellKind,
    pub rnn_size: usize,
    pub windows: Vec<usize>,
    pub filters: usize,
    /// L2 coefficient applied to CNN filter weights.
    pub l2: f64,
    pub lr: f64,
    pub classes: usize,
    pub ctx_len: usize,
    pub tgt_len: usize,
    pub seed: u64,
    /// Per-class bias on the bilinear scores.
    pub bilinear_bias: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            combination: Combination::Concat,
            context: ContextEncoder::Rnn,
            target: TargetEncoder::Rnn,
            cell: CellKind::Gru,
            rnn_size: 48,
            windows: vec![3, 4, 5],
            filters: 16,
            l2: 0.01,
            lr: 0.001,
            classes: 2,
            ctx_len: 14,
            tgt_len: 60,
            seed: 0,
            bilinear_bias: true,
        }
    }
}

/// Serialisation keys, in output order.
pub const SPEC_KEYS: [&str; 14] = [
    "combination",
    "context",
    "target",
    "cell",
    "rnn_size",
    "windows",
    "filters",
    "l2",
    "lr",
    "classes",
    "ctx_len",
    "tgt_len",
    "seed",
    "bilinear_bias",
];

fn parse_num<N: FromStr>(key: &str, value: &str) -> Result<N> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

pub fn parse_windows(value: &str) -> Result<Vec<usize>> {
    value
        .split('+')
        .map(|w| parse_num("windows", w.trim()))
        .collect()
}

pub fn format_windows(windows: &[usize]) -> String {
    windows.iter().map(usize::to_string).collect::<Vec<_>>().join("+")
}

impl ModelSpec {
    /// Sets one field from its serialised key and value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "combination" => self.combination = value.parse()?,
            "context" => self.context = value.parse()?,
            "target" => self.target = value.parse()?,
            "cell" => self.cell = value.parse()?,
            "rnn_size" => self.rnn_size = parse_num(key, value)?,
            "windows" => self.windows = parse_windows(value)?,
            "filters" => self.filters = parse_num(key, value)?,
            "l2" => self.l2 = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "classes" => self.classes = parse_num(key, value)?,
            "ctx_len" => self.ctx_len = parse_num(key, value)?,
            "tgt_len" => self.tgt_len = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "bilinear_bias" => self.bilinear_bias = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown spec key `{other}`"))),
        }
        Ok(())
    }

    /// Value of `key` in serialised form.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "combination" => self.combination.to_string(),
            "context" => self.context.to_string(),
            "target" => self.target.to_string(),
            "cell" => self.cell.to_string(),
            "rnn_size" => self.rnn_size.to_string(),
            "windows" => format_windows(&self.windows),
            "filters" => self.filters.to_string(),
            "l2" => self.l2.to_string(),
            "lr" => self.lr.to_string(),
            "classes" => self.classes.to_string(),
            "ctx_len" => self.ctx_len.to_string(),
            "tgt_len" => self.tgt_len.to_string(),
            "seed" => self.seed.to_string(),
            "bilinear_bias" => self.bilinear_bias.to_string(),
            _ => return None,
        })
    }

    /// Short architecture label such as `concat/rnn/cnn`.
    pub fn architecture(&self) -> String {
        format!("{}/{}/{}", self.combination, self.context, self.target)
    }

    /// Width of the context representation.
    pub fn context_dim(&self, embed_dim: usize) -> usize {
        match self.context {
            ContextEncoder::Cbow => embed_dim,
            ContextEncoder::Rnn => self.rnn_size,
            ContextEncoder::Cnn => self.filters * self.windows.len(),
            ContextEncoder::None => 0,
        }
    }

    pub fn uses_rnn(&self) -> bool {
        self.combination.is_conditional()
            || self.combination == Combination::ConcatSentence
            || self.context == ContextEncoder::Rnn
            || self.target == TargetEncoder::Rnn
    }

    pub fn uses_cnn(&self) -> bool {
        self.context == ContextEncoder::Cnn || self.target == TargetEncoder::Cnn
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = SPEC_KEYS
            .iter()
            .map(|k| format!("{k}={}", self.get(k).expect("known key")))
            .collect();
        f.write_str(&parts.join(" "))
    }
}

impl FromStr for ModelSpec {
    type Err = Error;

    /// Parses whitespace-separated `key=value` pairs; absent keys keep their defaults.
    fn from_str(s: &str) -> Result<Self> {
        let mut spec = ModelSpec::default();
        for pair in s.split_whitespace() {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{pair}`")))?;
            spec.set(k, v)?;
        }
        Ok(spec)
    }
}

/// One broken constraint reported by [`validate_spec`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub rule: &'static str,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.rule, self.message)
    }
}

/// Checks every architectural constraint and reports all violations.
///
/// Rule letters:
/// (a) conditional variants need an RNN target and an RNN/CNN context;
/// (b) CBOW context only with concat or bilinear;
/// (c) concat-sentence uses no separate encoders;
/// (d) when the context seeds the target state, its width equals `rnn_size`;
/// (e) context and target RNNs share `rnn_size`, which holds structurally
///     because the spec carries a single size.
pub fn validate_spec(spec: &ModelSpec) -> std::result::Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    let mut push = |rule, message: String| v.push(Violation { rule, message });
    let comb = spec.combination;

    if comb.is_conditional() {
        if spec.target != TargetEncoder::Rnn {
            push("a", format!("{comb} needs an rnn target, got {}", spec.target));
        }
        if !matches!(spec.context, ContextEncoder::Rnn | ContextEncoder::Cnn) {
            push("a", format!("{comb} needs an rnn or cnn context, got {}", spec.context));
        }
    }
    if spec.context == ContextEncoder::Cbow && !matches!(comb, Combination::Concat | Combination::Bilinear) {
        push("b", format!("cbow context is only allowed with concat or bilinear, not {comb}"));
    }
    if comb == Combination::ConcatSentence {
        if spec.context != ContextEncoder::None || spec.target != TargetEncoder::None {
            push(
                "c",
                format!(
                    "concat_sentence uses a single rnn; context and target must be none, got {}/{}",
                    spec.context, spec.target
                ),
            );
        }
    } else {
        if spec.context == ContextEncoder::None {
            push("c", format!("{comb} needs a context encoder"));
        }
        if spec.target == TargetEncoder::None {
            push("c", format!("{comb} needs a target encoder"));
        }
    }
    if comb.feeds_state() && spec.context == ContextEncoder::Cnn {
        let width = spec.filters * spec.windows.len();
        if width != spec.rnn_size {
            push(
                "d",
                format!(
                    "cnn context width {} × {} = {width} must match rnn_size {}",
                    spec.filters,
                    spec.windows.len(),
                    spec.rnn_size
                ),
            );
        }
    }

    if spec.uses_rnn() && spec.rnn_size == 0 {
        push("size", "rnn_size must be positive".into());
    }
    if spec.uses_cnn() {
        if spec.windows.is_empty() || spec.windows.contains(&0) {
            push("size", format!("filter windows must be positive, got {:?}", spec.windows));
        }
        if spec.filters == 0 {
            push("size", "filters must be positive".into());
        }
    }
    if spec.classes < 2 {
        push("size", format!("need at least 2 classes, got {}", spec.classes));
    }
    if spec.ctx_len == 0 || spec.tgt_len == 0 {
        push("size", "maximum lengths must be positive".into());
    }
    if !(spec.lr.is_finite() && spec.lr >= 0.0) {
        push("optim", format!("learning rate must be finite and non-negative, got {}", spec.lr));
    }
    if !(spec.l2.is_finite() && spec.l2 >= 0.0) {
        push("optim", format!("l2 must be finite and non-negative, got {}", spec.l2));
    }

    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

pub(crate) fn violations_to_error(spec: &ModelSpec, violations: &[Violation]) -> Error {
    let list: Vec<String> = violations.iter().map(ToString::to_string).collect();
    Error::Config(format!("invalid spec `{}`: {}", spec.architecture(), list.join("; ")))
}

/// Number of filters so that `filters × |windows| = rnn_size`.
pub fn matching_filters(rnn_size: usize, windows: &[usize]) -> Result<usize> {
    if windows.is_empty() || !rnn_size.is_multiple_of(windows.len()) {
        return Err(Error::Config(format!(
            "rnn_size {rnn_size} is not divisible by {} filter windows",
            windows.len()
        )));
    }
    Ok(rnn_size / windows.len())
}

/// The 19 architectures, sharing the hyperparameters of `base`.
///
/// Conditional variants that seed the target state from a CNN context get
/// `filters = rnn_size / |windows|`.
pub fn enumerate_architectures(base: &ModelSpec) -> Result<Vec<ModelSpec>> {
    let with = |combination, context, target| ModelSpec {
        combination,
        context,
        target,
        ..base.clone()
    };
    let mut specs = Vec::with_capacity(19);
    for comb in [Combination::Concat, Combination::Bilinear] {
        for ctx in [ContextEncoder::Cbow, ContextEncoder::Rnn, ContextEncoder::Cnn] {
            for tgt in [TargetEncoder::Rnn, TargetEncoder::Cnn] {
                specs.push(with(comb, ctx, tgt));
            }
        }
    }
    for comb in [
        Combination::ConditionalState,
        Combination::ConditionalInput,
        Combination::ConditionalStateInput,
    ] {
        for ctx in [ContextEncoder::Rnn, ContextEncoder::Cnn] {
            let mut spec = with(comb, ctx, TargetEncoder::Rnn);
            if comb.feeds_state() && ctx == ContextEncoder::Cnn {
                spec.filters = matching_filters(base.rnn_size, &base.windows)?;
            }
            specs.push(spec);
        }
    }
    specs.push(with(Combination::ConcatSentence, ContextEncoder::None, TargetEncoder::None));
    for spec in &specs {
        validate_spec(spec).map_err(|v| violations_to_error(spec, &v))?;
    }
    Ok(specs)
}
