//! Mini-batch training with Adam, CNN-filter L2, and early stopping.

use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::combinators::{validate_spec, violations_to_error, Model, ModelSpec};
use crate::embed::{EmbeddingTable, PAD};
use crate::encoders::Mask;
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, DEFAULT_KS};
use crate::scalar::Scalar;
use crate::tensor::{softmax, Bound, ParamKind, Tape, Tensor, Var};

/// One example as vocabulary ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub context: Vec<usize>,
    pub target: Vec<usize>,
    pub label: usize,
}

impl EncodedPair {
    pub fn new(context: Vec<usize>, target: Vec<usize>, label: usize) -> Self {
        Self { context, target, label }
    }
}

/// Rectangular, right-padded id matrices with per-row masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub context: Vec<Vec<usize>>,
    pub context_masks: Vec<Mask>,
    pub target: Vec<Vec<usize>>,
    pub target_masks: Vec<Mask>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn pad_side(ids: &[usize], max_len: usize) -> (Vec<usize>, Mask) {
    let real = ids.len().min(max_len);
    let mut row = ids[..real].to_vec();
    row.resize(max_len, PAD);
    (row, Mask::prefix(real, max_len))
}

/// Truncates from the right and pads with PAD to exactly the given lengths.
pub fn pad_batch(pairs: &[EncodedPair], max_ctx_len: usize, max_tgt_len: usize) -> Result<Batch> {
    if pairs.is_empty() {
        return Err(Error::Input("cannot build an empty batch".into()));
    }
    if max_ctx_len == 0 || max_tgt_len == 0 {
        return Err(Error::Config("maximum lengths must be at least 1".into()));
    }
    let mut batch = Batch {
        context: Vec::with_capacity(pairs.len()),
        context_masks: Vec::with_capacity(pairs.len()),
        target: Vec::with_capacity(pairs.len()),
        target_masks: Vec::with_capacity(pairs.len()),
        labels: Vec::with_capacity(pairs.len()),
    };
    for (i, p) in pairs.iter().enumerate() {
        check_pair(p, i)?;
        let (c, cm) = pad_side(&p.context, max_ctx_len);
        let (t, tm) = pad_side(&p.target, max_tgt_len);
        batch.context.push(c);
        batch.context_masks.push(cm);
        batch.target.push(t);
        batch.target_masks.push(tm);
        batch.labels.push(p.label);
    }
    Ok(batch)
}

fn check_pair(p: &EncodedPair, index: usize) -> Result<()> {
    if p.context.is_empty() {
        return Err(Error::Input(format!("record {index} has an empty context")));
    }
    if p.target.is_empty() {
        return Err(Error::Input(format!("record {index} has an empty target")));
    }
    Ok(())
}

/// Adam moments for a list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update, applied in place.
///
/// Every gradient is checked before anything is touched, so a non-finite
/// gradient leaves both parameters and state unchanged.
pub fn adam_step<T: Scalar>(params: &mut [Tensor<T>], grads: &[Tensor<T>], state: &mut AdamState<T>, lr: T) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "adam over {} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        p.expect_same_shape(g)?;
        p.expect_same_shape(&state.m[i])?;
        if !g.is_finite() {
            return Err(Error::Numeric(format!("gradient of parameter {i} is not finite")));
        }
    }
    state.t += 1;
    let b1 = T::lit(state.beta1);
    let b2 = T::lit(state.beta2);
    let eps = T::lit(state.eps);
    let c1 = T::one() - b1.powi(state.t as i32);
    let c2 = T::one() - b2.powi(state.t as i32);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (k, &gk) in g.data().iter().enumerate() {
            m[k] = b1 * m[k] + (T::one() - b1) * gk;
            v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: T) -> T {
    let norm = grads.iter().map(Tensor::sum_squares).sum::<T>().sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads {
            g.scale(factor);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMetric {
    Avgp,
    Auc,
    Accuracy,
}

impl SelectionMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectionMetric::Avgp => "avgp",
            SelectionMetric::Auc => "auc",
            SelectionMetric::Accuracy => "accuracy",
        }
    }

    pub fn pick<T: Scalar>(self, report: &EvalReport<T>) -> Option<T> {
        match self {
            SelectionMetric::Avgp => report.avgp,
            SelectionMetric::Auc => report.auc,
            SelectionMetric::Accuracy => report.accuracy,
        }
    }
}

impl std::fmt::Display for SelectionMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SelectionMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avgp" => Ok(SelectionMetric::Avgp),
            "auc" => Ok(SelectionMetric::Auc),
            "accuracy" => Ok(SelectionMetric::Accuracy),
            other => Err(Error::Config(format!(
                "unknown selection metric `{other}` (expected avgp, auc or accuracy)"
            ))),
        }
    }
}

/// Loop settings. Learning rate and L2 coefficient live on the [`ModelSpec`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    pub metric: SelectionMetric,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Loss weight for label 1; `None` is plain cross-entropy.
    pub pos_weight: Option<f64>,
    /// Store per-epoch wall time in the history.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            metric: SelectionMetric::Avgp,
            clip_norm: Some(5.0),
            pos_weight: None,
            record_timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if self.max_epochs == 0 {
            problems.push("max_epochs must be positive".to_string());
        }
        if self.patience == 0 {
            problems.push("patience must be positive".to_string());
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            problems.push("clip_norm must be positive".to_string());
        }
        if matches!(self.pos_weight, Some(w) if !(w > 0.0)) {
            problems.push("pos_weight must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub metric: SelectionMetric,
    pub valid_metric: f64,
    pub valid_avgp: Option<f64>,
    pub valid_auc: Option<f64>,
    pub valid_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_ms: Option<f64>,
}

/// Writes a history as JSON lines.
pub fn write_history<W: std::io::Write>(mut out: W, history: &[EpochRecord]) -> Result<()> {
    for record in history {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience counter over a metric where larger is better.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Outcome of one validation pass.
#[derive(Clone, Debug)]
pub struct Validation {
    pub metric: f64,
    pub report: Option<EvalReport<f64>>,
}

#[derive(Clone, Debug)]
pub struct TrainedModel<T> {
    /// Parameters of the best validation epoch.
    pub model: Model<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

/// Scores `valid` and extracts the selection metric.
pub fn validation_metric<T: Scalar>(model: &Model<T>, valid: &[EncodedPair], metric: SelectionMetric) -> Result<Validation> {
    let report = evaluate(model, valid)?;
    let value = metric
        .pick(&report)
        .ok_or_else(|| Error::UndefinedMetric(format!("validation {metric} is undefined for this validation set")))?;
    Ok(Validation {
        metric: value.as_f64(),
        report: Some(report.to_f64()),
    })
}

/// Trains with validation on `valid` using the configured selection metric.
pub fn train_model<T: Scalar>(
    spec: &ModelSpec,
    embedding: EmbeddingTable<T>,
    train: &[EncodedPair],
    valid: &[EncodedPair],
    config: &TrainConfig,
) -> Result<TrainedModel<T>> {
    if valid.is_empty() {
        return Err(Error::Input("validation set is empty".into()));
    }
    train_model_with(spec, embedding, train, config, |model| validation_metric(model, valid, config.metric))
}

/// Training loop with a caller-supplied validation function, called once per
/// epoch on the current parameters.
pub fn train_model_with<T: Scalar, F>(
    spec: &ModelSpec,
    embedding: EmbeddingTable<T>,
    train: &[EncodedPair],
    config: &TrainConfig,
    mut validate: F,
) -> Result<TrainedModel<T>>
where
    F: FnMut(&Model<T>) -> Result<Validation>,
{
    validate_spec(spec).map_err(|v| violations_to_error(spec, &v))?;
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    for (i, p) in train.iter().enumerate() {
        check_pair(p, i)?;
        if p.label >= spec.classes {
            return Err(Error::Input(format!(
                "record {i} has label {} but the model has {} classes",
                p.label, spec.classes
            )));
        }
    }

    let mut model = Model::new(spec.clone(), embedding)?;
    let mut adam = AdamState::new(model.params().values());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stopper = EarlyStopper::new(config.patience);
    let mut history = Vec::new();
    let mut best: Option<Model<T>> = None;

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let pairs: Vec<EncodedPair> = chunk.iter().map(|&i| train[i].clone()).collect();
            let step = pad_batch(&pairs, spec.ctx_len, spec.tgt_len).and_then(|b| train_step(&mut model, &mut adam, &b, config));
            match step {
                Ok(loss) => loss_sum += loss * chunk.len() as f64,
                Err(e) => return Err(abort(epoch, e, history)),
            }
        }
        let train_loss = loss_sum / train.len() as f64;
        let v = match validate(&model) {
            Ok(v) => v,
            Err(e) => return Err(abort(epoch, e, history)),
        };
        if !v.metric.is_finite() {
            return Err(abort(epoch, Error::Numeric(format!("validation {} is not finite", config.metric)), history));
        }
        let decision = stopper.observe(epoch, v.metric);
        let report = v.report.as_ref();
        history.push(EpochRecord {
            epoch,
            train_loss,
            metric: config.metric,
            valid_metric: v.metric,
            valid_avgp: report.and_then(|r| r.avgp),
            valid_auc: report.and_then(|r| r.auc),
            valid_accuracy: report.and_then(|r| r.accuracy),
            wall_ms: config.record_timing.then(|| started.elapsed().as_secs_f64() * 1e3),
        });
        log::info!(
            "{} epoch {epoch}: loss {train_loss:.5} valid {} {:.5}",
            spec.architecture(),
            config.metric,
            v.metric
        );
        match decision {
            StopDecision::Improved => best = Some(model.clone()),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }

    Ok(TrainedModel {
        model: best.expect("the first epoch always improves"),
        best_epoch: stopper.best_epoch(),
        best_metric: stopper.best().expect("at least one epoch ran"),
        history,
    })
}

fn abort(epoch: usize, source: Error, history: Vec<EpochRecord>) -> Error {
    Error::Training {
        epoch,
        source: Box::new(source),
        history,
    }
}

/// Training objective on `tape`: mean (optionally positive-weighted) cross-entropy
/// over the batch plus the L2 penalty on CNN filters.
pub fn batch_loss<T: Scalar>(model: &Model<T>, tape: &mut Tape<T>, bound: &Bound, batch: &Batch, pos_weight: Option<f64>) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let spec = model.spec();
    let mut losses = Vec::with_capacity(batch.len());
    let mut total_weight = T::zero();
    for i in 0..batch.len() {
        let logits = model.forward_masked(
            tape,
            bound,
            &batch.context[i],
            &batch.context_masks[i],
            &batch.target[i],
            &batch.target_masks[i],
        )?;
        let ce = tape.softmax_cross_entropy(logits, batch.labels[i])?;
        let w = match pos_weight {
            Some(w) if batch.labels[i] == 1 => T::lit(w),
            _ => T::one(),
        };
        total_weight += w;
        losses.push(if w == T::one() { ce } else { tape.scale(ce, w)? });
    }
    let stacked = tape.concat(&losses, 1)?;
    let summed = tape.sum(stacked)?;
    let mut loss = tape.scale(summed, T::one() / total_weight)?;
    if spec.l2 > 0.0 {
        for id in model.params().ids().collect::<Vec<_>>() {
            if model.params().kind(id) == ParamKind::CnnFilter {
                let sq = tape.sum_squares(bound[id])?;
                let penalty = tape.scale(sq, T::lit(spec.l2))?;
                loss = tape.add(loss, penalty)?;
            }
        }
    }
    Ok(loss)
}

/// Forward, backward and one Adam update on a batch; returns the batch loss.
pub fn train_step<T: Scalar>(model: &mut Model<T>, adam: &mut AdamState<T>, batch: &Batch, config: &TrainConfig) -> Result<f64> {
    let lr = model.spec().lr;
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let loss = batch_loss(model, &mut tape, &bound, batch, config.pos_weight)?;
    let value = tape.value(loss).data()[0].as_f64();
    tape.backward(loss)?;
    let mut grads = model.params().gradients(&tape, &bound);
    if let Some(c) = config.clip_norm {
        clip_global_norm(&mut grads, T::lit(c));
    }
    adam_step(model.params_mut().values_mut(), &grads, adam, T::lit(lr))?;
    Ok(value)
}

const SCORE_CHUNK: usize = 64;

/// Class-probability rows, in input order. Inputs are truncated like training batches.
pub fn score_dataset<T: Scalar>(model: &Model<T>, pairs: &[EncodedPair]) -> Result<Vec<Vec<T>>> {
    let spec = model.spec();
    let mut rows = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(SCORE_CHUNK) {
        let batch = pad_batch(chunk, spec.ctx_len, spec.tgt_len)?;
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape);
        for i in 0..batch.len() {
            let logits = model.forward_masked(
                &mut tape,
                &bound,
                &batch.context[i],
                &batch.context_masks[i],
                &batch.target[i],
                &batch.target_masks[i],
            )?;
            rows.push(softmax(tape.value(logits).data()));
        }
    }
    Ok(rows)
}

/// Positive-class probabilities of a binary model.
pub fn positive_scores<T: Scalar>(model: &Model<T>, pairs: &[EncodedPair]) -> Result<Vec<T>> {
    if model.spec().classes != 2 {
        return Err(Error::Usage(format!(
            "positive-class scores need a binary model, this one has {} classes",
            model.spec().classes
        )));
    }
    Ok(score_dataset(model, pairs)?.into_iter().map(|r| r[1]).collect())
}

/// Scores `pairs` and computes the full metric report.
pub fn evaluate<T: Scalar>(model: &Model<T>, pairs: &[EncodedPair]) -> Result<EvalReport<T>> {
    let rows = score_dataset(model, pairs)?;
    let labels: Vec<usize> = pairs.iter().map(|p| p.label).collect();
    EvalReport::from_probabilities(&rows, &labels, &DEFAULT_KS)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::combinators::{Combination, ContextEncoder, TargetEncoder};

    #[test]
    fn pad_examples() {
        let b = pad_batch(&[EncodedPair::new(vec![5, 6], vec![7], 1)], 4, 3).unwrap();
        assert_eq!(b.context[0], vec![5, 6, 0, 0]);
        assert_eq!(b.context_masks[0].flags(), &[true, true, false, false]);

        let long: Vec<usize> = (3..73).collect();
        let b = pad_batch(&[EncodedPair::new(vec![3], long.clone(), 0)], 14, 60).unwrap();
        assert_eq!(b.target[0], long[..60].to_vec());
        assert_eq!(b.target_masks[0].real_len(), 60);

        let b = pad_batch(
            &[EncodedPair::new(vec![3], vec![4, 5, 6], 0), EncodedPair::new(vec![3, 4, 5], vec![6], 1)],
            3,
            3,
        )
        .unwrap();
        assert!(b.context.iter().chain(&b.target).all(|r| r.len() == 3));
        assert_eq!(b.target_masks[1].real_len(), 1);
    }

    #[test]
    fn pad_rejects_empty_sides() {
        let err = pad_batch(&[EncodedPair::new(vec![3], vec![4], 0), EncodedPair::new(vec![3], vec![], 0)], 4, 4).unwrap_err();
        assert!(err.to_string().contains("record 1"), "{err}");
        assert!(pad_batch(&[], 4, 4).is_err());
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![Tensor::row(vec![1.0, -2.0])];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::zeros(&[1, 2])], &mut st, 0.1).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let g = [0.3f64, -7.0, 1e-3];
        let mut p = vec![Tensor::row(vec![0.0; 3])];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::row(g.to_vec())], &mut st, 0.01).unwrap();
        for (pk, gk) in p[0].data().iter().zip(g) {
            // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε).
            let expect = -0.01 * gk / (gk.abs() + 1e-8);
            assert!((pk - expect).abs() < 1e-15, "{pk} vs {expect}");
        }
    }

    #[test]
    fn adam_constant_gradient_steps_do_not_grow() {
        let mut p = vec![Tensor::<f64>::row(vec![0.0; 2])];
        let mut st = AdamState::new(&p);
        let g = [Tensor::row(vec![0.5, -2.0])];
        adam_step(&mut p, &g, &mut st, 0.1).unwrap();
        let after1 = p[0].data().to_vec();
        adam_step(&mut p, &g, &mut st, 0.1).unwrap();
        for k in 0..2 {
            let u1 = after1[k].abs();
            let u2 = (p[0].data()[k] - after1[k]).abs();
            assert!(u2 <= u1 * (1.0 + 1e-9));
        }
    }

    #[test]
    fn adam_rejects_nan_gradient_without_touching_state() {
        let mut p = vec![Tensor::row(vec![1.0]), Tensor::row(vec![2.0])];
        let mut st = AdamState::new(&p);
        let grads = [Tensor::row(vec![0.5]), Tensor::row(vec![f64::NAN])];
        assert!(matches!(adam_step(&mut p, &grads, &mut st, 0.1), Err(Error::Numeric(_))));
        assert_eq!((p[0].data()[0], st.t), (1.0, 0));
    }

    #[test]
    fn adam_decreases_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let p0 = Tensor::<f64>::uniform(&[1, 8], -1.0, 1.0, &mut rng);
            let loss = |p: &Tensor<f64>| 0.5 * p.sum_squares();
            let mut p = vec![p0.clone()];
            let mut st = AdamState::new(&p);
            // Gradient of ½‖p‖² is p.
            adam_step(&mut p, std::slice::from_ref(&p0), &mut st, 1e-3).unwrap();
            assert!(loss(&p[0]) < loss(&p0));
        }
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Tensor::<f64>::row(vec![3.0, 0.0]), Tensor::row(vec![4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15 && (g[1].data()[0] - 0.8).abs() < 1e-15);
        let mut small = vec![Tensor::row(vec![0.1])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.1]);
    }

    #[test]
    fn stopper_patience_one_on_worsening() {
        let mut s = EarlyStopper::new(1);
        assert_eq!(s.observe(1, 0.9), StopDecision::Improved);
        assert_eq!(s.observe(2, 0.8), StopDecision::Stop);
        assert_eq!(s.best_epoch(), 1);
    }

    #[test]
    fn stopper_ties_do_not_count_as_improvement() {
        let mut s = EarlyStopper::new(2);
        s.observe(1, 0.5);
        assert_eq!(s.observe(2, 0.5), StopDecision::Continue);
        assert_eq!(s.observe(3, 0.5), StopDecision::Stop);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!("loss".parse::<SelectionMetric>().is_err());
    }

    /// Containment data over ids: context is one topic id from 3..3+topics,
    /// target holds filler ids and, for positives, the context id.
    fn containment(n: usize, seed: u64) -> Vec<EncodedPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let topics = 6;
        let vocab = 20;
        (0..n)
            .map(|i| {
                let topic = 3 + rng.gen_range(0..topics);
                let label = i % 2;
                let len = rng.gen_range(3..7);
                let mut target: Vec<usize> = (0..len).map(|_| rng.gen_range(3 + topics..vocab)).collect();
                if label == 1 {
                    let at = rng.gen_range(0..len);
                    target[at] = topic;
                }
                EncodedPair::new(vec![topic], target, label)
            })
            .collect()
    }

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            rnn_size: 12,
            windows: vec![2, 3],
            filters: 6,
            lr: 0.01,
            seed: 3,
            ..ModelSpec::default()
        }
    }

    fn table(seed: u64) -> EmbeddingTable<f64> {
        EmbeddingTable::random(20, 8, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            max_epochs: 4,
            patience: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn weighted_padded_loss_gradients_match_finite_differences() {
        use crate::tensor::finite_difference_check;
        let spec = ModelSpec {
            context: ContextEncoder::Cnn,
            target: TargetEncoder::Cnn,
            l2: 0.05,
            ..tiny_spec()
        };
        let model = Model::new(spec, table(4)).unwrap();
        let pairs = [
            EncodedPair::new(vec![3, 4, 5], vec![6, 7], 1),
            EncodedPair::new(vec![8], vec![9, 10, 11, 12], 0),
        ];
        let batch = pad_batch(&pairs, 4, 5).unwrap();
        let run = |values: &[Tensor<f64>]| -> Result<(f64, Vec<Tensor<f64>>)> {
            let mut tape = Tape::new();
            let b = model.params().bind_values(&mut tape, values)?;
            let loss = batch_loss(&model, &mut tape, &b, &batch, Some(3.0))?;
            let v = tape.value(loss).data()[0];
            tape.backward(loss)?;
            Ok((v, model.params().gradients(&tape, &b)))
        };
        let (_, g) = run(model.params().values()).unwrap();
        let mut values = model.params().values().to_vec();
        let err = finite_difference_check(|v| run(v).map(|r| r.0), &mut values, &g, 1e-5).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn zero_learning_rate_freezes_everything() {
        let data = containment(40, 1);
        let spec = ModelSpec { lr: 0.0, ..tiny_spec() };
        let initial = Model::new(spec.clone(), table(1)).unwrap();
        let trained = train_model(&spec, table(1), &data, &data[..20], &quick_config()).unwrap();
        assert_eq!(trained.model.params().values(), initial.params().values());
        let first = trained.history[0].valid_metric;
        assert!(trained.history.iter().all(|h| h.valid_metric == first));
    }

    #[test]
    fn training_is_deterministic() {
        let data = containment(60, 2);
        let spec = ModelSpec {
            target: TargetEncoder::Cnn,
            l2: 0.01,
            ..tiny_spec()
        };
        let a = train_model(&spec, table(2), &data, &data[..20], &quick_config()).unwrap();
        let b = train_model(&spec, table(2), &data, &data[..20], &quick_config()).unwrap();
        assert_eq!(a.model.params().values(), b.model.params().values());
        assert_eq!(a.history, b.history);
        assert_eq!(score_dataset(&a.model, &data).unwrap(), score_dataset(&b.model, &data).unwrap());
    }

    #[test]
    fn pad_row_stays_zero() {
        let data = containment(40, 3);
        let trained = train_model(&tiny_spec(), table(3), &data, &data[..10], &quick_config()).unwrap();
        let emb = trained.model.params().get(trained.model.embedding());
        assert!(emb.row_slice(PAD).iter().all(|&x| x == 0.0));
        let initial = table(3);
        assert_ne!(emb.row_slice(5), initial.matrix().row_slice(5));
    }

    #[test]
    fn best_epoch_snapshot_is_returned() {
        let data = containment(32, 4);
        let metrics = [0.1, 0.7, 0.3, 0.2, 0.25];
        let mut snapshots = Vec::new();
        let mut calls = 0;
        let config = TrainConfig {
            max_epochs: 5,
            patience: 5,
            ..quick_config()
        };
        let trained = train_model_with(&tiny_spec(), table(4), &data, &config, |m| {
            snapshots.push(m.params().values().to_vec());
            calls += 1;
            Ok(Validation {
                metric: metrics[calls - 1],
                report: None,
            })
        })
        .unwrap();
        assert_eq!(trained.best_epoch, 2);
        assert_eq!(trained.best_metric, 0.7);
        assert_eq!(trained.model.params().values(), &snapshots[1][..]);
        assert_ne!(trained.model.params().values(), &snapshots[4][..]);
        assert_eq!(trained.history.len(), 5);
    }

    #[test]
    fn patience_stops_early() {
        let data = containment(16, 5);
        let mut value = 1.0;
        let config = TrainConfig {
            max_epochs: 10,
            patience: 1,
            ..quick_config()
        };
        let trained = train_model_with(&tiny_spec(), table(5), &data, &config, |_| {
            value -= 0.1;
            Ok(Validation { metric: value, report: None })
        })
        .unwrap();
        assert_eq!(trained.history.len(), 2);
    }

    #[test]
    fn numeric_failure_keeps_history() {
        let data = containment(16, 6);
        let mut calls = 0;
        let err = train_model_with(&tiny_spec(), table(6), &data, &quick_config(), |_| {
            calls += 1;
            let metric = if calls == 2 { f64::NAN } else { 0.5 };
            Ok(Validation { metric, report: None })
        })
        .unwrap_err();
        assert!(err.is_numeric());
        match err {
            Error::Training { epoch, history, .. } => {
                assert_eq!(epoch, 2);
                assert_eq!(history.len(), 1);
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn scores_are_probabilities_and_repeatable() {
        let model = Model::new(tiny_spec(), table(7)).unwrap();
        let pair = EncodedPair::new(vec![4, 5], vec![6, 7, 8], 1);
        let rows = score_dataset(&model, &[pair.clone(), pair.clone()]).unwrap();
        assert_eq!(rows[0], rows[1]);
        assert!((rows[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(rows[0].iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert!(score_dataset(&model, &[]).unwrap().is_empty());
    }

    #[test]
    fn scoring_truncates_like_training() {
        let spec = ModelSpec { tgt_len: 3, ..tiny_spec() };
        let model = Model::new(spec, table(8)).unwrap();
        let long = EncodedPair::new(vec![4], vec![6, 7, 8, 9, 10], 0);
        let cut = EncodedPair::new(vec![4], vec![6, 7, 8], 0);
        let s = score_dataset(&model, &[long, cut]).unwrap();
        assert_eq!(s[0], s[1]);
    }

    #[test]
    fn label_out_of_range_is_input_error() {
        let data = vec![EncodedPair::new(vec![3], vec![4], 2)];
        let err = train_model(&tiny_spec(), table(9), &data, &data, &quick_config()).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn containment_is_learned() {
        let data = containment(200, 10);
        let valid = containment(100, 11);
        for spec in [
            ModelSpec { ..tiny_spec() },
            ModelSpec {
                combination: Combination::Bilinear,
                context: ContextEncoder::Cbow,
                target: TargetEncoder::Cnn,
                ..tiny_spec()
            },
        ] {
            let config = TrainConfig {
                batch_size: 16,
                max_epochs: 30,
                patience: 30,
                metric: SelectionMetric::Accuracy,
                ..TrainConfig::default()
            };
            let trained = train_model(&spec, table(10), &data, &valid, &config).unwrap();
            let report = evaluate(&trained.model, &valid).unwrap();
            assert!(report.auc.unwrap() > 0.95, "{}: {report:?}", spec.architecture());
        }
    }
}
