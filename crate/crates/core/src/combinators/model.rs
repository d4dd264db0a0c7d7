use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embed::{lookup, EmbeddingTable, SEP};
use crate::encoders::{encode_cbow, encode_cnn, encode_rnn, glorot, CnnParams, EncodedVector, Mask, RnnParams};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{softmax, Bound, ParamId, ParamKind, ParamStore, Tape, Tensor, Var};

use super::{validate_spec, violations_to_error, Combination, ContextEncoder, ModelSpec, TargetEncoder};

#[derive(Clone, Debug)]
pub enum Encoder {
    Cbow,
    Rnn(RnnParams),
    Cnn(CnnParams),
}

impl Encoder {
    fn encode<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, embedded: Var, mask: &Mask) -> Result<EncodedVector> {
        match self {
            Encoder::Cbow => encode_cbow(tape, embedded, mask),
            Encoder::Rnn(p) => encode_rnn(tape, embedded, mask, p, bound, None, None),
            Encoder::Cnn(p) => encode_cnn(tape, embedded, mask, p, bound),
        }
    }
}

/// Affine softmax head over a feature row.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub input_dim: usize,
    /// `[input_dim × classes]`
    pub weight: ParamId,
    /// `[1 × classes]`
    pub bias: ParamId,
}

/// Per-class bilinear scores `ctxᵀ W_c tgt (+ b_c)`.
#[derive(Clone, Debug)]
pub struct BilinearParams {
    pub context_dim: usize,
    pub target_dim: usize,
    /// One `[context_dim × target_dim]` matrix per class.
    pub weights: Vec<ParamId>,
    /// `[1 × classes]`, absent when the bias extension is off.
    pub bias: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub enum Combiner {
    Head(ClassifierHead),
    Bilinear(BilinearParams),
}

/// A complete bi-sequence classifier: shared embedding, encoders, combiner.
#[derive(Clone, Debug)]
pub struct Model<T> {
    spec: ModelSpec,
    params: ParamStore<T>,
    embedding: ParamId,
    context: Option<Encoder>,
    /// Target encoder; the joint RNN for concat-sentence.
    target: Encoder,
    combiner: Combiner,
}

impl<T: Scalar> Model<T> {
    /// Builds and initialises a model; weights are drawn from `spec.seed`.
    pub fn new(spec: ModelSpec, embedding: EmbeddingTable<T>) -> Result<Self> {
        validate_spec(&spec).map_err(|v| violations_to_error(&spec, &v))?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut params = ParamStore::new();
        let trainable = embedding.trainable;
        let dx = embedding.dim();
        let emb = params.add("embedding", ParamKind::Embedding, embedding.into_matrix());
        params.set_trainable(emb, trainable);

        let classes = spec.classes;
        let ctx_dim = spec.context_dim(dx);
        let context = match spec.context {
            ContextEncoder::Cbow => Some(Encoder::Cbow),
            ContextEncoder::Rnn => Some(Encoder::Rnn(RnnParams::new(
                &mut params,
                "context",
                spec.cell,
                dx,
                spec.rnn_size,
                &mut rng,
            ))),
            ContextEncoder::Cnn => Some(Encoder::Cnn(CnnParams::new(
                &mut params,
                "context",
                dx,
                &spec.windows,
                spec.filters,
                &mut rng,
            )?)),
            ContextEncoder::None => None,
        };

        let (target, feature_dim) = match spec.combination {
            Combination::ConcatSentence => (
                Encoder::Rnn(RnnParams::new(&mut params, "joint", spec.cell, dx, spec.rnn_size, &mut rng)),
                spec.rnn_size,
            ),
            c if c.is_conditional() => {
                let input_dim = if c.feeds_input() { dx + ctx_dim } else { dx };
                (
                    Encoder::Rnn(RnnParams::new(&mut params, "target", spec.cell, input_dim, spec.rnn_size, &mut rng)),
                    spec.rnn_size,
                )
            }
            _ => match spec.target {
                TargetEncoder::Rnn => (
                    Encoder::Rnn(RnnParams::new(&mut params, "target", spec.cell, dx, spec.rnn_size, &mut rng)),
                    ctx_dim + spec.rnn_size,
                ),
                TargetEncoder::Cnn => {
                    let p = CnnParams::new(&mut params, "target", dx, &spec.windows, spec.filters, &mut rng)?;
                    let d = p.output_dim();
                    (Encoder::Cnn(p), ctx_dim + d)
                }
                TargetEncoder::None => unreachable!("validated"),
            },
        };

        let combiner = if spec.combination == Combination::Bilinear {
            let target_dim = feature_dim - ctx_dim;
            let weights = (0..classes)
                .map(|c| {
                    params.add(
                        format!("bilinear.w{c}"),
                        ParamKind::Weight,
                        glorot(ctx_dim, target_dim, ctx_dim, target_dim, &mut rng),
                    )
                })
                .collect();
            let bias = spec
                .bilinear_bias
                .then(|| params.add("bilinear.bias", ParamKind::Bias, Tensor::zeros(&[1, classes])));
            Combiner::Bilinear(BilinearParams {
                context_dim: ctx_dim,
                target_dim,
                weights,
                bias,
            })
        } else {
            Combiner::Head(ClassifierHead {
                input_dim: feature_dim,
                weight: params.add(
                    "head.weight",
                    ParamKind::Weight,
                    glorot(feature_dim, classes, feature_dim, classes, &mut rng),
                ),
                bias: params.add("head.bias", ParamKind::Bias, Tensor::zeros(&[1, classes])),
            })
        };

        let model = Self {
            spec,
            params,
            embedding: emb,
            context,
            target,
            combiner,
        };
        model.check_consistency().map_err(|v| Error::Config(v.join("; ")))?;
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn embedding(&self) -> ParamId {
        self.embedding
    }

    pub fn embed_dim(&self) -> usize {
        self.params.get(self.embedding).cols()
    }

    pub fn context_encoder(&self) -> Option<&Encoder> {
        self.context.as_ref()
    }

    pub fn target_encoder(&self) -> &Encoder {
        &self.target
    }

    pub fn combiner(&self) -> &Combiner {
        &self.combiner
    }

    pub fn combiner_mut(&mut self) -> &mut Combiner {
        &mut self.combiner
    }

    /// Cross-checks parameter shapes against the spec; lists every mismatch.
    pub fn check_consistency(&self) -> std::result::Result<(), Vec<String>> {
        let mut problems = Vec::new();
        let classes = self.spec.classes;
        let dx = self.embed_dim();
        let ctx_dim = self.spec.context_dim(dx);
        match &self.combiner {
            Combiner::Bilinear(b) => {
                if b.weights.len() != classes {
                    problems.push(format!(
                        "bilinear holds {} class matrices for {classes} classes",
                        b.weights.len()
                    ));
                }
                for &w in &b.weights {
                    if self.params.get(w).shape() != [b.context_dim, b.target_dim] {
                        problems.push(format!(
                            "bilinear matrix {} has shape {:?}",
                            self.params.name(w),
                            self.params.get(w).shape()
                        ));
                    }
                }
                if b.context_dim != ctx_dim {
                    problems.push(format!("bilinear context width {} != {ctx_dim}", b.context_dim));
                }
            }
            Combiner::Head(h) => {
                if self.params.get(h.weight).shape() != [h.input_dim, classes] {
                    problems.push(format!("head weight shape {:?}", self.params.get(h.weight).shape()));
                }
            }
        }
        if let Encoder::Rnn(p) = &self.target {
            let expect = if self.spec.combination.feeds_input() { dx + ctx_dim } else { dx };
            if p.input_dim != expect {
                problems.push(format!("target rnn input width {} != {expect}", p.input_dim));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }

    /// Logits `[1 × classes]` for one unpadded pair.
    pub fn forward_pair(&self, tape: &mut Tape<T>, bound: &Bound, context: &[usize], target: &[usize]) -> Result<Var> {
        self.forward_masked(
            tape,
            bound,
            context,
            &Mask::full(context.len()),
            target,
            &Mask::full(target.len()),
        )
    }

    /// Logits for one right-padded pair; only mask-real positions are read.
    pub fn forward_masked(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        context: &[usize],
        context_mask: &Mask,
        target: &[usize],
        target_mask: &Mask,
    ) -> Result<Var> {
        let table = bound[self.embedding];
        if self.spec.combination == Combination::ConcatSentence {
            let (c, t) = (context_mask.real_len(), target_mask.real_len());
            let mut joined = Vec::with_capacity(c + t + 1);
            joined.extend_from_slice(&context[..c]);
            joined.push(SEP);
            joined.extend_from_slice(&target[..t]);
            let embedded = lookup(tape, table, &joined)?;
            let state = self.target.encode(tape, bound, embedded, &Mask::full(joined.len()))?;
            return self.head(tape, bound, state.value);
        }

        let ctx_embedded = lookup(tape, table, context)?;
        let ctx = self
            .context
            .as_ref()
            .expect("validated spec has a context encoder")
            .encode(tape, bound, ctx_embedded, context_mask)?;
        let tgt_embedded = lookup(tape, table, target)?;

        match self.spec.combination {
            Combination::Concat => {
                let tgt = self.target.encode(tape, bound, tgt_embedded, target_mask)?;
                let features = tape.concat(&[ctx.value, tgt.value], 1)?;
                self.head(tape, bound, features)
            }
            Combination::Bilinear => {
                let tgt = self.target.encode(tape, bound, tgt_embedded, target_mask)?;
                self.bilinear(tape, bound, ctx.value, tgt.value)
            }
            comb => {
                let Encoder::Rnn(p) = &self.target else {
                    return Err(Error::Config("conditional variant without a target rnn".into()));
                };
                let init = comb.feeds_state().then_some(ctx.value);
                let aux = comb.feeds_input().then_some(ctx.value);
                let tgt = encode_rnn(tape, tgt_embedded, target_mask, p, bound, init, aux)?;
                self.head(tape, bound, tgt.value)
            }
        }
    }

    fn head(&self, tape: &mut Tape<T>, bound: &Bound, features: Var) -> Result<Var> {
        let Combiner::Head(h) = &self.combiner else {
            return Err(Error::Config("model has no softmax head".into()));
        };
        let z = tape.matmul(features, bound[h.weight])?;
        tape.add_row(z, bound[h.bias])
    }

    fn bilinear(&self, tape: &mut Tape<T>, bound: &Bound, ctx: Var, tgt: Var) -> Result<Var> {
        let Combiner::Bilinear(b) = &self.combiner else {
            return Err(Error::Config("model has no bilinear combiner".into()));
        };
        let mut scores = Vec::with_capacity(b.weights.len());
        for &w in &b.weights {
            let cw = tape.matmul(ctx, bound[w])?;
            let prod = tape.mul(cw, tgt)?;
            scores.push(tape.sum(prod)?);
        }
        let logits = tape.concat(&scores, 1)?;
        match b.bias {
            Some(bias) => tape.add(logits, bound[bias]),
            None => Ok(logits),
        }
    }

    /// Class probabilities for one unpadded pair.
    pub fn predict_proba(&self, context: &[usize], target: &[usize]) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let logits = self.forward_pair(&mut tape, &bound, context, target)?;
        Ok(softmax(tape.value(logits).data()))
    }
}

/// Softmax of a logit vector.
pub fn probabilities<T: Scalar>(logits: &[T]) -> Vec<T> {
    softmax(logits)
}
