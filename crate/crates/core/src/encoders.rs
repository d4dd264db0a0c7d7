//! Sequence encoders: CBOW mean, GRU/LSTM final state, and CNN with max-over-time pooling.
//!
//! All encoders take an embedded, right-padded sequence `[n × d_x]` plus a
//! [`Mask`] and only ever look at the real-token prefix, so trailing PAD rows
//! never influence the result.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Bound, ParamId, ParamKind, ParamStore, Tape, Tensor, Var};

/// Real-token indicator per position; real tokens form a prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask(Vec<bool>);

impl Mask {
    pub fn new(flags: Vec<bool>) -> Result<Self> {
        let real = flags.iter().take_while(|&&b| b).count();
        if flags[real..].iter().any(|&b| b) {
            return Err(Error::Input("mask is not a contiguous prefix".into()));
        }
        Ok(Self(flags))
    }

    /// All `len` positions real.
    pub fn full(len: usize) -> Self {
        Self(vec![true; len])
    }

    /// `real` leading real positions out of `total`.
    pub fn prefix(real: usize, total: usize) -> Self {
        let mut flags = vec![false; total.max(real)];
        flags[..real].fill(true);
        Self(flags)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.0.iter().take_while(|&&b| b).count()
    }

    pub fn flags(&self) -> &[bool] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellKind {
    Gru,
    Lstm,
}

impl CellKind {
    pub fn gate_count(self) -> usize {
        match self {
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellKind::Gru => "gru",
            CellKind::Lstm => "lstm",
        })
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gru" => Ok(CellKind::Gru),
            "lstm" => Ok(CellKind::Lstm),
            other => Err(Error::Config(format!("unknown cell `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EncoderKind {
    Cbow,
    Rnn,
    Cnn,
}

/// Output of one encoder: a `1 × dim` row on the tape.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVector {
    pub value: Var,
    pub encoder: EncoderKind,
    pub dim: usize,
}

pub(crate) fn glorot<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(&[rows, cols], -limit, limit, rng)
}

/// Weights of a GRU or LSTM cell.
///
/// Input and bias columns are laid out gate by gate: `[z | r | candidate]` for
/// GRU and `[i | f | o | g]` for LSTM. GRU keeps the recurrent weights of the
/// candidate separate because they act on `r ⊙ s`.
#[derive(Clone, Debug)]
pub struct RnnParams {
    pub cell: CellKind,
    pub input_dim: usize,
    pub state_dim: usize,
    pub w_input: ParamId,
    pub w_state: ParamId,
    pub w_candidate: Option<ParamId>,
    pub bias: ParamId,
}

impl RnnParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cell: CellKind,
        input_dim: usize,
        state_dim: usize,
        rng: &mut R,
    ) -> Self {
        let gates = cell.gate_count();
        let w_input = store.add(
            format!("{name}.w_input"),
            ParamKind::Weight,
            glorot(input_dim, gates * state_dim, input_dim, state_dim, rng),
        );
        let recurrent_gates = match cell {
            CellKind::Gru => 2,
            CellKind::Lstm => 4,
        };
        let w_state = store.add(
            format!("{name}.w_state"),
            ParamKind::Weight,
            glorot(state_dim, recurrent_gates * state_dim, state_dim, state_dim, rng),
        );
        let w_candidate = (cell == CellKind::Gru).then(|| {
            store.add(
                format!("{name}.w_candidate"),
                ParamKind::Weight,
                glorot(state_dim, state_dim, state_dim, state_dim, rng),
            )
        });
        let bias = store.add(
            format!("{name}.bias"),
            ParamKind::Bias,
            Tensor::zeros(&[1, gates * state_dim]),
        );
        Self {
            cell,
            input_dim,
            state_dim,
            w_input,
            w_state,
            w_candidate,
            bias,
        }
    }

    fn project<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, inputs: Var) -> Result<Var> {
        let cols = tape.value(inputs).cols();
        if cols != self.input_dim {
            return Err(Error::Dimension(format!(
                "cell expects inputs of width {}, got {cols}",
                self.input_dim
            )));
        }
        let xw = tape.matmul(inputs, bound[self.w_input])?;
        tape.add_row(xw, bound[self.bias])
    }

    fn check_state<T: Scalar>(&self, tape: &Tape<T>, state: Var, what: &str) -> Result<()> {
        let shape = tape.value(state).shape();
        if shape != [1, self.state_dim] {
            return Err(Error::Dimension(format!(
                "{what} has shape {shape:?}, expected [1, {}]",
                self.state_dim
            )));
        }
        Ok(())
    }

    fn gru_cell<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, xp: Var, s: Var) -> Result<Var> {
        let d = self.state_dim;
        let candidate_w = self
            .w_candidate
            .ok_or_else(|| Error::Config("GRU step on non-GRU parameters".into()))?;
        let x_zr = tape.slice_cols(xp, 0, 2 * d)?;
        let s_zr = tape.matmul(s, bound[self.w_state])?;
        let zr_pre = tape.add(x_zr, s_zr)?;
        let zr = tape.sigmoid(zr_pre)?;
        let z = tape.slice_cols(zr, 0, d)?;
        let r = tape.slice_cols(zr, d, d)?;
        let x_h = tape.slice_cols(xp, 2 * d, d)?;
        let rs = tape.mul(r, s)?;
        let s_h = tape.matmul(rs, bound[candidate_w])?;
        let cand_pre = tape.add(x_h, s_h)?;
        let cand = tape.tanh(cand_pre)?;
        // (1 − z)⊙s + z⊙s̃ written as s + z⊙(s̃ − s)
        let delta = tape.sub(cand, s)?;
        let step = tape.mul(z, delta)?;
        tape.add(s, step)
    }

    fn lstm_cell<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, xp: Var, s: Var, c: Var) -> Result<(Var, Var)> {
        let d = self.state_dim;
        let sw = tape.matmul(s, bound[self.w_state])?;
        let pre = tape.add(xp, sw)?;
        let gates_pre = tape.slice_cols(pre, 0, 3 * d)?;
        let gates = tape.sigmoid(gates_pre)?;
        let i = tape.slice_cols(gates, 0, d)?;
        let f = tape.slice_cols(gates, d, d)?;
        let o = tape.slice_cols(gates, 2 * d, d)?;
        let g_pre = tape.slice_cols(pre, 3 * d, d)?;
        let g = tape.tanh(g_pre)?;
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_next = tape.add(fc, ig)?;
        let c_act = tape.tanh(c_next)?;
        let s_next = tape.mul(o, c_act)?;
        Ok((s_next, c_next))
    }
}

/// One GRU transition `s' = (1 − z)⊙s + z⊙tanh(W_h x + U_h(r⊙s) + b_h)`.
pub fn step_gru<T: Scalar>(tape: &mut Tape<T>, x: Var, s_prev: Var, params: &RnnParams, bound: &Bound) -> Result<Var> {
    if params.cell != CellKind::Gru {
        return Err(Error::Config("step_gru needs GRU parameters".into()));
    }
    params.check_state(tape, s_prev, "previous state")?;
    let xp = params.project(tape, bound, x)?;
    params.gru_cell(tape, bound, xp, s_prev)
}

/// One LSTM transition; returns `(s', c')`.
pub fn step_lstm<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    s_prev: Var,
    c_prev: Var,
    params: &RnnParams,
    bound: &Bound,
) -> Result<(Var, Var)> {
    if params.cell != CellKind::Lstm {
        return Err(Error::Config("step_lstm needs LSTM parameters".into()));
    }
    params.check_state(tape, s_prev, "previous state")?;
    params.check_state(tape, c_prev, "previous cell")?;
    let xp = params.project(tape, bound, x)?;
    params.lstm_cell(tape, bound, xp, s_prev, c_prev)
}

fn real_prefix<T: Scalar>(tape: &mut Tape<T>, embedded: Var, mask: &Mask) -> Result<(Var, usize)> {
    let shape = tape.value(embedded).shape().to_vec();
    if shape.len() != 2 || shape[0] != mask.len() {
        return Err(Error::Dimension(format!(
            "embedded sequence {shape:?} does not match mask of length {}",
            mask.len()
        )));
    }
    let real = mask.real_len();
    if real == 0 {
        return Err(Error::Input("sequence has no real tokens".into()));
    }
    let rows = if real == shape[0] {
        embedded
    } else {
        tape.slice_rows(embedded, 0, real)?
    };
    Ok((rows, real))
}

/// Mean of the real-token embeddings.
pub fn encode_cbow<T: Scalar>(tape: &mut Tape<T>, embedded: Var, mask: &Mask) -> Result<EncodedVector> {
    let (rows, _) = real_prefix(tape, embedded, mask)?;
    let value = tape.mean_rows(rows)?;
    Ok(EncodedVector {
        value,
        encoder: EncoderKind::Cbow,
        dim: tape.value(value).cols(),
    })
}

/// Runs the cell over the real tokens and returns the final state.
///
/// `init_state` replaces the zero initial state; `aux_input` is concatenated to
/// every input row, so `params.input_dim` must be `d_x + d_aux`.
pub fn encode_rnn<T: Scalar>(
    tape: &mut Tape<T>,
    embedded: Var,
    mask: &Mask,
    params: &RnnParams,
    bound: &Bound,
    init_state: Option<Var>,
    aux_input: Option<Var>,
) -> Result<EncodedVector> {
    let (rows, real) = real_prefix(tape, embedded, mask)?;
    let inputs = match aux_input {
        Some(aux) => {
            let shape = tape.value(aux).shape();
            if shape.len() != 2 || shape[0] != 1 {
                return Err(Error::Dimension(format!("auxiliary input must be a row, got {shape:?}")));
            }
            let tiled = tape.concat(&vec![aux; real], 0)?;
            tape.concat(&[rows, tiled], 1)?
        }
        None => rows,
    };
    let projected = params.project(tape, bound, inputs)?;
    let d = params.state_dim;
    let mut state = match init_state {
        Some(s) => {
            params.check_state(tape, s, "initial state")?;
            s
        }
        None => tape.constant(Tensor::zeros(&[1, d])),
    };
    let mut cell = match params.cell {
        CellKind::Lstm => Some(tape.constant(Tensor::zeros(&[1, d]))),
        CellKind::Gru => None,
    };
    for t in 0..real {
        let xp = tape.slice_rows(projected, t, 1)?;
        match params.cell {
            CellKind::Gru => state = params.gru_cell(tape, bound, xp, state)?,
            CellKind::Lstm => {
                let c = cell.expect("lstm carries a cell state");
                let (s, c) = params.lstm_cell(tape, bound, xp, state, c)?;
                state = s;
                cell = Some(c);
            }
        }
    }
    Ok(EncodedVector {
        value: state,
        encoder: EncoderKind::Rnn,
        dim: d,
    })
}

#[derive(Clone, Debug)]
pub struct FilterBank {
    pub window: usize,
    /// `[window·d_x × num_filters]`
    pub weight: ParamId,
    /// `[1 × num_filters]`
    pub bias: ParamId,
}

/// Convolution filter banks, one per window size, with relu activation.
#[derive(Clone, Debug)]
pub struct CnnParams {
    pub input_dim: usize,
    pub num_filters: usize,
    pub banks: Vec<FilterBank>,
}

impl CnnParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input_dim: usize,
        windows: &[usize],
        num_filters: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if windows.is_empty() || windows.contains(&0) || num_filters == 0 {
            return Err(Error::Config(format!(
                "CNN needs positive windows and filters, got {windows:?} × {num_filters}"
            )));
        }
        let banks = windows
            .iter()
            .map(|&h| FilterBank {
                window: h,
                weight: store.add(
                    format!("{name}.filter{h}"),
                    ParamKind::CnnFilter,
                    glorot(h * input_dim, num_filters, h * input_dim, num_filters, rng),
                ),
                bias: store.add(
                    format!("{name}.filter{h}.bias"),
                    ParamKind::Bias,
                    Tensor::zeros(&[1, num_filters]),
                ),
            })
            .collect();
        Ok(Self {
            input_dim,
            num_filters,
            banks,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.num_filters * self.banks.len()
    }
}

/// Convolves each filter bank over the real tokens (zero-padded on the right to
/// at least the window size), applies relu, max-pools over time and
/// concatenates the pooled features of all banks.
pub fn encode_cnn<T: Scalar>(tape: &mut Tape<T>, embedded: Var, mask: &Mask, params: &CnnParams, bound: &Bound) -> Result<EncodedVector> {
    let (rows, real) = real_prefix(tape, embedded, mask)?;
    let d = tape.value(rows).cols();
    if d != params.input_dim {
        return Err(Error::Dimension(format!(
            "CNN expects width {}, got {d}",
            params.input_dim
        )));
    }
    let mut pooled = Vec::with_capacity(params.banks.len());
    for bank in &params.banks {
        let seq = if real < bank.window {
            let pad = tape.constant(Tensor::zeros(&[bank.window - real, d]));
            tape.concat(&[rows, pad], 0)?
        } else {
            rows
        };
        let windows = tape.unfold(seq, bank.window)?;
        let response = tape.matmul(windows, bound[bank.weight])?;
        let shifted = tape.add_row(response, bound[bank.bias])?;
        let activated = tape.relu(shifted)?;
        pooled.push(tape.max_over_time(activated)?);
    }
    let value = if pooled.len() == 1 {
        pooled[0]
    } else {
        tape.concat(&pooled, 1)?
    };
    Ok(EncodedVector {
        value,
        encoder: EncoderKind::Cnn,
        dim: params.output_dim(),
    })
}
