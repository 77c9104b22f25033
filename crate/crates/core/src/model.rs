//! Model parameters and the forward computation shared by every architecture.
//!
//! All models compute `x_t = f(W y_t + R x_{t-1} [+ R_skip s_t])` and decode with
//! `P(y_{t+1} | x_t) ∝ exp(y_{t+1}ᵀ Z x_t)`. They differ only in the shape of `R`:
//!
//! * `Dense`: plain nonlinear RNN,
//! * `Diagonal`: the impulse-response model (IRLM) when paired with the identity,
//! * `Block`: a dense matrix whose two off-diagonal blocks are pinned at zero.
//!
//! `R_skip` links the states at consecutive word-start positions (character models).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::{dot, softmax_in_place, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NonlinearityKind {
    Identity,
    Logistic,
    Rectifier,
    SmoothedRectifier,
}

/// Elementwise hidden-unit nonlinearity. `a` is only used by the smoothed rectifier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nonlinearity {
    pub kind: NonlinearityKind,
    pub a: f64,
}

impl Nonlinearity {
    pub const IDENTITY: Nonlinearity = Nonlinearity {
        kind: NonlinearityKind::Identity,
        a: 1.0,
    };
    pub const LOGISTIC: Nonlinearity = Nonlinearity {
        kind: NonlinearityKind::Logistic,
        a: 1.0,
    };
    pub const RECTIFIER: Nonlinearity = Nonlinearity {
        kind: NonlinearityKind::Rectifier,
        a: 1.0,
    };

    pub fn smoothed_rectifier(a: f64) -> Self {
        Nonlinearity {
            kind: NonlinearityKind::SmoothedRectifier,
            a,
        }
    }

    /// `max(0, x − a·tanh(x/a))` for the smoothed rectifier.
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match self.kind {
            NonlinearityKind::Identity => x,
            NonlinearityKind::Logistic => 1.0 / (1.0 + (-x).exp()),
            NonlinearityKind::Rectifier => x.max(0.0),
            NonlinearityKind::SmoothedRectifier => {
                if x <= 0.0 {
                    0.0
                } else {
                    (x - self.a * (x / self.a).tanh()).max(0.0)
                }
            }
        }
    }

    /// Derivative with respect to the pre-activation.
    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match self.kind {
            NonlinearityKind::Identity => 1.0,
            NonlinearityKind::Logistic => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 - s)
            }
            NonlinearityKind::Rectifier => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            NonlinearityKind::SmoothedRectifier => {
                if x > 0.0 {
                    // 1 − sech²(x/a)
                    let t = (x / self.a).tanh();
                    t * t
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            NonlinearityKind::Identity => "identity",
            NonlinearityKind::Logistic => "logistic",
            NonlinearityKind::Rectifier => "rectifier",
            NonlinearityKind::SmoothedRectifier => "smoothed_rectifier",
        }
    }

    /// Parses a nonlinearity name; `a` is attached as the smoothing scale.
    pub fn parse(name: &str, a: f64) -> Result<Self> {
        let kind = match name {
            "identity" => NonlinearityKind::Identity,
            "logistic" => NonlinearityKind::Logistic,
            "rectifier" => NonlinearityKind::Rectifier,
            "smoothed_rectifier" => NonlinearityKind::SmoothedRectifier,
            other => return Err(Error::usage(format!("unknown nonlinearity '{other}'"))),
        };
        if !(a > 0.0) {
            return Err(Error::usage("smoothing scale a must be positive"));
        }
        Ok(Nonlinearity { kind, a })
    }
}

/// Partition of the hidden units into short-context units (indices `0..n_short`) followed by
/// long-context units (indices `n_short..n_short + n_long`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LcuConfig {
    pub n_short: usize,
    pub n_long: usize,
    pub lower: f64,
    pub upper: f64,
}

impl LcuConfig {
    pub fn long_units(&self) -> std::ops::Range<usize> {
        self.n_short..self.n_short + self.n_long
    }

    pub fn is_long(&self, unit: usize) -> bool {
        self.long_units().contains(&unit)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Recurrent {
    Dense(Matrix),
    Diagonal(Vec<f64>),
    /// Two diagonal blocks `[0, split)` and `[split, H)`; entries linking them stay zero.
    Block { weights: Matrix, split: usize },
}

#[inline]
pub fn block_masked(split: usize, i: usize, j: usize) -> bool {
    (i < split) != (j < split)
}

impl Recurrent {
    pub fn hidden(&self) -> usize {
        match self {
            Recurrent::Dense(m) | Recurrent::Block { weights: m, .. } => m.rows(),
            Recurrent::Diagonal(r) => r.len(),
        }
    }

    pub fn zeros_like(&self) -> Recurrent {
        match self {
            Recurrent::Dense(m) => Recurrent::Dense(Matrix::zeros(m.rows(), m.cols())),
            Recurrent::Diagonal(r) => Recurrent::Diagonal(vec![0.0; r.len()]),
            Recurrent::Block { weights, split } => Recurrent::Block {
                weights: Matrix::zeros(weights.rows(), weights.cols()),
                split: *split,
            },
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        match self {
            Recurrent::Dense(m) | Recurrent::Block { weights: m, .. } => m.as_slice(),
            Recurrent::Diagonal(r) => r,
        }
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        match self {
            Recurrent::Dense(m) | Recurrent::Block { weights: m, .. } => m.as_mut_slice(),
            Recurrent::Diagonal(r) => r,
        }
    }

    /// `out = R x`
    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Recurrent::Dense(m) | Recurrent::Block { weights: m, .. } => m.matvec_into(x, out),
            Recurrent::Diagonal(r) => {
                for ((o, &ri), &xi) in out.iter_mut().zip(r).zip(x) {
                    *o = ri * xi;
                }
            }
        }
    }

    /// `out += Rᵀ d`
    pub fn apply_transposed_acc(&self, d: &[f64], out: &mut [f64]) {
        match self {
            Recurrent::Dense(m) | Recurrent::Block { weights: m, .. } => {
                m.matvec_transposed_acc(d, out)
            }
            Recurrent::Diagonal(r) => {
                for ((o, &ri), &di) in out.iter_mut().zip(r).zip(d) {
                    *o += ri * di;
                }
            }
        }
    }

    /// Whether flat coordinate `idx` is a trainable entry (false for masked block entries).
    pub fn is_free(&self, idx: usize) -> bool {
        match self {
            Recurrent::Block { weights, split } => {
                let h = weights.cols();
                !block_masked(*split, idx / h, idx % h)
            }
            _ => true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Architecture {
    /// Diagonal linear recurrence with identity nonlinearity.
    Irlm,
    Rnn,
    /// Dense RNN plus word-start skip matrix.
    SkipRnn,
    /// Dense RNN with block-partitioned recurrent matrix.
    BlockRnn,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Irlm => "irlm",
            Architecture::Rnn => "rnn",
            Architecture::SkipRnn => "skiprnn",
            Architecture::BlockRnn => "block_rnn",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "irlm" => Ok(Architecture::Irlm),
            "rnn" => Ok(Architecture::Rnn),
            "skiprnn" => Ok(Architecture::SkipRnn),
            "block_rnn" => Ok(Architecture::BlockRnn),
            other => Err(Error::usage(format!(
                "unknown architecture '{other}' (expected irlm|rnn|skiprnn|block_rnn)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// `W`, H × V; column `v` is the input embedding of token `v`.
    pub encoder: Matrix,
    pub recurrent: Recurrent,
    /// `Z`, V × H; row `v` scores token `v`.
    pub decoder: Matrix,
    pub skip: Option<Matrix>,
    pub nonlinearity: Nonlinearity,
    pub lcu: Option<LcuConfig>,
}

/// Identifies one parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TensorId {
    Encoder,
    Recurrent,
    Decoder,
    Skip,
}

impl TensorId {
    pub const ALL: [TensorId; 4] = [
        TensorId::Encoder,
        TensorId::Recurrent,
        TensorId::Decoder,
        TensorId::Skip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TensorId::Encoder => "W",
            TensorId::Recurrent => "R",
            TensorId::Decoder => "Z",
            TensorId::Skip => "R_skip",
        }
    }
}

impl ModelParams {
    pub fn hidden(&self) -> usize {
        self.encoder.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.encoder.cols()
    }

    pub fn architecture(&self) -> Architecture {
        match (&self.recurrent, self.skip.is_some()) {
            (Recurrent::Diagonal(_), _) => Architecture::Irlm,
            (Recurrent::Block { .. }, _) => Architecture::BlockRnn,
            (Recurrent::Dense(_), true) => Architecture::SkipRnn,
            (Recurrent::Dense(_), false) => Architecture::Rnn,
        }
    }

    /// Diagonal recurrence with the identity nonlinearity.
    pub fn is_irlm(&self) -> bool {
        matches!(self.recurrent, Recurrent::Diagonal(_))
            && self.nonlinearity.kind == NonlinearityKind::Identity
    }

    pub fn validate(&self) -> Result<()> {
        let (h, v) = (self.hidden(), self.vocab_size());
        if h == 0 || v == 0 {
            return Err(Error::usage("hidden and vocabulary sizes must be at least 1"));
        }
        if self.decoder.shape() != (v, h) {
            return Err(Error::data(format!(
                "decoder is {:?}, expected ({v}, {h})",
                self.decoder.shape()
            )));
        }
        match &self.recurrent {
            Recurrent::Dense(m) if m.shape() != (h, h) => {
                return Err(Error::data("recurrent matrix shape mismatch"))
            }
            Recurrent::Block { weights, split } if weights.shape() != (h, h) || *split > h => {
                return Err(Error::data("block recurrent matrix shape mismatch"))
            }
            Recurrent::Diagonal(r) if r.len() != h => {
                return Err(Error::data("recurrent diagonal length mismatch"))
            }
            _ => {}
        }
        if let Some(s) = &self.skip {
            if s.shape() != (h, h) {
                return Err(Error::data("skip matrix shape mismatch"));
            }
        }
        if let Some(l) = &self.lcu {
            if l.n_short + l.n_long != h {
                return Err(Error::usage(format!(
                    "LCU partition {}+{} does not cover {h} hidden units",
                    l.n_short, l.n_long
                )));
            }
        }
        Ok(())
    }

    pub fn tensor(&self, id: TensorId) -> Option<&[f64]> {
        match id {
            TensorId::Encoder => Some(self.encoder.as_slice()),
            TensorId::Recurrent => Some(self.recurrent.as_slice()),
            TensorId::Decoder => Some(self.decoder.as_slice()),
            TensorId::Skip => self.skip.as_ref().map(|m| m.as_slice()),
        }
    }

    pub fn tensor_mut(&mut self, id: TensorId) -> Option<&mut [f64]> {
        match id {
            TensorId::Encoder => Some(self.encoder.as_mut_slice()),
            TensorId::Recurrent => Some(self.recurrent.as_mut_slice()),
            TensorId::Decoder => Some(self.decoder.as_mut_slice()),
            TensorId::Skip => self.skip.as_mut().map(|m| m.as_mut_slice()),
        }
    }

    pub fn is_finite(&self) -> bool {
        TensorId::ALL
            .iter()
            .filter_map(|&id| self.tensor(id))
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Number of trainable scalars (masked block entries excluded).
    pub fn num_parameters(&self) -> usize {
        let rec = self.recurrent.as_slice().len();
        let free_rec = (0..rec).filter(|&i| self.recurrent.is_free(i)).count();
        self.encoder.as_slice().len()
            + self.decoder.as_slice().len()
            + free_rec
            + self.skip.as_ref().map_or(0, |m| m.as_slice().len())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    pub x: Vec<f64>,
    /// State recorded at the most recent word-start position; the skip connection's source.
    pub last_word_start: Option<Vec<f64>>,
}

impl HiddenState {
    pub fn zeros(hidden: usize) -> Self {
        HiddenState {
            x: vec![0.0; hidden],
            last_word_start: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().all(|v| v.is_finite())
            && self
                .last_word_start
                .as_ref()
                .is_none_or(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Pre-activation `W y + R x_prev (+ R_skip s)` written into `out`.
pub(crate) fn preactivation_into(
    params: &ModelParams,
    x_prev: &[f64],
    skip_source: Option<&[f64]>,
    token: usize,
    out: &mut [f64],
) {
    params.recurrent.apply_into(x_prev, out);
    let v = params.vocab_size();
    let w = params.encoder.as_slice();
    for (i, o) in out.iter_mut().enumerate() {
        *o += w[i * v + token];
    }
    if let (Some(rs), Some(s)) = (&params.skip, skip_source) {
        for (i, o) in out.iter_mut().enumerate() {
            *o += dot(rs.row(i), s);
        }
    }
}

/// Advances the hidden state by one token.
pub fn forward_step(
    params: &ModelParams,
    state: &HiddenState,
    token_id: usize,
    is_word_start: bool,
) -> Result<HiddenState> {
    let h = params.hidden();
    if token_id >= params.vocab_size() {
        return Err(Error::usage(format!(
            "token id {token_id} out of range for vocabulary of {}",
            params.vocab_size()
        )));
    }
    if state.x.len() != h {
        return Err(Error::usage("hidden state dimension mismatch"));
    }
    let skip_source = if is_word_start {
        state.last_word_start.as_deref()
    } else {
        None
    };
    let mut x = vec![0.0; h];
    preactivation_into(params, &state.x, skip_source, token_id, &mut x);
    for v in x.iter_mut() {
        *v = params.nonlinearity.apply(*v);
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("hidden state became non-finite"));
    }
    let last_word_start = if is_word_start {
        Some(x.clone())
    } else {
        state.last_word_start.clone()
    };
    Ok(HiddenState { x, last_word_start })
}

/// Decoder input: `x ∘ mask` when a mask is given, otherwise `scale · x`.
pub(crate) fn decoder_input_into(x: &[f64], mask: Option<&[f64]>, scale: Option<f64>, out: &mut [f64]) {
    match (mask, scale) {
        (Some(m), _) => {
            for ((o, &xi), &mi) in out.iter_mut().zip(x).zip(m) {
                *o = xi * mi;
            }
        }
        (None, Some(s)) => {
            for (o, &xi) in out.iter_mut().zip(x) {
                *o = xi * s;
            }
        }
        (None, None) => out.copy_from_slice(x),
    }
}

/// Unnormalized scores `Z x` for every token.
pub(crate) fn logits_into(params: &ModelParams, x: &[f64], out: &mut [f64]) {
    params.decoder.matvec_into(x, out);
}

/// Next-token distribution from the current state. `dropout_mask` multiplies `x` elementwise
/// before decoding; `inference_scale` (mean-mask inference) multiplies it by a scalar instead.
pub fn predict_distribution(
    params: &ModelParams,
    state: &HiddenState,
    dropout_mask: Option<&[f64]>,
    inference_scale: Option<f64>,
) -> Result<Vec<f64>> {
    let h = params.hidden();
    if dropout_mask.is_some() && inference_scale.is_some() {
        return Err(Error::usage("give either a dropout mask or an inference scale, not both"));
    }
    if dropout_mask.is_some_and(|m| m.len() != h) || state.x.len() != h {
        return Err(Error::usage("dimension mismatch in predict_distribution"));
    }
    let mut dec = vec![0.0; h];
    decoder_input_into(&state.x, dropout_mask, inference_scale, &mut dec);
    let mut p = vec![0.0; params.vocab_size()];
    logits_into(params, &dec, &mut p);
    if !p.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("non-finite logits"));
    }
    softmax_in_place(&mut p);
    Ok(p)
}

/// Pre-softmax logit of `next_id` after reading `history` from a zero state, computed by the
/// explicit impulse-response sum `Σ_τ Z[next] · (r^τ ∘ W[:, y_{t−τ}])`.
pub fn direct_irlm_logits(params: &ModelParams, history: &[usize], next_id: usize) -> Result<f64> {
    let r = match (&params.recurrent, params.nonlinearity.kind) {
        (Recurrent::Diagonal(r), NonlinearityKind::Identity) => r,
        _ => return Err(Error::usage("direct_irlm_logits requires an IRLM (diagonal + identity)")),
    };
    let v = params.vocab_size();
    if next_id >= v || history.iter().any(|&t| t >= v) {
        return Err(Error::usage("token id out of range"));
    }
    let z = params.decoder.row(next_id);
    let mut power = vec![1.0; r.len()];
    let mut logit = 0.0;
    for &tok in history.iter().rev() {
        for i in 0..r.len() {
            logit += z[i] * power[i] * params.encoder[(i, tok)];
        }
        for (p, &ri) in power.iter_mut().zip(r) {
            *p *= ri;
        }
    }
    Ok(logit)
}

/// Architecture descriptor consumed by [`init_params`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArchSpec {
    pub arch: Architecture,
    /// Ignored for the IRLM, which always uses the identity.
    pub nonlinearity: Nonlinearity,
    /// Short/long unit partition. Required for `BlockRnn`, where it defines the two blocks.
    pub lcu: Option<LcuConfig>,
}

impl ArchSpec {
    pub fn irlm() -> Self {
        ArchSpec {
            arch: Architecture::Irlm,
            nonlinearity: Nonlinearity::IDENTITY,
            lcu: None,
        }
    }

    pub fn rnn(nonlinearity: Nonlinearity) -> Self {
        ArchSpec {
            arch: Architecture::Rnn,
            nonlinearity,
            lcu: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitSpec {
    /// W, Z ~ U[−0.1, 0.1]; dense recurrent and skip ~ N(0, 0.01²); diagonal ~ U[0, 0.5].
    Standard,
    /// Long units start at `value` on the diagonal, short units at 0. For the IRLM these are
    /// diagonal entries; for the block RNN the long block is `value·I` and the short block 0.
    LongContext { value: f64 },
}

pub fn init_params(
    spec: &ArchSpec,
    hidden: usize,
    vocab_size: usize,
    seed: u64,
    init: &InitSpec,
) -> Result<ModelParams> {
    if hidden == 0 || vocab_size == 0 {
        return Err(Error::usage("hidden and vocabulary sizes must be at least 1"));
    }
    if let Some(l) = &spec.lcu {
        if l.n_short + l.n_long != hidden {
            return Err(Error::usage(format!(
                "LCU partition {}+{} != hidden size {hidden}",
                l.n_short, l.n_long
            )));
        }
        if !(l.lower <= l.upper) {
            return Err(Error::usage("LCU lower bound exceeds upper bound"));
        }
    }
    if matches!(init, InitSpec::LongContext { .. }) && spec.lcu.is_none() {
        return Err(Error::usage("long-context initialization needs an LCU partition"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.01).expect("valid normal");
    let uniform = |rng: &mut ChaCha8Rng| rng.random_range(-0.1..=0.1);
    let encoder = Matrix::from_fn(hidden, vocab_size, |_, _| uniform(&mut rng));
    let decoder = Matrix::from_fn(vocab_size, hidden, |_, _| uniform(&mut rng));

    let nonlinearity = match spec.arch {
        Architecture::Irlm => Nonlinearity::IDENTITY,
        _ => spec.nonlinearity,
    };
    let recurrent = match spec.arch {
        Architecture::Irlm => {
            let r = match (init, &spec.lcu) {
                (InitSpec::LongContext { value }, Some(l)) => {
                    (0..hidden).map(|i| if l.is_long(i) { *value } else { 0.0 }).collect()
                }
                _ => (0..hidden).map(|_| rng.random_range(0.0..=0.5)).collect(),
            };
            Recurrent::Diagonal(r)
        }
        Architecture::Rnn | Architecture::SkipRnn => {
            Recurrent::Dense(Matrix::from_fn(hidden, hidden, |_, _| normal.sample(&mut rng)))
        }
        Architecture::BlockRnn => {
            let l = spec
                .lcu
                .ok_or_else(|| Error::usage("block RNN needs a short/long unit partition"))?;
            let split = l.n_short;
            let weights = match init {
                InitSpec::LongContext { value } => Matrix::from_fn(hidden, hidden, |i, j| {
                    if i == j && l.is_long(i) {
                        *value
                    } else {
                        0.0
                    }
                }),
                InitSpec::Standard => Matrix::from_fn(hidden, hidden, |i, j| {
                    let v = normal.sample(&mut rng);
                    if block_masked(split, i, j) {
                        0.0
                    } else {
                        v
                    }
                }),
            };
            Recurrent::Block { weights, split }
        }
    };
    let skip = match spec.arch {
        Architecture::SkipRnn => Some(Matrix::from_fn(hidden, hidden, |_, _| normal.sample(&mut rng))),
        _ => None,
    };
    let params = ModelParams {
        encoder,
        recurrent,
        decoder,
        skip,
        nonlinearity,
        lcu: spec.lcu,
    };
    params.validate()?;
    Ok(params)
}

/// Runs `tokens` from the zero state and returns the final hidden state.
pub fn run_tokens(params: &ModelParams, tokens: &[usize], word_start: &[bool]) -> Result<HiddenState> {
    let mut state = HiddenState::zeros(params.hidden());
    for (&t, &ws) in tokens.iter().zip(word_start) {
        state = forward_step(params, &state, t, ws)?;
    }
    Ok(state)
}

/// Adds `alpha · x` to column `token` of the encoder.
pub(crate) fn encoder_column_axpy(encoder: &mut Matrix, token: usize, alpha: f64, x: &[f64]) {
    let v = encoder.cols();
    let data = encoder.as_mut_slice();
    for (i, &xi) in x.iter().enumerate() {
        data[i * v + token] += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_irlm(r: Vec<f64>, v: usize, seed: u64) -> ModelParams {
        let mut p = init_params(&ArchSpec::irlm(), r.len(), v, seed, &InitSpec::Standard).unwrap();
        p.recurrent = Recurrent::Diagonal(r);
        p
    }

    #[test]
    fn irlm_step_by_hand() {
        let mut p = tiny_irlm(vec![0.5], 2, 0);
        p.encoder[(0, 1)] = 1.0;
        let state = HiddenState {
            x: vec![1.0],
            last_word_start: None,
        };
        let next = forward_step(&p, &state, 1, true).unwrap();
        assert_eq!(next.x, vec![1.5]);
        assert_eq!(next.last_word_start, Some(vec![1.5]));
    }

    #[test]
    fn zero_input_gives_zero_state_for_every_nonlinearity() {
        for nl in [
            Nonlinearity::IDENTITY,
            Nonlinearity::RECTIFIER,
            Nonlinearity::smoothed_rectifier(1.0),
        ] {
            let mut p = init_params(&ArchSpec::rnn(nl), 3, 4, 1, &InitSpec::Standard).unwrap();
            for i in 0..3 {
                p.encoder[(i, 2)] = 0.0;
            }
            let s = forward_step(&p, &HiddenState::zeros(3), 2, true).unwrap();
            assert_eq!(s.x, vec![0.0; 3], "{}", nl.name());
        }
        // The logistic maps 0 to 1/2, so the zero-propagation example only holds with the
        // input column and previous state zero for the three rectifier-like units above.
        let nl = Nonlinearity::LOGISTIC;
        assert_eq!(nl.apply(0.0), 0.5);
    }

    #[test]
    fn smoothed_rectifier_values() {
        let f = Nonlinearity::smoothed_rectifier(1.0);
        assert_eq!(f.apply(-5.0), 0.0);
        assert!((f.apply(5.0) - 4.000_090_8).abs() < 1e-6);
        assert!((f.apply(5.0) - (5.0 - 5f64.tanh())).abs() < 1e-15);
        assert_eq!(f.derivative(-1.0), 0.0);
    }

    #[test]
    fn smoothed_rectifier_shape_properties() {
        for a in [0.1, 1.0, 3.0] {
            let f = Nonlinearity::smoothed_rectifier(a);
            let mut prev = f64::NEG_INFINITY;
            for k in -2000..=2000 {
                let x = k as f64 * 0.01;
                let y = f.apply(x);
                if x <= 0.0 {
                    assert_eq!(y, 0.0);
                }
                assert!(y >= prev, "not monotone at {x}");
                prev = y;
            }
            // f(x) − (x − a) = a(1 − tanh(x/a)) → 0
            assert!((f.apply(50.0 * a) - (50.0 * a - a)).abs() < 1e-12 * a.max(1.0) + 1e-12);
        }
    }

    #[test]
    fn nonlinearity_derivatives_match_central_differences() {
        let eps = 1e-6;
        for nl in [
            Nonlinearity::IDENTITY,
            Nonlinearity::LOGISTIC,
            Nonlinearity::RECTIFIER,
            Nonlinearity::smoothed_rectifier(0.7),
        ] {
            for &x in &[-2.3, -0.4, 0.3, 1.7] {
                let fd = (nl.apply(x + eps) - nl.apply(x - eps)) / (2.0 * eps);
                assert!((fd - nl.derivative(x)).abs() < 1e-8, "{} at {x}", nl.name());
            }
        }
    }

    #[test]
    fn predictive_distribution_examples() {
        let mut p = tiny_irlm(vec![0.0], 3, 0);
        let state = HiddenState::zeros(1);
        let d = predict_distribution(&p, &state, None, None).unwrap();
        assert_eq!(d, vec![1.0 / 3.0; 3]);

        p = tiny_irlm(vec![0.0], 2, 0);
        p.decoder = Matrix::from_vec(2, 1, vec![2f64.ln(), 0.0]);
        let state = HiddenState {
            x: vec![1.0],
            last_word_start: None,
        };
        let d = predict_distribution(&p, &state, None, None).unwrap();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-15 && (d[1] - 1.0 / 3.0).abs() < 1e-15);

        let d = predict_distribution(&p, &state, Some(&[0.0]), None).unwrap();
        assert_eq!(d, vec![0.5, 0.5]);
        assert!(predict_distribution(&p, &state, Some(&[1.0]), Some(0.5)).is_err());
    }

    #[test]
    fn direct_sum_single_token_and_zero_recurrence() {
        let p = tiny_irlm(vec![0.0, 0.0, 0.0], 5, 3);
        let single = direct_irlm_logits(&p, &[2], 4).unwrap();
        let expect: f64 = (0..3).map(|i| p.decoder[(4, i)] * p.encoder[(i, 2)]).sum();
        assert!((single - expect).abs() < 1e-15);
        let long = direct_irlm_logits(&p, &[0, 1, 3, 2], 4).unwrap();
        assert_eq!(long, single);
        let rnn = init_params(&ArchSpec::rnn(Nonlinearity::IDENTITY), 3, 5, 0, &InitSpec::Standard).unwrap();
        assert!(matches!(direct_irlm_logits(&rnn, &[1], 0), Err(Error::Usage(_))));
    }

    #[test]
    fn init_is_deterministic_and_follows_recipes() {
        let a = init_params(&ArchSpec::irlm(), 8, 11, 42, &InitSpec::Standard).unwrap();
        let b = init_params(&ArchSpec::irlm(), 8, 11, 42, &InitSpec::Standard).unwrap();
        assert_eq!(a, b);
        assert!(a.encoder.as_slice().iter().all(|v| v.abs() <= 0.1));
        assert!(a.recurrent.as_slice().iter().all(|&r| (0.0..=0.5).contains(&r)));

        let lcu = LcuConfig {
            n_short: 128,
            n_long: 384,
            lower: 0.7,
            upper: 1.0,
        };
        let spec = ArchSpec {
            lcu: Some(lcu),
            ..ArchSpec::irlm()
        };
        let p = init_params(&spec, 512, 3, 0, &InitSpec::LongContext { value: 0.9 }).unwrap();
        let r = p.recurrent.as_slice();
        assert_eq!(r.iter().filter(|&&x| x == 0.9).count(), 384);
        assert_eq!(r.iter().filter(|&&x| x == 0.0).count(), 128);

        let block = ArchSpec {
            arch: Architecture::BlockRnn,
            nonlinearity: Nonlinearity::RECTIFIER,
            lcu: Some(lcu),
        };
        let p = init_params(&block, 512, 3, 0, &InitSpec::LongContext { value: 0.9 }).unwrap();
        let Recurrent::Block { weights, split } = &p.recurrent else {
            panic!("expected block recurrence")
        };
        for i in 0..512 {
            for j in 0..512 {
                let w = weights[(i, j)];
                if block_masked(*split, i, j) || i != j || i < 128 {
                    assert_eq!(w, 0.0);
                } else {
                    assert_eq!(w, 0.9);
                }
            }
        }
        let bad = LcuConfig { n_long: 300, ..lcu };
        let spec = ArchSpec {
            lcu: Some(bad),
            ..ArchSpec::irlm()
        };
        assert!(matches!(
            init_params(&spec, 512, 3, 0, &InitSpec::Standard),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn skip_with_zero_matrix_reproduces_plain_rnn() {
        let nl = Nonlinearity::smoothed_rectifier(1.0);
        let spec = ArchSpec {
            arch: Architecture::SkipRnn,
            nonlinearity: nl,
            lcu: None,
        };
        let mut skip = init_params(&spec, 5, 7, 9, &InitSpec::Standard).unwrap();
        skip.skip = Some(Matrix::zeros(5, 5));
        let mut plain = skip.clone();
        plain.skip = None;
        let tokens = [1, 4, 2, 6, 0, 3, 3, 5];
        let ws = [true, false, false, true, false, true, false, false];
        let (mut a, mut b) = (HiddenState::zeros(5), HiddenState::zeros(5));
        for (&t, &w) in tokens.iter().zip(&ws) {
            a = forward_step(&skip, &a, t, w).unwrap();
            b = forward_step(&plain, &b, t, w).unwrap();
            assert_eq!(a.x, b.x);
        }
    }

    #[test]
    fn irlm_jacobian_is_power_of_diagonal() {
        let r = vec![0.9, -0.5, 0.3, 0.0];
        let p = tiny_irlm(r.clone(), 6, 5);
        let tokens = [1, 3, 5, 2, 0, 4];
        let base = HiddenState::zeros(4);
        for unit in 0..4 {
            let mut bumped = base.clone();
            bumped.x[unit] = 1.0;
            let (mut a, mut b) = (base.clone(), bumped);
            for (tau, &t) in tokens.iter().enumerate() {
                a = forward_step(&p, &a, t, true).unwrap();
                b = forward_step(&p, &b, t, true).unwrap();
                for j in 0..4 {
                    let expect = if j == unit { r[j].powi(tau as i32 + 1) } else { 0.0 };
                    assert!((b.x[j] - a.x[j] - expect).abs() < 1e-12);
                }
            }
        }
    }
}
