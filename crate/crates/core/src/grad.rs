//! Exact gradients by truncated backpropagation through time, the noise-contrastive objective,
//! and a central-difference gradient checker.
//!
//! A segment of `L` tokens consumes its first `L − 1` tokens and predicts tokens `1..L`; the
//! returned state has consumed exactly those `L − 1` tokens, so consecutive segments overlap by
//! one token and every stream position after the first is predicted once. Losses are means
//! over the segment's predictions.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, log_sum_exp, Matrix};
use crate::model::{
    block_masked, decoder_input_into, encoder_column_axpy, logits_into, preactivation_into,
    HiddenState, ModelParams, Recurrent, TensorId,
};

/// Gradient (or any other buffer) with the same shapes as a [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub encoder: Matrix,
    pub recurrent: Recurrent,
    pub decoder: Matrix,
    pub skip: Option<Matrix>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients {
            encoder: Matrix::zeros(params.encoder.rows(), params.encoder.cols()),
            recurrent: params.recurrent.zeros_like(),
            decoder: Matrix::zeros(params.decoder.rows(), params.decoder.cols()),
            skip: params.skip.as_ref().map(|m| Matrix::zeros(m.rows(), m.cols())),
        }
    }

    /// Copies the parameter values themselves (the gradient of ½‖θ‖²).
    pub fn from_params(params: &ModelParams) -> Self {
        Gradients {
            encoder: params.encoder.clone(),
            recurrent: params.recurrent.clone(),
            decoder: params.decoder.clone(),
            skip: params.skip.clone(),
        }
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

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(TensorId, &mut [f64])) {
        for id in TensorId::ALL {
            if let Some(t) = self.tensor_mut(id) {
                f(id, t);
            }
        }
    }

    pub fn fill_zero(&mut self) {
        self.for_each_tensor_mut(|_, t| t.iter_mut().for_each(|v| *v = 0.0));
    }

    pub fn scale(&mut self, s: f64) {
        self.for_each_tensor_mut(|_, t| t.iter_mut().for_each(|v| *v *= s));
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for id in TensorId::ALL {
            if let (Some(dst), Some(src)) = (self.tensor_mut(id), other.tensor(id)) {
                axpy(1.0, src, dst);
            }
        }
    }

    pub fn norm_sq(&self) -> f64 {
        TensorId::ALL
            .iter()
            .filter_map(|&id| self.tensor(id))
            .map(|t| dot(t, t))
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        TensorId::ALL
            .iter()
            .filter_map(|&id| self.tensor(id))
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// A contiguous piece of a token stream.
#[derive(Clone, Copy, Debug)]
pub struct Segment<'a> {
    pub ids: &'a [usize],
    pub word_start: &'a [bool],
}

impl<'a> Segment<'a> {
    pub fn new(ids: &'a [usize], word_start: &'a [bool]) -> Self {
        Segment { ids, word_start }
    }

    pub fn predictions(&self) -> usize {
        self.ids.len().saturating_sub(1)
    }

    fn validate(&self, params: &ModelParams, masks: Option<&[Vec<f64>]>) -> Result<()> {
        if self.ids.len() < 2 {
            return Err(Error::usage("a segment needs at least two tokens"));
        }
        if self.ids.len() != self.word_start.len() {
            return Err(Error::usage("segment ids and word_start lengths differ"));
        }
        if self.ids.iter().any(|&t| t >= params.vocab_size()) {
            return Err(Error::usage("segment token id out of range"));
        }
        if let Some(m) = masks {
            if m.len() != self.predictions() || m.iter().any(|v| v.len() != params.hidden()) {
                return Err(Error::usage("need one length-H dropout mask per predicted position"));
            }
        }
        Ok(())
    }
}

/// Output of a gradient evaluation on one segment.
#[derive(Clone, Debug)]
pub struct SegmentGradients {
    pub grads: Gradients,
    /// Mean loss per predicted token.
    pub loss: f64,
    pub final_state: HiddenState,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum SkipSource {
    None,
    Initial,
    Position(usize),
}

/// Forward activations for one segment, stored flat (`n × H`).
struct Trace {
    n: usize,
    h: usize,
    pre: Vec<f64>,
    xs: Vec<f64>,
    dec: Vec<f64>,
    skip_src: Vec<SkipSource>,
    final_state: HiddenState,
}

impl Trace {
    fn x(&self, t: usize) -> &[f64] {
        &self.xs[t * self.h..(t + 1) * self.h]
    }

    fn dec(&self, t: usize) -> &[f64] {
        &self.dec[t * self.h..(t + 1) * self.h]
    }
}

fn forward_trace(
    params: &ModelParams,
    seg: Segment<'_>,
    initial: &HiddenState,
    masks: Option<&[Vec<f64>]>,
) -> Result<Trace> {
    let h = params.hidden();
    if initial.x.len() != h {
        return Err(Error::usage("initial state dimension mismatch"));
    }
    let n = seg.predictions();
    let mut pre = vec![0.0; n * h];
    let mut xs = vec![0.0; n * h];
    let mut dec = vec![0.0; n * h];
    let mut skip_src = vec![SkipSource::None; n];
    let mut last = if initial.last_word_start.is_some() {
        SkipSource::Initial
    } else {
        SkipSource::None
    };
    for t in 0..n {
        let (done, rest) = xs.split_at_mut(t * h);
        let prev_x: &[f64] = if t == 0 { &initial.x } else { &done[(t - 1) * h..] };
        let src = if seg.word_start[t] && params.skip.is_some() { last } else { SkipSource::None };
        skip_src[t] = src;
        let src_vec: Option<&[f64]> = match src {
            SkipSource::None => None,
            SkipSource::Initial => initial.last_word_start.as_deref(),
            SkipSource::Position(p) => Some(&done[p * h..(p + 1) * h]),
        };
        let pre_t = &mut pre[t * h..(t + 1) * h];
        preactivation_into(params, prev_x, src_vec, seg.ids[t], pre_t);
        let x_t = &mut rest[..h];
        for (xi, &ai) in x_t.iter_mut().zip(pre_t.iter()) {
            *xi = params.nonlinearity.apply(ai);
        }
        if !x_t.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric(format!("hidden state non-finite at segment position {t}")));
        }
        decoder_input_into(x_t, masks.map(|m| m[t].as_slice()), None, &mut dec[t * h..(t + 1) * h]);
        if seg.word_start[t] {
            last = SkipSource::Position(t);
        }
    }
    let final_x = if n == 0 { initial.x.clone() } else { xs[(n - 1) * h..].to_vec() };
    let last_word_start = match last {
        SkipSource::None => None,
        SkipSource::Initial => initial.last_word_start.clone(),
        SkipSource::Position(p) => Some(xs[p * h..(p + 1) * h].to_vec()),
    };
    Ok(Trace {
        n,
        h,
        pre,
        xs,
        dec,
        skip_src,
        final_state: HiddenState {
            x: final_x,
            last_word_start,
        },
    })
}

/// Backpropagates `out_grad` (gradient with respect to each position's decoder input) through
/// the dropout masks, the nonlinearity, and the recurrent and skip connections. Messages stop
/// at the segment's start.
fn backward_recurrent(
    params: &ModelParams,
    seg: Segment<'_>,
    initial: &HiddenState,
    masks: Option<&[Vec<f64>]>,
    trace: &Trace,
    out_grad: &[f64],
    grads: &mut Gradients,
) {
    let (n, h) = (trace.n, trace.h);
    let mut carry = vec![0.0; h];
    let mut skip_carry = vec![0.0; n * h];
    let mut delta = vec![0.0; h];
    for t in (0..n).rev() {
        let pre_t = &trace.pre[t * h..(t + 1) * h];
        let out_t = &out_grad[t * h..(t + 1) * h];
        let sc_t = &skip_carry[t * h..(t + 1) * h];
        for i in 0..h {
            let from_output = match masks {
                Some(m) => out_t[i] * m[t][i],
                None => out_t[i],
            };
            let dx = from_output + carry[i] + sc_t[i];
            delta[i] = params.nonlinearity.derivative(pre_t[i]) * dx;
        }
        encoder_column_axpy(&mut grads.encoder, seg.ids[t], 1.0, &delta);
        let prev_x: &[f64] = if t == 0 { &initial.x } else { trace.x(t - 1) };
        match &mut grads.recurrent {
            Recurrent::Dense(m) => m.add_outer(1.0, &delta, prev_x),
            Recurrent::Diagonal(d) => {
                for ((di, &de), &xp) in d.iter_mut().zip(&delta).zip(prev_x) {
                    *di += de * xp;
                }
            }
            Recurrent::Block { weights, split } => {
                for (i, &de) in delta.iter().enumerate() {
                    if de == 0.0 {
                        continue;
                    }
                    let row = weights.row_mut(i);
                    for (j, &xp) in prev_x.iter().enumerate() {
                        if !block_masked(*split, i, j) {
                            row[j] += de * xp;
                        }
                    }
                }
            }
        }
        if t > 0 {
            carry.iter_mut().for_each(|c| *c = 0.0);
            params.recurrent.apply_transposed_acc(&delta, &mut carry);
        }
        let src = match trace.skip_src[t] {
            SkipSource::None => None,
            SkipSource::Initial => initial.last_word_start.as_deref(),
            SkipSource::Position(p) => Some(trace.x(p)),
        };
        if let (Some(src), Some(gs), Some(rs)) = (src, grads.skip.as_mut(), params.skip.as_ref()) {
            gs.add_outer(1.0, &delta, src);
            if let SkipSource::Position(p) = trace.skip_src[t] {
                rs.matvec_transposed_acc(&delta, &mut skip_carry[p * h..(p + 1) * h]);
            }
        }
    }
}

/// Softmax cross-entropy: accumulates `dZ` and returns the summed negative log-likelihood.
/// Decoder rows are visited once per segment (not once per position) so that `Z` and `dZ`
/// stream through the cache a single time.
fn softmax_output_grads(
    params: &ModelParams,
    seg: Segment<'_>,
    trace: &Trace,
    scale: f64,
    grads: &mut Gradients,
    out_grad: &mut [f64],
) -> Result<f64> {
    let (n, h) = (trace.n, trace.h);
    let v = params.vocab_size();
    let mut coef = vec![0.0; n * v];
    for row in 0..v {
        let z = params.decoder.row(row);
        for t in 0..n {
            coef[t * v + row] = dot(z, trace.dec(t));
        }
    }
    let mut total = 0.0;
    for t in 0..n {
        let logits = &mut coef[t * v..(t + 1) * v];
        let target = seg.ids[t + 1];
        let lse = log_sum_exp(logits);
        if !lse.is_finite() {
            return Err(Error::numeric("non-finite logits"));
        }
        total += lse - logits[target];
        for (row, l) in logits.iter_mut().enumerate() {
            let p = (*l - lse).exp();
            *l = scale * if row == target { p - 1.0 } else { p };
        }
    }
    for row in 0..v {
        let z = params.decoder.row(row);
        let dz = grads.decoder.row_mut(row);
        for t in 0..n {
            let c = coef[t * v + row];
            if c == 0.0 {
                continue;
            }
            axpy(c, trace.dec(t), dz);
            axpy(c, z, &mut out_grad[t * h..(t + 1) * h]);
        }
    }
    Ok(total)
}

/// Summed negative log-likelihood of the segment's predictions (no gradients).
fn softmax_loss(params: &ModelParams, seg: Segment<'_>, trace: &Trace) -> Result<f64> {
    let mut logits = vec![0.0; params.vocab_size()];
    let mut total = 0.0;
    for t in 0..trace.n {
        logits_into(params, trace.dec(t), &mut logits);
        let lse = log_sum_exp(&logits);
        if !lse.is_finite() {
            return Err(Error::numeric("non-finite logits"));
        }
        total += lse - logits[seg.ids[t + 1]];
    }
    Ok(total)
}

/// Gradients of the mean per-token negative log-likelihood over one segment.
///
/// `dropout_masks`, when given, holds one mask per predicted position; the decoder sees
/// `x_t ∘ mask_t` while the recurrence uses the unmasked state.
pub fn bptt_gradients(
    params: &ModelParams,
    segment: Segment<'_>,
    initial_state: &HiddenState,
    dropout_masks: Option<&[Vec<f64>]>,
) -> Result<SegmentGradients> {
    let mut grads = Gradients::zeros_like(params);
    let out = bptt_accumulate(params, segment, initial_state, dropout_masks, 1.0, &mut grads)?;
    if !grads.is_finite() {
        return Err(Error::numeric("non-finite gradient"));
    }
    Ok(SegmentGradients {
        grads,
        loss: out.loss,
        final_state: out.final_state,
    })
}

/// Loss and carried state of a segment whose gradient was accumulated into a buffer.
#[derive(Clone, Debug)]
pub struct SegmentLoss {
    pub loss: f64,
    pub final_state: HiddenState,
}

/// Adds `weight ×` the [`bptt_gradients`] gradient into `grads` without allocating a
/// parameter-sized buffer.
pub fn bptt_accumulate(
    params: &ModelParams,
    segment: Segment<'_>,
    initial_state: &HiddenState,
    dropout_masks: Option<&[Vec<f64>]>,
    weight: f64,
    grads: &mut Gradients,
) -> Result<SegmentLoss> {
    segment.validate(params, dropout_masks)?;
    let trace = forward_trace(params, segment, initial_state, dropout_masks)?;
    let scale = 1.0 / trace.n as f64;
    let mut out_grad = vec![0.0; trace.n * trace.h];
    let total = softmax_output_grads(params, segment, &trace, weight * scale, grads, &mut out_grad)?;
    backward_recurrent(params, segment, initial_state, dropout_masks, &trace, &out_grad, grads);
    Ok(SegmentLoss {
        loss: total * scale,
        final_state: trace.final_state,
    })
}

/// Mean negative log-likelihood of a segment; the forward half of [`bptt_gradients`].
pub fn segment_nll(
    params: &ModelParams,
    segment: Segment<'_>,
    initial_state: &HiddenState,
    dropout_masks: Option<&[Vec<f64>]>,
) -> Result<(f64, HiddenState)> {
    segment.validate(params, dropout_masks)?;
    let trace = forward_trace(params, segment, initial_state, dropout_masks)?;
    let total = softmax_loss(params, segment, &trace)?;
    Ok((total / trace.n as f64, trace.final_state))
}

/// Noise-contrastive estimation settings.
#[derive(Clone, Debug)]
pub struct NceConfig {
    k: usize,
    noise: Vec<f64>,
    log_k_noise: Vec<f64>,
    sampler: WeightedIndex<f64>,
}

impl NceConfig {
    /// `noise` must be a strictly positive distribution summing to 1 within 1e-12.
    pub fn new(k: usize, noise: Vec<f64>) -> Result<Self> {
        if k == 0 {
            return Err(Error::usage("NCE needs at least one noise sample per position"));
        }
        if noise.iter().any(|&q| !(q > 0.0) || !q.is_finite()) {
            return Err(Error::usage("every noise probability must be positive"));
        }
        let sum: f64 = noise.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::usage(format!("noise distribution sums to {sum}, not 1")));
        }
        let log_k_noise = noise.iter().map(|&q| (k as f64 * q).ln()).collect();
        let sampler = WeightedIndex::new(&noise)
            .map_err(|e| Error::usage(format!("invalid noise distribution: {e}")))?;
        Ok(NceConfig {
            k,
            noise,
            log_k_noise,
            sampler,
        })
    }

    /// Unigram noise from token counts (unknown-token occurrences included). Tokens never seen
    /// are given a count of one so that every noise probability stays positive.
    pub fn unigram(counts: &[u64], k: usize) -> Result<Self> {
        let floored: Vec<f64> = counts.iter().map(|&c| c.max(1) as f64).collect();
        let total: f64 = floored.iter().sum();
        Self::new(k, floored.into_iter().map(|c| c / total).collect())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn noise(&self) -> &[f64] {
        &self.noise
    }

    /// Draws `k` noise ids per predicted position, positions in order.
    pub fn sample(&self, positions: usize, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..positions * self.k).map(|_| self.sampler.sample(&mut rng)).collect()
    }
}

/// `ln(1 + eˣ)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean NCE loss and its gradients. For each prediction of true token `w` with noise draws
/// `w'₁..w'ₖ`, the loss is `−log σ(Δ(w)) − Σᵢ log(1 − σ(Δ(w'ᵢ)))` where
/// `Δ(v) = Z[v]·x̄_t − log(k·q(v))` and the normalizer is fixed to 1. Noise draws come from
/// `seed` through [`NceConfig::sample`].
pub fn nce_objective_and_gradients(
    params: &ModelParams,
    segment: Segment<'_>,
    initial_state: &HiddenState,
    cfg: &NceConfig,
    seed: u64,
    dropout_masks: Option<&[Vec<f64>]>,
) -> Result<SegmentGradients> {
    let mut grads = Gradients::zeros_like(params);
    let out = nce_accumulate(params, segment, initial_state, cfg, seed, dropout_masks, 1.0, &mut grads)?;
    if !grads.is_finite() {
        return Err(Error::numeric("non-finite gradient"));
    }
    Ok(SegmentGradients {
        grads,
        loss: out.loss,
        final_state: out.final_state,
    })
}

/// Adds `weight ×` the [`nce_objective_and_gradients`] gradient into `grads`.
#[allow(clippy::too_many_arguments)]
pub fn nce_accumulate(
    params: &ModelParams,
    segment: Segment<'_>,
    initial_state: &HiddenState,
    cfg: &NceConfig,
    seed: u64,
    dropout_masks: Option<&[Vec<f64>]>,
    weight: f64,
    grads: &mut Gradients,
) -> Result<SegmentLoss> {
    segment.validate(params, dropout_masks)?;
    if cfg.noise.len() != params.vocab_size() {
        return Err(Error::usage("noise distribution size differs from the vocabulary"));
    }
    let trace = forward_trace(params, segment, initial_state, dropout_masks)?;
    let (n, h) = (trace.n, trace.h);
    let samples = cfg.sample(n, seed);
    let scale = 1.0 / n as f64;
    let gscale = weight * scale;
    let mut out_grad = vec![0.0; n * h];
    let mut total = 0.0;
    for t in 0..n {
        let dec = trace.dec(t);
        let out_t = &mut out_grad[t * h..(t + 1) * h];
        let target = segment.ids[t + 1];
        let delta = dot(params.decoder.row(target), dec) - cfg.log_k_noise[target];
        total += softplus(-delta);
        let c = gscale * (sigmoid(delta) - 1.0);
        axpy(c, dec, grads.decoder.row_mut(target));
        axpy(c, params.decoder.row(target), out_t);
        for &w in &samples[t * cfg.k..(t + 1) * cfg.k] {
            let delta = dot(params.decoder.row(w), dec) - cfg.log_k_noise[w];
            total += softplus(delta);
            let c = gscale * sigmoid(delta);
            axpy(c, dec, grads.decoder.row_mut(w));
            axpy(c, params.decoder.row(w), out_t);
        }
    }
    if !total.is_finite() {
        return Err(Error::numeric("non-finite NCE loss"));
    }
    backward_recurrent(params, segment, initial_state, dropout_masks, &trace, &out_grad, grads);
    Ok(SegmentLoss {
        loss: total * scale,
        final_state: trace.final_state,
    })
}

/// A deterministic scalar objective with an analytic gradient.
pub trait Objective {
    fn value(&mut self, params: &ModelParams) -> Result<f64>;
    fn gradient(&mut self, params: &ModelParams) -> Result<Gradients>;
}

/// Mean softmax NLL of a fixed segment with fixed masks.
pub struct SoftmaxObjective<'a> {
    pub segment: Segment<'a>,
    pub initial: HiddenState,
    pub masks: Option<Vec<Vec<f64>>>,
}

impl Objective for SoftmaxObjective<'_> {
    fn value(&mut self, params: &ModelParams) -> Result<f64> {
        Ok(segment_nll(params, self.segment, &self.initial, self.masks.as_deref())?.0)
    }

    fn gradient(&mut self, params: &ModelParams) -> Result<Gradients> {
        Ok(bptt_gradients(params, self.segment, &self.initial, self.masks.as_deref())?.grads)
    }
}

/// Mean NCE loss of a fixed segment with a fixed noise seed.
pub struct NceObjective<'a> {
    pub segment: Segment<'a>,
    pub initial: HiddenState,
    pub cfg: &'a NceConfig,
    pub seed: u64,
    pub masks: Option<Vec<Vec<f64>>>,
}

impl Objective for NceObjective<'_> {
    fn value(&mut self, params: &ModelParams) -> Result<f64> {
        Ok(nce_objective_and_gradients(
            params,
            self.segment,
            &self.initial,
            self.cfg,
            self.seed,
            self.masks.as_deref(),
        )?
        .loss)
    }

    fn gradient(&mut self, params: &ModelParams) -> Result<Gradients> {
        Ok(nce_objective_and_gradients(
            params,
            self.segment,
            &self.initial,
            self.cfg,
            self.seed,
            self.masks.as_deref(),
        )?
        .grads)
    }
}

/// `|a − b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub tensor: TensorId,
    pub checked: usize,
    pub worst_relative_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl FdReport {
    pub fn worst(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.worst_relative_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() <= self.tolerance
    }
}

/// Compares the objective's analytic gradient with central differences on every trainable
/// coordinate (masked block entries are skipped). Fails with a usage error when the objective
/// is not deterministic, since differences of a resampled objective are meaningless.
pub fn finite_diff_check(
    objective: &mut dyn Objective,
    params: &ModelParams,
    step: f64,
    tolerance: f64,
) -> Result<FdReport> {
    if !(step > 0.0) {
        return Err(Error::usage("finite-difference step must be positive"));
    }
    let v0 = objective.value(params)?;
    let v1 = objective.value(params)?;
    if v0.to_bits() != v1.to_bits() {
        return Err(Error::usage(
            "objective is not deterministic (fix dropout masks and noise seeds before checking)",
        ));
    }
    let analytic = objective.gradient(params)?;
    let mut work = params.clone();
    let mut tensors = Vec::new();
    for id in TensorId::ALL {
        let Some(len) = params.tensor(id).map(<[f64]>::len) else {
            continue;
        };
        let grad = analytic
            .tensor(id)
            .ok_or_else(|| Error::usage(format!("analytic gradient lacks tensor {}", id.name())))?;
        let mut check = TensorCheck {
            tensor: id,
            checked: 0,
            worst_relative_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for idx in 0..len {
            if id == TensorId::Recurrent && !params.recurrent.is_free(idx) {
                continue;
            }
            let orig = params.tensor(id).unwrap()[idx];
            work.tensor_mut(id).unwrap()[idx] = orig + step;
            let plus = objective.value(&work)?;
            work.tensor_mut(id).unwrap()[idx] = orig - step;
            let minus = objective.value(&work)?;
            work.tensor_mut(id).unwrap()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(grad[idx], numeric);
            check.checked += 1;
            if err > check.worst_relative_error || check.checked == 1 {
                check.worst_relative_error = err;
                check.worst_index = idx;
                check.analytic = grad[idx];
                check.numeric = numeric;
            }
        }
        tensors.push(check);
    }
    Ok(FdReport { tensors, tolerance })
}
