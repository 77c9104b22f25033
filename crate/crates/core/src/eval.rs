//! Perplexity evaluation, dynamic evaluation, timescale and spectral diagnostics, and
//! sentence-completion scoring.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{encode, EncodedCorpus, Vocabulary};
use crate::error::{Error, Result};
use crate::grad::{bptt_gradients, Segment};
use crate::linalg::{axpy, dot, log_sum_exp, norm, Matrix};
use crate::model::{decoder_input_into, forward_step, logits_into, HiddenState, ModelParams, Recurrent, TensorId};
use crate::regopt::{project_constraints, sample_dropout_mask, LrScales, ParamGroup, RegularizerConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub token_count: usize,
    pub mean_nll: f64,
    pub perplexity: f64,
    pub bits_per_token: f64,
}

impl EvalReport {
    pub fn from_total(total_nll: f64, token_count: usize) -> Self {
        let mean_nll = if token_count == 0 { 0.0 } else { total_nll / token_count as f64 };
        EvalReport {
            token_count,
            mean_nll,
            perplexity: mean_nll.exp(),
            bits_per_token: mean_nll / std::f64::consts::LN_2,
        }
    }
}

/// How a model trained with decoder dropout is evaluated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DropoutInference {
    /// Decode the raw state.
    Off,
    /// Decode `keep · x`, the expected masked state.
    MeanMask { keep: f64 },
    /// Average the predicted probabilities over `samples` random masks.
    MonteCarlo { drop_prob: f64, samples: usize, seed: u64 },
}

impl DropoutInference {
    /// Mean-mask inference for a model trained with the given drop probability.
    pub fn for_drop_prob(drop_prob: f64) -> Self {
        if drop_prob == 0.0 {
            DropoutInference::Off
        } else {
            DropoutInference::MeanMask { keep: 1.0 - drop_prob }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            DropoutInference::Off => Ok(()),
            DropoutInference::MeanMask { keep } if keep > 0.0 && keep <= 1.0 => Ok(()),
            DropoutInference::MonteCarlo { drop_prob, samples, .. } if (0.0..1.0).contains(&drop_prob) && samples > 0 => {
                Ok(())
            }
            _ => Err(Error::usage("invalid dropout inference settings")),
        }
    }
}

/// Per-position negative log-likelihood with reusable buffers.
struct Scorer {
    mode: DropoutInference,
    dec: Vec<f64>,
    logits: Vec<f64>,
    rng: ChaCha8Rng,
}

impl Scorer {
    fn new(params: &ModelParams, mode: DropoutInference) -> Result<Self> {
        mode.validate()?;
        let seed = match mode {
            DropoutInference::MonteCarlo { seed, .. } => seed,
            _ => 0,
        };
        Ok(Scorer {
            mode,
            dec: vec![0.0; params.hidden()],
            logits: vec![0.0; params.vocab_size()],
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn nll(&mut self, params: &ModelParams, x: &[f64], target: usize) -> Result<f64> {
        let nll = match self.mode {
            DropoutInference::Off | DropoutInference::MeanMask { .. } => {
                let scale = match self.mode {
                    DropoutInference::MeanMask { keep } => Some(keep),
                    _ => None,
                };
                decoder_input_into(x, None, scale, &mut self.dec);
                logits_into(params, &self.dec, &mut self.logits);
                log_sum_exp(&self.logits) - self.logits[target]
            }
            DropoutInference::MonteCarlo { drop_prob, samples, .. } => {
                let mut mean_p = 0.0;
                for _ in 0..samples {
                    let mask = sample_dropout_mask(x.len(), drop_prob, &mut self.rng);
                    decoder_input_into(x, Some(&mask), None, &mut self.dec);
                    logits_into(params, &self.dec, &mut self.logits);
                    mean_p += (self.logits[target] - log_sum_exp(&self.logits)).exp();
                }
                -(mean_p / samples as f64).ln()
            }
        };
        if nll.is_nan() {
            return Err(Error::numeric("non-finite prediction during evaluation"));
        }
        Ok(nll)
    }
}

fn check_corpus(params: &ModelParams, corpus: &EncodedCorpus) -> Result<()> {
    if corpus.vocab_size != params.vocab_size() {
        return Err(Error::usage(format!(
            "corpus encoded for {} tokens but the model has {}",
            corpus.vocab_size,
            params.vocab_size()
        )));
    }
    Ok(())
}

/// Runs the whole stream from a zero state and averages `−log P` over positions `1..N`.
pub fn evaluate(params: &ModelParams, corpus: &EncodedCorpus, mode: DropoutInference) -> Result<EvalReport> {
    evaluate_chunked(params, corpus, mode, corpus.len().max(1))
}

/// Same as [`evaluate`], processing the stream in chunks of `chunk` tokens with the hidden
/// state carried across chunk boundaries.
pub fn evaluate_chunked(
    params: &ModelParams,
    corpus: &EncodedCorpus,
    mode: DropoutInference,
    chunk: usize,
) -> Result<EvalReport> {
    check_corpus(params, corpus)?;
    if chunk == 0 {
        return Err(Error::usage("chunk size must be positive"));
    }
    let mut scorer = Scorer::new(params, mode)?;
    let mut state = HiddenState::zeros(params.hidden());
    let mut total = 0.0;
    let n = corpus.len();
    let mut start = 0;
    while start + 1 < n {
        let end = (start + chunk).min(n - 1);
        for t in start..end {
            state = forward_step(params, &state, corpus.ids[t], corpus.word_start[t])?;
            total += scorer.nll(params, &state.x, corpus.ids[t + 1])?;
        }
        start = end;
    }
    Ok(EvalReport::from_total(total, n.saturating_sub(1)))
}

/// Test-time adaptation. The stream is cut into segments of `segment_length` tokens
/// overlapping by one; each segment is scored with the current working parameters and then
/// one gradient step of size `adapt_lr` (times the group's learning-rate scale) is taken on
/// that segment's likelihood. `params` itself is never modified.
pub fn dynamic_evaluate(
    params: &ModelParams,
    corpus: &EncodedCorpus,
    adapt_lr: f64,
    segment_length: usize,
    lr_scales: &LrScales,
    mode: DropoutInference,
) -> Result<EvalReport> {
    check_corpus(params, corpus)?;
    if !(adapt_lr >= 0.0) || !adapt_lr.is_finite() {
        return Err(Error::usage("adaptation learning rate must be non-negative"));
    }
    if segment_length < 2 {
        return Err(Error::usage("segment length must be at least 2"));
    }
    if matches!(mode, DropoutInference::MonteCarlo { .. }) {
        return Err(Error::usage("dynamic evaluation supports mean-mask inference only"));
    }
    let keep = match mode {
        DropoutInference::MeanMask { keep } => Some(keep),
        _ => None,
    };
    let reg = RegularizerConfig::default();
    let mut work = params.clone();
    let mut scorer = Scorer::new(params, mode)?;
    let mut state = HiddenState::zeros(params.hidden());
    let mut total = 0.0;
    let n = corpus.len();
    let mut start = 0;
    while start + 1 < n {
        let end = (start + segment_length - 1).min(n - 1);
        let seg_start = state.clone();
        for t in start..end {
            state = forward_step(&work, &state, corpus.ids[t], corpus.word_start[t])?;
            total += scorer.nll(&work, &state.x, corpus.ids[t + 1])?;
        }
        let masks = keep.map(|k| vec![vec![k; params.hidden()]; end - start]);
        let seg = Segment::new(&corpus.ids[start..=end], &corpus.word_start[start..=end]);
        let out = bptt_gradients(&work, seg, &seg_start, masks.as_deref())?;
        for id in TensorId::ALL {
            let lr = adapt_lr * lr_scales.get(ParamGroup::of(&work, id));
            if let (Some(g), Some(p)) = (out.grads.tensor(id), work.tensor_mut(id)) {
                axpy(-lr, g, p);
            }
        }
        project_constraints(&mut work, &reg);
        if !work.is_finite() {
            return Err(Error::numeric("dynamic evaluation diverged"));
        }
        start = end;
    }
    Ok(EvalReport::from_total(total, n.saturating_sub(1)))
}

/// Timescales at or above this value are reported as saturated.
pub const TIMESCALE_CAP: f64 = 1e6;

/// `−1/ln|r|` in tokens, 0 for `r = 0`, capped at [`TIMESCALE_CAP`]. The flag reports the cap.
pub fn timescale(r: f64) -> (f64, bool) {
    let a = r.abs();
    if a == 0.0 {
        return (0.0, false);
    }
    if a >= 1.0 {
        return (TIMESCALE_CAP, true);
    }
    let t = -1.0 / a.ln();
    if t >= TIMESCALE_CAP {
        (TIMESCALE_CAP, true)
    } else {
        (t, false)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnitTimescale {
    pub unit: usize,
    pub r: f64,
    pub timescale: f64,
    pub oscillatory: bool,
    pub saturated: bool,
}

/// Upper edges of the timescale histogram bins; the last bin is open-ended.
pub const TIMESCALE_BINS: [f64; 7] = [1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0];

#[derive(Clone, Debug, PartialEq)]
pub struct TimescaleReport {
    pub units: Vec<UnitTimescale>,
    /// Counts per bin: `[0,1), [1,2), [2,5), …, [100, ∞)`.
    pub histogram: Vec<usize>,
    pub max: f64,
}

impl TimescaleReport {
    pub fn count_above(&self, tokens: f64) -> usize {
        self.units.iter().filter(|u| u.timescale > tokens).count()
    }

    pub fn count_below(&self, tokens: f64) -> usize {
        self.units.iter().filter(|u| u.timescale < tokens).count()
    }
}

pub fn timescale_report(params: &ModelParams) -> Result<TimescaleReport> {
    let Recurrent::Diagonal(r) = &params.recurrent else {
        return Err(Error::usage(
            "timescales are defined for diagonal recurrences; use spectral statistics instead",
        ));
    };
    let mut histogram = vec![0; TIMESCALE_BINS.len() + 1];
    let units: Vec<UnitTimescale> = r
        .iter()
        .enumerate()
        .map(|(unit, &r)| {
            let (timescale, saturated) = timescale(r);
            let bin = TIMESCALE_BINS.iter().position(|&edge| timescale < edge).unwrap_or(TIMESCALE_BINS.len());
            histogram[bin] += 1;
            UnitTimescale {
                unit,
                r,
                timescale,
                oscillatory: r < 0.0,
                saturated,
            }
        })
        .collect();
    let max = units.iter().map(|u| u.timescale).fold(0.0, f64::max);
    Ok(TimescaleReport { units, histogram, max })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralStats {
    /// Spectral radius estimated by subspace power iteration.
    pub radius: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Exact spectrum summaries, present when `H ≤ EXACT_SPECTRUM_MAX_H`.
    pub exact_radius: Option<f64>,
    pub fraction_above_0_9: Option<f64>,
}

pub const EXACT_SPECTRUM_MAX_H: usize = 64;
pub const POWER_TOLERANCE: f64 = 1e-8;
pub const POWER_MAX_ITERATIONS: usize = 10_000;

/// Spectral radius of a dense (or block) recurrent matrix, plus the fraction of eigenvalues
/// with modulus above 0.9 for small matrices.
pub fn spectral_stats(params: &ModelParams) -> Result<SpectralStats> {
    let m = match &params.recurrent {
        Recurrent::Dense(m) | Recurrent::Block { weights: m, .. } => m,
        Recurrent::Diagonal(_) => {
            return Err(Error::usage("spectral statistics need a dense recurrent matrix; use timescales"))
        }
    };
    Ok(matrix_spectral_stats(m))
}

pub fn matrix_spectral_stats(m: &Matrix) -> SpectralStats {
    let (radius, converged, iterations) = power_radius(m);
    let (exact_radius, fraction_above_0_9) = if m.rows() <= EXACT_SPECTRUM_MAX_H {
        let moduli = eigenvalue_moduli(m);
        let radius = moduli.iter().copied().fold(0.0, f64::max);
        let frac = moduli.iter().filter(|&&a| a > 0.9).count() as f64 / moduli.len().max(1) as f64;
        (Some(radius), Some(frac))
    } else {
        (None, None)
    };
    SpectralStats {
        radius,
        converged,
        iterations,
        exact_radius,
        fraction_above_0_9,
    }
}

/// Moduli of all eigenvalues (Schur decomposition).
pub fn eigenvalue_moduli(m: &Matrix) -> Vec<f64> {
    let dm = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    dm.complex_eigenvalues().iter().map(|z| z.norm()).collect()
}

/// Two-vector orthogonal iteration: the largest-modulus eigenvalue of the 2×2 Rayleigh block,
/// which captures a dominant real eigenvalue or complex-conjugate pair.
fn power_radius(m: &Matrix) -> (f64, bool, usize) {
    let h = m.rows();
    if h == 0 {
        return (0.0, true, 0);
    }
    if h == 1 {
        return (m[(0, 0)].abs(), true, 0);
    }
    let mut q1: Vec<f64> = (0..h).map(|i| 1.0 + ((i * 7919) % 13) as f64 / 13.0).collect();
    let mut q2: Vec<f64> = (0..h).map(|i| if i % 2 == 0 { 1.0 } else { -0.5 - (i % 5) as f64 / 10.0 }).collect();
    if !orthonormalize(&mut q1, &mut q2) {
        return (0.0, false, 0);
    }
    let mut y1 = vec![0.0; h];
    let mut y2 = vec![0.0; h];
    let mut prev = f64::NAN;
    for it in 1..=POWER_MAX_ITERATIONS {
        m.matvec_into(&q1, &mut y1);
        m.matvec_into(&q2, &mut y2);
        let (b11, b12, b21, b22) = (dot(&q1, &y1), dot(&q1, &y2), dot(&q2, &y1), dot(&q2, &y2));
        let est = max_eig_modulus_2x2(b11, b12, b21, b22);
        if norm(&y1) == 0.0 && norm(&y2) == 0.0 {
            return (0.0, true, it);
        }
        q1.copy_from_slice(&y1);
        q2.copy_from_slice(&y2);
        if !orthonormalize(&mut q1, &mut q2) {
            // The iterates collapsed onto one direction: a single dominant real eigenvalue.
            return (est, true, it);
        }
        if (est - prev).abs() <= POWER_TOLERANCE * est.max(1e-300) {
            return (est, true, it);
        }
        prev = est;
    }
    (prev, false, POWER_MAX_ITERATIONS)
}

fn orthonormalize(a: &mut [f64], b: &mut [f64]) -> bool {
    let na = norm(a);
    if na == 0.0 {
        return false;
    }
    a.iter_mut().for_each(|v| *v /= na);
    let p = dot(a, b);
    axpy(-p, a, b);
    let nb = norm(b);
    if nb <= 1e-14 * na.max(1.0) {
        return false;
    }
    b.iter_mut().for_each(|v| *v /= nb);
    true
}

fn max_eig_modulus_2x2(a: f64, b: f64, c: f64, d: f64) -> f64 {
    let tr = a + d;
    let det = a * d - b * c;
    let disc = tr * tr / 4.0 - det;
    if disc >= 0.0 {
        let s = disc.sqrt();
        (tr / 2.0 + s).abs().max((tr / 2.0 - s).abs())
    } else {
        det.abs().sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompletionQuestion {
    pub qid: String,
    pub candidates: Vec<EncodedCorpus>,
    pub answer: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoringMode {
    /// Total log-likelihood of the candidate sentence.
    Full,
    /// Sum of unnormalized logits with short-context units zeroed.
    LcuOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompletionResult {
    pub qid: String,
    pub choice: usize,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompletionReport {
    pub results: Vec<CompletionResult>,
    /// Fraction correct over the questions that carry an answer.
    pub accuracy: Option<f64>,
}

/// Scores one token sequence from a zero state.
pub fn score_candidate(
    params: &ModelParams,
    candidate: &EncodedCorpus,
    mode: ScoringMode,
    inference_scale: Option<f64>,
) -> Result<f64> {
    let h = params.hidden();
    let mut state = HiddenState::zeros(h);
    let mut dec = vec![0.0; h];
    let mut logits = vec![0.0; params.vocab_size()];
    let mut score = 0.0;
    let n = candidate.len();
    for t in 0..n.saturating_sub(1) {
        state = forward_step(params, &state, candidate.ids[t], candidate.word_start[t])?;
        let next = candidate.ids[t + 1];
        decoder_input_into(&state.x, None, inference_scale, &mut dec);
        match mode {
            ScoringMode::Full => {
                logits_into(params, &dec, &mut logits);
                score += logits[next] - log_sum_exp(&logits);
            }
            ScoringMode::LcuOnly => {
                let lcu = params.lcu.expect("checked by caller");
                dec[..lcu.n_short].iter_mut().for_each(|v| *v = 0.0);
                score += dot(params.decoder.row(next), &dec);
            }
        }
    }
    if !score.is_finite() {
        return Err(Error::numeric("non-finite completion score"));
    }
    Ok(score)
}

/// Picks the highest-scoring candidate per question; ties go to the lowest index.
pub fn score_completions(
    params: &ModelParams,
    questions: &[CompletionQuestion],
    mode: ScoringMode,
    inference_scale: Option<f64>,
) -> Result<CompletionReport> {
    if mode == ScoringMode::LcuOnly && params.lcu.is_none() {
        return Err(Error::usage("LCU-only scoring needs a model with long-context units"));
    }
    let mut results = Vec::with_capacity(questions.len());
    let (mut answered, mut correct) = (0usize, 0usize);
    for q in questions {
        if q.candidates.is_empty() {
            return Err(Error::data(format!("question {} has no candidates", q.qid)));
        }
        let mut scores = Vec::with_capacity(q.candidates.len());
        for c in &q.candidates {
            if c.vocab_size != params.vocab_size() {
                return Err(Error::usage("candidate encoded with a different vocabulary"));
            }
            scores.push(score_candidate(params, c, mode, inference_scale)?);
        }
        let mut choice = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[choice] {
                choice = i;
            }
        }
        if let Some(a) = q.answer {
            answered += 1;
            correct += usize::from(a == choice);
        }
        results.push(CompletionResult {
            qid: q.qid.clone(),
            choice,
            scores,
        });
    }
    let accuracy = (answered > 0).then(|| correct as f64 / answered as f64);
    Ok(CompletionReport { results, accuracy })
}

/// Parses `qid<TAB>index<TAB>tokens` lines. Every question must list candidates
/// `0..choices` exactly once each, with non-empty token text. Questions keep their order of
/// first appearance.
pub fn parse_questions(text: &str, vocab: &Vocabulary, choices: usize) -> Result<Vec<CompletionQuestion>> {
    let mut order: Vec<String> = Vec::new();
    let mut slots: HashMap<String, Vec<Option<EncodedCorpus>>> = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (Some(qid), Some(idx), Some(tokens)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::data(format!("question line {} needs three TAB-separated fields", lineno + 1)));
        };
        let idx: usize = idx
            .trim()
            .parse()
            .map_err(|_| Error::data(format!("bad candidate index on question line {}", lineno + 1)))?;
        if idx >= choices {
            return Err(Error::data(format!(
                "candidate index {idx} out of range 0..{choices} on line {}",
                lineno + 1
            )));
        }
        let tokens = tokens.split_whitespace().collect::<Vec<_>>().join(" ");
        if tokens.is_empty() {
            return Err(Error::data(format!("empty candidate on question line {}", lineno + 1)));
        }
        let encoded = encode(tokens.as_str(), vocab)?;
        let entry = slots.entry(qid.to_string()).or_insert_with(|| {
            order.push(qid.to_string());
            vec![None; choices]
        });
        if entry[idx].replace(encoded).is_some() {
            return Err(Error::data(format!("question {qid} repeats candidate {idx}")));
        }
    }
    order
        .into_iter()
        .map(|qid| {
            let cands = slots.remove(&qid).unwrap();
            let present = cands.iter().filter(|c| c.is_some()).count();
            if present != choices {
                return Err(Error::data(format!(
                    "question {qid} has {present} candidates, expected {choices}"
                )));
            }
            Ok(CompletionQuestion {
                qid,
                candidates: cands.into_iter().map(Option::unwrap).collect(),
                answer: None,
            })
        })
        .collect()
}

/// Attaches answers from `qid<TAB>index` lines.
pub fn attach_answers(questions: &mut [CompletionQuestion], text: &str) -> Result<()> {
    let mut answers = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (qid, idx) = line
            .split_once('\t')
            .ok_or_else(|| Error::data(format!("answer line {} needs qid<TAB>index", lineno + 1)))?;
        let idx: usize = idx
            .trim()
            .parse()
            .map_err(|_| Error::data(format!("bad answer index on line {}", lineno + 1)))?;
        answers.insert(qid.to_string(), idx);
    }
    for q in questions.iter_mut() {
        if let Some(&a) = answers.get(&q.qid) {
            if a >= q.candidates.len() {
                return Err(Error::data(format!("answer {a} out of range for question {}", q.qid)));
            }
            q.answer = Some(a);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, TokenMode};
    use crate::model::{init_params, ArchSpec, InitSpec, LcuConfig, Nonlinearity};

    fn stream(ids: &[usize], v: usize) -> EncodedCorpus {
        EncodedCorpus::from_ids(ids.to_vec(), v).unwrap()
    }

    #[test]
    fn uniform_model_has_perplexity_v() {
        let mut p = init_params(&ArchSpec::irlm(), 4, 10, 3, &InitSpec::Standard).unwrap();
        p.decoder = Matrix::zeros(10, 4);
        let c = stream(&[1, 2, 3, 4, 5, 6, 7, 8, 9, 0, 1], 10);
        let r = evaluate(&p, &c, DropoutInference::Off).unwrap();
        assert_eq!(r.token_count, 10);
        assert!((r.perplexity - 10.0).abs() < 1e-12);
        assert!((r.bits_per_token - 3.3219280948873626).abs() < 1e-12);
        assert!((r.bits_per_token - r.perplexity.log2()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_model_has_perplexity_one() {
        let mut p = init_params(&ArchSpec::irlm(), 2, 2, 0, &InitSpec::Standard).unwrap();
        p.recurrent = Recurrent::Diagonal(vec![0.0, 0.0]);
        p.encoder = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        p.decoder = Matrix::from_vec(2, 2, vec![-1e3, 1e3, 1e3, -1e3]);
        let c = stream(&[0, 1, 0, 1, 0, 1], 2);
        let r = evaluate(&p, &c, DropoutInference::Off).unwrap();
        assert_eq!(r.perplexity, 1.0);
    }

    #[test]
    fn vocabulary_mismatch_is_usage_error() {
        let p = init_params(&ArchSpec::irlm(), 2, 3, 0, &InitSpec::Standard).unwrap();
        let c = stream(&[0, 1], 4);
        assert!(matches!(evaluate(&p, &c, DropoutInference::Off), Err(Error::Usage(_))));
    }

    #[test]
    fn chunking_and_zero_rate_adaptation_leave_scores_unchanged() {
        let p = init_params(&ArchSpec::rnn(Nonlinearity::LOGISTIC), 5, 7, 4, &InitSpec::Standard).unwrap();
        let ids: Vec<usize> = (0..60).map(|i| (i * i + 3) % 7).collect();
        let c = stream(&ids, 7);
        let whole = evaluate(&p, &c, DropoutInference::Off).unwrap();
        for chunk in [1, 7, 60] {
            let r = evaluate_chunked(&p, &c, DropoutInference::Off, chunk).unwrap();
            assert!((r.mean_nll - whole.mean_nll).abs() <= 1e-12);
        }
        let d = dynamic_evaluate(&p, &c, 0.0, 9, &LrScales::default(), DropoutInference::Off).unwrap();
        assert_eq!(d.mean_nll.to_bits(), whole.mean_nll.to_bits());
    }

    #[test]
    fn monte_carlo_with_no_dropout_matches_plain_evaluation() {
        let p = init_params(&ArchSpec::irlm(), 3, 5, 1, &InitSpec::Standard).unwrap();
        let c = stream(&[0, 1, 2, 3, 4, 0, 2], 5);
        let a = evaluate(&p, &c, DropoutInference::Off).unwrap();
        let b = evaluate(
            &p,
            &c,
            DropoutInference::MonteCarlo {
                drop_prob: 0.0,
                samples: 3,
                seed: 1,
            },
        )
        .unwrap();
        assert!((a.mean_nll - b.mean_nll).abs() < 1e-12);
    }

    #[test]
    fn timescale_examples() {
        assert!((timescale(0.9).0 - 9.4912215810299).abs() < 1e-9);
        assert_eq!(timescale(0.0), (0.0, false));
        assert!((timescale(-0.5).0 - 1.4426950408889634).abs() < 1e-12);
        assert_eq!(timescale(1.0), (TIMESCALE_CAP, true));
        assert!((timescale(0.9f64.powi(5)).0 - timescale(0.9).0 / 5.0).abs() < 1e-12);
        let mut prev = 0.0;
        for k in 1..1000 {
            let t = timescale(k as f64 / 1000.0).0;
            assert!(t > prev);
            prev = t;
        }
    }

    #[test]
    fn timescale_report_flags_and_histogram() {
        let mut p = init_params(&ArchSpec::irlm(), 3, 2, 0, &InitSpec::Standard).unwrap();
        p.recurrent = Recurrent::Diagonal(vec![-0.5, 0.0, 0.99]);
        let r = timescale_report(&p).unwrap();
        assert!(r.units[0].oscillatory && !r.units[1].oscillatory);
        assert_eq!(r.histogram.iter().sum::<usize>(), 3);
        assert_eq!(r.histogram[0], 1);
        assert_eq!(r.histogram[1], 1);
        assert!((r.max - timescale(0.99).0).abs() < 1e-12);
        let dense = init_params(&ArchSpec::rnn(Nonlinearity::LOGISTIC), 3, 2, 0, &InitSpec::Standard).unwrap();
        assert!(matches!(timescale_report(&dense), Err(Error::Usage(_))));
    }

    #[test]
    fn spectral_examples() {
        let s = matrix_spectral_stats(&Matrix::from_fn(4, 4, |i, j| if i == j { 0.5 } else { 0.0 }));
        assert!((s.radius - 0.5).abs() < 1e-12 && s.converged);
        assert_eq!(s.fraction_above_0_9, Some(0.0));
        let d = [0.95, 0.5, 0.1];
        let s = matrix_spectral_stats(&Matrix::from_fn(3, 3, |i, j| if i == j { d[i] } else { 0.0 }));
        assert!((s.radius - 0.95).abs() < 1e-6);
        assert!((s.fraction_above_0_9.unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn power_iteration_handles_rotations() {
        let (c, s) = (0.8 * 0.6f64.cos(), 0.8 * 0.6f64.sin());
        let m = Matrix::from_vec(3, 3, vec![c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 0.3]);
        let st = matrix_spectral_stats(&m);
        assert!(st.converged);
        assert!((st.radius - 0.8).abs() < 1e-8);
    }

    #[test]
    fn power_iteration_agrees_with_exact_spectrum() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let m = Matrix::from_fn(8, 8, |_, _| rng.random_range(-1.0..1.0));
        let st = matrix_spectral_stats(&m);
        assert!(st.converged, "{st:?}");
        assert!((st.radius - st.exact_radius.unwrap()).abs() < 1e-6, "{st:?}");
    }

    fn word_vocab() -> Vocabulary {
        build_vocab("the cat sat on the mat a dog", TokenMode::Word, 1).unwrap()
    }

    #[test]
    fn completion_parsing_and_tie_rule() {
        let vocab = word_vocab();
        let text = "q1\t1\tthe dog sat\nq1\t0\tthe cat sat\nq2\t0\ta cat\nq2\t1\ta dog\n";
        let mut qs = parse_questions(text, &vocab, 2).unwrap();
        assert_eq!(qs.len(), 2);
        assert_eq!(qs[0].qid, "q1");
        assert_eq!(qs[0].candidates[1].ids, encode("the dog sat", &vocab).unwrap().ids);
        attach_answers(&mut qs, "q1\t1\n").unwrap();
        assert_eq!(qs[0].answer, Some(1));
        assert!(matches!(parse_questions("q\t0\ta\n", &vocab, 5), Err(Error::Data(_))));
        assert!(matches!(parse_questions("q\t0\ta\nq\t0\ta\n", &vocab, 2), Err(Error::Data(_))));
        assert!(matches!(parse_questions("q\t0\t \n", &vocab, 1), Err(Error::Data(_))));

        let spec = ArchSpec {
            lcu: Some(LcuConfig {
                n_short: 2,
                n_long: 2,
                lower: 0.7,
                upper: 1.0,
            }),
            ..ArchSpec::irlm()
        };
        let mut p = init_params(&spec, 4, vocab.len(), 0, &InitSpec::Standard).unwrap();
        for i in 2..4 {
            for v in 0..vocab.len() {
                p.encoder.as_mut_slice()[i * vocab.len() + v] = 0.0;
            }
        }
        let rep = score_completions(&p, &qs, ScoringMode::LcuOnly, None).unwrap();
        assert!(rep.results.iter().all(|r| r.choice == 0 && r.scores.iter().all(|&s| s == 0.0)));
        assert_eq!(rep.accuracy, Some(0.0));
    }

    #[test]
    fn full_mode_prefers_more_probable_token() {
        let vocab = word_vocab();
        let mut p = init_params(&ArchSpec::irlm(), 1, vocab.len(), 0, &InitSpec::Standard).unwrap();
        p.recurrent = Recurrent::Diagonal(vec![0.0]);
        p.decoder = Matrix::zeros(vocab.len(), 1);
        p.encoder = Matrix::from_fn(1, vocab.len(), |_, _| 1.0);
        let (cat, dog) = (vocab.id("cat").unwrap(), vocab.id("dog").unwrap());
        p.decoder[(cat, 0)] = 0.9f64.ln();
        p.decoder[(dog, 0)] = 0.1f64.ln();
        let qs = parse_questions("q\t0\tthe dog\nq\t1\tthe cat\n", &vocab, 2).unwrap();
        let rep = score_completions(&p, &qs, ScoringMode::Full, None).unwrap();
        assert_eq!(rep.results[0].choice, 1);
        assert!(matches!(score_completions(&p, &qs, ScoringMode::LcuOnly, None), Err(Error::Usage(_))));
    }
}
