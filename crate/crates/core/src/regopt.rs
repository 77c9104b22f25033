//! Momentum SGD with per-group learning rates, clipping, dropout masks, column normalization,
//! learning-rate annealing and constraint projection.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grad::Gradients;
use crate::linalg::Matrix;
use crate::model::{block_masked, ModelParams, Recurrent, TensorId};

/// Parameter groups with separate learning-rate multipliers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Decoder,
    RecurrentDense,
    RecurrentDiagonal,
    Skip,
}

impl ParamGroup {
    pub fn of(params: &ModelParams, tensor: TensorId) -> ParamGroup {
        match tensor {
            TensorId::Encoder => ParamGroup::Encoder,
            TensorId::Decoder => ParamGroup::Decoder,
            TensorId::Skip => ParamGroup::Skip,
            TensorId::Recurrent => match params.recurrent {
                Recurrent::Diagonal(_) => ParamGroup::RecurrentDiagonal,
                _ => ParamGroup::RecurrentDense,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrScales {
    pub encoder: f64,
    pub decoder: f64,
    pub recurrent_dense: f64,
    pub recurrent_diagonal: f64,
    pub skip: f64,
}

impl Default for LrScales {
    fn default() -> Self {
        LrScales {
            encoder: 1.0,
            decoder: 1.0,
            recurrent_dense: 1.0,
            recurrent_diagonal: 1e-3,
            skip: 1.0,
        }
    }
}

impl LrScales {
    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Decoder => self.decoder,
            ParamGroup::RecurrentDense => self.recurrent_dense,
            ParamGroup::RecurrentDiagonal => self.recurrent_diagonal,
            ParamGroup::Skip => self.skip,
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [
            self.encoder,
            self.decoder,
            self.recurrent_dense,
            self.recurrent_diagonal,
            self.skip,
        ];
        if all.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::usage("learning-rate scales must be positive"));
        }
        Ok(())
    }
}

/// When to multiply the learning rate by the decay factor after an epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AnnealRule {
    /// Decay when the relative validation improvement over the best so far is below `threshold`.
    Plateau { threshold: f64 },
    /// Decay on every epoch whose validation cost is lower than the best so far.
    DecayOnImprovement,
}

impl Default for AnnealRule {
    fn default() -> Self {
        AnnealRule::Plateau { threshold: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub lr_scales: LrScales,
    pub clip_threshold: Option<f64>,
    pub decay_factor: f64,
    pub anneal_rule: AnnealRule,
    /// Weight of an L1 penalty on all parameters (0 disables it).
    pub l1: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.1,
            momentum: 0.99,
            lr_scales: LrScales::default(),
            clip_threshold: None,
            decay_factor: 0.5,
            anneal_rule: AnnealRule::default(),
            l1: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::usage("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::usage("momentum must lie in [0, 1)"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::usage("decay factor must lie in (0, 1]"));
        }
        if self.clip_threshold.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::usage("clip threshold must be positive"));
        }
        if !(self.l1 >= 0.0) {
            return Err(Error::usage("L1 weight must be non-negative"));
        }
        if let AnnealRule::Plateau { threshold } = self.anneal_rule {
            if !(threshold >= 0.0) {
                return Err(Error::usage("plateau threshold must be non-negative"));
            }
        }
        self.lr_scales.validate()
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub velocity: Gradients,
    pub base_lr: f64,
    pub lr_scales: LrScales,
    pub momentum: f64,
    pub decay_factor: f64,
    pub best_valid_cost: Option<f64>,
    pub anneal_rule: AnnealRule,
    pub clip_threshold: Option<f64>,
    pub l1: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, cfg: &OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(OptimizerState {
            velocity: Gradients::zeros_like(params),
            base_lr: cfg.lr,
            lr_scales: cfg.lr_scales,
            momentum: cfg.momentum,
            decay_factor: cfg.decay_factor,
            best_valid_cost: None,
            anneal_rule: cfg.anneal_rule,
            clip_threshold: cfg.clip_threshold,
            l1: cfg.l1,
        })
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        self.base_lr * self.lr_scales.get(group)
    }
}

#[derive(Clone, Debug)]
pub struct RegularizerConfig {
    /// Probability of dropping each decoder input unit; 0 disables masking.
    pub dropout_prob: f64,
    pub column_norm_target: Option<f64>,
    pub diagonal_epsilon: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            dropout_prob: 0.0,
            column_norm_target: None,
            diagonal_epsilon: 1e-4,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::usage("dropout probability must lie in [0, 1)"));
        }
        if self.column_norm_target.is_some_and(|t| !(t > 0.0) || !t.is_finite()) {
            return Err(Error::usage("column norm target must be positive"));
        }
        if !(self.diagonal_epsilon > 0.0 && self.diagonal_epsilon < 1.0) {
            return Err(Error::usage("diagonal epsilon must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// A `{0, 1}` mask of length `h`, each entry zero with probability `prob`.
pub fn sample_dropout_mask<R: Rng + ?Sized>(h: usize, prob: f64, rng: &mut R) -> Vec<f64> {
    assert!((0.0..1.0).contains(&prob), "dropout probability must lie in [0, 1)");
    (0..h)
        .map(|_| if rng.random_bool(prob) { 0.0 } else { 1.0 })
        .collect()
}

/// Rescales `grads` to norm `threshold` if its global norm exceeds it. Returns the norm
/// before clipping.
pub fn clip_gradients(grads: &mut Gradients, threshold: f64) -> f64 {
    let norm = grads.norm_sq().sqrt();
    if norm > threshold {
        grads.scale(threshold / norm);
    }
    norm
}

/// One heavy-momentum step: optional L1 subgradient, optional clipping, then per group
/// `v ← μ v − lr_group · g`, `θ ← θ + v`, then [`project_constraints`].
pub fn momentum_update(
    params: &mut ModelParams,
    grads: &Gradients,
    opt: &mut OptimizerState,
    reg: &RegularizerConfig,
) -> Result<()> {
    let clip_factor = match opt.clip_threshold {
        Some(c) => {
            let norm = if opt.l1 > 0.0 {
                let mut g = grads.clone();
                add_l1_subgradient(&mut g, params, opt.l1);
                g.norm_sq().sqrt()
            } else {
                grads.norm_sq().sqrt()
            };
            if norm > c {
                c / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    let momentum = opt.momentum;
    let l1 = opt.l1;
    for id in TensorId::ALL {
        let lr = opt.lr(ParamGroup::of(params, id));
        let (Some(gt), Some(vt), Some(pt)) = (grads.tensor(id), opt.velocity.tensor_mut(id), params.tensor_mut(id))
        else {
            continue;
        };
        for ((v, p), &g) in vt.iter_mut().zip(pt.iter_mut()).zip(gt) {
            let g = if l1 > 0.0 && *p != 0.0 { g + l1 * p.signum() } else { g };
            *v = momentum * *v - lr * (clip_factor * g);
            *p += *v;
        }
    }
    project_constraints(params, reg);
    if !params.is_finite() {
        return Err(Error::numeric("parameters became non-finite after an update"));
    }
    Ok(())
}

fn add_l1_subgradient(g: &mut Gradients, params: &ModelParams, l1: f64) {
    for id in TensorId::ALL {
        if let (Some(gt), Some(pt)) = (g.tensor_mut(id), params.tensor(id)) {
            for (gi, &pi) in gt.iter_mut().zip(pt) {
                if pi != 0.0 {
                    *gi += l1 * pi.signum();
                }
            }
        }
    }
}

/// Which vectors of a matrix to normalize.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormAxis {
    Rows,
    Columns,
}

/// Rescales each row or column of `m` to L2 norm `target`; all-zero vectors are left alone
/// (with a warning). Returns the number of zero vectors.
pub fn column_normalize(m: &mut Matrix, target: f64, axis: NormAxis) -> usize {
    let (rows, cols) = m.shape();
    let n = if axis == NormAxis::Rows { rows } else { cols };
    let mut sq = vec![0.0; n];
    for i in 0..rows {
        for (j, &v) in m.row(i).iter().enumerate() {
            sq[if axis == NormAxis::Rows { i } else { j }] += v * v;
        }
    }
    let factors: Vec<f64> = sq
        .iter()
        .map(|&s| if s > 0.0 { target / s.sqrt() } else { 1.0 })
        .collect();
    for i in 0..rows {
        for (j, v) in m.row_mut(i).iter_mut().enumerate() {
            *v *= factors[if axis == NormAxis::Rows { i } else { j }];
        }
    }
    let zeros = sq.iter().filter(|&&s| s == 0.0).count();
    if zeros > 0 {
        log::warn!("column normalization left {zeros} all-zero weight vector(s) unchanged");
    }
    zeros
}

/// Fixes the norm of every hidden unit's incoming weights (row of `W`) and outgoing weights
/// (column of `Z`).
pub fn normalize_hidden_units(params: &mut ModelParams, target: f64) {
    column_normalize(&mut params.encoder, target, NormAxis::Rows);
    column_normalize(&mut params.decoder, target, NormAxis::Columns);
}

/// Called once per epoch; returns whether the learning rate was decayed.
pub fn anneal_step(opt: &mut OptimizerState, valid_cost: f64) -> bool {
    let Some(best) = opt.best_valid_cost else {
        opt.best_valid_cost = Some(valid_cost);
        return false;
    };
    let decay = match opt.anneal_rule {
        AnnealRule::Plateau { threshold } => (best - valid_cost) / best < threshold,
        AnnealRule::DecayOnImprovement => valid_cost < best,
    };
    if decay {
        opt.base_lr *= opt.decay_factor;
    }
    opt.best_valid_cost = Some(best.min(valid_cost));
    decay
}

/// Clamps diagonal recurrent weights to `[−1+ε, 1−ε]`, long-context units to
/// `[lower, min(upper, 1−ε)]`, zeroes masked block entries, and applies column normalization
/// when enabled.
pub fn project_constraints(params: &mut ModelParams, reg: &RegularizerConfig) {
    let eps = reg.diagonal_epsilon;
    let lcu = params.lcu;
    match &mut params.recurrent {
        Recurrent::Diagonal(r) => {
            for (i, ri) in r.iter_mut().enumerate() {
                let (lo, hi) = match lcu {
                    Some(c) if c.is_long(i) => (c.lower, c.upper.min(1.0 - eps)),
                    _ => (-1.0 + eps, 1.0 - eps),
                };
                *ri = ri.clamp(lo, hi);
            }
        }
        Recurrent::Block { weights, split } => {
            let h = weights.rows();
            for i in 0..h {
                let row = weights.row_mut(i);
                for (j, w) in row.iter_mut().enumerate() {
                    if block_masked(*split, i, j) {
                        *w = 0.0;
                    }
                }
            }
        }
        Recurrent::Dense(_) => {}
    }
    if let Some(target) = reg.column_norm_target {
        normalize_hidden_units(params, target);
    }
}

/// Number of tokens a momentum average effectively spans: `segment_tokens / (1 − μ)`.
pub fn effective_horizon(segment_tokens: usize, momentum: f64) -> f64 {
    segment_tokens as f64 / (1.0 - momentum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ArchSpec, InitSpec, LcuConfig, Nonlinearity};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_model(v: f64) -> ModelParams {
        let mut p = init_params(&ArchSpec::irlm(), 1, 1, 0, &InitSpec::Standard).unwrap();
        p.encoder[(0, 0)] = v;
        p.decoder[(0, 0)] = v;
        p.recurrent = Recurrent::Diagonal(vec![0.5]);
        p
    }

    fn unit_grad(p: &ModelParams) -> Gradients {
        let mut g = Gradients::zeros_like(p);
        g.encoder[(0, 0)] = 1.0;
        g
    }

    #[test]
    fn dropout_mask_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_dropout_mask(50, 0.0, &mut rng).iter().all(|&m| m == 1.0));
        let m = sample_dropout_mask(100_000, 0.5, &mut rng);
        let kept = m.iter().sum::<f64>() / m.len() as f64;
        assert!((0.49..=0.51).contains(&kept), "{kept}");
        assert!(m.iter().all(|&x| x == 0.0 || x == 1.0));
        let a = sample_dropout_mask(32, 0.3, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_dropout_mask(32, 0.3, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn plain_sgd_without_momentum() {
        let mut p = scalar_model(1.0);
        let cfg = OptimizerConfig {
            lr: 0.1,
            momentum: 0.0,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(&p, &cfg).unwrap();
        let g = unit_grad(&p);
        momentum_update(&mut p, &g, &mut opt, &RegularizerConfig::default()).unwrap();
        assert!((p.encoder[(0, 0)] - 0.9).abs() < 1e-15);
        assert_eq!(p.decoder[(0, 0)], 1.0);
    }

    #[test]
    fn two_momentum_steps() {
        let mut p = scalar_model(1.0);
        let cfg = OptimizerConfig {
            lr: 0.1,
            momentum: 0.9,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(&p, &cfg).unwrap();
        let g = unit_grad(&p);
        let reg = RegularizerConfig::default();
        momentum_update(&mut p, &g, &mut opt, &reg).unwrap();
        assert!((opt.velocity.encoder[(0, 0)] + 0.1).abs() < 1e-15);
        assert!((p.encoder[(0, 0)] - 0.9).abs() < 1e-15);
        momentum_update(&mut p, &g, &mut opt, &reg).unwrap();
        assert!((opt.velocity.encoder[(0, 0)] + 0.19).abs() < 1e-15);
    }

    #[test]
    fn diagonal_group_uses_smaller_rate() {
        let mut p = scalar_model(1.0);
        let cfg = OptimizerConfig {
            lr: 0.1,
            momentum: 0.0,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(&p, &cfg).unwrap();
        let mut g = Gradients::zeros_like(&p);
        g.recurrent = Recurrent::Diagonal(vec![1.0]);
        momentum_update(&mut p, &g, &mut opt, &RegularizerConfig::default()).unwrap();
        let Recurrent::Diagonal(r) = &p.recurrent else { unreachable!() };
        assert!((r[0] - (0.5 - 1e-4)).abs() < 1e-15);
    }

    #[test]
    fn horizon_of_heavy_momentum() {
        assert!((effective_horizon(100, 0.9999) - 1e6).abs() < 1e-3);
    }

    #[test]
    fn momentum_must_be_below_one() {
        let p = scalar_model(1.0);
        let cfg = OptimizerConfig {
            momentum: 1.0,
            ..Default::default()
        };
        assert!(matches!(OptimizerState::new(&p, &cfg), Err(Error::Usage(_))));
    }

    #[test]
    fn normalization_examples() {
        let mut m = Matrix::from_vec(2, 1, vec![3.0, 4.0]);
        column_normalize(&mut m, 15.0, NormAxis::Columns);
        assert_eq!(m.as_slice(), &[9.0, 12.0]);
        column_normalize(&mut m, 15.0, NormAxis::Columns);
        assert_eq!(m.as_slice(), &[9.0, 12.0]);
        let mut z = Matrix::from_vec(2, 2, vec![0.0, 3.0, 0.0, 4.0]);
        assert_eq!(column_normalize(&mut z, 15.0, NormAxis::Columns), 1);
        assert_eq!(z.as_slice(), &[0.0, 9.0, 0.0, 12.0]);
        let mut w = Matrix::from_vec(1, 2, vec![3.0, 4.0]);
        column_normalize(&mut w, 15.0, NormAxis::Rows);
        assert_eq!(w.as_slice(), &[9.0, 12.0]);
    }

    #[test]
    fn anneal_examples() {
        let p = scalar_model(1.0);
        let mut opt = OptimizerState::new(&p, &OptimizerConfig::default()).unwrap();
        let lr = opt.base_lr;
        assert!(!anneal_step(&mut opt, 5.0));
        assert_eq!(opt.base_lr, lr);
        assert!(anneal_step(&mut opt, 4.99));
        assert_eq!(opt.base_lr, lr * 0.5);

        let mut opt = OptimizerState::new(&p, &OptimizerConfig::default()).unwrap();
        anneal_step(&mut opt, 5.0);
        assert!(!anneal_step(&mut opt, 4.0));
        assert_eq!(opt.best_valid_cost, Some(4.0));

        let literal = OptimizerConfig {
            anneal_rule: AnnealRule::DecayOnImprovement,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(&p, &literal).unwrap();
        anneal_step(&mut opt, 5.0);
        assert!(anneal_step(&mut opt, 4.8));
        assert_eq!(opt.base_lr, lr * 0.5);
        assert!(!anneal_step(&mut opt, 4.9));
    }

    #[test]
    fn projection_examples() {
        let reg = RegularizerConfig::default();
        let mut p = scalar_model(1.0);
        p.recurrent = Recurrent::Diagonal(vec![1.2]);
        project_constraints(&mut p, &reg);
        assert_eq!(p.recurrent.as_slice(), &[0.9999]);

        let lcu = LcuConfig {
            n_short: 1,
            n_long: 1,
            lower: 0.7,
            upper: 1.0,
        };
        let spec = ArchSpec {
            lcu: Some(lcu),
            ..ArchSpec::irlm()
        };
        let mut p = init_params(&spec, 2, 3, 0, &InitSpec::Standard).unwrap();
        p.recurrent = Recurrent::Diagonal(vec![0.65, 0.65]);
        project_constraints(&mut p, &reg);
        assert_eq!(p.recurrent.as_slice(), &[0.65, 0.7]);

        let spec = ArchSpec {
            arch: crate::model::Architecture::BlockRnn,
            nonlinearity: Nonlinearity::LOGISTIC,
            lcu: Some(lcu),
        };
        let mut p = init_params(&spec, 2, 3, 0, &InitSpec::Standard).unwrap();
        p.recurrent.as_mut_slice()[1] = 0.01;
        project_constraints(&mut p, &reg);
        assert_eq!(p.recurrent.as_slice()[1], 0.0);
    }

    #[test]
    fn column_norm_projection_after_update() {
        let mut p = init_params(&ArchSpec::irlm(), 3, 4, 2, &InitSpec::Standard).unwrap();
        let reg = RegularizerConfig {
            column_norm_target: Some(15.0),
            ..Default::default()
        };
        let mut opt = OptimizerState::new(&p, &OptimizerConfig::default()).unwrap();
        let g = Gradients::from_params(&p);
        momentum_update(&mut p, &g, &mut opt, &reg).unwrap();
        for i in 0..3 {
            let w: f64 = p.encoder.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            let z: f64 = p.decoder.column(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((w - 15.0).abs() < 1e-9 && (z - 15.0).abs() < 1e-9);
        }
    }
}
