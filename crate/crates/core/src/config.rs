//! Training configuration: flat `key = value` files with command-line overrides.

use std::path::Path;

use crate::corpus::TokenMode;
use crate::error::{Error, Result};
use crate::model::{ArchSpec, Architecture, InitSpec, LcuConfig, Nonlinearity};
use crate::regopt::{AnnealRule, LrScales, OptimizerConfig, RegularizerConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct NceSettings {
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub arch: Architecture,
    pub token_mode: TokenMode,
    pub hidden: usize,
    pub nonlinearity: String,
    pub nonlinearity_a: f64,
    pub segment_length: usize,
    pub epochs: usize,
    pub streams: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_scales: LrScales,
    pub dropout_prob: f64,
    pub column_norm_target: Option<f64>,
    pub diagonal_epsilon: f64,
    pub anneal_rule: AnnealRule,
    pub decay_factor: f64,
    pub clip_threshold: Option<f64>,
    pub nce: Option<NceSettings>,
    pub lcu: Option<LcuConfig>,
    pub init_long_value: Option<f64>,
    pub l1_penalty: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: Architecture::Irlm,
            token_mode: TokenMode::Word,
            hidden: 512,
            nonlinearity: "identity".into(),
            nonlinearity_a: 1.0,
            segment_length: 20,
            epochs: 10,
            streams: 1,
            lr: 0.1,
            momentum: 0.99,
            lr_scales: LrScales::default(),
            dropout_prob: 0.5,
            column_norm_target: None,
            diagonal_epsilon: 1e-4,
            anneal_rule: AnnealRule::default(),
            decay_factor: 0.5,
            clip_threshold: None,
            nce: None,
            lcu: None,
            init_long_value: None,
            l1_penalty: 0.0,
            seed: 1,
        }
    }
}

/// Every accepted key, in the order used when echoing a configuration.
pub const KEYS: &[&str] = &[
    "arch",
    "token_mode",
    "hidden",
    "nonlinearity",
    "nonlinearity_a",
    "segment_length",
    "epochs",
    "streams",
    "lr",
    "momentum",
    "lr_scale_encoder",
    "lr_scale_decoder",
    "lr_scale_recurrent_dense",
    "lr_scale_recurrent_diagonal",
    "lr_scale_skip",
    "dropout_prob",
    "column_norm_target",
    "diagonal_epsilon",
    "anneal_rule",
    "anneal_threshold",
    "decay_factor",
    "clip_threshold",
    "nce_k",
    "lcu_short",
    "lcu_long",
    "lcu_lower",
    "lcu_upper",
    "init_long_value",
    "l1_penalty",
    "seed",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::usage(format!("invalid value {value:?} for {key}")))
}

fn parse_opt(key: &str, value: &str) -> Result<Option<f64>> {
    if value == "none" {
        Ok(None)
    } else {
        parse_num(key, value).map(Some)
    }
}

fn fmt_opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

impl TrainConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::usage(format!("config line {}: expected key = value", lineno + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides on top of this configuration.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::usage(format!("override {o:?} must look like key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let lcu = self.lcu.unwrap_or(LcuConfig {
            n_short: 0,
            n_long: 0,
            lower: 0.7,
            upper: 1.0,
        });
        match key {
            "arch" => self.arch = value.parse()?,
            "token_mode" => self.token_mode = value.parse()?,
            "hidden" => self.hidden = parse_num(key, value)?,
            "nonlinearity" => self.nonlinearity = value.to_string(),
            "nonlinearity_a" => self.nonlinearity_a = parse_num(key, value)?,
            "segment_length" => self.segment_length = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "streams" => self.streams = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "momentum" => self.momentum = parse_num(key, value)?,
            "lr_scale_encoder" => self.lr_scales.encoder = parse_num(key, value)?,
            "lr_scale_decoder" => self.lr_scales.decoder = parse_num(key, value)?,
            "lr_scale_recurrent_dense" => self.lr_scales.recurrent_dense = parse_num(key, value)?,
            "lr_scale_recurrent_diagonal" => self.lr_scales.recurrent_diagonal = parse_num(key, value)?,
            "lr_scale_skip" => self.lr_scales.skip = parse_num(key, value)?,
            "dropout_prob" => self.dropout_prob = parse_num(key, value)?,
            "column_norm_target" => self.column_norm_target = parse_opt(key, value)?,
            "diagonal_epsilon" => self.diagonal_epsilon = parse_num(key, value)?,
            "anneal_rule" => {
                self.anneal_rule = match value {
                    "plateau" => match self.anneal_rule {
                        AnnealRule::Plateau { threshold } => AnnealRule::Plateau { threshold },
                        AnnealRule::DecayOnImprovement => AnnealRule::default(),
                    },
                    "on_improvement" => AnnealRule::DecayOnImprovement,
                    _ => return Err(Error::usage(format!("unknown anneal rule {value:?}"))),
                }
            }
            "anneal_threshold" => {
                let threshold = parse_num(key, value)?;
                if let AnnealRule::Plateau { .. } = self.anneal_rule {
                    self.anneal_rule = AnnealRule::Plateau { threshold };
                }
            }
            "decay_factor" => self.decay_factor = parse_num(key, value)?,
            "clip_threshold" => self.clip_threshold = parse_opt(key, value)?,
            "nce_k" => {
                self.nce = if value == "none" {
                    None
                } else {
                    Some(NceSettings {
                        k: parse_num(key, value)?,
                    })
                }
            }
            "lcu_short" | "lcu_long" | "lcu_lower" | "lcu_upper" if value == "none" => self.lcu = None,
            "lcu_short" => self.lcu = Some(LcuConfig { n_short: parse_num(key, value)?, ..lcu }),
            "lcu_long" => self.lcu = Some(LcuConfig { n_long: parse_num(key, value)?, ..lcu }),
            "lcu_lower" => self.lcu = Some(LcuConfig { lower: parse_num(key, value)?, ..lcu }),
            "lcu_upper" => self.lcu = Some(LcuConfig { upper: parse_num(key, value)?, ..lcu }),
            "init_long_value" => self.init_long_value = parse_opt(key, value)?,
            "l1_penalty" => self.l1_penalty = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            _ => return Err(Error::usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn nonlinearity(&self) -> Result<Nonlinearity> {
        Nonlinearity::parse(&self.nonlinearity, self.nonlinearity_a)
    }

    pub fn arch_spec(&self) -> Result<ArchSpec> {
        Ok(ArchSpec {
            arch: self.arch,
            nonlinearity: self.nonlinearity()?,
            lcu: self.lcu,
        })
    }

    pub fn init_spec(&self) -> InitSpec {
        match self.init_long_value {
            Some(value) => InitSpec::LongContext { value },
            None => InitSpec::Standard,
        }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            lr: self.lr,
            momentum: self.momentum,
            lr_scales: self.lr_scales,
            clip_threshold: self.clip_threshold,
            decay_factor: self.decay_factor,
            anneal_rule: self.anneal_rule,
            l1: self.l1_penalty,
        }
    }

    pub fn regularizer(&self) -> RegularizerConfig {
        RegularizerConfig {
            dropout_prob: self.dropout_prob,
            column_norm_target: self.column_norm_target,
            diagonal_epsilon: self.diagonal_epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::usage("hidden must be positive"));
        }
        if self.segment_length < 2 {
            return Err(Error::usage("segment_length must be at least 2"));
        }
        if self.streams == 0 {
            return Err(Error::usage("streams must be positive"));
        }
        let spec = self.arch_spec()?;
        if self.arch == Architecture::Irlm && spec.nonlinearity != Nonlinearity::IDENTITY {
            return Err(Error::usage("the IRLM uses the identity nonlinearity"));
        }
        if self.arch == Architecture::SkipRnn && self.token_mode != TokenMode::Character {
            return Err(Error::usage("skiprnn requires token_mode = char"));
        }
        if let Some(l) = self.lcu {
            if !matches!(self.arch, Architecture::Irlm | Architecture::BlockRnn) {
                return Err(Error::usage("long-context units require arch irlm or block_rnn"));
            }
            if l.n_short + l.n_long != self.hidden {
                return Err(Error::usage("lcu_short + lcu_long must equal hidden"));
            }
            if !(l.lower < l.upper) || !(l.lower > -1.0) || !(l.upper <= 1.0) {
                return Err(Error::usage("LCU bounds must satisfy -1 < lower < upper <= 1"));
            }
            if self.arch == Architecture::Irlm && l.lower >= 1.0 - self.diagonal_epsilon {
                return Err(Error::usage("lcu_lower must lie below 1 - diagonal_epsilon"));
            }
        } else if self.arch == Architecture::BlockRnn {
            return Err(Error::usage("block_rnn needs lcu_short and lcu_long for its block split"));
        }
        if self.init_long_value.is_some() && self.lcu.is_none() {
            return Err(Error::usage("init_long_value needs long-context units"));
        }
        if let Some(n) = &self.nce {
            if n.k == 0 {
                return Err(Error::usage("nce_k must be positive"));
            }
        }
        self.optimizer().validate()?;
        self.regularizer().validate()
    }

    /// The effective configuration as `(key, value)` pairs; parsing them back reproduces it.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let (threshold, rule) = match self.anneal_rule {
            AnnealRule::Plateau { threshold } => (threshold, "plateau"),
            AnnealRule::DecayOnImprovement => (0.01, "on_improvement"),
        };
        let lcu = self.lcu;
        let values: Vec<String> = vec![
            self.arch.name().into(),
            self.token_mode.name().into(),
            self.hidden.to_string(),
            self.nonlinearity.clone(),
            self.nonlinearity_a.to_string(),
            self.segment_length.to_string(),
            self.epochs.to_string(),
            self.streams.to_string(),
            self.lr.to_string(),
            self.momentum.to_string(),
            self.lr_scales.encoder.to_string(),
            self.lr_scales.decoder.to_string(),
            self.lr_scales.recurrent_dense.to_string(),
            self.lr_scales.recurrent_diagonal.to_string(),
            self.lr_scales.skip.to_string(),
            self.dropout_prob.to_string(),
            fmt_opt(self.column_norm_target),
            self.diagonal_epsilon.to_string(),
            rule.into(),
            threshold.to_string(),
            self.decay_factor.to_string(),
            fmt_opt(self.clip_threshold),
            fmt_opt(self.nce.as_ref().map(|n| n.k)),
            fmt_opt(lcu.map(|l| l.n_short)),
            fmt_opt(lcu.map(|l| l.n_long)),
            fmt_opt(lcu.map(|l| l.lower)),
            fmt_opt(lcu.map(|l| l.upper)),
            fmt_opt(self.init_long_value),
            self.l1_penalty.to_string(),
            self.seed.to_string(),
        ];
        KEYS.iter().map(|k| k.to_string()).zip(values).collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn lcu_config_round_trips() {
        let text = "arch = irlm\nhidden = 8\nlcu_short = 6\nlcu_long = 2\nlcu_lower = 0.7\nlcu_upper = 0.9999\n\
                    anneal_rule = on_improvement\nnce_k = 25 # noise samples\n";
        let cfg = TrainConfig::parse(text).unwrap();
        assert_eq!(cfg.lcu.unwrap().n_long, 2);
        assert_eq!(cfg.anneal_rule, AnnealRule::DecayOnImprovement);
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_usage_errors() {
        assert!(matches!(TrainConfig::parse("hiden = 5"), Err(Error::Usage(_))));
        assert!(matches!(TrainConfig::parse("hidden = five"), Err(Error::Usage(_))));
        assert!(matches!(TrainConfig::parse("momentum = 1"), Err(Error::Usage(_))));
        assert!(matches!(TrainConfig::parse("arch = skiprnn\nnonlinearity = logistic"), Err(Error::Usage(_))));
        assert!(matches!(
            TrainConfig::parse("arch = rnn\nnonlinearity = logistic\nhidden = 4\nlcu_short = 2\nlcu_long = 2"),
            Err(Error::Usage(_))
        ));
        assert!(matches!(TrainConfig::parse("arch = irlm\nnonlinearity = logistic"), Err(Error::Usage(_))));
    }

    #[test]
    fn overrides_take_precedence() {
        let mut cfg = TrainConfig::parse("hidden = 16\nseed = 3").unwrap();
        cfg.apply_overrides(&["hidden=32".into(), "seed = 9".into()]).unwrap();
        assert_eq!((cfg.hidden, cfg.seed), (32, 9));
        assert!(cfg.apply_overrides(&["hidden".into()]).is_err());
    }
}
