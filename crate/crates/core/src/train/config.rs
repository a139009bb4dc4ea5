use serde::Serialize;

use crate::config::{parse_value, FlatConfig};
use crate::error::{Error, Result};
use crate::features::{Featurizer, DEFAULT_HASH_BITS};
use crate::lf::ContextParams;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub warmup_fraction: f64,
    pub patience: usize,
    pub w_ce: f64,
    pub w_gm: f64,
    pub w_kl: f64,
    pub w_qg: f64,
    pub guide_eps: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// L2 coefficient on the feature-model weights.
    pub l2: f64,
    pub hash_bits: u32,
    pub context_window: usize,
    pub context_radius: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-3,
            batch_size: 16,
            max_epochs: 5,
            warmup_fraction: 0.1,
            patience: 2,
            w_ce: 1.0,
            w_gm: 1.0,
            w_kl: 1.0,
            w_qg: 1.0,
            guide_eps: 1e-3,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            l2: 1e-5,
            hash_bits: DEFAULT_HASH_BITS,
            context_window: ContextParams::default().window,
            context_radius: ContextParams::default().radius,
        }
    }
}

impl TrainConfig {
    /// Supervised-only baseline: the generative, agreement and guide terms are off.
    pub fn supervised_only(mut self) -> Self {
        self.w_gm = 0.0;
        self.w_kl = 0.0;
        self.w_qg = 0.0;
        self
    }

    pub fn is_supervised_only(&self) -> bool {
        self.w_gm == 0.0 && self.w_kl == 0.0 && self.w_qg == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction {} outside [0, 1]", self.warmup_fraction));
        }
        for (k, w) in [("w_ce", self.w_ce), ("w_gm", self.w_gm), ("w_kl", self.w_kl), ("w_qg", self.w_qg)] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("{k} must be a finite non-negative number, got {w}"));
            }
        }
        if !(self.guide_eps > 0.0 && self.guide_eps < 0.5) {
            return bad(format!("guide_eps {} outside (0, 0.5)", self.guide_eps));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) || !(self.l2 >= 0.0) {
            return bad("adam_eps must be positive and l2 non-negative".into());
        }
        Featurizer::new(self.hash_bits)?;
        self.context()?;
        Ok(())
    }

    pub fn featurizer(&self) -> Result<Featurizer> {
        Featurizer::new(self.hash_bits)
    }

    pub fn context(&self) -> Result<ContextParams> {
        ContextParams::new(self.context_window, self.context_radius)
    }
}

impl FlatConfig for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "max_epochs" => self.max_epochs = parse_value(key, value)?,
            "warmup_fraction" => self.warmup_fraction = parse_value(key, value)?,
            "patience" => self.patience = parse_value(key, value)?,
            "w_ce" => self.w_ce = parse_value(key, value)?,
            "w_gm" => self.w_gm = parse_value(key, value)?,
            "w_kl" => self.w_kl = parse_value(key, value)?,
            "w_qg" => self.w_qg = parse_value(key, value)?,
            "guide_eps" => self.guide_eps = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse_value(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse_value(key, value)?,
            "adam_eps" => self.adam_eps = parse_value(key, value)?,
            "l2" => self.l2 = parse_value(key, value)?,
            "hash_bits" => self.hash_bits = parse_value(key, value)?,
            "context_window" => self.context_window = parse_value(key, value)?,
            "context_radius" => self.context_radius = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown training key `{key}`"))),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("warmup_fraction", self.warmup_fraction.to_string()),
            ("patience", self.patience.to_string()),
            ("w_ce", self.w_ce.to_string()),
            ("w_gm", self.w_gm.to_string()),
            ("w_kl", self.w_kl.to_string()),
            ("w_qg", self.w_qg.to_string()),
            ("guide_eps", self.guide_eps.to_string()),
            ("seed", self.seed.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("l2", self.l2.to_string()),
            ("hash_bits", self.hash_bits.to_string()),
            ("context_window", self.context_window.to_string()),
            ("context_radius", self.context_radius.to_string()),
        ]
    }
}
