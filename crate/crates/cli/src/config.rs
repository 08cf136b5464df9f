//! Config file sections and their merge with command-line flags.

use std::path::Path;

use mdmf::baselines::DEFAULT_TOP_K;
use mdmf::pfs::Activation;
use mdmf::synth::{Dilution, SyntheticConfig};
use mdmf::TrainConfig;
use serde::Deserialize;

use crate::args::{BaselineFlags, Method, SynthArgs, ThresholdFlags, TrainFlags};
use crate::failure::{Failure, Outcome};

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub synth: SynthSettings,
    pub train: TrainConfig,
    pub detect: DetectSettings,
    pub baseline: BaselineSettings,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSettings {
    pub dim: usize,
    pub patches: usize,
    pub sigma_e: f64,
    pub rho: f64,
    pub mu_norm: f64,
    pub sign_mixing: f64,
    pub dilution_scale: Option<f64>,
    pub dilution_exponent: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub offset: u64,
    pub pool_to: Option<usize>,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            dim: 8,
            patches: 16,
            sigma_e: 1.0,
            rho: 0.3,
            mu_norm: 4.0,
            sign_mixing: 0.0,
            dilution_scale: None,
            dilution_exponent: 0.5,
            n_real: 2000,
            n_fake: 2000,
            offset: 0,
            pool_to: None,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectSettings {
    pub tau: Option<f64>,
    pub calibrate_alpha: Option<f64>,
    pub pool_to: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSettings {
    pub method: Option<Method>,
    pub theta: f64,
    pub top_k: usize,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        Self {
            method: None,
            theta: 0.5,
            top_k: DEFAULT_TOP_K,
        }
    }
}

pub fn load(path: Option<&Path>) -> Outcome<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::runtime(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

impl FileConfig {
    /// Applies the global seed to every section that carries one.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed.or(self.seed) {
            self.seed = Some(s);
            self.train.seed = s;
        }
        self
    }

    pub fn synth_config(&self, flags: &SynthArgs) -> Outcome<(SyntheticConfig, SynthSettings)> {
        let mut s = self.synth.clone();
        set(&mut s.dim, flags.dim);
        set(&mut s.patches, flags.patches);
        set(&mut s.sigma_e, flags.sigma_e);
        set(&mut s.rho, flags.rho);
        set(&mut s.mu_norm, flags.mu_norm);
        set(&mut s.sign_mixing, flags.sign_mixing);
        set(&mut s.dilution_exponent, flags.dilution_exponent);
        set(&mut s.n_real, flags.n_real);
        set(&mut s.n_fake, flags.n_fake);
        set(&mut s.offset, flags.offset);
        if flags.dilution_scale.is_some() {
            s.dilution_scale = flags.dilution_scale;
        }
        if flags.pool_to.is_some() {
            s.pool_to = flags.pool_to;
        }
        let mut cfg =
            SyntheticConfig::axis_defect(s.dim, s.patches, s.sigma_e, s.rho, s.mu_norm, self.seed.unwrap_or(0));
        cfg.sign_mixing = s.sign_mixing;
        cfg.dilution = s.dilution_scale.map(|scale| Dilution {
            scale,
            exponent: s.dilution_exponent,
        });
        cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
        Ok((cfg, s))
    }

    pub fn train_config(&self, flags: &TrainFlags) -> Outcome<TrainConfig> {
        let mut t = self.train.clone();
        set(&mut t.epochs, flags.epochs);
        set(&mut t.batch_size, flags.batch_size);
        set(&mut t.learning_rate, flags.learning_rate);
        set(&mut t.adam_beta1, flags.beta1);
        set(&mut t.adam_beta2, flags.beta2);
        set(&mut t.adam_eps, flags.adam_eps);
        set(&mut t.weight_decay, flags.weight_decay);
        set(&mut t.lambda, flags.lambda);
        set(&mut t.hidden_width, flags.hidden);
        set(&mut t.output_dim, flags.output_dim);
        set(&mut t.dropout_rate, flags.dropout);
        if flags.no_dropout {
            t.dropout_enabled = false;
        }
        t.validate().map_err(|e| Failure::usage(e.to_string()))?;
        Ok(t)
    }

    /// Fixed threshold or calibration factor; at most one may be set across
    /// the file and the flags, with flags taking precedence.
    pub fn threshold(&self, flags: &ThresholdFlags) -> Outcome<Threshold> {
        let (tau, alpha) = if flags.tau.is_some() || flags.calibrate_alpha.is_some() {
            (flags.tau, flags.calibrate_alpha)
        } else {
            (self.detect.tau, self.detect.calibrate_alpha)
        };
        match (tau, alpha) {
            (Some(_), Some(_)) => Err(Failure::usage("tau and calibrate_alpha are mutually exclusive")),
            (Some(t), None) if t.is_finite() => Ok(Threshold::Fixed(t)),
            (Some(t), None) => Err(Failure::usage(format!("tau must be finite, got {t}"))),
            (None, Some(a)) if a.is_finite() => Ok(Threshold::Calibrate(a)),
            (None, Some(a)) => Err(Failure::usage(format!("calibrate_alpha must be finite, got {a}"))),
            (None, None) => Ok(Threshold::Calibrate(mdmf::detect::DEFAULT_ALPHA)),
        }
    }

    pub fn pool_to(&self, flag: Option<usize>) -> Option<usize> {
        flag.or(self.detect.pool_to)
    }

    pub fn baseline(&self, method: Option<Method>, flags: &BaselineFlags) -> Outcome<BaselineChoice> {
        let method = method
            .or(self.baseline.method)
            .ok_or_else(|| Failure::usage("a baseline method is required"))?;
        let theta = flags.theta.unwrap_or(self.baseline.theta);
        if !(0.0..=1.0).contains(&theta) {
            return Err(Failure::usage(format!("theta {theta} outside [0, 1]")));
        }
        Ok(BaselineChoice {
            method,
            theta,
            top_k: flags.top_k.unwrap_or(self.baseline.top_k),
        })
    }

    pub fn require_gelu(&self, t: &TrainConfig) -> Outcome {
        if t.activation != Activation::Gelu {
            return Err(Failure::usage("checkpoints store GELU projections only"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Fixed(f64),
    Calibrate(f64),
}

#[derive(Debug, Clone, Copy)]
pub struct BaselineChoice {
    pub method: Method,
    pub theta: f64,
    pub top_k: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<FileConfig, toml::de::Error> {
        toml::from_str(text)
    }

    #[test]
    fn defaults_match_training_defaults() {
        let c = parse("").unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.train.weight_decay, 0.01);
        assert_eq!(c.train.batch_size, 256);
        assert_eq!(c.train.epochs, 25);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(parse("bogus = 1").is_err());
        assert!(parse("[train]\nlearning_rat = 0.1").is_err());
        assert!(parse("[synth]\ndim = \"eight\"").is_err());
    }

    #[test]
    fn flags_override_file() {
        let c = parse("[train]\nepochs = 3\nlearning_rate = 0.5").unwrap();
        let t = c
            .train_config(&TrainFlags {
                epochs: Some(7),
                ..TrainFlags::default()
            })
            .unwrap();
        assert_eq!((t.epochs, t.learning_rate), (7, 0.5));
    }

    #[test]
    fn threshold_exclusion() {
        let c = parse("[detect]\ntau = 0.2\ncalibrate_alpha = 2.0").unwrap();
        assert!(c.threshold(&ThresholdFlags::default()).is_err());
        let t = c
            .threshold(&ThresholdFlags {
                tau: Some(0.1),
                calibrate_alpha: None,
            })
            .unwrap();
        assert_eq!(t, Threshold::Fixed(0.1));
        assert_eq!(
            FileConfig::default().threshold(&ThresholdFlags::default()).unwrap(),
            Threshold::Calibrate(3.0)
        );
    }

    #[test]
    fn seed_reaches_training() {
        let c = parse("seed = 9").unwrap().with_seed(None);
        assert_eq!(c.train.seed, 9);
        let c = parse("seed = 9").unwrap().with_seed(Some(4));
        assert_eq!((c.seed, c.train.seed), (Some(4), 4));
    }
}
