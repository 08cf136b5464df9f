//! Mini-batch ascent of the test-power objective with AdamW.

use serde::{Deserialize, Serialize};

use super::{init_params, objective_and_gradients_refs, Activation, DropoutKey, PfsParams};
use crate::embeddings::EmbeddingDataset;
use crate::error::{invalid, shape, Error, Result};
use crate::kernel_mmd::DEFAULT_LAMBDA;
use crate::optim::{AdamConfig, AdamW};
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub seed: u64,
    pub dropout_enabled: bool,
    pub hidden_width: usize,
    pub output_dim: usize,
    pub dropout_rate: f64,
    pub activation: Activation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            batch_size: 256,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            lambda: DEFAULT_LAMBDA,
            seed: 0,
            dropout_enabled: true,
            hidden_width: 256,
            output_dim: 1,
            dropout_rate: 0.3,
            activation: Activation::Gelu,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(invalid("batch size must be at least 2"));
        }
        if self.hidden_width == 0 || self.output_dim == 0 {
            return Err(invalid("hidden width and output dimension must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(invalid(format!(
                "dropout rate {} must lie in [0, 1)",
                self.dropout_rate
            )));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(invalid("lambda must be positive"));
        }
        self.adam().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStep {
    pub step: usize,
    pub epoch: usize,
    pub j: f64,
    pub mmd2: f64,
    pub variance: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<TrainStep>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Mean objective over the steps of `epoch`.
    pub fn epoch_mean_j(&self, epoch: usize) -> Option<f64> {
        let js: Vec<f64> = self.steps.iter().filter(|s| s.epoch == epoch).map(|s| s.j).collect();
        (!js.is_empty()).then(|| js.iter().sum::<f64>() / js.len() as f64)
    }
}

/// Trains from a fresh initialization seeded by `cfg.seed`.
pub fn train(real: &EmbeddingDataset, fake: &EmbeddingDataset, cfg: &TrainConfig) -> Result<(PfsParams, TrainHistory)> {
    cfg.validate()?;
    let mut init =
        init_params(real.dim(), cfg.hidden_width, cfg.output_dim, cfg.seed)?.with_dropout(cfg.dropout_rate)?;
    init.activation = cfg.activation;
    train_from(init, real, fake, cfg)
}

/// Trains starting from `params`; the architecture fields of `cfg` are ignored.
pub fn train_from(
    mut params: PfsParams,
    real: &EmbeddingDataset,
    fake: &EmbeddingDataset,
    cfg: &TrainConfig,
) -> Result<(PfsParams, TrainHistory)> {
    cfg.validate()?;
    params.validate()?;
    if real.patches() != fake.patches() || real.dim() != fake.dim() {
        return Err(shape(format!(
            "real fields are {}x{}, fake fields {}x{}",
            real.patches(),
            real.dim(),
            fake.patches(),
            fake.dim()
        )));
    }
    if real.dim() != params.input_dim {
        return Err(shape(format!(
            "embedding dimension {} but projection expects {}",
            real.dim(),
            params.input_dim
        )));
    }
    let b = cfg.batch_size;
    if real.len() < b || fake.len() < b {
        return Err(Error::InsufficientData(format!(
            "batch size {b} needs at least {b} records per class, have {} real and {} fake",
            real.len(),
            fake.len()
        )));
    }

    let sizes = [params.w1.len(), params.b1.len(), params.w2.len(), params.b2.len(), 1];
    let mut opt = AdamW::new(cfg.adam(), &sizes)?;
    let decay = [true, true, true, true, false];
    let steps_per_epoch = real.len().min(fake.len()) / b;
    let use_dropout = cfg.dropout_enabled && params.dropout_rate > 0.0;
    let mut history = TrainHistory::default();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let perm_real = rng::permutation(real.len(), &mut rng::stream(cfg.seed, &[tag::SHUFFLE, epoch as u64, 0]));
        let perm_fake = rng::permutation(fake.len(), &mut rng::stream(cfg.seed, &[tag::SHUFFLE, epoch as u64, 1]));
        for s in 0..steps_per_epoch {
            let sx: Vec<_> = perm_real[s * b..(s + 1) * b]
                .iter()
                .map(|&i| &real.fields()[i])
                .collect();
            let sy: Vec<_> = perm_fake[s * b..(s + 1) * b]
                .iter()
                .map(|&i| &fake.fields()[i])
                .collect();
            let key = use_dropout.then_some(DropoutKey {
                seed: cfg.seed,
                epoch: epoch as u64,
                step: s as u64,
            });
            let (value, grads) = objective_and_gradients_refs(&sx, &sy, &params, cfg.lambda, key)?;
            if !value.j.is_finite() || grads.max_abs().is_nan() {
                return Err(Error::NonFinite("training objective"));
            }
            history.steps.push(TrainStep {
                step,
                epoch,
                j: value.j,
                mmd2: value.mmd2,
                variance: value.variance,
                gamma: value.gamma,
            });
            let ascent = grads.negated();
            let mut log_gamma = [params.log_gamma];
            {
                let [w1, b1, w2, b2] = params.tensors_mut();
                opt.step(
                    &mut [w1, b1, w2, b2, &mut log_gamma],
                    &[&ascent.w1, &ascent.b1, &ascent.w2, &ascent.b2, &[ascent.log_gamma]],
                    &decay,
                )?;
            }
            params.log_gamma = log_gamma[0];
            step += 1;
        }
    }
    params.validate()?;
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::Label;
    use crate::synth::{self, SyntheticConfig};

    fn data(n: usize) -> (EmbeddingDataset, EmbeddingDataset) {
        let cfg = SyntheticConfig::axis_defect(4, 4, 1.0, 0.5, 4.0, 5);
        (
            synth::real_dataset(&cfg, n, "r").unwrap(),
            synth::fake_dataset(&cfg.with_stream(&[1]), n, "f").unwrap(),
        )
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            learning_rate: 1e-2,
            hidden_width: 6,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn rejects_zero_epochs_and_small_pools() {
        let (r, f) = data(10);
        let cfg = TrainConfig {
            epochs: 0,
            ..small_cfg()
        };
        assert!(train(&r, &f, &cfg).is_err());
        let cfg = TrainConfig {
            batch_size: 16,
            ..small_cfg()
        };
        assert!(matches!(train(&r, &f, &cfg), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn zero_lr_no_decay_is_noop() {
        let (r, f) = data(16);
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 0.0,
            weight_decay: 0.0,
            ..small_cfg()
        };
        let mut init = init_params(4, 6, 1, cfg.seed)
            .unwrap()
            .with_dropout(cfg.dropout_rate)
            .unwrap();
        init.activation = cfg.activation;
        let (p, h) = train(&r, &f, &cfg).unwrap();
        assert_eq!(p, init);
        assert_eq!(h.len(), 2);
    }

    #[test]
    fn deterministic_history_and_params() {
        let (r, f) = data(24);
        let a = train(&r, &f, &small_cfg()).unwrap();
        let b = train(&r, &f, &small_cfg()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.len(), 6);
        assert!(a.1.steps.windows(2).all(|w| w[0].step < w[1].step));
    }

    #[test]
    fn unequal_pools_use_min_size() {
        let (r, _) = data(40);
        let (_, f) = data(17);
        let (_, h) = train(&r, &f, &small_cfg()).unwrap();
        assert_eq!(h.len(), 2 * 2);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let (r, _) = data(16);
        let other = EmbeddingDataset::uniform(
            4,
            3,
            (0..16)
                .map(|_| crate::PatchEmbeddingField::new(4, 3, vec![0.0; 12]).unwrap())
                .collect(),
            Label::Generated,
            "x",
        )
        .unwrap();
        assert!(train(&r, &other, &small_cfg()).is_err());
    }
}
