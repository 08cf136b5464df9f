//! Patch-classifier baselines: a linear logistic head on individual patch
//! embeddings, aggregated per image by hard voting or logit pooling.

use serde::{Deserialize, Serialize};

use crate::embeddings::{EmbeddingDataset, PatchEmbeddingField};
use crate::error::{invalid, shape, Error, Result};
use crate::optim::AdamW;
use crate::par;
use crate::pfs::TrainConfig;
use crate::rng::{self, tag};

/// Voting thresholds evaluated for the fake-patch ratio.
pub const COARSE_THETA_GRID: [f64; 8] = [0.03, 0.05, 0.08, 0.10, 0.15, 0.20, 0.25, 0.30];

/// Default `t` for top-k pooling.
pub const DEFAULT_TOP_K: usize = 5;

/// `0.01, 0.02, ..., 0.99`.
pub fn dense_theta_grid() -> Vec<f64> {
    (1..100).map(|i| i as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchClassifier {
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl PatchClassifier {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weight: vec![0.0; dim],
            bias: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.len()
    }

    pub fn logit(&self, e: &[f64]) -> f64 {
        self.weight.iter().zip(e).map(|(w, x)| w * x).sum::<f64>() + self.bias
    }

    fn check(&self, field: &PatchEmbeddingField) -> Result<()> {
        if field.dim() != self.dim() {
            return Err(shape(format!(
                "classifier expects dimension {}, field has {}",
                self.dim(),
                field.dim()
            )));
        }
        Ok(())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn patch_logits(field: &PatchEmbeddingField, clf: &PatchClassifier) -> Result<Vec<f64>> {
    clf.check(field)?;
    Ok(field.iter_patches().map(|e| clf.logit(e)).collect())
}

/// Mean patch BCE over `fields` (every patch inherits its image label) and its
/// gradient `(d weight, d bias)`.
pub fn bce_loss_and_grad(
    clf: &PatchClassifier,
    fields: &[(&PatchEmbeddingField, bool)],
) -> Result<(f64, Vec<f64>, f64)> {
    let per_field = par::map_slice(fields, |&(f, positive)| -> Result<(f64, Vec<f64>, f64, usize)> {
        clf.check(f)?;
        let y = if positive { 1.0 } else { 0.0 };
        let mut loss = 0.0;
        let mut gw = vec![0.0; clf.dim()];
        let mut gb = 0.0;
        for e in f.iter_patches() {
            let z = clf.logit(e);
            loss += softplus(z) - y * z;
            let r = sigmoid(z) - y;
            gw.iter_mut().zip(e).for_each(|(g, x)| *g += r * x);
            gb += r;
        }
        Ok((loss, gw, gb, f.patches()))
    });
    let mut loss = 0.0;
    let mut gw = vec![0.0; clf.dim()];
    let mut gb = 0.0;
    let mut count = 0usize;
    for item in per_field {
        let (l, w, b, n) = item?;
        loss += l;
        gw.iter_mut().zip(&w).for_each(|(g, x)| *g += x);
        gb += b;
        count += n;
    }
    if count == 0 {
        return Err(Error::InsufficientData("no patches".into()));
    }
    let scale = 1.0 / count as f64;
    gw.iter_mut().for_each(|g| *g *= scale);
    Ok((loss * scale, gw, gb * scale))
}

/// Classifier plus the full-data loss after every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierFit {
    pub classifier: PatchClassifier,
    pub epoch_losses: Vec<f64>,
}

/// Logistic regression on patches from zero initialization, using the same
/// paired mini-batch schedule and AdamW settings as projection training.
pub fn train_patch_classifier(
    real: &EmbeddingDataset,
    fake: &EmbeddingDataset,
    cfg: &TrainConfig,
) -> Result<ClassifierFit> {
    cfg.validate()?;
    if real.patches() != fake.patches() || real.dim() != fake.dim() {
        return Err(shape("real and fake datasets differ in shape"));
    }
    let b = cfg.batch_size;
    if real.len() < b || fake.len() < b {
        return Err(Error::InsufficientData(format!(
            "batch size {b} needs at least {b} records per class"
        )));
    }
    let mut clf = PatchClassifier::zeros(real.dim());
    let mut opt = AdamW::new(cfg.adam(), &[real.dim(), 1])?;
    let steps = real.len().min(fake.len()) / b;
    let all: Vec<(&PatchEmbeddingField, bool)> = real
        .fields()
        .iter()
        .map(|f| (f, false))
        .chain(fake.fields().iter().map(|f| (f, true)))
        .collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let pr = rng::permutation(real.len(), &mut rng::stream(cfg.seed, &[tag::SHUFFLE, epoch as u64, 0]));
        let pf = rng::permutation(fake.len(), &mut rng::stream(cfg.seed, &[tag::SHUFFLE, epoch as u64, 1]));
        for s in 0..steps {
            let batch: Vec<(&PatchEmbeddingField, bool)> = pr[s * b..(s + 1) * b]
                .iter()
                .map(|&i| (&real.fields()[i], false))
                .chain(pf[s * b..(s + 1) * b].iter().map(|&i| (&fake.fields()[i], true)))
                .collect();
            let (_, gw, gb) = bce_loss_and_grad(&clf, &batch)?;
            let mut bias = [clf.bias];
            opt.step(&mut [&mut clf.weight, &mut bias], &[&gw, &[gb]], &[true, false])?;
            clf.bias = bias[0];
        }
        epoch_losses.push(bce_loss_and_grad(&clf, &all)?.0);
    }
    if clf.weight.iter().any(|w| !w.is_finite()) || !clf.bias.is_finite() {
        return Err(Error::NonFinite("patch classifier"));
    }
    Ok(ClassifierFit {
        classifier: clf,
        epoch_losses,
    })
}

/// Fraction of patches whose sigmoid output exceeds `theta_patch`.
pub fn voting_score(field: &PatchEmbeddingField, clf: &PatchClassifier, theta_patch: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&theta_patch) {
        return Err(invalid(format!("patch threshold {theta_patch} outside [0, 1]")));
    }
    let logits = patch_logits(field, clf)?;
    let votes = logits.iter().filter(|&&z| sigmoid(z) > theta_patch).count();
    Ok(votes as f64 / logits.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Max,
    TopK(usize),
}

pub fn pooled_score(field: &PatchEmbeddingField, clf: &PatchClassifier, mode: Pooling) -> Result<f64> {
    let mut logits = patch_logits(field, clf)?;
    let k = logits.len();
    match mode {
        Pooling::Mean => Ok(logits.iter().sum::<f64>() / k as f64),
        Pooling::Max => Ok(logits.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
        Pooling::TopK(t) => {
            if t == 0 || t > k {
                return Err(invalid(format!("top-k needs 1 <= t <= {k}, got {t}")));
            }
            logits.sort_by(|a, b| b.total_cmp(a));
            Ok(logits[..t].iter().sum::<f64>() / t as f64)
        }
    }
}

pub fn voting_scores(data: &EmbeddingDataset, clf: &PatchClassifier, theta_patch: f64) -> Result<Vec<f64>> {
    par::map_slice(data.fields(), |f| voting_score(f, clf, theta_patch))
        .into_iter()
        .collect()
}

pub fn pooled_scores(data: &EmbeddingDataset, clf: &PatchClassifier, mode: Pooling) -> Result<Vec<f64>> {
    par::map_slice(data.fields(), |f| pooled_score(f, clf, mode))
        .into_iter()
        .collect()
}
