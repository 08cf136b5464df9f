//! Single-sample detection against a bank of projected real references.
//!
//! The score of a test image ỹ is the biased MMD² between the reference
//! fields and the singleton `{ỹ}`:
//! `S = (1/R²) Σ k(x_r, x_r') + k(ỹ, ỹ) − (2/R) Σ k(x_r, ỹ)`.

use serde::{Deserialize, Serialize};

use crate::embeddings::{EmbeddingDataset, Label, PatchEmbeddingField};
use crate::error::{invalid, shape, Error, Result};
use crate::kernel_mmd::gaussian_kernel_unchecked;
use crate::par;
use crate::pfs::{self, PfsField, PfsParams};

/// Default multiplier for real-only threshold calibration.
pub const DEFAULT_ALPHA: f64 = 3.0;

/// Projected real references with their cached self-similarity term.
#[derive(Debug, Clone)]
pub struct ReferenceBank {
    fields: Vec<PfsField>,
    self_term: f64,
    gamma: f64,
    row_sums: Vec<f64>,
}

impl ReferenceBank {
    /// Builds a bank directly from signature fields.
    pub fn from_signatures(fields: Vec<PfsField>, gamma: f64) -> Result<Self> {
        if fields.is_empty() {
            return Err(Error::InsufficientData(
                "reference bank needs at least one field".into(),
            ));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(invalid(format!("bandwidth must be positive, got {gamma}")));
        }
        let (k, d) = (fields[0].patches(), fields[0].dim());
        if fields.iter().any(|f| f.patches() != k || f.dim() != d) {
            return Err(shape("reference signatures differ in shape"));
        }
        let r = fields.len();
        let row_sums = par::map_indexed(r, |i| {
            (0..r)
                .map(|j| gaussian_kernel_unchecked(fields[i].as_slice(), fields[j].as_slice(), gamma))
                .sum::<f64>()
        });
        let self_term = par::ordered_sum(&row_sums) / (r * r) as f64;
        Ok(Self {
            fields,
            self_term,
            gamma,
            row_sums,
        })
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn fields(&self) -> &[PfsField] {
        &self.fields
    }

    pub fn self_term(&self) -> f64 {
        self.self_term
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn patches(&self) -> usize {
        self.fields[0].patches()
    }

    pub fn signature_dim(&self) -> usize {
        self.fields[0].dim()
    }

    /// Score of an already projected test field.
    pub fn score_signature(&self, z: &PfsField) -> Result<f64> {
        if z.patches() != self.patches() || z.dim() != self.signature_dim() {
            return Err(shape(format!(
                "test signature is {}x{}, references are {}x{}",
                z.patches(),
                z.dim(),
                self.patches(),
                self.signature_dim()
            )));
        }
        let cross: f64 = self
            .fields
            .iter()
            .map(|x| gaussian_kernel_unchecked(x.as_slice(), z.as_slice(), self.gamma))
            .sum();
        let s = self.self_term + 1.0 - 2.0 * cross / self.len() as f64;
        Ok(s.max(0.0))
    }

    /// Each reference scored against the bank with itself left out.
    pub fn leave_one_out_scores(&self) -> Result<Vec<f64>> {
        let r = self.len();
        if r < 2 {
            return Err(Error::InsufficientData(
                "leave-one-out needs at least two references".into(),
            ));
        }
        let total = self.self_term * (r * r) as f64;
        let m = (r - 1) as f64;
        Ok(self
            .row_sums
            .iter()
            .map(|&row| {
                // row includes k(x_i, x_i) = 1
                let cross = row - 1.0;
                let others = total - 2.0 * row + 1.0;
                (others / (m * m) + 1.0 - 2.0 * cross / m).max(0.0)
            })
            .collect())
    }
}

/// Projects `refs` in eval mode and caches the self term. Every reference
/// must be labelled real when labels are present.
pub fn build_reference_bank(refs: &EmbeddingDataset, params: &PfsParams) -> Result<ReferenceBank> {
    if refs.is_empty() {
        return Err(Error::InsufficientData("reference set is empty".into()));
    }
    if let Some(labels) = refs.labels() {
        if let Some(i) = labels.iter().position(|&l| l != Label::Real) {
            return Err(Error::LabelViolation(format!(
                "reference {} is labelled {}",
                refs.source_id(i),
                labels[i]
            )));
        }
    }
    let z = pfs::project_all(refs.fields(), params)?;
    ReferenceBank::from_signatures(z, params.gamma())
}

pub fn mdmf_score(bank: &ReferenceBank, test: &PatchEmbeddingField, params: &PfsParams) -> Result<f64> {
    bank.score_signature(&pfs::project(test, params)?)
}

/// `τ = mean + α · sd` with the sample standard deviation.
pub fn calibrate_threshold_real_only(real_scores: &[f64], alpha: f64) -> Result<f64> {
    if real_scores.len() < 2 {
        return Err(Error::InsufficientData("calibration needs at least two scores".into()));
    }
    if !alpha.is_finite() || real_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("calibration input"));
    }
    let n = real_scores.len() as f64;
    let pivot = real_scores[0];
    let mean = pivot + real_scores.iter().map(|s| s - pivot).sum::<f64>() / n;
    let var = real_scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(mean + alpha * var.sqrt())
}

/// Generated iff `score > tau`.
pub fn classify(score: f64, tau: f64) -> Label {
    if score > tau {
        Label::Generated
    } else {
        Label::Real
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub source_id: String,
    pub score: f64,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub detections: Vec<Detection>,
    pub tau: f64,
    pub reference_size: usize,
}

impl DetectionReport {
    pub fn scores(&self) -> Vec<f64> {
        self.detections.iter().map(|d| d.score).collect()
    }
}

/// Scores every test record without thresholding, in order.
pub fn score_all(bank: &ReferenceBank, tests: &EmbeddingDataset, params: &PfsParams) -> Result<Vec<f64>> {
    par::map_slice(tests.fields(), |f| mdmf_score(bank, f, params))
        .into_iter()
        .collect()
}

pub fn batch_detect(
    bank: &ReferenceBank,
    tests: &EmbeddingDataset,
    params: &PfsParams,
    tau: f64,
) -> Result<DetectionReport> {
    let scores = score_all(bank, tests, params)?;
    let detections = scores
        .into_iter()
        .enumerate()
        .map(|(i, score)| Detection {
            source_id: tests.source_id(i),
            score,
            label: classify(score, tau),
        })
        .collect();
    Ok(DetectionReport {
        detections,
        tau,
        reference_size: bank.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel_mmd::{gaussian_kernel, mmd2_biased};
    use crate::pfs::init_params;
    use crate::rng;
    use rand::Rng;

    fn sig(v: &[f64]) -> PfsField {
        PfsField::new(v.len(), 1, v.to_vec()).unwrap()
    }

    fn random_sigs(n: usize, k: usize, seed: u64) -> Vec<PfsField> {
        let mut r = rng::stream(seed, &[]);
        (0..n)
            .map(|_| sig(&(0..k).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<_>>()))
            .collect()
    }

    #[test]
    fn self_term_trivial_cases() {
        let b = ReferenceBank::from_signatures(vec![sig(&[0.3, -0.2])], 1.0).unwrap();
        assert_eq!(b.self_term(), 1.0);
        let b = ReferenceBank::from_signatures(vec![sig(&[0.3, -0.2]), sig(&[0.3, -0.2])], 0.7).unwrap();
        assert_eq!(b.self_term(), 1.0);
    }

    #[test]
    fn self_term_matches_double_loop() {
        let refs = random_sigs(3, 4, 7);
        let b = ReferenceBank::from_signatures(refs.clone(), 0.8).unwrap();
        let mut s = 0.0;
        for x in &refs {
            for y in &refs {
                s += gaussian_kernel(x.as_slice(), y.as_slice(), 0.8).unwrap();
            }
        }
        assert!((b.self_term() - s / 9.0).abs() < 1e-12);
    }

    #[test]
    fn two_point_score() {
        let b = ReferenceBank::from_signatures(vec![sig(&[0.5])], 0.6).unwrap();
        assert_eq!(b.score_signature(&sig(&[0.5])).unwrap(), 0.0);
        let r: f64 = 0.7;
        let s = b.score_signature(&sig(&[0.5 - r])).unwrap();
        let expected = 2.0 * (1.0 - (-r * r / (2.0 * 0.36)).exp());
        assert!((s - expected).abs() < 1e-15);
    }

    #[test]
    fn score_equals_biased_estimator() {
        let refs = random_sigs(6, 3, 1);
        let test = random_sigs(1, 3, 2);
        let b = ReferenceBank::from_signatures(refs.clone(), 1.3).unwrap();
        let s = b.score_signature(&test[0]).unwrap();
        let biased = mmd2_biased(&refs, &test, 1.3).unwrap();
        assert!((s - biased).abs() < 1e-12);
    }

    #[test]
    fn leave_one_out_matches_rebuilt_banks() {
        let refs = random_sigs(5, 2, 3);
        let b = ReferenceBank::from_signatures(refs.clone(), 0.9).unwrap();
        let loo = b.leave_one_out_scores().unwrap();
        for i in 0..5 {
            let others: Vec<_> = refs
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, f)| f.clone())
                .collect();
            let sub = ReferenceBank::from_signatures(others, 0.9).unwrap();
            let direct = sub.score_signature(&refs[i]).unwrap();
            assert!((loo[i] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn calibration_examples() {
        assert_eq!(calibrate_threshold_real_only(&[0.4, 0.4, 0.4], 3.0).unwrap(), 0.4);
        let tau = calibrate_threshold_real_only(&[0.0, 2.0], 1.0).unwrap();
        assert!((tau - (1.0 + 2f64.sqrt())).abs() < 1e-15);
        assert_eq!(calibrate_threshold_real_only(&[1.0, 2.0, 6.0], 0.0).unwrap(), 3.0);
        assert!(calibrate_threshold_real_only(&[1.0], 1.0).is_err());
    }

    #[test]
    fn classify_boundary() {
        assert_eq!(classify(0.5, 0.5), Label::Real);
        assert_eq!(classify(0.5 + 1e-12, 0.5), Label::Generated);
        assert_eq!(classify(0.1, 0.5), Label::Real);
    }

    #[test]
    fn bank_rejects_empty_and_fake_references() {
        let p = init_params(2, 3, 1, 0).unwrap();
        let empty = EmbeddingDataset::empty(2, 2).unwrap();
        assert!(build_reference_bank(&empty, &p).is_err());
        let f = PatchEmbeddingField::new(2, 2, vec![0.0; 4]).unwrap();
        let fake = EmbeddingDataset::uniform(2, 2, vec![f], Label::Generated, "g").unwrap();
        assert!(matches!(build_reference_bank(&fake, &p), Err(Error::LabelViolation(_))));
    }

    #[test]
    fn batch_matches_single_calls() {
        let p = init_params(3, 5, 1, 4).unwrap();
        let mut r = rng::stream(9, &[]);
        let mut mk = |n: usize, label| {
            let fields = (0..n)
                .map(|_| PatchEmbeddingField::new(2, 3, (0..6).map(|_| rng::normal(&mut r)).collect()).unwrap())
                .collect();
            EmbeddingDataset::uniform(2, 3, fields, label, "x").unwrap()
        };
        let refs = mk(4, Label::Real);
        let tests = mk(5, Label::Generated);
        let bank = build_reference_bank(&refs, &p).unwrap();
        let report = batch_detect(&bank, &tests, &p, 0.01).unwrap();
        assert_eq!(report.reference_size, 4);
        for (i, d) in report.detections.iter().enumerate() {
            assert_eq!(d.score, mdmf_score(&bank, &tests.fields()[i], &p).unwrap());
            assert_eq!(d.source_id, tests.source_id(i));
        }
        let none = batch_detect(&bank, &EmbeddingDataset::empty(2, 3).unwrap(), &p, 0.0).unwrap();
        assert!(none.detections.is_empty());
    }
}
