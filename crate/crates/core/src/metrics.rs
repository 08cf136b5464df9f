//! AUROC, average precision and best-threshold accuracy with generated as the
//! positive class. Equal scores are handled as one threshold group: they earn
//! half credit in AUROC and enter the precision-recall curve together.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::embeddings::Label;
use crate::error::{shape, Error, Result};

/// Scores paired with ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredLabels {
    scores: Vec<f64>,
    labels: Vec<Label>,
}

impl ScoredLabels {
    pub fn new(scores: Vec<f64>, labels: Vec<Label>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(shape(format!("{} scores but {} labels", scores.len(), labels.len())));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::NonFinite("scores"));
        }
        Ok(Self { scores, labels })
    }

    pub fn from_pairs(pairs: &[(f64, Label)]) -> Result<Self> {
        Self::new(pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1).collect())
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|l| l.is_positive()).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    /// `(score, positives, negatives)` per distinct score, ascending.
    fn groups(&self) -> Vec<(f64, usize, usize)> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.scores[a].partial_cmp(&self.scores[b]).unwrap_or(Ordering::Equal));
        let mut out: Vec<(f64, usize, usize)> = Vec::new();
        for i in order {
            let s = self.scores[i];
            let pos = self.labels[i].is_positive();
            match out.last_mut() {
                Some(g) if g.0 == s => {
                    if pos {
                        g.1 += 1
                    } else {
                        g.2 += 1
                    }
                }
                _ => out.push((s, pos as usize, (!pos) as usize)),
            }
        }
        out
    }
}

fn require_both(data: &ScoredLabels) -> Result<(usize, usize)> {
    let (p, n) = (data.positives(), data.negatives());
    if p == 0 || n == 0 {
        return Err(Error::InsufficientData(format!(
            "need both classes, have {p} generated and {n} real"
        )));
    }
    Ok((p, n))
}

/// Mann–Whitney AUROC; tied positive/negative pairs count one half.
pub fn auroc(data: &ScoredLabels) -> Result<f64> {
    let (p, n) = require_both(data)?;
    let mut below = 0usize;
    let mut credit = 0.0;
    for (_, gp, gn) in data.groups() {
        credit += gp as f64 * below as f64 + 0.5 * (gp * gn) as f64;
        below += gn;
    }
    Ok(credit / (p as f64 * n as f64))
}

/// Step-wise average precision over descending threshold groups.
pub fn average_precision(data: &ScoredLabels) -> Result<f64> {
    let p = data.positives();
    if p == 0 {
        return Err(Error::InsufficientData(
            "average precision needs a generated sample".into(),
        ));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    for (_, gp, gn) in data.groups().into_iter().rev() {
        tp += gp;
        fp += gn;
        if gp > 0 {
            ap += (gp as f64 / p as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestAccuracy {
    pub accuracy: f64,
    /// May be ±∞ when a constant prediction is optimal.
    pub tau: f64,
}

/// Best accuracy of `score > tau` over midpoints between distinct scores and
/// the two infinite sentinels; the smallest achieving τ wins ties.
pub fn best_accuracy(data: &ScoredLabels) -> Result<BestAccuracy> {
    if data.is_empty() {
        return Err(Error::InsufficientData("accuracy of an empty set".into()));
    }
    let groups = data.groups();
    let total = data.len() as f64;
    // τ = -∞: everything predicted generated
    let mut correct = data.positives();
    let mut best = BestAccuracy {
        accuracy: correct as f64 / total,
        tau: f64::NEG_INFINITY,
    };
    for (i, &(s, gp, gn)) in groups.iter().enumerate() {
        correct = correct + gn - gp;
        let tau = match groups.get(i + 1) {
            Some(next) => s + (next.0 - s) / 2.0,
            None => f64::INFINITY,
        };
        let acc = correct as f64 / total;
        if acc > best.accuracy {
            best = BestAccuracy { accuracy: acc, tau };
        }
    }
    Ok(best)
}

/// All three metrics plus class counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub ap: f64,
    pub acc: f64,
    pub tau: f64,
    pub n_real: usize,
    pub n_fake: usize,
}

pub fn evaluate(data: &ScoredLabels) -> Result<EvalReport> {
    let best = best_accuracy(data)?;
    Ok(EvalReport {
        auroc: auroc(data)?,
        ap: average_precision(data)?,
        acc: best.accuracy,
        tau: best.tau,
        n_real: data.negatives(),
        n_fake: data.positives(),
    })
}
