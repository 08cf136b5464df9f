//! The reference end-to-end run: synthetic splits, projection training,
//! reference-bank scoring and the voting comparison.

use serde::{Deserialize, Serialize};

use crate::baselines::{self, dense_theta_grid};
use crate::detect::{build_reference_bank, score_all};
use crate::embeddings::EmbeddingDataset;
use crate::error::Result;
use crate::metrics::{auroc, evaluate, EvalReport, ScoredLabels};
use crate::pfs::{init_params, train, PfsParams, TrainConfig, TrainHistory};
use crate::rng::tag;
use crate::synth::{self, SyntheticConfig};

/// Learning rate of the reference run.
pub const REFERENCE_LEARNING_RATE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setup {
    pub synth: SyntheticConfig,
    pub train: TrainConfig,
    /// Training records per class.
    pub n_train: usize,
    /// Test records per class.
    pub n_test: usize,
    pub n_refs: usize,
}

impl Setup {
    /// D=8, K=16, σ_e=1, ρ=0.3, ‖μ‖=4, d=1, hidden 32, 10 epochs, B=64,
    /// 2000 training and 500 test records per class, 500 references.
    pub fn reference(seed: u64) -> Self {
        Self {
            synth: SyntheticConfig::axis_defect(8, 16, 1.0, 0.3, 4.0, seed),
            train: TrainConfig {
                epochs: 10,
                batch_size: 64,
                learning_rate: REFERENCE_LEARNING_RATE,
                hidden_width: 32,
                output_dim: 1,
                seed,
                ..TrainConfig::default()
            },
            n_train: 2000,
            n_test: 500,
            n_refs: 500,
        }
    }

    pub fn with_refs(mut self, n_refs: usize) -> Self {
        self.n_refs = n_refs;
        self
    }
}

/// Disjoint record streams for every split. References are drawn from their
/// own stream, so a smaller bank is a prefix of a larger one.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train_real: EmbeddingDataset,
    pub train_fake: EmbeddingDataset,
    pub refs: EmbeddingDataset,
    /// Real test records followed by generated ones.
    pub test: EmbeddingDataset,
}

pub fn draw_splits(setup: &Setup) -> Result<Splits> {
    let split = |k: u64| setup.synth.with_stream(&[tag::SPLIT, k]);
    let test_real = synth::real_dataset(&split(3), setup.n_test, "test-real")?;
    let test_fake = synth::fake_dataset(&split(4), setup.n_test, "test-fake")?;
    Ok(Splits {
        train_real: synth::real_dataset(&split(0), setup.n_train, "train-real")?,
        train_fake: synth::fake_dataset(&split(1), setup.n_train, "train-fake")?,
        refs: synth::real_dataset(&split(2), setup.n_refs, "ref")?,
        test: test_real.concat(&test_fake)?,
    })
}

fn labelled(test: &EmbeddingDataset, scores: Vec<f64>) -> Result<ScoredLabels> {
    let labels = test.labels().map(<[_]>::to_vec).unwrap_or_default();
    ScoredLabels::new(scores, labels)
}

/// Metrics of `params` on the test split against the reference bank.
pub fn evaluate_params(splits: &Splits, params: &PfsParams) -> Result<EvalReport> {
    let bank = build_reference_bank(&splits.refs, params)?;
    evaluate(&labelled(&splits.test, score_all(&bank, &splits.test, params)?)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdmfOutcome {
    pub trained: EvalReport,
    pub untrained: EvalReport,
    pub params: PfsParams,
    pub history: TrainHistory,
}

/// Trains on the training split and evaluates both the trained projection
/// and the initialization it started from.
pub fn run_mdmf(setup: &Setup, splits: &Splits) -> Result<MdmfOutcome> {
    let cfg = &setup.train;
    let init = init_params(splits.train_real.dim(), cfg.hidden_width, cfg.output_dim, cfg.seed)?;
    let (params, history) = train(&splits.train_real, &splits.train_fake, cfg)?;
    Ok(MdmfOutcome {
        trained: evaluate_params(splits, &params)?,
        untrained: evaluate_params(splits, &init)?,
        params,
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VotingOutcome {
    pub thetas: Vec<f64>,
    pub aurocs: Vec<f64>,
    pub best_theta: f64,
    pub best_auroc: f64,
}

/// Patch classifier trained with the same schedule, then voting AUROC over
/// the dense patch-threshold grid.
pub fn run_voting(setup: &Setup, splits: &Splits) -> Result<VotingOutcome> {
    let fit = baselines::train_patch_classifier(&splits.train_real, &splits.train_fake, &setup.train)?;
    let thetas = dense_theta_grid();
    let aurocs = thetas
        .iter()
        .map(|&t| {
            auroc(&labelled(
                &splits.test,
                baselines::voting_scores(&splits.test, &fit.classifier, t)?,
            )?)
        })
        .collect::<Result<Vec<f64>>>()?;
    let best = (0..thetas.len()).fold(0, |b, i| if aurocs[i] > aurocs[b] { i } else { b });
    Ok(VotingOutcome {
        best_theta: thetas[best],
        best_auroc: aurocs[best],
        thetas,
        aurocs,
    })
}
