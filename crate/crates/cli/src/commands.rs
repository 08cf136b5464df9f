use std::collections::HashMap;

use log::info;
use mdmf::baselines::{self, PatchClassifier, Pooling};
use mdmf::detect::{self, batch_detect, build_reference_bank, calibrate_threshold_real_only, Detection};
use mdmf::metrics::{evaluate, ScoredLabels};
use mdmf::rng::tag;
use mdmf::synth;
use mdmf::theory::{self, SuiteMode};
use mdmf::{EmbeddingDataset, Label};

use crate::args::{
    BaselineArgs, BaselineFlags, EvalArgs, Method, ScoreArgs, SynthArgs, TheoryArgs, ThresholdFlags, TrainArgs,
};
use crate::config::{BaselineChoice, FileConfig, Threshold};
use crate::failure::{Failure, Outcome};
use crate::files::{self, require_inputs};

fn pooled(ds: EmbeddingDataset, pool_to: Option<usize>) -> Outcome<EmbeddingDataset> {
    match pool_to {
        Some(k) if k != ds.patches() => ds.pooled(k).map_err(|e| Failure::usage(e.to_string())),
        _ => Ok(ds),
    }
}

/// Reads and concatenates datasets of a common shape.
fn read_all(paths: &[std::path::PathBuf]) -> Outcome<EmbeddingDataset> {
    let mut it = paths.iter();
    let first = it
        .next()
        .ok_or_else(|| Failure::usage("at least one input file is required"))?;
    let mut ds = files::read_dataset(first)?;
    for p in it {
        ds = ds.concat(&files::read_dataset(p)?)?;
    }
    Ok(ds)
}

fn resolve_tau(threshold: Threshold, real_scores: impl FnOnce() -> Outcome<Vec<f64>>) -> Outcome<f64> {
    match threshold {
        Threshold::Fixed(t) => Ok(t),
        Threshold::Calibrate(alpha) => {
            let tau = calibrate_threshold_real_only(&real_scores()?, alpha)?;
            info!("calibrated tau = {tau} (alpha = {alpha})");
            Ok(tau)
        }
    }
}

pub fn synth(cfg: &FileConfig, args: &SynthArgs) -> Outcome {
    let (base, s) = cfg.synth_config(args)?;
    let real_cfg = base.with_stream(&[tag::SPLIT, 0]);
    let fake_cfg = base.with_stream(&[tag::SPLIT, 1]);
    let ids = |prefix: &str, n: usize| {
        (0..n)
            .map(|i| format!("{prefix}-{:06}", s.offset + i as u64))
            .collect::<Vec<_>>()
    };
    let real = EmbeddingDataset::new(
        s.patches,
        s.dim,
        synth::sample_real_range(&real_cfg, s.offset, s.n_real)?,
        Some(vec![Label::Real; s.n_real]),
        Some(ids("real", s.n_real)),
    )?;
    let fake = EmbeddingDataset::new(
        s.patches,
        s.dim,
        synth::sample_fake_range(&fake_cfg, s.offset, s.n_fake)?,
        Some(vec![Label::Generated; s.n_fake]),
        Some(ids("fake", s.n_fake)),
    )?;
    let (real, fake) = (pooled(real, s.pool_to)?, pooled(fake, s.pool_to)?);
    files::write_dataset(&args.out_real, &real)?;
    files::write_dataset(&args.out_fake, &fake)?;
    info!("wrote {} real and {} generated records", real.len(), fake.len());
    Ok(())
}

pub fn train(cfg: &FileConfig, args: &TrainArgs) -> Outcome {
    let tc = cfg.train_config(&args.train)?;
    cfg.require_gelu(&tc)?;
    require_inputs(&[&args.real, &args.fake])?;
    let pool_to = cfg.pool_to(args.pool_to);
    let real = pooled(files::read_dataset(&args.real)?, pool_to)?;
    let fake = pooled(files::read_dataset(&args.fake)?, pool_to)?;
    let (params, history) = mdmf::pfs::train(&real, &fake, &tc)?;
    for epoch in 0..tc.epochs {
        if let Some(j) = history.epoch_mean_j(epoch) {
            info!("epoch {epoch}: mean J = {j:.6}");
        }
    }
    files::write_params(&args.out, &params)?;
    if let Some(h) = &args.history {
        files::write_json(Some(h), &history)?;
    }
    Ok(())
}

pub fn score(cfg: &FileConfig, args: &ScoreArgs) -> Outcome {
    let threshold = cfg.threshold(&args.threshold)?;
    require_inputs(&[&args.checkpoint, &args.refs])?;
    require_inputs(&args.tests.iter().map(|p| p.as_path()).collect::<Vec<_>>())?;
    let pool_to = cfg.pool_to(args.pool_to);
    let params = files::read_params(&args.checkpoint)?;
    let refs = pooled(files::read_dataset(&args.refs)?, pool_to)?;
    let tests = pooled(read_all(&args.tests)?, pool_to)?;
    let bank = build_reference_bank(&refs, &params)?;
    let tau = resolve_tau(threshold, || Ok(bank.leave_one_out_scores()?))?;
    let report = batch_detect(&bank, &tests, &params, tau)?;
    files::write_atomic(&args.out, &files::encode_scores(&report.detections)?)
}

struct BaselineData {
    real: EmbeddingDataset,
    fake: EmbeddingDataset,
    tests: EmbeddingDataset,
}

fn baseline_data(cfg: &FileConfig, flags: &BaselineFlags) -> Outcome<BaselineData> {
    let need = |p: &Option<std::path::PathBuf>, name: &str| {
        p.clone()
            .ok_or_else(|| Failure::usage(format!("--{name} is required for a baseline")))
    };
    let (real, fake) = (need(&flags.real, "real")?, need(&flags.fake, "fake")?);
    if flags.tests.is_empty() {
        return Err(Failure::usage("--tests is required for a baseline"));
    }
    require_inputs(&[&real, &fake])?;
    require_inputs(&flags.tests.iter().map(|p| p.as_path()).collect::<Vec<_>>())?;
    let pool_to = cfg.pool_to(flags.pool_to);
    Ok(BaselineData {
        real: pooled(files::read_dataset(&real)?, pool_to)?,
        fake: pooled(files::read_dataset(&fake)?, pool_to)?,
        tests: pooled(read_all(&flags.tests)?, pool_to)?,
    })
}

fn baseline_scores(data: &EmbeddingDataset, clf: &PatchClassifier, choice: BaselineChoice) -> Outcome<Vec<f64>> {
    let pooling = match choice.method {
        Method::Voting => return Ok(baselines::voting_scores(data, clf, choice.theta)?),
        Method::Mean => Pooling::Mean,
        Method::Max => Pooling::Max,
        Method::Topk => Pooling::TopK(choice.top_k),
    };
    Ok(baselines::pooled_scores(data, clf, pooling)?)
}

/// Trains the patch classifier and returns thresholded test detections.
fn run_baseline(
    cfg: &FileConfig,
    method: Option<Method>,
    flags: &BaselineFlags,
    threshold: &ThresholdFlags,
) -> Outcome<(Vec<Detection>, EmbeddingDataset)> {
    let choice = cfg.baseline(method, flags)?;
    let threshold = cfg.threshold(threshold)?;
    let tc = cfg.train_config(&flags.train)?;
    let data = baseline_data(cfg, flags)?;
    let fit = baselines::train_patch_classifier(&data.real, &data.fake, &tc)?;
    let scores = baseline_scores(&data.tests, &fit.classifier, choice)?;
    let tau = resolve_tau(threshold, || baseline_scores(&data.real, &fit.classifier, choice))?;
    let rows = scores
        .into_iter()
        .enumerate()
        .map(|(i, score)| Detection {
            source_id: data.tests.source_id(i),
            score,
            label: detect::classify(score, tau),
        })
        .collect();
    Ok((rows, data.tests))
}

pub fn baseline(cfg: &FileConfig, args: &BaselineArgs) -> Outcome {
    let (rows, _) = run_baseline(cfg, args.method, &args.inputs, &args.threshold)?;
    files::write_atomic(&args.out, &files::encode_scores(&rows)?)
}

fn truth_by_id(ds: &EmbeddingDataset) -> Outcome<HashMap<String, Label>> {
    let labels = ds
        .labels()
        .ok_or_else(|| Failure::runtime("ground-truth file carries no labels"))?;
    let mut map = HashMap::with_capacity(ds.len());
    for (i, &l) in labels.iter().enumerate() {
        if map.insert(ds.source_id(i), l).is_some() {
            return Err(Failure::runtime(format!("duplicate source id {}", ds.source_id(i))));
        }
    }
    Ok(map)
}

fn scored(rows: &[Detection], truth: &HashMap<String, Label>) -> Outcome<ScoredLabels> {
    let labels = rows
        .iter()
        .map(|d| {
            truth
                .get(&d.source_id)
                .copied()
                .ok_or_else(|| Failure::runtime(format!("no ground truth for {}", d.source_id)))
        })
        .collect::<Outcome<Vec<_>>>()?;
    Ok(ScoredLabels::new(rows.iter().map(|d| d.score).collect(), labels)?)
}

pub fn eval(cfg: &FileConfig, args: &EvalArgs) -> Outcome {
    let (rows, truth) = match (&args.scores, args.baseline) {
        (Some(scores), None) => {
            if args.truth.is_empty() {
                return Err(Failure::usage("--scores needs --truth"));
            }
            require_inputs(&[scores])?;
            require_inputs(&args.truth.iter().map(|p| p.as_path()).collect::<Vec<_>>())?;
            (files::read_scores(scores)?, truth_by_id(&read_all(&args.truth)?)?)
        }
        (None, Some(method)) => {
            let (rows, tests) = run_baseline(cfg, Some(method), &args.inputs, &args.threshold)?;
            if let Some(out) = &args.scores_out {
                files::write_atomic(out, &files::encode_scores(&rows)?)?;
            }
            let truth = if args.truth.is_empty() {
                truth_by_id(&tests)?
            } else {
                truth_by_id(&read_all(&args.truth)?)?
            };
            (rows, truth)
        }
        _ => return Err(Failure::usage("eval needs either --scores with --truth, or --baseline")),
    };
    let report = evaluate(&scored(&rows, &truth)?)?;
    files::write_json(args.out.as_deref(), &report)
}

pub fn theory_check(cfg: &FileConfig, args: &TheoryArgs) -> Outcome {
    let mode = if args.quick { SuiteMode::Quick } else { SuiteMode::Full };
    let report = theory::run_suite(mode, cfg.seed.unwrap_or(0))?;
    print!("{}", report.table());
    if let Some(out) = &args.out {
        files::write_json(Some(out), &report)?;
    }
    match report.failures().len() {
        0 => Ok(()),
        n => Err(Failure::Theory(n)),
    }
}
