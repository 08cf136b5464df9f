use mdmf::experiment::{draw_splits, run_mdmf, Setup};
use mdmf::pfs::{train, TrainConfig};
use mdmf::synth::{self, SyntheticConfig};
use mdmf::theory::{run_suite, SuiteMode};

#[test]
fn objective_rises_over_training() {
    let cfg = SyntheticConfig::axis_defect(6, 8, 1.0, 0.3, 4.0, 2);
    let real = synth::real_dataset(&cfg.with_stream(&[0]), 512, "r").unwrap();
    let fake = synth::fake_dataset(&cfg.with_stream(&[1]), 512, "f").unwrap();
    let tc = TrainConfig {
        epochs: 6,
        batch_size: 64,
        learning_rate: 1e-3,
        hidden_width: 16,
        seed: 4,
        ..TrainConfig::default()
    };
    let (params, history) = train(&real, &fake, &tc).unwrap();
    let first = history.epoch_mean_j(0).unwrap();
    let last = history.epoch_mean_j(5).unwrap();
    assert!(last > first, "first {first} last {last}");
    assert_eq!(history.len(), 6 * 8);
    params.validate().unwrap();
}

#[test]
fn reference_run_matches_pinned_oracle() {
    let setup = Setup::reference(0);
    let out = run_mdmf(&setup, &draw_splits(&setup).unwrap()).unwrap();
    assert!(
        (out.trained.auroc - 0.9946).abs() <= 0.02,
        "trained {}",
        out.trained.auroc
    );
    assert!(
        (out.untrained.auroc - 0.6035).abs() <= 0.02,
        "untrained {}",
        out.untrained.auroc
    );
    assert!(out.trained.auroc >= 0.90);
    assert!(out.trained.auroc >= out.untrained.auroc + 0.05);
}

#[test]
fn quick_theory_suite_passes() {
    let report = run_suite(SuiteMode::Quick, 0).unwrap();
    assert!(report.passed(), "{}", report.table());
}
