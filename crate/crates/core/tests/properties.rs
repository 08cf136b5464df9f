use mdmf::baselines::{pooled_score, voting_score, PatchClassifier, Pooling};
use mdmf::detect::{build_reference_bank, calibrate_threshold_real_only, mdmf_score, ReferenceBank};
use mdmf::embeddings::{decode_embedding_file, encode_embedding_file};
use mdmf::metrics::{auroc, average_precision, best_accuracy, ScoredLabels};
use mdmf::pfs::{decode_checkpoint, encode_checkpoint, init_params, project, project_all};
use mdmf::{EmbeddingDataset, Label, PatchEmbeddingField};
use proptest::prelude::*;

fn fields(k: usize, d: usize, n: usize) -> impl Strategy<Value = Vec<PatchEmbeddingField>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, k * d), n).prop_map(move |rows| {
        rows.into_iter()
            .map(|v| PatchEmbeddingField::new(k, d, v).unwrap())
            .collect()
    })
}

fn f32_fields(k: usize, d: usize, n: usize) -> impl Strategy<Value = Vec<PatchEmbeddingField>> {
    prop::collection::vec(prop::collection::vec(-3.0f32..3.0, k * d), n).prop_map(move |rows| {
        rows.into_iter()
            .map(|v| PatchEmbeddingField::new(k, d, v.into_iter().map(f64::from).collect()).unwrap())
            .collect()
    })
}

/// `.pfse` stores float32, so values are drawn exactly representable.
fn dataset() -> impl Strategy<Value = EmbeddingDataset> {
    (1usize..5, 1usize..5, 0usize..6, any::<bool>(), any::<bool>())
        .prop_flat_map(|(k, d, n, labelled, ids)| {
            (
                f32_fields(k, d, n),
                prop::collection::vec(any::<bool>(), n),
                Just((k, d, labelled, ids)),
            )
        })
        .prop_map(|(f, flags, (k, d, labelled, ids))| {
            let n = f.len();
            let labels = labelled.then(|| {
                flags
                    .iter()
                    .map(|&g| if g { Label::Generated } else { Label::Real })
                    .collect()
            });
            let ids = ids.then(|| (0..n).map(|i| format!("img/{i}-é")).collect());
            EmbeddingDataset::new(k, d, f, labels, ids).unwrap()
        })
}

fn scored() -> impl Strategy<Value = ScoredLabels> {
    prop::collection::vec((0u8..10, any::<bool>()), 2..30).prop_map(|v| {
        let mut pairs: Vec<(f64, Label)> = v
            .into_iter()
            .map(|(s, g)| (s as f64 / 3.0, if g { Label::Generated } else { Label::Real }))
            .collect();
        pairs[0].1 = Label::Generated;
        pairs[1].1 = Label::Real;
        ScoredLabels::from_pairs(&pairs).unwrap()
    })
}

proptest! {
    #[test]
    fn pfse_round_trip(ds in dataset()) {
        let bytes = encode_embedding_file(&ds).unwrap();
        let back = decode_embedding_file(&bytes).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn checkpoint_round_trip(d in 1usize..6, h in 1usize..6, o in 1usize..3, seed in any::<u64>(), lg in -2.0f64..2.0, rate in 0.0f64..0.9) {
        let mut p = init_params(d, h, o, seed).unwrap().with_dropout(rate).unwrap();
        p.log_gamma = lg;
        prop_assert_eq!(decode_checkpoint(&encode_checkpoint(&p).unwrap()).unwrap(), p);
    }

    #[test]
    fn truncated_files_are_rejected(ds in dataset(), cut in 1usize..40) {
        let bytes = encode_embedding_file(&ds).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(decode_embedding_file(&bytes[..keep]).is_err());
    }

    #[test]
    fn signatures_are_bounded(f in fields(3, 4, 1), seed in any::<u64>()) {
        let p = init_params(4, 6, 2, seed).unwrap();
        let z = project(&f[0], &p).unwrap();
        prop_assert!(z.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn scores_nonnegative_and_order_free(refs in fields(2, 3, 6), test in fields(2, 3, 1), seed in any::<u64>()) {
        let p = init_params(3, 5, 1, seed).unwrap();
        let ds = EmbeddingDataset::uniform(2, 3, refs.clone(), Label::Real, "r").unwrap();
        let bank = build_reference_bank(&ds, &p).unwrap();
        let s = mdmf_score(&bank, &test[0], &p).unwrap();
        prop_assert!(s >= 0.0);
        let mut z = project_all(&refs, &p).unwrap();
        z.reverse();
        let rev = ReferenceBank::from_signatures(z, p.gamma()).unwrap();
        let s2 = rev.score_signature(&project(&test[0], &p).unwrap()).unwrap();
        prop_assert!((s - s2).abs() < 1e-12);
        prop_assert!(bank.leave_one_out_scores().unwrap().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn calibration_is_shift_equivariant(v in prop::collection::vec(-5.0f64..5.0, 2..40), c in -10.0f64..10.0, alpha in 0.0f64..4.0) {
        let tau = calibrate_threshold_real_only(&v, alpha).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let tau2 = calibrate_threshold_real_only(&shifted, alpha).unwrap();
        prop_assert!((tau2 - tau - c).abs() < 1e-9);
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        prop_assert!(tau >= mean - 1e-12);
        prop_assert!(calibrate_threshold_real_only(&v, 0.0).unwrap() <= max + 1e-12);
    }

    #[test]
    fn metrics_in_range_and_label_flip(d in scored()) {
        let a = auroc(&d).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let flipped: Vec<Label> = d.labels().iter().map(|l| if l.is_positive() { Label::Real } else { Label::Generated }).collect();
        let f = ScoredLabels::new(d.scores().to_vec(), flipped).unwrap();
        prop_assert!((auroc(&f).unwrap() - (1.0 - a)).abs() < 1e-12);
        let ap = average_precision(&d).unwrap();
        prop_assert!(ap > 0.0 && ap <= 1.0);
        let acc = best_accuracy(&d).unwrap().accuracy;
        let majority = d.positives().max(d.negatives()) as f64 / d.len() as f64;
        prop_assert!(acc >= majority);
    }

    #[test]
    fn metrics_invariant_to_monotone_maps(d in scored()) {
        let mapped = ScoredLabels::new(d.scores().iter().map(|s| (2.0 * s).exp() - 7.0).collect(), d.labels().to_vec()).unwrap();
        prop_assert_eq!(auroc(&d).unwrap(), auroc(&mapped).unwrap());
        prop_assert!((average_precision(&d).unwrap() - average_precision(&mapped).unwrap()).abs() < 1e-15);
        prop_assert_eq!(best_accuracy(&d).unwrap().accuracy, best_accuracy(&mapped).unwrap().accuracy);
    }

    #[test]
    fn pooling_ordered_and_voting_monotone(f in fields(6, 3, 1), w in prop::collection::vec(-2.0f64..2.0, 3), b in -1.0f64..1.0, t in 1usize..=6) {
        let clf = PatchClassifier { weight: w, bias: b };
        let mean = pooled_score(&f[0], &clf, Pooling::Mean).unwrap();
        let top = pooled_score(&f[0], &clf, Pooling::TopK(t)).unwrap();
        let max = pooled_score(&f[0], &clf, Pooling::Max).unwrap();
        prop_assert!(mean <= top + 1e-12 && top <= max + 1e-12);
        let votes: Vec<f64> = (0..=20).map(|i| voting_score(&f[0], &clf, i as f64 / 20.0).unwrap()).collect();
        prop_assert!(votes.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(votes.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
