use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikeaudit::mia::{
    attack_records, count_labels, roc_auc, roc_curve, run_attack, svm_score, train_rbf_svm, undersample_balance,
    AttackRecord, Membership, Origin, Standardizer, SvmParams,
};
use spikeaudit::nets::{AttackFeatures, FeatureSource};
use spikeaudit::tensor::Tensor;
use spikeaudit::Error;

/// Pairwise definition: `P(s_in > s_out) + ½·P(s_in = s_out)`.
fn brute_force_auc(scores: &[f64], members: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if members[i] && !members[j] {
                den += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn labelled() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..120)
        .prop_flat_map(|n| {
            (
                prop::collection::vec((0i32..12).prop_map(f64::from), n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
        .prop_filter("both labels", |(_, m)| m.iter().any(|&x| x) && m.iter().any(|&x| !x))
}

fn blobs(n: usize, shift: f64, origin: Origin, seed: u64) -> Vec<AttackRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 { Membership::In } else { Membership::Out };
            let c = if label == Membership::In { shift } else { -shift };
            AttackRecord {
                features: (0..3).map(|_| c + rng.random_range(-1.0..1.0)).collect(),
                label,
                origin,
                id: i as u64 + seed * 10_000,
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn auc_equals_pairwise_count((scores, members) in labelled()) {
        let got = roc_auc(&scores, &members).unwrap();
        prop_assert!((got - brute_force_auc(&scores, &members)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn auc_is_invariant_to_increasing_maps((scores, members) in labelled(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let base = roc_auc(&scores, &members).unwrap();
        let affine: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
        let cubed: Vec<f64> = scores.iter().map(|s| s.powi(3)).collect();
        prop_assert_eq!(roc_auc(&affine, &members).unwrap(), base);
        prop_assert_eq!(roc_auc(&cubed, &members).unwrap(), base);
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((roc_auc(&flipped, &members).unwrap() - (1.0 - base)).abs() < 1e-12);
    }

    #[test]
    fn roc_area_matches_auc((scores, members) in labelled()) {
        let pts = roc_curve(&scores, &members).unwrap();
        prop_assert_eq!(pts.first().copied(), Some((0.0, 0.0)));
        prop_assert_eq!(pts.last().copied(), Some((1.0, 1.0)));
        prop_assert!(pts.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
        let area: f64 = pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum();
        prop_assert!((area - roc_auc(&scores, &members).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn undersampling_balances_without_inventing_records(
        n_in in 1usize..60, n_out in 1usize..60, seed in any::<u64>()
    ) {
        let recs: Vec<AttackRecord> = (0..n_in + n_out)
            .map(|i| AttackRecord {
                features: vec![i as f64],
                label: if i < n_in { Membership::In } else { Membership::Out },
                origin: Origin::Shadow,
                id: i as u64,
            })
            .collect();
        let out = undersample_balance(&recs, seed).unwrap();
        let m = n_in.min(n_out);
        prop_assert_eq!(count_labels(&out), (m, m));
        let ids: HashSet<u64> = out.iter().map(|r| r.id).collect();
        prop_assert_eq!(ids.len(), out.len());
        prop_assert!(out.iter().all(|r| recs[r.id as usize] == *r));
        prop_assert_eq!(undersample_balance(&recs, seed).unwrap(), out);
    }
}

#[test]
fn separable_blobs_are_learned_with_a_feasible_dual() {
    let train = blobs(200, 1.5, Origin::Shadow, 1);
    let test = blobs(200, 1.5, Origin::Target, 2);
    let scaler = Standardizer::fit(&train).unwrap();
    let model = train_rbf_svm(&scaler.apply(&train), &SvmParams::default(), 0).unwrap();
    assert!(model.converged);
    assert!(model.box_feasible());
    assert!(model.equality_residual() <= 1e-6, "{}", model.equality_residual());
    let scores = svm_score(&model, &scaler.apply(&test));
    let members: Vec<bool> = test.iter().map(|r| r.label == Membership::In).collect();
    assert!(roc_auc(&scores, &members).unwrap() > 0.99);
}

#[test]
fn label_noise_gives_chance_auc() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut noise = |n: usize, origin: Origin, base: u64| -> Vec<AttackRecord> {
        (0..n)
            .map(|i| AttackRecord {
                features: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                label: if rng.random_bool(0.5) {
                    Membership::In
                } else {
                    Membership::Out
                },
                origin,
                id: base + i as u64,
            })
            .collect()
    };
    let train = noise(400, Origin::Shadow, 0);
    let test = noise(2000, Origin::Target, 10_000);
    let report = run_attack(&train, &test, &SvmParams::default(), 0).unwrap();
    assert!((report.auc - 0.5).abs() < 0.05, "{}", report.auc);
    assert_eq!(
        report.counts.train_balanced,
        2 * report.counts.train_in.min(report.counts.train_out)
    );
    assert!(report.box_feasible && report.equality_residual <= 1e-6);
}

#[test]
fn members_and_non_members_must_be_disjoint() {
    let feats = |ids: Vec<u64>| AttackFeatures {
        source: FeatureSource::Logits,
        values: Tensor::new([ids.len(), 2], vec![0.0; 2 * ids.len()]).unwrap(),
        ids,
    };
    let ok = attack_records(&feats(vec![1, 2]), &feats(vec![3]), Origin::Shadow).unwrap();
    assert_eq!(count_labels(&ok), (2, 1));
    assert!(matches!(
        attack_records(&feats(vec![1, 2]), &feats(vec![2]), Origin::Shadow),
        Err(Error::Contract(_))
    ));
}

#[test]
fn standardizer_centres_training_features() {
    let train = blobs(100, 0.3, Origin::Shadow, 4);
    let z = Standardizer::fit(&train).unwrap().apply(&train);
    for j in 0..3 {
        let col: Vec<f64> = z.iter().map(|r| r.features[j]).collect();
        let m = col.iter().sum::<f64>() / col.len() as f64;
        let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / col.len() as f64;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-9, "mean {m} var {v}");
    }
}
