use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use flate2::write::GzEncoder;
use flate2::Compression;
use proptest::prelude::*;
use spikeaudit::data::{
    load_dataset, load_tabular, parse_cifar_records, parse_idx_images, preprocess, shadow_subsample, stratified_split,
    write_cifar, write_idx, write_tabular, DatasetName, Examples, Preprocessing, TEST_ID_BASE,
};
use spikeaudit::tensor::Tensor;
use spikeaudit::Error;

fn images(n: usize, shape: &[usize], seed: u64) -> Examples {
    let len: usize = shape.iter().product();
    let mut s = seed;
    let pixels = (0..n * len)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 56) as f32
        })
        .collect();
    let mut full = vec![n];
    full.extend_from_slice(shape);
    Examples::new(
        Tensor::new(full, pixels).unwrap(),
        (0..n).map(|i| i % 10).collect(),
        (0..n as u64).collect(),
    )
    .unwrap()
}

fn gzip(path: &Path) {
    let raw = std::fs::read(path).unwrap();
    let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
    enc.write_all(&raw).unwrap();
    std::fs::write(format!("{}.gz", path.display()), enc.finish().unwrap()).unwrap();
    std::fs::remove_file(path).unwrap();
}

fn labels_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..4, 8..120).prop_filter("every class needs two examples", |l| {
        (0..4).all(|c| {
            let n = l.iter().filter(|&&x| x == c).count();
            n == 0 || n >= 2
        })
    })
}

fn indexed(labels: &[usize]) -> Examples {
    let n = labels.len();
    Examples::new(
        Tensor::new([n, 1], (0..n).map(|i| i as f32).collect()).unwrap(),
        labels.to_vec(),
        (100..100 + n as u64).collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tabular_round_trip(
        (n, d, values) in (1usize..20, 1usize..6)
            .prop_flat_map(|(n, d)| (Just(n), Just(d), prop::collection::vec(-1e4f32..1e4, n * d)))
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let names: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
        let ex = Examples::new(
            Tensor::new([n, d], values).unwrap(),
            (0..n).map(|i| i % 3).collect(),
            (0..n as u64).collect(),
        ).unwrap();
        write_tabular(&path, &names, &ex).unwrap();
        let (read_names, back) = load_tabular(&path).unwrap();
        prop_assert_eq!(read_names, names);
        prop_assert_eq!(back, ex);
    }

    #[test]
    fn stratified_split_partitions_each_class(labels in labels_strategy(), fraction in 0.1f64..0.9, seed in any::<u64>()) {
        let ex = indexed(&labels);
        let (a, b) = stratified_split(&ex, fraction, seed).unwrap();
        let ids_a: HashSet<u64> = a.ids.iter().copied().collect();
        let ids_b: HashSet<u64> = b.ids.iter().copied().collect();
        prop_assert!(ids_a.is_disjoint(&ids_b));
        prop_assert_eq!(ids_a.len() + ids_b.len(), ex.len());
        for c in 0..4 {
            let n_c = labels.iter().filter(|&&l| l == c).count();
            if n_c == 0 {
                continue;
            }
            let want = ((fraction * n_c as f64).round() as usize).clamp(1, n_c - 1);
            prop_assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), want);
        }
        prop_assert!(a.ids.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(b.ids.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(stratified_split(&ex, fraction, seed).unwrap(), (a, b));
    }

    #[test]
    fn shadow_sample_is_drawn_from_target_train(labels in labels_strategy(), seed in any::<u64>()) {
        let ex = indexed(&labels);
        let (s_in, s_out) = shadow_subsample(&ex, 0.8, seed).unwrap();
        let all: HashSet<u64> = ex.ids.iter().copied().collect();
        prop_assert!(s_in.ids.iter().chain(&s_out.ids).all(|id| all.contains(id)));
        prop_assert_eq!(s_in.len() + s_out.len(), ex.len());
    }
}

#[test]
fn split_counts_for_fifty_thousand_images() {
    let labels: Vec<usize> = (0..50_000).map(|i| i % 10).collect();
    let (a, b) = stratified_split(&indexed(&labels), 0.8, 7).unwrap();
    assert_eq!((a.len(), b.len()), (40_000, 10_000));
    assert!(a.class_counts(10).iter().all(|&c| c == 4_000));
}

#[test]
fn idx_files_load_plain_and_gzipped() {
    let dir = tempfile::tempdir().unwrap();
    let mnist = dir.path().join("mnist");
    std::fs::create_dir_all(&mnist).unwrap();
    let train = images(60, &[1, 28, 28], 1);
    let test = images(20, &[1, 28, 28], 2);
    write_idx(
        &mnist.join("train-images-idx3-ubyte"),
        &mnist.join("train-labels-idx1-ubyte"),
        &train,
    )
    .unwrap();
    write_idx(
        &mnist.join("t10k-images-idx3-ubyte"),
        &mnist.join("t10k-labels-idx1-ubyte"),
        &test,
    )
    .unwrap();
    gzip(&mnist.join("t10k-images-idx3-ubyte"));

    let split = load_dataset(DatasetName::Mnist, dir.path(), 1.0, 0).unwrap();
    assert_eq!(split.train.features, train.features);
    assert_eq!(split.train.labels, train.labels);
    assert_eq!(split.test.features, test.features);
    assert_eq!(split.test.ids[0], TEST_ID_BASE);
    assert_eq!(split.input_shape, vec![1, 28, 28]);
    assert_eq!(split.preprocessing, Preprocessing::Raw);
}

#[test]
fn cifar_records_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("cifar10");
    std::fs::create_dir_all(&root).unwrap();
    let train = images(30, &[3, 32, 32], 3);
    let test = images(10, &[3, 32, 32], 4);
    write_cifar(&root.join("data_batch_1.bin"), &train).unwrap();
    write_cifar(&root.join("test_batch.bin"), &test).unwrap();
    let split = load_dataset(DatasetName::Cifar10, dir.path(), 1.0, 0).unwrap();
    assert_eq!(split.train.features, train.features);
    assert_eq!(split.test.labels, test.labels);
    assert_eq!(split.num_classes, 10);
}

#[test]
fn truncated_files_report_offsets() {
    let dir = tempfile::tempdir().unwrap();
    let ex = images(4, &[1, 5, 5], 5);
    let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
    write_idx(&ip, &lp, &ex).unwrap();
    let mut buf = std::fs::read(&ip).unwrap();
    buf.truncate(16 + 60);
    match parse_idx_images(&buf, &ip) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 76),
        other => panic!("expected a format error, got {other:?}"),
    }

    let cp = dir.path().join("c.bin");
    write_cifar(&cp, &images(3, &[3, 32, 32], 6)).unwrap();
    let mut buf = std::fs::read(&cp).unwrap();
    buf.truncate(2 * 3073 + 100);
    match parse_cifar_records(&buf, &cp) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 2 * 3073),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn missing_root_and_files_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    assert!(matches!(
        load_dataset(DatasetName::Iris, &missing, 1.0, 0),
        Err(Error::Format { .. })
    ));
    assert!(matches!(
        load_dataset(DatasetName::Mnist, dir.path(), 1.0, 0),
        Err(Error::Format { .. })
    ));
}

#[test]
fn image_subset_is_stratified_per_split() {
    let dir = tempfile::tempdir().unwrap();
    let mnist = dir.path().join("mnist");
    std::fs::create_dir_all(&mnist).unwrap();
    write_idx(
        &mnist.join("train-images-idx3-ubyte"),
        &mnist.join("train-labels-idx1-ubyte"),
        &images(200, &[1, 4, 4], 1),
    )
    .unwrap();
    write_idx(
        &mnist.join("t10k-images-idx3-ubyte"),
        &mnist.join("t10k-labels-idx1-ubyte"),
        &images(100, &[1, 4, 4], 2),
    )
    .unwrap();
    let split = load_dataset(DatasetName::Mnist, dir.path(), 0.2, 3).unwrap();
    assert_eq!((split.train.len(), split.test.len()), (40, 20));
    assert!(split.train.class_counts(10).iter().all(|&c| c == 4));
}

#[test]
fn standardization_uses_training_statistics_only() {
    let dir = tempfile::tempdir().unwrap();
    let iris = dir.path().join("iris");
    std::fs::create_dir_all(&iris).unwrap();
    let n = 30;
    let values: Vec<f32> = (0..n * 2)
        .map(|i| (i * 7 % 13) as f32 + if i % 2 == 0 { 0.5 } else { 40.0 })
        .collect();
    let ex = Examples::new(
        Tensor::new([n, 2], values).unwrap(),
        (0..n).map(|i| i % 3).collect(),
        (0..n as u64).collect(),
    )
    .unwrap();
    write_tabular(&iris.join("iris.csv"), &["a".into(), "b".into()], &ex).unwrap();
    let raw = load_dataset(DatasetName::Iris, dir.path(), 1.0, 9).unwrap();
    let prepared = preprocess(raw.clone()).unwrap();

    let Preprocessing::Standardize { mean, std, stats_from } = &prepared.preprocessing else {
        panic!("tabular data must be standardized");
    };
    assert_eq!(stats_from, "train");
    for j in 0..2 {
        let col: Vec<f64> = raw.train.features.data().chunks_exact(2).map(|r| r[j] as f64).collect();
        let m = col.iter().sum::<f64>() / col.len() as f64;
        let s = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
        assert!((mean[j] - m).abs() < 1e-9 && (std[j] - s).abs() < 1e-9);
        let z: Vec<f64> = prepared
            .train
            .features
            .data()
            .chunks_exact(2)
            .map(|r| r[j] as f64)
            .collect();
        assert!(z.iter().sum::<f64>().abs() / (z.len() as f64) < 1e-5);
    }
    assert!(preprocess(prepared).is_err());
}
