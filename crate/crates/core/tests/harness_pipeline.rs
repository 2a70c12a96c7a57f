use std::io::Write;
use std::path::Path;

use proptest::prelude::*;
use spikeaudit::data::{write_tabular, DatasetName, Examples};
use spikeaudit::harness::{
    curves, expand, read_records, report, run_cells, run_experiment, summarize, table, BitsTarget, ExperimentConfig,
    ReportStyle, ResultRecord, ResultsStore, RunOptions, SweepAxes,
};
use spikeaudit::nets::Paradigm;
use spikeaudit::spiking::SurrogateKind;
use spikeaudit::tensor::Tensor;
use spikeaudit::Error;

/// Three noisy, overlapping classes in the tabular layout the loader expects.
fn write_toy_iris(root: &Path) {
    let dir = root.join("iris");
    std::fs::create_dir_all(&dir).unwrap();
    let n = 60;
    let feats = (0..n * 4)
        .map(|k| {
            let (i, j) = (k / 4, k % 4);
            let class = i % 3;
            (class as f32) * if j == class { 1.5 } else { 0.2 } + ((k * 37 % 17) as f32) / 10.0
        })
        .collect();
    let ex = Examples::new(
        Tensor::new([n, 4], feats).unwrap(),
        (0..n).map(|i| i % 3).collect(),
        (0..n as u64).collect(),
    )
    .unwrap();
    let names: Vec<String> = ["a", "b", "c", "d"].map(String::from).to_vec();
    write_tabular(&dir.join("iris.csv"), &names, &ex).unwrap();
}

fn toy_config(paradigm: Paradigm, seeds: Vec<u64>) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::defaults(DatasetName::Iris, paradigm);
    cfg.train.epochs = 4;
    cfg.train.batch_size = 16;
    cfg.seeds = seeds;
    cfg
}

fn without_time(mut r: ResultRecord) -> ResultRecord {
    r.wall_time_s = 0.0;
    r
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn summary_matches_welford(values in prop::collection::vec(-1e3f64..1e3, 1..50)) {
        let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
        for &x in &values {
            n += 1.0;
            let delta = x - mean;
            mean += delta / n;
            m2 += delta * (x - mean);
        }
        let std = if values.len() > 1 { (m2 / (n - 1.0)).sqrt() } else { 0.0 };
        let s = summarize(&values).unwrap();
        prop_assert_eq!(s.n, values.len());
        prop_assert!((s.mean - mean).abs() <= 1e-12 * (1.0 + mean.abs()));
        prop_assert!((s.std - std).abs() <= 1e-12 * (1.0 + std));
    }
}

#[test]
fn sweep_products_have_expected_sizes() {
    let template = ExperimentConfig::defaults(DatasetName::Mnist, Paradigm::Snn);
    let axes = SweepAxes {
        bits: Some(vec![2, 4, 8]),
        thresholds: Some(vec![0.5, 1.0, 1.5]),
        ..SweepAxes::default()
    };
    let cells = expand(&template, &axes).unwrap();
    assert_eq!(cells.len(), 27);
    let mut digests: Vec<String> = cells.iter().map(|c| c.digest()).collect();
    digests.sort();
    digests.dedup();
    assert_eq!(digests.len(), 9);

    let axes = SweepAxes {
        surrogates: Some(SurrogateKind::ALL.to_vec()),
        seeds: Some(vec![0, 1, 2]),
        ..SweepAxes::default()
    };
    assert_eq!(expand(&template, &axes).unwrap().len(), 15);

    let axes = SweepAxes {
        bits: Some(vec![8]),
        bits_target: BitsTarget::Weight,
        ..SweepAxes::default()
    };
    let cells = expand(&template, &axes).unwrap();
    assert!(cells
        .iter()
        .all(|c| c.config.quant.weight_bits == Some(8) && c.config.quant.state_bits.is_none()));
}

#[test]
fn pipeline_records_are_deterministic_and_feasible() {
    let data = tempfile::tempdir().unwrap();
    write_toy_iris(data.path());
    let opts = RunOptions::new(data.path());
    for paradigm in [Paradigm::Ann, Paradigm::Snn] {
        let cfg = toy_config(paradigm, vec![3]);
        let a = run_experiment(&cfg, 3, &opts).unwrap();
        let b = run_experiment(&cfg, 3, &opts).unwrap();
        assert_eq!(without_time(a.clone()), without_time(b));
        assert_eq!(a.curves.len(), 4);
        assert!((0.0..=1.0).contains(&a.mia_auc));
        assert!(a.svm_box_feasible && a.svm_equality_residual <= 1e-6);
        assert_eq!(a.attack_counts.test_in + a.attack_counts.test_out, 60);
        assert_eq!(a.surrogate.is_some(), paradigm == Paradigm::Snn);
    }
}

#[test]
fn missing_data_fails_at_load_before_training() {
    let empty = tempfile::tempdir().unwrap();
    let err = run_experiment(
        &toy_config(Paradigm::Ann, vec![0]),
        0,
        &RunOptions::new(empty.path().join("absent")),
    )
    .unwrap_err();
    assert_eq!(err.stage(), Some("load"));
    assert!(matches!(err.root(), Error::Format { .. }));
}

#[test]
fn sweeps_resume_and_isolate_failures() {
    let data = tempfile::tempdir().unwrap();
    write_toy_iris(data.path());
    let out = tempfile::tempdir().unwrap();
    let cells = expand(&toy_config(Paradigm::Ann, vec![0, 1]), &SweepAxes::default()).unwrap();

    let store = ResultsStore::open(out.path()).unwrap();
    let first = run_cells(&cells, &RunOptions::new(data.path()), &store, 2).unwrap();
    assert!(first.success());
    assert_eq!((first.records.len(), first.skipped), (2, 0));
    assert_eq!(first.records.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![0, 1]);

    let reopened = ResultsStore::open(out.path()).unwrap();
    let second = run_cells(&cells, &RunOptions::new(data.path()), &reopened, 1).unwrap();
    assert_eq!((second.records.len(), second.skipped), (0, 2));
    assert_eq!(reopened.records().unwrap().len(), 2);
    assert!(!reopened.append(&first.records[0]).unwrap());
    assert_eq!(reopened.records().unwrap().len(), 2);

    let more = expand(&toy_config(Paradigm::Ann, vec![2, 3]), &SweepAxes::default()).unwrap();
    let broken = run_cells(&more, &RunOptions::new(data.path().join("absent")), &reopened, 1).unwrap();
    assert!(!broken.success());
    assert_eq!(broken.failed.len(), 2);
    assert!(broken.failed.iter().all(|f| f.stage == Some("load")));
    assert_eq!(reopened.records().unwrap().len(), 2);
}

#[test]
fn torn_final_line_is_ignored_but_inner_corruption_is_not() {
    let data = tempfile::tempdir().unwrap();
    write_toy_iris(data.path());
    let out = tempfile::tempdir().unwrap();
    let store = ResultsStore::open(out.path()).unwrap();
    let rec = run_experiment(&toy_config(Paradigm::Ann, vec![0]), 0, &RunOptions::new(data.path())).unwrap();
    store.append(&rec).unwrap();
    let path = store.path().to_path_buf();

    let line = serde_json::to_string(&rec).unwrap();
    let mut f = std::fs::OpenOptions::new().append(true).open(&path).unwrap();
    f.write_all(&line.as_bytes()[..line.len() / 2]).unwrap();
    drop(f);
    assert_eq!(read_records(&path).unwrap(), vec![rec.clone()]);
    let reopened = ResultsStore::open(out.path()).unwrap();
    assert!(reopened.contains(&rec.digest, 0));

    let mut f = std::fs::OpenOptions::new().append(true).open(&path).unwrap();
    f.write_all(format!("\n{line}\n").as_bytes()).unwrap();
    drop(f);
    assert!(matches!(read_records(&path), Err(Error::Format { .. })));
}

#[test]
fn reports_group_rows_and_curve_points() {
    let data = tempfile::tempdir().unwrap();
    write_toy_iris(data.path());
    let base = run_experiment(&toy_config(Paradigm::Snn, vec![0]), 0, &RunOptions::new(data.path())).unwrap();
    let mut records = Vec::new();
    for bits in [2u32, 4] {
        for threshold in [0.5, 1.0, 1.5] {
            for seed in 0..3u64 {
                let mut r = base.clone();
                r.seed = seed;
                r.quant.state_bits = Some(bits);
                r.quant.threshold = threshold;
                r.mia_auc = 0.5 + 0.01 * seed as f64;
                records.push(r);
            }
        }
    }
    let pts = curves(&records).unwrap();
    assert_eq!(pts.len(), 6);
    for p in &pts {
        assert_eq!(p.runs, 3);
        assert!((p.mia_auc - 0.51).abs() < 1e-12 && (p.mia_auc_std - 0.01).abs() < 1e-12);
    }
    let csv = report(&records, ReportStyle::Curves).unwrap();
    assert_eq!(csv.lines().count(), 7);

    let t = table(&records).unwrap();
    assert_eq!(t.paradigms, vec![Paradigm::Snn]);
    assert_eq!(t.rows.len(), 6);
    let text = report(&records, ReportStyle::Table).unwrap();
    assert!(text.contains("snn MIA AUC"));
    assert!(text.contains("0.51(±0.010)"));

    assert!(matches!(report(&[], ReportStyle::Table), Err(Error::Contract(_))));
    let mut mixed = records.clone();
    mixed[0].dataset = DatasetName::BreastCancer;
    assert!(matches!(table(&mixed), Err(Error::Contract(_))));
    assert!(matches!(curves(&[base]), Err(Error::Contract(_))));
}

#[test]
fn config_files_reject_unknown_keys() {
    let cfg = toy_config(Paradigm::Snn, vec![0, 1]);
    let text = cfg.to_toml().unwrap();
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    assert!(ExperimentConfig::from_toml(&format!("{text}\nbogus = 1\n")).is_err());
    let mut other = cfg.clone();
    other.seeds = vec![7];
    assert_eq!(other.digest(), cfg.digest());
    other.lif.beta = 0.9;
    assert_ne!(other.digest(), cfg.digest());
}
