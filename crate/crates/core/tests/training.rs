use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikeaudit::data::{DatasetName, DatasetSplit, Examples, Preprocessing};
use spikeaudit::nets::{
    build_model, checkpoint, evaluate_accuracy, extract_attack_features, run_temporal, snn_temporal_loss, train_model,
    Architecture, FeatureSource, Model, ModelSpec, OptimizerConfig, Output, Paradigm, QuantSet, TrainConfig,
};
use spikeaudit::quant::QuantSpec;
use spikeaudit::spiking::{LifConfig, SurrogateKind, SurrogateSpec};
use spikeaudit::tensor::{Graph, Tensor};

/// `n` points around three well separated centres in four dimensions.
fn clusters(n: usize, seed: u64) -> Examples {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: [[f32; 4]; 3] = [[2.0, 0.0, 0.0, 1.0], [0.0, 2.0, 0.0, -1.0], [0.0, 0.0, 2.0, 0.0]];
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let feats = labels
        .iter()
        .flat_map(|&l| centres[l].map(|c| c + rng.random_range(-0.3..0.3)))
        .collect();
    Examples::new(Tensor::new([n, 4], feats).unwrap(), labels, (0..n as u64).collect()).unwrap()
}

fn split(train: Examples, test: Examples, classes: usize) -> DatasetSplit {
    DatasetSplit {
        name: DatasetName::Iris,
        input_shape: train.example_shape().to_vec(),
        train,
        test,
        num_classes: classes,
        preprocessing: Preprocessing::Raw,
    }
}

fn fc_spec(paradigm: Paradigm, d: usize, classes: usize) -> ModelSpec {
    ModelSpec {
        architecture: Architecture::FcNet,
        paradigm,
        num_classes: classes,
        input_shape: vec![d],
        lif: (paradigm == Paradigm::Snn).then(LifConfig::default),
        quant: QuantSet::default(),
    }
}

fn cfg(epochs: usize, batch_size: usize) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerConfig::default(),
        epochs,
        batch_size,
        track_test: false,
    }
}

#[test]
fn ann_separates_toy_clusters_within_fifty_epochs() {
    let data = split(clusters(20, 1), clusters(30, 2), 3);
    let trained = train_model(
        build_model(fc_spec(Paradigm::Ann, 4, 3), 0).unwrap(),
        &data,
        &cfg(50, 4),
        0,
    )
    .unwrap();
    assert_eq!(evaluate_accuracy(&trained.model, &data.train).unwrap(), 1.0);
    assert_eq!(trained.curves.len(), 50);
}

#[test]
fn snn_with_fast_sigmoid_learns_toy_clusters() {
    let data = split(clusters(20, 3), clusters(30, 4), 3);
    let mut spec = fc_spec(Paradigm::Snn, 4, 3);
    spec.lif = Some(LifConfig {
        surrogate: SurrogateSpec::of(SurrogateKind::FastSigmoid),
        ..LifConfig::default()
    });
    let trained = train_model(build_model(spec, 0).unwrap(), &data, &cfg(200, 4), 0).unwrap();
    let acc = evaluate_accuracy(&trained.model, &data.train).unwrap();
    assert!(acc >= 0.95, "train accuracy {acc}");
}

#[test]
fn full_batch_loss_decreases_early_on() {
    let data = split(clusters(30, 5), clusters(9, 6), 3);
    let trained = train_model(
        build_model(fc_spec(Paradigm::Ann, 4, 3), 1).unwrap(),
        &data,
        &cfg(20, 30),
        1,
    )
    .unwrap();
    let losses: Vec<f64> = trained.curves.iter().map(|c| c.loss).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn ten_random_labels_are_memorized() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x: Vec<f32> = (0..10 * 20).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels: Vec<usize> = (0..10).map(|_| rng.random_range(0..3)).collect();
    let train = Examples::new(Tensor::new([10, 20], x).unwrap(), labels, (0..10).collect()).unwrap();
    let data = split(train.clone(), train, 3);
    let trained = train_model(
        build_model(fc_spec(Paradigm::Ann, 20, 3), 2).unwrap(),
        &data,
        &cfg(200, 5),
        2,
    )
    .unwrap();
    assert_eq!(evaluate_accuracy(&trained.model, &data.train).unwrap(), 1.0);
}

#[test]
fn constant_predictor_scores_one_third() {
    let mut model = build_model(fc_spec(Paradigm::Ann, 4, 3), 0).unwrap();
    for p in &mut model.params {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        if p.name == "fc2.bias" {
            p.value.data_mut()[1] = 1.0;
        }
    }
    assert!((evaluate_accuracy(&model, &clusters(30, 7)).unwrap() - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn temporal_loss_sums_per_step_cross_entropy() {
    let steps = [[1.0f32, -0.5, 0.25, 2.0, 0.0, -1.0], [0.1, 0.2, 0.3, -2.0, 3.0, 0.5]];
    let targets = [2usize, 0];
    let ce = |z: &[f32], t: usize| {
        let z: Vec<f64> = z.iter().map(|&v| v as f64).collect();
        let m = z.iter().cloned().fold(f64::MIN, f64::max);
        m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[t]
    };
    let expect: f64 = steps
        .iter()
        .map(|s| (ce(&s[..3], targets[0]) + ce(&s[3..], targets[1])) / 2.0)
        .sum();
    let mut g = Graph::<f32>::new();
    let mems: Vec<_> = steps
        .iter()
        .map(|s| g.constant(Tensor::new([2, 3], s.to_vec()).unwrap()))
        .collect();
    let loss = snn_temporal_loss(&mut g, &mems, &targets, 2).unwrap();
    assert!((g.value(loss).item() as f64 - expect).abs() < 1e-5);
    assert!(snn_temporal_loss(&mut g, &mems, &targets, 3).is_err());
}

#[test]
fn training_is_reproducible_per_seed() {
    let data = split(clusters(24, 8), clusters(9, 9), 3);
    let run = |seed| {
        train_model(
            build_model(fc_spec(Paradigm::Snn, 4, 3), seed).unwrap(),
            &data,
            &cfg(3, 8),
            seed,
        )
        .unwrap()
        .model
    };
    let (a, b, c) = (run(5), run(5), run(6));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn checkpoints_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = fc_spec(Paradigm::Snn, 4, 3);
    spec.quant = QuantSet {
        weight: Some(QuantSpec::weight(4)),
        state: Some(QuantSpec::membrane(4, 0.75)),
    };
    let model = build_model(spec, 11).unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&model, &path).unwrap();
    let back: Model = checkpoint::load(&path).unwrap();
    assert_eq!(back, model);
    let probe = clusters(6, 10);
    assert_eq!(
        extract_attack_features(&back, &probe).unwrap(),
        extract_attack_features(&model, &probe).unwrap()
    );

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xFF;
    std::fs::write(&path, &bytes).unwrap();
    assert!(checkpoint::load(&path).is_err());
}

#[test]
fn attack_features_come_from_logits_or_final_membrane() {
    let probe = clusters(5, 12);
    let ann = build_model(fc_spec(Paradigm::Ann, 4, 3), 3).unwrap();
    let feats = extract_attack_features(&ann, &probe).unwrap();
    assert_eq!(feats.source, FeatureSource::Logits);
    let mut g = Graph::new();
    let (_, out) = ann.forward(&mut g, probe.features.clone(), false).unwrap();
    let Output::Logits(z) = out else {
        panic!("ANN emits logits")
    };
    assert_eq!(feats.values.data(), g.value(z).data());

    let snn = build_model(fc_spec(Paradigm::Snn, 4, 3), 3).unwrap();
    let feats = extract_attack_features(&snn, &probe).unwrap();
    assert_eq!(feats.source, FeatureSource::FinalMembrane);
    let (g, rec) = run_temporal(&snn, probe.features.clone()).unwrap();
    assert_eq!(rec.membranes.len(), 25);
    assert_eq!(feats.values.data(), g.value(*rec.membranes.last().unwrap()).data());
    assert_eq!(feats.ids, probe.ids);
}

#[test]
fn convnet_parameter_counts() {
    let conv = |c: usize, hw: usize| {
        let spec = ModelSpec {
            architecture: Architecture::ConvNet,
            paradigm: Paradigm::Ann,
            num_classes: 10,
            input_shape: vec![c, hw, hw],
            lif: None,
            quant: QuantSet::default(),
        };
        build_model(spec, 0).unwrap().num_parameters()
    };
    let expect =
        |c: usize, flat: usize| (32 * c * 25 + 32) + (64 * 32 * 25 + 64) + (flat * 1000 + 1000) + (1000 * 10 + 10);
    assert_eq!(conv(1, 28), expect(1, 64 * 4 * 4));
    assert_eq!(conv(3, 32), expect(3, 64 * 5 * 5));
    assert_eq!(
        build_model(fc_spec(Paradigm::Ann, 4, 3), 0).unwrap().num_parameters(),
        4 * 1000 + 1000 + 1000 * 3 + 3
    );
}
