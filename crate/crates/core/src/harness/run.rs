use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, QuantConfig};
use crate::data::{load_dataset, preprocess, shadow_subsample, DatasetName, DatasetSplit, Examples};
use crate::error::{Result, StageExt};
use crate::mia::{attack_records, run_attack, LabelCounts, Origin};
use crate::nets::{build_model, checkpoint, evaluate, train_model, Architecture, EpochStats, Paradigm};
use crate::rng::stream;
use crate::spiking::SurrogateKind;

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Where a run reads data and writes artifacts.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub data_root: PathBuf,
    /// Directory for target and shadow checkpoints; none are written when unset.
    pub checkpoint_dir: Option<PathBuf>,
}

impl RunOptions {
    pub fn new(data_root: impl Into<PathBuf>) -> Self {
        Self {
            data_root: data_root.into(),
            checkpoint_dir: None,
        }
    }
}

/// Outcome of one `(config, seed)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub digest: String,
    pub seed: u64,
    pub dataset: DatasetName,
    pub paradigm: Paradigm,
    pub architecture: Architecture,
    pub quant: QuantConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surrogate: Option<SurrogateKind>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub mia_auc: f64,
    pub attack_accuracy: f64,
    pub shadow_train_accuracy: f64,
    pub shadow_test_accuracy: f64,
    pub attack_counts: LabelCounts,
    pub svm_converged: bool,
    /// `|Σ α_i y_i|` of the fitted attacker.
    pub svm_equality_residual: f64,
    pub svm_box_feasible: bool,
    pub curves: Vec<EpochStats>,
    pub wall_time_s: f64,
    pub engine_version: String,
    pub config: ExperimentConfig,
}

impl ResultRecord {
    /// Identity of the row this record belongs to in a report.
    pub fn quant_label(&self) -> String {
        self.quant.label(self.paradigm)
    }
}

fn flatten(ex: &mut Examples) -> Result<()> {
    let n = ex.len();
    let d = ex.example_len();
    let features = std::mem::replace(&mut ex.features, crate::tensor::Tensor::zeros([0]));
    ex.features = features.reshape([n, d])?;
    Ok(())
}

/// Loads and preprocesses the configured dataset, flattening images for FCNets.
pub fn prepare_data(cfg: &ExperimentConfig, seed: u64, data_root: &Path) -> Result<DatasetSplit> {
    let mut split = preprocess(load_dataset(cfg.dataset, data_root, cfg.subset_fraction, seed)?)?;
    if cfg.architecture == Architecture::FcNet && split.input_shape.len() > 1 {
        if split.augment().is_some() {
            return Err(crate::Error::Config(
                "FCNet cannot be trained on augmented image data".into(),
            ));
        }
        flatten(&mut split.train)?;
        flatten(&mut split.test)?;
        split.input_shape = vec![split.input_shape.iter().product()];
    }
    Ok(split)
}

/// load → preprocess → train target → shadow subsample → train shadow → attack.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64, opts: &RunOptions) -> Result<ResultRecord> {
    let start = Instant::now();
    cfg.validate().stage("config")?;
    let split = prepare_data(cfg, seed, &opts.data_root).stage("load")?;
    let spec = cfg.model_spec(split.num_classes, split.input_shape.clone());

    let target = build_model(spec.clone(), seed).stage("build")?;
    let target = train_model(target, &split, &cfg.train, seed).stage("train_target")?;

    let (shadow_train, shadow_out) =
        shadow_subsample(&split.train, cfg.attack.shadow_fraction, seed).stage("shadow_subsample")?;
    let shadow_split = split.with_train_test(shadow_train, shadow_out);
    let shadow_seed: u64 = stream(seed, "shadow").random();
    let shadow = build_model(spec, shadow_seed).stage("build")?;
    let shadow = train_model(shadow, &shadow_split, &cfg.train, shadow_seed).stage("train_shadow")?;

    let (train_accuracy, target_in) = evaluate(&target.model, &split.train).stage("evaluate")?;
    let (test_accuracy, target_out) = evaluate(&target.model, &split.test).stage("evaluate")?;
    let (shadow_train_accuracy, shadow_in) = evaluate(&shadow.model, &shadow_split.train).stage("evaluate")?;
    let (shadow_test_accuracy, shadow_out) = evaluate(&shadow.model, &shadow_split.test).stage("evaluate")?;
    let attack_train = attack_records(&shadow_in, &shadow_out, Origin::Shadow).stage("assemble")?;
    let attack_test = attack_records(&target_in, &target_out, Origin::Target).stage("assemble")?;
    let report = run_attack(&attack_train, &attack_test, &cfg.attack.svm, seed)?;

    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir)
            .map_err(|e| crate::Error::io(dir, e))
            .stage("checkpoint")?;
        let stem = format!("{}-{seed}", &cfg.digest()[..16]);
        checkpoint::save(&target.model, &dir.join(format!("{stem}-target.ckpt"))).stage("checkpoint")?;
        checkpoint::save(&shadow.model, &dir.join(format!("{stem}-shadow.ckpt"))).stage("checkpoint")?;
    }

    Ok(ResultRecord {
        digest: cfg.digest(),
        seed,
        dataset: cfg.dataset,
        paradigm: cfg.paradigm,
        architecture: cfg.architecture,
        quant: cfg.quant,
        surrogate: (cfg.paradigm == Paradigm::Snn).then_some(cfg.lif.surrogate.kind),
        train_accuracy,
        test_accuracy,
        mia_auc: report.auc,
        attack_accuracy: report.attack_accuracy,
        shadow_train_accuracy,
        shadow_test_accuracy,
        attack_counts: report.counts,
        svm_converged: report.converged,
        svm_equality_residual: report.equality_residual,
        svm_box_feasible: report.box_feasible,
        curves: target.curves,
        wall_time_s: start.elapsed().as_secs_f64(),
        engine_version: ENGINE_VERSION.to_string(),
        config: ExperimentConfig {
            seeds: vec![seed],
            ..cfg.clone()
        },
    })
}
