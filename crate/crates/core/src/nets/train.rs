use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Model, Output, Paradigm};
use crate::data::{augment_batch, DatasetSplit, Examples};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::{Graph, Tensor, Var};

/// Examples per inference batch.
const EVAL_BATCH: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Evaluate test accuracy after every epoch.
    pub track_test: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            epochs: 10,
            batch_size: 128,
            track_test: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", o.lr)));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 {
            return Err(Error::Config(
                "Adam decay rates must lie in [0, 1) and eps be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer without weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: OptimizerConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    steps: i32,
}

impl Adam {
    pub fn new(cfg: OptimizerConfig, model: &Model) -> Self {
        let zeros = || model.params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            steps: 0,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &[Option<Vec<f32>>]) {
        self.steps += 1;
        let (b1, b2) = (self.cfg.beta1 as f32, self.cfg.beta2 as f32);
        let c1 = 1.0 - b1.powi(self.steps);
        let c2 = 1.0 - b2.powi(self.steps);
        let lr = self.cfg.lr as f32;
        let eps = self.cfg.eps as f32;
        for (k, p) in model.params.iter_mut().enumerate() {
            let Some(g) = &grads[k] else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    /// Accuracy over the epoch's training batches as they were seen.
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: Model,
    pub curves: Vec<EpochStats>,
}

/// `Σ_t CE(membrane_t, targets)` over the output-layer records.
pub fn snn_temporal_loss(g: &mut Graph<f32>, membranes: &[Var], targets: &[usize], steps: usize) -> Result<Var> {
    if membranes.len() != steps || steps == 0 {
        return Err(Error::Contract(format!(
            "{} membrane records for {steps} steps",
            membranes.len()
        )));
    }
    let mut total = g.softmax_cross_entropy(membranes[0], targets)?;
    for &m in &membranes[1..] {
        let l = g.softmax_cross_entropy(m, targets)?;
        total = g.add(total, l)?;
    }
    Ok(total)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Class with the most output spikes; ties go to the highest final membrane.
fn spike_vote(counts: &[f32], membrane: &[f32]) -> usize {
    let top = counts.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut best = None::<usize>;
    for (i, &c) in counts.iter().enumerate() {
        if c == top && best.is_none_or(|b| membrane[i] > membrane[b]) {
            best = Some(i);
        }
    }
    best.unwrap_or(0)
}

/// Predictions and attack features of one forward pass.
fn decode(model: &Model, g: &Graph<f32>, out: &Output) -> (Vec<usize>, Vec<f32>) {
    let c = model.spec.num_classes;
    match out {
        Output::Logits(z) => {
            let logits = g.value(*z).data();
            (logits.chunks_exact(c).map(argmax).collect(), logits.to_vec())
        }
        Output::Temporal(rec) => {
            let last = g.value(*rec.membranes.last().expect("at least one step")).data();
            let mut counts = vec![0.0f32; last.len()];
            for &s in &rec.spikes {
                for (acc, &v) in counts.iter_mut().zip(g.value(s).data()) {
                    *acc += v;
                }
            }
            let preds = counts
                .chunks_exact(c)
                .zip(last.chunks_exact(c))
                .map(|(cnt, mem)| spike_vote(cnt, mem))
                .collect();
            (preds, last.to_vec())
        }
    }
}

/// Predicted classes and output-layer features for every example.
pub fn predict(model: &Model, ex: &Examples) -> Result<(Vec<usize>, Tensor<f32>)> {
    let mut preds = Vec::with_capacity(ex.len());
    let mut feats = Vec::with_capacity(ex.len() * model.spec.num_classes);
    let mut start = 0;
    while start < ex.len() {
        let len = EVAL_BATCH.min(ex.len() - start);
        let mut g = Graph::new();
        let x = ex.features.rows(start, len)?;
        let (_, out) = model.forward(&mut g, x, false)?;
        let (p, f) = decode(model, &g, &out);
        preds.extend(p);
        feats.extend(f);
        start += len;
    }
    Ok((preds, Tensor::new([ex.len(), model.spec.num_classes], feats)?))
}

pub fn evaluate_accuracy(model: &Model, ex: &Examples) -> Result<f64> {
    if ex.is_empty() {
        return Err(Error::Contract("accuracy of an empty split".into()));
    }
    let (preds, _) = predict(model, ex)?;
    let hits = preds.iter().zip(&ex.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / ex.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Logits,
    FinalMembrane,
}

/// Per-example attack inputs: one row of `num_classes` values per example.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackFeatures {
    pub source: FeatureSource,
    pub values: Tensor<f32>,
    pub ids: Vec<u64>,
}

impl AttackFeatures {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.values.shape()[1];
        &self.values.data()[i * c..(i + 1) * c]
    }
}

/// ANN: raw logits. SNN: output-layer membrane at the final step.
pub fn extract_attack_features(model: &Model, ex: &Examples) -> Result<AttackFeatures> {
    Ok(evaluate(model, ex)?.1)
}

/// Accuracy and attack features from a single inference pass.
pub fn evaluate(model: &Model, ex: &Examples) -> Result<(f64, AttackFeatures)> {
    if ex.is_empty() {
        return Err(Error::Contract("evaluation of an empty split".into()));
    }
    let (preds, values) = predict(model, ex)?;
    let hits = preds.iter().zip(&ex.labels).filter(|(p, l)| p == l).count();
    if !values.is_finite() {
        return Err(Error::NonFinite {
            op: "extract_attack_features",
        });
    }
    let source = match model.spec.paradigm {
        Paradigm::Ann => FeatureSource::Logits,
        Paradigm::Snn => FeatureSource::FinalMembrane,
    };
    let feats = AttackFeatures {
        source,
        values,
        ids: ex.ids.clone(),
    };
    Ok((hits as f64 / ex.len() as f64, feats))
}

/// Seeded mini-batch training. Returns the final model and per-epoch curves.
pub fn train_model(mut model: Model, split: &DatasetSplit, cfg: &TrainConfig, seed: u64) -> Result<TrainedModel> {
    cfg.validate()?;
    let train = &split.train;
    if train.is_empty() {
        return Err(Error::Contract("empty training split".into()));
    }
    if train.example_shape() != model.spec.input_shape.as_slice() {
        return Err(Error::Dimension(format!(
            "model input {:?} does not match data {:?}",
            model.spec.input_shape,
            train.example_shape()
        )));
    }
    let mut opt = Adam::new(cfg.optimizer, &model);
    let mut shuffle_rng = stream(seed, "shuffle");
    let mut aug_rng = stream(seed, "augment");
    let augment = split.augment();
    let steps = model.spec.num_steps();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curves = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut hits) = (0.0f64, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut x = train.features.select_rows(batch)?;
            if let Some(aug) = augment {
                let shape = x.shape().to_vec();
                augment_batch(x.data_mut(), &shape, aug, &mut aug_rng);
            }
            let targets: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let mut g = Graph::new();
            let diverged = |e: Error| match e {
                Error::NonFinite { .. } => Error::Diverged {
                    epoch,
                    loss: f64::NAN,
                    lr: cfg.optimizer.lr,
                },
                other => other,
            };
            let (leaves, out) = model.forward(&mut g, x, true).map_err(diverged)?;
            let loss = match &out {
                Output::Logits(z) => g.softmax_cross_entropy(*z, &targets),
                Output::Temporal(rec) => snn_temporal_loss(&mut g, &rec.membranes, &targets, steps),
            }
            .map_err(diverged)?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: value,
                    lr: cfg.optimizer.lr,
                });
            }
            let (preds, _) = decode(&model, &g, &out);
            hits += preds.iter().zip(&targets).filter(|(p, t)| p == t).count();
            loss_sum += value * batch.len() as f64;
            g.backward(loss).map_err(diverged)?;
            let grads: Vec<Option<Vec<f32>>> = leaves.iter().map(|&v| g.take_grad(v)).collect();
            drop(g);
            opt.step(&mut model, &grads);
        }
        let test_accuracy = if cfg.track_test {
            Some(evaluate_accuracy(&model, &split.test)?)
        } else {
            None
        };
        let stats = EpochStats {
            epoch,
            loss: loss_sum / train.len() as f64,
            train_accuracy: hits as f64 / train.len() as f64,
            test_accuracy,
        };
        log::debug!("epoch {epoch}: {stats:?}");
        curves.push(stats);
    }
    Ok(TrainedModel { model, curves })
}
