//! Model construction and forward passes for the ANN and SNN classifiers.
//!
//! ConvNet: `conv(32, 5×5) → pool 2 → conv(64, 5×5) → pool 2 → fc 1000 → fc C`.
//! FCNet: `fc 1000 → fc C`. ANN hidden layers use ReLU; SNN hidden and output
//! layers are LIF neurons driven by a constant input current.

pub mod checkpoint;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{MembraneQuantizer, Placement, QuantSpec};
use crate::rng::stream;
use crate::spiking::{unroll, Drive, LifConfig, LifRecord};
use crate::tensor::{Graph, Tensor, Var};

pub use train::{
    evaluate, evaluate_accuracy, extract_attack_features, predict, snn_temporal_loss, train_model, Adam,
    AttackFeatures, EpochStats, FeatureSource, OptimizerConfig, TrainConfig, TrainedModel,
};

pub const CONV_FILTERS: [usize; 2] = [32, 64];
pub const CONV_KERNEL: usize = 5;
pub const POOL: usize = 2;
pub const HIDDEN: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    #[serde(alias = "convnet")]
    ConvNet,
    #[serde(alias = "fcnet")]
    FcNet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    Ann,
    Snn,
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Paradigm::Ann => "ann",
            Paradigm::Snn => "snn",
        })
    }
}

impl FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ann" => Ok(Paradigm::Ann),
            "snn" => Ok(Paradigm::Snn),
            _ => Err(Error::Config(format!("unknown paradigm `{s}`"))),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::ConvNet => "conv_net",
            Architecture::FcNet => "fc_net",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "convnet" | "conv" => Ok(Architecture::ConvNet),
            "fcnet" | "fc" | "mlp" => Ok(Architecture::FcNet),
            _ => Err(Error::Config(format!("unknown architecture `{s}`"))),
        }
    }
}

/// Quantizers installed in a model. `state` quantizes ReLU outputs in an ANN
/// and membrane potentials in an SNN.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSet {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<QuantSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<QuantSpec>,
}

impl QuantSet {
    pub fn is_full_precision(&self) -> bool {
        self.weight.is_none() && self.state.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub paradigm: Paradigm,
    pub num_classes: usize,
    pub input_shape: Vec<usize>,
    /// Neuron dynamics and surrogate; present iff the paradigm is SNN.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lif: Option<LifConfig>,
    #[serde(default)]
    pub quant: QuantSet,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        match (self.paradigm, &self.lif) {
            (Paradigm::Snn, None) => return Err(Error::Config("SNN model needs a LIF configuration".into())),
            (Paradigm::Ann, Some(_)) => {
                return Err(Error::Config("ANN model must not carry a LIF configuration".into()))
            }
            (Paradigm::Snn, Some(lif)) => lif.validate()?,
            (Paradigm::Ann, None) => {}
        }
        if let Some(w) = &self.quant.weight {
            w.validate()?;
            if w.placement != Placement::Weight {
                return Err(Error::Config("weight quantizer has a non-weight placement".into()));
            }
        }
        if let Some(s) = &self.quant.state {
            s.validate()?;
            let want = match self.paradigm {
                Paradigm::Ann => Placement::Activation,
                Paradigm::Snn => Placement::Membrane,
            };
            if s.placement != want {
                return Err(Error::Config(format!(
                    "{} models quantize {want:?} state, got {:?}",
                    self.paradigm, s.placement
                )));
            }
        }
        match (self.architecture, self.input_shape.as_slice()) {
            (Architecture::FcNet, [d]) if *d > 0 => Ok(()),
            (Architecture::FcNet, _) => Err(Error::Config(format!(
                "FCNet expects a flat input, got {:?}",
                self.input_shape
            ))),
            (Architecture::ConvNet, [_, h, w]) => conv_flat_len(*h, *w).map(|_| ()),
            (Architecture::ConvNet, _) => Err(Error::Config(format!(
                "ConvNet expects a C×H×W input, got {:?}",
                self.input_shape
            ))),
        }
    }

    pub fn num_steps(&self) -> usize {
        self.lif.map_or(1, |l| l.num_steps)
    }
}

fn conv_flat_len(h: usize, w: usize) -> Result<usize> {
    let stage = |s: usize| -> Result<usize> {
        if s < CONV_KERNEL || !(s - CONV_KERNEL + 1).is_multiple_of(POOL) {
            return Err(Error::Config(format!(
                "spatial extent {s} does not fit conv {CONV_KERNEL} + pool {POOL}"
            )));
        }
        Ok((s - CONV_KERNEL + 1) / POOL)
    };
    Ok(CONV_FILTERS[1] * stage(stage(h)?)? * stage(stage(w)?)?)
}

/// A named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub seed: u64,
    pub params: Vec<Param>,
}

/// Network output for one batch.
pub enum Output {
    Logits(Var),
    /// Output-layer records over the unrolled window.
    Temporal(LifRecord),
}

/// Builds a model with weights and biases drawn uniformly from ±1/√fan_in.
pub fn build_model(spec: ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let c = spec.num_classes;
    let mut shapes: Vec<(&str, Vec<usize>, usize)> = Vec::new();
    match spec.architecture {
        Architecture::FcNet => {
            let d = spec.input_shape[0];
            shapes.push(("fc1.weight", vec![d, HIDDEN], d));
            shapes.push(("fc1.bias", vec![HIDDEN], d));
            shapes.push(("fc2.weight", vec![HIDDEN, c], HIDDEN));
            shapes.push(("fc2.bias", vec![c], HIDDEN));
        }
        Architecture::ConvNet => {
            let [ch, h, w] = spec.input_shape[..] else {
                unreachable!()
            };
            let [f1, f2] = CONV_FILTERS;
            let k = CONV_KERNEL;
            let flat = conv_flat_len(h, w)?;
            shapes.push(("conv1.weight", vec![f1, ch, k, k], ch * k * k));
            shapes.push(("conv1.bias", vec![f1], ch * k * k));
            shapes.push(("conv2.weight", vec![f2, f1, k, k], f1 * k * k));
            shapes.push(("conv2.bias", vec![f2], f1 * k * k));
            shapes.push(("fc1.weight", vec![flat, HIDDEN], flat));
            shapes.push(("fc1.bias", vec![HIDDEN], flat));
            shapes.push(("fc2.weight", vec![HIDDEN, c], HIDDEN));
            shapes.push(("fc2.bias", vec![c], HIDDEN));
        }
    }
    let mut rng = stream(seed, "init");
    let params = shapes
        .into_iter()
        .map(|(name, shape, fan_in)| {
            let bound = 1.0 / (fan_in as f32).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Ok(Param {
                name: name.to_string(),
                value: Tensor::new(shape, data)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Model { spec, seed, params })
}

impl Model {
    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    /// Runs the network on a batch `x` of shape `[B, …input_shape]`. With
    /// `trainable`, parameters are recorded as trainable leaves and their
    /// handles are returned in `params` order.
    pub fn forward(&self, g: &mut Graph<f32>, x: Tensor<f32>, trainable: bool) -> Result<(Vec<Var>, Output)> {
        if x.shape().len() != self.spec.input_shape.len() + 1 || x.shape()[1..] != self.spec.input_shape[..] {
            return Err(Error::Dimension(format!(
                "model expects [B, {:?}], got {:?}",
                self.spec.input_shape,
                x.shape()
            )));
        }
        let leaves: Vec<Var> = self.params.iter().map(|p| g.leaf(p.value.clone(), trainable)).collect();
        let mut w = Vec::with_capacity(leaves.len());
        for (i, &v) in leaves.iter().enumerate() {
            let is_weight = i % 2 == 0;
            w.push(match (&self.spec.quant.weight, is_weight) {
                (Some(q), true) => q.apply(g, v)?,
                _ => v,
            });
        }
        let batch = x.shape()[0];
        let x = g.constant(x);
        let out = match self.spec.paradigm {
            Paradigm::Ann => Output::Logits(self.ann_forward(g, x, &w)?),
            Paradigm::Snn => Output::Temporal(self.snn_forward(g, x, &w, batch)?),
        };
        Ok((leaves, out))
    }

    fn activation(&self, g: &mut Graph<f32>, x: Var) -> Result<Var> {
        let a = g.relu(x)?;
        match &self.spec.quant.state {
            Some(q) => q.apply(g, a),
            None => Ok(a),
        }
    }

    fn ann_forward(&self, g: &mut Graph<f32>, x: Var, w: &[Var]) -> Result<Var> {
        let mut h = x;
        let fc = match self.spec.architecture {
            Architecture::FcNet => w,
            Architecture::ConvNet => {
                for layer in 0..2 {
                    let z = g.conv2d(h, w[2 * layer], w[2 * layer + 1], 1, 0)?;
                    let a = self.activation(g, z)?;
                    h = g.maxpool2d(a, POOL, POOL)?;
                }
                let b = g.value(h).shape()[0];
                let flat = g.value(h).numel() / b;
                h = g.reshape(h, [b, flat])?;
                &w[4..]
            }
        };
        let z = g.affine(h, fc[0], fc[1])?;
        let a = self.activation(g, z)?;
        g.affine(a, fc[2], fc[3])
    }

    fn snn_forward(&self, g: &mut Graph<f32>, x: Var, w: &[Var], batch: usize) -> Result<LifRecord> {
        let lif = self.spec.lif.expect("validated SNN spec");
        let steps = lif.num_steps;
        let quant = self.spec.quant.state.map(MembraneQuantizer::new).transpose()?;
        let quant = quant.as_ref();
        // Layers downstream of the first LIF see all steps stacked along the
        // batch axis, step-major, and are split back per step for the next LIF.
        let per_step = |g: &mut Graph<f32>, stacked: Var| -> Result<Vec<Var>> {
            (0..steps).map(|t| g.rows(stacked, t * batch, batch)).collect()
        };
        let (spikes, fc) = match self.spec.architecture {
            Architecture::FcNet => {
                let cur = g.affine(x, w[0], w[1])?;
                let rec = unroll(g, Drive::Constant(cur), &lif, quant)?;
                (g.stack(&rec.spikes)?, &w[2..])
            }
            Architecture::ConvNet => {
                let z1 = g.conv2d(x, w[0], w[1], 1, 0)?;
                let cur1 = g.maxpool2d(z1, POOL, POOL)?;
                let rec1 = unroll(g, Drive::Constant(cur1), &lif, quant)?;
                let s1 = g.stack(&rec1.spikes)?;
                let z2 = g.conv2d(s1, w[2], w[3], 1, 0)?;
                let p2 = g.maxpool2d(z2, POOL, POOL)?;
                let flat = g.value(p2).numel() / (steps * batch);
                let p2 = g.reshape(p2, [steps * batch, flat])?;
                let cur2 = per_step(g, p2)?;
                let rec2 = unroll(g, Drive::PerStep(&cur2), &lif, quant)?;
                let s2 = g.stack(&rec2.spikes)?;
                let z3 = g.affine(s2, w[4], w[5])?;
                let cur3 = per_step(g, z3)?;
                let rec3 = unroll(g, Drive::PerStep(&cur3), &lif, quant)?;
                (g.stack(&rec3.spikes)?, &w[6..])
            }
        };
        let z = g.affine(spikes, fc[0], fc[1])?;
        let cur = per_step(g, z)?;
        unroll(g, Drive::PerStep(&cur), &lif, quant)
    }
}

/// Output-layer records of an SNN over `T` steps for input batch `x`, with
/// parameters held constant.
pub fn run_temporal(model: &Model, x: Tensor<f32>) -> Result<(Graph<f32>, LifRecord)> {
    let mut g = Graph::new();
    match model.forward(&mut g, x, false)?.1 {
        Output::Temporal(rec) => Ok((g, rec)),
        Output::Logits(_) => Err(Error::Config("run_temporal needs an SNN model".into())),
    }
}
