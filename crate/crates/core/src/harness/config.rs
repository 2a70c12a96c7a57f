use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetName;
use crate::error::{Error, Result};
use crate::mia::SvmParams;
use crate::nets::{Architecture, ModelSpec, Paradigm, QuantSet, TrainConfig};
use crate::quant::{QuantSpec, SUPPORTED_BITS};
use crate::spiking::LifConfig;

/// Bit widths and clip threshold of the quantizers in one run. `state_bits`
/// quantizes ReLU outputs (ANN) or membrane potentials (SNN) on a range set
/// by `threshold`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_bits: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state_bits: Option<u32>,
    pub threshold: f64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            weight_bits: None,
            state_bits: None,
            threshold: 1.0,
        }
    }
}

impl QuantConfig {
    pub fn to_set(&self, paradigm: Paradigm) -> QuantSet {
        QuantSet {
            weight: self.weight_bits.map(QuantSpec::weight),
            state: self.state_bits.map(|b| match paradigm {
                Paradigm::Ann => QuantSpec::activation(b, self.threshold),
                Paradigm::Snn => QuantSpec::membrane(b, self.threshold),
            }),
        }
    }

    /// Short label such as `FP`, `w=8` or `a=4,θ=1.25`.
    pub fn label(&self, paradigm: Paradigm) -> String {
        let mut parts = Vec::new();
        if let Some(b) = self.weight_bits {
            parts.push(format!("w={b}"));
        }
        if let Some(b) = self.state_bits {
            let tag = match paradigm {
                Paradigm::Ann => "a",
                Paradigm::Snn => "u",
            };
            parts.push(format!("{tag}={b},θ={}", self.threshold));
        }
        if parts.is_empty() {
            "FP".into()
        } else {
            parts.join(" ")
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// Fraction of the target's training set given to the shadow model.
    pub shadow_fraction: f64,
    pub svm: SvmParams,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            shadow_fraction: 0.8,
            svm: SvmParams::default(),
        }
    }
}

/// Everything that determines a run except the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetName,
    pub paradigm: Paradigm,
    pub architecture: Architecture,
    pub subset_fraction: f64,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub lif: LifConfig,
    #[serde(default)]
    pub quant: QuantConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub attack: AttackConfig,
}

impl ExperimentConfig {
    /// Defaults for a dataset and paradigm.
    pub fn defaults(dataset: DatasetName, paradigm: Paradigm) -> Self {
        let (architecture, subset_fraction, epochs, seeds) = match dataset {
            DatasetName::Iris | DatasetName::BreastCancer => (Architecture::FcNet, 1.0, 100, vec![0, 1, 2, 3, 4]),
            DatasetName::Mnist | DatasetName::Fmnist => (Architecture::ConvNet, 0.2, 3, vec![0, 1, 2]),
            DatasetName::Cifar10 => (Architecture::ConvNet, 0.1, 20, vec![0]),
        };
        Self {
            dataset,
            paradigm,
            architecture,
            subset_fraction,
            seeds,
            lif: LifConfig::default(),
            quant: QuantConfig::default(),
            train: TrainConfig {
                epochs,
                ..TrainConfig::default()
            },
            attack: AttackConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "subset_fraction {} outside (0, 1]",
                self.subset_fraction
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        for bits in [self.quant.weight_bits, self.quant.state_bits].into_iter().flatten() {
            if !SUPPORTED_BITS.contains(&bits) {
                return Err(Error::Config(format!("bit width {bits} not in {SUPPORTED_BITS:?}")));
            }
        }
        let a = &self.attack;
        if !(a.shadow_fraction > 0.0 && a.shadow_fraction < 1.0) {
            return Err(Error::Config(format!(
                "shadow_fraction {} outside (0, 1)",
                a.shadow_fraction
            )));
        }
        a.svm.validate()?;
        self.train.validate()?;
        self.lif.validate()?;
        self.quant
            .to_set(self.paradigm)
            .weight
            .map(|q| q.validate())
            .transpose()?;
        self.quant
            .to_set(self.paradigm)
            .state
            .map(|q| q.validate())
            .transpose()?;
        Ok(())
    }

    /// Model spec for a dataset with the given class count and input shape.
    pub fn model_spec(&self, num_classes: usize, input_shape: Vec<usize>) -> ModelSpec {
        let input_shape = match self.architecture {
            Architecture::FcNet => vec![input_shape.iter().product()],
            Architecture::ConvNet => input_shape,
        };
        ModelSpec {
            architecture: self.architecture,
            paradigm: self.paradigm,
            num_classes,
            input_shape,
            lif: (self.paradigm == Paradigm::Snn).then_some(self.lif),
            quant: self.quant.to_set(self.paradigm),
        }
    }

    /// Canonical JSON of the run parameters: seeds are dropped, and so are
    /// neuron settings for ANN runs.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("config is an object");
        obj.remove("seeds");
        if self.paradigm == Paradigm::Ann {
            obj.remove("lif");
        }
        serde_json::to_string(&v).expect("value serializes")
    }

    /// SHA-256 of [`Self::canonical_json`], hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}
