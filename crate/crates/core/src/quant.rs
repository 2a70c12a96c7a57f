//! Uniform fake-quantizers for weights, activations and membrane potentials.
//!
//! All three map onto the lattice `a_min + j·Δ`, `Δ = (a_max − a_min)/(2^k − 1)`,
//! with round-half-away-from-zero. Gradients go straight through inside the
//! clip range and are zero outside it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BackwardContext, Graph, Real, Tensor, Var};

pub const SUPPORTED_BITS: [u32; 3] = [2, 4, 8];

/// Scalar uniform quantizer over a fixed range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lattice {
    pub min: f64,
    pub max: f64,
    pub bits: u32,
}

impl Lattice {
    pub fn new(min: f64, max: f64, bits: u32) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) || max <= min {
            return Err(Error::Config(format!("degenerate quantization range [{min}, {max}]")));
        }
        if !(2..=24).contains(&bits) {
            return Err(Error::Config(format!("bit width {bits} outside [2, 24]")));
        }
        Ok(Self { min, max, bits })
    }

    pub fn levels(&self) -> u64 {
        1u64 << self.bits
    }

    pub fn step(&self) -> f64 {
        (self.max - self.min) / (self.levels() - 1) as f64
    }

    /// Lattice index of `x` after clipping.
    pub fn index(&self, x: f64) -> u64 {
        let top = (self.levels() - 1) as f64;
        let j = ((x.clamp(self.min, self.max) - self.min) / self.step()).round();
        j.clamp(0.0, top) as u64
    }

    pub fn level(&self, j: u64) -> f64 {
        j as f64 * self.step() + self.min
    }

    pub fn quantize(&self, x: f64) -> f64 {
        self.level(self.index(x))
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.min && x <= self.max
    }
}

/// Fake-quantizes `x` onto `lattice` with a straight-through backward rule.
fn fake_quant<T: Real>(g: &mut Graph<T>, x: Var, lattice: Lattice, op: &'static str) -> Result<Var> {
    let out = g.value(x).map(|v| T::lit(lattice.quantize(v.as_f64())));
    g.custom(op, &[x], out, move |ctx: &BackwardContext<'_, T>| {
        let grad = ctx.inputs[0]
            .data()
            .iter()
            .zip(ctx.upstream)
            .map(|(&v, &up)| if lattice.contains(v.as_f64()) { up } else { T::zero() })
            .collect();
        vec![Some(grad)]
    })
}

/// Clip to `[a_min, a_max]` then snap to the `k`-bit lattice.
pub fn quantize_activation<T: Real>(g: &mut Graph<T>, a: Var, a_min: f64, a_max: f64, bits: u32) -> Result<Var> {
    fake_quant(g, a, Lattice::new(a_min, a_max, bits)?, "quantize_activation")
}

/// Per-tensor min/max lattice of a weight tensor, or `None` when every entry is equal.
pub fn weight_lattice<T: Real>(w: &Tensor<T>, bits: u32) -> Result<Option<Lattice>> {
    let (lo, hi) = w
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v.as_f64()), hi.max(v.as_f64()))
        });
    if hi <= lo {
        return Ok(None);
    }
    Lattice::new(lo, hi, bits).map(Some)
}

/// Affine min/max weight quantizer. A constant tensor is returned unchanged.
pub fn quantize_weight<T: Real>(g: &mut Graph<T>, w: Var, bits: u32) -> Result<Var> {
    match weight_lattice(g.value(w), bits)? {
        Some(lattice) => fake_quant(g, w, lattice, "quantize_weight"),
        None => Ok(w),
    }
}

/// Quantizes membranes on `[−θq, θq]`.
pub fn quantize_membrane<T: Real>(g: &mut Graph<T>, u: Var, clip: f64, bits: u32) -> Result<Var> {
    check_clip(clip)?;
    fake_quant(g, u, Lattice::new(-clip, clip, bits)?, "quantize_membrane")
}

fn check_clip(clip: f64) -> Result<()> {
    if !(0.5..=1.5).contains(&clip) {
        return Err(Error::Config(format!("clip threshold {clip} outside [0.5, 1.5]")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Weight,
    Activation,
    Membrane,
}

/// Where the quantizer range comes from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum RangeMode {
    /// Recomputed from each tensor's own extremes.
    PerTensorMinMax,
    /// `[0, θq]`, for non-negative activations.
    OneSided,
    /// `[−θq, θq]`.
    Symmetric,
    Fixed {
        min: f64,
        max: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSpec {
    pub bits: u32,
    pub placement: Placement,
    pub range: RangeMode,
    /// Clip threshold θq; present iff the placement is not `Weight`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<f64>,
}

impl QuantSpec {
    pub fn weight(bits: u32) -> Self {
        Self {
            bits,
            placement: Placement::Weight,
            range: RangeMode::PerTensorMinMax,
            clip: None,
        }
    }

    /// ReLU-output quantizer on `[0, θq]`.
    pub fn activation(bits: u32, clip: f64) -> Self {
        Self {
            bits,
            placement: Placement::Activation,
            range: RangeMode::OneSided,
            clip: Some(clip),
        }
    }

    /// Membrane quantizer on `[−θq, θq]`.
    pub fn membrane(bits: u32, clip: f64) -> Self {
        Self {
            bits,
            placement: Placement::Membrane,
            range: RangeMode::Symmetric,
            clip: Some(clip),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits < 2 {
            return Err(Error::Config(format!("bit width must be ≥ 2, got {}", self.bits)));
        }
        match (self.placement, self.clip) {
            (Placement::Weight, Some(_)) => Err(Error::Config("weight quantizers take no clip threshold".into())),
            (Placement::Weight, None) => Ok(()),
            (_, None) => Err(Error::Config(format!(
                "{:?} quantizer needs a clip threshold",
                self.placement
            ))),
            (_, Some(c)) => {
                check_clip(c)?;
                self.fixed_lattice().map(|_| ())
            }
        }
    }

    /// Lattice for the fixed-range modes.
    fn fixed_lattice(&self) -> Result<Lattice> {
        let clip = self.clip.unwrap_or(1.0);
        match self.range {
            RangeMode::OneSided => Lattice::new(0.0, clip, self.bits),
            RangeMode::Symmetric => Lattice::new(-clip, clip, self.bits),
            RangeMode::Fixed { min, max } => Lattice::new(min, max, self.bits),
            RangeMode::PerTensorMinMax => Err(Error::Config(
                "per-tensor min/max range is only valid for weights".into(),
            )),
        }
    }

    /// Applies this quantizer to `x` on the tape.
    pub fn apply<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match self.range {
            RangeMode::PerTensorMinMax => quantize_weight(g, x, self.bits),
            _ => fake_quant(g, x, self.fixed_lattice()?, "quantize"),
        }
    }
}

/// Membrane-state quantizer installed in every LIF layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MembraneQuantizer(QuantSpec);

impl MembraneQuantizer {
    pub fn new(spec: QuantSpec) -> Result<Self> {
        spec.validate()?;
        if spec.placement != Placement::Membrane {
            return Err(Error::Config(
                "membrane quantizer built from a non-membrane spec".into(),
            ));
        }
        Ok(Self(spec))
    }

    pub fn spec(&self) -> &QuantSpec {
        &self.0
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, u: Var) -> Result<Var> {
        self.0.apply(g, u)
    }
}
