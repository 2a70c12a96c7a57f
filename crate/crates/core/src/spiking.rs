//! Leaky integrate-and-fire dynamics on the tape.
//!
//! The forward spike is a hard threshold; its backward pass is replaced by one
//! of five surrogate derivatives evaluated at `u = U − θ`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::MembraneQuantizer;
use crate::tensor::{BackwardContext, Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    FastSigmoid,
    ATan,
    SpikeRateEscape,
    Triangular,
    Ste,
}

impl SurrogateKind {
    pub const ALL: [SurrogateKind; 5] = [
        SurrogateKind::FastSigmoid,
        SurrogateKind::ATan,
        SurrogateKind::SpikeRateEscape,
        SurrogateKind::Triangular,
        SurrogateKind::Ste,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SurrogateKind::FastSigmoid => "fast_sigmoid",
            SurrogateKind::ATan => "atan",
            SurrogateKind::SpikeRateEscape => "spike_rate_escape",
            SurrogateKind::Triangular => "triangular",
            SurrogateKind::Ste => "ste",
        }
    }
}

impl fmt::Display for SurrogateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SurrogateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['-', ' '], "_");
        Ok(match key.as_str() {
            "fast_sigmoid" | "fastsigmoid" => SurrogateKind::FastSigmoid,
            "atan" | "arctan" | "arctangent" => SurrogateKind::ATan,
            "spike_rate_escape" | "sre" => SurrogateKind::SpikeRateEscape,
            "triangular" => SurrogateKind::Triangular,
            "ste" | "straight_through" | "straight_through_estimator" => SurrogateKind::Ste,
            _ => return Err(Error::Config(format!("unknown surrogate `{s}`"))),
        })
    }
}

/// A surrogate derivative and its parameters. Parameters that a kind does
/// not use are ignored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateSpec {
    pub kind: SurrogateKind,
    /// Fast-sigmoid slope; also the gradient scale of spike-rate escape.
    pub slope: f64,
    /// Arctangent steepness.
    pub alpha: f64,
    /// Spike-rate-escape decay.
    pub beta_escape: f64,
    /// Half-width of the triangular support.
    pub width: f64,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        Self {
            kind: SurrogateKind::FastSigmoid,
            slope: 25.0,
            alpha: 2.0,
            beta_escape: 1.0,
            width: 1.0,
        }
    }
}

impl SurrogateSpec {
    pub fn of(kind: SurrogateKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let used: &[(&str, f64)] = match self.kind {
            SurrogateKind::FastSigmoid => &[("slope", self.slope)],
            SurrogateKind::ATan => &[("alpha", self.alpha)],
            SurrogateKind::SpikeRateEscape => &[("slope", self.slope), ("beta_escape", self.beta_escape)],
            SurrogateKind::Triangular => &[("width", self.width)],
            SurrogateKind::Ste => &[],
        };
        for (name, v) in used {
            if !(v.is_finite() && *v > 0.0) {
                return Err(Error::Config(format!(
                    "surrogate {}: {name} must be positive, got {v}",
                    self.kind
                )));
            }
        }
        Ok(())
    }

    /// Surrogate derivative `g(u)` of the spike at `u = U − θ`.
    pub fn derivative(&self, u: f64) -> f64 {
        match self.kind {
            SurrogateKind::FastSigmoid => {
                let d = self.slope * u.abs() + 1.0;
                1.0 / (d * d)
            }
            SurrogateKind::ATan => {
                let z = PI * u * self.alpha / 2.0;
                (self.alpha / 2.0) / (1.0 + z * z)
            }
            SurrogateKind::SpikeRateEscape => self.slope * (-self.beta_escape * u.abs()).exp(),
            SurrogateKind::Triangular => (1.0 - u.abs() / self.width).max(0.0),
            SurrogateKind::Ste => 1.0,
        }
    }
}

/// Free-function form of [`SurrogateSpec::derivative`] that checks parameters.
pub fn surrogate_derivative(spec: &SurrogateSpec, u: f64) -> Result<f64> {
    spec.validate()?;
    Ok(spec.derivative(u))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetMode {
    Subtract,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LifConfig {
    pub beta: f64,
    pub threshold: f64,
    pub reset: ResetMode,
    pub num_steps: usize,
    /// Stop gradients through the reset term, so only the spike path of the
    /// current step carries the surrogate.
    pub detach_reset: bool,
    pub surrogate: SurrogateSpec,
}

impl Default for LifConfig {
    fn default() -> Self {
        Self {
            beta: 0.95,
            threshold: 1.0,
            reset: ResetMode::Subtract,
            num_steps: 25,
            detach_reset: true,
            surrogate: SurrogateSpec::default(),
        }
    }
}

impl LifConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config(format!("LIF beta must lie in (0, 1), got {}", self.beta)));
        }
        if !(self.threshold.is_finite() && self.threshold > 0.0) {
            return Err(Error::Config(format!(
                "LIF threshold must be positive, got {}",
                self.threshold
            )));
        }
        if self.num_steps < 1 {
            return Err(Error::Config("LIF needs at least one time step".into()));
        }
        self.surrogate.validate()
    }
}

/// Heaviside of `U − θ` whose backward multiplies the upstream gradient by
/// the surrogate derivative.
pub fn spike_forward<T: Real>(g: &mut Graph<T>, membrane: Var, cfg: &LifConfig) -> Result<Var> {
    let theta = T::lit(cfg.threshold);
    let spikes = g
        .value(membrane)
        .map(|u| if u - theta > T::zero() { T::one() } else { T::zero() });
    let surrogate = cfg.surrogate;
    let threshold = cfg.threshold;
    g.custom("spike", &[membrane], spikes, move |ctx: &BackwardContext<'_, T>| {
        let grad = ctx.inputs[0]
            .data()
            .iter()
            .zip(ctx.upstream)
            .map(|(&u, &up)| up * T::lit(surrogate.derivative(u.as_f64() - threshold)))
            .collect();
        vec![Some(grad)]
    })
}

/// `u·(1 − s)`, the reset-to-zero update.
fn reset_zero<T: Real>(g: &mut Graph<T>, u: Var, s: Var, detach: bool) -> Result<Var> {
    if g.value(u).shape() != g.value(s).shape() {
        return Err(Error::Dimension("reset: membrane and spike shapes differ".into()));
    }
    let out = Tensor::new(
        g.value(u).shape().to_vec(),
        g.value(u)
            .data()
            .iter()
            .zip(g.value(s).data())
            .map(|(&m, &spk)| m * (T::one() - spk))
            .collect(),
    )?;
    g.custom("reset_zero", &[u, s], out, move |ctx: &BackwardContext<'_, T>| {
        let (m, spk) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let du = ctx
            .upstream
            .iter()
            .zip(spk)
            .map(|(&up, &sv)| up * (T::one() - sv))
            .collect();
        let ds = (!detach).then(|| ctx.upstream.iter().zip(m).map(|(&up, &mv)| -up * mv).collect());
        vec![Some(du), ds]
    })
}

/// Result of one integrate-fire-reset step.
#[derive(Clone, Copy, Debug)]
pub struct LifStep {
    pub spikes: Var,
    /// Membrane after integration (and quantization) that the spike was read from.
    pub membrane: Var,
    /// Membrane carried to the next step.
    pub next: Var,
}

pub fn lif_step<T: Real>(
    g: &mut Graph<T>,
    current: Var,
    state: Var,
    cfg: &LifConfig,
    quant: Option<&MembraneQuantizer>,
) -> Result<LifStep> {
    if g.value(current).shape() != g.value(state).shape() {
        return Err(Error::Dimension(format!(
            "lif_step: current {:?} vs membrane {:?}",
            g.value(current).shape(),
            g.value(state).shape()
        )));
    }
    let mut membrane = g.leaky_integrate(state, current, T::lit(cfg.beta))?;
    if let Some(q) = quant {
        membrane = q.apply(g, membrane)?;
    }
    let spikes = spike_forward(g, membrane, cfg)?;
    let next = match cfg.reset {
        ResetMode::Subtract => g.reset_subtract(membrane, spikes, T::lit(cfg.threshold), cfg.detach_reset)?,
        ResetMode::Zero => reset_zero(g, membrane, spikes, cfg.detach_reset)?,
    };
    Ok(LifStep { spikes, membrane, next })
}

/// Input current to a LIF layer over the unrolled window.
pub enum Drive<'a> {
    /// The same current at every step.
    Constant(Var),
    /// One current per step.
    PerStep(&'a [Var]),
}

/// Per-step spike and membrane records of one LIF layer.
#[derive(Clone, Debug, Default)]
pub struct LifRecord {
    pub spikes: Vec<Var>,
    pub membranes: Vec<Var>,
}

/// Unrolls a LIF layer over `cfg.num_steps`, starting from a zero membrane.
pub fn unroll<T: Real>(
    g: &mut Graph<T>,
    drive: Drive<'_>,
    cfg: &LifConfig,
    quant: Option<&MembraneQuantizer>,
) -> Result<LifRecord> {
    cfg.validate()?;
    let steps = cfg.num_steps;
    if let Drive::PerStep(c) = drive {
        if c.len() != steps {
            return Err(Error::Contract(format!("{} currents for {steps} steps", c.len())));
        }
    }
    let first = match drive {
        Drive::Constant(v) => v,
        Drive::PerStep(c) => c[0],
    };
    let mut state = g.constant(Tensor::zeros(g.value(first).shape().to_vec()));
    let mut rec = LifRecord {
        spikes: Vec::with_capacity(steps),
        membranes: Vec::with_capacity(steps),
    };
    for t in 0..steps {
        let current = match drive {
            Drive::Constant(v) => v,
            Drive::PerStep(c) => c[t],
        };
        let step = lif_step(g, current, state, cfg, quant)?;
        rec.spikes.push(step.spikes);
        rec.membranes.push(step.membrane);
        state = step.next;
    }
    Ok(rec)
}
