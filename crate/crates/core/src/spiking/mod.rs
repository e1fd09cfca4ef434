//! Leaky integrate-and-fire dynamics with surrogate-gradient BPTT, and
//! threshold-dependent batch normalization.
//!
//! A LIF layer sees its input as a time-major `[T·B, ...]` tensor and unrolls
//! it step by step:
//!
//! ```text
//! V[t] = tau * (V[t-1] * (1 - X[t-1]) + v_reset * X[t-1]) + I[t]
//! X[t] = H(V[t] - v_th)          with H(0) = 1
//! ```

mod tdbn;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Backward, Graph, NodeId, Scalar, Tensor};

pub use tdbn::{tdbn, BnMode, BnStats, TdbnConfig};

/// How the reset factor `(1 - X)` is treated in the backward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetGrad {
    /// Differentiate through the reset with the same surrogate as the spike.
    #[default]
    Surrogate,
    /// Treat the reset as a constant.
    Detached,
}

/// Forward nonlinearity of the neuron.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpikeFn {
    #[default]
    Heaviside,
    /// `clamp((v - v_th)/a + 1/2, 0, 1)`. Its exact derivative is the
    /// rectangular surrogate, so a network built with it can be checked
    /// against finite differences.
    Ramp,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LifConfig {
    pub tau: f64,
    pub v_th: f64,
    pub v_reset: f64,
    /// Width of the rectangular surrogate window.
    pub width: f64,
    pub reset_grad: ResetGrad,
    pub spike_fn: SpikeFn,
}

impl Default for LifConfig {
    fn default() -> Self {
        Self {
            tau: 0.25,
            v_th: 0.5,
            v_reset: 0.0,
            width: 1.0,
            reset_grad: ResetGrad::Surrogate,
            spike_fn: SpikeFn::Heaviside,
        }
    }
}

impl LifConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if !(self.v_th > self.v_reset) {
            return Err(Error::Config(format!(
                "v_th ({}) must exceed v_reset ({})",
                self.v_th, self.v_reset
            )));
        }
        if !(self.width > 0.0) || !self.width.is_finite() {
            return Err(Error::Config(format!("surrogate width must be positive, got {}", self.width)));
        }
        Ok(())
    }
}

/// Rectangular surrogate derivative: `1/a` inside the closed window
/// `|v - v_th| <= a/2`, zero outside.
pub fn surrogate_grad(v: f64, cfg: &LifConfig) -> f64 {
    if (v - cfg.v_th).abs() <= cfg.width / 2.0 {
        1.0 / cfg.width
    } else {
        0.0
    }
}

#[derive(Clone, Copy)]
struct Coeffs<S> {
    tau: S,
    v_th: S,
    v_reset: S,
    width: S,
    inv_width: S,
    half: S,
    surrogate_reset: bool,
    ramp: bool,
}

impl<S: Scalar> Coeffs<S> {
    fn new(cfg: &LifConfig) -> Self {
        Self {
            tau: S::of(cfg.tau),
            v_th: S::of(cfg.v_th),
            v_reset: S::of(cfg.v_reset),
            width: S::of(cfg.width),
            inv_width: S::of(1.0 / cfg.width),
            half: S::of(0.5),
            surrogate_reset: cfg.reset_grad == ResetGrad::Surrogate,
            ramp: cfg.spike_fn == SpikeFn::Ramp,
        }
    }

    fn fire(&self, v: S) -> S {
        if self.ramp {
            ((v - self.v_th) * self.inv_width + self.half).max(S::zero()).min(S::one())
        } else if v >= self.v_th {
            S::one()
        } else {
            S::zero()
        }
    }

    fn dfire(&self, v: S) -> S {
        if (v - self.v_th).abs() <= self.width * self.half {
            self.inv_width
        } else {
            S::zero()
        }
    }
}

/// Membrane and spike trajectories of one unrolled layer, both `[T·B, ...]`.
#[derive(Clone, Debug)]
pub struct LifTrace<S: Scalar = f32> {
    pub membrane: Tensor<S>,
    pub spikes: Tensor<S>,
    pub steps: usize,
}

impl<S: Scalar> LifTrace<S> {
    pub fn last_membrane(&self) -> Tensor<S> {
        let len = self.membrane.numel() / self.steps;
        let mut shape = self.membrane.shape().to_vec();
        shape[0] /= self.steps;
        Tensor::new(shape, self.membrane.data()[(self.steps - 1) * len..].to_vec()).expect("split shape")
    }
}

/// Runs the neuron over all `steps` of a time-major input, starting from
/// `V = 0, X = 0`.
pub fn lif_forward<S: Scalar>(input: &Tensor<S>, steps: usize, cfg: &LifConfig) -> Result<LifTrace<S>> {
    cfg.validate()?;
    if steps == 0 {
        return Err(Error::Config("time steps must be at least 1".into()));
    }
    if input.shape().is_empty() || !input.shape()[0].is_multiple_of(steps) {
        return Err(Error::shape(
            "lif",
            format!("leading axis of {:?} is not a multiple of T={steps}", input.shape()),
        ));
    }
    if !input.is_finite() {
        return Err(Error::Numeric("non-finite input current reached a LIF layer".into()));
    }
    let c = Coeffs::<S>::new(cfg);
    let len = input.numel() / steps;
    let x = input.data();
    let mut membrane = vec![S::zero(); input.numel()];
    let mut spikes = vec![S::zero(); input.numel()];
    for t in 0..steps {
        let cur = t * len..(t + 1) * len;
        if t == 0 {
            membrane[..len].copy_from_slice(&x[..len]);
        } else {
            let prev = (t - 1) * len;
            for i in 0..len {
                let (v, s) = (membrane[prev + i], spikes[prev + i]);
                membrane[cur.start + i] = c.tau * (v * (S::one() - s) + c.v_reset * s) + x[cur.start + i];
            }
        }
        for i in cur {
            spikes[i] = c.fire(membrane[i]);
        }
    }
    let shape = input.shape().to_vec();
    Ok(LifTrace {
        membrane: Tensor::new(shape.clone(), membrane)?,
        spikes: Tensor::new(shape, spikes)?,
        steps,
    })
}

/// Reverse pass through the unrolled neuron. `d_spikes` is the cotangent of
/// the spike train and `d_last` that of the final membrane; returns the
/// cotangent of the input current.
fn lif_backward<S: Scalar>(
    trace: &LifTrace<S>,
    c: &Coeffs<S>,
    d_spikes: Option<&[S]>,
    d_last: Option<&[S]>,
) -> Vec<S> {
    let steps = trace.steps;
    let len = trace.membrane.numel() / steps;
    let v = trace.membrane.data();
    let x = trace.spikes.data();
    let mut d_input = vec![S::zero(); trace.membrane.numel()];
    let mut carry = vec![S::zero(); len];
    for t in (0..steps).rev() {
        let base = t * len;
        for i in 0..len {
            let vi = v[base + i];
            let xi = x[base + i];
            let next = carry[i];
            let mut through_spike = d_spikes.map_or(S::zero(), |g| g[base + i]);
            if c.surrogate_reset {
                through_spike += c.tau * (c.v_reset - vi) * next;
            }
            let mut dv = c.dfire(vi) * through_spike + c.tau * (S::one() - xi) * next;
            if t == steps - 1 {
                if let Some(g) = d_last {
                    dv += g[i];
                }
            }
            d_input[base + i] = dv;
            carry[i] = dv;
        }
    }
    d_input
}

struct LifSpikes<S: Scalar> {
    trace: LifTrace<S>,
    coeffs: Coeffs<S>,
}

impl<S: Scalar> Backward<S> for LifSpikes<S> {
    fn name(&self) -> &'static str {
        "lif_spikes"
    }

    fn backward(&self, inputs: &[&Tensor<S>], _: &Tensor<S>, grad: &Tensor<S>, _: &[bool]) -> Vec<Option<Tensor<S>>> {
        let d = lif_backward(&self.trace, &self.coeffs, Some(grad.data()), None);
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), d).expect("same shape"))]
    }
}

struct LifLastMembrane<S: Scalar> {
    trace: LifTrace<S>,
    coeffs: Coeffs<S>,
}

impl<S: Scalar> Backward<S> for LifLastMembrane<S> {
    fn name(&self) -> &'static str {
        "lif_last_membrane"
    }

    fn backward(&self, inputs: &[&Tensor<S>], _: &Tensor<S>, grad: &Tensor<S>, _: &[bool]) -> Vec<Option<Tensor<S>>> {
        let d = lif_backward(&self.trace, &self.coeffs, None, Some(grad.data()));
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), d).expect("same shape"))]
    }
}

/// Spike train of a LIF layer as a graph node, `[T·B, ...]`.
pub fn lif<S: Scalar>(g: &mut Graph<S>, input: NodeId, steps: usize, cfg: &LifConfig) -> Result<NodeId> {
    let trace = lif_forward(g.value(input), steps, cfg)?;
    let value = trace.spikes.clone();
    let op = LifSpikes { trace, coeffs: Coeffs::new(cfg) };
    Ok(g.push(value, &[input], Box::new(op)))
}

/// Membrane potential after the last step, `[B, ...]`. Used as the
/// continuous-valued readout in front of the detection convolution.
pub fn lif_last_membrane<S: Scalar>(g: &mut Graph<S>, input: NodeId, steps: usize, cfg: &LifConfig) -> Result<NodeId> {
    let trace = lif_forward(g.value(input), steps, cfg)?;
    let value = trace.last_membrane();
    let op = LifLastMembrane { trace, coeffs: Coeffs::new(cfg) };
    Ok(g.push(value, &[input], Box::new(op)))
}
