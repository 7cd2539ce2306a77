//! Leaky integrate-and-fire dynamics.
//!
//! A step charges the membrane with the input current, fires where the
//! potential reaches threshold, then resets fired neurons and decays the
//! rest:
//!
//! ```text
//! u[t] = h[t-1] + x[t]
//! s[t] = step(u[t] - u_th)
//! h[t] = v_reset * s[t] + beta * u[t] * (1 - s[t])
//! ```
//!
//! The firing step is exact in the forward pass; its backward pass uses a
//! rectangular surrogate window of width `surrogate_width` around the
//! threshold. The membrane recursion differentiates exactly. `spike_norm`
//! is this recursion applied over the leading time axis with zero initial
//! state; it realises every SN(·) site in the network, each with its own
//! parameter set.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, TensorId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::spike::SpikeTensor;

/// Plain-number LIF settings as stored in configs and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifSettings {
    pub u_th: f64,
    pub v_reset: f64,
    pub beta: f64,
    pub surrogate_width: f64,
}

impl Default for LifSettings {
    fn default() -> Self {
        LifSettings { u_th: 1.0, v_reset: 0.0, beta: 0.5, surrogate_width: 1.0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LifParams<S> {
    pub u_th: S,
    pub v_reset: S,
    pub beta: S,
    pub surrogate_width: S,
}

impl<S: Scalar> Default for LifParams<S> {
    fn default() -> Self {
        LifParams::from_settings(&LifSettings::default()).expect("defaults are valid")
    }
}

impl<S: Scalar> LifParams<S> {
    pub fn from_settings(s: &LifSettings) -> Result<Self> {
        let p = LifParams {
            u_th: S::from_f64_c(s.u_th),
            v_reset: S::from_f64_c(s.v_reset),
            beta: S::from_f64_c(s.beta),
            surrogate_width: S::from_f64_c(s.surrogate_width),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > S::zero() && self.beta < S::one()) {
            return Err(Error::contract("lif decay beta must lie strictly in (0, 1)"));
        }
        if self.u_th <= self.v_reset {
            return Err(Error::contract("lif threshold must exceed the reset potential"));
        }
        if self.u_th <= S::zero() {
            return Err(Error::contract("lif threshold must be positive"));
        }
        if self.surrogate_width <= S::zero() {
            return Err(Error::contract("surrogate width must be positive"));
        }
        Ok(())
    }
}

/// Membrane state carried across timesteps.
#[derive(Debug, Clone, Copy)]
pub struct LifState {
    pub h: TensorId,
}

impl LifState {
    pub fn zeros<S: Scalar>(graph: &mut Graph<S>, shape: Vec<usize>) -> Self {
        LifState { h: graph.zeros(shape) }
    }
}

/// One membrane step. Returns `(spikes, next_state, membrane)`.
pub fn lif_step<S: Scalar>(
    graph: &mut Graph<S>,
    x: TensorId,
    state: &LifState,
    params: &LifParams<S>,
) -> Result<(TensorId, LifState, TensorId)> {
    if graph.shape(x) != graph.shape(state.h) {
        return Err(Error::dim(format!(
            "lif input shape {:?} does not match state shape {:?}",
            graph.shape(x),
            graph.shape(state.h)
        )));
    }
    if graph.data(x).iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite lif input current"));
    }
    let u = graph.add(state.h, x)?;
    let spikes = graph.spike_threshold(u, params.u_th, params.surrogate_width);
    let h = graph.membrane_update(u, spikes, params.v_reset, params.beta)?;
    Ok((spikes, LifState { h }, u))
}

/// Unroll the membrane recursion over the leading time axis, starting from
/// zero state. Input `(T, ..)` produces a same-shape spike tensor.
pub fn lif_sequence<S: Scalar>(
    graph: &mut Graph<S>,
    x_seq: TensorId,
    params: &LifParams<S>,
) -> Result<SpikeTensor> {
    let shape = graph.shape(x_seq).to_vec();
    if shape.is_empty() || shape[0] == 0 {
        return Err(Error::contract("lif sequence needs at least one timestep"));
    }
    let t_len = shape[0];
    let step_shape = if shape.len() == 1 { vec![1] } else { shape[1..].to_vec() };
    let mut state = LifState::zeros(graph, step_shape);
    let mut slices = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let x_t = graph.slice_leading(x_seq, t)?;
        let (s, next, _) = lif_step(graph, x_t, &state, params)?;
        slices.push(s);
        state = next;
    }
    let stacked = graph.stack_leading(&slices)?;
    let reshaped = graph.reshape(stacked, shape)?;
    Ok(SpikeTensor::from_sn_output(reshaped))
}

/// The SN(·) operator: spike normalisation of a real-valued sequence.
pub fn spike_norm<S: Scalar>(
    graph: &mut Graph<S>,
    x: TensorId,
    params: &LifParams<S>,
) -> Result<SpikeTensor> {
    lif_sequence(graph, x, params)
}

/// Plain-loop reference of the same recursion, kept free of the tape so it
/// can serve as an oracle. Processes one neuron trace.
pub fn lif_trace_reference(xs: &[f64], p: &LifSettings) -> Vec<u8> {
    let mut h = 0.0f64;
    xs.iter()
        .map(|&x| {
            let u = h + x;
            let s = if u >= p.u_th { 1u8 } else { 0u8 };
            h = if s == 1 { p.v_reset } else { p.beta * u };
            s
        })
        .collect()
}
