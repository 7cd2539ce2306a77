//! Binary spike activations.
//!
//! A [`SpikeTensor`] wraps the tape node produced by a spiking
//! nonlinearity. The leading axis is always time; inter-block activations
//! carry the full `(T, B, N, D)` layout while internal expert activations
//! may be `(T, C, D)`. In binary graph mode every entry is exactly 0 or 1;
//! in shadow mode the same wrapper carries the relaxed surrogate values so
//! gradients can be checked end to end.

use crate::autodiff::{Graph, SpikeMode, TensorId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct SpikeTensor {
    node: TensorId,
}

impl SpikeTensor {
    /// Wrap a node that a spiking nonlinearity just produced.
    pub(crate) fn from_sn_output(node: TensorId) -> Self {
        SpikeTensor { node }
    }

    /// Wrap an arbitrary value node, verifying binarity in binary mode.
    pub fn from_values<S: Scalar>(graph: &Graph<S>, node: TensorId) -> Result<Self> {
        if graph.mode() == SpikeMode::Binary {
            let ok = graph.data(node).iter().all(|&v| v == S::zero() || v == S::one());
            if !ok {
                return Err(Error::contract("spike tensor entries must be exactly 0 or 1"));
            }
        }
        Ok(SpikeTensor { node })
    }

    /// Build a leaf spike tensor from raw bits (test inputs, event frames).
    pub fn from_bits<S: Scalar>(graph: &mut Graph<S>, bits: &[u8], shape: Vec<usize>) -> Result<Self> {
        let data: Vec<S> = bits
            .iter()
            .map(|&b| match b {
                0 => Ok(S::zero()),
                1 => Ok(S::one()),
                other => Err(Error::contract(format!("bit value {other} is not 0/1"))),
            })
            .collect::<Result<_>>()?;
        let node = graph.constant(data, shape)?;
        Ok(SpikeTensor { node })
    }

    /// The underlying tape node (0/1-valued in binary mode).
    pub fn values(&self) -> TensorId {
        self.node
    }

    pub fn shape<'g, S: Scalar>(&self, graph: &'g Graph<S>) -> &'g [usize] {
        graph.shape(self.node)
    }

    /// Extract the bits; lossless round trip with [`SpikeTensor::from_bits`].
    pub fn to_bits<S: Scalar>(&self, graph: &Graph<S>) -> Vec<u8> {
        graph.data(self.node).iter().map(|&v| if v == S::one() { 1 } else { 0 }).collect()
    }

    /// Fired-spike count per leading-axis (time) slice.
    pub fn spikes_per_step<S: Scalar>(&self, graph: &Graph<S>) -> Vec<u64> {
        let shape = graph.shape(self.node);
        let t_len = shape[0];
        let chunk = graph.data(self.node).len() / t_len;
        let data = graph.data(self.node);
        (0..t_len)
            .map(|t| data[t * chunk..(t + 1) * chunk].iter().filter(|&&v| v != S::zero()).count() as u64)
            .collect()
    }

    pub fn is_binary<S: Scalar>(&self, graph: &Graph<S>) -> bool {
        graph.data(self.node).iter().all(|&v| v == S::zero() || v == S::one())
    }
}
