//! Spike-driven self-attention.
//!
//! Binary query/key/value streams come out of spike-linear projections.
//! Per token and head the query and key are correlated by a channel sum of
//! their Hadamard product, the summed activity is spike-normalised into a
//! binary gate, and the gate masks the value stream:
//!
//! ```text
//! out = SN(sum_c(Q ⊙ K)) ⊙ V
//! ```
//!
//! No N×N score matrix ever exists; everything is per token, so cost and
//! memory stay linear in the token count. The gated values pass through a
//! final spike-linear whose normalisation fires after the model's membrane
//! shortcut is merged in.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, TensorId};
use crate::energy::{Profiler, Recorder};
use crate::error::{Error, Result};
use crate::neuron::{spike_norm, LifParams, LifSettings};
use crate::params::{xavier, ParamSet, SharedParam};
use crate::scalar::Scalar;
use crate::spike::SpikeTensor;

pub struct SdsaLayer<S> {
    pub name: String,
    pub w_q: SharedParam<S>,
    pub w_k: SharedParam<S>,
    pub w_v: SharedParam<S>,
    pub w_out: SharedParam<S>,
    pub lif_q: LifParams<S>,
    pub lif_k: LifParams<S>,
    pub lif_v: LifParams<S>,
    pub lif_attn: LifParams<S>,
    pub lif_out: LifParams<S>,
    pub heads: usize,
    pub head_dim: usize,
}

impl<S: Scalar> SdsaLayer<S> {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        heads: usize,
        lif: &LifSettings,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::contract(format!("embed dim {dim} not divisible by {heads} heads")));
        }
        let name = name.into();
        let p = LifParams::from_settings(lif)?;
        Ok(SdsaLayer {
            w_q: xavier(format!("{name}.w_q"), dim, dim, rng),
            w_k: xavier(format!("{name}.w_k"), dim, dim, rng),
            w_v: xavier(format!("{name}.w_v"), dim, dim, rng),
            w_out: xavier(format!("{name}.w_out"), dim, dim, rng),
            lif_q: p,
            lif_k: p,
            lif_v: p,
            lif_attn: p,
            lif_out: p,
            heads,
            head_dim: dim / heads,
            name,
        })
    }

    pub fn collect_params(&self, set: &mut ParamSet<S>) {
        set.insert(&self.w_q);
        set.insert(&self.w_k);
        set.insert(&self.w_v);
        set.insert(&self.w_out);
    }
}

/// Linear map over the channel axis of a spike tensor, returning the real
/// pre-membrane activations. Spike-triggered accumulation is recorded as AC.
pub fn linear_from_spikes<S: Scalar>(
    graph: &mut Graph<S>,
    input: &SpikeTensor,
    w: &SharedParam<S>,
    rec: &mut Recorder,
    site: &str,
) -> Result<TensorId> {
    let in_shape = input.shape(graph).to_vec();
    let (d_in, d_out) = {
        let wb = w.borrow();
        (wb.shape[0], wb.shape[1])
    };
    if *in_shape.last().unwrap_or(&0) != d_in {
        return Err(Error::dim(format!(
            "spike linear: input channels {:?} do not match weight rows {d_in}",
            in_shape.last()
        )));
    }
    rec.spike_matmul(site, graph, input, d_out);
    let rows = graph.data(input.values()).len() / d_in;
    let w_node = graph.param(w);
    let flat = graph.reshape(input.values(), vec![rows, d_in])?;
    let out = graph.matmul(flat, w_node)?;
    let mut out_shape = in_shape;
    *out_shape.last_mut().unwrap() = d_out;
    graph.reshape(out, out_shape)
}

/// Spike-linear: linear map of binary input followed by spike normalisation.
pub fn spike_linear<S: Scalar>(
    graph: &mut Graph<S>,
    input: &SpikeTensor,
    w: &SharedParam<S>,
    lif: &LifParams<S>,
    rec: &mut Recorder,
    site: &str,
) -> Result<SpikeTensor> {
    let pre = linear_from_spikes(graph, input, w, rec, site)?;
    let out = spike_norm(graph, pre, lif)?;
    rec.spike_norm_site(&format!("{site}_sn"), graph, &out);
    Ok(out)
}

pub struct SdsaForward {
    /// Real-valued output of the final projection, before the closing SN.
    pub pre_membrane: TensorId,
    /// Per-head attention gates `SN(sum_c(Q ⊙ K))`, shape `(T, B, N, heads)`.
    pub gates: SpikeTensor,
}

/// Attention block up to (not including) its output spike normalisation,
/// so the caller can merge a membrane shortcut before firing.
pub fn sdsa_pre_membrane<S: Scalar>(
    graph: &mut Graph<S>,
    s_in: &SpikeTensor,
    layer: &SdsaLayer<S>,
    rec: &mut Recorder,
) -> Result<SdsaForward> {
    let shape = s_in.shape(graph).to_vec();
    if shape.len() != 4 {
        return Err(Error::dim(format!("sdsa expects (T,B,N,D) input, got {shape:?}")));
    }
    let (t_len, b_len, n_len, d) = (shape[0], shape[1], shape[2], shape[3]);
    let name = &layer.name;

    let q = spike_linear(graph, s_in, &layer.w_q, &layer.lif_q, rec, &format!("{name}.q"))?;
    let k = spike_linear(graph, s_in, &layer.w_k, &layer.lif_k, rec, &format!("{name}.k"))?;
    let v = spike_linear(graph, s_in, &layer.w_v, &layer.lif_v, rec, &format!("{name}.v"))?;

    let activity = graph.spike_qk_dot(q.values(), k.values(), layer.heads)?;
    rec.qk_pairs(&format!("{name}.qk"), graph, activity, &q);

    let gates = spike_norm(graph, activity, &layer.lif_attn)?;
    rec.spike_norm_site(&format!("{name}.attn_sn"), graph, &gates);

    // broadcast each head's gate across its channel slice, then mask V
    let dh = layer.head_dim;
    let g5 = graph.reshape(gates.values(), vec![t_len, b_len, n_len, layer.heads, 1])?;
    let v5 = graph.reshape(v.values(), vec![t_len, b_len, n_len, layer.heads, dh])?;
    let gated5 = graph.mul(g5, v5)?;
    let gated = graph.reshape(gated5, vec![t_len, b_len, n_len, d])?;
    let gated = SpikeTensor::from_values(graph, gated)?;
    rec.gated_pass(&format!("{name}.gate_v"), graph, &gated, &v);

    let pre = linear_from_spikes(graph, &gated, &layer.w_out, rec, &format!("{name}.out"))?;
    Ok(SdsaForward { pre_membrane: pre, gates })
}

/// Full attention operator with its own output normalisation; binary in,
/// binary out, shape preserving.
pub fn sdsa<S: Scalar>(
    graph: &mut Graph<S>,
    s_in: &SpikeTensor,
    layer: &SdsaLayer<S>,
    rec: &mut Recorder,
) -> Result<SpikeTensor> {
    let fwd = sdsa_pre_membrane(graph, s_in, layer, rec)?;
    let out = spike_norm(graph, fwd.pre_membrane, &layer.lif_out)?;
    rec.spike_norm_site(&format!("{}.out_sn", layer.name), graph, &out);
    Ok(out)
}

/// Run the attention operator under a fresh profiler and return its ledger.
pub fn count_sdsa_ops<S: Scalar>(
    graph: &mut Graph<S>,
    s_in: &SpikeTensor,
    layer: &SdsaLayer<S>,
) -> Result<crate::energy::OpLedger> {
    let mut prof = Profiler::new();
    {
        let mut rec = Recorder::on(&mut prof);
        sdsa(graph, s_in, layer, &mut rec)?;
    }
    Ok(prof.ledger)
}
