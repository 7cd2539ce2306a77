//! Spike-compatible mixture-of-experts with prompt-conditioned routing.
//!
//! The gate fuses each token's spike vector with a learnable prompt and
//! emits binary gating spikes `G = SN(linear([S; P]))` per expert channel.
//! Tokens pick their top-k experts by gating activity accumulated over the
//! timesteps (ties fall to the lowest expert index), the selected experts
//! run as two-layer spike MLPs on exactly the tokens routed to them, and
//! their outputs are averaged with uniform weight `1/k`. The averaged
//! membrane current is merged with the residual spikes and fired through
//! one closing spike normalisation, so the deferred second-stage
//! normalisation of each expert lives at the merge site.
//!
//! Routing is a hard decision: gradients reach the gate weights and the
//! prompt only through the surrogate derivative of the gate spikes, whose
//! per-token activity counts also feed the auxiliary balance/diversity
//! loss.

use std::cell::Cell;
use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{linear_from_spikes, spike_linear};
use crate::autodiff::{Graph, TensorId};
use crate::energy::Recorder;
use crate::error::{Error, Result};
use crate::neuron::{spike_norm, LifParams, LifSettings};
use crate::params::{small_normal, xavier, ParamSet, SharedParam};
use crate::scalar::Scalar;
use crate::spike::SpikeTensor;

/// Load-fraction stabiliser in the balance loss.
const LOAD_EPS: f64 = 1e-8;

/// Two-layer spike MLP. Cloning shares the weight storage, which is how the
/// cross-layer shared expert is realised.
#[derive(Clone)]
pub struct ExpertMlp<S> {
    pub name: String,
    pub w1: SharedParam<S>,
    pub lif1: LifParams<S>,
    pub w2: SharedParam<S>,
    /// Tokens this expert instance processed since the last reset.
    pub tokens_evaluated: Cell<u64>,
}

impl<S: Scalar> ExpertMlp<S> {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        hidden: usize,
        lif: &LifSettings,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let name = name.into();
        Ok(ExpertMlp {
            w1: xavier(format!("{name}.w1"), dim, hidden, rng),
            lif1: LifParams::from_settings(lif)?,
            w2: xavier(format!("{name}.w2"), hidden, dim, rng),
            tokens_evaluated: Cell::new(0),
            name,
        })
    }

    pub fn collect_params(&self, set: &mut ParamSet<S>) {
        set.insert(&self.w1);
        set.insert(&self.w2);
    }
}

/// Learnable prompt broadcast to every token at gating time.
pub struct SdPrompt<S> {
    pub p: SharedParam<S>,
}

impl<S: Scalar> SdPrompt<S> {
    pub fn new(name: impl Into<String>, len: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        SdPrompt { p: small_normal(name, vec![len, dim], 0.02, rng) }
    }

    pub fn width(&self) -> usize {
        let pb = self.p.borrow();
        pb.shape[0] * pb.shape[1]
    }
}

/// Expert choice bookkeeping for one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub layer: String,
    pub batch: usize,
    pub tokens_per_sample: usize,
    pub num_experts: usize,
    pub k: usize,
    /// Per token (batch-major), the chosen expert indices.
    pub selected: Vec<Vec<usize>>,
    /// Per (token, expert) gating spikes accumulated over time, row-major
    /// `(batch * tokens_per_sample, num_experts)`.
    pub gate_counts: Vec<f64>,
    /// Routed-token count per expert.
    pub loads: Vec<u64>,
    /// Active experts in this pass.
    pub n_routed: usize,
    /// Expert excluded from the balance target's support (the forced shared
    /// expert when always-on routing is enabled).
    #[serde(default)]
    pub excluded_expert: Option<usize>,
}

impl RoutingRecord {
    pub fn total_tokens(&self) -> usize {
        self.batch * self.tokens_per_sample
    }

    /// Entropy (nats) of the normalised load distribution.
    pub fn load_entropy(&self) -> f64 {
        let total: u64 = self.loads.iter().sum();
        if total == 0 {
            return 0.0;
        }
        let neg: f64 = self
            .loads
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total as f64;
                p * p.ln()
            })
            .sum();
        (-neg).max(0.0)
    }
}

pub struct MoeLayer<S> {
    pub name: String,
    /// `num_experts` experts; the last one is the cross-layer shared expert.
    pub experts: Vec<ExpertMlp<S>>,
    pub shared_index: usize,
    pub k: usize,
    /// Gate weights over the concatenated `[token spikes; prompt]` input,
    /// shape `(D + prompt_width, num_experts)`.
    pub gate_w: SharedParam<S>,
    pub gate_lif: LifParams<S>,
    pub out_lif: LifParams<S>,
    pub prompt: SdPrompt<S>,
    pub shared_always_on: bool,
    pub alpha_aux: S,
}

impl<S: Scalar> MoeLayer<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        hidden: usize,
        num_experts: usize,
        k: usize,
        prompt_len: usize,
        lif: &LifSettings,
        shared_always_on: bool,
        alpha_aux: f64,
        shared: ExpertMlp<S>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if num_experts == 0 || k == 0 || k > num_experts {
            return Err(Error::contract(format!(
                "need 1 <= k <= num_experts, got k={k}, num_experts={num_experts}"
            )));
        }
        let name = name.into();
        let mut experts = Vec::with_capacity(num_experts);
        for i in 0..num_experts - 1 {
            experts.push(ExpertMlp::new(format!("{name}.expert{i}"), dim, hidden, lif, rng)?);
        }
        experts.push(shared);
        let prompt = SdPrompt::new(format!("{name}.prompt"), prompt_len, dim, rng);
        let gate_in = dim + prompt.width();
        Ok(MoeLayer {
            gate_w: xavier(format!("{name}.gate_w"), gate_in, num_experts, rng),
            gate_lif: LifParams::from_settings(lif)?,
            out_lif: LifParams::from_settings(lif)?,
            prompt,
            shared_index: num_experts - 1,
            k,
            shared_always_on,
            alpha_aux: S::from_f64_c(alpha_aux),
            experts,
            name,
        })
    }

    pub fn collect_params(&self, set: &mut ParamSet<S>) {
        for e in &self.experts {
            e.collect_params(set);
        }
        set.insert(&self.gate_w);
        set.insert(&self.prompt.p);
    }

    pub fn reset_eval_counters(&self) {
        for e in &self.experts {
            e.tokens_evaluated.set(0);
        }
    }

    /// Apply this layer's routing policy to fresh gate counts.
    pub fn route(&self, record: &RoutingRecord) -> Result<RoutingRecord> {
        if self.shared_always_on {
            select_topk_forced(record, self.k, Some(self.shared_index))
        } else {
            select_topk(record, self.k)
        }
    }
}

pub struct GateOutput {
    /// Binary gating spikes `(T, B, N, num_experts)`.
    pub gates: SpikeTensor,
    /// Tape node of the time-accumulated gate counts `(B, N, num_experts)`;
    /// keeps the surrogate-gradient link for the auxiliary loss.
    pub counts_node: TensorId,
    /// Routing record with counts filled in; selection happens separately.
    pub record: RoutingRecord,
}

/// Prompt-conditioned gating: concatenate each token's spikes with the
/// prompt, project into one channel per expert, and spike-normalise.
///
/// The concatenated linear map is evaluated as two partial products; the
/// prompt half is token-independent, so it is one small projection per pass.
pub fn gate<S: Scalar>(
    graph: &mut Graph<S>,
    s_l: &SpikeTensor,
    prompt: &SdPrompt<S>,
    layer: &MoeLayer<S>,
    rec: &mut Recorder,
) -> Result<GateOutput> {
    let shape = s_l.shape(graph).to_vec();
    if shape.len() != 4 {
        return Err(Error::dim(format!("gate expects (T,B,N,D) input, got {shape:?}")));
    }
    let (t_len, b_len, n_len, d) = (shape[0], shape[1], shape[2], shape[3]);
    let p_width = prompt.width();
    let (gate_rows, num_experts) = {
        let wb = layer.gate_w.borrow();
        (wb.shape[0], wb.shape[1])
    };
    if gate_rows != d + p_width {
        return Err(Error::dim(format!(
            "gate weight expects {gate_rows} input channels, got {d} token + {p_width} prompt"
        )));
    }
    let name = &layer.name;

    let w = graph.param(&layer.gate_w);
    let w_spike = graph.slice_rows(w, 0, d)?;
    let w_prompt = graph.slice_rows(w, d, p_width)?;

    rec.spike_matmul(&format!("{name}.gate"), graph, s_l, num_experts);
    let flat = graph.reshape(s_l.values(), vec![t_len * b_len * n_len, d])?;
    let token_part = graph.matmul(flat, w_spike)?;
    let token_part = graph.reshape(token_part, vec![t_len, b_len, n_len, num_experts])?;

    let p_node = graph.param(&prompt.p);
    let p_flat = graph.reshape(p_node, vec![1, p_width])?;
    let prompt_part = graph.matmul(p_flat, w_prompt)?;
    let prompt_part = graph.reshape(prompt_part, vec![num_experts])?;
    rec.neuron_update(&format!("{name}.gate_prompt"), 0, (p_width * num_experts) as u64);

    let pre = graph.add(token_part, prompt_part)?;
    let gates = spike_norm(graph, pre, &layer.gate_lif)?;
    rec.spike_norm_site(&format!("{name}.gate_sn"), graph, &gates);

    let counts_node = graph.sum_axis(gates.values(), 0)?;
    let gate_counts: Vec<f64> = graph.data(counts_node).iter().map(|v| v.to_f64().unwrap_or(0.0)).collect();

    let record = RoutingRecord {
        layer: name.clone(),
        batch: b_len,
        tokens_per_sample: n_len,
        num_experts,
        k: layer.k,
        selected: Vec::new(),
        gate_counts,
        loads: vec![0; num_experts],
        n_routed: 0,
        excluded_expert: None,
    };
    Ok(GateOutput { gates, counts_node, record })
}

fn rank_experts(counts: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        counts[b].partial_cmp(&counts[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    order
}

/// Per token, keep the `k` experts with the highest accumulated gating
/// activity; ties break toward the lowest expert index.
pub fn select_topk(record: &RoutingRecord, k: usize) -> Result<RoutingRecord> {
    select_topk_forced(record, k, None)
}

fn select_topk_forced(record: &RoutingRecord, k: usize, forced: Option<usize>) -> Result<RoutingRecord> {
    let experts = record.num_experts;
    if k == 0 || k > experts {
        return Err(Error::contract(format!("top-k {k} out of range for {experts} experts")));
    }
    let tokens = record.total_tokens();
    if record.gate_counts.len() != tokens * experts {
        return Err(Error::contract("gate counts not populated for top-k selection"));
    }
    let mut out = record.clone();
    out.k = k;
    out.selected = Vec::with_capacity(tokens);
    out.loads = vec![0; experts];
    out.excluded_expert = forced;
    for tok in 0..tokens {
        let row = &record.gate_counts[tok * experts..(tok + 1) * experts];
        let mut chosen: Vec<usize> = Vec::with_capacity(k);
        if let Some(f) = forced {
            chosen.push(f);
        }
        for e in rank_experts(row) {
            if chosen.len() == k {
                break;
            }
            if Some(e) != forced {
                chosen.push(e);
            }
        }
        chosen.sort_unstable();
        for &e in &chosen {
            out.loads[e] += 1;
        }
        out.selected.push(chosen);
    }
    out.n_routed = out
        .loads
        .iter()
        .enumerate()
        .filter(|&(e, &c)| c > 0 && Some(e) != forced)
        .count();
    Ok(out)
}

/// One expert applied to a `(T, C, D)` slice of binary tokens: spike-linear
/// into the hidden width, then a plain linear back to `D`, returning the
/// real pre-membrane output. The closing spike normalisation happens after
/// residual merging in [`moe_forward`].
pub fn expert_forward<S: Scalar>(
    graph: &mut Graph<S>,
    s: &SpikeTensor,
    expert: &ExpertMlp<S>,
    rec: &mut Recorder,
) -> Result<TensorId> {
    let shape = s.shape(graph).to_vec();
    let tokens: usize = shape[1..shape.len() - 1].iter().product();
    let hidden = spike_linear(graph, s, &expert.w1, &expert.lif1, rec, &format!("{}.w1", expert.name))?;
    let out = linear_from_spikes(graph, &hidden, &expert.w2, rec, &format!("{}.w2", expert.name))?;
    expert.tokens_evaluated.set(expert.tokens_evaluated.get() + tokens as u64);
    Ok(out)
}

pub struct MoeForward {
    /// Binary output after residual merge and spike normalisation.
    pub out: SpikeTensor,
    pub record: RoutingRecord,
    /// Auxiliary loss scalar on the tape.
    pub aux: TensorId,
    pub gates: SpikeTensor,
    pub counts_node: TensorId,
    /// Merged membrane before the closing normalisation.
    pub pre_membrane: TensorId,
}

/// Route every token to its top-k experts, evaluate exactly those experts
/// on exactly those tokens, average with weight `1/k`, merge the residual
/// membrane, and fire.
pub fn moe_forward<S: Scalar>(
    graph: &mut Graph<S>,
    s_l: &SpikeTensor,
    layer: &MoeLayer<S>,
    rec: &mut Recorder,
) -> Result<MoeForward> {
    let shape = s_l.shape(graph).to_vec();
    let (t_len, b_len, n_len, d) = (shape[0], shape[1], shape[2], shape[3]);
    let name = &layer.name;

    let gate_out = gate(graph, s_l, &layer.prompt, layer, rec)?;
    let record = layer.route(&gate_out.record)?;

    // token list per expert, batch-major for determinism
    let mut per_expert: Vec<Vec<(usize, usize)>> = vec![Vec::new(); record.num_experts];
    for (tok, chosen) in record.selected.iter().enumerate() {
        let b = tok / n_len;
        let n = tok % n_len;
        for &e in chosen {
            per_expert[e].push((b, n));
        }
    }

    let mut acc = graph.zeros(vec![t_len, b_len, n_len, d]);
    for (e, tokens) in per_expert.iter().enumerate() {
        if tokens.is_empty() {
            continue;
        }
        let tokens = Rc::new(tokens.clone());
        let gathered = graph.gather_tokens(s_l.values(), tokens.clone())?;
        let gathered = SpikeTensor::from_values(graph, gathered)?;
        let expert_out = expert_forward(graph, &gathered, &layer.experts[e], rec)?;
        let scattered = graph.scatter_tokens(expert_out, tokens, b_len, n_len)?;
        acc = graph.add(acc, scattered)?;
    }
    let inv_k = S::one() / S::from_f64_c(record.k as f64);
    let averaged = graph.scale(acc, inv_k);
    for t in 0..t_len {
        rec.neuron_update(&format!("{name}.avg"), t, (b_len * n_len * d) as u64);
    }

    rec.spike_accumulate(&format!("{name}.residual"), graph, s_l);
    let merged = graph.add(averaged, s_l.values())?;
    let out = spike_norm(graph, merged, &layer.out_lif)?;
    rec.spike_norm_site(&format!("{name}.out_sn"), graph, &out);

    let aux = aux_loss(graph, &record, Some(gate_out.counts_node), layer.alpha_aux)?;
    Ok(MoeForward {
        out,
        record,
        aux,
        gates: gate_out.gates,
        counts_node: gate_out.counts_node,
        pre_membrane: merged,
    })
}

/// Auxiliary routing loss `alpha * (balance - importance)`.
///
/// The balance term compares the hard load fractions `u_k = c_k / sum_j c_j`
/// (stabilised against a zero total) of the active experts against the
/// uniform target `1/n_routed`, scaled by `n_routed`; it carries no
/// gradient. The importance term is the normalised entropy of the mean
/// per-token gate-activity distribution, computed on the tape so gradients
/// reach the gate and prompt through the gate's surrogate.
pub fn aux_loss<S: Scalar>(
    graph: &mut Graph<S>,
    record: &RoutingRecord,
    counts_node: Option<TensorId>,
    alpha: S,
) -> Result<TensorId> {
    let total_load: u64 = record.loads.iter().sum();
    if record.loads.is_empty() || total_load == 0 {
        return Err(Error::contract("auxiliary loss needs a populated routing record"));
    }
    if record.n_routed == 0 {
        return Err(Error::contract("auxiliary loss needs at least one active expert"));
    }

    // the stabiliser only guards the degenerate zero-load division; adding
    // it to a real total would perturb the balance value itself
    let denom = (total_load as f64).max(LOAD_EPS);
    let target = 1.0 / record.n_routed as f64;
    let mut mse = 0.0;
    let mut active = 0usize;
    for (e, &c) in record.loads.iter().enumerate() {
        if c == 0 || Some(e) == record.excluded_expert {
            continue;
        }
        let u = c as f64 / denom;
        mse += (u - target) * (u - target);
        active += 1;
    }
    let balance = if active == 0 { 0.0 } else { record.n_routed as f64 * mse / active as f64 };
    let balance_node = graph.scalar(S::from_f64_c(balance));

    let importance = match counts_node {
        Some(cn) if record.n_routed > 1 => {
            let shape = graph.shape(cn).to_vec();
            let (b_len, n_len, experts) = (shape[0], shape[1], shape[2]);
            let sums = graph.sum_axis(cn, 2)?;
            let sums = graph.reshape(sums, vec![b_len, n_len, 1])?;
            let sums = graph.add_scalar(sums, S::from_f64_c(LOAD_EPS));
            let probs = graph.div(cn, sums)?;
            let flat = graph.reshape(probs, vec![b_len * n_len, experts])?;
            let mean_p = graph.mean_axis(flat, 0)?;
            let shifted = graph.add_scalar(mean_p, S::from_f64_c(1e-12));
            let logs = graph.log(shifted);
            let terms = graph.mul(mean_p, logs)?;
            let neg_entropy = graph.sum_all(terms);
            let norm = -1.0 / (record.n_routed as f64).ln();
            graph.scale(neg_entropy, S::from_f64_c(norm))
        }
        _ => graph.scalar(S::zero()),
    };

    let diff = graph.sub(balance_node, importance)?;
    Ok(graph.scale(diff, alpha))
}
