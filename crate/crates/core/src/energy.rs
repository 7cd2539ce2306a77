//! Operation-level accounting of accumulate vs multiply-accumulate work.
//!
//! Counting rules, shared with the test oracles:
//!
//! - `ac`: synaptic accumulations triggered by spikes. A binary activation
//!   entering a linear map adds one weight row, so a timestep with `nnz`
//!   active spikes into a `d_out`-wide layer costs `nnz * d_out` ACs. The
//!   attention correlation costs one AC per coincident q/k pair and the
//!   value gating one AC per surviving spike. Residual merges cost one AC
//!   per residual spike.
//! - `mac`: multiply-accumulates in layers fed by real values: the patch
//!   projection on analog images and the classifier head. Interior layers
//!   on the spike path must report zero.
//! - `neuron_update`: real-valued arithmetic intrinsic to neuron state and
//!   normalisation (membrane decay, batch-norm affine work, the expert
//!   average's `1/k` scaling, the once-per-pass prompt projection). Kept in
//!   a separate column so the synaptic ac/mac split stays crisp.
//! - For statically coded images the projection is charged at every
//!   timestep: the architecture presents the input at each step even though
//!   the software reuses one projection.
//!
//! Ledger keys are `(layer_site, timestep)`; counting is exact, never
//! sampled.

use std::collections::BTreeMap;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::spike::SpikeTensor;

/// Per-op defaults (pJ) for a 45 nm process; configuration values, not
/// measured claims.
pub const E_AC_PJ: f64 = 0.9;
pub const E_MAC_PJ: f64 = 4.6;

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct OpCounts {
    pub ac: u64,
    pub mac: u64,
    pub neuron_update: u64,
    pub spikes: u64,
    pub theoretical_ac: u64,
}

impl OpCounts {
    fn add(&mut self, other: &OpCounts) {
        self.ac += other.ac;
        self.mac += other.mac;
        self.neuron_update += other.neuron_update;
        self.spikes += other.spikes;
        self.theoretical_ac += other.theoretical_ac;
    }
}

/// Exact (layer, timestep)-resolved operation counts for one or more passes.
#[derive(Debug, Default, Clone)]
pub struct OpLedger {
    pub entries: BTreeMap<(String, usize), OpCounts>,
}

impl OpLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn slot(&mut self, site: &str, t: usize) -> &mut OpCounts {
        self.entries.entry((site.to_string(), t)).or_default()
    }

    pub fn get(&self, site: &str, t: usize) -> OpCounts {
        self.entries.get(&(site.to_string(), t)).copied().unwrap_or_default()
    }

    pub fn totals(&self) -> OpCounts {
        let mut total = OpCounts::default();
        for c in self.entries.values() {
            total.add(c);
        }
        total
    }

    pub fn merge(&mut self, other: &OpLedger) {
        for ((site, t), counts) in &other.entries {
            self.entries.entry((site.clone(), *t)).or_default().add(counts);
        }
    }

    pub fn layer_totals(&self) -> BTreeMap<String, OpCounts> {
        let mut out: BTreeMap<String, OpCounts> = BTreeMap::new();
        for ((site, _), counts) in &self.entries {
            out.entry(site.clone()).or_default().add(counts);
        }
        out
    }

    /// Total MAC count outside the analog-input projection and the head.
    pub fn interior_mac(&self) -> u64 {
        self.entries
            .iter()
            .filter(|((site, _), _)| !is_analog_site(site))
            .map(|(_, c)| c.mac)
            .sum()
    }

    pub fn report(&self, e_ac: f64, e_mac: f64) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<28} {:>12} {:>12} {:>12} {:>12}\n",
            "layer", "ac", "mac", "neuron_up", "spikes"
        ));
        for (site, c) in self.layer_totals() {
            out.push_str(&format!(
                "{:<28} {:>12} {:>12} {:>12} {:>12}\n",
                site, c.ac, c.mac, c.neuron_update, c.spikes
            ));
        }
        let t = self.totals();
        out.push_str(&format!(
            "{:<28} {:>12} {:>12} {:>12} {:>12}\n",
            "total", t.ac, t.mac, t.neuron_update, t.spikes
        ));
        if let Ok(pj) = energy_estimate(self, e_ac, e_mac) {
            out.push_str(&format!("estimated energy: {pj:.1} pJ (e_ac={e_ac}, e_mac={e_mac})\n"));
        }
        out
    }
}

/// Sites allowed to perform multiply-accumulate work.
pub fn is_analog_site(site: &str) -> bool {
    site == "sps.proj" || site == "head"
}

/// Linear-form energy model over the ledger.
pub fn energy_estimate(ledger: &OpLedger, e_ac_pj: f64, e_mac_pj: f64) -> Result<f64> {
    if e_ac_pj < 0.0 || e_mac_pj < 0.0 {
        return Err(Error::contract("per-op energy constants must be non-negative"));
    }
    let t = ledger.totals();
    Ok(e_ac_pj * t.ac as f64 + e_mac_pj * t.mac as f64)
}

#[derive(Debug, Default)]
pub struct Profiler {
    pub ledger: OpLedger,
}

impl Profiler {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Run one inference-mode forward pass under a fresh profiler and return
/// the exact ledger.
pub fn profile_forward<S: Scalar>(
    model: &crate::model::SpikingMoe<S>,
    input: crate::model::ModelInput<'_, S>,
) -> Result<OpLedger> {
    let mut prof = Profiler::new();
    let mut graph = Graph::new();
    {
        let mut rec = Recorder::on(&mut prof);
        model.forward(&mut graph, input, false, false, &mut rec)?;
    }
    Ok(prof.ledger)
}

/// Pass-through counting handle; all methods are no-ops when disabled so
/// forward code can record unconditionally.
pub struct Recorder<'a> {
    prof: Option<&'a mut Profiler>,
}

impl<'a> Recorder<'a> {
    pub fn off() -> Recorder<'static> {
        Recorder { prof: None }
    }

    pub fn on(p: &'a mut Profiler) -> Recorder<'a> {
        Recorder { prof: Some(p) }
    }

    pub fn is_on(&self) -> bool {
        self.prof.is_some()
    }

    /// Spike-driven linear map: `nnz(t) * d_out` accumulations per step.
    pub fn spike_matmul<S: Scalar>(
        &mut self,
        site: &str,
        graph: &Graph<S>,
        input: &SpikeTensor,
        d_out: usize,
    ) {
        let Some(p) = self.prof.as_deref_mut() else { return };
        for (t, nnz) in input.spikes_per_step(graph).iter().enumerate() {
            let slot = p.ledger.slot(site, t);
            slot.ac += nnz * d_out as u64;
            slot.theoretical_ac += nnz * d_out as u64;
        }
    }

    /// Attention correlation: one AC per coincident pair; the per-step pair
    /// count is the sum of the correlation output at that step.
    pub fn qk_pairs<S: Scalar>(
        &mut self,
        site: &str,
        graph: &Graph<S>,
        dot_out: crate::autodiff::TensorId,
        q: &SpikeTensor,
    ) {
        let Some(p) = self.prof.as_deref_mut() else { return };
        let shape = graph.shape(dot_out);
        let t_len = shape[0];
        let chunk = graph.data(dot_out).len() / t_len;
        let data = graph.data(dot_out);
        let q_nnz = q.spikes_per_step(graph);
        for t in 0..t_len {
            let pairs: f64 = data[t * chunk..(t + 1) * chunk]
                .iter()
                .map(|v| v.to_f64().unwrap_or(0.0))
                .sum();
            let slot = p.ledger.slot(site, t);
            slot.ac += pairs as u64;
            slot.theoretical_ac += q_nnz[t];
        }
    }

    /// Value gating: one AC per spike surviving the mask.
    pub fn gated_pass<S: Scalar>(
        &mut self,
        site: &str,
        graph: &Graph<S>,
        gated: &SpikeTensor,
        v: &SpikeTensor,
    ) {
        let Some(p) = self.prof.as_deref_mut() else { return };
        let v_nnz = v.spikes_per_step(graph);
        for (t, nnz) in gated.spikes_per_step(graph).iter().enumerate() {
            let slot = p.ledger.slot(site, t);
            slot.ac += nnz;
            slot.theoretical_ac += v_nnz[t];
        }
    }

    /// One accumulation per spike: residual merges and token pooling.
    pub fn spike_accumulate<S: Scalar>(&mut self, site: &str, graph: &Graph<S>, spikes: &SpikeTensor) {
        let Some(p) = self.prof.as_deref_mut() else { return };
        for (t, nnz) in spikes.spikes_per_step(graph).iter().enumerate() {
            let slot = p.ledger.slot(site, t);
            slot.ac += nnz;
            slot.theoretical_ac += nnz;
        }
    }

    /// Dense real-valued matmul: `rows * k * n` MACs at every timestep.
    pub fn dense_matmul(&mut self, site: &str, t_len: usize, rows: usize, k: usize, n: usize) {
        let Some(p) = self.prof.as_deref_mut() else { return };
        for t in 0..t_len {
            p.ledger.slot(site, t).mac += (rows * k * n) as u64;
        }
    }

    /// Sparse accumulation for binary (event) inputs into a linear map.
    pub fn event_matmul(&mut self, site: &str, nnz_per_t: &[u64], d_out: usize) {
        let Some(p) = self.prof.as_deref_mut() else { return };
        for (t, nnz) in nnz_per_t.iter().enumerate() {
            let slot = p.ledger.slot(site, t);
            slot.ac += nnz * d_out as u64;
            slot.theoretical_ac += nnz * d_out as u64;
        }
    }

    pub fn neuron_update(&mut self, site: &str, t: usize, count: u64) {
        let Some(p) = self.prof.as_deref_mut() else { return };
        p.ledger.slot(site, t).neuron_update += count;
    }

    /// Record fired spikes and the decay arithmetic of the producing SN.
    pub fn spike_norm_site<S: Scalar>(&mut self, site: &str, graph: &Graph<S>, out: &SpikeTensor) {
        let Some(p) = self.prof.as_deref_mut() else { return };
        let shape = graph.shape(out.values());
        let per_t: u64 = (shape[1..].iter().product::<usize>()) as u64;
        for (t, nnz) in out.spikes_per_step(graph).iter().enumerate() {
            let slot = p.ledger.slot(site, t);
            slot.spikes += nnz;
            slot.neuron_update += per_t;
        }
    }
}
