//! The full network: patch spikes in, class logits out.
//!
//! Encoder layers pair spike-driven attention with the expert block. Both
//! merge their pre-membrane output with the incoming spikes (membrane
//! shortcut) before firing, so every tensor crossing a block boundary is
//! binary. After the last layer the token axis is average-pooled per
//! timestep, a linear head maps the resulting firing rates to per-timestep
//! logits, and the final prediction averages those over time. The head is
//! the one non-spiking layer.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{sdsa_pre_membrane, SdsaLayer};
use crate::autodiff::{Graph, TensorId};
use crate::embedding::{PatchConfig, SpsEmbedding};
use crate::energy::Recorder;
use crate::error::{Error, Result};
use crate::moe::{moe_forward, ExpertMlp, MoeLayer, RoutingRecord};
use crate::neuron::{spike_norm, LifSettings};
use crate::params::{xavier, ParamSet, SharedParam};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Smoothed cross entropy on time-averaged logits.
    Ce,
    /// Temporal efficient training: mean of per-timestep cross entropies.
    Tet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub timesteps: usize,
    pub num_classes: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub expert_hidden: usize,
    pub prompt_len: usize,
    pub lif: LifSettings,
    pub alpha_aux: f64,
    pub label_smoothing: f64,
    pub loss_mode: LossMode,
    pub shared_expert_always_on: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            embed_dim: 256,
            heads: 8,
            num_experts: 4,
            top_k: 2,
            timesteps: 4,
            num_classes: 10,
            image_size: 32,
            patch_size: 4,
            in_channels: 3,
            expert_hidden: 1024,
            prompt_len: 1,
            lif: LifSettings::default(),
            alpha_aux: 0.1,
            label_smoothing: 0.1,
            loss_mode: LossMode::Ce,
            shared_expert_always_on: false,
        }
    }
}

impl ModelConfig {
    pub fn patch(&self) -> PatchConfig {
        PatchConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            in_channels: self.in_channels,
            embed_dim: self.embed_dim,
            timesteps: self.timesteps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.patch().validate()?;
        if self.layers == 0 {
            return Err(Error::contract("need at least one encoder layer"));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::contract(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::contract(format!(
                "top-k {} out of range for {} experts",
                self.top_k, self.num_experts
            )));
        }
        if self.num_classes == 0 || self.expert_hidden == 0 || self.prompt_len == 0 {
            return Err(Error::contract("classes, expert hidden width and prompt length must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::contract("label smoothing must lie in [0, 1)"));
        }
        crate::neuron::LifParams::<f64>::from_settings(&self.lif)?;
        Ok(())
    }
}

pub struct EncoderBlock<S> {
    pub sdsa: SdsaLayer<S>,
    pub moe: MoeLayer<S>,
}

pub struct SpikingMoe<S> {
    pub cfg: ModelConfig,
    pub sps: SpsEmbedding<S>,
    pub blocks: Vec<EncoderBlock<S>>,
    pub head_w: SharedParam<S>,
    pub head_b: SharedParam<S>,
}

/// Input presented to one forward pass.
pub enum ModelInput<'a, S> {
    /// `(B, C, H, W)` analog pixels in `[0, 1]`.
    Static { pixels: &'a [S], batch: usize },
    /// `(T, B, 2, H, W)` binary event frames.
    Events { frames: &'a [S], batch: usize },
}

pub struct ModelOutput {
    /// `(B, classes)`: mean over time of the per-step logits.
    pub logits: TensorId,
    /// `(T, B, classes)`.
    pub per_step_logits: TensorId,
    pub routing: Vec<RoutingRecord>,
    /// Scalar sum of the per-layer auxiliary losses (already weighted).
    pub aux_total: TensorId,
    /// Per-layer attention gate maps `(T, B, N, heads)` when collected.
    pub attn_gates: Option<Vec<TensorId>>,
    /// Every tensor that crossed a block boundary, for binarity checks.
    pub block_spikes: Vec<TensorId>,
}

impl<S: Scalar> SpikingMoe<S> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sps = SpsEmbedding::new(cfg.patch(), &cfg.lif, &mut rng)?;
        let shared = ExpertMlp::new("shared_expert", cfg.embed_dim, cfg.expert_hidden, &cfg.lif, &mut rng)?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let sdsa = SdsaLayer::new(format!("layer{l}.sdsa"), cfg.embed_dim, cfg.heads, &cfg.lif, &mut rng)?;
            let moe = MoeLayer::new(
                format!("layer{l}.moe"),
                cfg.embed_dim,
                cfg.expert_hidden,
                cfg.num_experts,
                cfg.top_k,
                cfg.prompt_len,
                &cfg.lif,
                cfg.shared_expert_always_on,
                cfg.alpha_aux,
                shared.clone(),
                &mut rng,
            )?;
            blocks.push(EncoderBlock { sdsa, moe });
        }
        let head_w = xavier("head.w", cfg.embed_dim, cfg.num_classes, &mut rng);
        let head_b = crate::params::shared("head.b", vec![cfg.num_classes], vec![S::zero(); cfg.num_classes]);
        Ok(SpikingMoe { cfg, sps, blocks, head_w, head_b })
    }

    pub fn parameters(&self) -> ParamSet<S> {
        let mut set = ParamSet::new();
        self.sps.collect_params(&mut set);
        for b in &self.blocks {
            b.sdsa.collect_params(&mut set);
            b.moe.collect_params(&mut set);
        }
        set.insert(&self.head_w);
        set.insert(&self.head_b);
        set
    }

    pub fn reset_eval_counters(&self) {
        for b in &self.blocks {
            b.moe.reset_eval_counters();
        }
    }

    pub fn forward(
        &self,
        graph: &mut Graph<S>,
        input: ModelInput<'_, S>,
        training: bool,
        collect_attn: bool,
        rec: &mut Recorder,
    ) -> Result<ModelOutput> {
        let cfg = &self.cfg;
        let (mut spikes, batch) = match input {
            ModelInput::Static { pixels, batch } => {
                (self.sps.encode_static(graph, pixels, batch, training, rec)?, batch)
            }
            ModelInput::Events { frames, batch } => {
                (self.sps.encode_events(graph, frames, batch, training, rec)?, batch)
            }
        };
        let mut block_spikes = vec![spikes.values()];
        let mut routing = Vec::with_capacity(cfg.layers);
        let mut attn_gates = collect_attn.then(Vec::new);
        let mut aux_total = graph.scalar(S::zero());

        for (l, block) in self.blocks.iter().enumerate() {
            // attention with membrane shortcut: fire after merging
            let att = sdsa_pre_membrane(graph, &spikes, &block.sdsa, rec)?;
            rec.spike_accumulate(&format!("layer{l}.sdsa.residual"), graph, &spikes);
            let merged = graph.add(att.pre_membrane, spikes.values())?;
            let s_att = spike_norm(graph, merged, &block.sdsa.lif_out)?;
            rec.spike_norm_site(&format!("layer{l}.sdsa.out_sn"), graph, &s_att);
            if let Some(gates) = attn_gates.as_mut() {
                gates.push(att.gates.values());
            }
            block_spikes.push(s_att.values());

            // expert block merges its own shortcut internally
            let moe = moe_forward(graph, &s_att, &block.moe, rec)?;
            routing.push(moe.record);
            aux_total = graph.add(aux_total, moe.aux)?;
            block_spikes.push(moe.out.values());
            spikes = moe.out;
        }

        // global average pooling over tokens, per timestep
        rec.spike_accumulate("head_gap", graph, &spikes);
        let rates = graph.mean_axis(spikes.values(), 2)?; // (T, B, D)
        let t_len = cfg.timesteps;
        for t in 0..t_len {
            rec.neuron_update("head_gap", t, (batch * cfg.embed_dim) as u64);
        }

        rec.dense_matmul("head", t_len, batch, cfg.embed_dim, cfg.num_classes);
        let w = graph.param(&self.head_w);
        let b = graph.param(&self.head_b);
        let flat = graph.reshape(rates, vec![t_len * batch, cfg.embed_dim])?;
        let logits_flat = graph.matmul(flat, w)?;
        let logits_flat = graph.add(logits_flat, b)?;
        let per_step_logits = graph.reshape(logits_flat, vec![t_len, batch, cfg.num_classes])?;
        let logits = graph.mean_axis(per_step_logits, 0)?;

        Ok(ModelOutput {
            logits,
            per_step_logits,
            routing,
            aux_total,
            attn_gates,
            block_spikes,
        })
    }

    /// Classification loss plus the routing auxiliaries.
    pub fn loss(&self, graph: &mut Graph<S>, out: &ModelOutput, labels: &[usize]) -> Result<TensorId> {
        let smoothing = S::from_f64_c(self.cfg.label_smoothing);
        let labels = Rc::new(labels.to_vec());
        let ce = match self.cfg.loss_mode {
            LossMode::Ce => graph.softmax_cross_entropy(out.logits, labels, smoothing)?,
            LossMode::Tet => {
                let t_len = self.cfg.timesteps;
                let mut acc = graph.scalar(S::zero());
                for t in 0..t_len {
                    let step = graph.slice_leading(out.per_step_logits, t)?;
                    let ce_t = graph.softmax_cross_entropy(step, labels.clone(), smoothing)?;
                    acc = graph.add(acc, ce_t)?;
                }
                graph.scale(acc, S::one() / S::from_f64_c(t_len as f64))
            }
        };
        graph.add(ce, out.aux_total)
    }

    /// Per-sample argmax; ties resolve to the lowest class index.
    pub fn predict(&self, graph: &Graph<S>, out: &ModelOutput) -> Vec<usize> {
        let classes = self.cfg.num_classes;
        let data = graph.data(out.logits);
        data.chunks(classes)
            .map(|row| {
                let mut best = 0usize;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}
