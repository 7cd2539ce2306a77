//! Spiking patch splitting: images or event frames to spike-form tokens.
//!
//! One stride-`patch_size` convolution (realised as an im2patch reshape plus
//! a dense projection), channel batch normalisation, then a LIF layer.
//! Static images use direct coding: the analog input drives the projection
//! identically at every timestep and only the neuron state differs across
//! steps. Event frames already carry a time axis and are projected per step.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, TensorId};
use crate::energy::Recorder;
use crate::error::{Error, Result};
use crate::neuron::{lif_sequence, LifParams, LifSettings};
use crate::params::{buffer, shared, xavier, ParamSet, SharedParam};
use crate::scalar::Scalar;
use crate::spike::SpikeTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub timesteps: usize,
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::contract(format!(
                "image size {} must be divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.in_channels == 0 || self.embed_dim == 0 || self.timesteps == 0 {
            return Err(Error::contract("channels, embed dim and timesteps must be positive"));
        }
        Ok(())
    }

    /// Token count per image.
    pub fn tokens(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }
}

pub struct SpsEmbedding<S> {
    pub cfg: PatchConfig,
    pub proj_w: SharedParam<S>,
    pub proj_b: SharedParam<S>,
    pub bn_gamma: SharedParam<S>,
    pub bn_beta: SharedParam<S>,
    pub bn_mean: SharedParam<S>,
    pub bn_var: SharedParam<S>,
    pub lif: LifParams<S>,
    bn_momentum: f64,
    bn_eps: f64,
}

impl<S: Scalar> SpsEmbedding<S> {
    pub fn new(cfg: PatchConfig, lif: &LifSettings, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        Ok(SpsEmbedding {
            proj_w: xavier("sps.proj_w", cfg.patch_len(), d, rng),
            proj_b: shared("sps.proj_b", vec![d], vec![S::zero(); d]),
            bn_gamma: shared("sps.bn_gamma", vec![d], vec![S::one(); d]),
            bn_beta: shared("sps.bn_beta", vec![d], vec![S::zero(); d]),
            bn_mean: buffer("sps.bn_mean", vec![d], vec![S::zero(); d]),
            bn_var: buffer("sps.bn_var", vec![d], vec![S::one(); d]),
            lif: LifParams::from_settings(lif)?,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            cfg,
        })
    }

    pub fn collect_params(&self, set: &mut ParamSet<S>) {
        set.insert(&self.proj_w);
        set.insert(&self.proj_b);
        set.insert(&self.bn_gamma);
        set.insert(&self.bn_beta);
        set.insert(&self.bn_mean);
        set.insert(&self.bn_var);
    }

    /// Channel batch-norm over `(rows, D)`; batch statistics in training
    /// mode (with running updates), frozen running statistics otherwise.
    fn batch_norm(&self, graph: &mut Graph<S>, x: TensorId, training: bool) -> Result<TensorId> {
        let eps = S::from_f64_c(self.bn_eps);
        let normalized = if training {
            let mu = graph.mean_axis(x, 0)?;
            let centered = graph.sub(x, mu)?;
            let sq = graph.mul(centered, centered)?;
            let var = graph.mean_axis(sq, 0)?;
            {
                let m = S::from_f64_c(self.bn_momentum);
                let one_m = S::one() - m;
                let mu_v = graph.data(mu).to_vec();
                let var_v = graph.data(var).to_vec();
                let mut rm = self.bn_mean.borrow_mut();
                for (slot, &v) in rm.data.iter_mut().zip(&mu_v) {
                    *slot = m * *slot + one_m * v;
                }
                let mut rv = self.bn_var.borrow_mut();
                for (slot, &v) in rv.data.iter_mut().zip(&var_v) {
                    *slot = m * *slot + one_m * v;
                }
            }
            let denom = graph.add_scalar(var, eps);
            let denom = graph.sqrt(denom);
            graph.div(centered, denom)?
        } else {
            let mu = graph.constant(self.bn_mean.borrow().data.clone(), vec![self.cfg.embed_dim])?;
            let var = graph.constant(self.bn_var.borrow().data.clone(), vec![self.cfg.embed_dim])?;
            let centered = graph.sub(x, mu)?;
            let denom = graph.add_scalar(var, eps);
            let denom = graph.sqrt(denom);
            graph.div(centered, denom)?
        };
        let gamma = graph.param(&self.bn_gamma);
        let beta = graph.param(&self.bn_beta);
        let scaled = graph.mul(normalized, gamma)?;
        graph.add(scaled, beta)
    }

    /// Static image `(B, C, H, W)` to binary tokens `(T, B, N, D)` by direct
    /// coding: one projection, replicated across timesteps before the LIF.
    pub fn encode_static(
        &self,
        graph: &mut Graph<S>,
        pixels: &[S],
        batch: usize,
        training: bool,
        rec: &mut Recorder,
    ) -> Result<SpikeTensor> {
        let cfg = &self.cfg;
        let expect = batch * cfg.in_channels * cfg.image_size * cfg.image_size;
        if pixels.len() != expect {
            return Err(Error::dim(format!(
                "static input has {} values, expected {expect} for (B={batch}, C={}, {}x{})",
                pixels.len(),
                cfg.in_channels,
                cfg.image_size,
                cfg.image_size
            )));
        }
        let n = cfg.tokens();
        let d = cfg.embed_dim;
        let plen = cfg.patch_len();
        let patches = im2patch(pixels, batch, cfg.in_channels, cfg.image_size, cfg.patch_size);
        let patches = graph.constant(patches, vec![batch * n, plen])?;

        rec.dense_matmul("sps.proj", cfg.timesteps, batch * n, plen, d);
        let w = graph.param(&self.proj_w);
        let b = graph.param(&self.proj_b);
        let proj = graph.matmul(patches, w)?;
        let proj = graph.add(proj, b)?;

        let proj = graph.reshape(proj, vec![1, batch, n, d])?;
        let tiled = graph.broadcast_to(proj, vec![cfg.timesteps, batch, n, d])?;
        self.finish(graph, tiled, batch, training, rec)
    }

    /// Event frames `(T, B, 2, H, W)` to binary tokens; frames keep their
    /// own time axis and are projected per step.
    pub fn encode_events(
        &self,
        graph: &mut Graph<S>,
        frames: &[S],
        batch: usize,
        training: bool,
        rec: &mut Recorder,
    ) -> Result<SpikeTensor> {
        let cfg = &self.cfg;
        let frame_len = cfg.in_channels * cfg.image_size * cfg.image_size;
        if !frames.len().is_multiple_of(batch * frame_len) {
            return Err(Error::dim("event input does not match (T,B,C,H,W) extents".to_string()));
        }
        let t_len = frames.len() / (batch * frame_len);
        if t_len != cfg.timesteps {
            return Err(Error::contract(format!(
                "event stream has {t_len} steps, config expects {}",
                cfg.timesteps
            )));
        }
        let n = cfg.tokens();
        let d = cfg.embed_dim;
        let plen = cfg.patch_len();

        let mut patches = Vec::with_capacity(t_len * batch * n * plen);
        let mut nnz_per_t = vec![0u64; t_len];
        for (t, chunk) in frames.chunks(batch * frame_len).enumerate() {
            let p = im2patch(chunk, batch, cfg.in_channels, cfg.image_size, cfg.patch_size);
            nnz_per_t[t] = p.iter().filter(|&&v| v != S::zero()).count() as u64;
            patches.extend(p);
        }
        rec.event_matmul("sps.proj", &nnz_per_t, d);

        let patches = graph.constant(patches, vec![t_len * batch * n, plen])?;
        let w = graph.param(&self.proj_w);
        let b = graph.param(&self.proj_b);
        let proj = graph.matmul(patches, w)?;
        let proj = graph.add(proj, b)?;
        let proj = graph.reshape(proj, vec![t_len, batch, n, d])?;
        self.finish(graph, proj, batch, training, rec)
    }

    fn finish(
        &self,
        graph: &mut Graph<S>,
        pre: TensorId,
        batch: usize,
        training: bool,
        rec: &mut Recorder,
    ) -> Result<SpikeTensor> {
        let cfg = &self.cfg;
        let (t_len, n, d) = (cfg.timesteps, cfg.tokens(), cfg.embed_dim);
        let flat = graph.reshape(pre, vec![t_len * batch * n, d])?;
        let normed = self.batch_norm(graph, flat, training)?;
        for t in 0..t_len {
            rec.neuron_update("sps.bn", t, (2 * batch * n * d) as u64);
        }
        let normed = graph.reshape(normed, vec![t_len, batch, n, d])?;
        let spikes = lif_sequence(graph, normed, &self.lif)?;
        rec.spike_norm_site("sps.lif", graph, &spikes);
        Ok(spikes)
    }
}

/// Row-major patch extraction: `(B, C, H, W)` to `(B * N, C * p * p)`.
fn im2patch<S: Scalar>(pixels: &[S], batch: usize, channels: usize, side: usize, patch: usize) -> Vec<S> {
    let grid = side / patch;
    let n = grid * grid;
    let plen = channels * patch * patch;
    let mut out = vec![S::zero(); batch * n * plen];
    for b in 0..batch {
        for gy in 0..grid {
            for gx in 0..grid {
                let token = (b * n) + gy * grid + gx;
                for c in 0..channels {
                    for ky in 0..patch {
                        for kx in 0..patch {
                            let y = gy * patch + ky;
                            let x = gx * patch + kx;
                            let src = ((b * channels + c) * side + y) * side + x;
                            let dst = token * plen + (c * patch + ky) * patch + kx;
                            out[dst] = pixels[src];
                        }
                    }
                }
            }
        }
    }
    out
}
