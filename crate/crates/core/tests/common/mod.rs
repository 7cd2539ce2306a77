//! Shared oracles for the integration suites: finite-difference gradient
//! checking against the shadow forward pass, and plain-loop operation
//! counting independent of the profiler.

use spikemoe_core::autodiff::{Graph, SpikeMode};
use spikemoe_core::model::{ModelConfig, ModelInput, SpikingMoe};
use spikemoe_core::params::SharedParam;
use spikemoe_core::spike::SpikeTensor;

/// Flattened view over a set of shared parameters.
pub struct FlatParams {
    params: Vec<SharedParam<f64>>,
    pub names: Vec<String>,
    offsets: Vec<usize>,
    pub len: usize,
}

impl FlatParams {
    pub fn new(params: Vec<SharedParam<f64>>) -> Self {
        let mut offsets = Vec::with_capacity(params.len());
        let mut names = Vec::with_capacity(params.len());
        let mut len = 0usize;
        for p in &params {
            offsets.push(len);
            names.push(p.borrow().name.clone());
            len += p.borrow().data.len();
        }
        FlatParams { params, names, offsets, len }
    }

    pub fn from_model(model: &SpikingMoe<f64>) -> Self {
        let set = model.parameters();
        let params: Vec<SharedParam<f64>> =
            set.iter().filter(|(_, p)| p.borrow().trainable).map(|(_, p)| p.clone()).collect();
        FlatParams::new(params)
    }

    pub fn read(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len);
        for p in &self.params {
            out.extend_from_slice(&p.borrow().data);
        }
        out
    }

    pub fn write(&self, values: &[f64]) {
        for (p, &off) in self.params.iter().zip(&self.offsets) {
            let mut pb = p.borrow_mut();
            let n = pb.data.len();
            pb.data.copy_from_slice(&values[off..off + n]);
        }
    }

    pub fn read_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len);
        for p in &self.params {
            out.extend_from_slice(&p.borrow().grad);
        }
        out
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.borrow_mut().grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn name_of(&self, flat_index: usize) -> &str {
        let pos = match self.offsets.binary_search(&flat_index) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        &self.names[pos]
    }
}

pub struct GradCheckReport {
    pub checked: usize,
    pub skipped_nonsmooth: usize,
}

/// Compare analytic gradients against central differences of the shadow
/// forward at every parameter coordinate.
///
/// The shadow forward is piecewise linear in the surrogate windows and the
/// routing decision is piecewise constant, so finite differences are exact
/// away from the kink set. A coordinate where the half-step and full-step
/// estimates disagree is sitting on a kink where no derivative estimate is
/// valid; those are skipped and reported, and the caller bounds their
/// fraction.
pub fn shadow_grad_check(
    flat: &FlatParams,
    mut forward: impl FnMut(&[f64]) -> f64,
    analytic: &[f64],
    eps: f64,
    rtol: f64,
) -> Result<GradCheckReport, String> {
    let base = flat.read();
    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut x = base.clone();
    for i in 0..flat.len {
        let fd = |h: f64, x: &mut Vec<f64>, forward: &mut dyn FnMut(&[f64]) -> f64| {
            x[i] = base[i] + h;
            let fp = forward(x);
            x[i] = base[i] - h;
            let fm = forward(x);
            x[i] = base[i];
            (fp - fm) / (2.0 * h)
        };
        let full = fd(eps, &mut x, &mut forward);
        let half = fd(eps / 2.0, &mut x, &mut forward);
        let scale = full.abs().max(half.abs()).max(1e-6);
        if (full - half).abs() > rtol * scale {
            skipped += 1;
            continue;
        }
        checked += 1;
        let a = analytic[i];
        let tol = 1e-7 + rtol * a.abs().max(half.abs());
        if (a - half).abs() > tol {
            return Err(format!(
                "gradient mismatch at {} (coordinate {i}): analytic {a} vs fd {half}",
                flat.name_of(i)
            ));
        }
    }
    flat.write(&base);
    Ok(GradCheckReport { checked, skipped_nonsmooth: skipped })
}

/// Analytic gradient of `loss(forward(params))` through the tape in shadow
/// mode, flattened to match `FlatParams` order.
pub fn analytic_model_grads(
    model: &SpikingMoe<f64>,
    flat: &FlatParams,
    pixels: &[f64],
    batch: usize,
    labels: &[usize],
) -> Vec<f64> {
    let mut g = Graph::<f64>::with_mode(SpikeMode::Shadow);
    let out = model
        .forward(
            &mut g,
            ModelInput::Static { pixels, batch },
            true,
            false,
            &mut spikemoe_core::energy::Recorder::off(),
        )
        .unwrap();
    let loss = model.loss(&mut g, &out, labels).unwrap();
    flat.zero_grads();
    g.backward(loss).unwrap();
    g.accumulate_param_grads().unwrap();
    flat.read_grads()
}

pub fn shadow_model_loss(
    model: &SpikingMoe<f64>,
    pixels: &[f64],
    batch: usize,
    labels: &[usize],
) -> f64 {
    let mut g = Graph::<f64>::with_mode(SpikeMode::Shadow);
    let out = model
        .forward(
            &mut g,
            ModelInput::Static { pixels, batch },
            true,
            false,
            &mut spikemoe_core::energy::Recorder::off(),
        )
        .unwrap();
    let loss = model.loss(&mut g, &out, labels).unwrap();
    g.data(loss)[0]
}

/// Independent per-timestep counting helpers over raw spike bits.
pub fn nnz_per_step(graph: &Graph<f64>, s: &SpikeTensor) -> Vec<u64> {
    let bits = s.to_bits(graph);
    let t_len = s.shape(graph)[0];
    let chunk = bits.len() / t_len;
    (0..t_len)
        .map(|t| bits[t * chunk..(t + 1) * chunk].iter().filter(|&&b| b == 1).count() as u64)
        .collect()
}

/// Coincident q/k pairs per timestep per head-channel sum, counted by loops.
pub fn qk_pairs_per_step(graph: &Graph<f64>, q: &SpikeTensor, k: &SpikeTensor) -> Vec<u64> {
    let qb = q.to_bits(graph);
    let kb = k.to_bits(graph);
    let t_len = q.shape(graph)[0];
    let chunk = qb.len() / t_len;
    (0..t_len)
        .map(|t| {
            (0..chunk)
                .filter(|&i| qb[t * chunk + i] == 1 && kb[t * chunk + i] == 1)
                .count() as u64
        })
        .collect()
}

pub fn random_pixels(cfg: &ModelConfig, batch: usize, seed: u64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..batch * cfg.in_channels * cfg.image_size * cfg.image_size)
        .map(|_| rng.random_range(0.0..1.0))
        .collect()
}
