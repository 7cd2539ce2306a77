//! Named, shared parameter storage.
//!
//! Parameters live outside the per-pass tape so they survive between
//! forward passes and can be shared: the expert shared across encoder
//! layers is one `SharedParam` referenced from several places, so an
//! optimizer step through one layer is visible from every layer.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug)]
pub struct Parameter<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    pub grad: Vec<S>,
    pub trainable: bool,
}

pub type SharedParam<S> = Rc<RefCell<Parameter<S>>>;

pub fn shared<S: Scalar>(name: impl Into<String>, shape: Vec<usize>, data: Vec<S>) -> SharedParam<S> {
    let n = data.len();
    debug_assert_eq!(n, shape.iter().product::<usize>());
    Rc::new(RefCell::new(Parameter {
        name: name.into(),
        shape,
        grad: vec![S::zero(); n],
        data,
        trainable: true,
    }))
}

/// Non-trainable buffer (running statistics and the like); still checkpointed.
pub fn buffer<S: Scalar>(name: impl Into<String>, shape: Vec<usize>, data: Vec<S>) -> SharedParam<S> {
    let p = shared(name, shape, data);
    p.borrow_mut().trainable = false;
    p
}

/// Uniform Xavier/Glorot initialisation.
pub fn xavier<S: Scalar>(
    name: impl Into<String>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> SharedParam<S> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<S> = (0..fan_in * fan_out)
        .map(|_| S::from_f64_c(rng.random_range(-bound..bound)))
        .collect();
    shared(name, vec![fan_in, fan_out], data)
}

/// Small-magnitude normal init (Box-Muller), used for prompt embeddings.
pub fn small_normal<S: Scalar>(
    name: impl Into<String>,
    shape: Vec<usize>,
    std: f64,
    rng: &mut ChaCha8Rng,
) -> SharedParam<S> {
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n)
        .map(|_| {
            let u1: f64 = rng.random_range(f64::EPSILON..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            S::from_f64_c(z * std)
        })
        .collect();
    shared(name, shape, data)
}

/// Deterministically ordered view over a model's parameters, deduplicated by
/// name. Shared storage registered from several owners appears once.
#[derive(Default)]
pub struct ParamSet<S> {
    map: BTreeMap<String, SharedParam<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, p: &SharedParam<S>) {
        let name = p.borrow().name.clone();
        if let Some(existing) = self.map.get(&name) {
            debug_assert!(Rc::ptr_eq(existing, p), "distinct parameters share the name {name}");
            return;
        }
        self.map.insert(name, p.clone());
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &SharedParam<S>)> {
        self.map.iter()
    }

    pub fn get(&self, name: &str) -> Option<&SharedParam<S>> {
        self.map.get(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn zero_grad(&self) {
        for p in self.map.values() {
            for g in p.borrow_mut().grad.iter_mut() {
                *g = S::zero();
            }
        }
    }

    /// Overwrite parameter values from `(name, shape, data)` triples,
    /// rejecting unknown names and shape mismatches.
    pub fn load_values(&self, tensors: &[(String, Vec<usize>, Vec<S>)]) -> Result<()> {
        for (name, shape, data) in tensors {
            let p = self
                .map
                .get(name)
                .ok_or_else(|| Error::contract(format!("unknown parameter tensor '{name}'")))?;
            let mut pb = p.borrow_mut();
            if &pb.shape != shape {
                return Err(Error::dim(format!(
                    "tensor '{name}' has shape {shape:?}, expected {:?}",
                    pb.shape
                )));
            }
            pb.data.copy_from_slice(data);
        }
        Ok(())
    }
}
