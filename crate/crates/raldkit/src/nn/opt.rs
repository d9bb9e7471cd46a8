//! Parameter storage, initializers, and the Adam optimizer.
//!
//! Parameters live in a `BTreeMap` keyed by name, so iteration order — and
//! with it the checkpoint blob layout and any accumulation over parameters —
//! is deterministic.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::{Real, Tensor};

/// Named parameter tensors with deterministic iteration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) {
        let prev = self.params.insert(name.to_string(), t);
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn n_elements(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn map_to<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.map_to())).collect(),
        }
    }
}

/// Register every parameter as a graph leaf; trainable leaves receive
/// gradients on backward, constant leaves are inference-only.
pub fn bind_params<T: Real>(
    g: &mut super::Graph<T>,
    store: &ParamStore<T>,
    trainable: bool,
) -> BTreeMap<String, super::NodeId> {
    store
        .iter()
        .map(|(name, t)| {
            let id = if trainable { g.param(t) } else { g.constant(t) };
            (name.clone(), id)
        })
        .collect()
}

/// Pull the gradient of every bound parameter out of a graph after backward.
pub fn collect_grads<T: Real>(
    g: &super::Graph<T>,
    ids: &BTreeMap<String, super::NodeId>,
) -> GradMap<T> {
    ids.iter()
        .filter_map(|(name, id)| g.grad(*id).map(|gr| (name.clone(), gr.to_vec())))
        .collect()
}

/// Xavier/Glorot uniform init for a [fan_in, fan_out] weight.
pub fn xavier_uniform<T: Real>(rng: &mut ChaCha12Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::cast(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data)
}

/// Uniform init in [-limit, limit] for an arbitrary shape.
pub fn uniform_init<T: Real>(rng: &mut ChaCha12Rng, shape: Vec<usize>, limit: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::cast(rng.gen_range(-limit..limit))).collect();
    Tensor::new(shape, data)
}

/// Gradients keyed by parameter name, as produced by one backward pass or an
/// accumulation over a batch.
pub type GradMap<T> = BTreeMap<String, Vec<T>>;

/// Sum `delta` into `acc`, creating entries as needed.
pub fn accumulate_grads<T: Real>(acc: &mut GradMap<T>, delta: &GradMap<T>) {
    for (k, d) in delta {
        match acc.get_mut(k) {
            Some(a) => {
                assert_eq!(a.len(), d.len(), "grad shape changed for {k}");
                for (ai, di) in a.iter_mut().zip(d) {
                    *ai += *di;
                }
            }
            None => {
                acc.insert(k.clone(), d.clone());
            }
        }
    }
}

pub fn scale_grads<T: Real>(grads: &mut GradMap<T>, s: f64) {
    let sv = T::cast(s);
    for g in grads.values_mut() {
        for v in g.iter_mut() {
            *v *= sv;
        }
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<T: Real>(grads: &mut GradMap<T>, max_norm: f64) -> f64 {
    let mut sq = 0f64;
    for g in grads.values() {
        for v in g {
            sq += v.dbl() * v.dbl();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        scale_grads(grads, max_norm / norm);
    }
    norm
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over every parameter that has a gradient entry.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &GradMap<T>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = store.get_mut(name);
            assert_eq!(p.len(), g.len(), "grad/param shape mismatch for {name}");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            for i in 0..g.len() {
                let gi = g[i].dbl();
                let mi = self.beta1 * m[i].dbl() + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i].dbl() + (1.0 - self.beta2) * gi * gi;
                m[i] = T::cast(mi);
                v[i] = T::cast(vi);
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let upd = self.lr * mhat / (vhat.sqrt() + self.eps);
                p.data[i] = T::cast(p.data[i].dbl() - upd);
            }
        }
    }
}
