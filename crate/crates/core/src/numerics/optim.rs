use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Named parameter tensors with gradient staging buffers.
///
/// BTreeMap keeps iteration order deterministic, which checkpointing and the
/// bitwise-reproducibility tests rely on.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.grads.insert(name.to_string(), Tensor::zeros(value.shape().to_vec()));
        self.params.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.params.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.params.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Add a gradient contribution for `name`.
    pub fn accumulate_grad(&mut self, name: &str, grad: &[f64]) {
        let g = self.grads.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        debug_assert_eq!(g.numel(), grad.len());
        for (a, b) in g.data_mut().iter_mut().zip(grad) {
            *a += b;
        }
    }

    pub fn grad(&self, name: &str) -> &Tensor {
        self.grads.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// FNV-1a checksum over raw parameter bytes, for disjointness tests.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, t) in &self.params {
            if !name.starts_with(prefix) {
                continue;
            }
            for b in name.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
            }
            for v in t.data() {
                for b in v.to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Adam with decoupled weight decay over a fixed set of parameter names.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over the named parameters from their staged gradients.
    /// Weight decay is decoupled: it scales the parameter directly and never
    /// enters the moment estimates.
    pub fn step(&mut self, store: &mut ParamStore, names: &[String]) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for name in names {
            if !store.contains(name) {
                return Err(Error::arg("adam_step", format!("unknown parameter {name}")));
            }
            let grad = store.grad(name).clone();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| {
                    (Tensor::zeros(grad.shape().to_vec()), Tensor::zeros(grad.shape().to_vec()))
                });
            let param = store.get_mut(name);
            let pd = param.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let g = grad.data()[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * g;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * g * g;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= self.lr * self.weight_decay * pd[i];
                pd[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn moments(&self) -> &BTreeMap<String, (Tensor, Tensor)> {
        &self.moments
    }

    pub fn set_state(&mut self, step: u64, moments: BTreeMap<String, (Tensor, Tensor)>) {
        self.step = step;
        self.moments = moments;
    }
}
