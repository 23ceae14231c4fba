//! RMSprop over a parameter set shared by many workers.
//!
//! Both the parameters and the squared-gradient average live behind one lock
//! per tensor. Updates are atomic per tensor; two workers may interleave
//! between tensors, which is the usual lock-free A3C staleness.

use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{ParamStore, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in `{0}`; update rejected")]
    NonFiniteGradient(String),
    #[error("gradient set does not match the parameters: {0}")]
    Shape(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    /// Global L2 clipping threshold; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self { lr: 7e-4, alpha: 0.99, eps: 1e-8, max_grad_norm: Some(40.0) }
    }
}

/// `v ← αv + (1−α)g²; p ← p − η g / (√v + ε)`
pub fn rmsprop_update(param: &mut [f64], sq_avg: &mut [f64], grad: &[f64], cfg: &RmsPropConfig) {
    for ((p, v), g) in param.iter_mut().zip(sq_avg.iter_mut()).zip(grad) {
        *v = cfg.alpha * *v + (1.0 - cfg.alpha) * g * g;
        *p -= cfg.lr * g / (v.sqrt() + cfg.eps);
    }
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Order-sensitive digest of a tensor's bits, stored with every update so
/// readers can detect a torn copy.
pub fn checksum(values: &[f64]) -> u64 {
    values.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3))
}

#[derive(Clone, Debug)]
struct Slot {
    param: Vec<f64>,
    sq_avg: Vec<f64>,
    checksum: u64,
}

/// Parameters plus RMSprop second moments shared across workers.
#[derive(Debug)]
pub struct SharedRmsprop {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    slots: Vec<Mutex<Slot>>,
    cfg: RmsPropConfig,
    version: AtomicU64,
    rejected: AtomicU64,
}

/// Copy of one shared tensor taken under its lock.
#[derive(Clone, Debug)]
pub struct TensorSnapshot {
    pub values: Vec<f64>,
    pub sq_avg: Vec<f64>,
    pub checksum: u64,
}

impl SharedRmsprop {
    pub fn new(store: &ParamStore, cfg: RmsPropConfig) -> Self {
        let slots = store
            .tensors()
            .iter()
            .map(|t| Mutex::new(Slot { param: t.data().to_vec(), sq_avg: vec![0.0; t.len()], checksum: checksum(t.data()) }))
            .collect();
        Self {
            names: store.names().to_vec(),
            shapes: store.tensors().iter().map(|t| t.shape().to_vec()).collect(),
            slots,
            cfg,
            version: AtomicU64::new(0),
            rejected: AtomicU64::new(0),
        }
    }

    pub fn config(&self) -> &RmsPropConfig {
        &self.cfg
    }

    pub fn version(&self) -> u64 {
        self.version.load(Ordering::Acquire)
    }

    pub fn rejected_updates(&self) -> u64 {
        self.rejected.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Copies current parameters into `store` (which must have the same layout)
    /// and returns the version observed before copying.
    pub fn snapshot_into(&self, store: &mut ParamStore) -> u64 {
        let version = self.version();
        for (slot, t) in self.slots.iter().zip(store.tensors_mut()) {
            t.data_mut().copy_from_slice(&slot.lock().param);
            t.zero_grad();
        }
        version
    }

    /// Fresh parameter store holding the current values.
    pub fn snapshot(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for ((name, shape), slot) in self.names.iter().zip(&self.shapes).zip(&self.slots) {
            let t = Tensor::new(shape.clone(), slot.lock().param.clone()).expect("shared layout is consistent");
            store.register(name.clone(), t).expect("names are unique");
        }
        store
    }

    pub fn tensor_snapshot(&self, i: usize) -> TensorSnapshot {
        let s = self.slots[i].lock();
        TensorSnapshot { values: s.param.clone(), sq_avg: s.sq_avg.clone(), checksum: s.checksum }
    }

    /// Applies one RMSprop step, tensor by tensor. Non-finite gradients reject
    /// the whole update before anything is written.
    pub fn apply(&self, grads: &[Vec<f64>]) -> Result<u64, OptimError> {
        self.apply_lr(grads, self.cfg.lr)
    }

    /// [`SharedRmsprop::apply`] with a learning rate other than the configured one.
    pub fn apply_lr(&self, grads: &[Vec<f64>], lr: f64) -> Result<u64, OptimError> {
        if grads.len() != self.slots.len() {
            return Err(OptimError::Shape(format!("{} gradients for {} tensors", grads.len(), self.slots.len())));
        }
        for ((g, shape), name) in grads.iter().zip(&self.shapes).zip(&self.names) {
            if g.len() != shape.iter().product::<usize>() {
                return Err(OptimError::Shape(format!("`{name}` has {} values, gradient {}", shape.iter().product::<usize>(), g.len())));
            }
            if g.iter().any(|v| !v.is_finite()) {
                self.rejected.fetch_add(1, Ordering::Relaxed);
                log::warn!("rejecting update with non-finite gradient in `{name}`");
                return Err(OptimError::NonFiniteGradient(name.clone()));
            }
        }
        let cfg = RmsPropConfig { lr, ..self.cfg };
        for (slot, g) in self.slots.iter().zip(grads) {
            let mut s = slot.lock();
            let Slot { param, sq_avg, checksum: sum } = &mut *s;
            rmsprop_update(param, sq_avg, g, &cfg);
            *sum = checksum(param);
        }
        Ok(self.version.fetch_add(1, Ordering::AcqRel) + 1)
    }
}
