//! Parameter storage and the Adam update rule.

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Entry {
    name: String,
    value: Array2<f64>,
    reads: AtomicUsize,
}

impl Clone for Entry {
    fn clone(&self) -> Self {
        Entry {
            name: self.name.clone(),
            value: self.value.clone(),
            reads: AtomicUsize::new(self.reads.load(Ordering::Relaxed)),
        }
    }
}

/// Named parameter tensors. Every read through [`ParamStore::value`] is
/// counted so inference paths can be audited for which components they touch.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry {
            name,
            value,
            reads: AtomicUsize::new(0),
        });
        ParamId(self.entries.len() - 1)
    }

    /// Gaussian init with standard deviation `std`.
    pub fn add_normal(&mut self, name: &str, shape: (usize, usize), std: f64, rng: &mut impl Rng) -> ParamId {
        let normal = Normal::new(0.0, std).expect("finite std");
        let value = Array2::from_shape_fn(shape, |_| normal.sample(rng));
        self.add(name, value)
    }

    /// Glorot-style init scaled by fan-in.
    pub fn add_weight(&mut self, name: &str, shape: (usize, usize), rng: &mut impl Rng) -> ParamId {
        let std = (1.0 / shape.0 as f64).sqrt();
        self.add_normal(name, shape, std, rng)
    }

    pub fn add_zeros(&mut self, name: &str, shape: (usize, usize)) -> ParamId {
        self.add(name, Array2::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        let entry = &self.entries[id.0];
        entry.reads.fetch_add(1, Ordering::Relaxed);
        &entry.value
    }

    /// Read without touching the audit counter.
    pub fn peek(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Array2<f64>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.dim() != value.dim() {
            return Err(Error::invalid(format!(
                "parameter {} expects shape {:?}, got {:?}",
                entry.name,
                entry.value.dim(),
                value.dim()
            )));
        }
        entry.value = value;
        Ok(())
    }

    pub fn read_count(&self, id: ParamId) -> usize {
        self.entries[id.0].reads.load(Ordering::Relaxed)
    }

    pub fn reset_read_counts(&self) {
        for e in &self.entries {
            e.reads.store(0, Ordering::Relaxed);
        }
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(10.0),
        }
    }
}

/// First/second moment state for every parameter in a store.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Array2<f64>>,
    pub second: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<_> = store.ids().map(|id| Array2::zeros(store.peek(id).dim())).collect();
        Adam {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Applies one update; parameters without a gradient are left untouched,
    /// moments included. Returns the pre-clip global gradient norm.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, &Array2<f64>)], lr: f64) -> f64 {
        let norm = grads
            .iter()
            .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let factor = match self.config.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);
        for &(id, g) in grads {
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            let w = store.value_mut(id);
            ndarray::Zip::from(w).and(m).and(v).and(g).for_each(|w, m, v, &g| {
                let g = g * factor;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                if lr != 0.0 {
                    *w -= lr * (*m / bias1) / ((*v / bias2).sqrt() + eps);
                }
            });
        }
        norm
    }
}
