//! Gradient-descent optimizers with per-parameter learning rates.
//!
//! The learning rate of each parameter is supplied by the caller on every
//! step (`None` leaves the parameter untouched), which is how per-group rates
//! and frozen groups are honored.

use std::collections::BTreeMap;

use crate::config::KeyValues;
use crate::error::Result;
use crate::params::{Grads, Mat, Param, ParamId, ParamStore};
use crate::registry::Registry;

pub trait Optimizer: Send {
    fn name(&self) -> &'static str;

    /// Apply one update. Parameters without a gradient or with `lr == None`
    /// are left unchanged.
    fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: &dyn Fn(&Param) -> Option<f64>);
}

/// Plain stochastic gradient descent: `w -= lr * g`.
#[derive(Debug, Default)]
pub struct Sgd;

impl Optimizer for Sgd {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: &dyn Fn(&Param) -> Option<f64>) {
        for (id, g) in grads.iter() {
            if let Some(rate) = lr(store.get(id)) {
                store.value_mut(id).scaled_add(-rate, g);
            }
        }
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    state: BTreeMap<ParamId, (Mat, Mat, u64)>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            state: BTreeMap::new(),
        }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl Optimizer for Adam {
    fn name(&self) -> &'static str {
        "adam"
    }

    fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: &dyn Fn(&Param) -> Option<f64>) {
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (id, g) in grads.iter() {
            let Some(rate) = lr(store.get(id)) else { continue };
            let (m, v, t) = self
                .state
                .entry(id)
                .or_insert_with(|| (Mat::zeros(g.dim()), Mat::zeros(g.dim()), 0));
            *t += 1;
            let c1 = 1.0 - b1.powi(*t as i32);
            let c2 = 1.0 - b2.powi(*t as i32);
            let w = store.value_mut(id);
            ndarray::Zip::from(w).and(&mut *m).and(&mut *v).and(g).for_each(|w, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= rate * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

pub fn registry() -> Registry<dyn Optimizer> {
    Registry::<dyn Optimizer>::new("optimizer")
        .with("sgd", |_| Ok(Box::new(Sgd)))
        .with("adam", |kv| {
            Ok(Box::new(Adam::new(
                kv.get_or("adam_beta1", 0.9)?,
                kv.get_or("adam_beta2", 0.999)?,
                kv.get_or("adam_eps", 1e-8)?,
            )))
        })
}

pub fn create(name: &str, options: &KeyValues) -> Result<Box<dyn Optimizer>> {
    registry().create(name, options)
}
