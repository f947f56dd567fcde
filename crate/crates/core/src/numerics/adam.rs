use indexmap::IndexMap;

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam moments for a fixed set of parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    moments: IndexMap<String, Moments>,
    step: u64,
}

impl AdamState {
    /// Tracks every parameter that currently requires grad.
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let names = params.trainable_names();
        Self::for_names(params, &names, config).expect("names come from the store")
    }

    pub fn for_names<S: AsRef<str>>(params: &ParamStore, names: &[S], config: AdamConfig) -> Result<Self> {
        let mut moments = IndexMap::new();
        for n in names {
            let n = n.as_ref();
            let t = params
                .get(n)
                .ok_or_else(|| Error::MissingParameter(n.to_string()))?;
            moments.insert(
                n.to_string(),
                Moments {
                    m: vec![0.0; t.len()],
                    v: vec![0.0; t.len()],
                },
            );
        }
        Ok(AdamState {
            config,
            moments,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    /// One bias-corrected Adam update of every tracked parameter. Gradients
    /// are read, not cleared.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        for name in self.moments.keys() {
            let t = params
                .get(name)
                .ok_or_else(|| Error::MissingParameter(name.clone()))?;
            if t.grad().is_none() {
                return Err(Error::UninitializedGradient(name.clone()));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, mom) in self.moments.iter_mut() {
            let t = params.get_mut(name).expect("checked above");
            let grad = t.grad().expect("checked above").to_vec();
            let vals = t.values_mut();
            for i in 0..vals.len() {
                let g = grad[i];
                mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * g;
                mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * g * g;
                let mhat = mom.m[i] / c1;
                let vhat = mom.v[i] / c2;
                vals[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    state.step(params)
}
