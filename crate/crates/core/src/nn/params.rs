use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use super::graph::Gradients;
use super::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    name: String,
    value: Tensor,
    grad: Option<Tensor>,
    m: Tensor,
    v: Tensor,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }
}

/// Named trainable tensors with gradient slots and Adam moments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<Param>,
    step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.id(name).is_some() {
            return Err(Error::Layout(format!("duplicate parameter {name}")));
        }
        let shape = value.shape().to_vec();
        self.entries.push(Param {
            name: name.into(),
            value,
            grad: None,
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn expect(&self, name: &str) -> Result<ParamId> {
        self.id(name).ok_or_else(|| Error::Layout(format!("missing parameter {name}")))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    /// Adds gradients from a backward pass into the gradient slots.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (i, g) in grads.params().iter().enumerate() {
            let Some(g) = g else { continue };
            let p = self
                .entries
                .get_mut(i)
                .ok_or_else(|| Error::Layout(format!("gradient for unknown parameter {i}")))?;
            if g.shape() != p.value.shape() {
                return Err(Error::Shape(format!("gradient shape {:?} for {}", g.shape(), p.name)));
            }
            match &mut p.grad {
                Some(acc) => super::tensor::axpy(acc.data_mut(), 1.0, g.data()),
                slot @ None => *slot = Some(g.clone()),
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad = None;
        }
    }

    /// One bias-corrected Adam update; consumes the accumulated gradients.
    ///
    /// Parameters that received no gradient since the last step are skipped;
    /// if none did, this is an error.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if self.entries.iter().all(|p| p.grad.is_none()) {
            return Err(Error::Optimizer("adam step without gradients".into()));
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(cfg.beta1, t);
        let c2 = 1.0 - libm::pow(cfg.beta2, t);
        for p in &mut self.entries {
            let Some(g) = p.grad.take() else { continue };
            let (m, v, w) = (p.m.data_mut(), p.v.data_mut(), p.value.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                w[i] -= cfg.lr * mh / (libm::sqrt(vh) + cfg.eps);
            }
            p.value.ensure_finite(&p.name)?;
        }
        Ok(())
    }

    /// Replaces the value of an existing parameter (used by checkpoint loading).
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.expect(name)?;
        let p = &mut self.entries[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Layout(format!(
                "parameter {name} has shape {:?}, checkpoint has {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }
}

/// Uniform Glorot initialization in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(alloc::vec![fan_in, fan_out], data).expect("positive fan sizes")
}
