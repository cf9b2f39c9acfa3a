use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::InvalidConfig(format!("bad optimizer settings {self:?}")));
        }
        Ok(())
    }
}

struct Slot {
    var: Var,
    m: Tensor,
    v: Tensor,
}

/// Adam over a fixed set of named variables. Moments share each variable's
/// dtype and can be exported for checkpointing.
pub struct Adam {
    config: AdamConfig,
    slots: BTreeMap<String, Slot>,
    step: u64,
}

impl Adam {
    pub fn new<'a>(config: AdamConfig, vars: impl IntoIterator<Item = (&'a String, &'a Var)>) -> Result<Self> {
        config.validate()?;
        let slots = vars
            .into_iter()
            .map(|(k, var)| {
                let m = var.as_tensor().zeros_like()?;
                let v = m.clone();
                Ok((k.clone(), Slot { var: var.clone(), m, v }))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            slots,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
        } = self.config;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for slot in self.slots.values_mut() {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            // Gradients carry their graph; keeping it would chain every step.
            let g = g.detach();
            slot.m = ((&slot.m * b1)? + (&g * (1.0 - b1))?)?.detach();
            slot.v = ((&slot.v * b2)? + (g.sqr()? * (1.0 - b2))?)?.detach();
            let m_hat = (&slot.m / bc1)?;
            let v_hat = (&slot.v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            let next = (slot.var.as_tensor() - (update * lr)?)?;
            slot.var.set(&next)?;
        }
        Ok(())
    }

    /// First and second moments as `(name, m, v)` f32 copies.
    pub fn export_state(&self) -> Result<Vec<(String, Vec<usize>, Vec<f32>, Vec<f32>)>> {
        self.slots
            .iter()
            .map(|(k, s)| {
                let flat = |t: &Tensor| -> Result<Vec<f32>> {
                    Ok(t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
                };
                Ok((k.clone(), s.m.dims().to_vec(), flat(&s.m)?, flat(&s.v)?))
            })
            .collect()
    }

    pub fn import_state(
        &mut self,
        step: u64,
        moments: &BTreeMap<String, (Vec<f32>, Vec<f32>)>,
    ) -> Result<()> {
        for (k, slot) in self.slots.iter_mut() {
            let (m, v) = moments
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state for {k}")))?;
            let shape = slot.m.dims().to_vec();
            let dtype = slot.m.dtype();
            let dev = slot.m.device().clone();
            slot.m = Tensor::from_slice(m, shape.as_slice(), &dev)?.to_dtype(dtype)?;
            slot.v = Tensor::from_slice(v, shape.as_slice(), &dev)?.to_dtype(dtype)?;
        }
        self.step = step;
        Ok(())
    }
}
