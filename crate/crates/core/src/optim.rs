//! Adam with serializable moment state, so training can resume exactly.

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
}

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: u64,
    slots: Vec<Slot>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let slots = store
            .iter()
            .map(|(name, var)| {
                let zeros = var.as_tensor().zeros_like().expect("zeros_like on cpu");
                Slot {
                    name: name.to_string(),
                    var: var.clone(),
                    m: zeros.clone(),
                    v: zeros,
                }
            })
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            slots,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update; parameters without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            // Gradients can reference the forward graph; keep only their values.
            let g = &g.detach();
            let m = ((&slot.m * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            let v = ((&slot.v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&m / bc1)? / denom)?;
            let next = (slot.var.as_tensor().detach() - (update * self.lr)?)?;
            slot.var.set(&next)?;
            slot.m = m;
            slot.v = v;
        }
        Ok(())
    }

    /// Moment tensors named `{prefix}.m.{param}` / `{prefix}.v.{param}`.
    pub fn export(&self, prefix: &str) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
        let mut out = Vec::with_capacity(2 * self.slots.len());
        for s in &self.slots {
            for (tag, t) in [("m", &s.m), ("v", &s.v)] {
                let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
                out.push((format!("{prefix}.{tag}.{}", s.name), t.dims().to_vec(), data));
            }
        }
        Ok(out)
    }

    pub fn import<'a>(
        &mut self,
        prefix: &str,
        steps: u64,
        lookup: impl Fn(&str) -> Option<(&'a [usize], &'a [f32])>,
    ) -> Result<()> {
        for s in &mut self.slots {
            for tag in ["m", "v"] {
                let name = format!("{prefix}.{tag}.{}", s.name);
                let (shape, data) = lookup(&name)
                    .ok_or_else(|| Error::Config(format!("missing optimizer state {name}")))?;
                if shape != s.var.dims() {
                    return Err(Error::shape("optimizer state", shape, s.var.dims()));
                }
                let t = Tensor::from_slice(data, shape, s.var.device())?.to_dtype(s.var.dtype())?;
                if tag == "m" {
                    s.m = t;
                } else {
                    s.v = t;
                }
            }
        }
        self.steps = steps;
        Ok(())
    }
}
