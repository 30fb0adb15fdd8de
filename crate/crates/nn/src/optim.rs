use crate::param::Parameterized;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates. Moments are kept per trainable
/// parameter in visiting order, keyed by name to catch layout changes.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    state: Vec<(String, Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            state: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step<M: Parameterized + ?Sized>(&mut self, model: &mut M) -> Result<()> {
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bias1 = 1.0 - beta1.powf(self.step as f64);
        let bias2 = 1.0 - beta2.powf(self.step as f64);
        let mut params = model.named_params_mut();
        params.retain(|(_, p)| p.trainable);
        if self.state.is_empty() {
            self.state = params
                .iter()
                .map(|(n, p)| (n.clone(), vec![0.0; p.len()], vec![0.0; p.len()]))
                .collect();
        }
        if self.state.len() != params.len() {
            return Err(Error::ParamLayout(format!(
                "optimizer tracks {} tensors, model has {}",
                self.state.len(),
                params.len()
            )));
        }
        for ((name, p), (sname, m, v)) in params.into_iter().zip(&mut self.state) {
            if name != *sname || m.len() != p.len() {
                return Err(Error::ParamLayout(format!("{name} vs {sname}")));
            }
            for i in 0..p.len() {
                let g = p.grad[i] as f64;
                let mi = beta1 * m[i] as f64 + (1.0 - beta1) * g;
                let vi = beta2 * v[i] as f64 + (1.0 - beta2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / bias1) / ((vi / bias2).sqrt() + eps);
                p.value[i] = (p.value[i] as f64 - update) as f32;
                p.grad[i] = 0.0;
            }
        }
        Ok(())
    }
}
