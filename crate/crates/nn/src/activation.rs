use crate::tensor::FeatureMap;
use crate::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &FeatureMap) -> FeatureMap {
        let mut y = x.clone();
        let mask: Vec<bool> = y
            .data
            .iter_mut()
            .map(|v| {
                let keep = *v > 0.0;
                if !keep {
                    *v = 0.0;
                }
                keep
            })
            .collect();
        self.mask = Some(mask);
        y
    }

    pub fn backward(&mut self, dy: &FeatureMap) -> Result<FeatureMap> {
        let mask = self.mask.as_ref().ok_or(Error::NoCache("Relu"))?;
        if mask.len() != dy.data.len() {
            return Err(Error::Shape("relu backward size mismatch".into()));
        }
        let mut dx = dy.clone();
        for (g, &m) in dx.data.iter_mut().zip(mask) {
            if !m {
                *g = 0.0;
            }
        }
        Ok(dx)
    }
}

/// Elementwise `max(0, x)` on a dense row-major buffer, returning the mask.
pub fn relu_in_place(values: &mut [f32]) -> Vec<bool> {
    values
        .iter_mut()
        .map(|v| {
            let keep = *v > 0.0;
            if !keep {
                *v = 0.0;
            }
            keep
        })
        .collect()
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
