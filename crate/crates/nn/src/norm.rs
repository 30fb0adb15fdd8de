use crate::param::{join, Param, Parameterized};
use crate::tensor::FeatureMap;
use crate::{Error, Mode, Result};

/// Spatial batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f32,
    pub eps: f32,
    cache: Option<BnCache>,
}

#[derive(Clone, Debug)]
struct BnCache {
    x_hat: FeatureMap,
    inv_std: Vec<f32>,
    mode: Mode,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::constant(vec![channels], 1.0),
            beta: Param::constant(vec![channels], 0.0),
            running_mean: Param::buffer(vec![channels], 0.0),
            running_var: Param::buffer(vec![channels], 1.0),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, x: &FeatureMap, mode: Mode) -> Result<FeatureMap> {
        if x.channels != self.channels() {
            return Err(Error::Shape(format!(
                "batch norm over {} channels got {}",
                self.channels(),
                x.channels
            )));
        }
        let n = x.plane_len();
        let mut x_hat = x.clone();
        let mut out = x.clone();
        let mut inv_std = vec![0.0f32; x.channels];
        for c in 0..x.channels {
            let src = x.channel(c);
            let (mean, var) = match mode {
                Mode::Train => {
                    let mean = src.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
                    let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
                    let m = self.momentum as f64;
                    let rm = &mut self.running_mean.value[c];
                    *rm = ((1.0 - m) * *rm as f64 + m * mean) as f32;
                    let unbiased = if n > 1 { var * n as f64 / (n - 1) as f64 } else { var };
                    let rv = &mut self.running_var.value[c];
                    *rv = ((1.0 - m) * *rv as f64 + m * unbiased) as f32;
                    (mean as f32, var as f32)
                }
                Mode::Eval => (self.running_mean.value[c], self.running_var.value[c]),
            };
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[c] = istd;
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            for ((xh, o), &v) in x_hat
                .channel_mut(c)
                .iter_mut()
                .zip(out.channel_mut(c).iter_mut())
                .zip(src)
            {
                *xh = (v - mean) * istd;
                *o = g * *xh + b;
            }
        }
        self.cache = Some(BnCache { x_hat, inv_std, mode });
        Ok(out)
    }

    pub fn backward(&mut self, dy: &FeatureMap) -> Result<FeatureMap> {
        let cache = self.cache.as_ref().ok_or(Error::NoCache("BatchNorm2d"))?;
        if !dy.same_shape(&cache.x_hat) {
            return Err(Error::Shape(format!(
                "batch norm backward: {:?} vs {:?}",
                dy.dims(),
                cache.x_hat.dims()
            )));
        }
        let n = dy.plane_len() as f64;
        let mut dx = dy.clone();
        for c in 0..dy.channels {
            let g = dy.channel(c);
            let xh = cache.x_hat.channel(c);
            let sum_dy: f64 = g.iter().map(|&v| v as f64).sum();
            let sum_dy_xh: f64 = g.iter().zip(xh).map(|(&a, &b)| a as f64 * b as f64).sum();
            self.gamma.grad[c] += sum_dy_xh as f32;
            self.beta.grad[c] += sum_dy as f32;
            let scale = self.gamma.value[c] * cache.inv_std[c];
            let out = dx.channel_mut(c);
            match cache.mode {
                Mode::Train => {
                    let mean_dy = (sum_dy / n) as f32;
                    let mean_dy_xh = (sum_dy_xh / n) as f32;
                    for ((o, &gv), &x) in out.iter_mut().zip(g).zip(xh) {
                        *o = scale * (gv - mean_dy - x * mean_dy_xh);
                    }
                }
                Mode::Eval => out.iter_mut().zip(g).for_each(|(o, &gv)| *o = scale * gv),
            }
        }
        Ok(dx)
    }
}

impl Parameterized for BatchNorm2d {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.gamma));
        out.push((join(prefix, "bias"), &self.beta));
        out.push((join(prefix, "running_mean"), &self.running_mean));
        out.push((join(prefix, "running_var"), &self.running_var));
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.gamma));
        out.push((join(prefix, "bias"), &mut self.beta));
        out.push((join(prefix, "running_mean"), &mut self.running_mean));
        out.push((join(prefix, "running_var"), &mut self.running_var));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{check_input_grad, check_param_grads, random_map};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_mode_normalizes_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut bn = BatchNorm2d::new(3);
        let x = random_map(&mut rng, 3, 4, 3, 3).scale(5.0);
        let y = bn.forward(&x, Mode::Train).unwrap();
        for c in 0..3 {
            let ch = y.channel(c);
            let mean: f32 = ch.iter().sum::<f32>() / ch.len() as f32;
            let var: f32 = ch.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / ch.len() as f32;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert!(bn.running_mean.value.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn eval_mode_uses_running_statistics() {
        let mut bn = BatchNorm2d::new(1);
        bn.running_mean.value[0] = 2.0;
        bn.running_var.value[0] = 4.0 - bn.eps;
        let x = FeatureMap::from_vec(1, 1, 1, 2, vec![2.0, 6.0]).unwrap();
        let y = bn.forward(&x, Mode::Eval).unwrap();
        assert!((y.data[0]).abs() < 1e-6 && (y.data[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut bn = BatchNorm2d::new(2);
        bn.gamma.value = vec![1.5, -0.7];
        bn.beta.value = vec![0.1, 0.3];
        let x = random_map(&mut rng, 2, 3, 2, 2);
        for mode in [Mode::Train, Mode::Eval] {
            check_input_grad(bn.clone(), &x, |l, x| l.forward(x, mode).unwrap(), |l, dy| l.backward(dy).unwrap());
            check_param_grads(bn.clone(), &x, |l, x| l.forward(x, mode).unwrap(), |l, dy| l.backward(dy).unwrap());
        }
    }
}
