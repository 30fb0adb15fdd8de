use rand::Rng;

use crate::activation::relu_in_place;
use crate::gemm::sgemm;
use crate::init::uniform_fan_in;
use crate::param::{join, Param, Parameterized};
use crate::tensor::Matrix;
use crate::{Error, Result};

/// `y = x Wᵀ + b` with `W` stored as `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
    pub in_features: usize,
    pub out_features: usize,
    input: Option<Matrix>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, in_features: usize, out_features: usize, bias: bool) -> Self {
        let weight = Param::new(
            vec![out_features, in_features],
            uniform_fan_in(rng, out_features * in_features, in_features),
        );
        let bias = bias.then(|| Param::new(vec![out_features], uniform_fan_in(rng, out_features, in_features)));
        Self {
            weight,
            bias,
            in_features,
            out_features,
            input: None,
        }
    }

    /// Forward pass without caching the input.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols != self.in_features {
            return Err(Error::Shape(format!(
                "linear expects {} features, got {}",
                self.in_features, x.cols
            )));
        }
        let mut y = Matrix::zeros(x.rows, self.out_features);
        if let Some(b) = &self.bias {
            for r in 0..x.rows {
                y.row_mut(r).copy_from_slice(&b.value);
            }
        }
        sgemm(
            x.rows,
            self.in_features,
            self.out_features,
            1.0,
            &x.data,
            (self.in_features, 1),
            &self.weight.value,
            (1, self.in_features),
            1.0,
            &mut y.data,
            (self.out_features, 1),
        );
        Ok(y)
    }

    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let y = self.apply(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Matrix) -> Result<Matrix> {
        let x = self.input.as_ref().ok_or(Error::NoCache("Linear"))?;
        if dy.rows != x.rows || dy.cols != self.out_features {
            return Err(Error::Shape(format!(
                "linear backward: {}x{} gradient for {} rows, {} outputs",
                dy.rows, dy.cols, x.rows, self.out_features
            )));
        }
        // dW += dyᵀ x
        sgemm(
            self.out_features,
            x.rows,
            self.in_features,
            1.0,
            &dy.data,
            (1, self.out_features),
            &x.data,
            (self.in_features, 1),
            1.0,
            &mut self.weight.grad,
            (self.in_features, 1),
        );
        if let Some(b) = &mut self.bias {
            for r in 0..dy.rows {
                for (g, &d) in b.grad.iter_mut().zip(dy.row(r)) {
                    *g += d;
                }
            }
        }
        let mut dx = Matrix::zeros(x.rows, self.in_features);
        sgemm(
            x.rows,
            self.out_features,
            self.in_features,
            1.0,
            &dy.data,
            (self.out_features, 1),
            &self.weight.value,
            (self.in_features, 1),
            0.0,
            &mut dx.data,
            (self.in_features, 1),
        );
        Ok(dx)
    }
}

impl Parameterized for Linear {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }
}

/// Two dense layers with a ReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    mask: Option<Vec<bool>>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            fc1: Linear::new(rng, input, hidden, true),
            fc2: Linear::new(rng, hidden, output, true),
            mask: None,
        }
    }

    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let mut h = self.fc1.forward(x)?;
        self.mask = Some(relu_in_place(&mut h.data));
        self.fc2.forward(&h)
    }

    pub fn backward(&mut self, dy: &Matrix) -> Result<Matrix> {
        let mut dh = self.fc2.backward(dy)?;
        let mask = self.mask.as_ref().ok_or(Error::NoCache("Mlp"))?;
        for (g, &m) in dh.data.iter_mut().zip(mask) {
            if !m {
                *g = 0.0;
            }
        }
        self.fc1.backward(&dh)
    }
}

impl Parameterized for Mlp {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.fc1.visit_params(&join(prefix, "fc1"), out);
        self.fc2.visit_params(&join(prefix, "fc2"), out);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.fc1.visit_params_mut(&join(prefix, "fc1"), out);
        self.fc2.visit_params_mut(&join(prefix, "fc2"), out);
    }
}
