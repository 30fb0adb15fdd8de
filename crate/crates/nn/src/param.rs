/// A named tensor of weights plus its gradient accumulator.
///
/// Non-trainable parameters (batch-norm running statistics) are still
/// checkpointed but skipped by the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub trainable: bool,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            value.len(),
            "param shape {shape:?} does not match {} values",
            value.len()
        );
        let grad = vec![0.0; value.len()];
        Self {
            shape,
            value,
            grad,
            trainable: true,
        }
    }

    pub fn constant(shape: Vec<usize>, v: f32) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n])
    }

    pub fn buffer(shape: Vec<usize>, v: f32) -> Self {
        Self {
            trainable: false,
            ..Self::constant(shape, v)
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn grad_norm(&self) -> f64 {
        self.grad
            .iter()
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt()
    }
}

/// Enumerates parameters under dotted module paths (`stage1.0.conv1.weight`).
pub trait Parameterized {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>);
    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>);

    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        self.visit_params("", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        self.visit_params_mut("", &mut out);
        out
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    fn num_trainable(&self) -> usize {
        self.named_params()
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.len())
            .sum()
    }
}

/// Joins a module prefix and a child name with a dot.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
