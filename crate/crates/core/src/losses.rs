//! Loss terms with analytic gradients with respect to their direct inputs.
//!
//! Every batch loss is a mean over its contributing samples, so the returned
//! gradients already include the `1/n` factor.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::VertebraClass;
use crate::sampler::MinedTriplet;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the three-class cross-entropy.
    pub ce: f64,
    /// Weight of the discriminator loss.
    pub lambda1: f64,
    /// Weight of the classification-stream loss.
    pub lambda2: f64,
    /// Weight of the weight-ratio loss.
    pub lambda3: f64,
    pub triplet_margin: f64,
    pub u_hat: f64,
    /// Use `(u - û)²` for fracture samples instead of `(u - 1/û)²`.
    pub paper_literal_weight_loss: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce: 1.0,
            lambda1: 0.2,
            lambda2: 1.0,
            lambda3: 1.0,
            triplet_margin: 0.2,
            u_hat: 4.0,
            paper_literal_weight_loss: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("ce", self.ce),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("triplet_margin", self.triplet_margin),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        if !(self.u_hat.is_finite() && self.u_hat > 1.0) {
            return Err(Error::Config(format!("u_hat must exceed 1, got {}", self.u_hat)));
        }
        Ok(())
    }
}

/// Scalar loss and its gradient with respect to a 2-D input.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Array2<f64>,
}

/// Mean softmax cross-entropy over rows; an empty batch gives 0.
pub fn cross_entropy(logits: ArrayView2<f64>, targets: &[usize]) -> Result<LossGrad> {
    let (n, k) = logits.dim();
    if targets.len() != n {
        return Err(Error::InvalidInput(format!("{n} logit rows but {} targets", targets.len())));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::InvalidInput(format!("target {t} outside {k} classes")));
    }
    let mut grad = Array2::zeros((n, k));
    if n == 0 {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let mut total = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|&z| (z - m).exp()).sum();
        let lse = m + sum.ln();
        total += lse - row[targets[i]];
        for (j, &z) in row.iter().enumerate() {
            let p = (z - lse).exp();
            grad[[i, j]] = (p - f64::from(u8::from(j == targets[i]))) / n as f64;
        }
    }
    Ok(LossGrad {
        value: total / n as f64,
        grad,
    })
}

/// Three-class cross-entropy, batch mean.
pub fn ce3(logits3: ArrayView2<f64>, labels: &[VertebraClass]) -> Result<LossGrad> {
    let t: Vec<usize> = labels.iter().map(|c| c.index()).collect();
    cross_entropy(logits3, &t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscLossGrad {
    pub value: f64,
    pub grad_prev: Array2<f64>,
    pub grad_next: Array2<f64>,
}

/// Same/different target of one discriminator pair.
pub fn disc_target(y_c: u8, y_other: u8) -> usize {
    (y_c as i32 - y_other as i32).unsigned_abs() as usize
}

/// Sum of the two pair cross-entropies; labels are already binarized.
pub fn disc_loss(
    prev_logits: ArrayView2<f64>,
    next_logits: ArrayView2<f64>,
    y_c: &[u8],
    y_p: &[u8],
    y_n: &[u8],
) -> Result<DiscLossGrad> {
    if y_c.len() != y_p.len() || y_c.len() != y_n.len() {
        return Err(Error::InvalidInput("discriminator label lengths differ".into()));
    }
    if let Some(&b) = y_c.iter().chain(y_p).chain(y_n).find(|&&b| b > 1) {
        return Err(Error::InvalidInput(format!("binary label {b} outside {{0, 1}}")));
    }
    let tp: Vec<usize> = y_c.iter().zip(y_p).map(|(&c, &p)| disc_target(c, p)).collect();
    let tn: Vec<usize> = y_c.iter().zip(y_n).map(|(&c, &n)| disc_target(c, n)).collect();
    let a = cross_entropy(prev_logits, &tp)?;
    let b = cross_entropy(next_logits, &tn)?;
    Ok(DiscLossGrad {
        value: a.value + b.value,
        grad_prev: a.grad,
        grad_next: b.grad,
    })
}

/// `max(0, d(a,p)² - d(a,n)² + margin)` for single vectors.
pub fn triplet_hinge(a: ArrayView1<f64>, p: ArrayView1<f64>, n: ArrayView1<f64>, margin: f64) -> f64 {
    let dap = (&a - &p).mapv(|v| v * v).sum();
    let dan = (&a - &n).mapv(|v| v * v).sum();
    (dap - dan + margin).max(0.0)
}

/// Mean hinge over mined triples with the gradient for every embedding row.
pub fn triplet_loss(embeddings: ArrayView2<f64>, triples: &[MinedTriplet], margin: f64) -> Result<LossGrad> {
    let (rows, _) = embeddings.dim();
    let mut grad = Array2::zeros(embeddings.raw_dim());
    if triples.is_empty() {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let scale = 1.0 / triples.len() as f64;
    let mut total = 0.0;
    for t in triples {
        if t.anchor >= rows || t.positive >= rows || t.negative >= rows {
            return Err(Error::InvalidInput(format!("triple {t:?} outside {rows} embeddings")));
        }
        let a = embeddings.row(t.anchor);
        let p = embeddings.row(t.positive);
        let n = embeddings.row(t.negative);
        let h = triplet_hinge(a, p, n, margin);
        total += h;
        if h > 0.0 {
            // d/da = 2(a-p) - 2(a-n) = 2(n-p); d/dp = -2(a-p); d/dn = 2(a-n)
            let ga = (&n - &p) * (2.0 * scale);
            let gp = (&p - &a) * (2.0 * scale);
            let gn = (&a - &n) * (2.0 * scale);
            grad.row_mut(t.anchor).scaled_add(1.0, &ga);
            grad.row_mut(t.positive).scaled_add(1.0, &gp);
            grad.row_mut(t.negative).scaled_add(1.0, &gn);
        }
    }
    Ok(LossGrad {
        value: total * scale,
        grad,
    })
}

/// Benign-vs-malignant cross-entropy averaged over fracture samples, plus
/// the triplet term. Normal samples get zero gradient.
pub fn stream_loss(logits2: ArrayView2<f64>, labels: &[VertebraClass], triplet_term: f64) -> Result<LossGrad> {
    let (n, k) = logits2.dim();
    if labels.len() != n || k != 2 {
        return Err(Error::InvalidInput(format!(
            "stream loss expects {} x 2 logits, got {n} x {k}",
            labels.len()
        )));
    }
    let idx: Vec<usize> = (0..n).filter(|&i| labels[i].is_fracture()).collect();
    let mut grad = Array2::zeros((n, 2));
    if idx.is_empty() {
        return Ok(LossGrad {
            value: triplet_term,
            grad,
        });
    }
    let sub = logits2.select(ndarray::Axis(0), &idx);
    let targets: Vec<usize> = idx.iter().map(|&i| labels[i].index() - 1).collect();
    let ce = cross_entropy(sub.view(), &targets)?;
    for (r, &i) in idx.iter().enumerate() {
        grad.row_mut(i).assign(&ce.grad.row(r));
    }
    Ok(LossGrad {
        value: ce.value + triplet_term,
        grad,
    })
}

/// Penalty for one sample and its derivative with respect to `u`.
pub fn weight_penalty(u: f64, y: VertebraClass, u_hat: f64, literal: bool) -> (f64, f64) {
    let target = match y {
        VertebraClass::Normal if u < u_hat => Some(u_hat),
        VertebraClass::Benign | VertebraClass::Malignant if u > 1.0 / u_hat => {
            Some(if literal { u_hat } else { 1.0 / u_hat })
        }
        _ => None,
    };
    match target {
        Some(t) => ((u - t).powi(2), 2.0 * (u - t)),
        None => (0.0, 0.0),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightLossGrad {
    pub value: f64,
    pub grad_u: Array1<f64>,
}

/// Batch mean of the weight-ratio penalty.
pub fn weight_loss(u: &[f64], labels: &[VertebraClass], u_hat: f64, literal: bool) -> Result<WeightLossGrad> {
    if u.len() != labels.len() {
        return Err(Error::InvalidInput(format!("{} ratios but {} labels", u.len(), labels.len())));
    }
    if let Some(bad) = u.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::InvalidInput(format!("weight ratio must be positive and finite, got {bad}")));
    }
    let n = u.len();
    let mut grad_u = Array1::zeros(n);
    if n == 0 {
        return Ok(WeightLossGrad { value: 0.0, grad_u });
    }
    let mut total = 0.0;
    for (i, (&ui, &y)) in u.iter().zip(labels).enumerate() {
        let (v, d) = weight_penalty(ui, y, u_hat, literal);
        total += v;
        grad_u[i] = d / n as f64;
    }
    Ok(WeightLossGrad {
        value: total / n as f64,
        grad_u,
    })
}

/// Unweighted loss terms of one batch or epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ce: f64,
    pub disc: f64,
    pub stream: f64,
    pub weight: f64,
}

impl LossTerms {
    pub fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("ce", self.ce),
            ("disc", self.disc),
            ("stream", self.stream),
            ("weight", self.weight),
        ]
    }
}

pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> f64 {
    w.ce * terms.ce + w.lambda1 * terms.disc + w.lambda2 * terms.stream + w.lambda3 * terms.weight
}
