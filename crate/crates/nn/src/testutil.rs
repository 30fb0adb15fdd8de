//! Finite-difference checks shared by the layer tests.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::param::Parameterized;
use crate::tensor::FeatureMap;

pub fn random_map<R: Rng>(rng: &mut R, c: usize, b: usize, h: usize, w: usize) -> FeatureMap {
    let data = (0..c * b * h * w)
        .map(|_| StandardNormal.sample(rng))
        .collect::<Vec<f32>>();
    FeatureMap::from_vec(c, b, h, w, data).unwrap()
}

fn projection(len: usize, seed: u64) -> Vec<f32> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// Central difference at `h`, or `None` when halving the step changes the
/// estimate (the perturbation crossed a ReLU / max-pool kink).
pub fn central_difference(mut f: impl FnMut(f32) -> f64, h: f32) -> Option<f64> {
    let coarse = (f(h) - f(-h)) / (2.0 * h as f64);
    let fine = (f(h / 2.0) - f(-h / 2.0)) / (h as f64);
    ((coarse - fine).abs() <= 1e-2 * (1.0 + fine.abs())).then_some(fine)
}

fn assert_close(analytic: &[f64], numeric: &[f64], what: &str) {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt())
        .max(1e-6);
    assert!(
        diff / scale < 2e-2,
        "{what}: relative gradient error {} (analytic {analytic:?}, numeric {numeric:?})",
        diff / scale
    );
}

/// Checks `d(r·f(x))/dx` against central differences for a random projection `r`.
pub fn check_input_grad<L, F, B>(mut layer: L, x: &FeatureMap, mut forward: F, mut backward: B)
where
    L: Clone,
    F: FnMut(&mut L, &FeatureMap) -> FeatureMap,
    B: FnMut(&mut L, &FeatureMap) -> FeatureMap,
{
    let y = forward(&mut layer, x);
    let r = projection(y.data.len(), 99);
    let forward = std::cell::RefCell::new(forward);
    let forward = |l: &mut L, x: &FeatureMap| (forward.borrow_mut())(l, x);
    let mut dy = y.clone();
    dy.data.copy_from_slice(&r);
    let dx = backward(&mut layer, &dy);
    let h = 2e-3f32;
    let step = (x.data.len() / 40).max(1);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for i in (0..x.data.len()).step_by(step) {
        let eval = |delta: f32| {
            let mut xp = x.clone();
            xp.data[i] += delta;
            dot(&forward(&mut layer.clone(), &xp).data, &r)
        };
        if let Some(n) = central_difference(eval, h) {
            analytic.push(dx.data[i] as f64);
            numeric.push(n);
        }
    }
    assert_close(&analytic, &numeric, "input gradient");
}

/// Same check for every trainable parameter of the layer.
pub fn check_param_grads<L, F, B>(mut layer: L, x: &FeatureMap, mut forward: F, mut backward: B)
where
    L: Clone + Parameterized,
    F: FnMut(&mut L, &FeatureMap) -> FeatureMap,
    B: FnMut(&mut L, &FeatureMap) -> FeatureMap,
{
    layer.zero_grad();
    let base = layer.clone();
    let y = forward(&mut layer, x);
    let r = projection(y.data.len(), 7);
    let forward = std::cell::RefCell::new(forward);
    let forward = |l: &mut L, x: &FeatureMap| (forward.borrow_mut())(l, x);
    let mut dy = y.clone();
    dy.data.copy_from_slice(&r);
    backward(&mut layer, &dy);
    let grads: Vec<(String, Vec<f32>, bool)> = layer
        .named_params()
        .into_iter()
        .map(|(n, p)| (n, p.grad.clone(), p.trainable))
        .collect();
    let h = 2e-3f32;
    for (pi, (name, grad, trainable)) in grads.iter().enumerate() {
        if !trainable {
            continue;
        }
        let step = (grad.len() / 20).max(1);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for i in (0..grad.len()).step_by(step) {
            let eval = |delta: f32| {
                let mut l = base.clone();
                l.named_params_mut()[pi].1.value[i] += delta;
                dot(&forward(&mut l, x).data, &r)
            };
            if let Some(n) = central_difference(eval, h) {
                analytic.push(grad[i] as f64);
                numeric.push(n);
            }
        }
        assert_close(&analytic, &numeric, name);
    }
}
