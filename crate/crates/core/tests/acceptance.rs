//! Acceptance criteria 1-10. Prints one `PASS`/`FAIL` line per criterion and
//! exits nonzero when any fails. Positional arguments select criteria by
//! number, e.g. `cargo test --test acceptance -- 1 2 9`.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsccn_core::data::VertebraClass::{self, Benign, Malignant, Normal};
use tsccn_core::engine::{self, evaluate_model, train, TrainConfig, TripletDataset};
use tsccn_core::losses::{self, total_loss, LossTerms, LossWeights};
use tsccn_core::maskrepair::{self, iou, label_components, order_along_spine, RepairParams};
use tsccn_core::metrics::{self, ConfusionState};
use tsccn_core::network::{Ablation, Branch, GateOutput, NetworkConfig, Tsccn};
use tsccn_core::sampler::MinedTriplet;
use tsccn_core::synth::{generate, generate_masks, MaskConfig, SynthConfig};
use tsccn_nn::{FeatureMap, Matrix, Mode, Parameterized};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, budget_secs: f64) -> bool {
    elapsed.as_secs_f64() < budget_secs
}

// ---------------------------------------------------------------- criterion 1

fn loss_analytics() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let ce = losses::ce3(Array2::<f64>::zeros((4, 3)).view(), &[Normal, Benign, Malignant, Normal])
        .unwrap()
        .value;
    if (ce - 3f64.ln()).abs() > 1e-9 {
        failures.push(format!("ce3 uniform {ce}"));
    }
    let z = Array2::<f64>::zeros((3, 2));
    let d = losses::disc_loss(z.view(), z.view(), &[0, 1, 1], &[0, 0, 1], &[1, 1, 0])
        .unwrap()
        .value;
    if (d - 2.0 * 2f64.ln()).abs() > 1e-9 {
        failures.push(format!("disc uniform {d}"));
    }
    for literal in [false, true] {
        let u_hat = 4.0;
        let w0 = losses::weight_loss(&[u_hat], &[Normal], u_hat, literal).unwrap();
        if w0.value != 0.0 || w0.grad_u[0] != 0.0 {
            failures.push(format!("weight loss at u=û: {}", w0.value));
        }
        if !literal {
            let w1 = losses::weight_loss(&[1.0 / u_hat, 1.0 / u_hat], &[Benign, Malignant], u_hat, false).unwrap();
            if w1.value != 0.0 || w1.grad_u.iter().any(|&g| g != 0.0) {
                failures.push(format!("weight loss at u=1/û: {}", w1.value));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = LossWeights::default();
    for _ in 0..100 {
        let t = |rng: &mut ChaCha8Rng| LossTerms {
            ce: rng.random_range(0.0..3.0),
            disc: rng.random_range(0.0..3.0),
            stream: rng.random_range(0.0..3.0),
            weight: rng.random_range(0.0..3.0),
        };
        let (a, b) = (t(&mut rng), t(&mut rng));
        let (p, q) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let mix = LossTerms {
            ce: p * a.ce + q * b.ce,
            disc: p * a.disc + q * b.disc,
            stream: p * a.stream + q * b.stream,
            weight: p * a.weight + q * b.weight,
        };
        let lhs = total_loss(&mix, &w);
        let rhs = p * total_loss(&a, &w) + q * total_loss(&b, &w);
        let direct = w.ce * a.ce + w.lambda1 * a.disc + w.lambda2 * a.stream + w.lambda3 * a.weight;
        if (lhs - rhs).abs() > 1e-9 || (total_loss(&a, &w) - direct).abs() > 1e-12 {
            failures.push("total_loss is not the weighted sum".into());
            break;
        }
    }
    let el = start.elapsed();
    let pass = failures.is_empty() && within(el, 1.0);
    outcome(pass, format!("{} failures, {:.3}s {}", failures.len(), el.as_secs_f64(), failures.join("; ")))
}

// ---------------------------------------------------------------- criterion 2

fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|y| y * y).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-6;
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            p[i] += h;
            let fp = f(&p);
            p[i] -= 2.0 * h;
            (fp - f(&p)) / (2.0 * h)
        })
        .collect()
}

fn random_class(rng: &mut ChaCha8Rng) -> VertebraClass {
    VertebraClass::ALL[rng.random_range(0..3)]
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let points = 20;
    let arr = |x: &[f64], c: usize| Array2::from_shape_vec((x.len() / c, c), x.to_vec()).unwrap();

    let mut e = 0.0f64;
    for _ in 0..points {
        let n = rng.random_range(1..6);
        let x: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-4.0..4.0)).collect();
        let y: Vec<VertebraClass> = (0..n).map(|_| random_class(&mut rng)).collect();
        let g = losses::ce3(arr(&x, 3).view(), &y).unwrap().grad;
        let num = numeric_grad(&x, |p| losses::ce3(arr(p, 3).view(), &y).unwrap().value);
        e = e.max(relative_error(g.as_slice().unwrap(), &num));
    }
    worst.push(("ce3", e));

    let mut e = 0.0f64;
    for _ in 0..points {
        let n = rng.random_range(1..6);
        let x: Vec<f64> = (0..n * 4).map(|_| rng.random_range(-4.0..4.0)).collect();
        let lab = |rng: &mut ChaCha8Rng| (0..n).map(|_| rng.random_range(0..2u8)).collect::<Vec<u8>>();
        let (yc, yp, yn) = (lab(&mut rng), lab(&mut rng), lab(&mut rng));
        let f = |p: &[f64]| {
            let (a, b) = p.split_at(n * 2);
            losses::disc_loss(arr(a, 2).view(), arr(b, 2).view(), &yc, &yp, &yn).unwrap()
        };
        let d = f(&x);
        let mut g = d.grad_prev.as_slice().unwrap().to_vec();
        g.extend_from_slice(d.grad_next.as_slice().unwrap());
        e = e.max(relative_error(&g, &numeric_grad(&x, |p| f(p).value)));
    }
    worst.push(("disc", e));

    let mut e = 0.0f64;
    let mut done = 0;
    while done < points {
        let n = rng.random_range(3..7);
        let dim = 4;
        let x: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let triples: Vec<MinedTriplet> = (0..rng.random_range(1..4))
            .map(|_| {
                let mut idx: Vec<usize> = (0..n).collect();
                for i in 0..3 {
                    let j = rng.random_range(i..n);
                    idx.swap(i, j);
                }
                MinedTriplet {
                    anchor: idx[0],
                    positive: idx[1],
                    negative: idx[2],
                }
            })
            .collect();
        let margin = 0.2;
        let emb = arr(&x, dim);
        let raw = |t: &MinedTriplet| {
            let d = |a: usize, b: usize| (0..dim).map(|k| (emb[[a, k]] - emb[[b, k]]).powi(2)).sum::<f64>();
            d(t.anchor, t.positive) - d(t.anchor, t.negative) + margin
        };
        if triples.iter().any(|t| raw(t).abs() < 1e-3) {
            continue;
        }
        let g = losses::triplet_loss(emb.view(), &triples, margin).unwrap().grad;
        let num = numeric_grad(&x, |p| losses::triplet_loss(arr(p, dim).view(), &triples, margin).unwrap().value);
        e = e.max(relative_error(g.as_slice().unwrap(), &num));
        done += 1;
    }
    worst.push(("triplet", e));

    let mut e = 0.0f64;
    for _ in 0..points {
        let n = rng.random_range(1..6);
        let x: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-4.0..4.0)).collect();
        let y: Vec<VertebraClass> = (0..n).map(|_| random_class(&mut rng)).collect();
        let trip = rng.random_range(0.0..1.0);
        let g = losses::stream_loss(arr(&x, 2).view(), &y, trip).unwrap().grad;
        let num = numeric_grad(&x, |p| losses::stream_loss(arr(p, 2).view(), &y, trip).unwrap().value);
        e = e.max(relative_error(g.as_slice().unwrap(), &num));
    }
    worst.push(("stream", e));

    for literal in [false, true] {
        let mut e = 0.0f64;
        let u_hat = 4.0;
        let mut done = 0;
        while done < points {
            let n = rng.random_range(1..6);
            let u: Vec<f64> = (0..n).map(|_| rng.random_range(0.05f64..8.0)).collect();
            if u.iter().any(|&v| (v - u_hat).abs() < 1e-3 || (v - 1.0 / u_hat).abs() < 1e-3) {
                continue;
            }
            let y: Vec<VertebraClass> = (0..n).map(|_| random_class(&mut rng)).collect();
            let g = losses::weight_loss(&u, &y, u_hat, literal).unwrap().grad_u;
            let num = numeric_grad(&u, |p| losses::weight_loss(p, &y, u_hat, literal).unwrap().value);
            e = e.max(relative_error(g.as_slice().unwrap(), &num));
            done += 1;
        }
        worst.push((if literal { "weight(literal)" } else { "weight" }, e));
    }
    let el = start.elapsed();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let detail = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    outcome(max <= 1e-4 && within(el, 60.0), format!("max relative error {max:.2e} ({detail}), {:.2}s", el.as_secs_f64()))
}

// ---------------------------------------------------------------- criterion 3

fn oracle_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if positive[i] && !positive[j] {
                pairs += 1;
                total += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (pairs > 0).then(|| total / pairs as f64)
}

fn oracle_ap(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let npos = positive.iter().filter(|&&p| p).count();
    if npos == 0 {
        return None;
    }
    let thresholds: BTreeSet<u64> = scores.iter().map(|s| s.to_bits()).collect();
    let mut ts: Vec<f64> = thresholds.into_iter().map(f64::from_bits).collect();
    ts.sort_by(|a, b| b.total_cmp(a));
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for t in ts {
        let selected: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = selected.iter().filter(|&&i| positive[i]).count();
        let precision = tp as f64 / selected.len() as f64;
        let recall = tp as f64 / npos as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= 1e-9,
        (None, None) => true,
        _ => false,
    }
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for fixture in 0..200 {
        let n = rng.random_range(1..40);
        // coarse score grid so ties are common
        let levels = if fixture % 2 == 0 { 5 } else { 1000 };
        let mut state = ConfusionState::new();
        let mut truth = Vec::new();
        let mut scores = Vec::new();
        for _ in 0..n {
            let y = VertebraClass::ALL[rng.random_range(0..if fixture % 7 == 0 { 2 } else { 3 })];
            let raw: [f64; 3] = std::array::from_fn(|_| rng.random_range(0..levels) as f64 + 1.0);
            let s: f64 = raw.iter().sum();
            let p = raw.map(|v| v / s);
            state.accumulate_scores(y, p).unwrap();
            truth.push(y);
            scores.push(p);
        }
        let se_sp = metrics::per_class_se_sp(&state);
        for k in 0..3 {
            let pred: Vec<usize> = scores
                .iter()
                .map(|p| (0..3).fold(0, |b, j| if p[j] > p[b] { j } else { b }))
                .collect();
            let (mut tp, mut fp, mut tn, mut fnn) = (0, 0, 0, 0);
            for i in 0..n {
                match (truth[i].index() == k, pred[i] == k) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (false, false) => tn += 1,
                    (true, false) => fnn += 1,
                }
            }
            let se = (tp + fnn > 0).then(|| tp as f64 / (tp + fnn) as f64);
            let sp = (tn + fp > 0).then(|| tn as f64 / (tn + fp) as f64);
            let col: Vec<f64> = scores.iter().map(|p| p[k]).collect();
            let pos: Vec<bool> = truth.iter().map(|y| y.index() == k).collect();
            let ok = close(se_sp[k].0, se)
                && close(se_sp[k].1, sp)
                && close(metrics::auc_one_vs_rest(&state, k), oracle_auc(&col, &pos))
                && close(metrics::average_precision(&state, k), oracle_ap(&col, &pos));
            if !ok {
                mismatches += 1;
            }
        }
    }
    let el = start.elapsed();
    outcome(
        mismatches == 0 && within(el, 60.0),
        format!("{mismatches} mismatching class components over 200 fixtures, {:.2}s", el.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- criterion 4

fn small_network() -> NetworkConfig {
    NetworkConfig {
        image_size: 32,
        base_width: 4,
        ..NetworkConfig::default()
    }
}

fn random_map(rng: &mut ChaCha8Rng, b: usize, s: usize) -> FeatureMap {
    FeatureMap::from_vec(1, b, s, s, (0..b * s * s).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn compare_wiring() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = small_network();
    let mut model = Tsccn::new(&cfg, Ablation::FullTsccn, 4).unwrap();
    // force identical branches by copying the previous-vertebra branch
    let source: Vec<(String, Vec<f32>)> = model
        .named_params()
        .into_iter()
        .filter(|(n, _)| n.starts_with("recognition.branch_prev."))
        .map(|(n, p)| (n.trim_start_matches("recognition.branch_prev.").to_string(), p.value.clone()))
        .collect();
    for (name, p) in model.named_params_mut() {
        for prefix in ["recognition.branch_current.", "recognition.branch_next."] {
            if let Some(rest) = name.strip_prefix(prefix) {
                let v = &source.iter().find(|(n, _)| n == rest).expect("same layout").1;
                p.value.clone_from(v);
            }
        }
    }
    let x = random_map(&mut rng, 3, cfg.image_size);
    let (fused, _) = model.recognition_forward(&x, &x, &x, Mode::Eval).unwrap();
    let h = model.branch_forward(Branch::Prev, &x, Mode::Eval).unwrap();
    let direct = model.trunk_forward(&h.scale(3.0), Mode::Eval).unwrap();
    let max_diff = fused
        .data
        .iter()
        .zip(&direct.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);

    let mut model = Tsccn::new(&cfg, Ablation::FullTsccn, 5).unwrap();
    let batch = tsccn_core::network::TripletBatch {
        prev: random_map(&mut rng, 4, cfg.image_size),
        current: random_map(&mut rng, 4, cfg.image_size),
        next: random_map(&mut rng, 4, cfg.image_size),
    };
    let out = model.forward(&batch, Mode::Train).unwrap();
    let labels = [
        [Normal, Normal, Benign],
        [Normal, Benign, Normal],
        [Malignant, Normal, Normal],
        [Normal, Malignant, Normal],
    ];
    let bl = engine::batch_loss(&out, &labels, Ablation::FullTsccn, &LossWeights::default()).unwrap();
    model.backward(&bl.grads).unwrap();
    let norms: Vec<f64> = ["prev", "current", "next"]
        .iter()
        .map(|b| {
            let prefix = format!("recognition.branch_{b}.");
            model
                .named_params()
                .iter()
                .filter(|(n, _)| n.starts_with(&prefix))
                .map(|(_, p)| p.grad_norm().powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let el = start.elapsed();
    let pass = max_diff <= 1e-5 && norms.iter().all(|&n| n > 0.0) && within(el, 60.0);
    outcome(
        pass,
        format!(
            "max |f_R - trunk(3 branch(x))| = {max_diff:.2e}, branch gradient norms {:.2e}/{:.2e}/{:.2e}, {:.2}s",
            norms[0],
            norms[1],
            norms[2],
            el.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- criterion 5

fn gate_contract() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = small_network();
    let mut model = Tsccn::new(&cfg, Ablation::FullTsccn, 6).unwrap();
    let d = cfg.feature_dim();
    let mut bad = 0;
    let n = 1000;
    for chunk in 0..10 {
        let scale = [1e-3f32, 1.0, 10.0, 1e3, 1e6][chunk % 5];
        let m = |rng: &mut ChaCha8Rng| {
            Matrix::from_vec(n / 10, d, (0..n / 10 * d).map(|_| scale * rng.random_range(-1.0f32..1.0)).collect()).unwrap()
        };
        let g = model.gate(&m(&mut rng), &m(&mut rng)).unwrap();
        for i in 0..g.u.len() {
            let ok = g.w_r[i] > 0.0 && g.w_r[i] < 1.0 && g.w_c[i] > 0.0 && g.w_c[i] < 1.0 && g.u[i].is_finite();
            bad += usize::from(!ok);
        }
    }
    let extreme = GateOutput::from_logits(Matrix::from_vec(2, 2, vec![f32::MAX, f32::MIN, -1e30, 1e30]).unwrap());
    let extreme_ok = extreme.u.iter().all(|u| u.is_finite() && *u > 0.0);
    let gate = model.gate_mlp_mut().unwrap();
    gate.fc2.weight.value.iter_mut().for_each(|v| *v = 0.0);
    gate.fc2.bias.as_mut().unwrap().value.iter_mut().for_each(|v| *v = 0.0);
    let m = Matrix::from_vec(4, d, (0..4 * d).map(|_| rng.random_range(-5.0f32..5.0)).collect()).unwrap();
    let mid = model.gate(&m, &m).unwrap();
    let mid_err = mid.u.iter().map(|u| (u - 1.0).abs()).fold(0.0, f64::max);
    let el = start.elapsed();
    outcome(
        bad == 0 && extreme_ok && mid_err <= 1e-6 && within(el, 10.0),
        format!("{bad}/{n} out-of-range gates, saturated logits finite: {extreme_ok}, midpoint |u-1| = {mid_err:.1e}, {:.2}s", el.as_secs_f64()),
    )
}

// ------------------------------------------------------ criteria 6, 8 and 10

const OVERFIT_PATIENTS: usize = 20;
const OVERFIT_SLICES: usize = 3;
const OVERFIT_EPOCHS: usize = 200;

fn overfit_fixture() -> TripletDataset {
    let cfg = SynthConfig {
        n_patients: OVERFIT_PATIENTS,
        slices_per_patient: OVERFIT_SLICES,
        vertebrae_per_slice: 8,
        image_size: 32,
        noise_level: 0.0,
        seed: 1,
        ..SynthConfig::default()
    };
    let (seqs, _) = generate(&cfg).unwrap();
    assert_eq!(seqs.len(), 60);
    TripletDataset::from_sequences(&seqs).unwrap()
}

fn overfit_config() -> TrainConfig {
    TrainConfig {
        epochs: OVERFIT_EPOCHS,
        augment: false,
        early_stop_train_accuracy: Some(0.95),
        seed: 7,
        ablation: Ablation::FullTsccn,
        network: NetworkConfig {
            image_size: 32,
            base_width: 8,
            ..NetworkConfig::default()
        },
        ..TrainConfig::default()
    }
}

struct OverfitRun {
    epochs: usize,
    seconds: f64,
    eval: engine::Evaluation,
    record: engine::RunRecord,
}

fn overfit_run(data: &TripletDataset) -> OverfitRun {
    let cfg = overfit_config();
    let start = Instant::now();
    let out = train(&cfg, data, None).unwrap();
    let seconds = start.elapsed().as_secs_f64();
    let mut model = out.last;
    let eval = evaluate_model(&mut model, data, &cfg.loss_weights, cfg.eval_batch_size).unwrap();
    OverfitRun {
        epochs: out.record.epochs.len(),
        seconds,
        eval,
        record: out.record,
    }
}

fn overfit(run: &OverfitRun) -> Outcome {
    let acc = run.eval.report.accuracy.unwrap_or(0.0);
    outcome(
        acc >= 0.95 && run.epochs <= OVERFIT_EPOCHS && run.seconds <= 600.0,
        format!("training accuracy {acc:.4} after {} epochs, {:.1}s", run.epochs, run.seconds),
    )
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

fn gate_behavior(run: &OverfitRun, data: &TripletDataset) -> Outcome {
    let u = run.eval.ratios.as_ref().expect("gated model");
    let pred = run.eval.predictions();
    let labels = data.labels();
    let pick = |fracture: bool| {
        median(
            (0..u.len())
                .filter(|&i| pred[i] == labels[i] && labels[i].is_fracture() == fracture)
                .map(|i| u[i])
                .collect(),
        )
    };
    let (normal, vcf) = (pick(false), pick(true));
    let pass = matches!((normal, vcf), (Some(a), Some(b)) if a > b);
    outcome(pass, format!("median u: correct normal {normal:?}, correct VCF {vcf:?}"))
}

fn determinism(a: &OverfitRun, b: &OverfitRun) -> Outcome {
    let same = a.eval.report == b.eval.report && a.record == b.record && a.eval.ratios == b.eval.ratios;
    outcome(
        same,
        format!(
            "final accuracy {:?} vs {:?}, epochs {} vs {}, records identical: {}",
            a.eval.report.accuracy,
            b.eval.report.accuracy,
            a.epochs,
            b.epochs,
            a.record == b.record
        ),
    )
}

// ---------------------------------------------------------------- criterion 7

const BENCH_PATIENTS: usize = 200;
const BENCH_SLICES: usize = 3;
const BENCH_EPOCHS: usize = 40;
const BENCH_SEEDS: [u64; 3] = [0, 1, 2];

fn ablation_direction() -> Outcome {
    let start = Instant::now();
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in BENCH_SEEDS {
        let sc = SynthConfig {
            n_patients: BENCH_PATIENTS,
            slices_per_patient: BENCH_SLICES,
            vertebrae_per_slice: 8,
            image_size: 32,
            class_ratio: [0.8, 0.12, 0.08],
            seed,
            ..SynthConfig::default()
        };
        let (seqs, manifest) = generate(&sc).unwrap();
        let parts = manifest.split_by_patient([3, 1, 1], seed).unwrap();
        let subset = |m: &tsccn_core::DatasetManifest| {
            let keep = m.patients();
            let s: Vec<_> = seqs.iter().filter(|q| keep.iter().any(|p| p == q.patient_id())).cloned().collect();
            TripletDataset::from_sequences(&s).unwrap()
        };
        let (tr, va) = (subset(&parts[0]), subset(&parts[1]));
        let ase = |ablation| {
            let cfg = TrainConfig {
                epochs: BENCH_EPOCHS,
                seed,
                ablation,
                network: NetworkConfig {
                    image_size: 32,
                    base_width: 8,
                    ..NetworkConfig::default()
                },
                ..TrainConfig::default()
            };
            train(&cfg, &tr, Some(&va)).unwrap().record.best_val_ase.unwrap_or(f64::NAN)
        };
        let (full, single) = (ase(Ablation::FullTsccn), ase(Ablation::SingleStream));
        wins += usize::from(full >= single);
        rows.push(format!("seed {seed}: full {full:.4} vs single {single:.4}"));
    }
    let el = start.elapsed();
    outcome(
        wins >= 2 && within(el, 3600.0),
        format!("full >= single in {wins}/3 ({}), {:.0}s", rows.join("; "), el.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- criterion 9

fn mask_repair() -> Outcome {
    let start = Instant::now();
    let params = RepairParams::default();
    let (mut restored, mut idempotent, mut total) = (0, 0, 0);
    for deletions in [1, 2] {
        let cfg = SynthConfig {
            n_patients: 25,
            slices_per_patient: 1,
            vertebrae_per_slice: 8,
            seed: 90 + deletions as u64,
            masks: MaskConfig {
                deletions,
                ..MaskConfig::default()
            },
            ..SynthConfig::default()
        };
        for sample in generate_masks(&cfg).unwrap() {
            total += 1;
            let out = maskrepair::repair(&sample.corrupted, &params).unwrap();
            let truth = order_along_spine(&label_components(&sample.clean));
            let got = &out.mask.components;
            let matched = got.len() == truth.len() && got.iter().zip(&truth).all(|(a, b)| iou(&a.pixels, &b.pixels) >= 0.5);
            restored += usize::from(matched);
            let again = maskrepair::repair(&out.mask.mask(), &params).unwrap();
            idempotent += usize::from(again.mask == out.mask);
        }
    }
    let el = start.elapsed();
    let rate = restored as f64 / total as f64;
    outcome(
        total == 50 && rate >= 0.9 && idempotent == total && within(el, 60.0),
        format!("{restored}/{total} restored with IoU >= 0.5, {idempotent}/{total} idempotent, {:.2}s", el.as_secs_f64()),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let selected: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |k: usize| selected.is_empty() || selected.contains(&k);
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |k: usize, name: &'static str, o: Outcome| {
        println!("criterion {k:>2} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((k, name, o));
    };
    if want(1) {
        report(1, "loss analytics", loss_analytics());
    }
    if want(2) {
        report(2, "gradient suite", gradient_suite());
    }
    if want(3) {
        report(3, "metric oracle equivalence", metric_oracle());
    }
    if want(4) {
        report(4, "compare network wiring", compare_wiring());
    }
    if want(5) {
        report(5, "gate contract", gate_contract());
    }
    if want(6) || want(8) || want(10) {
        let data = overfit_fixture();
        let first = overfit_run(&data);
        if want(6) {
            report(6, "overfit smoke test", overfit(&first));
        }
        if want(8) {
            report(8, "gate behavior", gate_behavior(&first, &data));
        }
        if want(10) {
            let second = overfit_run(&data);
            report(10, "determinism", determinism(&first, &second));
        }
    }
    if want(7) {
        report(7, "synthetic ablation direction", ablation_direction());
    }
    if want(9) {
        report(9, "mask repair", mask_repair());
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("acceptance: {} passed, {} failed", results.len() - failed.len(), failed.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
