//! Training loop, evaluation, checkpoints and run artifacts.

mod checkpoint;
mod dataset;
mod visualize;

use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tsccn_nn::{Adam, AdamConfig, Matrix, Mode};

pub use checkpoint::{load_checkpoint, load_into, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use dataset::{TripletDataset, TripletSample};
pub use visualize::{class_color, pca_2d, render_scatter, visualize_model, ScatterPoint, VisualizationFiles};

use crate::data::{load_manifest, DatasetManifest, VertebraClass};
use crate::losses::{self, total_loss, LossTerms, LossWeights};
use crate::metrics::{self, ConfusionState, MetricsReport};
use crate::network::{Ablation, ModelOutputs, NetworkConfig, OutputGrads, Tsccn};
use crate::sampler::{self, AugmentParams, BatchSpec};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optimizer steps per epoch; 0 means `ceil(train samples / batch_size)`.
    pub steps_per_epoch: usize,
    pub eval_batch_size: usize,
    pub ablation: Ablation,
    pub seed: u64,
    /// Random flips and small rotations, shared by the three images of a triplet.
    pub augment: bool,
    /// Class-balanced sampling of training batches.
    pub oversample: bool,
    /// Stop once eval-mode accuracy on the training set reaches this value.
    pub early_stop_train_accuracy: Option<f64>,
    pub optimizer: OptimizerConfig,
    pub loss_weights: LossWeights,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 64,
            epochs: 100,
            steps_per_epoch: 0,
            eval_batch_size: 64,
            ablation: Ablation::FullTsccn,
            seed: 0,
            augment: true,
            oversample: true,
            early_stop_train_accuracy: None,
            optimizer: OptimizerConfig::default(),
            loss_weights: LossWeights::default(),
            network: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::Config("eval_batch_size must be positive".into()));
        }
        if let Some(a) = self.early_stop_train_accuracy {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::Config(format!("early_stop_train_accuracy must lie in (0, 1], got {a}")));
            }
        }
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config("optimizer betas must lie in [0, 1) and eps be positive".into()));
        }
        self.batch_spec().validate()?;
        self.loss_weights.validate()?;
        self.network.validate()
    }

    pub fn batch_spec(&self) -> BatchSpec {
        BatchSpec {
            batch_size: self.batch_size,
            augment: self.augment,
            oversample: self.oversample,
            triplet_mining: self.ablation.triplet(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the compact JSON form, in hex.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossTerms,
    pub train_total: f64,
    /// Eval-mode training accuracy, measured only when early stopping is on.
    pub train_accuracy: Option<f64>,
    pub val: Option<LossTerms>,
    pub val_total: Option<f64>,
    pub val_metrics: Option<MetricsReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub ablation: Ablation,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch of the selected model.
    pub best_epoch: usize,
    pub best_val_ase: Option<f64>,
    pub checkpoints: Vec<PathBuf>,
}

impl RunRecord {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }
}

pub struct TrainOutcome {
    pub record: RunRecord,
    /// Parameters from the epoch with the highest validation aSE, or the
    /// last epoch without validation data.
    pub best: Tsccn,
    pub last: Tsccn,
}

/// Loss terms of one batch and the gradients of their weighted sum.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub terms: LossTerms,
    pub total: f64,
    pub grads: OutputGrads,
}

fn to_array(m: &Matrix) -> Array2<f64> {
    Array2::from_shape_fn((m.rows, m.cols), |(r, c)| m.row(r)[c] as f64)
}

fn to_matrix(a: &Array2<f64>, scale: f64) -> Matrix {
    let (r, c) = a.dim();
    Matrix::from_vec(r, c, a.iter().map(|v| (v * scale) as f32).collect()).expect("shape matches")
}

/// Every loss term active for `ablation` on one batch of outputs.
pub fn batch_loss(out: &ModelOutputs, labels: &[[VertebraClass; 3]], ablation: Ablation, w: &LossWeights) -> Result<BatchLoss> {
    let current: Vec<VertebraClass> = labels.iter().map(|l| l[1]).collect();
    let mut terms = LossTerms::default();
    let mut grads = OutputGrads::default();

    let ce = losses::ce3(to_array(&out.logits3).view(), &current)?;
    terms.ce = ce.value;
    grads.logits3 = Some(to_matrix(&ce.grad, w.ce));

    if let (Some(p), Some(n)) = (&out.disc_prev, &out.disc_next) {
        let bin = |k: usize| labels.iter().map(|l| l[k].binary()).collect::<Vec<u8>>();
        let d = losses::disc_loss(to_array(p).view(), to_array(n).view(), &bin(1), &bin(0), &bin(2))?;
        terms.disc = d.value;
        grads.disc_prev = Some(to_matrix(&d.grad_prev, w.lambda1));
        grads.disc_next = Some(to_matrix(&d.grad_next, w.lambda1));
    }

    let mut triplet_value = 0.0;
    if ablation.triplet() {
        let emb = to_array(&out.embedding);
        let rows: Vec<Vec<f64>> = emb.rows().into_iter().map(|r| r.to_vec()).collect();
        let mined = sampler::mine_triplets(&rows, &current);
        let t = losses::triplet_loss(emb.view(), &mined, w.triplet_margin)?;
        triplet_value = t.value;
        grads.embedding = Some(to_matrix(&t.grad, w.lambda2));
    }
    let s = losses::stream_loss(to_array(&out.logits2).view(), &current, triplet_value)?;
    terms.stream = s.value;
    grads.logits2 = Some(to_matrix(&s.grad, w.lambda2));

    if let Some(g) = &out.features.gate {
        let wl = losses::weight_loss(&g.u, &current, w.u_hat, w.paper_literal_weight_loss)?;
        terms.weight = wl.value;
        // u = w_R / w_C
        grads.gate_weights = Some(
            (0..current.len())
                .map(|i| {
                    let gu = w.lambda3 * wl.grad_u[i];
                    [gu / g.w_c[i], -gu * g.w_r[i] / (g.w_c[i] * g.w_c[i])]
                })
                .collect(),
        );
    }
    Ok(BatchLoss {
        terms,
        total: total_loss(&terms, w),
        grads,
    })
}

fn check_finite(terms: &LossTerms, epoch: usize, step: usize) -> Result<()> {
    match terms.named().into_iter().find(|(_, v)| !v.is_finite()) {
        Some((term, _)) => Err(Error::Divergence { term, epoch, step }),
        None => Ok(()),
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub state: ConfusionState,
    pub report: MetricsReport,
    /// Sample-weighted means of the per-batch loss terms.
    pub losses: LossTerms,
    pub total: f64,
    pub probabilities: Vec<[f64; 3]>,
    /// `u = w_R / w_C` per sample for gated models.
    pub ratios: Option<Vec<f64>>,
}

impl Evaluation {
    pub fn predictions(&self) -> Vec<VertebraClass> {
        self.probabilities
            .iter()
            .map(|p| VertebraClass::ALL[(0..3).fold(0, |best, k| if p[k] > p[best] { k } else { best })])
            .collect()
    }
}

/// Eval-mode forward over every sample in order.
pub fn evaluate_model(model: &mut Tsccn, data: &TripletDataset, weights: &LossWeights, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let mut state = ConfusionState::new();
    let mut sums = LossTerms::default();
    let mut probabilities = Vec::with_capacity(data.len());
    let mut ratios = model.ablation().gated().then(Vec::new);
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk, None)?;
        let out = model.forward(&batch, Mode::Eval)?;
        let labels: Vec<[VertebraClass; 3]> = chunk.iter().map(|&i| data.samples()[i].labels).collect();
        let bl = batch_loss(&out, &labels, model.ablation(), weights)?;
        let k = chunk.len() as f64 / data.len() as f64;
        sums.ce += k * bl.terms.ce;
        sums.disc += k * bl.terms.disc;
        sums.stream += k * bl.terms.stream;
        sums.weight += k * bl.terms.weight;
        for (p, l) in Tsccn::probabilities(&out.logits3).into_iter().zip(&labels) {
            state.accumulate_scores(l[1], p)?;
            probabilities.push(p);
        }
        if let (Some(r), Some(g)) = (ratios.as_mut(), &out.features.gate) {
            r.extend_from_slice(&g.u);
        }
    }
    Ok(Evaluation {
        report: metrics::report(&state),
        state,
        losses: sums,
        total: total_loss(&sums, weights),
        probabilities,
        ratios,
    })
}

fn mean_terms(sum: &LossTerms, n: usize) -> LossTerms {
    let k = 1.0 / n.max(1) as f64;
    LossTerms {
        ce: sum.ce * k,
        disc: sum.disc * k,
        stream: sum.stream * k,
        weight: sum.weight * k,
    }
}

/// Trains from scratch. Batches are drawn from a class-balanced index
/// stream; after every epoch the model is evaluated on `val` and the epoch
/// with the highest validation aSE is kept (ties keep the earlier epoch).
pub fn train(config: &TrainConfig, train: &TripletDataset, val: Option<&TripletDataset>) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyManifest);
    }
    if train.side() != config.network.image_size {
        return Err(Error::InvalidInput(format!(
            "training images are {0}x{0} but the network expects {1}x{1}",
            train.side(),
            config.network.image_size
        )));
    }
    let mut model = Tsccn::new(&config.network, config.ablation, config.seed)?;
    let mut adam = Adam::new(AdamConfig {
        learning_rate: config.learning_rate,
        beta1: config.optimizer.beta1,
        beta2: config.optimizer.beta2,
        eps: config.optimizer.eps,
    });
    let spec = config.batch_spec();
    let labels = train.labels();
    let mut stream = sampler::oversampled_index_stream(&labels, &spec, config.seed.wrapping_add(1))?;
    let mut aug_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let steps = match config.steps_per_epoch {
        0 => train.len().div_ceil(config.batch_size),
        s => s,
    };
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Tsccn)> = None;
    for epoch in 1..=config.epochs {
        let mut sum = LossTerms::default();
        for step in 1..=steps {
            let idx: Vec<usize> = stream.by_ref().take(config.batch_size).collect();
            let aug: Option<Vec<AugmentParams>> = config
                .augment
                .then(|| idx.iter().map(|_| AugmentParams::sample(&mut aug_rng)).collect());
            let batch = train.batch(&idx, aug.as_deref())?;
            let out = model.forward(&batch, Mode::Train)?;
            let batch_labels: Vec<[VertebraClass; 3]> = idx.iter().map(|&i| train.samples()[i].labels).collect();
            let bl = batch_loss(&out, &batch_labels, config.ablation, &config.loss_weights)?;
            check_finite(&bl.terms, epoch, step)?;
            model.backward(&bl.grads)?;
            adam.step(&mut model)?;
            sum.ce += bl.terms.ce;
            sum.disc += bl.terms.disc;
            sum.stream += bl.terms.stream;
            sum.weight += bl.terms.weight;
        }
        let train_terms = mean_terms(&sum, steps);
        let mut rec = EpochRecord {
            epoch,
            train: train_terms,
            train_total: total_loss(&train_terms, &config.loss_weights),
            train_accuracy: None,
            val: None,
            val_total: None,
            val_metrics: None,
        };
        if let Some(v) = val {
            let ev = evaluate_model(&mut model, v, &config.loss_weights, config.eval_batch_size)?;
            let ase = ev.report.macro_avg.ase;
            let ase = if ase.is_nan() { f64::NEG_INFINITY } else { ase };
            if best.as_ref().is_none_or(|(b, _, _)| ase > *b) {
                best = Some((ase, epoch, model.clone()));
            }
            rec.val = Some(ev.losses);
            rec.val_total = Some(ev.total);
            rec.val_metrics = Some(ev.report);
        }
        log::info!(
            "epoch {epoch}/{} train total {:.4} (ce {:.4} disc {:.4} stream {:.4} weight {:.4}){}",
            config.epochs,
            rec.train_total,
            train_terms.ce,
            train_terms.disc,
            train_terms.stream,
            train_terms.weight,
            rec.val_metrics
                .as_ref()
                .map(|m| format!(" val aSE {:.4}", m.macro_avg.ase))
                .unwrap_or_default()
        );
        let stop = match config.early_stop_train_accuracy {
            Some(target) => {
                let acc = evaluate_model(&mut model, train, &config.loss_weights, config.eval_batch_size)?
                    .report
                    .accuracy
                    .unwrap_or(0.0);
                rec.train_accuracy = Some(acc);
                acc >= target
            }
            None => false,
        };
        epochs.push(rec);
        if stop {
            log::info!("training accuracy target reached after epoch {epoch}");
            break;
        }
    }
    let (best_val_ase, best_epoch, best_model) = match best {
        Some((ase, e, m)) => (ase.is_finite().then_some(ase), e, m),
        None => (None, epochs.len(), model.clone()),
    };
    Ok(TrainOutcome {
        record: RunRecord {
            config_hash: config.config_hash(),
            ablation: config.ablation,
            epochs,
            best_epoch,
            best_val_ase,
            checkpoints: Vec::new(),
        },
        best: best_model,
        last: model,
    })
}

/// File names written by [`train_run`] inside its output directory.
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const LOSS_CURVE: &str = "loss_curve.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const RUN_RECORD: &str = "run_record.json";

/// Loads the manifests, trains and writes checkpoints, the loss curve, the
/// run record and the selected epoch's validation metrics to `out_dir`.
pub fn train_run(config: &TrainConfig, train_manifest: &DatasetManifest, val_manifest: Option<&DatasetManifest>, out_dir: &Path) -> Result<RunRecord> {
    config.validate()?;
    let side = config.network.image_size;
    let train_ds = TripletDataset::from_manifest(train_manifest, side)?;
    let val_ds = val_manifest.map(|m| TripletDataset::from_manifest(m, side)).transpose()?;
    let outcome = train(config, &train_ds, val_ds.as_ref())?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut record = outcome.record;
    let best = out_dir.join(BEST_CHECKPOINT);
    save_checkpoint(&best, &outcome.best, config, Some(record.best_epoch))?;
    let last = out_dir.join(LAST_CHECKPOINT);
    save_checkpoint(&last, &outcome.last, config, Some(record.epochs.len()))?;
    record.checkpoints = vec![best, last];
    write_loss_curve(&out_dir.join(LOSS_CURVE), &record)?;
    if let Some(m) = &record.best().val_metrics {
        write_text(&out_dir.join(METRICS_JSON), &m.to_json())?;
    }
    write_text(
        &out_dir.join(RUN_RECORD),
        &serde_json::to_string_pretty(&record).map_err(|e| Error::InvalidInput(e.to_string()))?,
    )?;
    Ok(record)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    if !text.ends_with('\n') {
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// One row per epoch and split: `epoch,split,ce,disc,stream,weight,total`.
pub fn write_loss_curve(path: &Path, record: &RunRecord) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let io = |e: csv::Error| Error::InvalidInput(format!("{}: {e}", path.display()));
    w.write_record(["epoch", "split", "ce", "disc", "stream", "weight", "total"]).map_err(io)?;
    for e in &record.epochs {
        let rows = [("train", Some(e.train), Some(e.train_total)), ("val", e.val, e.val_total)];
        for (split, terms, total) in rows {
            if let (Some(t), Some(total)) = (terms, total) {
                w.write_record([
                    e.epoch.to_string(),
                    split.to_string(),
                    t.ce.to_string(),
                    t.disc.to_string(),
                    t.stream.to_string(),
                    t.weight.to_string(),
                    total.to_string(),
                ])
                .map_err(io)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Metrics of a stored checkpoint on every triplet of a manifest.
pub fn evaluate(checkpoint: &Path, manifest: &DatasetManifest) -> Result<MetricsReport> {
    let (mut model, config) = load_checkpoint(checkpoint)?;
    let data = TripletDataset::from_manifest(manifest, config.network.image_size)?;
    Ok(evaluate_model(&mut model, &data, &config.loss_weights, config.eval_batch_size)?.report)
}

pub fn evaluate_path(checkpoint: &Path, manifest: &Path) -> Result<MetricsReport> {
    evaluate(checkpoint, &load_manifest(manifest)?)
}

pub fn emit_visualizations(checkpoint: &Path, manifest: &DatasetManifest, out_dir: &Path) -> Result<VisualizationFiles> {
    let (mut model, config) = load_checkpoint(checkpoint)?;
    let data = TripletDataset::from_manifest(manifest, config.network.image_size)?;
    visualize_model(&mut model, &data, out_dir, config.eval_batch_size)
}

/// Mean and sample standard deviation of each macro metric over repeats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub repeats: usize,
    /// `[aSE, aSP, aAUC, mAP]` as `(mean, std)`; `None` when never defined.
    pub metrics: [Option<(f64, f64)>; 4],
}

pub fn summarize(ablation: Ablation, reports: &[MetricsReport]) -> AblationRow {
    let pick = |k: usize| -> Option<(f64, f64)> {
        let vals: Vec<f64> = reports
            .iter()
            .map(|r| {
                let m = &r.macro_avg;
                [m.ase, m.asp, m.aauc, m.map][k]
            })
            .filter(|v| v.is_finite())
            .collect();
        if vals.is_empty() {
            return None;
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = if vals.len() > 1 {
            vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Some((mean, var.sqrt()))
    };
    AblationRow {
        ablation,
        repeats: reports.len(),
        metrics: [pick(0), pick(1), pick(2), pick(3)],
    }
}

/// Plain-text comparison table, percentages with one decimal.
pub fn comparison_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<24}{:>16}{:>16}{:>16}{:>16}\n", "ablation", "aSE", "aSP", "aAUC", "mAP");
    for r in rows {
        s.push_str(&format!("{:<24}", r.ablation.name()));
        for m in &r.metrics {
            let cell = match m {
                Some((mean, std)) if r.repeats > 1 => format!("{:.1}±{:.1}", 100.0 * mean, 100.0 * std),
                Some((mean, _)) => format!("{:.1}", 100.0 * mean),
                None => "n/a".into(),
            };
            s.push_str(&format!("{cell:>16}"));
        }
        s.push('\n');
    }
    s
}
