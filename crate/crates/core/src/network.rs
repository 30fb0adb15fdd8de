//! The two-stream model and its ablated variants.
//!
//! Recognition stream: three residual branches (stem plus the first
//! `branch_depth` stages) for the previous, current and next vertebra, summed
//! and passed through the remaining stages. A discriminator compares pooled
//! branch features of (current, previous) and (current, next).
//! Classification stream: a full backbone on the current vertebra with a
//! benign/malignant head and a normalized embedding for the triplet loss.
//! A gate weighs the two pooled features before the three-class head.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tsccn_nn::activation::{relu_in_place, sigmoid};
use tsccn_nn::{
    BackboneConfig, FeatureMap, GlobalAvgPool, Linear, Matrix, Mlp, Mode, Param, Parameterized, ResidualSegment,
};

use crate::imaging::{self, Image};
use crate::{Error, Result};

/// Keeps gate outputs strictly inside (0, 1): `w = ε + (1 - 2ε) σ(z)`.
pub const GATE_EPSILON: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub image_size: usize,
    pub base_width: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_pool: bool,
    /// Residual stages inside each recognition branch; the rest form the trunk.
    pub branch_depth: usize,
    /// One branch shared by all three inputs instead of three.
    pub tie_branches: bool,
    pub discriminator_hidden: usize,
    pub gate_hidden: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            base_width: 64,
            stem_kernel: 7,
            stem_stride: 2,
            stem_pool: true,
            branch_depth: 2,
            tie_branches: false,
            discriminator_hidden: 128,
            gate_hidden: 64,
        }
    }
}

impl NetworkConfig {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            in_channels: 1,
            base_width: self.base_width,
            stem_kernel: self.stem_kernel,
            stem_stride: self.stem_stride,
            stem_pool: self.stem_pool,
            blocks_per_stage: [2, 2, 2, 2],
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone().channels_after(BackboneConfig::STAGES)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.base_width == 0 || self.stem_kernel == 0 || self.stem_stride == 0 {
            return bad("base_width, stem_kernel and stem_stride must be positive".into());
        }
        if self.branch_depth > BackboneConfig::STAGES {
            return bad(format!("branch_depth {} exceeds {} stages", self.branch_depth, BackboneConfig::STAGES));
        }
        if self.image_size < 8 {
            return bad(format!("image_size {} is below 8", self.image_size));
        }
        if self.discriminator_hidden == 0 || self.gate_hidden == 0 {
            return bad("hidden widths must be positive".into());
        }
        Ok(())
    }
}

/// Model variants compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    SingleStream,
    SingleStreamTriplet,
    TwoStream,
    TwoStreamTriplet,
    PlusCompare,
    FullTsccn,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::SingleStream,
        Ablation::SingleStreamTriplet,
        Ablation::TwoStream,
        Ablation::TwoStreamTriplet,
        Ablation::PlusCompare,
        Ablation::FullTsccn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::SingleStream => "single_stream",
            Ablation::SingleStreamTriplet => "single_stream_triplet",
            Ablation::TwoStream => "two_stream",
            Ablation::TwoStreamTriplet => "two_stream_triplet",
            Ablation::PlusCompare => "plus_compare",
            Ablation::FullTsccn => "full_tsccn",
        }
    }

    pub fn two_stream(self) -> bool {
        !matches!(self, Ablation::SingleStream | Ablation::SingleStreamTriplet)
    }

    pub fn compare(self) -> bool {
        matches!(self, Ablation::PlusCompare | Ablation::FullTsccn)
    }

    pub fn triplet(self) -> bool {
        !matches!(self, Ablation::SingleStream | Ablation::TwoStream)
    }

    pub fn gated(self) -> bool {
        self == Ablation::FullTsccn
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which recognition branch an input goes through.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Prev = 0,
    Current = 1,
    Next = 2,
}

/// Three-branch compare network with additive fusion.
#[derive(Clone, Debug)]
pub struct CompareNetwork {
    /// Three branches, or one when tied.
    branches: Vec<ResidualSegment>,
    trunk: ResidualSegment,
}

impl CompareNetwork {
    fn new(rng: &mut ChaCha8Rng, cfg: &NetworkConfig) -> Self {
        let bb = cfg.backbone();
        let n = if cfg.tie_branches { 1 } else { 3 };
        let branches = (0..n)
            .map(|_| ResidualSegment::new(rng, &bb, true, 0..cfg.branch_depth))
            .collect();
        let trunk = ResidualSegment::new(rng, &bb, false, cfg.branch_depth..BackboneConfig::STAGES);
        Self { branches, trunk }
    }

    pub fn is_tied(&self) -> bool {
        self.branches.len() == 1
    }

    pub fn branch(&self, which: Branch) -> &ResidualSegment {
        &self.branches[if self.is_tied() { 0 } else { which as usize }]
    }

    pub fn branch_mut(&mut self, which: Branch) -> &mut ResidualSegment {
        let i = if self.is_tied() { 0 } else { which as usize };
        &mut self.branches[i]
    }

    pub fn trunk_mut(&mut self) -> &mut ResidualSegment {
        &mut self.trunk
    }

    /// `[h_p, h_c, h_n]`
    fn branches_forward(&mut self, x: [&FeatureMap; 3], mode: Mode) -> Result<[FeatureMap; 3]> {
        if !(x[0].same_shape(x[1]) && x[1].same_shape(x[2])) {
            return Err(Error::InvalidInput(format!(
                "triplet images differ in shape: {:?} {:?} {:?}",
                x[0].dims(),
                x[1].dims(),
                x[2].dims()
            )));
        }
        if self.is_tied() {
            let b = x[0].batch;
            let joined = FeatureMap::concat_batch(&x)?;
            let h = self.branches[0].forward(&joined, mode)?;
            let mut parts = h.split_batch(&[b, b, b])?.into_iter();
            let mut next = || parts.next().expect("three parts");
            Ok([next(), next(), next()])
        } else {
            Ok([
                self.branches[0].forward(x[0], mode)?,
                self.branches[1].forward(x[1], mode)?,
                self.branches[2].forward(x[2], mode)?,
            ])
        }
    }

    fn branches_backward(&mut self, dh: [FeatureMap; 3]) -> Result<()> {
        if self.is_tied() {
            let joined = FeatureMap::concat_batch(&[&dh[0], &dh[1], &dh[2]])?;
            self.branches[0].backward(&joined, false)?;
        } else {
            for (branch, d) in self.branches.iter_mut().zip(&dh) {
                branch.backward(d, false)?;
            }
        }
        Ok(())
    }
}

impl Parameterized for CompareNetwork {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        let names = if self.is_tied() { &["branch"][..] } else { &["branch_prev", "branch_current", "branch_next"][..] };
        for (b, n) in self.branches.iter().zip(names) {
            b.visit_params(&tsccn_nn::param::join(prefix, n), out);
        }
        self.trunk.visit_params(&tsccn_nn::param::join(prefix, "trunk"), out);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        let names = if self.is_tied() { &["branch"][..] } else { &["branch_prev", "branch_current", "branch_next"][..] };
        for (b, n) in self.branches.iter_mut().zip(names) {
            b.visit_params_mut(&tsccn_nn::param::join(prefix, n), out);
        }
        self.trunk.visit_params_mut(&tsccn_nn::param::join(prefix, "trunk"), out);
    }
}

#[derive(Clone, Debug)]
enum Recognition {
    /// A second plain backbone on the current vertebra.
    Plain(ResidualSegment),
    Compare(CompareNetwork),
}

/// Gate weights per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GateOutput {
    pub w_r: Vec<f64>,
    pub w_c: Vec<f64>,
    pub u: Vec<f64>,
    /// Pre-activations `[B, 2]`.
    pub z: Matrix,
}

impl GateOutput {
    pub fn from_logits(z: Matrix) -> Self {
        let squash = |v: f32| GATE_EPSILON + (1.0 - 2.0 * GATE_EPSILON) * sigmoid(v as f64);
        let w_r: Vec<f64> = (0..z.rows).map(|i| squash(z.row(i)[0])).collect();
        let w_c: Vec<f64> = (0..z.rows).map(|i| squash(z.row(i)[1])).collect();
        let u = w_r.iter().zip(&w_c).map(|(r, c)| r / c).collect();
        Self { w_r, w_c, u, z }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamFeatures {
    pub f_r: Option<Matrix>,
    pub f_c: Matrix,
    pub gate: Option<GateOutput>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutputs {
    pub logits3: Matrix,
    pub logits2: Matrix,
    pub disc_prev: Option<Matrix>,
    pub disc_next: Option<Matrix>,
    pub embedding: Matrix,
    /// Input of the three-class head.
    pub fused: Matrix,
    pub features: StreamFeatures,
}

/// Gradients of the objective with respect to the model outputs.
#[derive(Clone, Debug, Default)]
pub struct OutputGrads {
    pub logits3: Option<Matrix>,
    pub logits2: Option<Matrix>,
    pub disc_prev: Option<Matrix>,
    pub disc_next: Option<Matrix>,
    pub embedding: Option<Matrix>,
    /// `(dL/dw_R, dL/dw_C)` per sample.
    pub gate_weights: Option<Vec<[f64; 2]>>,
}

/// Images of a batch of triplets, each `[1, B, S, S]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch {
    pub prev: FeatureMap,
    pub current: FeatureMap,
    pub next: FeatureMap,
}

impl TripletBatch {
    pub fn from_images(triplets: &[[&Image; 3]]) -> Result<Self> {
        let first = triplets
            .first()
            .ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
        let (h, w) = first[1].dim();
        let stack = |k: usize| -> Result<FeatureMap> {
            let slices: Vec<&[f32]> = triplets
                .iter()
                .map(|t| {
                    t[k].as_slice()
                        .ok_or_else(|| Error::InvalidInput("image is not contiguous".into()))
                })
                .collect::<Result<_>>()?;
            Ok(FeatureMap::from_images(slices, h, w)?)
        };
        Ok(Self {
            prev: stack(0)?,
            current: stack(1)?,
            next: stack(2)?,
        })
    }

    pub fn batch(&self) -> usize {
        self.current.batch
    }
}

#[derive(Clone, Debug)]
struct Cache {
    f_r: Option<Matrix>,
    f_c: Matrix,
    norms: Vec<f32>,
    embedding: Matrix,
    gate: Option<GateOutput>,
    rec_map: Option<FeatureMap>,
    cls_map: FeatureMap,
    branch_dims: Option<[usize; 4]>,
    has_disc: bool,
}

/// Per-sample class activation maps at input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct CamSet {
    pub recognition: Option<Image>,
    pub classification: Image,
}

#[derive(Clone, Debug)]
pub struct Tsccn {
    config: NetworkConfig,
    ablation: Ablation,
    recognition: Option<Recognition>,
    classification: ResidualSegment,
    head2: Linear,
    discriminator: Option<Mlp>,
    gate: Option<Mlp>,
    head3: Linear,
    cache: Option<Cache>,
}

fn pool_dims(m: &FeatureMap) -> [usize; 4] {
    m.dims()
}

fn scale_rows(m: &Matrix, w: &[f64]) -> Matrix {
    let mut out = m.clone();
    for (r, &s) in w.iter().enumerate() {
        out.row_mut(r).iter_mut().for_each(|v| *v *= s as f32);
    }
    out
}

fn row_dot(a: &Matrix, b: &Matrix, r: usize) -> f64 {
    a.row(r).iter().zip(b.row(r)).map(|(x, y)| *x as f64 * *y as f64).sum()
}

fn mlp_apply(m: &Mlp, x: &Matrix) -> Result<Matrix> {
    let mut h = m.fc1.apply(x)?;
    relu_in_place(&mut h.data);
    Ok(m.fc2.apply(&h)?)
}

fn normalize_rows(f: &Matrix) -> (Matrix, Vec<f32>) {
    let mut e = f.clone();
    let mut norms = Vec::with_capacity(f.rows);
    for r in 0..f.rows {
        let n = (f.row(r).iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt() as f32).max(1e-12);
        e.row_mut(r).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    (e, norms)
}

impl Tsccn {
    pub fn new(config: &NetworkConfig, ablation: Ablation, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bb = config.backbone();
        let d = config.feature_dim();
        let recognition = if ablation.compare() {
            Some(Recognition::Compare(CompareNetwork::new(&mut rng, config)))
        } else if ablation.two_stream() {
            Some(Recognition::Plain(ResidualSegment::full(&mut rng, &bb)))
        } else {
            None
        };
        let classification = ResidualSegment::full(&mut rng, &bb);
        let head2 = Linear::new(&mut rng, d, 2, true);
        let discriminator = ablation
            .compare()
            .then(|| Mlp::new(&mut rng, 2 * config.backbone().channels_after(config.branch_depth), config.discriminator_hidden, 2));
        let gate = ablation.gated().then(|| Mlp::new(&mut rng, 2 * d, config.gate_hidden, 2));
        let head_in = if ablation.two_stream() { 2 * d } else { d };
        let head3 = Linear::new(&mut rng, head_in, 3, true);
        Ok(Self {
            config: config.clone(),
            ablation,
            recognition,
            classification,
            head2,
            discriminator,
            gate,
            head3,
            cache: None,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn ablation(&self) -> Ablation {
        self.ablation
    }

    pub fn compare_network(&self) -> Option<&CompareNetwork> {
        match &self.recognition {
            Some(Recognition::Compare(c)) => Some(c),
            _ => None,
        }
    }

    pub fn compare_network_mut(&mut self) -> Option<&mut CompareNetwork> {
        match &mut self.recognition {
            Some(Recognition::Compare(c)) => Some(c),
            _ => None,
        }
    }

    pub fn gate_mlp_mut(&mut self) -> Option<&mut Mlp> {
        self.gate.as_mut()
    }

    pub fn head3_mut(&mut self) -> &mut Linear {
        &mut self.head3
    }

    fn compare_or_err(&mut self) -> Result<&mut CompareNetwork> {
        let ablation = self.ablation;
        self.compare_network_mut()
            .ok_or_else(|| Error::InvalidInput(format!("{ablation} has no compare network")))
    }

    /// Pooled recognition feature and the branch outputs `[h_p, h_c, h_n]`.
    pub fn recognition_forward(
        &mut self,
        prev: &FeatureMap,
        current: &FeatureMap,
        next: &FeatureMap,
        mode: Mode,
    ) -> Result<(Matrix, [FeatureMap; 3])> {
        let cn = self.compare_or_err()?;
        let h = cn.branches_forward([prev, current, next], mode)?;
        let mut sum = h[0].add(&h[1])?;
        sum.add_assign(&h[2])?;
        let map = cn.trunk.forward(&sum, mode)?;
        Ok((GlobalAvgPool::pool(&map), h))
    }

    pub fn branch_forward(&mut self, which: Branch, x: &FeatureMap, mode: Mode) -> Result<FeatureMap> {
        Ok(self.compare_or_err()?.branch_mut(which).forward(x, mode)?)
    }

    /// Trunk followed by global average pooling.
    pub fn trunk_forward(&mut self, h: &FeatureMap, mode: Mode) -> Result<Matrix> {
        let map = self.compare_or_err()?.trunk.forward(h, mode)?;
        Ok(GlobalAvgPool::pool(&map))
    }

    /// Same-class logits for two branch outputs: channel concatenation,
    /// global average pooling, then the two-layer head.
    pub fn discriminate(&self, h_a: &FeatureMap, h_b: &FeatureMap) -> Result<Matrix> {
        if !h_a.same_shape(h_b) {
            return Err(Error::InvalidInput(format!(
                "discriminator inputs differ: {:?} vs {:?}",
                h_a.dims(),
                h_b.dims()
            )));
        }
        let d = self
            .discriminator
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("{} has no discriminator", self.ablation)))?;
        // pooling a channel concatenation equals concatenating the pooled parts
        let x = Matrix::hconcat(&GlobalAvgPool::pool(h_a), &GlobalAvgPool::pool(h_b))?;
        mlp_apply(d, &x)
    }

    /// `(f_C, logits2, embedding)` for the current vertebra.
    pub fn classification_forward(&mut self, x: &FeatureMap, mode: Mode) -> Result<(Matrix, Matrix, Matrix)> {
        let map = self.classification.forward(x, mode)?;
        let f_c = GlobalAvgPool::pool(&map);
        let logits2 = self.head2.apply(&f_c)?;
        let (embedding, _) = normalize_rows(&f_c);
        Ok((f_c, logits2, embedding))
    }

    pub fn gate(&self, f_r: &Matrix, f_c: &Matrix) -> Result<GateOutput> {
        let g = self
            .gate
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("{} has no gate", self.ablation)))?;
        Ok(GateOutput::from_logits(mlp_apply(g, &Matrix::hconcat(f_r, f_c)?)?))
    }

    pub fn fuse_and_classify(&self, f_r: &Matrix, f_c: &Matrix, w_r: &[f64], w_c: &[f64]) -> Result<Matrix> {
        if w_r.len() != f_r.rows || w_c.len() != f_c.rows {
            return Err(Error::InvalidInput("gate weights do not match the batch".into()));
        }
        let fused = Matrix::hconcat(&scale_rows(f_r, w_r), &scale_rows(f_c, w_c))?;
        Ok(self.head3.apply(&fused)?)
    }

    /// Full forward pass; caches what [`Tsccn::backward`] needs.
    pub fn forward(&mut self, batch: &TripletBatch, mode: Mode) -> Result<ModelOutputs> {
        let b = batch.batch();
        let mut branch_dims = None;
        let mut disc = None;
        let (f_r, rec_map) = match &mut self.recognition {
            None => (None, None),
            Some(Recognition::Plain(bb)) => {
                let map = bb.forward(&batch.current, mode)?;
                (Some(GlobalAvgPool::pool(&map)), Some(map))
            }
            Some(Recognition::Compare(cn)) => {
                let h = cn.branches_forward([&batch.prev, &batch.current, &batch.next], mode)?;
                let mut sum = h[0].add(&h[1])?;
                sum.add_assign(&h[2])?;
                let map = cn.trunk.forward(&sum, mode)?;
                branch_dims = Some(pool_dims(&h[0]));
                if let Some(d) = &mut self.discriminator {
                    let [gp, gc, gn] = [&h[0], &h[1], &h[2]].map(GlobalAvgPool::pool);
                    let x = Matrix::vconcat(&[&Matrix::hconcat(&gc, &gp)?, &Matrix::hconcat(&gc, &gn)?])?;
                    let out = d.forward(&x)?.vsplit(&[b, b])?;
                    disc = Some(out);
                }
                (Some(GlobalAvgPool::pool(&map)), Some(map))
            }
        };
        let cls_map = self.classification.forward(&batch.current, mode)?;
        let f_c = GlobalAvgPool::pool(&cls_map);
        let logits2 = self.head2.forward(&f_c)?;
        let (embedding, norms) = normalize_rows(&f_c);
        let (fused, gate) = match (&f_r, &mut self.gate) {
            (None, _) => (f_c.clone(), None),
            (Some(fr), None) => (Matrix::hconcat(fr, &f_c)?, None),
            (Some(fr), Some(g)) => {
                let out = GateOutput::from_logits(g.forward(&Matrix::hconcat(fr, &f_c)?)?);
                let fused = Matrix::hconcat(&scale_rows(fr, &out.w_r), &scale_rows(&f_c, &out.w_c))?;
                (fused, Some(out))
            }
        };
        let logits3 = self.head3.forward(&fused)?;
        let (disc_prev, disc_next) = match disc {
            Some(mut v) => {
                let n = v.pop();
                (v.pop(), n)
            }
            None => (None, None),
        };
        self.cache = Some(Cache {
            f_r: f_r.clone(),
            f_c: f_c.clone(),
            norms,
            embedding: embedding.clone(),
            gate: gate.clone(),
            rec_map,
            cls_map,
            branch_dims,
            has_disc: disc_prev.is_some(),
        });
        Ok(ModelOutputs {
            logits3,
            logits2,
            disc_prev,
            disc_next,
            embedding,
            fused,
            features: StreamFeatures { f_r, f_c, gate },
        })
    }

    /// Gradients of the pooled stream features from the three-class head
    /// (and the gate, when present) plus explicit gate-weight gradients.
    fn head_backward(&mut self, d_logits3: &Matrix, d_gate: Option<&Vec<[f64; 2]>>) -> Result<(Option<Matrix>, Matrix)> {
        let cache = self.cache.as_ref().ok_or(Error::Tensor(tsccn_nn::Error::NoCache("Tsccn")))?;
        let d_fused = self.head3.backward(d_logits3)?;
        let Some(f_r) = &cache.f_r else {
            return Ok((None, d_fused));
        };
        let (d_sr, d_sc) = d_fused.hsplit(f_r.cols)?;
        let Some(gate) = &cache.gate else {
            return Ok((Some(d_sr), d_sc));
        };
        let mut df_r = scale_rows(&d_sr, &gate.w_r);
        let mut df_c = scale_rows(&d_sc, &gate.w_c);
        let b = f_r.rows;
        let mut dz = Matrix::zeros(b, 2);
        for i in 0..b {
            let mut dw = [row_dot(&d_sr, f_r, i), row_dot(&d_sc, &cache.f_c, i)];
            if let Some(g) = d_gate {
                dw[0] += g[i][0];
                dw[1] += g[i][1];
            }
            for k in 0..2 {
                let s = sigmoid(gate.z.row(i)[k] as f64);
                dz.row_mut(i)[k] = (dw[k] * (1.0 - 2.0 * GATE_EPSILON) * s * (1.0 - s)) as f32;
            }
        }
        let d_in = self.gate.as_mut().expect("gated model has a gate").backward(&dz)?;
        let (a, c) = d_in.hsplit(f_r.cols)?;
        df_r.add_assign(&a)?;
        df_c.add_assign(&c)?;
        Ok((Some(df_r), df_c))
    }

    /// Accumulates parameter gradients for the given output gradients.
    pub fn backward(&mut self, grads: &OutputGrads) -> Result<()> {
        let cache = self.cache.clone().ok_or(Error::Tensor(tsccn_nn::Error::NoCache("Tsccn")))?;
        let b = cache.f_c.rows;
        let d3 = grads.logits3.clone().unwrap_or_else(|| Matrix::zeros(b, 3));
        let (df_r, mut df_c) = self.head_backward(&d3, grads.gate_weights.as_ref())?;
        if let Some(d2) = &grads.logits2 {
            df_c.add_assign(&self.head2.backward(d2)?)?;
        }
        if let Some(de) = &grads.embedding {
            for r in 0..b {
                let e = cache.embedding.row(r);
                let g = de.row(r);
                let dot: f32 = e.iter().zip(g).map(|(x, y)| x * y).sum();
                let n = cache.norms[r];
                for (k, v) in df_c.row_mut(r).iter_mut().enumerate() {
                    *v += (g[k] - e[k] * dot) / n;
                }
            }
        }
        let d_cls = GlobalAvgPool::spread(&df_c, cache.cls_map.dims())?;
        self.classification.backward(&d_cls, false)?;

        let Some(df_r) = df_r else {
            return Ok(());
        };
        let rec_dims = cache.rec_map.as_ref().expect("two-stream cache has a map").dims();
        let d_map = GlobalAvgPool::spread(&df_r, rec_dims)?;
        match self.recognition.as_mut().expect("two-stream model") {
            Recognition::Plain(bb) => {
                bb.backward(&d_map, false)?;
            }
            Recognition::Compare(cn) => {
                let d_sum = cn.trunk.backward(&d_map, true)?.expect("trunk returns its input gradient");
                let mut dh = [d_sum.clone(), d_sum.clone(), d_sum];
                if cache.has_disc {
                    let zeros = Matrix::zeros(b, 2);
                    let dp = grads.disc_prev.as_ref().unwrap_or(&zeros);
                    let dn = grads.disc_next.as_ref().unwrap_or(&zeros);
                    let d_in = self
                        .discriminator
                        .as_mut()
                        .expect("compare model has a discriminator")
                        .backward(&Matrix::vconcat(&[dp, dn])?)?;
                    let parts = d_in.vsplit(&[b, b])?;
                    let c = parts[0].cols / 2;
                    let (gc1, gp) = parts[0].hsplit(c)?;
                    let (gc2, gn) = parts[1].hsplit(c)?;
                    let dims = cache.branch_dims.expect("branch dims cached");
                    let mut gc = gc1;
                    gc.add_assign(&gc2)?;
                    for (slot, g) in dh.iter_mut().zip([gp, gc, gn]) {
                        slot.add_assign(&GlobalAvgPool::spread(&g, dims)?)?;
                    }
                }
                cn.branches_backward(dh)?;
            }
        }
        Ok(())
    }

    /// Softmax class probabilities from three-class logits.
    pub fn probabilities(logits3: &Matrix) -> Vec<[f64; 3]> {
        (0..logits3.rows)
            .map(|r| {
                let z = logits3.row(r);
                let m = z.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
                let e: Vec<f64> = z.iter().map(|&v| (v as f64 - m).exp()).collect();
                let s: f64 = e.iter().sum();
                [e[0] / s, e[1] / s, e[2] / s]
            })
            .collect()
    }

    /// Gradient-weighted activation maps of the last stage of each stream
    /// for the given target classes, normalized to [0, 1] and resized to the
    /// input size. Parameter gradients are left zeroed.
    pub fn class_activation_maps(&mut self, batch: &TripletBatch, targets: &[usize]) -> Result<Vec<CamSet>> {
        let b = batch.batch();
        if targets.len() != b || targets.iter().any(|&t| t >= 3) {
            return Err(Error::InvalidInput("one target class in 0..3 per sample required".into()));
        }
        self.forward(batch, Mode::Eval)?;
        let mut d3 = Matrix::zeros(b, 3);
        for (r, &t) in targets.iter().enumerate() {
            d3.row_mut(r)[t] = 1.0;
        }
        let (df_r, df_c) = self.head_backward(&d3, None)?;
        self.zero_grad();
        let cache = self.cache.as_ref().expect("forward just ran");
        let side = batch.current.height;
        let cls = cam_from(&cache.cls_map, &df_c, side);
        let rec = match (&cache.rec_map, df_r) {
            (Some(map), Some(df)) => Some(cam_from(map, &df, side)),
            _ => None,
        };
        Ok((0..b)
            .map(|i| CamSet {
                recognition: rec.as_ref().map(|r| r[i].clone()),
                classification: cls[i].clone(),
            })
            .collect())
    }

    /// Parameter names grouped by top-level module.
    pub fn parameter_groups(&self) -> BTreeMap<String, Vec<String>> {
        let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (name, _) in self.named_params() {
            let top = name.split('.').next().unwrap_or_default().to_string();
            groups.entry(top).or_default().push(name);
        }
        groups
    }
}

/// `ReLU(Σ_k α_k A_k)` with `α_k = dy/df_k / (h w)`, per sample.
fn cam_from(map: &FeatureMap, df: &Matrix, side: usize) -> Vec<Image> {
    let (c, b, h, w) = (map.channels, map.batch, map.height, map.width);
    let hw = (h * w) as f32;
    (0..b)
        .map(|i| {
            let mut cam = Image::zeros((h, w));
            for k in 0..c {
                let alpha = df.row(i)[k] / hw;
                for (dst, &a) in cam.iter_mut().zip(map.plane(k, i)) {
                    *dst += alpha * a;
                }
            }
            cam.mapv_inplace(|v| v.max(0.0));
            let max = cam.iter().fold(0.0f32, |a, &v| a.max(v));
            if max > 0.0 && max.is_finite() {
                cam.mapv_inplace(|v| v / max);
            } else {
                cam.fill(0.0);
            }
            imaging::resize_bilinear(&cam, side, side)
        })
        .collect()
}

impl Parameterized for Tsccn {
    fn visit_params<'a>(&'a self, _prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        match &self.recognition {
            Some(Recognition::Plain(bb)) => bb.visit_params("recognition.backbone", out),
            Some(Recognition::Compare(cn)) => cn.visit_params("recognition", out),
            None => {}
        }
        if let Some(d) = &self.discriminator {
            d.visit_params("recognition.discriminator", out);
        }
        self.classification.visit_params("classification.backbone", out);
        if let Some(g) = &self.gate {
            g.visit_params("gate", out);
        }
        self.head2.visit_params("heads.binary", out);
        self.head3.visit_params("heads.three_class", out);
    }

    fn visit_params_mut<'a>(&'a mut self, _prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        match &mut self.recognition {
            Some(Recognition::Plain(bb)) => bb.visit_params_mut("recognition.backbone", out),
            Some(Recognition::Compare(cn)) => cn.visit_params_mut("recognition", out),
            None => {}
        }
        if let Some(d) = &mut self.discriminator {
            d.visit_params_mut("recognition.discriminator", out);
        }
        self.classification.visit_params_mut("classification.backbone", out);
        if let Some(g) = &mut self.gate {
            g.visit_params_mut("gate", out);
        }
        self.head2.visit_params_mut("heads.binary", out);
        self.head3.visit_params_mut("heads.three_class", out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::collections::{BTreeMap, HashSet};

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            image_size: 16,
            base_width: 2,
            stem_kernel: 3,
            stem_stride: 1,
            stem_pool: true,
            discriminator_hidden: 6,
            gate_hidden: 5,
            ..NetworkConfig::default()
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, b: usize, s: usize) -> TripletBatch {
        let mut map = || FeatureMap::from_vec(1, b, s, s, (0..b * s * s).map(|_| rng.random::<f32>()).collect()).unwrap();
        TripletBatch {
            prev: map(),
            current: map(),
            next: map(),
        }
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn output_shapes_per_ablation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = random_batch(&mut rng, 3, 16);
        for a in Ablation::ALL {
            let mut m = Tsccn::new(&tiny(), a, 1).unwrap();
            let out = m.forward(&batch, Mode::Train).unwrap();
            assert_eq!((out.logits3.rows, out.logits3.cols), (3, 3));
            assert_eq!((out.logits2.rows, out.logits2.cols), (3, 2));
            assert_eq!(out.disc_prev.is_some(), a.compare());
            if let (Some(p), Some(n)) = (&out.disc_prev, &out.disc_next) {
                assert_eq!((p.rows, p.cols, n.rows, n.cols), (3, 2, 3, 2));
            }
            assert_eq!(out.features.gate.is_some(), a.gated());
            assert_eq!(out.features.f_r.is_some(), a.two_stream());
            assert!(out.logits3.is_finite() && out.embedding.is_finite());
            for r in 0..3 {
                let n: f32 = out.embedding.row(r).iter().map(|v| v * v).sum::<f32>().sqrt();
                assert!((n - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = random_batch(&mut rng, 2, 16);
        let mut m = Tsccn::new(&tiny(), Ablation::FullTsccn, 2).unwrap();
        let a = m.forward(&batch, Mode::Eval).unwrap();
        let b = m.forward(&batch, Mode::Eval).unwrap();
        assert_eq!(a, b);
        let (f1, l1, _) = m.classification_forward(&batch.current, Mode::Eval).unwrap();
        let (f2, l2, _) = m.classification_forward(&batch.current, Mode::Eval).unwrap();
        assert_eq!((f1.clone(), l1), (f2, l2));
        let half = batch.current.scale(0.5);
        let (f3, _, _) = m.classification_forward(&half, Mode::Eval).unwrap();
        assert_ne!(f1, f3);
    }

    #[test]
    fn zero_images_give_zero_fusion_input() {
        let mut m = Tsccn::new(&tiny(), Ablation::PlusCompare, 3).unwrap();
        let z = FeatureMap::zeros(1, 2, 16, 16);
        let (_, h) = m.recognition_forward(&z, &z, &z, Mode::Eval).unwrap();
        let sum = h[0].add(&h[1]).unwrap().add(&h[2]).unwrap();
        assert!(sum.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn branches_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = random_batch(&mut rng, 2, 16);
        let mut m = Tsccn::new(&tiny(), Ablation::FullTsccn, 5).unwrap();
        let (f, h) = m.recognition_forward(&batch.prev, &batch.current, &batch.next, Mode::Eval).unwrap();
        let (f_swapped, _) = m.recognition_forward(&batch.next, &batch.current, &batch.prev, Mode::Eval).unwrap();
        assert_ne!(f, f_swapped);
        let moved = batch.prev.scale(0.3);
        let (_, h2) = m.recognition_forward(&moved, &batch.current, &batch.next, Mode::Eval).unwrap();
        assert_ne!(h[0], h2[0]);
        assert_eq!((&h[1], &h[2]), (&h2[1], &h2[2]));
    }

    #[test]
    fn gate_midpoint_and_positivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut m = Tsccn::new(&tiny(), Ablation::FullTsccn, 7).unwrap();
        let d = tiny().feature_dim();
        let f_r = random_matrix(&mut rng, 4, d);
        let f_c = random_matrix(&mut rng, 4, d);
        let g1 = m.gate(&f_r, &f_c).unwrap();
        assert_eq!(g1, m.gate(&f_r, &f_c).unwrap());
        for i in 0..4 {
            assert!(g1.w_r[i] > 0.0 && g1.w_r[i] < 1.0 && g1.u[i].is_finite());
        }
        let big = Matrix::from_vec(1, 2, vec![1e30, -1e30]).unwrap();
        let g = GateOutput::from_logits(big);
        assert!(g.w_r[0] < 1.0 && g.w_c[0] > 0.0 && g.u[0].is_finite());
        let gate = m.gate_mlp_mut().unwrap();
        gate.fc2.weight.value.iter_mut().for_each(|v| *v = 0.0);
        gate.fc2.bias.as_mut().unwrap().value.iter_mut().for_each(|v| *v = 0.0);
        let mid = m.gate(&f_r, &f_c).unwrap();
        assert!(mid.w_r.iter().chain(&mid.w_c).all(|&w| (w - 0.5).abs() < 1e-12));
        assert!(mid.u.iter().all(|&u| (u - 1.0).abs() < 1e-6));
    }

    #[test]
    fn fusion_head_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m = Tsccn::new(&tiny(), Ablation::FullTsccn, 9).unwrap();
        let d = tiny().feature_dim();
        let f_c = random_matrix(&mut rng, 2, d);
        let a = m.fuse_and_classify(&random_matrix(&mut rng, 2, d), &f_c, &[0.0, 0.0], &[0.7, 0.2]).unwrap();
        let b = m.fuse_and_classify(&random_matrix(&mut rng, 2, d), &f_c, &[0.0, 0.0], &[0.7, 0.2]).unwrap();
        assert_eq!(a, b);
        m.head3_mut().bias.as_mut().unwrap().value.iter_mut().for_each(|v| *v = 0.0);
        let f_r = random_matrix(&mut rng, 2, d);
        let one = m.fuse_and_classify(&f_r, &f_c, &[0.3, 0.4], &[0.2, 0.1]).unwrap();
        let two = m.fuse_and_classify(&f_r, &f_c, &[0.6, 0.8], &[0.4, 0.2]).unwrap();
        for (x, y) in one.data.iter().zip(&two.data) {
            assert!((2.0 * x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn parameter_groups_are_disjoint() {
        let m = Tsccn::new(&tiny(), Ablation::FullTsccn, 0).unwrap();
        let groups = m.parameter_groups();
        let keys: Vec<&str> = groups.keys().map(String::as_str).collect();
        assert_eq!(keys, ["classification", "gate", "heads", "recognition"]);
        let mut seen = HashSet::new();
        let mut names = HashSet::new();
        for (name, p) in m.named_params() {
            assert!(seen.insert(p as *const Param), "{name} shared");
            assert!(names.insert(name));
        }
    }

    #[test]
    fn tied_branches_share_one_segment() {
        let cfg = NetworkConfig {
            tie_branches: true,
            ..tiny()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let batch = random_batch(&mut rng, 2, 16);
        let mut m = Tsccn::new(&cfg, Ablation::FullTsccn, 1).unwrap();
        assert!(m.compare_network().unwrap().is_tied());
        let out = m.forward(&batch, Mode::Train).unwrap();
        assert!(out.logits3.is_finite());
        assert!(m.named_params().iter().any(|(n, _)| n.starts_with("recognition.branch.")));
    }

    fn objective(out: &ModelOutputs, r: &OutputGrads) -> f64 {
        let dot = |a: &Matrix, b: &Option<Matrix>| {
            b.as_ref()
                .map_or(0.0, |b| a.data.iter().zip(&b.data).map(|(x, y)| *x as f64 * *y as f64).sum())
        };
        let mut total = dot(&out.logits3, &r.logits3) + dot(&out.logits2, &r.logits2) + dot(&out.embedding, &r.embedding);
        if let Some(p) = &out.disc_prev {
            total += dot(p, &r.disc_prev);
        }
        if let Some(n) = &out.disc_next {
            total += dot(n, &r.disc_next);
        }
        if let (Some(g), Some(rw)) = (&out.features.gate, &r.gate_weights) {
            for i in 0..g.w_r.len() {
                total += g.w_r[i] * rw[i][0] + g.w_c[i] * rw[i][1];
            }
        }
        total
    }

    /// Central difference, or `None` when halving the step changes the
    /// estimate (a ReLU or max-pool kink was crossed).
    fn guarded_difference(mut f: impl FnMut(f32) -> f64, h: f32) -> Option<f64> {
        let coarse = (f(h) - f(-h)) / (2.0 * h as f64);
        let fine = (f(h / 2.0) - f(-h / 2.0)) / h as f64;
        ((coarse - fine).abs() <= 1e-2 * (1.0 + fine.abs())).then_some(fine)
    }

    /// Parameters next to the outputs: heads, gate, discriminator and the
    /// final batch norm of every backbone segment.
    fn probed_params(m: &Tsccn) -> Vec<usize> {
        let names: Vec<String> = m.named_params().into_iter().map(|(n, _)| n).collect();
        let mut last_bn: BTreeMap<String, usize> = BTreeMap::new();
        for (i, n) in names.iter().enumerate() {
            if let (Some(at), true) = (n.find(".layer"), n.ends_with(".bn2.bias")) {
                let e = last_bn.entry(n[..at].to_string()).or_insert(i);
                if names[*e] < *n {
                    *e = i;
                }
            }
        }
        let mut out: Vec<usize> = names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with("heads.") || n.starts_with("gate.") || n.contains("discriminator"))
            .map(|(i, _)| i)
            .collect();
        out.extend(last_bn.values());
        out
    }

    #[test]
    fn backward_matches_finite_differences() {
        for a in Ablation::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(20 + a as u64);
            let b = 4;
            let batch = random_batch(&mut rng, b, 16);
            let mut m = Tsccn::new(&tiny(), a, 3).unwrap();
            let r = OutputGrads {
                logits3: Some(random_matrix(&mut rng, b, 3)),
                logits2: Some(random_matrix(&mut rng, b, 2)),
                disc_prev: a.compare().then(|| random_matrix(&mut rng, b, 2)),
                disc_next: a.compare().then(|| random_matrix(&mut rng, b, 2)),
                embedding: Some(random_matrix(&mut rng, b, tiny().feature_dim())),
                gate_weights: Some((0..b).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect()),
            };
            let base = m.clone();
            m.zero_grad();
            m.forward(&batch, Mode::Train).unwrap();
            m.backward(&r).unwrap();
            let params = m.named_params();
            let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
            for pi in probed_params(&m) {
                let p = params[pi].1;
                let step = (p.len() / 6).max(1);
                for k in (0..p.len()).step_by(step) {
                    let eval = |h: f32| {
                        let mut probe = base.clone();
                        probe.named_params_mut()[pi].1.value[k] += h;
                        objective(&probe.forward(&batch, Mode::Train).unwrap(), &r)
                    };
                    if let Some(n) = guarded_difference(eval, 2e-3) {
                        analytic.push(p.grad[k] as f64);
                        numeric.push(n);
                    }
                }
            }
            assert!(analytic.len() > 20, "{a}: too few probes");
            let diff: f64 = analytic.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = numeric.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-6);
            assert!(diff / scale < 2e-2, "{a}: relative error {}", diff / scale);
        }
    }

    #[test]
    fn gradient_reaches_every_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let batch = random_batch(&mut rng, 4, 16);
        let mut m = Tsccn::new(&tiny(), Ablation::FullTsccn, 4).unwrap();
        m.forward(&batch, Mode::Train).unwrap();
        m.backward(&OutputGrads {
            logits3: Some(random_matrix(&mut rng, 4, 3)),
            ..OutputGrads::default()
        })
        .unwrap();
        for prefix in ["recognition.branch_prev", "recognition.branch_current", "recognition.branch_next"] {
            let norm: f64 = m
                .named_params()
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(_, p)| p.grad_norm().powi(2))
                .sum();
            assert!(norm > 0.0, "{prefix}");
        }
    }

    #[test]
    fn cams_are_normalized_and_input_sized() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let batch = random_batch(&mut rng, 3, 16);
        for a in [Ablation::SingleStream, Ablation::FullTsccn] {
            let mut m = Tsccn::new(&tiny(), a, 4).unwrap();
            let cams = m.class_activation_maps(&batch, &[0, 1, 2]).unwrap();
            assert_eq!(cams.len(), 3);
            for c in &cams {
                assert_eq!(c.classification.dim(), (16, 16));
                assert!(c.classification.iter().all(|v| (0.0..=1.0).contains(v)));
                assert_eq!(c.recognition.is_some(), a.two_stream());
            }
            assert!(m.named_params().iter().all(|(_, p)| p.grad.iter().all(|&g| g == 0.0)));
        }
    }
}
