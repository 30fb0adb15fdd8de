//! Residual backbone in the ResNet-18 layout: a stem followed by four stages of
//! two basic blocks each. A backbone can be cut into a prefix (stem plus the
//! first stages) and a suffix (remaining stages) that are run separately.

use std::ops::Range;

use rand::Rng;

use crate::activation::Relu;
use crate::conv::Conv2d;
use crate::norm::BatchNorm2d;
use crate::param::{join, Param, Parameterized};
use crate::pool::MaxPool2d;
use crate::tensor::FeatureMap;
use crate::{Mode, Result};

/// Shape of the residual backbone.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Width of the stem and first stage; later stages double it.
    pub base_width: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_pool: bool,
    pub blocks_per_stage: [usize; 4],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_width: 64,
            stem_kernel: 7,
            stem_stride: 2,
            stem_pool: true,
            blocks_per_stage: [2, 2, 2, 2],
        }
    }
}

impl BackboneConfig {
    pub const STAGES: usize = 4;

    pub fn stage_width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    fn stage_stride(stage: usize) -> usize {
        if stage == 0 {
            1
        } else {
            2
        }
    }

    /// Channels produced after running the stem and `stages` residual stages.
    pub fn channels_after(&self, stages: usize) -> usize {
        if stages == 0 {
            self.base_width
        } else {
            self.stage_width(stages - 1)
        }
    }

    /// Spatial size after the stem and `stages` residual stages for a square input.
    pub fn spatial_after(&self, input: usize, stages: usize) -> usize {
        let conv = |x: usize, k: usize, s: usize, p: usize| (x + 2 * p).saturating_sub(k) / s + 1;
        let mut x = conv(input, self.stem_kernel, self.stem_stride, self.stem_kernel / 2);
        if self.stem_pool {
            x = conv(x, 3, 2, 1);
        }
        for _ in 1..stages {
            x = conv(x, 3, 2, 1);
        }
        x
    }
}

#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    relu1: Relu,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub downsample: Option<(Conv2d, BatchNorm2d)>,
    relu_out: Relu,
}

impl BasicBlock {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, in_c: usize, out_c: usize, stride: usize) -> Self {
        let downsample = (stride != 1 || in_c != out_c).then(|| {
            (
                Conv2d::new(rng, in_c, out_c, 1, stride, 0, false),
                BatchNorm2d::new(out_c),
            )
        });
        Self {
            conv1: Conv2d::new(rng, in_c, out_c, 3, stride, 1, false),
            bn1: BatchNorm2d::new(out_c),
            relu1: Relu::new(),
            conv2: Conv2d::new(rng, out_c, out_c, 3, 1, 1, false),
            bn2: BatchNorm2d::new(out_c),
            downsample,
            relu_out: Relu::new(),
        }
    }

    pub fn forward(&mut self, x: &FeatureMap, mode: Mode) -> Result<FeatureMap> {
        let a = self.conv1.forward(x)?;
        let a = self.bn1.forward(&a, mode)?;
        let a = self.relu1.forward(&a);
        let a = self.conv2.forward(&a)?;
        let mut a = self.bn2.forward(&a, mode)?;
        match &mut self.downsample {
            Some((conv, bn)) => {
                let s = conv.forward(x)?;
                a.add_assign(&bn.forward(&s, mode)?)?;
            }
            None => a.add_assign(x)?,
        }
        Ok(self.relu_out.forward(&a))
    }

    pub fn backward(&mut self, dy: &FeatureMap) -> Result<FeatureMap> {
        let d = self.relu_out.backward(dy)?;
        let da = self.bn2.backward(&d)?;
        let da = self.conv2.backward(&da)?;
        let da = self.relu1.backward(&da)?;
        let da = self.bn1.backward(&da)?;
        let mut dx = self.conv1.backward(&da)?;
        match &mut self.downsample {
            Some((conv, bn)) => {
                let ds = bn.backward(&d)?;
                dx.add_assign(&conv.backward(&ds)?)?;
            }
            None => dx.add_assign(&d)?,
        }
        Ok(dx)
    }
}

impl Parameterized for BasicBlock {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.conv1.visit_params(&join(prefix, "conv1"), out);
        self.bn1.visit_params(&join(prefix, "bn1"), out);
        self.conv2.visit_params(&join(prefix, "conv2"), out);
        self.bn2.visit_params(&join(prefix, "bn2"), out);
        if let Some((conv, bn)) = &self.downsample {
            conv.visit_params(&join(prefix, "downsample.0"), out);
            bn.visit_params(&join(prefix, "downsample.1"), out);
        }
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.conv1.visit_params_mut(&join(prefix, "conv1"), out);
        self.bn1.visit_params_mut(&join(prefix, "bn1"), out);
        self.conv2.visit_params_mut(&join(prefix, "conv2"), out);
        self.bn2.visit_params_mut(&join(prefix, "bn2"), out);
        if let Some((conv, bn)) = &mut self.downsample {
            conv.visit_params_mut(&join(prefix, "downsample.0"), out);
            bn.visit_params_mut(&join(prefix, "downsample.1"), out);
        }
    }
}

/// Convolution, batch norm, ReLU and an optional 3x3/2 max pool.
#[derive(Clone, Debug)]
pub struct Stem {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    relu: Relu,
    pub pool: Option<MaxPool2d>,
}

impl Stem {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cfg: &BackboneConfig) -> Self {
        let k = cfg.stem_kernel;
        Self {
            conv: Conv2d::new(rng, cfg.in_channels, cfg.base_width, k, cfg.stem_stride, k / 2, false),
            bn: BatchNorm2d::new(cfg.base_width),
            relu: Relu::new(),
            pool: cfg.stem_pool.then(|| MaxPool2d::new(3, 2, 1)),
        }
    }

    pub fn forward(&mut self, x: &FeatureMap, mode: Mode) -> Result<FeatureMap> {
        let a = self.conv.forward(x)?;
        let a = self.bn.forward(&a, mode)?;
        let a = self.relu.forward(&a);
        Ok(match &mut self.pool {
            Some(p) => p.forward(&a),
            None => a,
        })
    }

    /// Backward through the stem. The image gradient is only formed on request.
    pub fn backward(&mut self, dy: &FeatureMap, need_input_grad: bool) -> Result<Option<FeatureMap>> {
        let d = match &mut self.pool {
            Some(p) => p.backward(dy)?,
            None => dy.clone(),
        };
        let d = self.relu.backward(&d)?;
        let d = self.bn.backward(&d)?;
        self.conv.backward_with(&d, need_input_grad)
    }
}

impl Parameterized for Stem {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.conv.visit_params(&join(prefix, "conv1"), out);
        self.bn.visit_params(&join(prefix, "bn1"), out);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.conv.visit_params_mut(&join(prefix, "conv1"), out);
        self.bn.visit_params_mut(&join(prefix, "bn1"), out);
    }
}

/// A contiguous slice of the backbone: optionally the stem, then a range of stages.
#[derive(Clone, Debug)]
pub struct ResidualSegment {
    pub stem: Option<Stem>,
    /// `(stage index, blocks)` for each stage in the segment.
    pub stages: Vec<(usize, Vec<BasicBlock>)>,
    out_channels: usize,
}

impl ResidualSegment {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cfg: &BackboneConfig, with_stem: bool, stages: Range<usize>) -> Self {
        assert!(stages.end <= BackboneConfig::STAGES, "backbone has four stages");
        let stem = with_stem.then(|| Stem::new(rng, cfg));
        let mut in_c = cfg.channels_after(stages.start);
        let mut built = Vec::new();
        for s in stages.clone() {
            let out_c = cfg.stage_width(s);
            let blocks = (0..cfg.blocks_per_stage[s])
                .map(|i| {
                    let stride = if i == 0 { BackboneConfig::stage_stride(s) } else { 1 };
                    let blk = BasicBlock::new(rng, in_c, out_c, stride);
                    in_c = out_c;
                    blk
                })
                .collect();
            built.push((s, blocks));
        }
        let out_channels = if stages.is_empty() {
            if with_stem {
                cfg.base_width
            } else {
                cfg.channels_after(stages.start)
            }
        } else {
            cfg.stage_width(stages.end - 1)
        };
        Self {
            stem,
            stages: built,
            out_channels,
        }
    }

    /// The whole backbone: stem and all four stages.
    pub fn full<R: Rng + ?Sized>(rng: &mut R, cfg: &BackboneConfig) -> Self {
        Self::new(rng, cfg, true, 0..BackboneConfig::STAGES)
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn is_identity(&self) -> bool {
        self.stem.is_none() && self.stages.is_empty()
    }

    pub fn forward(&mut self, x: &FeatureMap, mode: Mode) -> Result<FeatureMap> {
        let mut h = match &mut self.stem {
            Some(stem) => stem.forward(x, mode)?,
            None => x.clone(),
        };
        for (_, blocks) in &mut self.stages {
            for blk in blocks {
                h = blk.forward(&h, mode)?;
            }
        }
        Ok(h)
    }

    /// Returns the input gradient unless the segment starts at the image
    /// (stem present) and `need_input_grad` is false.
    pub fn backward(&mut self, dy: &FeatureMap, need_input_grad: bool) -> Result<Option<FeatureMap>> {
        let mut d = dy.clone();
        for (_, blocks) in self.stages.iter_mut().rev() {
            for blk in blocks.iter_mut().rev() {
                d = blk.backward(&d)?;
            }
        }
        match &mut self.stem {
            Some(stem) => stem.backward(&d, need_input_grad),
            None => Ok(Some(d)),
        }
    }
}

impl Parameterized for ResidualSegment {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        if let Some(stem) = &self.stem {
            stem.visit_params(&join(prefix, "stem"), out);
        }
        for (s, blocks) in &self.stages {
            for (i, blk) in blocks.iter().enumerate() {
                blk.visit_params(&join(prefix, &format!("layer{}.{i}", s + 1)), out);
            }
        }
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        if let Some(stem) = &mut self.stem {
            stem.visit_params_mut(&join(prefix, "stem"), out);
        }
        for (s, blocks) in self.stages.iter_mut() {
            let s = *s;
            for (i, blk) in blocks.iter_mut().enumerate() {
                blk.visit_params_mut(&join(prefix, &format!("layer{}.{i}", s + 1)), out);
            }
        }
    }
}
