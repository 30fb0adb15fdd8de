use rand::Rng;

use crate::gemm::sgemm;
use crate::init::{kaiming_normal_fan_out, uniform_fan_in};
use crate::param::{join, Param, Parameterized};
use crate::tensor::FeatureMap;
use crate::{Error, Result};

/// 2-D convolution over channel-major batches, lowered to one GEMM per call.
#[derive(Clone, Debug)]
pub struct Conv2d {
    /// `[out_channels, in_channels * kernel * kernel]`
    pub weight: Param,
    pub bias: Option<Param>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    cache: Option<ConvCache>,
}

#[derive(Clone, Debug)]
struct ConvCache {
    cols: Vec<f32>,
    batch: usize,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        assert!(kernel > 0 && stride > 0, "kernel and stride must be positive");
        let k = in_channels * kernel * kernel;
        let weight = Param::new(
            vec![out_channels, in_channels, kernel, kernel],
            kaiming_normal_fan_out(rng, out_channels * k, out_channels * kernel * kernel),
        );
        let bias = bias.then(|| Param::new(vec![out_channels], uniform_fan_in(rng, out_channels, k)));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let span = |x: usize| (x + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1;
        (span(h), span(w))
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col(&self, x: &FeatureMap, (oh, ow): (usize, usize)) -> Vec<f32> {
        if self.is_pointwise() {
            return x.data.clone();
        }
        let (b, h, w) = (x.batch, x.height, x.width);
        let n = b * oh * ow;
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let mut cols = vec![0.0f32; self.col_rows() * n];
        for c in 0..self.in_channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for bi in 0..b {
                        let src = x.plane(c, bi);
                        for oy in 0..oh {
                            let iy = (oy * s + ki) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                            let dst_row = &mut dst[(bi * oh + oy) * ow..(bi * oh + oy + 1) * ow];
                            for (ox, d) in dst_row.iter_mut().enumerate() {
                                let ix = (ox * s + kj) as isize - p as isize;
                                if ix >= 0 && ix < w as isize {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f32], batch: usize, (h, w): (usize, usize), (oh, ow): (usize, usize)) -> FeatureMap {
        if self.is_pointwise() {
            return FeatureMap::from_vec(self.in_channels, batch, h, w, cols.to_vec())
                .expect("pointwise col2im shape");
        }
        let n = batch * oh * ow;
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let mut dx = FeatureMap::zeros(self.in_channels, batch, h, w);
        let hw = h * w;
        for c in 0..self.in_channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * n..(row + 1) * n];
                    for bi in 0..batch {
                        let start = (c * batch + bi) * hw;
                        let plane = &mut dx.data[start..start + hw];
                        for oy in 0..oh {
                            let iy = (oy * s + ki) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                            let src_row = &src[(bi * oh + oy) * ow..(bi * oh + oy + 1) * ow];
                            for (ox, &g) in src_row.iter().enumerate() {
                                let ix = (ox * s + kj) as isize - p as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst_row[ix as usize] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&mut self, x: &FeatureMap) -> Result<FeatureMap> {
        if x.channels != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels, x.channels
            )));
        }
        let out_hw = self.output_hw(x.height, x.width);
        let cols = self.im2col(x, out_hw);
        let n = x.batch * out_hw.0 * out_hw.1;
        let kdim = self.col_rows();
        let mut out = FeatureMap::zeros(self.out_channels, x.batch, out_hw.0, out_hw.1);
        sgemm(
            self.out_channels,
            kdim,
            n,
            1.0,
            &self.weight.value,
            (kdim, 1),
            &cols,
            (n, 1),
            0.0,
            &mut out.data,
            (n, 1),
        );
        if let Some(bias) = &self.bias {
            for (c, &bv) in bias.value.iter().enumerate() {
                out.channel_mut(c).iter_mut().for_each(|v| *v += bv);
            }
        }
        self.cache = Some(ConvCache {
            cols,
            batch: x.batch,
            in_hw: (x.height, x.width),
            out_hw,
        });
        Ok(out)
    }

    /// Accumulates weight gradients; returns the input gradient when `need_input_grad`.
    pub fn backward_with(&mut self, dy: &FeatureMap, need_input_grad: bool) -> Result<Option<FeatureMap>> {
        let cache = self.cache.as_ref().ok_or(Error::NoCache("Conv2d"))?;
        let n = cache.batch * cache.out_hw.0 * cache.out_hw.1;
        if dy.channels != self.out_channels || dy.plane_len() != n {
            return Err(Error::Shape(format!(
                "conv backward: gradient {:?} does not match output",
                dy.dims()
            )));
        }
        let kdim = self.col_rows();
        // dW += dY · colsᵀ
        sgemm(
            self.out_channels,
            n,
            kdim,
            1.0,
            &dy.data,
            (n, 1),
            &cache.cols,
            (1, n),
            1.0,
            &mut self.weight.grad,
            (kdim, 1),
        );
        if let Some(bias) = &mut self.bias {
            for (c, g) in bias.grad.iter_mut().enumerate() {
                *g += dy.channel(c).iter().sum::<f32>();
            }
        }
        if !need_input_grad {
            return Ok(None);
        }
        // dcols = Wᵀ · dY
        let mut dcols = vec![0.0f32; kdim * n];
        sgemm(
            kdim,
            self.out_channels,
            n,
            1.0,
            &self.weight.value,
            (1, kdim),
            &dy.data,
            (n, 1),
            0.0,
            &mut dcols,
            (n, 1),
        );
        Ok(Some(self.col2im(&dcols, cache.batch, cache.in_hw, cache.out_hw)))
    }

    pub fn backward(&mut self, dy: &FeatureMap) -> Result<FeatureMap> {
        Ok(self
            .backward_with(dy, true)?
            .expect("input gradient requested"))
    }
}

impl Parameterized for Conv2d {
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
