use crate::tensor::{FeatureMap, Matrix};
use crate::{Error, Result};

/// Max pooling with implicit `-inf` padding.
#[derive(Clone, Debug)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    cache: Option<(Vec<usize>, [usize; 4])>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
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

    pub fn forward(&mut self, x: &FeatureMap) -> FeatureMap {
        let (oh, ow) = self.output_hw(x.height, x.width);
        let mut out = FeatureMap::zeros(x.channels, x.batch, oh, ow);
        let mut argmax = vec![0usize; out.data.len()];
        let hw = x.spatial_len();
        let (p, s) = (self.padding as isize, self.stride as isize);
        let mut o = 0;
        for plane in 0..x.channels * x.batch {
            let base = plane * hw;
            let src = &x.data[base..base + hw];
            for oy in 0..oh as isize {
                for ox in 0..ow as isize {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for ki in 0..self.kernel as isize {
                        let iy = oy * s + ki - p;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        for kj in 0..self.kernel as isize {
                            let ix = ox * s + kj - p;
                            if ix < 0 || ix >= x.width as isize {
                                continue;
                            }
                            let idx = iy as usize * x.width + ix as usize;
                            if src[idx] > best || best_idx == usize::MAX {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.data[o] = best;
                    argmax[o] = base + best_idx;
                    o += 1;
                }
            }
        }
        self.cache = Some((argmax, x.dims()));
        out
    }

    pub fn backward(&mut self, dy: &FeatureMap) -> Result<FeatureMap> {
        let (argmax, dims) = self.cache.as_ref().ok_or(Error::NoCache("MaxPool2d"))?;
        if argmax.len() != dy.data.len() {
            return Err(Error::Shape("max pool backward size mismatch".into()));
        }
        let [c, b, h, w] = *dims;
        let mut dx = FeatureMap::zeros(c, b, h, w);
        for (&i, &g) in argmax.iter().zip(&dy.data) {
            dx.data[i] += g;
        }
        Ok(dx)
    }
}

/// Spatial mean per channel: `[C, B, H, W]` to a `B x C` matrix.
#[derive(Clone, Debug, Default)]
pub struct GlobalAvgPool {
    dims: Option<[usize; 4]>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pool(x: &FeatureMap) -> Matrix {
        let hw = x.spatial_len();
        let mut out = Matrix::zeros(x.batch, x.channels);
        for c in 0..x.channels {
            for b in 0..x.batch {
                let s: f64 = x.plane(c, b).iter().map(|&v| v as f64).sum();
                out.data[b * x.channels + c] = (s / hw as f64) as f32;
            }
        }
        out
    }

    pub fn forward(&mut self, x: &FeatureMap) -> Matrix {
        self.dims = Some(x.dims());
        Self::pool(x)
    }

    pub fn backward(&mut self, dy: &Matrix) -> Result<FeatureMap> {
        let [c, b, h, w] = self.dims.ok_or(Error::NoCache("GlobalAvgPool"))?;
        Self::spread(dy, [c, b, h, w])
    }

    /// Gradient of the spatial mean: each position receives `dy / (h*w)`.
    pub fn spread(dy: &Matrix, [c, b, h, w]: [usize; 4]) -> Result<FeatureMap> {
        if dy.rows != b || dy.cols != c {
            return Err(Error::Shape(format!(
                "pool backward: {}x{} vs batch {b} channels {c}",
                dy.rows, dy.cols
            )));
        }
        let hw = h * w;
        let mut dx = FeatureMap::zeros(c, b, h, w);
        for ch in 0..c {
            for bi in 0..b {
                let g = dy.data[bi * c + ch] / hw as f32;
                let start = (ch * b + bi) * hw;
                dx.data[start..start + hw].iter_mut().for_each(|v| *v = g);
            }
        }
        Ok(dx)
    }
}
