//! Dense buffers used by the layers.
//!
//! Convolutional activations are stored channel-major as `[channels, batch, height, width]`.
//! With that layout a convolution over a whole batch is a single matrix product
//! (`weight[out, in*k*k] x cols[in*k*k, batch*h*w]`) whose result already has the
//! layout of the next activation, and per-channel statistics read contiguous memory.

use crate::{Error, Result};

/// A batch of feature maps in `[channels, batch, height, width]` order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            batch,
            height,
            width,
            data: vec![0.0; channels * batch * height * width],
        }
    }

    pub fn from_vec(
        channels: usize,
        batch: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let expected = channels * batch * height * width;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "feature map [{channels}, {batch}, {height}, {width}] needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            batch,
            height,
            width,
            data,
        })
    }

    /// Stacks single-channel images (row-major `height * width` each) into a batch.
    pub fn from_images<'a, I>(images: I, height: usize, width: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f32]>,
    {
        let mut data = Vec::new();
        let mut batch = 0;
        for img in images {
            if img.len() != height * width {
                return Err(Error::Shape(format!(
                    "image {batch} has {} values, expected {height}x{width}",
                    img.len()
                )));
            }
            data.extend_from_slice(img);
            batch += 1;
        }
        Self::from_vec(1, batch, height, width, data)
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.channels, self.batch, self.height, self.width]
    }

    /// Number of values in one channel plane (all samples).
    pub fn plane_len(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn spatial_len(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// The `height * width` plane of channel `c` for sample `b`.
    pub fn plane(&self, c: usize, b: usize) -> &[f32] {
        let hw = self.spatial_len();
        let start = (c * self.batch + b) * hw;
        &self.data[start..start + hw]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.dims() == other.dims()
    }

    fn check_same_shape(&self, other: &FeatureMap, op: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )))
        }
    }

    pub fn add(&self, other: &FeatureMap) -> Result<FeatureMap> {
        self.check_same_shape(other, "add")?;
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &FeatureMap) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: f32) -> FeatureMap {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= factor);
        out
    }

    /// Concatenates maps with identical channel and spatial sizes along the batch axis.
    pub fn concat_batch(parts: &[&FeatureMap]) -> Result<FeatureMap> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat_batch of nothing".into()))?;
        let (c, h, w) = (first.channels, first.height, first.width);
        for p in parts {
            if p.channels != c || p.height != h || p.width != w {
                return Err(Error::Shape(format!(
                    "concat_batch: {:?} vs {:?}",
                    first.dims(),
                    p.dims()
                )));
            }
        }
        let batch: usize = parts.iter().map(|p| p.batch).sum();
        let mut data = Vec::with_capacity(c * batch * h * w);
        for ch in 0..c {
            for p in parts {
                data.extend_from_slice(p.channel(ch));
            }
        }
        FeatureMap::from_vec(c, batch, h, w, data)
    }

    /// Inverse of [`FeatureMap::concat_batch`].
    pub fn split_batch(&self, sizes: &[usize]) -> Result<Vec<FeatureMap>> {
        if sizes.iter().sum::<usize>() != self.batch {
            return Err(Error::Shape(format!(
                "split_batch sizes {sizes:?} do not sum to batch {}",
                self.batch
            )));
        }
        let hw = self.spatial_len();
        let mut out: Vec<FeatureMap> = sizes
            .iter()
            .map(|&b| FeatureMap::zeros(self.channels, b, self.height, self.width))
            .collect();
        for ch in 0..self.channels {
            let src = self.channel(ch);
            let mut offset = 0;
            for (part, &b) in out.iter_mut().zip(sizes) {
                part.channel_mut(ch)
                    .copy_from_slice(&src[offset * hw..(offset + b) * hw]);
                offset += b;
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row-major matrix; rows index samples in a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `[a | b]` column-wise.
    pub fn hconcat(a: &Matrix, b: &Matrix) -> Result<Matrix> {
        if a.rows != b.rows {
            return Err(Error::Shape(format!(
                "hconcat: {} rows vs {} rows",
                a.rows, b.rows
            )));
        }
        let cols = a.cols + b.cols;
        let mut data = Vec::with_capacity(a.rows * cols);
        for r in 0..a.rows {
            data.extend_from_slice(a.row(r));
            data.extend_from_slice(b.row(r));
        }
        Matrix::from_vec(a.rows, cols, data)
    }

    /// Splits columns into `[.., left)` and `[left, ..)`.
    pub fn hsplit(&self, left: usize) -> Result<(Matrix, Matrix)> {
        if left > self.cols {
            return Err(Error::Shape(format!(
                "hsplit at {left} of {} columns",
                self.cols
            )));
        }
        let right = self.cols - left;
        let mut a = Matrix::zeros(self.rows, left);
        let mut b = Matrix::zeros(self.rows, right);
        for r in 0..self.rows {
            let row = self.row(r);
            a.row_mut(r).copy_from_slice(&row[..left]);
            b.row_mut(r).copy_from_slice(&row[left..]);
        }
        Ok((a, b))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vconcat(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map(|m| m.cols).unwrap_or(0);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(Error::Shape("vconcat: column counts differ".into()));
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Matrix::from_vec(rows, cols, data)
    }

    pub fn vsplit(&self, sizes: &[usize]) -> Result<Vec<Matrix>> {
        if sizes.iter().sum::<usize>() != self.rows {
            return Err(Error::Shape(format!(
                "vsplit sizes {sizes:?} do not sum to {} rows",
                self.rows
            )));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut offset = 0;
        for &n in sizes {
            let data = self.data[offset * self.cols..(offset + n) * self.cols].to_vec();
            out.push(Matrix::from_vec(n, self.cols, data)?);
            offset += n;
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "add_assign: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split_restores_parts() {
        let a = FeatureMap::from_vec(2, 1, 1, 2, vec![1., 2., 3., 4.]).unwrap();
        let b = FeatureMap::from_vec(2, 2, 1, 2, vec![5., 6., 7., 8., 9., 10., 11., 12.]).unwrap();
        let joined = FeatureMap::concat_batch(&[&a, &b]).unwrap();
        assert_eq!(joined.dims(), [2, 3, 1, 2]);
        assert_eq!(joined.channel(0), &[1., 2., 5., 6., 7., 8.]);
        let parts = joined.split_batch(&[1, 2]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn hconcat_hsplit() {
        let a = Matrix::from_vec(2, 1, vec![1., 2.]).unwrap();
        let b = Matrix::from_vec(2, 2, vec![3., 4., 5., 6.]).unwrap();
        let m = Matrix::hconcat(&a, &b).unwrap();
        assert_eq!(m.data, vec![1., 3., 4., 2., 5., 6.]);
        let (l, r) = m.hsplit(1).unwrap();
        assert_eq!((l, r), (a, b));
    }

    #[test]
    fn shape_errors_are_reported() {
        assert!(FeatureMap::from_vec(1, 1, 2, 2, vec![0.0; 3]).is_err());
        let a = FeatureMap::zeros(1, 1, 2, 2);
        let b = FeatureMap::zeros(1, 1, 2, 3);
        assert!(a.add(&b).is_err());
    }
}
