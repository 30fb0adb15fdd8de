//! Gray-scale raster helpers: PNG I/O, bilinear resampling, flips and rotation.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::Array2;

use crate::{Error, Result};

/// Row-major gray-scale image, values in `[0, 1]`.
pub type Image = Array2<f32>;

fn image_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads an 8- or 16-bit single-channel image, rescaled to `[0, 1]`.
pub fn load_gray(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
        other => {
            return Err(image_error(
                path,
                format!("expected a single-channel image, got {:?}", other.color()),
            ))
        }
    };
    Ok(Array2::from_shape_vec((h, w), data).expect("raster size"))
}

fn quantize(v: f32, max: f32) -> f32 {
    (v.clamp(0.0, 1.0) * max).round()
}

pub fn save_gray16(path: &Path, img: &Image) -> Result<()> {
    let (h, w) = img.dim();
    let raw: Vec<u16> = img.iter().map(|&v| quantize(v, 65535.0) as u16).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("raster size");
    buf.save(path).map_err(|e| image_error(path, e))
}

pub fn save_gray8(path: &Path, img: &Image) -> Result<()> {
    let (h, w) = img.dim();
    let raw: Vec<u8> = img.iter().map(|&v| quantize(v, 255.0) as u8).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(w as u32, h as u32, raw).expect("raster size");
    buf.save(path).map_err(|e| image_error(path, e))
}

pub fn save_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path).map_err(|e| image_error(path, e))
}

/// Reads a mask raster; any nonzero pixel is foreground.
pub fn load_mask(path: &Path) -> Result<Array2<bool>> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.into_luma16();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v > 0).collect();
    Ok(Array2::from_shape_vec((h as usize, w as usize), data).expect("raster size"))
}

pub fn save_mask(path: &Path, mask: &Array2<bool>) -> Result<()> {
    let (h, w) = mask.dim();
    let raw: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(w as u32, h as u32, raw).expect("raster size");
    buf.save(path).map_err(|e| image_error(path, e))
}

/// Bilinear sample at continuous pixel coordinates; `None` outside the grid.
pub fn sample_bilinear(img: &Image, y: f64, x: f64) -> Option<f32> {
    let (h, w) = img.dim();
    if !(y > -1e-9 && x > -1e-9 && y <= (h - 1) as f64 + 1e-9 && x <= (w - 1) as f64 + 1e-9) {
        return None;
    }
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = img[[y0, x0]] as f64 * (1.0 - fx) + img[[y0, x1]] as f64 * fx;
    let bottom = img[[y1, x0]] as f64 * (1.0 - fx) + img[[y1, x1]] as f64 * fx;
    Some((top * (1.0 - fy) + bottom * fy) as f32)
}

/// Resizes with align-corners bilinear interpolation.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Image {
    let (h, w) = img.dim();
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let scale = |n_in: usize, n_out: usize| {
        if n_out > 1 {
            (n_in - 1) as f64 / (n_out - 1) as f64
        } else {
            0.0
        }
    };
    let (sy, sx) = (scale(h, out_h), scale(w, out_w));
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        sample_bilinear(img, i as f64 * sy, j as f64 * sx).unwrap_or(0.0)
    })
}

pub fn flip_horizontal(img: &Image) -> Image {
    let mut out = img.clone();
    out.invert_axis(ndarray::Axis(1));
    out.as_standard_layout().into_owned()
}

pub fn flip_vertical(img: &Image) -> Image {
    let mut out = img.clone();
    out.invert_axis(ndarray::Axis(0));
    out.as_standard_layout().into_owned()
}

/// Rotates counter-clockwise about the image center; uncovered pixels are 0.
pub fn rotate(img: &Image, degrees: f64) -> Image {
    if degrees == 0.0 {
        return img.clone();
    }
    let (h, w) = img.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, c) = degrees.to_radians().sin_cos();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let (dy, dx) = (i as f64 - cy, j as f64 - cx);
        // inverse mapping of an image-space counter-clockwise rotation (y points down)
        let sx = cx + c * dx - s * dy;
        let sy = cy + s * dx + c * dy;
        sample_bilinear(img, sy, sx).unwrap_or(0.0)
    })
}

/// Maps `[0, 1]` to a blue-to-red color ramp.
pub fn heat_color(v: f32) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0);
    let r = (255.0 * (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0)) as u8;
    let g = (255.0 * (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0)) as u8;
    let b = (255.0 * (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0)) as u8;
    Rgb([r, g, b])
}
