use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::dataset::TripletDataset;
use crate::data::VertebraClass;
use crate::imaging::{self, Image};
use crate::network::Tsccn;
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VisualizationFiles {
    pub cams: Vec<PathBuf>,
    pub scatter_png: PathBuf,
    pub scatter_csv: PathBuf,
}

/// One point of the feature scatter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub patient_id: String,
    pub slice_id: String,
    pub position: u32,
    pub label: VertebraClass,
    pub predicted: VertebraClass,
    pub x: f64,
    pub y: f64,
}

pub fn class_color(c: VertebraClass) -> Rgb<u8> {
    match c {
        VertebraClass::Normal => Rgb([46, 160, 67]),
        VertebraClass::Benign => Rgb([31, 119, 180]),
        VertebraClass::Malignant => Rgb([214, 39, 40]),
    }
}

/// Projects rows onto their first two principal axes. Axes come from power
/// iteration on the centered data; a direction with no variance maps to 0.
pub fn pca_2d(rows: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let n = rows.len();
    let Some(d) = rows.first().map(Vec::len) else {
        return Vec::new();
    };
    let mut mean = vec![0.0; d];
    for r in rows {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n as f64);
    }
    let x: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let mut axes: Vec<Vec<f64>> = Vec::new();
    for k in 0..2 {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + ((i * 7 + k * 13) % 11) as f64 / 11.0).collect();
        let mut ok = false;
        for _ in 0..300 {
            for a in &axes {
                let p = dot(&v, a);
                v.iter_mut().zip(a).for_each(|(vi, ai)| *vi -= p * ai);
            }
            let mut next = vec![0.0; d];
            for row in &x {
                let s = dot(row, &v);
                next.iter_mut().zip(row).for_each(|(ni, ri)| *ni += s * ri);
            }
            for a in &axes {
                let p = dot(&next, a);
                next.iter_mut().zip(a).for_each(|(vi, ai)| *vi -= p * ai);
            }
            let norm = dot(&next, &next).sqrt();
            if !(norm > 1e-12) {
                ok = false;
                break;
            }
            next.iter_mut().for_each(|vi| *vi /= norm);
            ok = true;
            v = next;
        }
        axes.push(if ok { v } else { vec![0.0; d] });
    }
    x.iter().map(|r| (dot(r, &axes[0]), dot(r, &axes[1]))).collect()
}

/// White canvas with one filled square per point, colored by true class.
pub fn render_scatter(points: &[ScatterPoint], size: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let bound = |f: fn(&ScatterPoint) -> f64| {
        points
            .iter()
            .map(f)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let (x0, x1) = bound(|p| p.x);
    let (y0, y1) = bound(|p| p.y);
    let pad = 12.0;
    let span = size as f64 - 2.0 * pad;
    let place = |v: f64, lo: f64, hi: f64| if hi > lo { pad + (v - lo) / (hi - lo) * span } else { size as f64 / 2.0 };
    for p in points {
        let cx = place(p.x, x0, x1).round() as i64;
        let cy = (size as f64 - place(p.y, y0, y1)).round() as i64;
        for dy in -2..=2 {
            for dx in -2..=2 {
                let (px, py) = (cx + dx, cy + dy);
                if px >= 0 && py >= 0 && px < size as i64 && py < size as i64 {
                    img.put_pixel(px as u32, py as u32, class_color(p.label));
                }
            }
        }
    }
    img
}

fn heat_image(cam: &Image, base: &Image) -> RgbImage {
    let (h, w) = cam.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let c = imaging::heat_color(cam[[y as usize, x as usize]]).0;
        let g = base[[y as usize, x as usize]].clamp(0.0, 1.0);
        Rgb(std::array::from_fn(|k| (0.5 * c[k] as f32 + 0.5 * 255.0 * g).round() as u8))
    })
}

/// Activation maps for the predicted class of every sample and a 2-D
/// projection of the three-class head's input features.
pub fn visualize_model(model: &mut Tsccn, data: &TripletDataset, out_dir: &Path, batch_size: usize) -> Result<VisualizationFiles> {
    let cam_dir = out_dir.join("cams");
    std::fs::create_dir_all(&cam_dir).map_err(|e| Error::io(&cam_dir, e))?;
    let mut files = VisualizationFiles::default();
    let mut points = Vec::new();
    let mut features = Vec::new();
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk, None)?;
        let out = model.forward(&batch, tsccn_nn::Mode::Eval)?;
        let probs = Tsccn::probabilities(&out.logits3);
        let predicted: Vec<usize> = probs
            .iter()
            .map(|p| (0..3).fold(0, |best, k| if p[k] > p[best] { k } else { best }))
            .collect();
        for (r, &i) in chunk.iter().enumerate() {
            features.push(out.fused.row(r).iter().map(|&v| v as f64).collect::<Vec<f64>>());
            let s = &data.samples()[i];
            points.push(ScatterPoint {
                patient_id: s.patient_id.clone(),
                slice_id: s.slice_id.clone(),
                position: s.position,
                label: s.label(),
                predicted: VertebraClass::ALL[predicted[r]],
                x: 0.0,
                y: 0.0,
            });
        }
        let cams = model.class_activation_maps(&batch, &predicted)?;
        for (&i, cam) in chunk.iter().zip(&cams) {
            let s = &data.samples()[i];
            let stem = format!("{}_{}_{:02}", s.patient_id, s.slice_id, s.position);
            let path = cam_dir.join(format!("{stem}_classification.png"));
            imaging::save_rgb(&path, &heat_image(&cam.classification, &s.images[1]))?;
            files.cams.push(path);
            if let Some(rec) = &cam.recognition {
                let path = cam_dir.join(format!("{stem}_recognition.png"));
                imaging::save_rgb(&path, &heat_image(rec, &s.images[1]))?;
                files.cams.push(path);
            }
        }
    }
    for (p, (x, y)) in points.iter_mut().zip(pca_2d(&features)) {
        p.x = x;
        p.y = y;
    }
    files.scatter_csv = out_dir.join("embedding.csv");
    let mut w = csv::Writer::from_path(&files.scatter_csv).map_err(|e| Error::InvalidInput(e.to_string()))?;
    for p in &points {
        w.serialize(p).map_err(|e| Error::InvalidInput(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&files.scatter_csv, e))?;
    files.scatter_png = out_dir.join("embedding.png");
    imaging::save_rgb(&files.scatter_png, &render_scatter(&points, 512))?;
    Ok(files)
}
