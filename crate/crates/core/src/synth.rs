//! Procedural spine data: labeled vertebra patches and whole-slice masks.
//!
//! Fractures are drawn as a loss of body height (wedge-shaped for benign
//! collapse); malignancy as a patchy interior. Each patient has its own base
//! height, width and brightness, shared by all of its slices.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, ManifestEntry, SpineSequence, Split, VertebraClass, VertebraPatch};
use crate::imaging::{self, Image};
use crate::maskrepair::BBox;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub slices_per_patient: usize,
    pub vertebrae_per_slice: usize,
    /// Probabilities of normal, benign and malignant.
    pub class_ratio: [f64; 3],
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise_level: f64,
    pub seed: u64,
    pub image_size: usize,
    /// Scale of the between-patient spread of body height, width and
    /// brightness; 0 gives every patient the same anatomy.
    pub subject_variation: f64,
    pub masks: MaskConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 50,
            slices_per_patient: 3,
            vertebrae_per_slice: 8,
            class_ratio: [0.8, 0.12, 0.08],
            noise_level: 0.02,
            seed: 0,
            image_size: 224,
            subject_variation: 1.0,
            masks: MaskConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    /// Components removed per slice.
    pub deletions: usize,
    /// Components shrunk per slice.
    pub shrinks: usize,
    /// Area fraction kept by a shrunk component.
    pub shrink_factor: f64,
    /// Mean center-to-center distance of adjacent bodies, in pixels.
    pub spacing: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            deletions: 1,
            shrinks: 0,
            shrink_factor: 0.1,
            spacing: 26.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_patients == 0 || self.slices_per_patient == 0 || self.vertebrae_per_slice == 0 {
            return bad("n_patients, slices_per_patient and vertebrae_per_slice must be positive".into());
        }
        if self.class_ratio.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return bad(format!("class_ratio {:?} has a negative component", self.class_ratio));
        }
        if (self.class_ratio.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("class_ratio {:?} does not sum to 1", self.class_ratio));
        }
        if !(0.0..=0.2).contains(&self.noise_level) {
            return bad(format!("noise_level {} outside [0, 0.2]", self.noise_level));
        }
        if self.image_size < 8 {
            return bad(format!("image_size {} is below 8", self.image_size));
        }
        if !(0.0..=1.0).contains(&self.subject_variation) {
            return bad(format!("subject_variation {} outside [0, 1]", self.subject_variation));
        }
        let m = &self.masks;
        if !(m.shrink_factor > 0.0 && m.shrink_factor <= 1.0) {
            return bad(format!("shrink_factor {} outside (0, 1]", m.shrink_factor));
        }
        if !(m.spacing >= 12.0 && m.spacing.is_finite()) {
            return bad(format!("mask spacing {} is below 12 pixels", m.spacing));
        }
        Ok(())
    }
}

/// Generation parameters of one patch, written to the JSON sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchTruth {
    pub patient_id: String,
    pub slice_id: String,
    pub position: u32,
    pub label: VertebraClass,
    /// Posterior and anterior body heights as fractions of the patch side.
    pub height: f64,
    pub anterior_height: f64,
    pub width: f64,
    pub intensity: f64,
    pub collapse: f64,
    pub textured: bool,
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub sequences: Vec<SpineSequence>,
    pub manifest: DatasetManifest,
    pub truth: Vec<PatchTruth>,
}

/// Integer class counts for `n` items by largest remainder.
pub fn quota_counts(ratio: &[f64; 3], n: usize) -> [usize; 3] {
    let raw = ratio.map(|p| p * n as f64);
    let mut counts = raw.map(|x| x.floor() as usize);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>();
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratio[k] > 0.0 {
            counts[k] += 1;
            left -= 1;
        }
    }
    counts
}

struct Blob {
    /// Center relative to the body box, in [0, 1]².
    u: f64,
    v: f64,
    sigma: f64,
    amplitude: f64,
}

struct Vertebra {
    label: VertebraClass,
    height: f64,
    anterior: f64,
    width: f64,
    intensity: f64,
    collapse: f64,
    blobs: Vec<Blob>,
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").sample(rng)
}

fn patient_vertebrae<R: Rng>(rng: &mut R, cfg: &SynthConfig, labels: &[VertebraClass]) -> Vec<Vertebra> {
    let v = cfg.subject_variation;
    let base_h = 0.40 * (1.0 + v * rng.random_range(-0.3..0.3));
    let base_w = 0.62 * (1.0 + v * rng.random_range(-0.15..0.15));
    let base_i = 0.70 * (1.0 + v * rng.random_range(-0.2..0.2));
    let n = labels.len();
    labels
        .iter()
        .enumerate()
        .map(|(pos, &label)| {
            let trend = 1.0 + 0.05 * pos as f64 / (n.max(2) - 1) as f64;
            let height = base_h * trend * (1.0 + 0.015 * gauss(rng)).clamp(0.95, 1.05);
            let width = base_w * (1.0 + 0.015 * gauss(rng)).clamp(0.95, 1.05);
            let intensity = base_i * (1.0 + 0.02 * gauss(rng)).clamp(0.94, 1.06);
            let (collapse, anterior_frac, blobs) = match label {
                VertebraClass::Normal => (1.0, 1.0, Vec::new()),
                VertebraClass::Benign => (rng.random_range(0.4..0.7), rng.random_range(0.7..1.0), Vec::new()),
                VertebraClass::Malignant => {
                    let collapse = if rng.random_bool(0.5) { rng.random_range(0.4..0.7) } else { 1.0 };
                    let k = rng.random_range(4..7);
                    let blobs = (0..k)
                        .map(|i| Blob {
                            u: rng.random_range(0.15..0.85),
                            v: rng.random_range(0.15..0.85),
                            sigma: rng.random_range(0.10..0.22),
                            amplitude: if i % 2 == 0 { -1.0 } else { 1.0 } * rng.random_range(0.25..0.45),
                        })
                        .collect();
                    (collapse, 1.0, blobs)
                }
            };
            let h = height * collapse;
            Vertebra {
                label,
                height: h,
                anterior: h * anterior_frac,
                width,
                intensity,
                collapse,
                blobs,
            }
        })
        .collect()
}

const BACKGROUND: f64 = 0.08;

/// Rasterizes one body with 2x2 supersampled edges.
fn render_patch<R: Rng>(rng: &mut R, vt: &Vertebra, slice_offset: f64, cfg: &SynthConfig) -> Image {
    let s = cfg.image_size as f64;
    let width = vt.width * (1.0 - 0.06 * slice_offset.abs()) * s;
    let jitter = 1.0 + 0.01 * gauss(rng).clamp(-2.0, 2.0);
    let (post_h, ant_h) = (vt.height * s * jitter, vt.anterior * s * jitter);
    let intensity = vt.intensity * (1.0 - 0.05 * slice_offset.abs());
    let cx = s / 2.0 + 0.02 * s * gauss(rng).clamp(-2.0, 2.0);
    let cy = s / 2.0 + 0.02 * s * gauss(rng).clamp(-2.0, 2.0);
    let (xl, xr) = (cx - width / 2.0, cx + width / 2.0);
    // anterior side on the left
    let half_h = |x: f64| {
        let t = ((x - xl) / width).clamp(0.0, 1.0);
        (ant_h + (post_h - ant_h) * t) / 2.0
    };
    let inside = |y: f64, x: f64| x >= xl && x <= xr && (y - cy).abs() <= half_h(x);
    let amp_jitter: Vec<f64> = vt.blobs.iter().map(|_| 1.0 + 0.05 * gauss(rng)).collect();
    let texture = |y: f64, x: f64| {
        let u = (x - xl) / width;
        let hh = half_h(x).max(1e-9);
        let v = (y - (cy - hh)) / (2.0 * hh);
        vt.blobs
            .iter()
            .zip(&amp_jitter)
            .map(|(b, j)| {
                let d2 = (u - b.u).powi(2) + (v - b.v).powi(2);
                b.amplitude * j * (-d2 / (2.0 * b.sigma * b.sigma)).exp()
            })
            .sum::<f64>()
    };
    let n = cfg.image_size;
    let noise = Normal::new(0.0, cfg.noise_level.max(0.0)).expect("noise sd");
    Array2::from_shape_fn((n, n), |(i, j)| {
        let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
        let mut cover = 0.0;
        for (dy, dx) in [(-0.25, -0.25), (-0.25, 0.25), (0.25, -0.25), (0.25, 0.25)] {
            if inside(y + dy, x + dx) {
                cover += 0.25;
            }
        }
        let body = (intensity + texture(y, x)).clamp(0.0, 1.0);
        let mut val = BACKGROUND + cover * (body - BACKGROUND);
        if cfg.noise_level > 0.0 {
            val += noise.sample(rng);
        }
        val.clamp(0.0, 1.0) as f32
    })
}

fn patient_labels(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<VertebraClass> {
    let total = cfg.n_patients * cfg.vertebrae_per_slice;
    let counts = quota_counts(&cfg.class_ratio, total);
    let mut labels: Vec<VertebraClass> = VertebraClass::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&c, k)| std::iter::repeat_n(c, k))
        .collect();
    labels.shuffle(rng);
    labels
}

pub fn patient_id(p: usize) -> String {
    format!("P{p:04}")
}

pub fn image_rel_path(patient: &str, slice: &str, position: u32) -> PathBuf {
    PathBuf::from("images").join(format!("{patient}_{slice}_{position:02}.png"))
}

/// Generates all patches, the manifest and per-patch generation parameters.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let labels = patient_labels(cfg, &mut rng);
    let v = cfg.vertebrae_per_slice;
    let mut sequences = Vec::new();
    let mut entries = Vec::new();
    let mut truth = Vec::new();
    for p in 0..cfg.n_patients {
        let pid = patient_id(p);
        let vertebrae = patient_vertebrae(&mut rng, cfg, &labels[p * v..(p + 1) * v]);
        for s in 0..cfg.slices_per_patient {
            let sid = format!("s{s}");
            let offset = s as f64 - (cfg.slices_per_patient as f64 - 1.0) / 2.0;
            let mut patches = Vec::with_capacity(v);
            for (pos, vt) in vertebrae.iter().enumerate() {
                let img = render_patch(&mut rng, vt, offset, cfg);
                let position = pos as u32;
                patches.push(VertebraPatch::new(img, vt.label, position, pid.clone())?);
                entries.push(ManifestEntry {
                    patient_id: pid.clone(),
                    slice_id: sid.clone(),
                    position,
                    image_path: image_rel_path(&pid, &sid, position),
                    label: vt.label,
                });
                truth.push(PatchTruth {
                    patient_id: pid.clone(),
                    slice_id: sid.clone(),
                    position,
                    label: vt.label,
                    height: vt.height,
                    anterior_height: vt.anterior,
                    width: vt.width,
                    intensity: vt.intensity,
                    collapse: vt.collapse,
                    textured: !vt.blobs.is_empty(),
                });
            }
            sequences.push(SpineSequence::new(patches, sid)?);
        }
    }
    Ok(SynthDataset {
        sequences,
        manifest: DatasetManifest::new(entries, None, PathBuf::new())?,
        truth,
    })
}

pub fn generate(cfg: &SynthConfig) -> Result<(Vec<SpineSequence>, DatasetManifest)> {
    let d = generate_dataset(cfg)?;
    Ok((d.sequences, d.manifest))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentStatus {
    Intact,
    Shrunk,
    Deleted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthComponent {
    pub position: usize,
    pub status: ComponentStatus,
    /// Box, centroid and area of the uncorrupted body.
    pub bbox: BBox,
    pub centroid: (f64, f64),
    pub area: usize,
}

/// One slice: clean and corrupted masks, a gray image and per-body truth.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSample {
    pub patient_id: String,
    pub slice_id: String,
    pub image: Image,
    pub clean: Array2<bool>,
    pub corrupted: Array2<bool>,
    pub truth: Vec<TruthComponent>,
}

impl MaskSample {
    /// Pixels of the uncorrupted body at `position`.
    pub fn clean_component(&self, position: usize) -> Vec<(usize, usize)> {
        let b = self.truth[position].bbox;
        let mut out = Vec::new();
        // boxes of distinct bodies may overlap, so re-rasterize by nearest truth centroid
        for r in b.top..b.bottom {
            for c in b.left..b.right {
                if self.clean[[r, c]] && self.nearest_truth(r, c) == position {
                    out.push((r, c));
                }
            }
        }
        out
    }

    fn nearest_truth(&self, r: usize, c: usize) -> usize {
        let d = |t: &TruthComponent| (t.centroid.0 - r as f64).powi(2) + (t.centroid.1 - c as f64).powi(2);
        (0..self.truth.len())
            .min_by(|&a, &b| d(&self.truth[a]).total_cmp(&d(&self.truth[b])))
            .unwrap_or(0)
    }
}

struct Body {
    cy: f64,
    cx: f64,
    angle: f64,
    half_len: f64,
    half_wid: f64,
}

impl Body {
    fn contains(&self, y: f64, x: f64, scale: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let along = dy * c + dx * s;
        let across = -dy * s + dx * c;
        along.abs() <= self.half_len * scale && across.abs() <= self.half_wid * scale
    }

    fn extent(&self) -> f64 {
        self.half_len.hypot(self.half_wid)
    }
}

fn pick_corrupted<R: Rng>(rng: &mut R, v: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut candidates: Vec<usize> = (1..v.saturating_sub(1)).collect();
    candidates.shuffle(rng);
    let mut chosen: Vec<usize> = Vec::new();
    for c in candidates {
        if chosen.iter().all(|&o| o.abs_diff(c) > 1) {
            chosen.push(c);
            if chosen.len() == k {
                return Ok(chosen);
            }
        }
    }
    Err(Error::Config(format!(
        "cannot place {k} non-adjacent interior corruptions among {v} vertebrae"
    )))
}

fn rasterize(bodies: &[Body], scales: &[f64], h: usize, w: usize) -> Array2<bool> {
    let mut m = Array2::from_elem((h, w), false);
    for (b, &sc) in bodies.iter().zip(scales) {
        if sc <= 0.0 {
            continue;
        }
        let e = b.extent() + 1.0;
        let r0 = (b.cy - e).floor().max(0.0) as usize;
        let r1 = ((b.cy + e).ceil() as usize).min(h);
        let c0 = (b.cx - e).floor().max(0.0) as usize;
        let c1 = ((b.cx + e).ceil() as usize).min(w);
        for r in r0..r1 {
            for c in c0..c1 {
                if b.contains(r as f64 + 0.5, c as f64 + 0.5, sc) {
                    m[[r, c]] = true;
                }
            }
        }
    }
    m
}

/// Generates one mask slice per patient slice. Corrupted bodies are interior
/// and never adjacent to each other.
pub fn generate_masks(cfg: &SynthConfig) -> Result<Vec<MaskSample>> {
    cfg.validate()?;
    let mc = &cfg.masks;
    let v = cfg.vertebrae_per_slice;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d61_736b);
    let mut out = Vec::new();
    for p in 0..cfg.n_patients {
        for s in 0..cfg.slices_per_patient {
            let spacing = mc.spacing * (1.0 + 0.1 * cfg.subject_variation * rng.random_range(-1.0..1.0));
            let tilt = rng.random_range(-12.0f64..12.0).to_radians();
            let bend = rng.random_range(-0.25..0.25) * spacing;
            let phase = PI / (v.max(2) - 1) as f64;
            let mut bodies: Vec<Body> = (0..v)
                .map(|i| {
                    let t = i as f64 * spacing;
                    let lateral = bend * (phase * i as f64).sin();
                    let slope = bend * phase * (phase * i as f64).cos() / spacing;
                    Body {
                        cy: t * tilt.cos() - lateral * tilt.sin(),
                        cx: t * tilt.sin() + lateral * tilt.cos(),
                        angle: tilt + slope.atan(),
                        half_len: 0.31 * spacing * (1.0 + 0.04 * gauss(&mut rng).clamp(-2.0, 2.0)),
                        half_wid: 0.62 * spacing * (1.0 + 0.04 * gauss(&mut rng).clamp(-2.0, 2.0)),
                    }
                })
                .collect();
            let margin = 10.0;
            let min_y = bodies.iter().map(|b| b.cy - b.extent()).fold(f64::INFINITY, f64::min);
            let min_x = bodies.iter().map(|b| b.cx - b.extent()).fold(f64::INFINITY, f64::min);
            for b in &mut bodies {
                b.cy += margin - min_y;
                b.cx += margin - min_x;
            }
            let h = bodies.iter().map(|b| b.cy + b.extent()).fold(0.0, f64::max) + margin;
            let w = bodies.iter().map(|b| b.cx + b.extent()).fold(0.0, f64::max) + margin;
            let (h, w) = (h.ceil() as usize, w.ceil() as usize);

            let chosen = pick_corrupted(&mut rng, v, mc.deletions + mc.shrinks)?;
            let mut status = vec![ComponentStatus::Intact; v];
            for (k, &i) in chosen.iter().enumerate() {
                status[i] = if k < mc.deletions {
                    ComponentStatus::Deleted
                } else {
                    ComponentStatus::Shrunk
                };
            }
            let clean = rasterize(&bodies, &vec![1.0; v], h, w);
            let scales: Vec<f64> = status
                .iter()
                .map(|st| match st {
                    ComponentStatus::Intact => 1.0,
                    ComponentStatus::Shrunk => mc.shrink_factor.sqrt(),
                    ComponentStatus::Deleted => 0.0,
                })
                .collect();
            let corrupted = rasterize(&bodies, &scales, h, w);
            let truth = bodies
                .iter()
                .enumerate()
                .map(|(i, b)| {
                    let single = rasterize(std::slice::from_ref(b), &[1.0], h, w);
                    let px: Vec<(usize, usize)> =
                        single.indexed_iter().filter(|(_, &m)| m).map(|(ix, _)| ix).collect();
                    let n = px.len().max(1) as f64;
                    let cy = px.iter().map(|p| p.0 as f64).sum::<f64>() / n;
                    let cx = px.iter().map(|p| p.1 as f64).sum::<f64>() / n;
                    TruthComponent {
                        position: i,
                        status: status[i],
                        bbox: BBox::of_pixels(&px).unwrap_or(BBox { top: 0, left: 0, bottom: 0, right: 0 }),
                        centroid: (cy, cx),
                        area: px.len(),
                    }
                })
                .collect();
            let noise = Normal::new(0.0, cfg.noise_level.max(1e-12)).expect("noise sd");
            let image = Array2::from_shape_fn((h, w), |ix| {
                let base = if clean[ix] { 0.7 } else { BACKGROUND };
                let n = if cfg.noise_level > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                (base + n).clamp(0.0, 1.0) as f32
            });
            out.push(MaskSample {
                patient_id: patient_id(p),
                slice_id: format!("s{s}"),
                image,
                clean,
                corrupted,
                truth,
            });
        }
    }
    Ok(out)
}

/// Paths of the files written by [`write_dataset`].
#[derive(Clone, Debug)]
pub struct WrittenDataset {
    pub manifest: PathBuf,
    pub splits: Vec<(Split, PathBuf)>,
    pub sidecar: PathBuf,
    pub masks: PathBuf,
}

/// Writes images, `manifest.csv`, patient-level `train/val/test.csv`
/// (3:1:1), `truth.json`, and mask slices under `masks/`.
pub fn write_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<WrittenDataset> {
    let data = generate_dataset(cfg)?;
    let masks = generate_masks(cfg)?;
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for seq in &data.sequences {
        for p in seq.patches() {
            let path = out_dir.join(image_rel_path(&p.patient_id, &seq.slice_id, p.position));
            imaging::save_gray16(&path, p.image())?;
        }
    }
    let manifest = DatasetManifest::new(data.manifest.entries.clone(), None, out_dir)?;
    let manifest_path = out_dir.join("manifest.csv");
    manifest.write(&manifest_path)?;
    let mut splits = Vec::new();
    for m in manifest.split_by_patient([3, 1, 1], cfg.seed)? {
        let split = m.split.expect("split assigned");
        let path = out_dir.join(format!("{}.csv", split.name()));
        m.write(&path)?;
        splits.push((split, path));
    }
    let sidecar = out_dir.join("truth.json");
    let json = serde_json::to_string_pretty(&data.truth).expect("truth serializes");
    std::fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))?;

    let mask_dir = out_dir.join("masks");
    std::fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
    let mut mask_truth = Vec::new();
    for m in &masks {
        let stem = format!("{}_{}", m.patient_id, m.slice_id);
        imaging::save_mask(&mask_dir.join(format!("{stem}_mask.png")), &m.corrupted)?;
        imaging::save_mask(&mask_dir.join(format!("{stem}_clean.png")), &m.clean)?;
        imaging::save_gray16(&mask_dir.join(format!("{stem}_image.png")), &m.image)?;
        mask_truth.push(serde_json::json!({
            "patient_id": m.patient_id,
            "slice_id": m.slice_id,
            "components": m.truth,
        }));
    }
    let mask_json = mask_dir.join("truth.json");
    std::fs::write(&mask_json, serde_json::to_string_pretty(&mask_truth).expect("json"))
        .map_err(|e| Error::io(&mask_json, e))?;
    Ok(WrittenDataset {
        manifest: manifest_path,
        splits,
        sidecar,
        masks: mask_dir,
    })
}
