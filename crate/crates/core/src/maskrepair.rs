//! Post-processing of coarse vertebra masks: drop under-segmented
//! components, fill missing vertebrae by copying a neighbor, crop patches.

use std::collections::VecDeque;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::imaging::{self, Image};
use crate::{Error, Result};

/// Half-open pixel box `[top, bottom) x [left, right)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl BBox {
    pub fn of_pixels(pixels: &[(usize, usize)]) -> Option<BBox> {
        let first = pixels.first()?;
        let mut b = BBox {
            top: first.0,
            left: first.1,
            bottom: first.0 + 1,
            right: first.1 + 1,
        };
        for &(r, c) in pixels {
            b.top = b.top.min(r);
            b.left = b.left.min(c);
            b.bottom = b.bottom.max(r + 1);
            b.right = b.right.max(c + 1);
        }
        Some(b)
    }

    pub fn height(&self) -> usize {
        self.bottom.saturating_sub(self.top)
    }

    pub fn width(&self) -> usize {
        self.right.saturating_sub(self.left)
    }

    pub fn is_empty(&self) -> bool {
        self.height() == 0 || self.width() == 0
    }

    /// Grows each side by `fraction` of the box size along that axis,
    /// without clipping; coordinates may be negative.
    pub fn expanded(&self, fraction: f64) -> (i64, i64, i64, i64) {
        let dy = (fraction * self.height() as f64).round() as i64;
        let dx = (fraction * self.width() as f64).round() as i64;
        (
            self.top as i64 - dy,
            self.left as i64 - dx,
            self.bottom as i64 + dy,
            self.right as i64 + dx,
        )
    }

    /// [`BBox::expanded`] clipped to an `h x w` image.
    pub fn expand_clipped(&self, fraction: f64, h: usize, w: usize) -> BBox {
        let (t, l, b, r) = self.expanded(fraction);
        let clip = |v: i64, hi: usize| v.clamp(0, hi as i64) as usize;
        BBox {
            top: clip(t, h),
            left: clip(l, w),
            bottom: clip(b, h),
            right: clip(r, w),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub id: usize,
    #[serde(skip)]
    pub pixels: Vec<(usize, usize)>,
    pub bbox: BBox,
    /// `(row, column)`
    pub centroid: (f64, f64),
    pub area: usize,
}

impl Component {
    pub fn from_pixels(id: usize, pixels: Vec<(usize, usize)>) -> Option<Component> {
        let bbox = BBox::of_pixels(&pixels)?;
        let n = pixels.len() as f64;
        let cy = pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n;
        let cx = pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n;
        Some(Component {
            id,
            area: pixels.len(),
            pixels,
            bbox,
            centroid: (cy, cx),
        })
    }
}

/// Foreground pixels split into 8-connected components.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledMask {
    pub height: usize,
    pub width: usize,
    pub components: Vec<Component>,
}

impl LabeledMask {
    pub fn from_mask(mask: &Array2<bool>) -> Self {
        let (height, width) = mask.dim();
        Self {
            height,
            width,
            components: label_components(mask),
        }
    }

    pub fn mask(&self) -> Array2<bool> {
        let mut m = Array2::from_elem((self.height, self.width), false);
        for c in &self.components {
            for &p in &c.pixels {
                m[p] = true;
            }
        }
        m
    }
}

/// 8-connected components in raster order of their first pixel.
pub fn label_components(mask: &Array2<bool>) -> Vec<Component> {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            if !mask[[r, c]] || seen[[r, c]] {
                continue;
            }
            seen[[r, c]] = true;
            queue.push_back((r, c));
            let mut pixels = Vec::new();
            while let Some((y, x)) = queue.pop_front() {
                pixels.push((y, x));
                for ny in y.saturating_sub(1)..(y + 2).min(h) {
                    for nx in x.saturating_sub(1)..(x + 2).min(w) {
                        if mask[[ny, nx]] && !seen[[ny, nx]] {
                            seen[[ny, nx]] = true;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
            pixels.sort_unstable();
            out.push(Component::from_pixels(out.len(), pixels).expect("non-empty component"));
        }
    }
    out
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

/// Drops components whose area is below `fraction` of the median area.
/// Returns the surviving mask and the removed components.
pub fn remove_small_components(mask: &LabeledMask, fraction: f64) -> (LabeledMask, Vec<Component>) {
    let mut areas: Vec<f64> = mask.components.iter().map(|c| c.area as f64).collect();
    let Some(med) = median(&mut areas) else {
        log::warn!("empty mask: nothing to remove");
        return (mask.clone(), Vec::new());
    };
    let threshold = fraction * med;
    let (keep, removed): (Vec<Component>, Vec<Component>) =
        mask.components.iter().cloned().partition(|c| c.area as f64 >= threshold);
    (
        LabeledMask {
            height: mask.height,
            width: mask.width,
            components: keep,
        },
        removed,
    )
}

/// Dominant principal direction of the points, oriented top to bottom.
pub fn spine_axis(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    if points.len() < 2 {
        return (1.0, 0.0);
    }
    let my = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mx = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut syy, mut sxx, mut sxy) = (0.0, 0.0, 0.0);
    for &(y, x) in points {
        syy += (y - my) * (y - my);
        sxx += (x - mx) * (x - mx);
        sxy += (y - my) * (x - mx);
    }
    // principal eigenvector of [[syy, sxy], [sxy, sxx]]
    let theta = 0.5 * (2.0 * sxy).atan2(syy - sxx);
    let (mut dy, mut dx) = (theta.cos(), theta.sin());
    if dy < 0.0 || (dy == 0.0 && dx < 0.0) {
        dy = -dy;
        dx = -dx;
    }
    (dy, dx)
}

/// Components sorted by their projection onto the spine axis.
pub fn order_along_spine(components: &[Component]) -> Vec<Component> {
    let pts: Vec<(f64, f64)> = components.iter().map(|c| c.centroid).collect();
    let (ay, ax) = spine_axis(&pts);
    let mut sorted = components.to_vec();
    sorted.sort_by(|a, b| {
        let pa = a.centroid.0 * ay + a.centroid.1 * ax;
        let pb = b.centroid.0 * ay + b.centroid.1 * ax;
        pa.total_cmp(&pb)
    });
    sorted
}

/// Missing vertebrae between sorted neighbors `after` and `after + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapSlot {
    pub after: usize,
    pub missing: usize,
    pub spacing: f64,
    /// Interpolated centroids of the missing bodies.
    pub positions: Vec<(f64, f64)>,
}

/// `(index, missing count)` for each spacing above `factor` times the median.
pub fn gaps_from_spacings(spacings: &[f64], factor: f64) -> Vec<(usize, usize)> {
    let mut sorted = spacings.to_vec();
    let Some(med) = median(&mut sorted) else {
        return Vec::new();
    };
    spacings
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > factor * med)
        .map(|(i, &s)| (i, ((s / med).round() as usize).saturating_sub(1)))
        .filter(|&(_, m)| m > 0)
        .collect()
}

/// Gaps between consecutive centroids (already in spine order).
pub fn infer_gaps(centroids: &[(f64, f64)], factor: f64) -> Vec<GapSlot> {
    if centroids.len() < 2 {
        log::warn!("fewer than two components: no gaps inferred");
        return Vec::new();
    }
    let spacings: Vec<f64> = centroids
        .windows(2)
        .map(|p| (p[1].0 - p[0].0).hypot(p[1].1 - p[0].1))
        .collect();
    gaps_from_spacings(&spacings, factor)
        .into_iter()
        .map(|(i, missing)| {
            let (a, b) = (centroids[i], centroids[i + 1]);
            let positions = (1..=missing)
                .map(|k| {
                    let t = k as f64 / (missing + 1) as f64;
                    (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t)
                })
                .collect();
            GapSlot {
                after: i,
                missing,
                spacing: spacings[i],
                positions,
            }
        })
        .collect()
}

/// Copies the neighbor nearest to `target` (first on ties) so that its
/// centroid lands on `target`, dropping pixels outside `h x w`.
pub fn synthesize_mask(target: (f64, f64), neighbors: &[&Component], h: usize, w: usize, id: usize) -> Result<Component> {
    let dist = |c: &Component| (c.centroid.0 - target.0).hypot(c.centroid.1 - target.1);
    let source = neighbors
        .iter()
        .copied()
        .reduce(|best, c| if dist(c) < dist(best) { c } else { best })
        .ok_or_else(|| Error::InvalidInput("gap has no neighboring component to copy".into()))?;
    let dy = (target.0 - source.centroid.0).round() as i64;
    let dx = (target.1 - source.centroid.1).round() as i64;
    let pixels: Vec<(usize, usize)> = source
        .pixels
        .iter()
        .filter_map(|&(r, c)| {
            let (nr, nc) = (r as i64 + dy, c as i64 + dx);
            (nr >= 0 && nc >= 0 && nr < h as i64 && nc < w as i64).then_some((nr as usize, nc as usize))
        })
        .collect();
    Component::from_pixels(id, pixels)
        .ok_or_else(|| Error::InvalidInput("synthesized component falls outside the image".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepairParams {
    pub small_area_fraction: f64,
    pub gap_factor: f64,
    pub crop_margin: f64,
}

impl Default for RepairParams {
    fn default() -> Self {
        Self {
            small_area_fraction: 0.5,
            gap_factor: 1.6,
            crop_margin: 0.2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RepairLog {
    pub removed: Vec<Component>,
    pub synthesized: Vec<Component>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepairOutcome {
    /// Components in spine order.
    pub mask: LabeledMask,
    pub log: RepairLog,
}

pub fn repair(mask: &Array2<bool>, params: &RepairParams) -> Result<RepairOutcome> {
    let (h, w) = mask.dim();
    let labeled = LabeledMask::from_mask(mask);
    let mut log = RepairLog::default();
    if labeled.components.is_empty() {
        log.warnings.push("empty mask".into());
        return Ok(RepairOutcome { mask: labeled, log });
    }
    let (kept, removed) = remove_small_components(&labeled, params.small_area_fraction);
    log.removed = removed;
    let sorted = order_along_spine(&kept.components);
    if sorted.len() < 2 {
        log.warnings.push("fewer than two components: gaps not inferred".into());
    }
    let centroids: Vec<(f64, f64)> = sorted.iter().map(|c| c.centroid).collect();
    let gaps = infer_gaps(&centroids, params.gap_factor);
    let mut all = sorted.clone();
    for g in &gaps {
        let neighbors = [&sorted[g.after], &sorted[g.after + 1]];
        for &pos in &g.positions {
            let c = synthesize_mask(pos, &neighbors, h, w, 0)?;
            log.synthesized.push(c.clone());
            all.push(c);
        }
    }
    // relabel from the union so overlapping copies cannot double-count pixels
    let mut union = Array2::from_elem((h, w), false);
    for c in &all {
        for &p in &c.pixels {
            union[p] = true;
        }
    }
    let mut components = order_along_spine(&label_components(&union));
    for (i, c) in components.iter_mut().enumerate() {
        c.id = i;
    }
    Ok(RepairOutcome {
        mask: LabeledMask {
            height: h,
            width: w,
            components,
        },
        log,
    })
}

/// Crop box of a component: bounding box grown by `margin` per side, clipped.
pub fn crop_box(bbox: &BBox, margin: f64, h: usize, w: usize) -> Result<BBox> {
    if bbox.is_empty() {
        return Err(Error::InvalidInput(format!("degenerate box {bbox:?}")));
    }
    let b = bbox.expand_clipped(margin, h, w);
    if b.is_empty() {
        return Err(Error::InvalidInput(format!("box {bbox:?} lies outside the image")));
    }
    Ok(b)
}

/// One `side x side` patch per component, in the mask's component order.
pub fn crop_patches(image: &Image, mask: &LabeledMask, margin: f64, side: usize) -> Result<Vec<Image>> {
    let (h, w) = image.dim();
    if (h, w) != (mask.height, mask.width) {
        return Err(Error::InvalidInput(format!(
            "image {h}x{w} and mask {}x{} differ",
            mask.height, mask.width
        )));
    }
    mask.components
        .iter()
        .map(|c| {
            let b = crop_box(&c.bbox, margin, h, w)?;
            let crop = image.slice(ndarray::s![b.top..b.bottom, b.left..b.right]).to_owned();
            Ok(imaging::resize_bilinear(&crop, side, side))
        })
        .collect()
}

/// Intersection over union of two pixel sets.
pub fn iou(a: &[(usize, usize)], b: &[(usize, usize)]) -> f64 {
    let sa: std::collections::HashSet<_> = a.iter().collect();
    let inter = b.iter().filter(|p| sa.contains(p)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}
