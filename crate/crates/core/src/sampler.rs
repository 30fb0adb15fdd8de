//! Batch composition: class-balanced index streams, augmentation and
//! batch-hard triplet mining.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{VertebraClass, NUM_CLASSES};
use crate::imaging::{self, Image};
use crate::{Error, Result};

pub const MAX_ROTATION_DEGREES: f64 = 15.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub augment: bool,
    pub oversample: bool,
    pub triplet_mining: bool,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self {
            batch_size: 64,
            augment: true,
            oversample: true,
            triplet_mining: true,
        }
    }
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.triplet_mining && self.batch_size < 2 {
            return Err(Error::Config("triplet mining needs batch_size >= 2".into()));
        }
        Ok(())
    }
}

enum Mode {
    /// Pick a present class uniformly, then a member uniformly.
    Balanced { by_class: Vec<Vec<usize>> },
    /// Reshuffled passes over all indices.
    Passes { order: Vec<usize>, cursor: usize },
}

/// Endless stream of sample indices.
pub struct IndexStream {
    rng: ChaCha8Rng,
    mode: Mode,
}

impl Iterator for IndexStream {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        match &mut self.mode {
            Mode::Balanced { by_class } => {
                let members = &by_class[self.rng.random_range(0..by_class.len())];
                Some(members[self.rng.random_range(0..members.len())])
            }
            Mode::Passes { order, cursor } => {
                if *cursor == order.len() {
                    order.shuffle(&mut self.rng);
                    *cursor = 0;
                }
                *cursor += 1;
                Some(order[*cursor - 1])
            }
        }
    }
}

/// Indices into `labels`. With oversampling every class occurs with
/// probability 1/3; without it indices are drawn in shuffled passes.
pub fn oversampled_index_stream(labels: &[VertebraClass], spec: &BatchSpec, seed: u64) -> Result<IndexStream> {
    spec.validate()?;
    if labels.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mode = if spec.oversample {
        let mut by_class = vec![Vec::new(); NUM_CLASSES];
        for (i, y) in labels.iter().enumerate() {
            by_class[y.index()].push(i);
        }
        if let Some(c) = by_class.iter().position(Vec::is_empty) {
            return Err(Error::ClassAbsent(c as u8));
        }
        Mode::Balanced { by_class }
    } else {
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut rng);
        Mode::Passes { order, cursor: 0 }
    };
    Ok(IndexStream { rng, mode })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    pub angle_degrees: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            hflip: false,
            vflip: false,
            angle_degrees: 0.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            hflip: rng.random_bool(0.5),
            vflip: rng.random_bool(0.5),
            angle_degrees: rng.random_range(-MAX_ROTATION_DEGREES..=MAX_ROTATION_DEGREES),
        }
    }

    pub fn apply(&self, img: &Image) -> Image {
        let mut out = if self.hflip {
            imaging::flip_horizontal(img)
        } else {
            img.clone()
        };
        if self.vflip {
            out = imaging::flip_vertical(&out);
        }
        if self.angle_degrees != 0.0 {
            out = imaging::rotate(&out, self.angle_degrees);
        }
        out.mapv_inplace(|v| v.clamp(0.0, 1.0));
        out
    }
}

pub fn augment(img: &Image, seed: u64) -> Image {
    AugmentParams::sample(&mut ChaCha8Rng::seed_from_u64(seed)).apply(img)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinedTriplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Batch-hard triples over fracture samples: per anchor, the farthest
/// same-class sample and the nearest sample of the other fracture class.
/// Normal samples never participate. Ties go to the lower index.
pub fn mine_triplets(embeddings: &[Vec<f64>], labels: &[VertebraClass]) -> Vec<MinedTriplet> {
    let n = embeddings.len().min(labels.len());
    let mut out = Vec::new();
    for a in 0..n {
        if !labels[a].is_fracture() {
            continue;
        }
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == a || !labels[j].is_fracture() {
                continue;
            }
            let d = sq_dist(&embeddings[a], &embeddings[j]);
            if labels[j] == labels[a] {
                if pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        if let (Some((p, _)), Some((q, _))) = (pos, neg) {
            out.push(MinedTriplet {
                anchor: a,
                positive: p,
                negative: q,
            });
        }
    }
    out
}
