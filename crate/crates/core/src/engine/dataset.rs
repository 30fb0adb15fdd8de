use crate::data::{extract_triplets, DatasetManifest, SpineSequence, VertebraClass};
use crate::imaging::Image;
use crate::network::TripletBatch;
use crate::sampler::AugmentParams;
use crate::{Error, Result};

/// One training sample: a vertebra and its two neighbors.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletSample {
    /// `[prev, current, next]`
    pub images: [Image; 3],
    pub labels: [VertebraClass; 3],
    pub patient_id: String,
    pub slice_id: String,
    pub position: u32,
}

impl TripletSample {
    pub fn label(&self) -> VertebraClass {
        self.labels[1]
    }
}

/// Neighbor triplets of every vertebra, held in memory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TripletDataset {
    samples: Vec<TripletSample>,
    side: usize,
}

impl TripletDataset {
    pub fn from_sequences(sequences: &[SpineSequence]) -> Result<Self> {
        let mut samples = Vec::new();
        let mut side = None;
        for seq in sequences {
            let s = seq.patches()[0].side();
            if *side.get_or_insert(s) != s {
                return Err(Error::InvalidInput(format!(
                    "sequence {}/{} has side {s}, expected {}",
                    seq.patient_id(),
                    seq.slice_id,
                    side.unwrap_or(s)
                )));
            }
            for t in extract_triplets(seq) {
                samples.push(TripletSample {
                    images: [t.prev.image().clone(), t.current.image().clone(), t.next.image().clone()],
                    labels: t.labels(),
                    patient_id: t.current.patient_id.clone(),
                    slice_id: seq.slice_id.clone(),
                    position: t.current.position,
                });
            }
        }
        let side = side.ok_or(Error::EmptyManifest)?;
        Ok(Self { samples, side })
    }

    /// Loads every image of the manifest, resized to `side`.
    pub fn from_manifest(manifest: &DatasetManifest, side: usize) -> Result<Self> {
        Self::from_sequences(&manifest.load_sequences(Some(side))?)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn samples(&self) -> &[TripletSample] {
        &self.samples
    }

    /// Labels of the current vertebrae.
    pub fn labels(&self) -> Vec<VertebraClass> {
        self.samples.iter().map(TripletSample::label).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let samples = indices
            .iter()
            .map(|&i| {
                self.samples
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::InvalidInput(format!("sample {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples, side: self.side })
    }

    /// Stacks the given samples. One augmentation per sample is applied to
    /// all three of its images so neighbors stay comparable.
    pub fn batch(&self, indices: &[usize], augment: Option<&[AugmentParams]>) -> Result<TripletBatch> {
        if let Some(a) = augment {
            if a.len() != indices.len() {
                return Err(Error::InvalidInput("one augmentation per sample required".into()));
            }
        }
        let mut owned: Vec<[Image; 3]> = Vec::new();
        if let Some(a) = augment {
            for (&i, p) in indices.iter().zip(a) {
                let s = &self.samples[i];
                owned.push([p.apply(&s.images[0]), p.apply(&s.images[1]), p.apply(&s.images[2])]);
            }
        }
        let refs: Vec<[&Image; 3]> = if augment.is_some() {
            owned.iter().map(|t| [&t[0], &t[1], &t[2]]).collect()
        } else {
            indices
                .iter()
                .map(|&i| {
                    let s = &self.samples[i];
                    [&s.images[0], &s.images[1], &s.images[2]]
                })
                .collect()
        };
        TripletBatch::from_images(&refs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn small() -> SynthConfig {
        SynthConfig {
            n_patients: 3,
            slices_per_patient: 2,
            vertebrae_per_slice: 5,
            image_size: 16,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn one_sample_per_vertebra() {
        let (seqs, manifest) = generate(&small()).unwrap();
        let ds = TripletDataset::from_sequences(&seqs).unwrap();
        assert_eq!(ds.len(), manifest.len());
        assert_eq!(ds.side(), 16);
        let first = &ds.samples()[0];
        assert_eq!(first.images[0], first.images[1]);
        let b = ds.batch(&[0, 3, 4], None).unwrap();
        assert_eq!(b.batch(), 3);
        assert_eq!(b.current.dims(), [1, 3, 16, 16]);
    }

    #[test]
    fn shared_augmentation_and_errors() {
        let (seqs, _) = generate(&small()).unwrap();
        let ds = TripletDataset::from_sequences(&seqs).unwrap();
        let p = AugmentParams {
            hflip: true,
            vflip: false,
            angle_degrees: 0.0,
        };
        let b = ds.batch(&[1], Some(&[p])).unwrap();
        let flipped = crate::imaging::flip_horizontal(&ds.samples()[1].images[0]);
        assert_eq!(b.prev.data, flipped.iter().copied().collect::<Vec<_>>());
        assert!(ds.batch(&[1, 2], Some(&[p])).is_err());
        assert!(ds.subset(&[ds.len()]).is_err());
        assert!(matches!(TripletDataset::from_sequences(&[]), Err(Error::EmptyManifest)));
    }
}
