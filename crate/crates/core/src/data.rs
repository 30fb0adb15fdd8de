//! Patches, spine sequences, neighbor triplets and the on-disk manifest.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::imaging::{self, Image};
use crate::{Error, Result};

pub const NUM_CLASSES: usize = 3;

pub const MANIFEST_HEADER: [&str; 5] = ["patient_id", "slice_id", "position", "image_path", "label"];

/// Three-class vertebra label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum VertebraClass {
    Normal = 0,
    Benign = 1,
    Malignant = 2,
}

impl VertebraClass {
    pub const ALL: [VertebraClass; NUM_CLASSES] = [Self::Normal, Self::Benign, Self::Malignant];

    pub fn from_id(id: i64) -> Result<Self> {
        match id {
            0 => Ok(Self::Normal),
            1 => Ok(Self::Benign),
            2 => Ok(Self::Malignant),
            other => Err(Error::InvalidLabel(other)),
        }
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// 0 for normal, 1 for either fracture class.
    pub fn binary(self) -> u8 {
        u8::from(self != Self::Normal)
    }

    pub fn is_fracture(self) -> bool {
        self != Self::Normal
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Normal => "normal",
            Self::Benign => "benign",
            Self::Malignant => "malignant",
        }
    }
}

impl TryFrom<u8> for VertebraClass {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        Self::from_id(v as i64)
    }
}

impl From<VertebraClass> for u8 {
    fn from(c: VertebraClass) -> u8 {
        c.id()
    }
}

impl fmt::Display for VertebraClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.id())
    }
}

/// Maps a class id to the normal (0) / fracture (1) label.
pub fn binarize_label(y: i64) -> Result<u8> {
    VertebraClass::from_id(y).map(VertebraClass::binary)
}

/// One cropped, resized vertebra with its label and spine position.
#[derive(Clone, Debug, PartialEq)]
pub struct VertebraPatch {
    image: Image,
    pub label: VertebraClass,
    pub position: u32,
    pub patient_id: String,
}

impl VertebraPatch {
    pub fn new(image: Image, label: VertebraClass, position: u32, patient_id: impl Into<String>) -> Result<Self> {
        let (h, w) = image.dim();
        if h != w || h == 0 {
            return Err(Error::InvalidInput(format!("patch image must be square, got {h}x{w}")));
        }
        if let Some(v) = image.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("patch value {v} outside [0, 1]")));
        }
        Ok(Self {
            image,
            label,
            position,
            patient_id: patient_id.into(),
        })
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn side(&self) -> usize {
        self.image.nrows()
    }
}

/// Ordered patches of one patient slice.
#[derive(Clone, Debug, PartialEq)]
pub struct SpineSequence {
    patches: Vec<VertebraPatch>,
    pub slice_id: String,
}

impl SpineSequence {
    pub fn new(patches: Vec<VertebraPatch>, slice_id: impl Into<String>) -> Result<Self> {
        let first = patches
            .first()
            .ok_or_else(|| Error::InvalidInput("spine sequence must not be empty".into()))?;
        for pair in patches.windows(2) {
            if pair[1].position <= pair[0].position {
                return Err(Error::InvalidInput(format!(
                    "positions must be strictly increasing, got {} then {}",
                    pair[0].position, pair[1].position
                )));
            }
        }
        if let Some(p) = patches.iter().find(|p| p.patient_id != first.patient_id) {
            return Err(Error::InvalidInput(format!(
                "sequence mixes patients {} and {}",
                first.patient_id, p.patient_id
            )));
        }
        if let Some(p) = patches.iter().find(|p| p.side() != first.side()) {
            return Err(Error::InvalidInput(format!(
                "patch sides differ within a sequence: {} vs {}",
                first.side(),
                p.side()
            )));
        }
        Ok(Self {
            patches,
            slice_id: slice_id.into(),
        })
    }

    pub fn patches(&self) -> &[VertebraPatch] {
        &self.patches
    }

    pub fn patient_id(&self) -> &str {
        &self.patches[0].patient_id
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Previous, current and next vertebra of one position.
#[derive(Clone, Copy, Debug)]
pub struct NeighborTriplet<'a> {
    pub prev: &'a VertebraPatch,
    pub current: &'a VertebraPatch,
    pub next: &'a VertebraPatch,
}

impl NeighborTriplet<'_> {
    pub fn labels(&self) -> [VertebraClass; 3] {
        [self.prev.label, self.current.label, self.next.label]
    }

    pub fn binary_labels(&self) -> [u8; 3] {
        self.labels().map(VertebraClass::binary)
    }
}

/// `[prev, current, next]` indices for every position of an `n`-long sequence;
/// the ends reuse the center as their missing neighbor.
pub fn neighbor_indices(n: usize) -> Vec<[usize; 3]> {
    (0..n)
        .map(|i| [i.saturating_sub(1), i, (i + 1).min(n.saturating_sub(1))])
        .collect()
}

pub fn extract_triplets(seq: &SpineSequence) -> Vec<NeighborTriplet<'_>> {
    let p = seq.patches();
    neighbor_indices(p.len())
        .into_iter()
        .map(|[a, b, c]| NeighborTriplet {
            prev: &p[a],
            current: &p[b],
            next: &p[c],
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub slice_id: String,
    pub position: u32,
    /// Relative to the manifest's directory.
    pub image_path: PathBuf,
    pub label: VertebraClass,
}

#[derive(Debug, Deserialize)]
struct RawRow {
    patient_id: String,
    slice_id: String,
    position: String,
    image_path: String,
    label: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub split: Option<Split>,
    pub class_counts: BTreeMap<VertebraClass, usize>,
    /// Directory the image paths are resolved against.
    pub root: PathBuf,
}

fn tally(entries: &[ManifestEntry]) -> BTreeMap<VertebraClass, usize> {
    let mut counts = BTreeMap::new();
    for e in entries {
        *counts.entry(e.label).or_insert(0) += 1;
    }
    counts
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, split: Option<Split>, root: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, e) in entries.iter().enumerate() {
            if !seen.insert((&e.patient_id, &e.slice_id, e.position)) {
                return Err(Error::ManifestRow {
                    row: i + 1,
                    message: format!(
                        "duplicate entry ({}, {}, {})",
                        e.patient_id, e.slice_id, e.position
                    ),
                });
            }
        }
        Ok(Self {
            class_counts: tally(&entries),
            entries,
            split,
            root: root.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, class: VertebraClass) -> usize {
        self.class_counts.get(&class).copied().unwrap_or(0)
    }

    pub fn labels(&self) -> Vec<VertebraClass> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.image_path)
    }

    /// Keeps entries whose patient passes `keep`.
    pub fn filter_patients(&self, split: Option<Split>, keep: impl Fn(&str) -> bool) -> Result<Self> {
        let entries = self.entries.iter().filter(|e| keep(&e.patient_id)).cloned().collect();
        Self::new(entries, split, self.root.clone())
    }

    pub fn patients(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.entries.iter().map(|e| e.patient_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Partitions patients (never their slices) into train, val and test in
    /// proportion to `parts`, after a seeded shuffle of the sorted patient ids.
    pub fn split_by_patient(&self, parts: [usize; 3], seed: u64) -> Result<[DatasetManifest; 3]> {
        let total_parts: usize = parts.iter().sum();
        if total_parts == 0 {
            return Err(Error::Config("split proportions must not all be zero".into()));
        }
        let mut patients = self.patients();
        patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = patients.len();
        let n_train = (n as f64 * parts[0] as f64 / total_parts as f64).round() as usize;
        let n_val = ((n as f64 * parts[1] as f64 / total_parts as f64).round() as usize).min(n - n_train);
        let groups = [
            &patients[..n_train],
            &patients[n_train..n_train + n_val],
            &patients[n_train + n_val..],
        ];
        let make = |i: usize| {
            let set: HashSet<&str> = groups[i].iter().map(String::as_str).collect();
            self.filter_patients(Some(Split::ALL[i]), |p| set.contains(p))
        };
        Ok([make(0)?, make(1)?, make(2)?])
    }

    /// Writes the manifest as CSV. Image paths are written as stored.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(MANIFEST_HEADER).map_err(|e| csv_error(path, e))?;
        for e in &self.entries {
            let image_path = e.image_path.to_string_lossy().replace('\\', "/");
            w.write_record([
                e.patient_id.as_str(),
                e.slice_id.as_str(),
                &e.position.to_string(),
                &image_path,
                &e.label.to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Loads every image and groups the entries into sequences ordered by
    /// patient, slice and position. Images whose side differs from `side`
    /// are resized when `side` is given.
    pub fn load_sequences(&self, side: Option<usize>) -> Result<Vec<SpineSequence>> {
        let mut groups: BTreeMap<(&str, &str), Vec<&ManifestEntry>> = BTreeMap::new();
        for e in &self.entries {
            groups.entry((&e.patient_id, &e.slice_id)).or_default().push(e);
        }
        let mut out = Vec::with_capacity(groups.len());
        for ((_, slice), mut entries) in groups {
            entries.sort_by_key(|e| e.position);
            let mut patches = Vec::with_capacity(entries.len());
            for e in entries {
                let path = self.resolve(e);
                let mut img = imaging::load_gray(&path)?;
                if img.nrows() != img.ncols() {
                    return Err(Error::Image {
                        path,
                        message: format!("patch must be square, got {:?}", img.dim()),
                    });
                }
                if let Some(s) = side {
                    if img.nrows() != s {
                        img = imaging::resize_bilinear(&img, s, s);
                    }
                }
                patches.push(VertebraPatch::new(img, e.label, e.position, e.patient_id.clone())?);
            }
            out.push(SpineSequence::new(patches, slice)?);
        }
        Ok(out)
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidInput(format!("{}: {other:?}", path.display())),
    }
}

/// Split implied by a manifest file name such as `train.csv` or `val_manifest.csv`.
pub fn split_from_path(path: &Path) -> Option<Split> {
    let stem = path.file_stem()?.to_str()?.to_ascii_lowercase();
    Split::ALL.into_iter().find(|s| {
        stem == s.name() || stem.starts_with(&format!("{}_", s.name())) || stem.ends_with(&format!("_{}", s.name()))
    })
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim().is_empty() {
        return Err(Error::EmptyManifest);
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::ManifestRow {
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::ManifestRow {
            row: 0,
            message: format!("header must be {}", MANIFEST_HEADER.join(",")),
        });
    }
    let mut entries = Vec::new();
    for (i, rec) in reader.deserialize::<RawRow>().enumerate() {
        let row = i + 1;
        let bad = |message: String| Error::ManifestRow { row, message };
        let raw = rec.map_err(|e| bad(e.to_string()))?;
        let position = raw
            .position
            .parse::<u32>()
            .map_err(|_| bad(format!("position {:?} is not a nonnegative integer", raw.position)))?;
        let label_id = raw
            .label
            .parse::<i64>()
            .map_err(|_| bad(format!("label {:?} is not an integer", raw.label)))?;
        let label = VertebraClass::from_id(label_id).map_err(|e| bad(e.to_string()))?;
        if raw.patient_id.is_empty() || raw.slice_id.is_empty() || raw.image_path.is_empty() {
            return Err(bad("empty field".into()));
        }
        entries.push(ManifestEntry {
            patient_id: raw.patient_id,
            slice_id: raw.slice_id,
            position,
            image_path: PathBuf::from(raw.image_path),
            label,
        });
    }
    if entries.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::new(entries, split_from_path(path), root)
}
