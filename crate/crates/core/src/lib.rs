//! Two-stream compare-and-contrast network for three-class vertebra
//! classification (normal, benign fracture, malignant fracture), with its
//! losses, metrics, synthetic data, mask repair and training engine.

pub mod data;
pub mod engine;
pub mod error;
pub mod imaging;
pub mod losses;
pub mod maskrepair;
pub mod metrics;
pub mod network;
pub mod sampler;
pub mod synth;

pub use data::{
    binarize_label, extract_triplets, load_manifest, DatasetManifest, ManifestEntry, NeighborTriplet, SpineSequence,
    Split, VertebraClass, VertebraPatch,
};
pub use error::{Error, Result};
pub use losses::{LossTerms, LossWeights};
pub use metrics::{ConfusionState, MacroMetrics, MetricsReport};
pub use network::{Ablation, ModelOutputs, NetworkConfig, StreamFeatures, Tsccn};
pub use sampler::BatchSpec;
pub use synth::SynthConfig;
