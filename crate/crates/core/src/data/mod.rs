//! Bag data model, on-disk formats, synthetic generation, and splits.

pub mod bag;
pub mod manifest;
pub mod split;
pub mod synth;

pub use bag::{load_bag, save_bag, BagMeta, FeatureBag};
pub use manifest::{Dataset, DatasetManifest, ManifestEntry};
pub use split::{make_splits, Fold, SplitAssignment};
pub use synth::{synth_generate, SynthConfig, SyntheticDataset};
