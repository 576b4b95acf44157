//! Dataset handling, splitting, batching, the training loop, and the
//! runtime/memory profiler.

pub mod dataset;
pub mod profile;
pub mod split;
pub mod train;

pub use dataset::{lag_frames, load_dataset, DatasetKind, LoadedDataset, Manifest};
pub use split::{lagged_pairs, split, PairIndex, SplitMode, SplitSpec, SplitUnit};
pub use train::{train, Adam, TrainConfig, TrainResult, TrainTask};
