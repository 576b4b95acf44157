//! Training objectives: the VAMP-2 score for slow-mode learning and the
//! state predictive information bottleneck (SPIB) for metastable-state
//! assignment, plus the k-means initializer that seeds SPIB labels.

pub mod kmeans;
pub mod spib;
pub mod vamp;

pub use kmeans::{kmeans, KMeansInit};
pub use spib::{SpibLossParts, SpibNet};
pub use vamp::{vamp2_from_covariances, vamp2_score, CovAccumulator, VampHead};
