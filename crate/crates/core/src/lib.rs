//! Emotion-atlas toolkit: block-design feature extraction, SVM-RFE selection,
//! connectivity-based atlas expansion, ALFF group statistics and
//! cost-sensitive classification.

pub mod atlas;
pub mod blocks;
pub mod classify;
pub mod features;
pub mod io;
pub mod rfe;
pub mod rng;
pub mod stats;
pub mod svm;
pub mod synth;
pub mod volume;
