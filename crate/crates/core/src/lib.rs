//! Voxel I/O, multilayer dense representations, the slice-encoder/ConvLSTM
//! descriptor network, adversarial training and retrieval evaluation.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod mdr;
pub mod network;
pub mod synth;
pub mod train;
pub mod voxel;

pub use dataset::{ShapeDataset, Split};
pub use error::{CoreError, Result};
pub use mdr::{compute_mdr, normalize_mdr, MdrSequence, NormalizedMdr};
pub use network::{build_model, Descriptor, Mode, Model, Readout};
pub use train::{Example, TrainConfig, TrainState};
pub use voxel::{load_binvox, save_binvox, VoxelGrid};
