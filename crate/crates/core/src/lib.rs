//! Learned motion signatures for 3D skeletal sequences.
//!
//! A recurrent encoder maps a skeleton sequence (joint positions plus
//! per-frame motion fields) to a fixed-length vector. It is trained as a
//! Siamese network with a contrastive objective whose pairs come from class
//! labels, from whole-sequence trajectory similarity, or from speed
//! augmentation. Signatures are stored in an exact nearest-neighbour index
//! for retrieval; a second encoder maps short windows onto the signature of
//! the sequence they were cut from.

pub mod error;
pub mod evaluation;
pub mod features;
pub mod index;
pub mod model;
pub mod motion_data;
pub mod par;
pub mod submotion;
pub mod training;

pub use error::{Error, Result};
