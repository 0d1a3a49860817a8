//! Quality-aware image representations learned from rank-ordered distortion
//! triplets, with no-reference and full-reference scoring on top of them.
//!
//! The crate is organised along the processing pipeline:
//!
//! - [`distortion`]: the 20 synthetic distortion types, their five-level
//!   ladders and the grouping table used for cross-group combinations.
//! - [`triplet`]: enumeration of rank-ordered triplets and JSON-Lines manifests.
//! - [`encoder`]: the convolutional quality encoder, the triplet margin loss
//!   and the training loop.
//! - [`features`]: content and two-scale quality feature extraction and fusion.
//! - [`regression`]: the grid-searched linear epsilon-SVR head and the
//!   repeated train/test split protocol.
//! - [`fr`]: full-reference scoring by cosine similarity of quality features.
//! - [`eval`]: SRCC/PLCC, dataset tables, NR/FR/ablation evaluations and reports.
//! - [`pipeline`]: configuration and staged execution of the whole flow.
//!
//! Support modules: [`image`] (RGB buffers and PNG/JPEG I/O), [`corpus`]
//! (image sources), [`seed`] (labelled seed derivation), [`synth`]
//! (procedural images and toy MOS datasets) and [`error`].

pub mod corpus;
pub mod distortion;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod features;
pub mod fr;
pub mod image;
pub mod pipeline;
pub mod regression;
pub mod seed;
pub mod synth;
pub mod triplet;

pub use crate::error::{Error, ErrorClass, Result};
pub use crate::image::{psnr, ImageBuffer};
