//! Left-ventricle segmentation for cine MRI sequences.
//!
//! The pipeline crops each sequence to a motion-salient square, segments the
//! crop with a small fully convolutional network, keeps the roundest
//! connected component and scores the result against ground truth.

// `!(x > 0.0)` is used on purpose so NaN parameters are rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod fcn;
pub mod image;
pub mod metrics;
pub mod pipeline;
pub mod pnm;
pub mod postproc;
pub mod roi;

pub use error::{Error, Result};
pub use image::{BinaryMask, Image2D, ImageSequence};
