//! Saliency-based target detection and segmentation for circular-scan
//! synthetic-aperture sonar (CSAS) imagery.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! * synthetic multi-aspect scene generation with ground-truth masks
//!   ([`scene`]) and color-by-aspect rendering ([`color`]);
//! * a multi-branch convolutional encoder-decoder segmenter — shared
//!   multi-scale encoder ([`encoder`]), dual supervised/unsupervised decoder
//!   branches with a content-gated merge ([`decoders`]) and single-pass
//!   mean-field refinement ([`refine`]);
//! * supervision-by-fusion training signals: superpixels, weak detectors and
//!   GLAD reliability/difficulty inference ([`fusion`]);
//! * a small pyramidal optical-flow network for multi-survey aggregation
//!   ([`flow`]);
//! * losses, the training loop and the Monte Carlo experiment harness
//!   ([`train`]), plus detection post-processing and metrics ([`evalpost`]).
//!
//! Everything runs on a self-contained f64 reverse-mode autodiff engine
//! ([`autodiff`]) so gradients can be validated against finite differences.

pub mod autodiff;
pub mod color;
pub mod config;
pub mod container;
pub mod dataset;
pub mod decoders;
pub mod encoder;
pub mod error;
pub mod evalpost;
pub mod flow;
pub mod fusion;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod refine;
pub mod scene;
pub mod seeding;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
