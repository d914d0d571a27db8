//! Two-stage strabismus screening on synthetic imagery.
//!
//! The pipeline detects the eye region of a face image with a small
//! position-sensitive fully convolutional detector, crops it, and classifies
//! the crop as strabismus or normal with a compact CNN. Everything here is
//! self-contained: a reverse-mode autodiff tape, the detector and classifier
//! stacks, a procedural data generator with ground truth, evaluation metrics,
//! and deterministic serialization. All arithmetic is double precision and
//! every run is reproducible from its seed.

pub mod classifier;
pub mod detect;
pub mod error;
pub mod metrics;
pub mod model_io;
pub mod psroi;
pub mod rng;
pub mod synth;
pub mod tensor;
