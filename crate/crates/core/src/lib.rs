//! Detection-coupled unpaired image-to-image translation for suture landmarks.
//!
//! The crate implements the full two-domain pipeline:
//!
//! 1. **data** – samples, labelme-style annotation I/O, Gaussian heatmap
//!    rendering, augmentation, normalization, group-disjoint fold splits.
//! 2. **synth** – deterministic two-domain "suture phantom" generator so the
//!    whole pipeline runs without clinical data.
//! 3. **nn** – a small reverse-mode tape autograd over `ndarray` (f64), with
//!    the conv/norm/pool kernels, Adam, and a versioned checkpoint container.
//! 4. **detector** – U-Net landmark detector with a differentiable Gaussian
//!    filter and convolutional spatial soft-argmax head, trained with the
//!    MSE + soft-Dice point-segmentation loss at both output stages.
//! 5. **gan** – residual-block generators and PatchGAN discriminators with
//!    the adversarial / cycle / identity objectives.
//! 6. **detcyclegan** – the detection-consistency losses that couple frozen
//!    detectors into the GAN objective, plus the optional ablation terms.
//! 7. **engine** – training loops, plateau schedule, checkpoint/resume,
//!    dataset translation, dataset fusion with a leakage guard.
//! 8. **eval** – point extraction, greedy radius matching, PPV/TPR/F1,
//!    mask similarity, and per-fold aggregation.
//!
//! Everything is CPU-only, single-controller, and deterministic for a fixed
//! seed: two runs with the same config produce bit-identical metric history.

pub mod config;
pub mod data;
pub mod detcyclegan;
pub mod detector;
pub mod engine;
pub mod error;
pub mod eval;
pub mod gan;
pub mod nn;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
