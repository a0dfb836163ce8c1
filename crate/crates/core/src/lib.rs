//! Desk-scale toolkit for studying how image-forensics detectors cope with a
//! stream of new generators.
//!
//! The pieces fit together like this:
//!
//! * [`corpus`] synthesizes a labeled corpus: procedural "real" photographs and
//!   several generator sources, each stamped with a parametric frequency-domain
//!   fingerprint and a release date.
//! * [`tensor`] is a small dense-tensor engine (forward + reverse mode) that is
//!   just big enough for the two detector architectures in [`detector`].
//! * [`online`] trains the whole-image detector progressively, one generator
//!   release at a time, checkpointing after every stage.
//! * [`metrics`] scores every checkpoint against every source and writes the
//!   generalization matrix (CSV / JSON / heatmaps).
//! * [`inpaint`] builds pixel-level training data (simulated inpaintings and
//!   CutMix composites) and trains/evaluates the dense mask predictor.
//! * [`augment`] holds the shared training-time augmentation chain, including
//!   an invisible block-DCT watermark.
//!
//! Everything is deterministic given a master seed: random state is derived
//! per sample via [`rng::derive_rng`], and batch work scheduled through
//! [`exec`] writes to disjoint outputs so thread count never changes results.

pub mod augment;
pub mod corpus;
pub mod detector;
pub mod dct;
pub mod error;
pub mod exec;
pub mod image;
pub mod inpaint;
pub mod metrics;
pub mod online;
pub mod rng;
pub mod spectrum;
pub mod tensor;

pub use error::{Error, Result};
