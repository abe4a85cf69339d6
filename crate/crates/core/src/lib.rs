//! History-aware multimodal sub-goal planning for embodied instruction
//! following.
//!
//! The crate is `no_std` (with `alloc`) so the numerical core can be embedded
//! anywhere; file formats, configuration and the command line live in the
//! `hapfi` companion crate.
//!
//! Layout, bottom-up:
//!
//! * [`tensor`], [`autodiff`], [`optim`], [`params`]: dense `f64` tensors,
//!   a define-by-run gradient tape and Adam.
//! * [`nn`]: linear layers, layer norm and pre-norm transformer blocks.
//! * [`encoders`]: patch encoders for RGB frames and box-class masks, the
//!   word tokenizer and the text encoder.
//! * [`history`]: the visual history window and the sub-goal history string.
//! * [`fusion`]: two-stage bidirectional cross-attention.
//! * [`heads`]: sub-goal vocabularies, classifier heads and the loss.
//! * [`model`]: the assembled planner.
//! * [`dataset`], [`world`], [`simulator`]: synthetic scenes and episodes,
//!   grid-world dynamics and the closed plan/act loop.
//! * [`trainer`]: teacher-forced training, evaluation and ablation grids.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod heads;
pub mod history;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod simulator;
pub mod tensor;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
pub use tensor::Tensor;
