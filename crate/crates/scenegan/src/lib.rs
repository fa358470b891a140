//! Conditional video generation with a multi-adversarial training scheme.
//!
//! A generator maps (noise, action embedding, object embedding, context
//! vector) to a short video clip. It trains against four discriminators:
//! per-frame, temporal-gradient, whole-video, and a relational discriminator
//! that scores spatio-temporal scene graphs of object layouts through a graph
//! convolutional network. Everything runs on a self-contained tensor engine
//! with reverse-mode automatic differentiation; no external ML runtime.
//!
//! The crate ships with a procedural moving-shapes video dataset and a
//! zero-shot compositional split: every (action, object) pair in the test set
//! is absent from training while each action and object appears individually.
//! Evaluation covers inception-style I/S/D scores, FID over classifier
//! features, and cross-domain classification experiments.
//!
//! Start with the runnable programs under `examples/`; the `scenegan` binary
//! wires the same library calls into a gen-data / split / train / sample /
//! eval / verify pipeline.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gan;
pub mod nn;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};
