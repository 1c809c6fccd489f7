//! Concept-circuit extraction for convolutional classifiers.
//!
//! The pipeline runs bottom-up: load a model ([`model_io`]), cut it into
//! image patches ([`patching`]), find the patches each neuron responds to
//! ([`concepts`]), score which lower neurons carry that response
//! ([`attribution`]), cluster neurons by the patches they share
//! ([`grouping`]) and assemble the result into a per-class circuit
//! ([`circuit`]). [`analysis`] holds the experiment harnesses and the
//! image-debugging metric. [`labeling`] captions groups with a multimodal
//! model and [`service`] serves circuits and what-if queries over HTTP.

pub mod analysis;
pub mod attribution;
pub mod circuit;
pub mod concepts;
pub mod config;
pub mod engine;
pub mod error;
pub mod graph;
pub mod grouping;
pub mod labeling;
pub mod model_io;
pub mod patching;
pub mod service;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
