//! Decoupled prompt tuning for domain-incremental learning.
//!
//! A frozen ViT-style backbone is adapted to a stream of domains with two
//! kinds of key/value prefix prompts: one domain-specific prompt per domain,
//! retrieved at inference by FFT amplitude similarity, and one shared
//! domain-invariant prompt that is re-derived at every step by a graph
//! attention network trained on Fourier style-augmented data.

pub mod diffcore;
pub mod fourier;
pub mod raster;
pub mod backbone;
pub mod container;
pub mod error;
pub mod prompts;
pub mod gat;
pub mod datagen;
pub mod metrics;
pub mod trainer;
pub mod experiment;
