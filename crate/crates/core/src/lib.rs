// SPDX-License-Identifier: MIT OR Apache-2.0

//! # neuron-steer
//!
//! Trait-specific neuron localisation and sparse activation steering.
//!
//! The pipeline runs in three stages over contrastive activation dumps
//! (high-trait vs low-trait prompts, captured at the MLP down-projection
//! input of the last prompt token):
//!
//! 1. [`stats`]: per-layer steering vectors (mean difference) and per-neuron
//!    Cohen's d.
//! 2. [`select`]: keep neurons whose `|d|` clears `tau_d` *and* whose `|s|`
//!    sits above the layer's `q`-quantile, split into mutually exclusive
//!    high and low sets.
//! 3. [`intervene`]: turn the selection into a sparse additive edit plan
//!    (uniform or rank-weighted) and add it to hidden states at inference.
//!
//! [`toymodel`] supplies a seeded miniature gated-MLP decoder and a
//! planted-neuron generator for end-to-end checks, [`analysis`] the PCA,
//! census and scatter diagnostics, and [`dumpio`] the `DPNA` container.

#![forbid(unsafe_code)]

pub mod analysis;
pub mod cli;
pub mod dumpio;
pub mod error;
pub mod intervene;
pub mod select;
pub mod stats;
pub mod toymodel;

pub use dumpio::{read_dump, write_dump, ActivationDump, ActivationMatrix, Direction, LayerActivations, Trait};
pub use error::{Error, Result};
pub use intervene::{build_config, InterventionConfig, Mode, SteerDirection};
pub use select::{select_all, select_layer, NeuronSelection, SelectionParams};
pub use stats::{build_steering_vector, cohens_d, compute_layer_stats, LayerStats};
