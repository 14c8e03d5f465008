//! Deterministic federated-learning simulator built around invariant
//! dropout: stragglers train a sub-model that omits the neurons whose
//! weights have stopped changing on the faster clients.
//!
//! The crate is organised bottom-up:
//!
//! - [`nn`]: dense feed-forward network with exact backpropagation and SGD.
//! - [`data`]: synthetic datasets, CSV loading and client partitioning.
//! - [`dropout`]: random, ordered and invariant neuron masks, sub-model
//!   extraction and per-coordinate FedAvg merging.
//! - [`invariance`]: neuron invariance scores, majority voting and drop
//!   threshold calibration.
//! - [`simclient`]: simulated clients with local training and a linear
//!   epoch-time model.
//! - [`orchestrator`]: the synchronous control loop that profiles clients,
//!   picks sub-model rates and aggregates.
//! - [`analysis`]: keep probabilities and the variance bound for sparse
//!   gradient transmission.
//! - [`experiment`]: config parsing, metrics files and parameter sweeps.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod data;
pub mod dropout;
pub mod error;
pub mod experiment;
pub mod invariance;
pub mod nn;
pub mod orchestrator;
pub mod rng;
pub mod simclient;

pub use error::{FluidError, Result};
