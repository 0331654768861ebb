//! Desk-scale simulator for federated training (FedAvg) of a convolutional
//! jammer classifier on synthesized GNSS interference spectrograms.
//!
//! The pipeline: [`siggen`] synthesizes interfered baseband records and
//! renders quantized spectrogram images; [`dataset`] stores them, splits
//! train/test, and shards the training set across clients (IID or
//! Dirichlet-skewed); [`nn`] is a from-scratch CNN with exact
//! backpropagation; [`fed`] runs FedAvg rounds and the centralized baseline;
//! [`metrics`] produces accuracy, confusion matrices, and CSV/JSON outputs.
//!
//! Every run is a pure function of its configuration and seeds.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fed;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod siggen;

pub use error::{Error, Result};
