//! Event-driven spiking networks that learn conditional spike rates with
//! local weight rules.
//!
//! Inputs are binned into [`event::TimestepFrame`]s; a [`net::Network`] keeps a
//! K-frame history per layer and drives ReLU units through delayed weights.
//! [`learn`] holds the `d`/`u` rules and the self-supervised, predictive and
//! classification steps built from them; [`trainer`] runs the layerwise
//! schedule and [`eval`] scores the result. [`oracle`] checks learned rates
//! against empirical counts.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod event;
pub mod learn;
pub mod net;
pub mod oracle;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use event::{Event, HistoryWindow, TimestepFrame};
pub use net::{Architecture, DelayedWeightTensor, Network};
pub use trainer::{TrainConfig, Trainer};
