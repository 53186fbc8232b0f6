//! Delay-loop reservoir classification of RF bursts.
//!
//! The pipeline is: synthetic or loaded IQ bursts ([`signal`]) are mapped to
//! real streams ([`transforms`]), clocked through a delay-loop reservoir
//! ([`reservoir`]) and classified by a ridge readout ([`ridge`]). Readouts
//! trained on different nodes can be merged into a perceptron ([`fusion`]),
//! and [`distsim`] simulates that exchange with a cost ledger.

pub mod counter;
pub mod distsim;
pub mod fusion;
pub mod error;
pub mod experiment;
pub mod kv;
pub mod linalg;
pub mod reservoir;
pub mod ridge;
pub mod rng;
pub mod signal;
pub mod transforms;

pub use error::{Error, ErrorCategory, Result};
