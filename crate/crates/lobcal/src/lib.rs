//! Market-microstructure simulation and calibration toolkit.
//!
//! The crate has three layers:
//!
//! - a limit order book ([`book`]) and the PGPS agent-based market model
//!   driving it ([`sim`]), producing 10-level snapshot streams;
//! - a Transformer autoencoder ([`model`]) built on a small reverse-mode
//!   differentiation layer ([`nn`]), which embeds 100-step snapshot
//!   windows into compact latent vectors, with dataset tooling in
//!   [`data`];
//! - a particle-swarm calibrator ([`calibrate`]) that fits the simulator
//!   to a target stream by mid-price, raw-book, or latent-vector
//!   discrepancy, with summary statistics in [`stats`].
//!
//! See the `examples/` directory for runnable walkthroughs of each
//! capability.

pub mod book;
pub mod data;
pub mod model;
pub mod sim;
pub mod nn;
