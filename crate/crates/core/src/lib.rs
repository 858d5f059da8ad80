//! Skeleton-based gait recognition with a spatial-transformer / temporal-convolution
//! network, its training recipe and the CASIA-B cross-view evaluation protocol.
//!
//! The crate is organised bottom-up:
//!
//! * [`ndtensor`]: dense arrays with an eager reverse-mode tape.
//! * [`skeleton`]: keypoint sequences, normalisation, multi-input features,
//!   augmentation, batch sampling and a synthetic walker generator.
//! * [`model`]: the network, its parameter store, checkpoints and the analytic
//!   parameter / FLOP counters.
//! * [`training`]: batch-hard triplet loss, Adam, the 1-cycle schedule and the loop.
//! * [`evaluation`]: gallery/probe construction, rank-1 tables, reports and the
//!   limited-frame study.

pub mod container;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod ndtensor;
pub mod skeleton;
pub mod training;

pub use error::{Error, Result};
