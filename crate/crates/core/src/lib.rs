//! Software twin of an OCT-guided, eye-mountable needle insertion robot.
//!
//! The crate covers the whole closed loop: a layered cornea phantom that emits
//! synthetic interferograms, the A-line/M-scan imaging chain, a compact
//! shape-regularized U-Net for layer segmentation, Kalman layer tracking, the
//! differential-screw robot model, the autonomous depth controller, the binary
//! wire protocol and a seeded trial harness.

pub mod controller;
pub mod cornea;
pub mod dataset;
pub mod dsp;
pub mod error;
pub mod fixture;
pub mod gateway;
pub mod harness;
pub mod robot;
pub mod segnet;
pub mod serve;
pub mod tracker;
pub mod wire;

pub use error::{Error, Result};
