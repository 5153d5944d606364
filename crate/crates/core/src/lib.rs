//! Radio fingerprinting simulator with transmitter-side FIR waveform
//! optimization.
//!
//! Synthetic devices with distinct hardware impairments transmit OFDM
//! frames ([`phy`]). A convolutional classifier ([`cnn`]) learns to tell
//! them apart from equalized I/Q payloads. When the channel drifts, a
//! per-device complex FIR filter is optimized ([`wop`]) to raise the
//! classifier's activation for that device, and the receiver divides the
//! filter back out before demodulation. [`harness`] runs seeded experiments
//! over all of it.

pub mod cnn;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod iqcore;
pub mod phy;
pub mod wop;

pub use error::{Error, Result};
