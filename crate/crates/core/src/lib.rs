//! Throughput modeling for speculative decoding and a small trainable
//! transformer stack for measuring draft-model acceptance.
//!
//! - [`arch`]: parameter, FLOP and byte accounting for transformer specs.
//! - [`costmodel`]: forward cost, iteration time multiplier, throughput
//!   multiplier, critical batch size and context, cost savings.
//! - [`specdec`]: rejection-sampling verification and tau estimation.
//! - [`tinymodel`]: target model, three draft families, training, and
//!   empirical tau measurement.

pub mod arch;
pub mod costmodel;
pub mod error;
pub mod specdec;
pub mod tinymodel;

pub use error::{Error, Result};
