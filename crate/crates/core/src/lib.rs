//! Masked diffusion language model with soft-mask feedback.
//!
//! Modules follow the data flow: [`corpus`] builds token windows,
//! [`schedule`] corrupts them, [`backbone`] denoises soft inputs,
//! [`softmask`] turns predictions into feedback, [`training`] runs the
//! two-pass update, [`decoding`] generates, and [`eval`] scores. [`cli`],
//! [`config`] and [`checkpoint`] drive it all from the command line.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod float;
pub mod schedule;
pub mod softmask;
pub mod training;

pub use error::{Error, Result};
