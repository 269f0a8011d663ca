//! Domain-generalized face forgery detection.
//!
//! The pieces: a style bank of representative feature statistics picked by
//! farthest point sampling, Dirichlet-mixed AdaIN feature diversification, a
//! dynamic (mixture-of-experts) convolution block, and a domain discriminator
//! behind gradient reversal. [`backbone`] wires them into a classifier and
//! [`pipeline`] trains and evaluates it.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dda;
pub mod dfe;
pub mod domain_head;
pub mod error;
pub mod io;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod style_bank;
pub mod tensor;
pub mod variants;

pub use error::{Error, Result};
