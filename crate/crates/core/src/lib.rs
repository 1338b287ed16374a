//! Simulator for how intrinsic hardware noise changes the adversarial
//! robustness of small neural networks.
//!
//! Two noise sources are modelled:
//!
//! * bit errors in hybrid 8T-6T SRAM activation memories at scaled supply
//!   voltage ([`sram`]), and
//! * resistive non-idealities and device variation in memristive crossbar
//!   arrays ([`xbar`]).
//!
//! A minimal fixed-point neural-network engine ([`nn`]) supplies exact
//! input gradients for FGSM/PGD attack generation ([`attacks`]), a layer
//! search picks SRAM configurations that improve adversarial accuracy
//! ([`search`]), and the experiment harness ties everything into
//! reproducible end-to-end runs ([`experiment`]).

pub mod attacks;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod report;
pub mod rng;
pub mod search;
pub mod sram;
pub mod xbar;
pub mod tensor;

pub use error::{Error, Result};
