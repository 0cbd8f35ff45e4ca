//! Minimal neural-network building blocks with hand-written gradients.

pub mod conv;
pub mod gdn;
pub mod layers;
pub mod params;

pub use layers::{Layer, Sequential, Tape};
pub use params::ParameterSet;
