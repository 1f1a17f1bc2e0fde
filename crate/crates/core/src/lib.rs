//! Power allocation and delay-constrained scheduling for a multiple access
//! channel whose transmitters act without knowledge of each other's state.

pub mod alloc_continuous;
pub mod alloc_unit;
pub mod baselines;
pub mod curve;
pub mod dist;
pub mod error;
pub mod iteropt;
pub mod mdp;
pub mod sim;

pub use error::{Error, Result};
