mod error;
pub mod diagnostics;
pub mod fusion;
pub mod harness;
pub mod neurocore;
pub mod probe;
pub mod substitution;
pub mod synthgen;
pub mod trainers;

pub use error::{Error, Result};
