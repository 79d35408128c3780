pub mod bundle;
pub mod cli;
pub mod config;
pub mod depth_basis;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod matching;
pub mod pairwise;
pub mod pipeline;
pub mod synthetic;

pub use error::{Error, FormatError, Result};
