pub mod analysis;
pub mod cli;
pub mod config;
pub mod error;
pub mod kernel;
pub mod mittag_leffler;
pub mod noise;
pub mod quad;
pub mod resolvent;
pub mod solver;
pub mod spectral;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
