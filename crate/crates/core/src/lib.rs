pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod heads;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod split;
pub mod train;
pub mod ufm;

pub use error::{CfaError, Result};
pub use linalg::{Matrix, RngState};
