pub mod error;
pub mod fusion;
pub mod io;
pub mod lf;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod train;
pub mod warp;

pub use error::{Error, Result};
