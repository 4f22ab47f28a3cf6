pub mod bench;
pub mod cli;
pub mod diagnostics;
pub mod dirichlet;
pub mod engine;
pub mod error;
pub mod nn;
pub mod progressive;
pub mod rng;
pub mod space;
pub mod special;

pub use error::{Error, Result};
pub use rng::Rng;

/// Code version embedded in every output file.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
