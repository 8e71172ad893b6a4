pub mod encoding;
pub mod error;
pub mod harness;
pub mod eval;
pub mod image;
pub mod landmarks;
pub mod losses;
pub mod net;
pub mod nn;
pub mod phantom;
pub mod uncertainty;

pub use error::{Error, Result};
