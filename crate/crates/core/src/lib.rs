pub mod attacks;
pub mod classifier;
pub mod combo_vae;
pub mod datasets;
pub mod detector;
pub mod error;
pub mod pipeline;
pub mod purifier;
mod util;

pub use error::{FmError, Result};
