pub mod analysis;
mod error;
pub mod meta;
pub mod nn;
pub mod run;
pub mod seed;
pub mod tasks;

pub mod autodiff;
pub use error::{Error, Result};
