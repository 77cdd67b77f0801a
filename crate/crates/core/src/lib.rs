pub mod diffcore;
pub mod error;
pub mod evalharness;
pub mod flatness;
pub mod metascheme;
pub mod models;
pub mod runio;
pub mod tasksuite;
mod wire;

pub use error::{Error, Result};
