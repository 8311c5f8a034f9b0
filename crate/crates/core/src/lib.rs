pub mod bnn;
pub mod conjlayer;
pub mod data;
pub mod dist;
pub mod error;
pub mod eval;
pub mod models;
pub mod ndiff;

pub use error::{Error, Result};
