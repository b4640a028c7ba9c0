pub mod adapters;
pub mod budget;
pub mod cli;
pub mod densela;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod tape;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
