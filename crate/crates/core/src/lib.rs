pub mod cli;
pub mod dataio;
pub mod error;
pub mod evalmetrics;
pub mod initsch;
pub mod linear_analysis;
pub mod model;
pub mod numcore;
pub mod pipeline;
pub mod recon_bilevel;
pub mod recon_gradpen;
pub mod trainer;

pub use error::{Error, Result};
