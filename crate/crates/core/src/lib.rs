pub mod autodiff;
pub mod cli;
pub mod consistency;
pub mod error;
pub mod features;
pub mod fusion;
pub mod geometry;
pub mod graph_embed;
pub mod io;
pub mod model;
pub mod registration;
pub mod reposition;
pub mod synth;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
