pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor, Var};
pub mod warp;
pub mod flow_loss;
pub mod render_loss;
pub mod models;
pub mod synth;
pub mod io;
pub mod train;
pub mod audit;
pub mod cli;
