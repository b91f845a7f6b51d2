//! RawNet2-style raw-waveform speaker embedding extractor with filter-wise
//! feature map scaling, trained and evaluated on CPU.

pub mod archive;
pub mod audio;
pub mod config;
pub mod error;
pub mod eval;
pub mod fms;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;

pub use config::{Frontend, ModelConfig};
pub use error::{Error, Result};
pub use model::{Embedding, ModelParams};
pub use tensor::{Graph, Real, Tensor, Var};
