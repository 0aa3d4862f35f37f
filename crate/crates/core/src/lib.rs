//! WaveLiT: wavelet-tokenized, ridge-corrected linear-attention surrogates for
//! time-stepping PDE fields, together with the machinery to train, finetune,
//! evaluate and analyse them at desk scale.

pub mod ablation;
pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod mixer;
pub mod model;
pub mod objectives;
pub mod pyramid;
pub mod rollout;
pub mod sampling;
pub mod synthdata;
pub mod tensor;
pub mod training;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
