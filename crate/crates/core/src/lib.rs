//! Discrete-token song editing language model over a synthetic two-track
//! corpus.

pub mod cli;
pub mod error;
pub mod eval;
pub mod io;
pub mod lm;
pub mod lyricproc;
pub mod par;
pub mod sampler;
pub mod seqcodec;
pub mod synthcorpus;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
