//! Stereo matching from similarity cost volumes, with staged training that
//! lets trained feature extractors and cost aggregators be recombined.

pub mod bench;
pub mod cost;
pub mod error;
pub mod head;
pub mod io;
pub mod nets;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
