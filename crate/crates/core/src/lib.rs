//! Unpaired H&E ↔ P63 stain transfer with editable latent directions.
//!
//! See the guide in `book/` for a walkthrough of the data pipeline, training
//! and editing.

pub mod autograd;
pub mod color;
pub mod corpus;
pub mod error;
pub mod imageio;
pub mod netcore;
pub mod objectives;
pub mod quality;
pub mod sefa;
pub mod service;
pub mod survey;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

// Keeps the guide's code samples compiling and passing.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/editing.md")]
    mod editing {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/service.md")]
    mod service {}
}
