//! Few-shot cross-lingual transfer with contrastive representation alignment.
//!
//! A classifier is fine-tuned on a source language, then adapted to a target
//! language from a K-shot episode. During adaptation a contrastive term on an
//! intermediate layer pulls target representations toward their source
//! counterparts, either per translation pair ([`losses::xrcl_loss`]) or per
//! class ([`losses::xccl_loss`]).
//!
//! Modules, bottom up:
//!
//! * [`numerics`]: cosine and set similarity, softmax, AdamW, finite differences
//! * [`model`]: MLP encoder with a label head and manual backpropagation
//! * [`losses`]: cross-entropy and the two contrastive objectives
//! * [`data`]: corpora, synthetic generation, episodes, exemplar selection
//! * [`harness`]: source fine-tuning, few-shot adaptation, evaluation, reports
//! * [`cli`]: the commands behind the `colap` binary
//!
//! The guide in `book/` walks through each module with runnable examples.

pub mod cli;
pub mod data;
pub mod error;
pub mod harness;
pub mod io;
pub mod losses;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};

// Compile and run every code block of the guide as a doctest.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/numerics.md")]
    mod numerics {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/protocol.md")]
    mod protocol {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
