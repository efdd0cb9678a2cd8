//! Training-free instance-to-semantic attention control (ISAC) over toy denoisers.
//!
//! The pipeline per denoising step: capture self/cross attention from every
//! layer, accumulate into resolution-unified maps, propagate class tokens,
//! cluster foreground pixels into instances, score overlaps, and take a single
//! gradient step on the latent before denoising.

pub mod attn;
pub mod backend;
pub mod engine;
pub mod error;
pub mod eval;
pub mod image;
pub mod losses;
pub mod masking;
pub mod output;
pub mod tensor_io;
pub mod toybench;

pub use error::{IsacError, Result};
