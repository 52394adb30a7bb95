//! Laboratory for studying how token-mixing image classifiers cope with
//! magnification shift.
//!
//! The crate is a vertical slice, self-contained on purpose: a reverse-mode
//! autodiff tensor engine ([`tape`]), the spectral transforms the mixers need
//! ([`spectral`]), a MetaFormer block with five interchangeable token mixers
//! ([`mixers`]), six small model families built from them ([`models`]), a
//! synthetic multi-magnification dataset ([`data`]), a deterministic training
//! loop ([`train`]), and the cross-magnification evaluation protocol with
//! report emission ([`protocol`], [`report`]).
//!
//! Everything is deterministic given a seed: same seed, same bytes, at any
//! rayon thread count. The only nondeterministic output anywhere is wall-clock
//! timing, and that is zeroed in deterministic mode.

pub mod checkpoint;
pub mod data;
pub mod defaults;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod mixers;
pub mod models;
pub mod optim;
pub mod protocol;
pub mod report;
pub mod spectral;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{GradTape, Var};
pub use tensor::{Scalar, Tensor};
