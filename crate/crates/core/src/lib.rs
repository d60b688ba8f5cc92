//! Parameter-efficient visual instruction tuning on a frozen decoder-only
//! transformer: zero-initialized gated prefix attention, per-channel
//! scale/bias tuning, early fusion of visual tokens, and joint training of
//! disjoint parameter groups, with a synthetic multimodal world to train and
//! evaluate it on.

pub mod adapter;
pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod experts;
pub mod gradsuite;
pub mod optim;
pub mod synthworld;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
