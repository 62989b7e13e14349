//! Policy learning from action-free expert videos plus a small budget of
//! reward-free environment interactions.
//!
//! A video labeling model `V = h . quantize . g . f` is trained with three
//! self-supervised objectives (visual shift contrast, latent future
//! reconstruction, ground-truth action prediction) while a policy sharing `f`
//! and `h` is cloned from V-labeled videos and used to collect interactions.

pub mod databank;
pub mod envsuite;
pub mod error;
pub mod eval;
pub mod exec;
pub mod losses;
pub mod nets;
pub mod plot;
pub mod trainer;

pub use error::{Error, Result};
