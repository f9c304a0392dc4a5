//! A small laboratory for in-context vs. in-weights learning.
//!
//! A six-layer single-head masked language model is trained on a synthetic
//! noun/adjective grammar with Zipfian token frequencies. Token embeddings can
//! be periodically re-initialized (active forgetting), or re-initialized only
//! during an initial phase of training (temporary forgetting), and the
//! resulting strategy is measured on head, tail, switched and unseen-token
//! evaluation sets.

pub mod analysis;
pub mod error;
pub mod grammar;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod trainer;

pub use error::{Error, Result};
