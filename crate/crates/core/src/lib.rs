//! Desk-scale laboratory for group-conditioned ad-creative preference
//! alignment on synthetic click logs.
//!
//! The pipeline: a seeded synthetic e-commerce world ([`simworld`]) produces
//! click logs; a cross-attention preference network ([`prefnet`]) learns
//! product-aware user embeddings; adaptive clustering ([`grouping`]) turns
//! them into percentile-sampled group representations; a pairwise reward
//! model ([`grm`]) ranks creatives per group; and a small conditional prompt
//! policy ([`aligner`]) is aligned to each group's preferences with a
//! DPO-style loss. [`metrics`] implements the evaluation protocols.

pub mod aligner;
pub mod archive;
pub mod autodiff;
pub mod error;
pub mod grm;
pub mod grouping;
pub mod io;
pub mod metrics;
pub mod prefnet;
pub mod seed;
pub mod simworld;

pub use error::{Error, Result};
