//! Generative next-item recommendation with an automatically retrieved
//! long-term memory.
//!
//! A causal transformer over item tokens is split at layer `L`. Past
//! interactions are encoded by the lower stack into a memory bank; a small
//! retriever picks one element per prediction and injects it into the
//! prefix slot before the upper stack runs. The retriever is trained to
//! match labels derived from how much each element raises the probability
//! of the true next item.

pub mod annotate;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod memory;
pub mod retriever;
pub mod vocab;

pub use error::{Error, Result};

/// Deterministic, well-mixed seed for stream `stream` of `seed`
/// (splitmix64 over the pair).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
