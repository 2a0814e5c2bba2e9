//! Sentence-function-aware short-text conversation toolkit.
//!
//! Segments are classified into a fixed two-level sentence-function
//! taxonomy, a target response function is predicted for each query, and
//! responses come from Jaccard retrieval with function-aware re-ranking or
//! from small attention sequence-to-sequence models conditioned on the
//! target function.

pub mod classify;
pub mod generate;
pub mod harness;
pub mod corpus;
pub mod nncore;
pub mod retrieve;
pub mod taxonomy;
