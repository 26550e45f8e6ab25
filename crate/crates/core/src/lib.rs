//! Spatial-GRU text matching.
//!
//! Two token sequences are compared word by word with a neural tensor
//! layer, the resulting interaction grid is integrated by a spatial GRU
//! whose cell at `(i, j)` sees its left, top and diagonal neighbours, and
//! the final lattice state is scored linearly. Gradients are derived by
//! hand ([`grad`]) and checked against finite differences. The [`lcs`]
//! module provides the longest-common-subsequence reference the lattice
//! reduces to in the exact-match limit.

pub mod error;
pub mod linalg;
pub mod params;
pub mod model;
pub mod grad;
pub mod eval;
pub mod train;
pub mod lcs;
pub mod io;
pub mod oracle;

pub use error::{Error, Result};
pub use linalg::{Mat, Tensor3, Vector};
pub use model::{
    exact_lcs_mode, forward, interaction_tensor, match_score, spatial_gru_forward, Direction, ForwardPass,
    GateRecord, InteractionTensor, LatticeState, TokenSeq,
};
pub use params::{GradSet, GruParams, ModelConfig, ParamSet};
