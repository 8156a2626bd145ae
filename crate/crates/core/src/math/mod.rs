//! Dense matrix kernels, reverse-mode autodiff, and parameter storage.

pub mod matrix;
pub mod params;
pub mod tape;

pub use matrix::Matrix;
pub use params::{stream_rng, ParamSet};
pub use tape::{softmax_rows_value, GradMap, NeighborLists, Tape, Var};
