//! Kernel-independent fast multipole summation built on empirical
//! interpolation of the kernel.
//!
//! The library computes sums `f(x_i) = sum_j sigma_j K(x_i, y_j)` for a
//! translation-invariant kernel `K` given only as a black-box evaluator. At
//! every tree level two greedy empirical interpolations of `K` are built over
//! fixed reference domains, which yields nested low-rank expansions usable by
//! a multilevel fast multipole pass. The greedy procedure certifies its own
//! interpolation error on the training grids and chooses the number of terms
//! per level accordingly.
//!
//! Module map:
//! - [`kernels`]: the kernel trait and the builtin radial kernels
//! - [`eim`]: greedy empirical interpolation and its triangular factors
//! - [`tree`]: uniform tree, neighbour/interaction lists, reference domains
//! - [`operators`]: per-level precomputation and the operator-cache file
//! - [`fmm`]: direct, near-field, monolevel and multilevel summation

pub mod eim;
pub mod error;
pub mod fmm;
pub mod kernels;
pub mod lowrank;
pub mod operators;
pub mod points;
pub mod tree;

pub use error::{EifmmError, Result};
pub use kernels::{make_builtin_kernel, BuiltinKernel, FnKernel, Kernel};
pub use points::PointSet;
pub use tree::{BoxId, LevelGeometry, TrainingConfig, TrainingSet, Tree, TreeConfig, XGridLayout};
