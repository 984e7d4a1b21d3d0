//! Reverse-mode automatic differentiation on dynamic-rank f64 tensors.
//!
//! The engine is a tape: every operation appends a node to a [`Graph`] and
//! evaluates its value eagerly, so intermediate results are always available.
//! [`Graph::grad`] walks the tape backwards and emits the vector-Jacobian
//! products as *new graph nodes*. Because gradients are themselves taped
//! computations, calling `grad` on a function of a gradient (as a gradient
//! penalty does) yields correct second-order derivatives with no extra
//! machinery.
//!
//! Everything is single-threaded and f64, so results are bitwise reproducible
//! across runs on the same target.

pub mod adam;
pub mod conv;
pub mod graph;

pub use adam::{Adam, AdamState};
pub use conv::ConvGeom;
pub use graph::{Graph, NodeId, Tensor};
