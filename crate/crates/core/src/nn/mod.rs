//! Minimal reverse-mode autodiff stack: tape graph, kernels, parameter
//! store, Adam, checkpoints. Everything is f64 and single-threaded; the
//! training contracts (finite-difference gradient checks, bit-identical
//! resume) are simpler to honor that way than with an external framework.

pub mod checkpoint;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;

pub use graph::{Arr, Graph, NodeId, PadMode};
pub use optim::{Adam, PlateauScheduler};
pub use params::{Bindings, ParamSet};

#[cfg(test)]
mod gradcheck;
