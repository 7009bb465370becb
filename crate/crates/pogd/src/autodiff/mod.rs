//! Self-contained reverse-mode autodiff: dense arrays, a Wengert tape,
//! an ADAM optimizer, and a finite-difference gradient checker.

pub mod adam;
pub mod array;
pub mod gradcheck;
pub mod graph;

pub use adam::{Adam, AdamState};
pub use array::Array;
pub use gradcheck::{check_gradients, GradCheckReport};
pub use graph::{Graph, GraphError, Var};
