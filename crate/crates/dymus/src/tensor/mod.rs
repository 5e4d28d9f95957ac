//! Dense f64 tensors with a reverse-mode gradient tape and an Adam optimizer.
//!
//! Everything model-side is built from the small op set in [`tape`]; gradients
//! are checked against central finite differences in the test suite.

mod adam;
mod dense;
pub mod tape;


pub use adam::AdamState;
pub use dense::Tensor;
pub use tape::{Tape, Var};
