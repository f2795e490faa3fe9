//! Minimal reverse-mode automatic differentiation for small dense models.
//!
//! Values are `f64` matrices; the detector and its losses are written as
//! compositions of the operations on [`Tape`].

pub mod gradcheck;
mod tape;

pub use tape::{sigmoid, ConvGeometry, Gradients, Tape, Var, PROB_EPS};

pub use ndarray;
