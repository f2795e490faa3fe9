//! Exemplar-free incremental object detection with decoupled localization and
//! recognition, semantic-query guidance, duplex classifier fusion and hybrid
//! knowledge distillation.

pub mod datagen;
pub mod detector;
pub mod error;
pub mod eval;
pub mod losses;
pub mod semantics;
pub mod trainer;

pub use error::{DcaError, Result};
