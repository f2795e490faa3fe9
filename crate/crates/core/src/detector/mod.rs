//! Decoupled localization/recognition detector.

mod checkpoint;
mod config;
mod layers;
mod model;
mod params;
mod postprocess;

pub use checkpoint::{load_checkpoint, quantize_to_storage, save_checkpoint, Checkpoint};
pub use config::ModelConfig;
pub use model::{fuse, Detector, ForwardOutput, ForwardVars, FusionOutput, CLASS_PRIOR_BIAS, NEW_CLASS_INIT_SCALE};
pub use params::{Param, ParamGroup, ParamId, ParamStore, Session};
pub use postprocess::{postprocess, Detection, DEFAULT_TOP_K};
