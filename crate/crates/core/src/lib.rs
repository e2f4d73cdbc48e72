//! Efficient modulation blocks with their lineage, reverse-mode gradients,
//! complexity accounting, microbenchmarks and a desk-scale trainer.

pub mod analyzer;
pub mod autodiff;
pub mod bench;
pub mod blocks;
pub mod error;
pub mod model;
pub mod params;
pub mod tensor;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
pub use params::{Init, Param, ParamBuilder, ParamId, ParamRole, ParamSet};
pub use tensor::{ConvSpec, FuseOp, FusionMode, Shape, Tensor};
pub use model::{build_isotropic, build_model, build_preset, BuildOptions, IsotropicSpec, Model, ModelSpec};
