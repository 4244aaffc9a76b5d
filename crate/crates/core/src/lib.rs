//! MobileSal: a lightweight RGB-D salient object detection network built on
//! a small dense-tensor engine with reverse-mode differentiation.

pub mod blocks;
pub mod checks;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use params::{Param, ParamKind, ParamStore};
pub use tensor::{ConvSpec, Element, Graph, Mode, Shape, Tensor, Var};
