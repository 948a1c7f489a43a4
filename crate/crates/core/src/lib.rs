//! Engine for volumetric cardiac segmentation with dilated 2D convolutional
//! networks: tensor primitives with exact gradients, network assembly and
//! serialization, Adam training, orthogonal-plane inference with fusion,
//! overlap and boundary-distance metrics, and MetaImage I/O.

pub mod inference;
pub mod metrics;
pub mod mhd;
pub mod network;
pub mod ops;
pub mod optim;
pub mod phantom;
pub mod pixmap;
pub mod tensor;
pub mod volume;

pub use tensor::{LabelMap, Scalar, Tensor};
