//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Values live in [`Tensor`]; computations are recorded on a [`Graph`]
//! through [`Var`] handles. [`Var::backward`] can itself be recorded
//! (`create_graph = true`), which is what allows a loss to be built from
//! gradients and then differentiated again.

mod backprop;
mod error;
pub mod gradcheck;
mod graph;
mod kernels;
mod map;
mod ops;
mod spatial;
mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use map::LinearMap;
pub use spatial::{avg_pool_map, bilinear_map, corner_aligned_coord, crop_map, hflip_map, Rect};
pub use tensor::Tensor;
