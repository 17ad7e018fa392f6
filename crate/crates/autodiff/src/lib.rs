//! A small reverse-mode differentiation engine over dense `f64` matrices.
//!
//! Operations evaluate eagerly onto a [`Graph`] tape. [`Graph::backward`]
//! returns numeric gradients for leaves; [`Graph::grad`] records the reverse
//! sweep as new graph nodes, which makes input-gradient penalties (and any
//! other expression containing a gradient) differentiable in turn.
//!
//! ```
//! use larar_autodiff::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.leaf(Tensor::row_vector(&[1.0, 2.0, 3.0]));
//! let y = x.square()?.sum()?;
//! let grads = g.backward(y, None)?;
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! # Ok::<(), larar_autodiff::AutodiffError>(())
//! ```

mod backward;
mod error;
mod graph;
pub mod nn;
mod tensor;

pub use backward::GradMap;
pub use error::{AutodiffError, Result};
pub use graph::{sigmoid, Graph, NodeId, Var};
pub use tensor::Tensor;
