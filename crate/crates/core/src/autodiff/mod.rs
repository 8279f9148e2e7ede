//! Dense tensors with reverse-mode differentiation.
//!
//! Only the kernels the prototype network needs are provided: convolution,
//! pooling, pointwise nonlinearities, affine maps, softmax cross-entropy,
//! prototype distance maps, the log similarity, top-k average pooling and
//! corner-aligned bilinear upsampling.
//!
//! ```
//! use protomargin::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(vec![1.0, -2.0, 3.0]));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Nonlinearity, Var};
pub use tensor::Tensor;
