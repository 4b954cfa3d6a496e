//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] on a scalar sweeps the tape once in reverse and leaves
//! `d loss / d leaf` on every leaf that requires gradients. Model weights live
//! in a [`ParamStore`] and are copied onto the tape with [`Graph::param`];
//! after the sweep [`Graph::write_param_grads`] hands gradients back for
//! [`Adam`] to consume.
//!
//! ```
//! use pcm_autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::new(&[1], vec![3.0]).unwrap(), true);
//! let sq = g.square(x).unwrap();
//! let loss = g.mean(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
//! ```
//!
//! Graphs are single-threaded; finished [`Tensor`] values are plain data and
//! can be sent anywhere.

pub mod check;
mod graph;
mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{sigmoid, Graph, OpAttrs, OpKind, Var};
pub use optim::Adam;
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("unsupported op `{0}`")]
    Unsupported(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter {index} (`{name}`) has no gradient")]
    MissingGrad { index: usize, name: String },
    #[error("{0}")]
    Contract(String),
}
