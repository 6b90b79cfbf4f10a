//! A small reverse-mode automatic differentiation engine.
//!
//! Tensors are dense and row-major with channels last. The operation set is
//! exactly what a pixel-space diffusion U-Net with cross-attention, a tiny
//! transformer text encoder and a convolutional classifier need, with
//! hand-written backward passes on top of `matrixmultiply` GEMM.
//!
//! ```
//! use promptpaint_autograd::{Graph, ParamStore, Tensor};
//!
//! let mut store = ParamStore::<f64>::new();
//! let w = store.insert("w", Tensor::new(&[2, 1], vec![3.0, -1.0]).unwrap()).unwrap();
//! let mut g = Graph::new(&store);
//! let x = g.input(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
//! let wv = g.param(w);
//! let y = g.linear(x, wv, None).unwrap();
//! let zero = g.input(Tensor::zeros(&[1, 1]));
//! let loss = g.mse(y, zero).unwrap();
//! let grads = g.backward(loss).unwrap();
//! // y = 1, d(y²)/dw = 2·y·x
//! assert_eq!(grads.params.get(w).unwrap().data(), &[2.0, 4.0]);
//! ```

mod float;
mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use float::{lit, Float};
pub use graph::{softmax_rows, Backward, Graph, Var};
pub use optim::{Adam, Moments, StepReport};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("backward called on a graph recorded without gradients")]
    NoGrad,
    #[error("non-finite {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;
