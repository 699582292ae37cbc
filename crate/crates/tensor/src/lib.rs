//! Dense `f64` arrays and a small tape-based reverse-mode differentiation
//! engine.
//!
//! The op set is deliberately narrow: it covers what a pre-norm transformer
//! encoder with rotary attention, SwiGLU feedforward layers and adaptive
//! layer normalization needs, with attention and rotary embeddings fused
//! into single tape nodes. Everything runs in double precision so the same
//! code path serves training and finite-difference gradient checks.
//!
//! ```
//! use symupe_tensor::{Array, Graph, ParamStore};
//!
//! let mut store = ParamStore::new();
//! let w = store.insert("w", Array::from_vec(&[2, 1], vec![0.5, -1.0]).unwrap());
//! let mut g = Graph::new(&store);
//! let x = g.constant(Array::from_vec(&[1, 2], vec![2.0, 3.0]).unwrap());
//! let w = g.param(w);
//! let y = g.matmul(x, w);
//! let loss = g.sum(y);
//! let grads = g.backward(loss);
//! assert_eq!(grads.param(0).unwrap().data(), &[2.0, 3.0]);
//! ```

mod array;
mod error;
pub mod gradcheck;
mod graph;
mod kernels;
pub mod optim;
mod params;

pub use array::Array;
pub use error::TensorError;
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Grads, Graph, Segment, Var};
pub use params::{ParamId, ParamStore};

pub type Result<T> = std::result::Result<T, TensorError>;
