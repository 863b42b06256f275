//! Tape-based reverse-mode automatic differentiation over dense `f64`
//! tensors.
//!
//! Ops record onto a [`Graph`] whenever one of their inputs is attached to
//! it. [`Graph::grad`] and [`Graph::backward`] sweep the tape in reverse; with
//! `create_graph = true` the gradients they return are themselves recorded,
//! so they can be differentiated again (Hessian-vector products, gradients
//! through gradient-descent steps).
//!
//! ```
//! use cxgrad::autodiff::{Array, Graph};
//!
//! let g = Graph::new();
//! let x = g.leaf(Array::scalar(2.0));
//! let y = x.mul(&x).unwrap().mul(&x).unwrap(); // x³
//! let dy = g.grad(&y, &[&x], true).unwrap()[0].clone().unwrap();
//! let d2y = g.grad(&dy, &[&x], false).unwrap()[0].clone().unwrap();
//! assert_eq!(dy.item(), 12.0);
//! assert_eq!(d2y.item(), 12.0);
//! ```

mod array;
mod error;
pub mod functional;
mod graph;
mod tensor;

pub use array::Array;
pub use error::{AdError, Result};
pub use graph::{GradMap, Graph, NodeId};
pub use tensor::Tensor;
