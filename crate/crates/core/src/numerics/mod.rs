//! Dense tensors, reverse-mode differentiation, random streams and the
//! symmetric linear algebra used by the optimizer.

pub mod graph;
pub mod linalg;
pub mod rng;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use linalg::{eig_sym, sample_mvn, MvnFactor, SymEigen};
pub use rng::Rng;
pub use tensor::{layer_norm, matmul, Tensor};
