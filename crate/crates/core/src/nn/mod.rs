//! Minimal `f64` neural-network toolkit: matrices, a reverse-mode tape,
//! parameter stores with checkpointing, layers and AdamW.

mod graph;
pub mod layers;
pub mod optim;
mod store;
mod tensor;

pub use graph::{concat_cols, concat_rows, Grads, Graph, Var};
pub use store::{ParamId, ParamStore, Params, CHECKPOINT_FORMAT};
pub use tensor::Mat;
