//! f64 tensors with a reverse-mode tape, the layer and loss ops used by the
//! adaptation networks, and a bias-corrected Adam optimizer.

pub mod adam;
pub mod error;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;
#[cfg(feature = "testing")]
pub mod testing;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use error::{NnError, Result};
pub use graph::{sigmoid_scalar, softmax_rows, Graph, Mode, RunningStats, Var, BN_EPS};
pub use layers::{BatchNorm, BufferUpdates, Conv1d, Linear};
pub use params::{Grads, ParamEntry, ParamId, ParamStore};
pub use tensor::Tensor;
