//! Minimal differentiable-programming toolkit used by the trainable modules.

pub mod graph;
pub mod layers;
pub mod optim;

pub use graph::{Gradients, Graph, Mat, ParamId, ParamStore, Var};
pub use layers::{dropout, zoneout, Conv1d, Init, Linear, Lstm, TimeNorm};
pub use optim::Adam;
