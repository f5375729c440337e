//! Minimal dense numerics: tensors, a reverse-mode tape, transformer layers,
//! AdamW and the learning-rate schedule. Everything is `f64`.

pub mod gradcheck;
mod graph;
pub mod layers;
pub mod optim;
mod params;
mod tensor;

pub use graph::{Graph, Var};
pub use optim::{lr_at, AdamW, AdamWConfig, LrSchedule};
pub use params::{ParamId, ParameterStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
