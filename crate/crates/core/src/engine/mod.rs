//! Numerical substrate: tensors kernels, reverse-mode tape, parameters and Adam.

pub mod kernels;
pub mod optim;
pub mod params;
pub mod tape;

pub use optim::{Adam, AdamConfig};
pub use params::{Buffer, BufferId, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
