//! Minimal deterministic neural-network substrate: parameter store,
//! reverse-mode tape, 3-d convolution, standard layers, Adam, and
//! finite-difference gradient checking.

pub mod conv;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

pub use optim::{Adam, AdamConfig};
pub use params::{Grads, ParamId, ParamStore};
pub use tape::{Tape, Var};
