pub mod datagen;
pub mod error;
pub mod expcli;
pub mod federation;
pub mod local_solvers;
pub mod metrics;
pub mod objectives;
pub mod veckit;

pub use error::{FedError, Result};
