pub mod accountant;
pub mod arch;
pub mod autodiff;
pub mod clip;
pub mod config;
pub mod data;
pub mod error;
pub mod ledger;
pub mod memconf;
pub mod optim;
pub mod params;
pub mod predict;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
