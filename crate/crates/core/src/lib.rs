pub mod attention;
pub mod autodiff;
pub mod cells;
pub mod data;
pub mod error;
pub mod model;
pub mod params;

pub use error::{Error, Result};
pub mod objectives;
pub mod optim;
pub mod metrics;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod train;
pub mod gradsuite;
