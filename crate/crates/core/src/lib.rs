pub mod admm;
pub mod attack;
pub mod csdecode;
pub mod error;
pub mod grid;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod model;
pub mod observer;
pub mod prior;
pub mod trace;

pub use error::{Error, Result};
