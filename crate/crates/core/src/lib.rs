pub mod adaptive;
pub mod dde;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod plant;
pub mod scenario;
pub mod topology;
pub mod trace_io;

pub use error::{Error, Result};
pub use numerics::{Mat, Vector};
