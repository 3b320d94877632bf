//! Numerical toolkit for singular mean-field stochastic control.

pub mod adjoint;
pub mod error;
pub mod meanfield;
pub mod nash;
pub mod optimality;
pub mod paths;
pub mod reflected;
pub mod report;
pub mod skorohod;
pub mod uncertainty;

pub use error::{Error, Result};
pub use paths::{MonotonePath, Path, RngStream, TimeGrid};
pub use report::{Check, CheckReport};
pub use skorohod::{check_skorohod, clamp_oracle, skorohod_map, BarrierPair, SkorohodSolution};
