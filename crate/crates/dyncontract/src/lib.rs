//! Dynamic insurance contracts with two persistent private risk types.

pub mod auxcost;
pub mod ipm;
pub mod market;
pub mod mechanism;
pub mod model;
pub mod solver;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
