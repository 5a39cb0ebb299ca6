//! Recursive-projection pricing of American and Bermudan options with cash
//! dividends under Black–Scholes, Merton, Heston and Bates dynamics.

pub mod error;
pub mod math;
pub mod model;
pub mod lattice;
pub mod pricer;
pub mod oracles;

pub use error::{Error, Result};
pub mod boundary;
pub mod calibration;
pub mod analytics;
