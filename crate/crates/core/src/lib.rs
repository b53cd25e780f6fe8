pub mod error;
pub mod lattice;
pub mod localfn;
pub mod measures;
pub mod poly;
pub mod quadrature;
pub mod conductivity;
pub mod rates;
pub mod cltvar;
pub mod expr;
pub mod kmc;
pub mod pde;
pub mod interface;
pub mod harness;

pub use error::{Error, Result};
