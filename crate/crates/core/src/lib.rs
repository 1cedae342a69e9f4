//! Active traffic demand management on a highway stretch through a
//! congestion-discounted charging price for plug-in electric vehicles.

pub mod ctm;
pub mod error;
pub mod game;
pub mod identification;
pub mod pricing;
pub mod quantile;
pub mod scenario;
pub mod synthdata;

pub use error::{Error, Result};
