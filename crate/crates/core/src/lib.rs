//! Multivariate geostatistical prediction with spatial blind source
//! separation (SBSS) as a pre-processing step for ordinary kriging, LMC
//! cokriging as the multivariate baseline, and the random-field simulation
//! needed to benchmark both.

pub mod bench;
pub mod bessel;
pub mod compositional;
pub mod covariance;
pub mod error;
pub mod io;
pub mod kriging;
pub mod linalg;
pub mod rng;
pub mod sbss;
pub mod simulation;
pub mod spatial;
pub mod variography;

pub use error::{Error, Result};
