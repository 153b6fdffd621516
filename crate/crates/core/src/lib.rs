//! Small-time heat-kernel asymptotics for differential equations driven by
//! fractional Brownian motion with Hurst index `1/2 < H < 1`.

pub mod density;
pub mod error;
pub mod fbm;
pub mod fields;
pub mod geometry;
pub mod io;
pub mod laplace;
pub mod lie;
pub mod linalg;
pub mod optim;
pub mod quadrature;
pub mod rng;
pub mod young;

pub use error::{Error, Result};
