//! Multi-view 3D human pose estimation with projective state-space blocks.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod pipeline;
pub mod scanning;
pub mod sim;
pub mod ssm;
pub mod tokens;
pub mod training;

pub use error::{Error, Result};
