//! Orthogonal group synchronization: estimation of `Z_1, ..., Z_n in O(d)`
//! from noisy pairwise measurements `C_ij = Z_i Z_j^T + sigma W_ij`.

pub mod eigen;
pub mod error;
pub mod estimators;
pub mod format;
pub mod harness;
pub mod linalg;
pub mod manifold;
pub mod model;
pub mod newton;
pub mod stats;
pub mod uq;

pub use error::{Error, Result};
