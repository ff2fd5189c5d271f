//! Flame emission field reconstruction with anisotropic 3D Gaussians.
//!
//! A flame is represented as a set of emissive Gaussians that are splatted
//! into each calibrated camera and alpha-composited front to back. The
//! parameters (and small per-camera pose corrections) are fitted to the
//! captured projections by gradient descent through an analytic backward
//! pass. A visual-hull carver seeds the initial Gaussians and an ART voxel
//! solver is provided as the comparison baseline.

pub mod art;
pub mod camera;
pub mod crossval;
pub mod error;
pub mod gaussian;
pub mod grid;
pub mod image;
pub mod init;
pub mod io;
pub mod memory;
pub mod metrics;
pub mod optim;
pub mod phantom;
pub mod render;
pub mod sh;
pub mod train;

pub use error::{Error, Result};
pub use gaussian::{Gaussian3D, GaussianSet};
pub use image::Image;
