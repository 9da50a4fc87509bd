//! Absolute and difference EIT on box-shaped tanks.
//!
//! The crate contains a complete electrode model forward solver, discrete
//! Neumann-to-Dirichlet / Dirichlet-to-Neumann algebra, three reconstruction
//! methods built on complex geometrical optics (Calderon's linearization and
//! the `t^exp` / `t^0` scattering-transform methods), a Tikhonov linear
//! difference reference method, phantom simulation and evaluation metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod calderon;
pub mod dn;
pub mod error;
pub mod forward;
pub mod geometry;
pub mod lindiff;
pub mod mesh;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod quadrature;
pub mod sparse;
pub mod tmethods;
pub mod voxel;

pub use error::{EitError, ErrorKind, Result};
