//! Ultra weak variational formulation (UWVF) solver for the time-harmonic
//! Maxwell equations on tetrahedral meshes, discretized with vector plane-wave
//! bases, together with an equivalent interior-penalty DG flux formulation
//! used for cross-validation.

pub mod assembly;
pub mod cli;
pub mod mesh;
pub mod planewave;
pub mod postprocess;
pub mod quadrature;
pub mod solve;

pub use num_complex::Complex64;

