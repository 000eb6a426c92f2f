//! Forward Fokker-Planck engine: density propagation and the PDE bootstrap
//! calibration.

pub mod adi;
pub mod calibrate;
pub mod density;
pub mod fokker_planck;

pub use calibrate::{calibrate_pde, PdeCalibration, PdeRunStats};
pub use density::{expectation_term_pde, DensityGrid3, ReducedDensity};
pub use fokker_planck::{build_mesh, fokker_planck_step, forward_densities, initial_density, PdeSpec, StepStats};
