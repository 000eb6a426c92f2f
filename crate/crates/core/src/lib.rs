//! FX local volatility calibration with stochastic domestic and foreign
//! short rates.
//!
//! The spot follows a local-volatility diffusion while both short rates
//! follow Hull-White dynamics. The crate provides:
//!
//! * Hull-White analytics and yield curves ([`rates`]),
//! * implied-vol and call-price surfaces with the classical Dupire formula
//!   ([`surfaces`]),
//! * the local-volatility formula corrected for stochastic rates
//!   ([`localvol`]),
//! * Monte Carlo ([`mc`]) and forward PDE ([`pde`]) bootstrap calibrations,
//! * a local/stochastic hybrid with a Schobel-Zhu volatility factor
//!   ([`hybrid`]),
//! * CSV/JSON input and output helpers ([`io`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

/// Version of this crate.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod calibration;
pub mod error;
pub mod hybrid;
pub mod io;
pub mod localvol;
pub mod math;
pub mod mc;
pub mod pde;
pub mod rates;
pub mod surfaces;

pub use calibration::{calibrate_dupire, Calibration, CalibrationGrid, NodeDiagnostic, NodeStatus};
pub use error::{Error, Result};
pub use hybrid::{
    calibrate_hybrid_loc2, conditional_gamma2, conditional_gamma2_pde, mimic_local_vol_closed_form, simulate_hybrid_tforward,
    sz_tforward_moments, BinnedOptions, ConditionalGamma2, GammaSpec, HybridCalibration, HybridModel, HybridOptions,
    Pde4Spec, SchobelZhuParams, SzMoments,
};
pub use localvol::{
    Correlation3, ExpectationSource, ExpectationTerm, LocalVolGrid, ThreeFactorModel, TimeInterp,
};
pub use mc::{
    calibrate_mc, covariance_terms_mc, expectation_term_mc, simulate_tforward, CovarianceTerms, McCalibrationOptions,
    PathMode, SampleSet, Scheme, SimSpec, StateSample,
};
pub use pde::{
    calibrate_pde, expectation_term_pde, fokker_planck_step, forward_densities, DensityGrid3, PdeCalibration, PdeRunStats,
    PdeSpec,
};
pub use rates::{Currency, HullWhite, HullWhiteParams, PiecewiseConstant, YieldCurve};
pub use surfaces::{CallPriceSurface, ImpliedVolSurface, SurfacePartials};
