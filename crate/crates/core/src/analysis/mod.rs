//! Bound quantities, twin integrations and convergence studies.

pub mod bounds;
pub mod convergence;
pub mod hmon;
pub mod twin;

pub use bounds::{
    compute_k_c, compute_q, compute_theta_omega, growth_bound, BoundReport, ThetaOmega,
};
pub use convergence::{
    convergence_study, convergence_study_with, pairwise_slopes, reference_solution, ConvergenceRow,
    ConvergenceTable, ReferenceSpec, DEFAULT_DT_SWEEP,
};
pub use hmon::{h_monitor, HSeries};
pub use twin::{twin_integrate, EpsMode, TwinMode, TwinOptions, TwinReport, TwinTrace};
