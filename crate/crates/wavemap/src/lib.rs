//! Numerical laboratory for k-equivariant wave maps into the 2-sphere.
//!
//! The radial reduction of the k-equivariant wave map system is the scalar
//! wave equation
//!
//! ```text
//! psi_tt = psi_rr + psi_r / r - k^2 sin(2 psi) / (2 r^2),    r > 0,
//! ```
//!
//! with the harmonic-map profile `Q(r) = 2 arctan(r^k)` as the basic bubble.
//! This crate provides the grids, closed-form profiles, energy and distance
//! functionals, a finite-difference evolution engine, modulation fitting,
//! virial functionals, interaction integrals, and the reduced modulation ODE
//! built on top of them.
//!
//! Conventions used throughout:
//! - pairings drop the angular factor: `<f|g> = integral of f g r dr`;
//! - the H norm is `(integral of (f')^2 + k^2 f^2 / r^2 against r dr)^(1/2)`,
//!   invariant under `f(. / lambda)`;
//! - `f_lambda` denotes the H-type rescaling `f(. / lambda)` and
//!   `f_ulambda` the L^2-type rescaling `f(. / lambda) / lambda`.

pub mod asymptotics;
pub mod error;
pub mod evolve;
pub mod functionals;
pub mod grid;
pub mod modulation;
pub mod statics;
pub mod util;
pub mod virial;

pub use asymptotics::{
    interaction_report, interaction_summary_csv, kappa1, ode_integrate, rate_fit,
    InteractionReport, OdeHalt, OdeSeries, OdeState, RateFit, RateModel, ReportRow,
    TimeDirection, INTERACTION_CSV_HEADER, ODE_CSV_HEADER, ZETA_EXIT,
};
pub use error::{Result, WmError};
pub use evolve::{init_state, n4, DiagRow, HaltReason, InitSpec, SimState, Trajectory};
pub use functionals::{
    bisection_scales, bogomolnyi_defect, bubble_distance, energy, gfun, grid_scan_distance,
    BubbleFit, FitMode,
};
pub use grid::{DiffOp, FieldPair, GridKind, QuadResult, RadialGrid, Rescale, Weight};
pub use modulation::{
    bfunc, coercivity_quotient, fit_orthogonal, mod_matrix, zeta_value, BParts, ModMatrix,
    ModulationState, ETA0, MODULATION_CSV_HEADER,
};
pub use statics::{BubbleFamily, BubbleOrder, CutoffZ, VirialConstants, VirialProfile};
pub use virial::{
    chi_virial, omega_parts, omega_r, virial_pairing, virial_record, virial_residual,
    VirialRecord, VirialSeries, VIRIAL_CSV_HEADER,
};
