//! Desk-scale solver and verification suite for sparse distributed optimal
//! control of Brinkman flow coupled with a sixth-order Cahn-Hilliard phase
//! equation on a periodic torus.
//!
//! The library is organized bottom-up:
//!
//! * [`spectral`] — torus grids, real FFTs, differential multipliers, Leray
//!   projection, dealiasing, inner products.
//! * [`model`] — physical parameters: double-well potentials, drag
//!   coefficient λ(φ), reaction source S(φ) = −σφ + h(φ), chemical potential
//!   chain w = −Δφ + f(φ), µ = −Δw + f'(φ)w + νw, and the free energy.
//! * [`solver`] — the forward problem: Brinkman velocity solve, semi-implicit
//!   phase step with a sixth-order implicit multiplier, full trajectories
//!   with per-step diagnostics, and piecewise-constant-in-time controls.
//! * [`sensitivity`] — the exact discrete tangent (linearized trajectory) and
//!   its exact transpose (adjoint sweep), plus the reduced gradient of the
//!   smooth cost.
//! * [`optim`] — tracking cost evaluation, proximal soft-thresholding for the
//!   L¹ term, norm-ball projection, subgradient selection, and the
//!   prox-projected gradient loop with backtracking.
//! * [`verify`] — the self-check battery: Taylor remainder slopes, transpose
//!   duality gaps, dense-matrix oracles, finite-difference gradient checks,
//!   mass/energy laws, optimality residuals, sparsity sweeps, Lipschitz
//!   stability probes.
//! * [`run`] — run configuration (JSON), synthetic initial data and targets,
//!   output files (CSV series, raw field snapshots, reports, plot scripts)
//!   and the orchestration entry points used by the CLI.

pub mod model;
pub mod optim;
pub mod run;
pub mod sensitivity;
pub mod solver;
pub mod spectral;
pub mod verify;
