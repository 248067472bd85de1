//! Forward solver for the coupled Brinkman / sixth-order phase system on the
//! periodic torus:
//!
//! ```text
//!   −ηΔv + λ(φ)v + ∇p = µ∇φ + g,   div v = 0,
//!   ∂tφ + v·∇φ − Δµ = S(φ),
//!   µ = −Δw + f'(φ)w + νw,          w = −Δφ + f(φ).
//! ```
//!
//! Time stepping treats the stiff sixth-order part with an unconditionally
//! stable multiplier on the increment,
//!
//! ```text
//!   φ̂_{n+1} = φ̂_n + dt Ĝ_n / (1 + dt(|k|⁶ + κ_s|k|⁴)),
//!   Ĝ_n = Δµ̂_n − (v_n·∇φ_n)^ + Ŝ(φ_n),
//! ```
//!
//! so exact steady states of Ĝ are exact fixed points of the scheme. The
//! velocity solve at each step inverts A(φ) = −ηΔ + λ̄ + ℙD[(λ(φ) − λ̄)·] on
//! band-limited divergence-free fields: exactly (diagonal in Fourier space)
//! when λ is constant, by a damped-coefficient Picard iteration otherwise
//! (contraction factor (λ* − λ_*)/(λ* + λ_*) < 1). Every nodal product feeding
//! back into the dynamics is passed through the 2/3 mask, so all evolved
//! fields stay band-limited; in particular the pairing of a divergence-free
//! velocity with ∇φ has no aliased contribution to the spatial mean, which is
//! what makes discrete mass conservation hold to round-off.

use std::sync::Arc;

use thiserror::Error;

use crate::model::{chemical_potential, source_spec, PhysParams};
use crate::spectral::{
    inner_l2, masked_product, masked_spec, spec_inner, Field, Grid, Spec, VectorField, VectorSpec,
};

/// Relative-update threshold of the Picard iteration for variable drag.
pub const PICARD_TOL: f64 = 1e-12;
/// Iteration cap of the Picard loop; exceeding it is a hard solver error.
pub const PICARD_MAX_ITERS: usize = 200;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(
        "velocity solve stalled: relative update {update:.3e} after {iters} iterations \
         (drag contrast too large for the damped iteration)"
    )]
    PicardStall { iters: usize, update: f64 },
    #[error("non-finite {context} at step {step}; reduce dt or check parameters")]
    NonFinite { context: &'static str, step: usize },
    #[error("control has {got} intervals but the time grid has {want} steps")]
    ControlLength { got: usize, want: usize },
    #[error("{0} lives on a different grid than the initial phase field")]
    GridMismatch(&'static str),
    #[error("invalid parameter: {0}")]
    BadParams(String),
}

/// Uniform partition of [0, T] into `n_steps` intervals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    pub t_final: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_final: f64, n_steps: usize) -> Result<Self, SolverError> {
        if !(t_final.is_finite() && t_final > 0.0) || n_steps == 0 {
            return Err(SolverError::BadParams(format!(
                "time grid needs t_final > 0 and n_steps >= 1, got ({t_final}, {n_steps})"
            )));
        }
        Ok(TimeGrid { t_final, n_steps })
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.n_steps as f64
    }

    /// Same horizon with `factor`× as many steps.
    pub fn refined(&self, factor: usize) -> TimeGrid {
        TimeGrid { t_final: self.t_final, n_steps: self.n_steps * factor }
    }
}

/// Piecewise-constant-in-time distributed control: one vector field per
/// interval [t_n, t_{n+1}). All space-time norms use the dt-weighted sum that
/// the cost functional is built from.
#[derive(Clone)]
pub struct Control {
    intervals: Vec<VectorField>,
}

impl Control {
    pub fn zeros(grid: &Arc<Grid>, n_steps: usize) -> Control {
        Control { intervals: (0..n_steps).map(|_| VectorField::zeros(grid)).collect() }
    }

    pub fn from_intervals(intervals: Vec<VectorField>) -> Control {
        assert!(!intervals.is_empty(), "a control needs at least one interval");
        Control { intervals }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.intervals[0].grid()
    }

    pub fn n_steps(&self) -> usize {
        self.intervals.len()
    }

    pub fn at(&self, n: usize) -> &VectorField {
        &self.intervals[n]
    }

    pub fn at_mut(&mut self, n: usize) -> &mut VectorField {
        &mut self.intervals[n]
    }

    pub fn intervals(&self) -> &[VectorField] {
        &self.intervals
    }

    /// ⟨g, h⟩_{L²(Q)} = Σ_n dt ⟨g_n, h_n⟩_{L²(Ω)}.
    pub fn dot_q(&self, other: &Control, dt: f64) -> f64 {
        assert_eq!(self.n_steps(), other.n_steps());
        self.intervals
            .iter()
            .zip(&other.intervals)
            .map(|(a, b)| {
                a.comps.iter().zip(&b.comps).map(|(x, y)| inner_l2(x, y)).sum::<f64>()
            })
            .sum::<f64>()
            * dt
    }

    pub fn norm_q(&self, dt: f64) -> f64 {
        self.dot_q(self, dt).max(0.0).sqrt()
    }

    /// ∫_Q |g| with the pointwise Euclidean norm: Σ_n dt ∫_Ω |g_n(x)| dx.
    pub fn l1_q(&self, dt: f64) -> f64 {
        let cell = self.grid().cell_volume();
        self.intervals
            .iter()
            .map(|g| g.magnitude().data().iter().sum::<f64>() * cell)
            .sum::<f64>()
            * dt
    }

    pub fn axpy(&mut self, a: f64, other: &Control) {
        assert_eq!(self.n_steps(), other.n_steps());
        for (mine, theirs) in self.intervals.iter_mut().zip(&other.intervals) {
            mine.axpy(a, theirs);
        }
    }

    pub fn scale(&mut self, a: f64) {
        for g in &mut self.intervals {
            g.scale(a);
        }
    }

    /// The same piecewise-constant function of time on a grid with `factor`×
    /// as many steps: every interval value is repeated.
    pub fn refine(&self, factor: usize) -> Control {
        let mut intervals = Vec::with_capacity(self.n_steps() * factor);
        for g in &self.intervals {
            for _ in 0..factor {
                intervals.push(g.clone());
            }
        }
        Control { intervals }
    }

    /// max over nodes and intervals of the pointwise Euclidean norm |g(x,t)|.
    pub fn max_pointwise_norm(&self) -> f64 {
        self.intervals.iter().map(|g| g.magnitude().max_abs()).fold(0.0, f64::max)
    }

    /// Fraction of space-time nodes with |g(x,t)| ≤ `tol`.
    pub fn zero_fraction(&self, tol: f64) -> f64 {
        let mut zeros = 0usize;
        let mut total = 0usize;
        for g in &self.intervals {
            let mag = g.magnitude();
            zeros += mag.data().iter().filter(|&&m| m <= tol).count();
            total += mag.data().len();
        }
        zeros as f64 / total as f64
    }
}

/// Velocity solve A(φ)v = ℙF on band-limited divergence-free fields, with the
/// constant part λ̄ = (λ_* + λ*)/2 absorbed into the diagonal.
pub struct BrinkmanOperator {
    eta: f64,
    lam_bar: f64,
    /// λ(φ) − λ̄ at the nodes; `None` when the drag is constant.
    drag_dev: Option<Field>,
    /// λ(φ) at the nodes (kept for residual/energy evaluations).
    drag: Field,
}

/// Result of one velocity solve.
pub struct BrinkmanSolve {
    pub v: VectorField,
    pub v_spec: VectorSpec,
    /// Picard iterations used (0 when the drag is constant).
    pub iterations: usize,
    /// Relative in-band residual ‖A v − ℙF‖ / max(‖ℙF‖, tiny).
    pub residual: f64,
}

impl BrinkmanOperator {
    pub fn new(phi: &Field, p: &PhysParams) -> BrinkmanOperator {
        let lam_bar = p.drag.midpoint();
        let drag = phi.map(|s| p.drag.value(s));
        let drag_dev = if p.drag.is_constant() {
            None
        } else {
            Some(phi.map(|s| p.drag.value(s) - lam_bar))
        };
        BrinkmanOperator { eta: p.eta, lam_bar, drag_dev, drag }
    }

    pub fn drag_field(&self) -> &Field {
        &self.drag
    }

    /// Apply A to a band-limited divergence-free velocity.
    pub fn apply(&self, v: &VectorField, v_spec: &VectorSpec) -> VectorSpec {
        let eta = self.eta;
        let lam_bar = self.lam_bar;
        let mut out = v_spec.apply_radial(|k2| eta * k2 + lam_bar);
        if let Some(dev) = &self.drag_dev {
            let mut fluct = VectorSpec {
                comps: v.comps.iter().map(|c| masked_product(dev, c)).collect(),
            };
            fluct.leray_project();
            out.axpy(1.0, &fluct);
        }
        out
    }

    /// Solve A v = ℙ`force` (the projection is applied internally).
    pub fn solve(&self, force: &VectorSpec) -> Result<BrinkmanSolve, SolverError> {
        let eta = self.eta;
        let lam_bar = self.lam_bar;
        let mut rhs = force.clone();
        rhs.leray_project();
        let rhs_norm = rhs.l2_norm();

        let diag_inv = move |k2: f64| 1.0 / (eta * k2 + lam_bar);
        let mut v_spec = rhs.apply_radial(diag_inv);
        let mut iterations = 0usize;

        if let Some(dev) = &self.drag_dev {
            let mut v = v_spec.to_nodal();
            loop {
                // v^{m+1} = (ηk² + λ̄)^{-1} ℙ[F − D[(λ(φ) − λ̄) v^m]].
                let mut corr = VectorSpec {
                    comps: v.comps.iter().map(|c| masked_product(dev, c)).collect(),
                };
                corr.scale(-1.0);
                corr.axpy(1.0, &rhs);
                corr.leray_project();
                let next = corr.apply_radial(diag_inv);

                let mut diff = next.clone();
                diff.axpy(-1.0, &v_spec);
                let update = diff.l2_norm();
                let scale = next.l2_norm().max(rhs_norm).max(f64::MIN_POSITIVE);
                v_spec = next;
                v = v_spec.to_nodal();
                iterations += 1;
                if update <= PICARD_TOL * scale {
                    break;
                }
                if iterations >= PICARD_MAX_ITERS {
                    return Err(SolverError::PicardStall {
                        iters: iterations,
                        update: update / scale,
                    });
                }
            }
            let mut res = self.apply(&v, &v_spec);
            res.axpy(-1.0, &rhs);
            let residual = res.l2_norm() / rhs_norm.max(f64::MIN_POSITIVE);
            Ok(BrinkmanSolve { v, v_spec, iterations, residual })
        } else {
            let v = v_spec.to_nodal();
            // Diagonal solve: exact up to round-off; report a true residual
            // anyway so diagnostics never lie.
            let mut res = v_spec.apply_radial(|k2| eta * k2 + lam_bar);
            res.axpy(-1.0, &rhs);
            let residual = res.l2_norm() / rhs_norm.max(f64::MIN_POSITIVE);
            Ok(BrinkmanSolve { v, v_spec, iterations, residual })
        }
    }
}

/// Stabilized sixth-order increment step:
/// φ̂ + dt Ĝ / (1 + dt(|k|⁶ + κ_s|k|⁴)).
pub fn step_phase(phi_spec: &Spec, g_spec: &Spec, dt: f64, kappa_s: f64) -> Spec {
    let mut out = phi_spec.clone();
    let k2s = phi_spec.grid().k2().to_vec();
    for ((o, g), &k2) in out.data_mut().iter_mut().zip(g_spec.data()).zip(&k2s) {
        let m6 = k2 * k2 * k2 + kappa_s * k2 * k2;
        *o += dt * g / (1.0 + dt * m6);
    }
    out
}

/// Per-step diagnostics mirrored into `series.csv`.
#[derive(Clone, Debug)]
pub struct StepDiagnostics {
    pub step: usize,
    pub time: f64,
    /// Free energy E(φ_n).
    pub energy: f64,
    /// Spatial mean of φ_n.
    pub mean: f64,
    pub max_abs_phi: f64,
    /// ‖v_n‖_{L²(Ω)}; `None` at the final time (no interval starts there).
    pub v_norm: Option<f64>,
    /// ‖∇µ_n‖² + η‖∇v_n‖² + ∫λ(φ_n)|v_n|², the discrete dissipation rate.
    pub dissipation: Option<f64>,
    /// |mean(φ_{n+1}) − mean(φ_n) − dt·mean(S_n)| reported at step n+1: the
    /// defect of the mean equation, pure transport round-off.
    pub mean_ode_residual: Option<f64>,
    pub brinkman_iterations: Option<usize>,
    pub brinkman_residual: Option<f64>,
}

/// Full forward trajectory with everything the linearized and adjoint sweeps
/// revisit: φ_0..φ_N (nodal and spectral), and per interval v_n, µ_n, w_n.
pub struct StateTrajectory {
    pub phi: Vec<Field>,
    pub phi_spec: Vec<Spec>,
    pub v: Vec<VectorField>,
    pub mu: Vec<Field>,
    pub w: Vec<Field>,
    pub steps: Vec<StepDiagnostics>,
}

impl StateTrajectory {
    pub fn n_steps(&self) -> usize {
        self.v.len()
    }
}

/// March the coupled system over the whole time grid.
///
/// The initial phase is dealiased on ingestion; every field the trajectory
/// stores is band-limited. The control enters the velocity force through the
/// same mask, so the reported velocities depend on the in-band part of g
/// only, while cost terms evaluate the raw control.
pub fn solve_state(
    phi0: &Field,
    control: &Control,
    time: &TimeGrid,
    p: &PhysParams,
    kappa_s: f64,
) -> Result<StateTrajectory, SolverError> {
    p.validate().map_err(SolverError::BadParams)?;
    if control.n_steps() != time.n_steps {
        return Err(SolverError::ControlLength {
            got: control.n_steps(),
            want: time.n_steps,
        });
    }
    if !Arc::ptr_eq(phi0.grid(), control.grid()) && phi0.grid().sizes() != control.grid().sizes() {
        return Err(SolverError::GridMismatch("control"));
    }
    let grid = phi0.grid().clone();
    let n = time.n_steps;
    let dt = time.dt();

    let mut phi_spec0 = phi0.to_spec();
    phi_spec0.dealias();
    let mut phi = phi_spec0.to_nodal();

    let mut traj = StateTrajectory {
        phi: Vec::with_capacity(n + 1),
        phi_spec: Vec::with_capacity(n + 1),
        v: Vec::with_capacity(n),
        mu: Vec::with_capacity(n),
        w: Vec::with_capacity(n),
        steps: Vec::with_capacity(n + 1),
    };

    let mut warned_large_phi = false;
    let mut phi_spec = phi_spec0;
    let mut prev_mean_residual: Option<f64> = None;

    for step in 0..=n {
        let t = step as f64 * dt;
        let max_abs = phi.max_abs();
        if !max_abs.is_finite() {
            return Err(SolverError::NonFinite { context: "phase field", step });
        }
        if max_abs > 1.5 && !warned_large_phi {
            log::warn!("|phi| reached {max_abs:.3} at t = {t:.3e}; the double-well tail may stiffen the step");
            warned_large_phi = true;
        }

        // Chemical potential chain and energy at time t_n.
        let chem = chemical_potential(&phi, &phi_spec, p);
        let grad_phi_spec = phi_spec.gradient();
        let mut grad_sq = 0.0;
        for c in &grad_phi_spec.comps {
            grad_sq += spec_inner(c, c);
        }
        let well: f64 =
            phi.data().iter().map(|&s| p.potential.value(s)).sum::<f64>() * grid.cell_volume();
        let energy = 0.5 * spec_inner(&chem.w_spec, &chem.w_spec)
            + p.nu * (0.5 * grad_sq + well);
        let mean = phi_spec.mean();

        if step == n {
            traj.steps.push(StepDiagnostics {
                step,
                time: t,
                energy,
                mean,
                max_abs_phi: max_abs,
                v_norm: None,
                dissipation: None,
                mean_ode_residual: prev_mean_residual.take(),
                brinkman_iterations: None,
                brinkman_residual: None,
            });
            traj.phi.push(phi.clone());
            traj.phi_spec.push(phi_spec.clone());
            break;
        }

        let grad_phi = grad_phi_spec.to_nodal();

        // Brinkman force F = D[µ∇φ] + D[g].
        let g_n = control.at(step);
        let mut force = VectorSpec {
            comps: grad_phi
                .comps
                .iter()
                .map(|dphi| masked_product(&chem.mu, dphi))
                .collect(),
        };
        for (f, gc) in force.comps.iter_mut().zip(&g_n.comps) {
            f.axpy(1.0, &masked_spec(gc));
        }

        let op = BrinkmanOperator::new(&phi, p);
        let solve = op.solve(&force)?;
        if !solve.v.l2_norm().is_finite() {
            return Err(SolverError::NonFinite { context: "velocity", step });
        }

        // Dissipation rate ‖∇µ‖² + η‖∇v‖² + ∫λ(φ)|v|².
        let grad_mu = chem.mu_spec.gradient();
        let mut diss = 0.0;
        for c in &grad_mu.comps {
            diss += spec_inner(c, c);
        }
        for c in &solve.v_spec.comps {
            let g = c.gradient();
            for gc in &g.comps {
                diss += p.eta * spec_inner(gc, gc);
            }
        }
        for c in &solve.v.comps {
            diss += inner_l2(&op.drag_field().product(c), c);
        }

        // Transport, source, and the stabilized step.
        let mut adv = Spec::zeros(&grid);
        for (vc, dphi) in solve.v.comps.iter().zip(&grad_phi.comps) {
            adv.axpy(1.0, &masked_product(vc, dphi));
        }
        let src = source_spec(&phi, &phi_spec, p);
        let mut g_total = chem.mu_spec.polyharmonic(1, 1.0); // Δµ
        g_total.axpy(-1.0, &adv);
        g_total.axpy(1.0, &src);

        let next_spec = step_phase(&phi_spec, &g_total, dt, kappa_s);
        let next = next_spec.to_nodal();

        // Defect of the mean equation: the k = 0 multiplier is 1, so any
        // difference from dt·mean(S) is aliasing-free transport round-off.
        let mean_residual = (next_spec.mean() - mean - dt * src.mean()).abs();

        traj.steps.push(StepDiagnostics {
            step,
            time: t,
            energy,
            mean,
            max_abs_phi: max_abs,
            v_norm: Some(solve.v.l2_norm()),
            dissipation: Some(diss),
            mean_ode_residual: prev_mean_residual.take(),
            brinkman_iterations: Some(solve.iterations),
            brinkman_residual: Some(solve.residual),
        });
        prev_mean_residual = Some(mean_residual);

        traj.phi.push(phi.clone());
        traj.phi_spec.push(phi_spec.clone());
        traj.v.push(solve.v);
        traj.mu.push(chem.mu);
        traj.w.push(chem.w);

        phi = next;
        phi_spec = next_spec;
    }

    Ok(traj)
}
