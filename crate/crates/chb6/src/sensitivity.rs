//! Cost functional, exact discrete tangent (directional state sensitivity),
//! and the discrete adjoint built as the exact transpose of the tangent.
//!
//! The reduced cost of a control g with state trajectory (φ, v) is
//!
//! ```text
//!   J(g) = ½β₁ Σₙ dt ‖vₙ − v_{Q,n}‖² + ½β₂ Σₙ dt ‖φ_{n+1} − φ_{Q,n}‖²
//!        + ½β₃ ‖φ_N − φ_T‖² + ½β₄ Σₙ dt ‖gₙ‖² + κ Σₙ dt ∫|gₙ|,
//! ```
//!
//! a left-endpoint quadrature in the velocity and control and a right-endpoint
//! quadrature in the phase (φ₀ is fixed data, so the first tracked phase is
//! φ₁). The tangent differentiates every operation of the forward step along
//! a control direction u; the adjoint sweep applies the transposed step
//! backwards, so the duality identity
//!
//! ```text
//!   Σₙ ⟨ωₙ, a_{v,n}⟩ + Σₘ ⟨ψₘ, sₘ⟩ = Σₙ ⟨uₙ, DVₙ⟩
//! ```
//!
//! holds to round-off by construction — it is linear algebra, not analysis.
//! The smooth part of the reduced gradient is β₄g + DV/dt; the adjoint
//! velocity is vᵃ = −DV/dt, so that gradient reads β₄g − vᵃ.

use crate::model::{ControlParams, PhysParams, Targets};
use crate::solver::{
    step_phase, BrinkmanOperator, Control, SolverError, StateTrajectory, TimeGrid,
};
use crate::spectral::{
    inner_l2, inner_l2_vec, masked_product, masked_spec, Field, Spec, VectorField, VectorSpec,
};

/// Additive parts of the cost functional.
#[derive(Clone, Copy, Debug)]
pub struct CostBreakdown {
    /// ½β₁ ∫_Q |v − v_Q|².
    pub tracking_v: f64,
    /// ½β₂ ∫_Q |φ − φ_Q|².
    pub tracking_phi: f64,
    /// ½β₃ ∫_Ω |φ(T) − φ_T|².
    pub terminal: f64,
    /// ½β₄ ∫_Q |g|².
    pub tikhonov: f64,
    /// κ ∫_Q |g|.
    pub sparsity: f64,
}

impl CostBreakdown {
    /// Everything except the non-smooth sparsity term.
    pub fn smooth(&self) -> f64 {
        self.tracking_v + self.tracking_phi + self.terminal + self.tikhonov
    }

    pub fn total(&self) -> f64 {
        self.smooth() + self.sparsity
    }
}

/// Evaluate the cost of a control along its trajectory.
pub fn evaluate_cost(
    traj: &StateTrajectory,
    g: &Control,
    targets: &Targets,
    cp: &ControlParams,
    time: &TimeGrid,
) -> CostBreakdown {
    let dt = time.dt();
    let n = traj.n_steps();
    let [b1, b2, b3, b4] = cp.beta;

    let mut tv = 0.0;
    if b1 > 0.0 {
        for (i, v) in traj.v.iter().enumerate() {
            let mut d = v.clone();
            d.axpy(-1.0, targets.v_q.at(i));
            tv += inner_l2_vec(&d, &d);
        }
    }
    let mut tp = 0.0;
    if b2 > 0.0 {
        for i in 0..n {
            let mut d = traj.phi[i + 1].clone();
            d.axpy(-1.0, targets.phi_q.at(i));
            tp += inner_l2(&d, &d);
        }
    }
    let mut term = 0.0;
    if b3 > 0.0 {
        let mut d = traj.phi[n].clone();
        d.axpy(-1.0, &targets.phi_t);
        term = 0.5 * b3 * inner_l2(&d, &d);
    }
    CostBreakdown {
        tracking_v: 0.5 * b1 * dt * tv,
        tracking_phi: 0.5 * b2 * dt * tp,
        terminal: term,
        tikhonov: 0.5 * b4 * g.dot_q(g, dt),
        sparsity: cp.kappa * g.l1_q(dt),
    }
}

/// Linear functionals seeding the adjoint: `a_v[n]` pairs the velocity
/// sensitivity ωₙ and `s_phi[m-1]` pairs the phase sensitivity ψₘ (m ≥ 1;
/// ψ₀ = 0 never pairs anything).
pub struct CostSeeds {
    pub a_v: Vec<VectorField>,
    pub s_phi: Vec<Field>,
}

/// Seeds of the actual tracking cost: a_{v,n} = β₁dt(vₙ − v_{Q,n}) and
/// sₘ = β₂dt(φₘ − φ_{Q,m-1}) + [m = N] β₃(φ_N − φ_T).
pub fn cost_seeds(
    traj: &StateTrajectory,
    targets: &Targets,
    cp: &ControlParams,
    time: &TimeGrid,
) -> CostSeeds {
    let dt = time.dt();
    let n = traj.n_steps();
    let [b1, b2, b3, _] = cp.beta;
    let a_v = (0..n)
        .map(|i| {
            let mut d = traj.v[i].clone();
            d.axpy(-1.0, targets.v_q.at(i));
            d.scale(b1 * dt);
            d
        })
        .collect();
    let s_phi = (1..=n)
        .map(|m| {
            let mut s = traj.phi[m].clone();
            s.axpy(-1.0, targets.phi_q.at(m - 1));
            s.scale(b2 * dt);
            if m == n {
                let mut t = traj.phi[n].clone();
                t.axpy(-1.0, &targets.phi_t);
                s.axpy(b3, &t);
            }
            s
        })
        .collect();
    CostSeeds { a_v, s_phi }
}

/// Tangent trajectory along a control direction.
pub struct TangentTrajectory {
    /// ψ₀..ψ_N (ψ₀ = 0).
    pub psi: Vec<Field>,
    /// ω₀..ω_{N−1}.
    pub omega: Vec<VectorField>,
}

/// Exact directional derivative of the forward march along direction `u`:
/// every operation of the step is differentiated, including the drag
/// linearization −λ'(φ)ψ v moved to the right-hand side of the velocity
/// solve.
pub fn solve_linearized(
    traj: &StateTrajectory,
    u: &Control,
    time: &TimeGrid,
    p: &PhysParams,
    kappa_s: f64,
) -> Result<TangentTrajectory, SolverError> {
    let n = traj.n_steps();
    if u.n_steps() != n {
        return Err(SolverError::ControlLength { got: u.n_steps(), want: n });
    }
    let grid = traj.phi[0].grid().clone();
    let dt = time.dt();
    let variable_drag = !p.drag.is_constant();

    let mut psi_spec = Spec::zeros(&grid);
    let mut out = TangentTrajectory {
        psi: Vec::with_capacity(n + 1),
        omega: Vec::with_capacity(n),
    };

    for step in 0..=n {
        let psi = psi_spec.to_nodal();
        out.psi.push(psi.clone());
        if step == n {
            break;
        }
        let phi = &traj.phi[step];
        let phi_spec = &traj.phi_spec[step];
        let w = &traj.w[step];
        let mu = &traj.mu[step];
        let v = &traj.v[step];

        // δw and δµ.
        let fp = phi.map(|s| p.potential.f_prime(s));
        let mut xi_spec = psi_spec.polyharmonic(1, -1.0);
        xi_spec.axpy(1.0, &masked_product(&fp, &psi));
        let xi = xi_spec.to_nodal();

        let fpp_w = phi.map(|s| p.potential.f_second(s)).product(w);
        let mut theta_spec = xi_spec.polyharmonic(1, -1.0);
        theta_spec.axpy(1.0, &masked_product(&fpp_w, &psi));
        theta_spec.axpy(1.0, &masked_product(&fp, &xi));
        theta_spec.axpy(p.nu, &xi_spec);
        let theta = theta_spec.to_nodal();

        let grad_phi = phi_spec.gradient().to_nodal();
        let grad_psi = psi_spec.gradient().to_nodal();

        // δF = D[θ∇φ] + D[µ∇ψ] + D[u] − D[λ'(φ)ψ v].
        let mut force = VectorSpec {
            comps: grad_phi.comps.iter().map(|d| masked_product(&theta, d)).collect(),
        };
        for (f, dpsi) in force.comps.iter_mut().zip(&grad_psi.comps) {
            f.axpy(1.0, &masked_product(mu, dpsi));
        }
        for (f, uc) in force.comps.iter_mut().zip(&u.at(step).comps) {
            f.axpy(1.0, &masked_spec(uc));
        }
        if variable_drag {
            let lp_psi = phi.map(|s| p.drag.derivative(s)).product(&psi);
            for (f, vc) in force.comps.iter_mut().zip(&v.comps) {
                f.axpy(-1.0, &masked_product(&lp_psi, vc));
            }
        }

        let op = BrinkmanOperator::new(phi, p);
        let omega_solve = op.solve(&force)?;
        let omega = omega_solve.v;

        // δ(v·∇φ) = ω·∇φ + v·∇ψ.
        let mut dadv = Spec::zeros(&grid);
        for (oc, dphi) in omega.comps.iter().zip(&grad_phi.comps) {
            dadv.axpy(1.0, &masked_product(oc, dphi));
        }
        for (vc, dpsi) in v.comps.iter().zip(&grad_psi.comps) {
            dadv.axpy(1.0, &masked_product(vc, dpsi));
        }

        // δS = −σψ + D[h'(φ)ψ].
        let mut dsrc = psi_spec.clone();
        dsrc.scale(-p.sigma);
        if !p.reaction.is_zero() {
            let hp = phi.map(|s| p.reaction.derivative(s));
            dsrc.axpy(1.0, &masked_product(&hp, &psi));
        }

        let mut dg = theta_spec.polyharmonic(1, 1.0); // Δθ
        dg.axpy(-1.0, &dadv);
        dg.axpy(1.0, &dsrc);

        psi_spec = step_phase(&psi_spec, &dg, dt, kappa_s);
        out.omega.push(omega);
    }
    Ok(out)
}

/// Result of the adjoint sweep: the per-interval fields DVₙ representing the
/// state part of the gradient, Σₙ ⟨DVₙ, uₙ⟩.
pub struct AdjointSweep {
    pub dv: Vec<VectorField>,
}

impl AdjointSweep {
    /// Adjoint velocity vᵃₙ = −DVₙ/dt as a per-interval control-space object.
    pub fn adjoint_velocity(&self, dt: f64) -> Control {
        Control::from_intervals(
            self.dv
                .iter()
                .map(|d| {
                    let mut v = d.clone();
                    v.scale(-1.0 / dt);
                    v
                })
                .collect(),
        )
    }
}

/// Transposed tangent sweep for arbitrary seeds. With `mutate_transpose` the
/// sign of the velocity-to-phase coupling (DVₙ)·∇φₙ is deliberately flipped;
/// the duality check must catch this.
pub fn solve_adjoint_seeded(
    traj: &StateTrajectory,
    seeds: &CostSeeds,
    time: &TimeGrid,
    p: &PhysParams,
    kappa_s: f64,
    mutate_transpose: bool,
) -> Result<AdjointSweep, SolverError> {
    let n = traj.n_steps();
    assert_eq!(seeds.a_v.len(), n, "one velocity seed per interval");
    assert_eq!(seeds.s_phi.len(), n, "one phase seed per step m = 1..N");
    let dt = time.dt();
    let variable_drag = !p.drag.is_constant();
    let coupling_sign = if mutate_transpose { -1.0 } else { 1.0 };

    // P_N = s_N (band-limited part; ψ is band-limited so nothing is lost).
    let mut p_spec = masked_spec(&seeds.s_phi[n - 1]);
    let mut dv_rev: Vec<VectorField> = Vec::with_capacity(n);

    for step in (0..n).rev() {
        let phi = &traj.phi[step];
        let phi_spec = &traj.phi_spec[step];
        let w = &traj.w[step];
        let mu = &traj.mu[step];
        let v = &traj.v[step];

        // q = K P_{n+1} with K the stabilized-step multiplier.
        let q_spec = p_spec.apply_radial(|k2| {
            1.0 / (1.0 + dt * (k2 * k2 * k2 + kappa_s * k2 * k2))
        });
        let q = q_spec.to_nodal();
        let grad_phi = phi_spec.gradient().to_nodal();

        // b = a_v − dt q ∇φ, then V = A⁻¹ℙD b.
        let mut b = VectorSpec {
            comps: seeds.a_v[step].comps.iter().map(masked_spec).collect(),
        };
        for (bc, dphi) in b.comps.iter_mut().zip(&grad_phi.comps) {
            bc.axpy(-dt, &masked_product(&q, dphi));
        }
        let op = BrinkmanOperator::new(phi, p);
        let v_solve = op.solve(&b)?;
        let dv = v_solve.v;

        // c = dt Δq + (DV)·∇φ  (cotangent of δµ).
        let mut c_spec = q_spec.polyharmonic(1, 1.0);
        c_spec.scale(dt);
        for (dc, dphi) in dv.comps.iter().zip(&grad_phi.comps) {
            c_spec.axpy(coupling_sign, &masked_product(dc, dphi));
        }
        let c = c_spec.to_nodal();

        // d = −Δc + f'(φ)·Dc + νc  (cotangent of δw).
        let fp = phi.map(|s| p.potential.f_prime(s));
        let mut d_spec = c_spec.polyharmonic(1, -1.0);
        d_spec.axpy(1.0, &masked_product(&fp, &c));
        d_spec.axpy(p.nu, &c_spec);
        let d = d_spec.to_nodal();

        // Assemble P_n.
        let mut p_new = p_spec.clone();
        if step >= 1 {
            p_new.axpy(1.0, &masked_spec(&seeds.s_phi[step - 1]));
        }
        p_new.axpy(-dt * p.sigma, &q_spec);
        let transport = VectorSpec {
            comps: v.comps.iter().map(|vc| masked_product(vc, &q)).collect(),
        };
        p_new.axpy(dt, &transport.divergence());
        if !p.reaction.is_zero() {
            let hp = phi.map(|s| p.reaction.derivative(s));
            p_new.axpy(dt, &masked_product(&hp, &q));
        }
        p_new.axpy(1.0, &d_spec.polyharmonic(1, -1.0));
        p_new.axpy(1.0, &masked_product(&fp, &d));
        let fpp_w = phi.map(|s| p.potential.f_second(s)).product(w);
        p_new.axpy(1.0, &masked_product(&fpp_w, &c));
        if variable_drag {
            let lp = phi.map(|s| p.drag.derivative(s));
            let v_dot_dv = v.dot(&dv);
            p_new.axpy(-1.0, &masked_product(&lp, &v_dot_dv));
        }
        let mu_dv = VectorSpec {
            comps: dv.comps.iter().map(|dc| masked_product(mu, dc)).collect(),
        };
        p_new.axpy(-1.0, &mu_dv.divergence());

        p_spec = p_new;
        dv_rev.push(dv);
    }
    dv_rev.reverse();
    Ok(AdjointSweep { dv: dv_rev })
}

/// Adjoint sweep seeded by the tracking cost.
pub fn solve_adjoint(
    traj: &StateTrajectory,
    targets: &Targets,
    cp: &ControlParams,
    time: &TimeGrid,
    p: &PhysParams,
    kappa_s: f64,
) -> Result<AdjointSweep, SolverError> {
    let seeds = cost_seeds(traj, targets, cp, time);
    solve_adjoint_seeded(traj, &seeds, time, p, kappa_s, false)
}

/// Smooth part of the reduced gradient: β₄g + DV/dt = β₄g − vᵃ.
pub fn reduced_gradient_smooth(
    g: &Control,
    sweep: &AdjointSweep,
    beta4: f64,
    dt: f64,
) -> Control {
    Control::from_intervals(
        g.intervals()
            .iter()
            .zip(&sweep.dv)
            .map(|(gn, dvn)| {
                let mut grad = dvn.clone();
                grad.scale(1.0 / dt);
                grad.axpy(beta4, gn);
                grad
            })
            .collect(),
    )
}

/// Both sides of the duality identity: the tangent paired with the seeds and
/// the control direction paired with the adjoint output.
pub fn duality_pair(
    tangent: &TangentTrajectory,
    seeds: &CostSeeds,
    sweep: &AdjointSweep,
    u: &Control,
) -> (f64, f64) {
    let mut lhs = 0.0;
    for (omega, a) in tangent.omega.iter().zip(&seeds.a_v) {
        lhs += inner_l2_vec(omega, a);
    }
    for (m, s) in seeds.s_phi.iter().enumerate() {
        lhs += inner_l2(&tangent.psi[m + 1], s);
    }
    let mut rhs = 0.0;
    for (un, dvn) in u.intervals().iter().zip(&sweep.dv) {
        rhs += inner_l2_vec(un, dvn);
    }
    (lhs, rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Drag, PhysParams, Potential, Reaction, Series};
    use crate::solver::solve_state;
    use crate::spectral::{random_smooth, random_smooth_vector, Grid};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::sync::Arc;

    fn nonlinear_params() -> PhysParams {
        PhysParams {
            eta: 0.6,
            drag: Drag::Smooth { min: 1.0, max: 3.0 },
            nu: 0.8,
            sigma: 0.4,
            reaction: Reaction::Tanh { amplitude: 0.3 },
            potential: Potential::Quartic,
        }
    }

    fn random_targets(grid: &Arc<Grid>, seed: u64) -> Targets {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Targets {
            v_q: Series::Constant(random_smooth_vector(grid, &mut rng, 0.3, 3.0)),
            phi_q: Series::Constant(random_smooth(grid, &mut rng, 0.3, 3.0)),
            phi_t: random_smooth(grid, &mut rng, 0.3, 3.0),
        }
    }

    fn control_params() -> ControlParams {
        ControlParams {
            radius: 100.0,
            beta: [1.0, 1.0, 1.0, 0.5],
            kappa: 0.0,
            ..ControlParams::default()
        }
    }

    struct Setup {
        grid: Arc<Grid>,
        time: TimeGrid,
        p: PhysParams,
        cp: ControlParams,
        targets: Targets,
        g: Control,
        kappa_s: f64,
    }

    fn nonlinear_setup() -> Setup {
        // A 2π-periodic box keeps |k| = m of order one, so the stabilized
        // step multiplier does not crush the velocity-to-phase coupling whose
        // sign the mutation check flips; on a unit box even the slowest mode
        // has dt|k|⁶ ≫ 1 and sabotage would hide below the detection
        // threshold.
        let two_pi = 2.0 * std::f64::consts::PI;
        let grid = Grid::new(&[24, 24], &[two_pi, two_pi]).unwrap();
        let time = TimeGrid::new(0.6, 6).unwrap();
        let p = nonlinear_params();
        let kappa_s = p.default_stabilization();
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let g = Control::from_intervals(
            (0..time.n_steps)
                .map(|_| random_smooth_vector(&grid, &mut rng, 0.6, 3.0))
                .collect(),
        );
        Setup {
            targets: random_targets(&grid, 78),
            grid,
            time,
            p,
            cp: control_params(),
            g,
            kappa_s,
        }
    }

    fn initial_phase(grid: &Arc<Grid>, seed: u64) -> Field {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut phi0 = random_smooth(grid, &mut rng, 0.4, 3.0);
        phi0.axpy(1.0, &Field::constant(grid, 0.05));
        phi0
    }

    fn reduced_cost(s: &Setup, g: &Control) -> CostBreakdown {
        let phi0 = initial_phase(&s.grid, 79);
        let traj = solve_state(&phi0, g, &s.time, &s.p, s.kappa_s).unwrap();
        evaluate_cost(&traj, g, &s.targets, &s.cp, &s.time)
    }

    #[test]
    fn duality_gap_is_round_off_and_mutation_is_caught() {
        let s = nonlinear_setup();
        let phi0 = initial_phase(&s.grid, 79);
        let traj = solve_state(&phi0, &s.g, &s.time, &s.p, s.kappa_s).unwrap();

        let mut rng = ChaCha20Rng::seed_from_u64(101);
        let n = s.time.n_steps;
        let seeds = CostSeeds {
            a_v: (0..n).map(|_| random_smooth_vector(&s.grid, &mut rng, 1.0, 2.0)).collect(),
            s_phi: (0..n).map(|_| random_smooth(&s.grid, &mut rng, 1.0, 2.0)).collect(),
        };
        let u = Control::from_intervals(
            (0..n).map(|_| random_smooth_vector(&s.grid, &mut rng, 1.0, 2.0)).collect(),
        );

        let tangent = solve_linearized(&traj, &u, &s.time, &s.p, s.kappa_s).unwrap();
        let sweep =
            solve_adjoint_seeded(&traj, &seeds, &s.time, &s.p, s.kappa_s, false).unwrap();
        let (lhs, rhs) = duality_pair(&tangent, &seeds, &sweep, &u);
        let scale = lhs.abs().max(rhs.abs()).max(1e-30);
        assert!(
            (lhs - rhs).abs() <= 5e-12 * scale,
            "duality gap {:.3e} (lhs {lhs:.6e}, rhs {rhs:.6e})",
            (lhs - rhs).abs() / scale
        );

        // The deliberately transposed-wrong sweep must blow the gap up.
        let broken =
            solve_adjoint_seeded(&traj, &seeds, &s.time, &s.p, s.kappa_s, true).unwrap();
        let (_, bad_rhs) = duality_pair(&tangent, &seeds, &broken, &u);
        assert!(
            (lhs - bad_rhs).abs() > 1e-3 * scale,
            "mutated transpose slipped through: gap {:.3e}",
            (lhs - bad_rhs).abs() / scale
        );
    }

    #[test]
    fn zero_seeds_give_identically_zero_adjoint() {
        let s = nonlinear_setup();
        let phi0 = initial_phase(&s.grid, 79);
        let traj = solve_state(&phi0, &s.g, &s.time, &s.p, s.kappa_s).unwrap();
        let n = s.time.n_steps;
        let seeds = CostSeeds {
            a_v: (0..n).map(|_| VectorField::zeros(&s.grid)).collect(),
            s_phi: (0..n).map(|_| Field::zeros(&s.grid)).collect(),
        };
        let sweep =
            solve_adjoint_seeded(&traj, &seeds, &s.time, &s.p, s.kappa_s, false).unwrap();
        for dv in &sweep.dv {
            assert!(dv.l2_norm() <= 1e-14);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let s = nonlinear_setup();
        let phi0 = initial_phase(&s.grid, 79);
        let traj = solve_state(&phi0, &s.g, &s.time, &s.p, s.kappa_s).unwrap();
        let sweep =
            solve_adjoint(&traj, &s.targets, &s.cp, &s.time, &s.p, s.kappa_s).unwrap();
        let grad = reduced_gradient_smooth(&s.g, &sweep, s.cp.beta[3], s.time.dt());

        let mut rng = ChaCha20Rng::seed_from_u64(202);
        let eps = 1e-4;
        for dir in 0..2 {
            let u = Control::from_intervals(
                (0..s.time.n_steps)
                    .map(|_| random_smooth_vector(&s.grid, &mut rng, 1.0, 2.0))
                    .collect(),
            );
            let mut gp = s.g.clone();
            gp.axpy(eps, &u);
            let mut gm = s.g.clone();
            gm.axpy(-eps, &u);
            let fd = (reduced_cost(&s, &gp).smooth() - reduced_cost(&s, &gm).smooth())
                / (2.0 * eps);
            let an = grad.dot_q(&u, s.time.dt());
            assert!(
                (fd - an).abs() <= 1e-5 * (1.0 + an.abs()),
                "direction {dir}: finite difference {fd:.8e} vs adjoint {an:.8e}"
            );
        }
    }

    #[test]
    fn taylor_remainder_is_second_order() {
        let s = nonlinear_setup();
        let phi0 = initial_phase(&s.grid, 79);
        let traj = solve_state(&phi0, &s.g, &s.time, &s.p, s.kappa_s).unwrap();
        let sweep =
            solve_adjoint(&traj, &s.targets, &s.cp, &s.time, &s.p, s.kappa_s).unwrap();
        let grad = reduced_gradient_smooth(&s.g, &sweep, s.cp.beta[3], s.time.dt());
        let j0 = reduced_cost(&s, &s.g).smooth();

        let mut rng = ChaCha20Rng::seed_from_u64(303);
        let u = Control::from_intervals(
            (0..s.time.n_steps)
                .map(|_| random_smooth_vector(&s.grid, &mut rng, 1.0, 2.0))
                .collect(),
        );
        let du = grad.dot_q(&u, s.time.dt());
        let remainder = |eps: f64| {
            let mut gp = s.g.clone();
            gp.axpy(eps, &u);
            (reduced_cost(&s, &gp).smooth() - j0 - eps * du).abs()
        };
        let r1 = remainder(1e-2);
        let r2 = remainder(1e-3);
        let slope = (r1 / r2).log10();
        assert!(
            (1.8..=2.2).contains(&slope),
            "remainder slope {slope:.3} (r(1e-2) = {r1:.3e}, r(1e-3) = {r2:.3e})"
        );
    }

    #[test]
    fn linear_configuration_gives_exact_directional_derivative() {
        // Zero potential, constant drag, no reaction, uniform initial phase:
        // the control-to-state map is exactly linear, so a symmetric
        // difference of the (quadratic) cost equals the adjoint derivative to
        // round-off at finite step size.
        let grid = Grid::new(&[16, 16], &[1.0, 1.0]).unwrap();
        let time = TimeGrid::new(5e-3, 5).unwrap();
        let p = PhysParams {
            eta: 1.0,
            drag: Drag::Constant { value: 2.0 },
            nu: 0.5,
            sigma: 0.0,
            reaction: Reaction::Zero,
            potential: Potential::Polynomial { coefficients: vec![] },
        };
        let kappa_s = 2.0;
        let cp = ControlParams {
            radius: 100.0,
            beta: [1.0, 1.0, 1.0, 0.5],
            kappa: 0.0,
            ..ControlParams::default()
        };
        let targets = random_targets(&grid, 404);
        let phi0 = Field::constant(&grid, 0.3);
        let mut rng = ChaCha20Rng::seed_from_u64(405);
        let g = Control::from_intervals(
            (0..5).map(|_| random_smooth_vector(&grid, &mut rng, 0.7, 2.0)).collect(),
        );
        let u = Control::from_intervals(
            (0..5).map(|_| random_smooth_vector(&grid, &mut rng, 1.0, 2.0)).collect(),
        );

        let traj = solve_state(&phi0, &g, &time, &p, kappa_s).unwrap();
        // φ must stay exactly uniform: no force couples back.
        for phi in &traj.phi {
            assert!((phi.max_abs() - 0.3).abs() <= 1e-13);
        }
        // The tangent phase stays identically zero.
        let tangent = solve_linearized(&traj, &u, &time, &p, kappa_s).unwrap();
        for psi in &tangent.psi {
            assert!(psi.max_abs() <= 1e-14);
        }

        let sweep = solve_adjoint(&traj, &targets, &cp, &time, &p, kappa_s).unwrap();
        let grad = reduced_gradient_smooth(&g, &sweep, cp.beta[3], time.dt());
        let du = grad.dot_q(&u, time.dt());

        let eval = |c: &Control| {
            let t = solve_state(&phi0, c, &time, &p, kappa_s).unwrap();
            evaluate_cost(&t, c, &targets, &cp, &time).smooth()
        };
        let eps = 0.1; // any step works: the cost is exactly quadratic
        let mut gp = g.clone();
        gp.axpy(eps, &u);
        let mut gm = g.clone();
        gm.axpy(-eps, &u);
        let sym = (eval(&gp) - eval(&gm)) / (2.0 * eps);
        assert!(
            (sym - du).abs() <= 1e-11 * (1.0 + du.abs()),
            "exact symmetric difference {sym:.12e} vs adjoint {du:.12e}"
        );
    }

    #[test]
    fn dense_gradient_matches_tangent_columns() {
        // Assemble the full gradient vector in control-dof space twice:
        // via the adjoint (one sweep) and via one tangent run per unit dof
        // paired with the cost seeds. Exact linear algebra, no differencing.
        let grid = Grid::new(&[4, 4], &[1.0, 1.0]).unwrap();
        let time = TimeGrid::new(1e-3, 1).unwrap();
        let p = PhysParams {
            eta: 0.8,
            drag: Drag::Constant { value: 2.0 },
            nu: 0.6,
            sigma: 0.5,
            reaction: Reaction::Tanh { amplitude: 0.2 },
            potential: Potential::Quartic,
        };
        let kappa_s = p.default_stabilization();
        let cp = ControlParams {
            radius: 100.0,
            beta: [1.0, 0.7, 0.9, 0.4],
            kappa: 0.0,
            ..ControlParams::default()
        };
        let targets = random_targets(&grid, 505);
        let phi0 = initial_phase(&grid, 506);
        let mut rng = ChaCha20Rng::seed_from_u64(507);
        let g = Control::from_intervals(vec![random_smooth_vector(&grid, &mut rng, 0.5, 1.0)]);

        let traj = solve_state(&phi0, &g, &time, &p, kappa_s).unwrap();
        let seeds = cost_seeds(&traj, &targets, &cp, &time);
        let sweep = solve_adjoint_seeded(&traj, &seeds, &time, &p, kappa_s, false).unwrap();
        let grad = reduced_gradient_smooth(&g, &sweep, cp.beta[3], time.dt());

        let dt = time.dt();
        let cell = grid.cell_volume();
        let n_nodes = grid.n_nodes();
        let dim = grid.dim();
        let mut max_err = 0.0f64;
        let mut max_ref = 0.0f64;
        for step in 0..time.n_steps {
            for comp in 0..dim {
                for node in 0..n_nodes {
                    let mut u = Control::zeros(&grid, time.n_steps);
                    u.at_mut(step).comps[comp].data_mut()[node] = 1.0;
                    let tangent = solve_linearized(&traj, &u, &time, &p, kappa_s).unwrap();
                    let (lhs, _) = duality_pair(&tangent, &seeds, &sweep, &u);
                    // Column of the dense gradient: state part from the
                    // tangent + Tikhonov part, in the dof metric dt·cellvol.
                    let dense = lhs + cp.beta[3] * dt * cell * g.at(step).comps[comp].data()[node];
                    let adj = dt * cell * grad.at(step).comps[comp].data()[node];
                    max_err = max_err.max((dense - adj).abs());
                    max_ref = max_ref.max(dense.abs());
                }
            }
        }
        assert!(
            max_err <= 1e-12 * max_ref.max(1e-30),
            "dense mismatch {max_err:.3e} against scale {max_ref:.3e}"
        );
    }
}
