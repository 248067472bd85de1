//! Verification battery: every analytical property the solver stack claims
//! is re-derived here by an independent route and measured against a pinned
//! tolerance. Each check owns its full configuration (grid, horizon,
//! physics, seeds), so a battery run is deterministic and self-contained.
//!
//! The checks, by name:
//!
//! * `taylor` — the reduced cost is first-order accurate against its adjoint
//!   gradient: remainders shrink quadratically in the step.
//! * `duality` — tangent/adjoint transpose identity at round-off for random
//!   seed pairs, zero seeds give a zero sweep, and a deliberately flipped
//!   coupling sign is caught loudly.
//! * `dense_oracle` — the gradient assembled dof-by-dof from unit-direction
//!   tangent runs matches the single adjoint sweep entrywise.
//! * `grad_fd` — central finite differences of the cost along random
//!   directions agree with the adjoint directional derivative.
//! * `mass` — spatial mean follows the source ODE exactly: conserved without
//!   a source, exact geometric decay with one.
//! * `energy` — the per-step defect of the discrete energy-dissipation
//!   balance contracts like dt² under time refinement.
//! * `kappa0_opt` — the smooth constrained problem reaches the
//!   projection-formula fixed point and survives Monte-Carlo variational-
//!   inequality sampling.
//! * `sparsity` — zero is optimal once the sparsity weight dominates the
//!   adjoint velocity of the uncontrolled trajectory, and the κ = 0 optimum
//!   is dense.
//! * `ball` — a binding norm constraint is active to round-off and the
//!   variational inequality holds on the sphere.
//! * `lipschitz` — the control-to-state map has a stable difference quotient
//!   under time refinement.
//!
//! The battery's eleventh check, `determinism`, exercises the file-output
//! pipeline and lives next to it in [`crate::run`].

use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::model::{ControlParams, Drag, PhysParams, Potential, Reaction, Series, Targets};
use crate::optim::{optimize, stationarity, ZERO_TOL};
use crate::sensitivity::{
    cost_seeds, duality_pair, evaluate_cost, reduced_gradient_smooth, solve_adjoint_seeded,
    solve_linearized, CostSeeds,
};
use crate::solver::{solve_state, Control, StateTrajectory, TimeGrid};
use crate::spectral::{random_smooth, random_smooth_vector, Field, Grid, VectorField};

/// Pinned tolerances with the reasoning that makes each attainable.
pub mod tolerances {
    /// Remainder slopes of a C² functional sit at 2; allow ±0.1 for the
    /// finite ε ladder (1e-2, 1e-3, 1e-4) and round-off at the small end.
    pub const TAYLOR_SLOPE_DEV: f64 = 0.1;
    /// The adjoint is the exact transpose of the tangent; the only gap
    /// sources are FFT round-off and the 1e-12 relative cut of the damped
    /// velocity iteration, both orders below 1e-9.
    pub const DUALITY_REL_GAP: f64 = 1e-9;
    /// Zero seeds propagate exact zeros through every linear sweep.
    pub const DUALITY_ZERO_ABS: f64 = 1e-14;
    /// A flipped coupling sign must move the pairing by more than 1e-3
    /// relative — the battery proves it can see sabotage.
    pub const MUTATION_MIN_GAP: f64 = 1e-3;
    /// Dense-vs-adjoint gradient on the variable-drag instance; limited by
    /// the velocity iteration cut, not by the transpose algebra.
    pub const DENSE_VARIABLE_REL: f64 = 1e-9;
    /// The 4×4 constant-drag instance inverts velocity solves exactly in
    /// Fourier space, leaving pure round-off.
    pub const DENSE_SMALL_REL: f64 = 1e-11;
    /// Central differences at ε = 1e-4 carry an O(ε²) ≈ 1e-8 model error
    /// against an exact gradient; 1e-5 leaves three orders of slack.
    pub const GRAD_FD_REL: f64 = 1e-5;
    /// Divergence-free transport cannot alias into the zero mode, so 200
    /// steps accumulate only round-off in the mean.
    pub const MASS_DRIFT_ABS: f64 = 1e-11;
    /// With a pure linear sink the mean recursion is exactly geometric.
    pub const MASS_GEOMETRIC_ABS: f64 = 1e-10;
    /// The per-step energy defect is O(dt²) once dt·k_max⁶ ≲ 1/4 (outside
    /// that regime the step's high-mode damping saturates and the defect is
    /// first order), so halving dt contracts the worst step by ~4;
    /// requiring ≤ 1/3 tolerates preasymptotic wiggle.
    pub const ENERGY_CONTRACTION: f64 = 1.0 / 3.0;
    /// Slack below this floor counts as exact dissipation.
    pub const ENERGY_FLOOR_REL: f64 = 1e-13;
    /// Optimizer residual demanded by the smooth-case criterion; the run
    /// itself converges to 2e-5, leaving a factor five.
    pub const KAPPA0_RESIDUAL: f64 = 1e-4;
    /// Monte-Carlo variational-inequality violation, normalized per
    /// direction by (β₄‖g‖ + ‖vᵃ‖ + κ√|Q|)·‖g̃ − g‖.
    pub const VI_VIOLATION_REL: f64 = 1e-6;
    /// A binding norm constraint is enforced by exact scaling.
    pub const BALL_NORM_REL: f64 = 1e-8;
    /// Difference quotients of the state map across a 4× range of dt stay
    /// within a factor two of each other.
    pub const LIPSCHITZ_RATIO_SPREAD: f64 = 2.0;
}

/// One verification check: `pass` iff `value <= threshold`.
#[derive(Clone, Debug, serde::Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
    pub seconds: f64,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Checks implemented in this module; the run layer appends `determinism`.
pub const CHECK_NAMES: &[&str] = &[
    "taylor",
    "duality",
    "dense_oracle",
    "grad_fd",
    "mass",
    "energy",
    "kappa0_opt",
    "sparsity",
    "ball",
    "lipschitz",
];

/// A sub-measurement folded into one check row; the row reports the one with
/// the worst value/threshold ratio.
struct Sub {
    label: &'static str,
    value: f64,
    threshold: f64,
}

fn fold(name: &'static str, subs: Vec<Sub>, started: Instant, extra: String) -> CheckResult {
    let mut detail = String::new();
    for s in &subs {
        if !detail.is_empty() {
            detail.push_str("; ");
        }
        detail.push_str(&format!("{}={:.3e} (tol {:.1e})", s.label, s.value, s.threshold));
    }
    if !extra.is_empty() {
        detail.push_str("; ");
        detail.push_str(&extra);
    }
    let binding = subs
        .iter()
        .max_by(|a, b| {
            (a.value / a.threshold)
                .partial_cmp(&(b.value / b.threshold))
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .expect("at least one sub-measurement");
    CheckResult {
        name,
        value: binding.value,
        threshold: binding.threshold,
        pass: subs.iter().all(|s| s.value <= s.threshold),
        seconds: started.elapsed().as_secs_f64(),
        detail,
    }
}

fn failed(name: &'static str, started: Instant, err: String) -> CheckResult {
    CheckResult {
        name,
        value: f64::INFINITY,
        threshold: 0.0,
        pass: false,
        seconds: started.elapsed().as_secs_f64(),
        detail: format!("aborted: {err}"),
    }
}

// ---------------------------------------------------------------------------
// Shared pinned configurations
// ---------------------------------------------------------------------------

struct Problem {
    grid: Arc<Grid>,
    time: TimeGrid,
    p: PhysParams,
    cp: ControlParams,
    targets: Targets,
    phi0: Field,
    g: Control,
    kappa_s: f64,
}

impl Problem {
    fn solve(&self, g: &Control) -> Result<StateTrajectory, String> {
        solve_state(&self.phi0, g, &self.time, &self.p, self.kappa_s).map_err(|e| e.to_string())
    }

    fn smooth_cost(&self, g: &Control) -> Result<f64, String> {
        let traj = self.solve(g)?;
        Ok(evaluate_cost(&traj, g, &self.targets, &self.cp, &self.time).smooth())
    }
}

/// Fully nonlinear derivative-check configuration. A 2π-periodic box keeps
/// |k| = m of order one so the stabilized-step multiplier leaves the
/// couplings visible (a unit box would crush the mutation signal below its
/// detection threshold).
fn nonlinear_problem() -> Problem {
    let two_pi = 2.0 * std::f64::consts::PI;
    let grid = Grid::new(&[24, 24], &[two_pi, two_pi]).unwrap();
    let time = TimeGrid::new(0.6, 6).unwrap();
    let p = PhysParams {
        eta: 0.6,
        drag: Drag::Smooth { min: 1.0, max: 3.0 },
        nu: 0.8,
        sigma: 0.4,
        reaction: Reaction::Tanh { amplitude: 0.3 },
        potential: Potential::Quartic,
    };
    let kappa_s = p.default_stabilization();
    let cp = ControlParams {
        radius: 1e6,
        beta: [1.0, 1.0, 1.0, 0.5],
        kappa: 0.0,
        ..ControlParams::default()
    };
    let mut rng = ChaCha20Rng::seed_from_u64(0x5eed_0001);
    let targets = Targets {
        v_q: Series::Constant(random_smooth_vector(&grid, &mut rng, 0.3, 3.0)),
        phi_q: Series::Constant(random_smooth(&grid, &mut rng, 0.3, 3.0)),
        phi_t: random_smooth(&grid, &mut rng, 0.3, 3.0),
    };
    let mut phi0 = random_smooth(&grid, &mut rng, 0.4, 3.0);
    phi0.axpy(1.0, &Field::constant(&grid, 0.05));
    let g = Control::from_intervals(
        (0..time.n_steps).map(|_| random_smooth_vector(&grid, &mut rng, 0.6, 3.0)).collect(),
    );
    Problem { grid, time, p, cp, targets, phi0, g, kappa_s }
}

/// Optimization configuration: constant drag (exact velocity solves), light
/// tracking against a dominant Tikhonov weight for fast linear convergence.
fn optimization_problem(beta: [f64; 4], kappa: f64, radius: f64, tol_rel: f64) -> Problem {
    let two_pi = 2.0 * std::f64::consts::PI;
    let grid = Grid::new(&[16, 16], &[two_pi, two_pi]).unwrap();
    let time = TimeGrid::new(0.4, 8).unwrap();
    let p = PhysParams {
        eta: 0.8,
        drag: Drag::Constant { value: 2.0 },
        nu: 0.6,
        sigma: 0.2,
        reaction: Reaction::Zero,
        potential: Potential::Quartic,
    };
    let kappa_s = p.default_stabilization();
    let cp = ControlParams { radius, beta, kappa, tol_rel, max_iters: 500, alpha0: None };
    let mut rng = ChaCha20Rng::seed_from_u64(0x5eed_0002);
    let targets = Targets {
        v_q: Series::Constant(random_smooth_vector(&grid, &mut rng, 0.5, 3.0)),
        phi_q: Series::Constant(random_smooth(&grid, &mut rng, 0.3, 3.0)),
        phi_t: random_smooth(&grid, &mut rng, 0.3, 3.0),
    };
    let mut phi0 = random_smooth(&grid, &mut rng, 0.3, 3.0);
    phi0.axpy(1.0, &Field::constant(&grid, 0.1));
    let g = Control::zeros(&grid, time.n_steps);
    Problem { grid, time, p, cp, targets, phi0, g, kappa_s }
}

fn random_control(grid: &Arc<Grid>, n: usize, rng: &mut ChaCha20Rng, amp: f64) -> Control {
    Control::from_intervals((0..n).map(|_| random_smooth_vector(grid, rng, amp, 2.0)).collect())
}

// ---------------------------------------------------------------------------
// Checks
// ---------------------------------------------------------------------------

fn check_taylor() -> CheckResult {
    let started = Instant::now();
    let pr = nonlinear_problem();
    let run = || -> Result<(Vec<f64>, String), String> {
        let traj = pr.solve(&pr.g)?;
        let sweep = crate::sensitivity::solve_adjoint(
            &traj, &pr.targets, &pr.cp, &pr.time, &pr.p, pr.kappa_s,
        )
        .map_err(|e| e.to_string())?;
        let grad = reduced_gradient_smooth(&pr.g, &sweep, pr.cp.beta[3], pr.time.dt());
        let j0 = evaluate_cost(&traj, &pr.g, &pr.targets, &pr.cp, &pr.time).smooth();

        let mut rng = ChaCha20Rng::seed_from_u64(0x5eed_0010);
        let epsilons = [1e-2, 1e-3, 1e-4];
        let mut slopes = Vec::new();
        let mut lines = Vec::new();
        for dir in 0..3 {
            let u = random_control(&pr.grid, pr.time.n_steps, &mut rng, 1.0);
            let du = grad.dot_q(&u, pr.time.dt());
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for &eps in &epsilons {
                let mut gp = pr.g.clone();
                gp.axpy(eps, &u);
                let r = (pr.smooth_cost(&gp)? - j0 - eps * du).abs();
                xs.push(eps.ln());
                ys.push(r.max(1e-300).ln());
            }
            let xm = xs.iter().sum::<f64>() / xs.len() as f64;
            let ym = ys.iter().sum::<f64>() / ys.len() as f64;
            let slope = xs
                .iter()
                .zip(&ys)
                .map(|(x, y)| (x - xm) * (y - ym))
                .sum::<f64>()
                / xs.iter().map(|x| (x - xm) * (x - xm)).sum::<f64>();
            lines.push(format!("dir{dir} slope={slope:.4}"));
            slopes.push(slope);
        }
        Ok((slopes, lines.join(", ")))
    };
    match run() {
        Ok((slopes, extra)) => {
            let worst_dev =
                slopes.iter().map(|s| (s - 2.0).abs()).fold(0.0, f64::max);
            fold(
                "taylor",
                vec![Sub {
                    label: "max|slope-2|",
                    value: worst_dev,
                    threshold: tolerances::TAYLOR_SLOPE_DEV,
                }],
                started,
                extra,
            )
        }
        Err(e) => failed("taylor", started, e),
    }
}

fn check_duality(mutate: bool) -> CheckResult {
    let started = Instant::now();
    let pr = nonlinear_problem();
    let run = || -> Result<(f64, f64), String> {
        let traj = pr.solve(&pr.g)?;
        let n = pr.time.n_steps;
        let mut rng = ChaCha20Rng::seed_from_u64(0x5eed_0020);
        let mut worst = 0.0f64;
        for _ in 0..10 {
            let seeds = CostSeeds {
                a_v: (0..n)
                    .map(|_| random_smooth_vector(&pr.grid, &mut rng, 1.0, 2.0))
                    .collect(),
                s_phi: (0..n).map(|_| random_smooth(&pr.grid, &mut rng, 1.0, 2.0)).collect(),
            };
            let u = random_control(&pr.grid, n, &mut rng, 1.0);
            let tangent = solve_linearized(&traj, &u, &pr.time, &pr.p, pr.kappa_s)
                .map_err(|e| e.to_string())?;
            let sweep =
                solve_adjoint_seeded(&traj, &seeds, &pr.time, &pr.p, pr.kappa_s, mutate)
                    .map_err(|e| e.to_string())?;
            let (lhs, rhs) = duality_pair(&tangent, &seeds, &sweep, &u);
            let gap = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-30);
            worst = worst.max(gap);
        }
        // Zero seeds must give an exactly zero sweep.
        let zero_seeds = CostSeeds {
            a_v: (0..n).map(|_| VectorField::zeros(&pr.grid)).collect(),
            s_phi: (0..n).map(|_| Field::zeros(&pr.grid)).collect(),
        };
        let zero_sweep =
            solve_adjoint_seeded(&traj, &zero_seeds, &pr.time, &pr.p, pr.kappa_s, mutate)
                .map_err(|e| e.to_string())?;
        let zero_norm =
            zero_sweep.dv.iter().map(|d| d.l2_norm()).fold(0.0, f64::max);
        Ok((worst, zero_norm))
    };
    match run() {
        Ok((worst, zero_norm)) => fold(
            "duality",
            vec![
                Sub {
                    label: "max_rel_gap",
                    value: worst,
                    threshold: tolerances::DUALITY_REL_GAP,
                },
                Sub {
                    label: "zero_seed_norm",
                    value: zero_norm,
                    threshold: tolerances::DUALITY_ZERO_ABS,
                },
            ],
            started,
            if mutate {
                format!(
                    "transpose mutation active; detectable iff gap > {:.0e}",
                    tolerances::MUTATION_MIN_GAP
                )
            } else {
                String::new()
            },
        ),
        Err(e) => failed("duality", started, e),
    }
}

/// Dense gradient via one tangent run per control dof, against the adjoint.
fn dense_instance(
    grid: &Arc<Grid>,
    time: &TimeGrid,
    p: &PhysParams,
    seed: u64,
) -> Result<f64, String> {
    let kappa_s = p.default_stabilization();
    let cp = ControlParams {
        radius: 1e6,
        beta: [1.0, 0.7, 0.9, 0.4],
        kappa: 0.0,
        ..ControlParams::default()
    };
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let targets = Targets {
        v_q: Series::Constant(random_smooth_vector(grid, &mut rng, 0.3, 1.5)),
        phi_q: Series::Constant(random_smooth(grid, &mut rng, 0.3, 1.5)),
        phi_t: random_smooth(grid, &mut rng, 0.3, 1.5),
    };
    let mut phi0 = random_smooth(grid, &mut rng, 0.4, 1.5);
    phi0.axpy(1.0, &Field::constant(grid, 0.05));
    let g = random_control(grid, time.n_steps, &mut rng, 0.5);

    let traj = solve_state(&phi0, &g, time, p, kappa_s).map_err(|e| e.to_string())?;
    let seeds = cost_seeds(&traj, &targets, &cp, time);
    let sweep = solve_adjoint_seeded(&traj, &seeds, time, p, kappa_s, false)
        .map_err(|e| e.to_string())?;
    let grad = reduced_gradient_smooth(&g, &sweep, cp.beta[3], time.dt());

    let dt = time.dt();
    let cell = grid.cell_volume();
    let mut err_sq = 0.0;
    let mut ref_sq = 0.0;
    for step in 0..time.n_steps {
        for comp in 0..grid.dim() {
            for node in 0..grid.n_nodes() {
                let mut u = Control::zeros(grid, time.n_steps);
                u.at_mut(step).comps[comp].data_mut()[node] = 1.0;
                let tangent = solve_linearized(&traj, &u, time, p, kappa_s)
                    .map_err(|e| e.to_string())?;
                let (lhs, _) = duality_pair(&tangent, &seeds, &sweep, &u);
                let dense = lhs + cp.beta[3] * dt * cell * g.at(step).comps[comp].data()[node];
                let adj = dt * cell * grad.at(step).comps[comp].data()[node];
                err_sq += (dense - adj) * (dense - adj);
                ref_sq += dense * dense;
            }
        }
    }
    Ok(err_sq.sqrt() / ref_sq.sqrt().max(1e-300))
}

fn check_dense_oracle() -> CheckResult {
    let started = Instant::now();
    let two_pi = 2.0 * std::f64::consts::PI;
    let run = || -> Result<(f64, f64), String> {
        let grid_a = Grid::new(&[8, 8], &[two_pi, two_pi]).map_err(|e| e.to_string())?;
        let time_a = TimeGrid::new(0.3, 3).map_err(|e| e.to_string())?;
        let p_a = PhysParams {
            eta: 0.6,
            drag: Drag::Smooth { min: 1.0, max: 3.0 },
            nu: 0.8,
            sigma: 0.5,
            reaction: Reaction::Tanh { amplitude: 0.2 },
            potential: Potential::Quartic,
        };
        let err_a = dense_instance(&grid_a, &time_a, &p_a, 0x5eed_0030)?;

        let grid_b = Grid::new(&[4, 4], &[two_pi, two_pi]).map_err(|e| e.to_string())?;
        let time_b = TimeGrid::new(0.1, 1).map_err(|e| e.to_string())?;
        let p_b = PhysParams {
            eta: 0.8,
            drag: Drag::Constant { value: 2.0 },
            nu: 0.6,
            sigma: 0.5,
            reaction: Reaction::Tanh { amplitude: 0.2 },
            potential: Potential::Quartic,
        };
        let err_b = dense_instance(&grid_b, &time_b, &p_b, 0x5eed_0031)?;
        Ok((err_a, err_b))
    };
    match run() {
        Ok((err_a, err_b)) => fold(
            "dense_oracle",
            vec![
                Sub {
                    label: "variable_drag_8x8x3",
                    value: err_a,
                    threshold: tolerances::DENSE_VARIABLE_REL,
                },
                Sub {
                    label: "constant_drag_4x4x1",
                    value: err_b,
                    threshold: tolerances::DENSE_SMALL_REL,
                },
            ],
            started,
            String::new(),
        ),
        Err(e) => failed("dense_oracle", started, e),
    }
}

fn check_grad_fd() -> CheckResult {
    let started = Instant::now();
    let pr = nonlinear_problem();
    let run = || -> Result<(f64, String), String> {
        let traj = pr.solve(&pr.g)?;
        let sweep = crate::sensitivity::solve_adjoint(
            &traj, &pr.targets, &pr.cp, &pr.time, &pr.p, pr.kappa_s,
        )
        .map_err(|e| e.to_string())?;
        let grad = reduced_gradient_smooth(&pr.g, &sweep, pr.cp.beta[3], pr.time.dt());
        let mut rng = ChaCha20Rng::seed_from_u64(0x5eed_0040);
        let eps = 1e-4;
        let mut worst = 0.0f64;
        let mut lines = Vec::new();
        for dir in 0..5 {
            let u = random_control(&pr.grid, pr.time.n_steps, &mut rng, 1.0);
            let mut gp = pr.g.clone();
            gp.axpy(eps, &u);
            let mut gm = pr.g.clone();
            gm.axpy(-eps, &u);
            let fd = (pr.smooth_cost(&gp)? - pr.smooth_cost(&gm)?) / (2.0 * eps);
            let an = grad.dot_q(&u, pr.time.dt());
            let rel = (fd - an).abs() / (1.0 + an.abs());
            lines.push(format!("dir{dir}={rel:.2e}"));
            worst = worst.max(rel);
        }
        Ok((worst, lines.join(", ")))
    };
    match run() {
        Ok((worst, extra)) => fold(
            "grad_fd",
            vec![Sub {
                label: "max_rel_err",
                value: worst,
                threshold: tolerances::GRAD_FD_REL,
            }],
            started,
            extra,
        ),
        Err(e) => failed("grad_fd", started, e),
    }
}

fn check_mass() -> CheckResult {
    let started = Instant::now();
    let run = || -> Result<(f64, f64), String> {
        let grid = Grid::new(&[32, 32], &[1.0, 1.0]).map_err(|e| e.to_string())?;
        let time = TimeGrid::new(0.05, 200).map_err(|e| e.to_string())?;
        let base = PhysParams {
            eta: 0.5,
            drag: Drag::Smooth { min: 1.0, max: 2.0 },
            nu: 1.0,
            sigma: 0.0,
            reaction: Reaction::Zero,
            potential: Potential::Quartic,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(0x5eed_0050);
        let mut phi0 = random_smooth(&grid, &mut rng, 0.3, 3.0);
        phi0.axpy(1.0, &Field::constant(&grid, 0.1));
        let g = random_control(&grid, time.n_steps, &mut rng, 0.5);

        // (a) no source: conserved mean.
        let traj = solve_state(&phi0, &g, &time, &base, base.default_stabilization())
            .map_err(|e| e.to_string())?;
        let m0 = traj.steps[0].mean;
        let drift = traj.steps.iter().map(|s| (s.mean - m0).abs()).fold(0.0, f64::max);

        // (b) linear sink: exactly geometric mean.
        let sink = PhysParams { sigma: 7.0, ..base };
        let traj2 = solve_state(&phi0, &g, &time, &sink, sink.default_stabilization())
            .map_err(|e| e.to_string())?;
        let dt = time.dt();
        let m0 = traj2.steps[0].mean;
        let geo_err = traj2
            .steps
            .iter()
            .map(|s| (s.mean - m0 * (1.0 - sink.sigma * dt).powi(s.step as i32)).abs())
            .fold(0.0, f64::max);
        Ok((drift, geo_err))
    };
    match run() {
        Ok((drift, geo_err)) => fold(
            "mass",
            vec![
                Sub {
                    label: "sourceless_drift",
                    value: drift,
                    threshold: tolerances::MASS_DRIFT_ABS,
                },
                Sub {
                    label: "geometric_error",
                    value: geo_err,
                    threshold: tolerances::MASS_GEOMETRIC_ABS,
                },
            ],
            started,
            "200 steps, variable drag, quartic well, random control".into(),
        ),
        Err(e) => failed("mass", started, e),
    }
}

fn check_energy() -> CheckResult {
    let started = Instant::now();
    let run = || -> Result<(Vec<f64>, f64), String> {
        // The defect of the discrete balance is second order only while
        // dt·k⁶ stays small for every retained mode; an 8-point axis keeps
        // the band at |m| ≤ 2 (k_max⁶ = 64), so the coarsest dt = 3.1e-3
        // puts the whole band in that regime with dt·k_max⁶ = 0.2.
        let two_pi = 2.0 * std::f64::consts::PI;
        let grid = Grid::new(&[8, 8], &[two_pi, two_pi]).map_err(|e| e.to_string())?;
        let p = PhysParams {
            eta: 0.6,
            drag: Drag::Smooth { min: 1.0, max: 3.0 },
            nu: 0.8,
            sigma: 0.0,
            reaction: Reaction::Zero,
            potential: Potential::Quartic,
        };
        let kappa_s = p.default_stabilization();
        let mut rng = ChaCha20Rng::seed_from_u64(0x5eed_0060);
        let raw = random_smooth(&grid, &mut rng, 0.5, 1.0);
        // Burn in past the fast initial relaxation (timescale 1/k_max⁶ ≈
        // 0.01) so the measured window has curvature that varies slowly on
        // the coarsest dt; otherwise the coarse run undersamples the
        // transient peak and the contraction ratio is polluted.
        let burn = TimeGrid::new(0.2, 64).map_err(|e| e.to_string())?;
        let phi0 = solve_state(&raw, &Control::zeros(&grid, 64), &burn, &p, kappa_s)
            .map_err(|e| e.to_string())?
            .phi
            .last()
            .unwrap()
            .clone();
        let t_final = 0.2;
        let mut slacks = Vec::new();
        let mut e0 = 0.0;
        for &n in &[64usize, 128, 256] {
            let time = TimeGrid::new(t_final, n).map_err(|e| e.to_string())?;
            let g = Control::zeros(&grid, n);
            let traj =
                solve_state(&phi0, &g, &time, &p, kappa_s).map_err(|e| e.to_string())?;
            e0 = traj.steps[0].energy;
            let dt = time.dt();
            let mut worst = 0.0f64;
            for i in 0..n {
                let defect = traj.steps[i + 1].energy - traj.steps[i].energy
                    + dt * traj.steps[i].dissipation.unwrap();
                worst = worst.max(defect.max(0.0));
            }
            slacks.push(worst);
        }
        Ok((slacks, e0))
    };
    match run() {
        Ok((slacks, e0)) => {
            let floor = tolerances::ENERGY_FLOOR_REL * (1.0 + e0.abs());
            let ratio = |coarse: f64, fine: f64| -> f64 {
                if coarse <= floor {
                    0.0 // already at round-off; any refinement is fine
                } else {
                    fine / coarse
                }
            };
            let r1 = ratio(slacks[0], slacks[1]);
            let r2 = ratio(slacks[1], slacks[2]);
            fold(
                "energy",
                vec![Sub {
                    label: "max_contraction",
                    value: r1.max(r2),
                    threshold: tolerances::ENERGY_CONTRACTION,
                }],
                started,
                format!(
                    "per-step slack {:.3e} -> {:.3e} -> {:.3e} over dt halvings (floor {floor:.1e})",
                    slacks[0], slacks[1], slacks[2]
                ),
            )
        }
        Err(e) => failed("energy", started, e),
    }
}

/// Monte-Carlo variational-inequality sampling at a candidate optimum.
fn vi_violation(
    pr: &Problem,
    g: &Control,
    va: &Control,
    n_dirs: usize,
    seed: u64,
) -> f64 {
    let dt = pr.time.dt();
    let mut grad = g.clone();
    grad.scale(pr.cp.beta[3]);
    grad.axpy(-1.0, va);
    let vol_q = pr.grid.volume() * pr.time.t_final;
    let base_scale =
        pr.cp.beta[3] * g.norm_q(dt) + va.norm_q(dt) + pr.cp.kappa * vol_q.sqrt();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n_dirs {
        let raw = random_control(&pr.grid, pr.time.n_steps, &mut rng, 1.0);
        let cand = crate::optim::project_ball(&raw, pr.cp.radius, dt);
        let mut diff = cand.clone();
        diff.axpy(-1.0, g);
        let step_norm = diff.norm_q(dt);
        if step_norm <= 1e-14 {
            continue;
        }
        let vi = grad.dot_q(&diff, dt)
            + pr.cp.kappa * (cand.l1_q(dt) - g.l1_q(dt));
        let scale = base_scale.max(1e-30) * step_norm;
        worst = worst.max((-vi).max(0.0) / scale);
    }
    worst
}

fn adjoint_velocity_at(pr: &Problem, g: &Control) -> Result<Control, String> {
    let traj = pr.solve(g)?;
    let sweep = crate::sensitivity::solve_adjoint(
        &traj, &pr.targets, &pr.cp, &pr.time, &pr.p, pr.kappa_s,
    )
    .map_err(|e| e.to_string())?;
    Ok(sweep.adjoint_velocity(pr.time.dt()))
}

fn check_kappa0_opt() -> CheckResult {
    let started = Instant::now();
    let pr = optimization_problem([0.05, 0.05, 0.05, 1.0], 0.0, 1e3, 2e-5);
    let run = || -> Result<(f64, f64, usize), String> {
        let out = optimize(
            &pr.phi0, &pr.g, &pr.targets, &pr.cp, &pr.time, &pr.p, pr.kappa_s, |_| {},
        )
        .map_err(|e| e.to_string())?;
        if !out.converged {
            return Err(format!(
                "no convergence within {} iterations (last residual {:.3e})",
                pr.cp.max_iters,
                out.rows.last().map(|r| r.residual).unwrap_or(f64::NAN)
            ));
        }
        let va = adjoint_velocity_at(&pr, &out.control)?;
        let residual = stationarity(&out.control, &va, &pr.cp, pr.time.dt());
        let viol = vi_violation(&pr, &out.control, &va, 100, 0x5eed_0070);
        Ok((residual, viol, out.iterations))
    };
    match run() {
        Ok((residual, viol, iters)) => fold(
            "kappa0_opt",
            vec![
                Sub {
                    label: "projection_residual",
                    value: residual,
                    threshold: tolerances::KAPPA0_RESIDUAL,
                },
                Sub {
                    label: "vi_violation_100dirs",
                    value: viol,
                    threshold: tolerances::VI_VIOLATION_REL,
                },
            ],
            started,
            format!("converged in {iters} steps"),
        ),
        Err(e) => failed("kappa0_opt", started, e),
    }
}

fn check_sparsity() -> CheckResult {
    let started = Instant::now();
    let run = || -> Result<(f64, f64, f64, String), String> {
        // Adjoint velocity of the uncontrolled trajectory sets the scale.
        let pr0 = optimization_problem([0.05, 0.05, 0.05, 1.0], 0.0, 1e3, 1e-4);
        let va0 = adjoint_velocity_at(&pr0, &Control::zeros(&pr0.grid, pr0.time.n_steps))?;
        let kappa_max = 1.05 * va0.max_pointwise_norm();

        let mut table = Vec::new();
        let mut dense_fraction = 0.0;
        let mut zero_norm = 0.0;
        let mut zero_fraction_at_max = 0.0;
        for (i, factor) in [0.0, 0.25, 0.5, 1.0].iter().enumerate() {
            let kappa = factor * kappa_max;
            let pr = optimization_problem([0.05, 0.05, 0.05, 1.0], kappa, 1e3, 1e-4);
            let out = optimize(
                &pr.phi0, &pr.g, &pr.targets, &pr.cp, &pr.time, &pr.p, pr.kappa_s, |_| {},
            )
            .map_err(|e| e.to_string())?;
            if !out.converged {
                return Err(format!("kappa={kappa:.3e}: no convergence"));
            }
            let frac = out.control.zero_fraction(ZERO_TOL);
            let norm = out.control.norm_q(pr.time.dt());
            table.push(format!(
                "kappa={kappa:.3e}: zero_fraction={frac:.3}, norm={norm:.3e}, iters={}",
                out.iterations
            ));
            if i == 0 {
                dense_fraction = frac;
            }
            if i == 3 {
                zero_norm = norm;
                zero_fraction_at_max = frac;
            }
        }
        Ok((dense_fraction, zero_norm, zero_fraction_at_max, table.join("; ")))
    };
    match run() {
        Ok((dense_fraction, zero_norm, frac_max, table)) => fold(
            "sparsity",
            vec![
                Sub {
                    label: "kappa0_zero_fraction",
                    value: dense_fraction,
                    threshold: 0.999,
                },
                Sub { label: "kappamax_norm", value: zero_norm, threshold: 1e-14 },
                Sub {
                    label: "kappamax_off_deficit",
                    value: 1.0 - frac_max,
                    threshold: 1e-12,
                },
            ],
            started,
            table,
        ),
        Err(e) => failed("sparsity", started, e),
    }
}

fn check_ball() -> CheckResult {
    let started = Instant::now();
    // Strong velocity tracking against a tight ball: the optimum must sit on
    // the sphere.
    let pr = optimization_problem([1.0, 0.0, 0.0, 1.0], 0.0, 0.05, 1e-5);
    let run = || -> Result<(f64, f64, f64, usize), String> {
        let out = optimize(
            &pr.phi0, &pr.g, &pr.targets, &pr.cp, &pr.time, &pr.p, pr.kappa_s, |_| {},
        )
        .map_err(|e| e.to_string())?;
        if !out.converged {
            return Err(format!(
                "no convergence within {} iterations (last residual {:.3e})",
                pr.cp.max_iters,
                out.rows.last().map(|r| r.residual).unwrap_or(f64::NAN)
            ));
        }
        let norm = out.control.norm_q(pr.time.dt());
        let va = adjoint_velocity_at(&pr, &out.control)?;
        let viol = vi_violation(&pr, &out.control, &va, 100, 0x5eed_0080);
        Ok(((norm - pr.cp.radius).abs() / pr.cp.radius, viol, norm, out.iterations))
    };
    match run() {
        Ok((norm_dev, viol, norm, iters)) => fold(
            "ball",
            vec![
                Sub {
                    label: "norm_deviation",
                    value: norm_dev,
                    threshold: tolerances::BALL_NORM_REL,
                },
                Sub {
                    label: "vi_violation_100dirs",
                    value: viol,
                    threshold: tolerances::VI_VIOLATION_REL,
                },
            ],
            started,
            format!("radius {:.3e}, final norm {norm:.6e}, {iters} steps", pr.cp.radius),
        ),
        Err(e) => failed("ball", started, e),
    }
}

fn check_lipschitz() -> CheckResult {
    let started = Instant::now();
    let run = || -> Result<(Vec<f64>, f64), String> {
        let two_pi = 2.0 * std::f64::consts::PI;
        let grid = Grid::new(&[16, 16], &[two_pi, two_pi]).map_err(|e| e.to_string())?;
        let p = PhysParams {
            eta: 0.6,
            drag: Drag::Smooth { min: 1.0, max: 3.0 },
            nu: 0.8,
            sigma: 0.3,
            reaction: Reaction::Tanh { amplitude: 0.2 },
            potential: Potential::Quartic,
        };
        let kappa_s = p.default_stabilization();
        let mut rng = ChaCha20Rng::seed_from_u64(0x5eed_0090);
        let mut phi0 = random_smooth(&grid, &mut rng, 0.4, 3.0);
        phi0.axpy(1.0, &Field::constant(&grid, 0.05));
        let base = TimeGrid::new(0.24, 6).map_err(|e| e.to_string())?;
        let g1 = random_control(&grid, base.n_steps, &mut rng, 0.6);
        let g2 = random_control(&grid, base.n_steps, &mut rng, 0.6);

        let mut ratios = Vec::new();
        for factor in [1usize, 2, 4] {
            let time = base.refined(factor);
            let dt = time.dt();
            let r1 = g1.refine(factor);
            let r2 = g2.refine(factor);
            let t1 = solve_state(&phi0, &r1, &time, &p, kappa_s).map_err(|e| e.to_string())?;
            let t2 = solve_state(&phi0, &r2, &time, &p, kappa_s).map_err(|e| e.to_string())?;
            let mut dist_sq = 0.0;
            for n in 0..time.n_steps {
                let mut dphi = t1.phi[n + 1].clone();
                dphi.axpy(-1.0, &t2.phi[n + 1]);
                let mut dv = t1.v[n].clone();
                dv.axpy(-1.0, &t2.v[n]);
                dist_sq += dt
                    * (crate::spectral::inner_l2(&dphi, &dphi)
                        + crate::spectral::inner_l2_vec(&dv, &dv));
            }
            let mut dg = r1.clone();
            dg.axpy(-1.0, &r2);
            ratios.push(dist_sq.sqrt() / dg.norm_q(dt));
        }
        let spread = ratios.iter().cloned().fold(0.0, f64::max)
            / ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        Ok((ratios, spread))
    };
    match run() {
        Ok((ratios, spread)) => fold(
            "lipschitz",
            vec![Sub {
                label: "ratio_spread",
                value: spread,
                threshold: tolerances::LIPSCHITZ_RATIO_SPREAD,
            }],
            started,
            format!(
                "difference quotients {} at dt, dt/2, dt/4",
                ratios.iter().map(|r| format!("{r:.4e}")).collect::<Vec<_>>().join(", ")
            ),
        ),
        Err(e) => failed("lipschitz", started, e),
    }
}

/// Run one named check; `None` for an unknown name.
pub fn run_check(name: &str, mutate: bool) -> Option<CheckResult> {
    Some(match name {
        "taylor" => check_taylor(),
        "duality" => check_duality(mutate),
        "dense_oracle" => check_dense_oracle(),
        "grad_fd" => check_grad_fd(),
        "mass" => check_mass(),
        "energy" => check_energy(),
        "kappa0_opt" => check_kappa0_opt(),
        "sparsity" => check_sparsity(),
        "ball" => check_ball(),
        "lipschitz" => check_lipschitz(),
        _ => return None,
    })
}

/// Run the library checks, all of them or a selection, in battery order.
/// Unknown names are an error naming the offender.
pub fn run_selected(names: Option<&[String]>, mutate: bool) -> Result<VerifyReport, String> {
    let selected: Vec<&str> = match names {
        None => CHECK_NAMES.to_vec(),
        Some(list) => {
            for n in list {
                if !CHECK_NAMES.contains(&n.as_str()) {
                    return Err(format!(
                        "unknown check '{n}'; available: {}",
                        CHECK_NAMES.join(", ")
                    ));
                }
            }
            CHECK_NAMES.iter().copied().filter(|c| list.iter().any(|n| n == c)).collect()
        }
    };
    let mut report = VerifyReport::default();
    for name in selected {
        let result = run_check(name, mutate).expect("names validated above");
        report.checks.push(result);
    }
    Ok(report)
}

/// Verify that a sabotaged transpose cannot slip through the duality check.
pub fn mutation_is_detectable(result: &CheckResult) -> bool {
    result.name == "duality" && !result.pass && result.value > tolerances::MUTATION_MIN_GAP
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duality_check_passes_and_detects_mutation() {
        let normal = run_check("duality", false).unwrap();
        assert!(normal.pass, "duality battery check failed: {}", normal.detail);
        assert!(normal.value <= tolerances::DUALITY_REL_GAP);

        let mutated = run_check("duality", true).unwrap();
        assert!(!mutated.pass, "sabotage must fail the check");
        assert!(
            mutation_is_detectable(&mutated),
            "mutated gap {:.3e} not loud enough",
            mutated.value
        );
    }

    #[test]
    fn selection_validates_names() {
        assert!(run_selected(Some(&["no_such_check".into()]), false).is_err());
        let repo = run_selected(Some(&["mass".into()]), false).unwrap();
        assert_eq!(repo.checks.len(), 1);
        assert_eq!(repo.checks[0].name, "mass");
        assert!(repo.checks[0].pass, "mass check failed: {}", repo.checks[0].detail);
    }
}
