//! Browser demo bindings for the solver core.
//!
//! Two interactive exhibits are exported through `wasm-bindgen`:
//!
//! * [`SimState`] — live phase separation inside a Brinkman flow on a large
//!   periodic box. The page advances the coupled system step by step, paints
//!   the phase field and the flow speed, and lets the user stir the mixture
//!   with a divergence-free vortex force of adjustable strength.
//! * [`ControlDemo`] — the sparse control loop on a small box. The page runs
//!   batches of proximal gradient iterations, paints the actuation magnitude
//!   with the switched-off region marked, and reports cost, stationarity
//!   residual, and the fraction of space-time nodes at exactly zero.
//!
//! Everything here is plain Rust over the core crate's public API, so the
//! crate also compiles and runs natively; its tests drive exactly the entry
//! points the page calls. Methods return `Result<_, String>` because strings
//! cross the JS boundary as exceptions without needing any JS glue types.
//!
//! Build for the web with `wasm-pack build --target web` (produces `pkg/`
//! next to `www/index.html`).

use std::f64::consts::TAU;
use std::sync::Arc;

use chb6::model::{
    chemical_potential, energy, source_spec, ControlParams, Drag, PhysParams, Potential, Reaction,
    Series, Targets,
};
use chb6::optim::optimize;
use chb6::sensitivity::cost_seeds;
use chb6::sensitivity::solve_adjoint_seeded;
use chb6::solver::{solve_state, step_phase, BrinkmanOperator, Control, TimeGrid};
use chb6::spectral::{
    masked_product, masked_spec, random_smooth, Field, Grid, Spec, VectorField, VectorSpec,
};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use wasm_bindgen::prelude::*;

/// Nodes with time-maximal |g| at or below this count as switched off in the
/// painted control map; matches the optimizer's zero-fraction tolerance.
const OFF_TOL: f64 = 1e-14;

// ---------------------------------------------------------------------------
// Color ramps. Piecewise-linear through equally spaced RGB stops.
// ---------------------------------------------------------------------------

/// Diverging ramp for the phase field: blue → near-white → orange.
const PHASE_STOPS: [[f64; 3]; 3] =
    [[38.0, 84.0, 170.0], [245.0, 245.0, 242.0], [226.0, 122.0, 40.0]];

/// Sequential ramp for magnitudes: near-black → teal → yellow.
const SPEED_STOPS: [[f64; 3]; 3] =
    [[12.0, 14.0, 32.0], [36.0, 150.0, 160.0], [250.0, 220.0, 90.0]];

/// Dark slate marking switched-off actuation cells.
const OFF_COLOR: [u8; 3] = [30, 34, 48];

fn ramp(stops: &[[f64; 3]; 3], t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * 2.0;
    let (a, b, s) = if t <= 1.0 { (stops[0], stops[1], t) } else { (stops[1], stops[2], t - 1.0) };
    let mut out = [0u8; 3];
    for (o, (x, y)) in out.iter_mut().zip(a.iter().zip(&b)) {
        *o = (x + (y - x) * s).round() as u8;
    }
    out
}

/// RGBA canvas buffer from per-node parameters `t(i) ∈ [0, 1]`.
fn paint(n_nodes: usize, stops: &[[f64; 3]; 3], t: impl Fn(usize) -> f64) -> Vec<u8> {
    let mut buf = Vec::with_capacity(4 * n_nodes);
    for i in 0..n_nodes {
        let c = ramp(stops, t(i));
        buf.extend_from_slice(&c);
        buf.push(255);
    }
    buf
}

/// Divergence-free four-vortex stir pattern on a square periodic box:
/// v = A(cos(kx)·sin(ky), −sin(kx)·cos(ky)) with k = 2π/L, so ∇·v = 0 and
/// max |v| = A.
fn swirl(grid: &Arc<Grid>, amplitude: f64) -> VectorField {
    let kx = TAU / grid.lengths()[0];
    let ky = TAU / grid.lengths()[1];
    let fx = Field::from_fn(grid, |x| amplitude * (kx * x[0]).cos() * (ky * x[1]).sin());
    let fy = Field::from_fn(grid, |x| -amplitude * (kx * x[0]).sin() * (ky * x[1]).cos());
    VectorField::from_comps(vec![fx, fy])
}

// ---------------------------------------------------------------------------
// Exhibit 1: live phase separation under flow.
// ---------------------------------------------------------------------------

/// Interactive forward simulation: spinodal decomposition of a near-symmetric
/// mixture, coupled to Brinkman flow whose drag is lower in one phase, on a
/// `size × size` box of side 16π. Each step mirrors the production time step:
/// chemical potential → capillary + stir force → velocity solve → transport
/// and stabilized phase update.
#[wasm_bindgen]
pub struct SimState {
    p: PhysParams,
    kappa_s: f64,
    dt: f64,
    phi: Field,
    phi_spec: Spec,
    /// Unit-amplitude stir pattern, pre-masked, scaled by `stir` each step.
    swirl_spec: VectorSpec,
    stir: f64,
    last_speed: Option<Field>,
    last_max_speed: f64,
    last_brinkman_iterations: usize,
    time: f64,
    steps: u64,
}

#[wasm_bindgen]
impl SimState {
    /// Fresh mixture on a `size × size` grid (even, 16..=128) with the given
    /// random seed for the initial phase noise.
    #[wasm_bindgen(constructor)]
    pub fn new(size: u32, seed: u32) -> Result<SimState, String> {
        if !(16..=128).contains(&size) || !size.is_multiple_of(2) {
            return Err(format!("size must be even and within 16..=128, got {size}"));
        }
        let n = size as usize;
        let length = 8.0 * TAU;
        let grid = Grid::new(&[n, n], &[length, length]).map_err(|e| e.to_string())?;
        let p = PhysParams {
            eta: 1.0,
            drag: Drag::Smooth { min: 1.0, max: 2.0 },
            nu: 1.0,
            sigma: 0.0,
            reaction: Reaction::Zero,
            potential: Potential::Quartic,
        };
        let kappa_s = p.default_stabilization();
        let mut rng = ChaCha20Rng::seed_from_u64(seed as u64);
        let phi = random_smooth(&grid, &mut rng, 0.1, 2.0).dealiased();
        let phi_spec = phi.to_spec();
        let mut swirl_spec = VectorSpec {
            comps: swirl(&grid, 1.0).comps.iter().map(masked_spec).collect(),
        };
        swirl_spec.leray_project();
        Ok(SimState {
            p,
            kappa_s,
            dt: 0.05,
            phi,
            phi_spec,
            swirl_spec,
            stir: 0.0,
            last_speed: None,
            last_max_speed: 0.0,
            last_brinkman_iterations: 0,
            time: 0.0,
            steps: 0,
        })
    }

    /// Strength of the vortex stir force (max pointwise magnitude).
    pub fn set_stir(&mut self, amplitude: f64) {
        self.stir = if amplitude.is_finite() { amplitude } else { 0.0 };
    }

    /// Advance `n` time steps. Errors (solver stall, non-finite fields)
    /// surface as JS exceptions with the offending step in the message.
    pub fn step(&mut self, n: u32) -> Result<(), String> {
        for _ in 0..n {
            self.advance_once()?;
        }
        Ok(())
    }

    fn advance_once(&mut self) -> Result<(), String> {
        let grid = self.phi.grid().clone();
        let chem = chemical_potential(&self.phi, &self.phi_spec, &self.p);
        let grad_phi = self.phi_spec.gradient().to_nodal();

        // Velocity force: capillary term plus the stir control.
        let mut force = VectorSpec {
            comps: grad_phi.comps.iter().map(|dphi| masked_product(&chem.mu, dphi)).collect(),
        };
        if self.stir != 0.0 {
            force.axpy(self.stir, &self.swirl_spec);
        }
        let op = BrinkmanOperator::new(&self.phi, &self.p);
        let solve = op.solve(&force).map_err(|e| e.to_string())?;

        // Transport, reaction source, and the stabilized phase update.
        let mut adv = Spec::zeros(&grid);
        for (vc, dphi) in solve.v.comps.iter().zip(&grad_phi.comps) {
            adv.axpy(1.0, &masked_product(vc, dphi));
        }
        let src = source_spec(&self.phi, &self.phi_spec, &self.p);
        let mut g_total = chem.mu_spec.polyharmonic(1, 1.0);
        g_total.axpy(-1.0, &adv);
        g_total.axpy(1.0, &src);

        self.phi_spec = step_phase(&self.phi_spec, &g_total, self.dt, self.kappa_s);
        self.phi = self.phi_spec.to_nodal();
        if !self.phi.max_abs().is_finite() {
            return Err(format!("phase field became non-finite at step {}", self.steps + 1));
        }

        let speed = solve.v.magnitude();
        self.last_max_speed = speed.max_abs();
        self.last_speed = Some(speed);
        self.last_brinkman_iterations = solve.iterations;
        self.steps += 1;
        self.time += self.dt;
        Ok(())
    }

    /// Phase field as an RGBA canvas buffer (blue φ=−1.2 … orange φ=+1.2).
    pub fn phi_rgba(&self) -> Vec<u8> {
        let data = self.phi.data();
        paint(data.len(), &PHASE_STOPS, |i| (data[i] + 1.2) / 2.4)
    }

    /// Flow speed of the latest step as an RGBA canvas buffer, normalized by
    /// its own maximum. All-dark before the first step.
    pub fn speed_rgba(&self) -> Vec<u8> {
        match &self.last_speed {
            Some(speed) => {
                let scale = self.last_max_speed.max(1e-300);
                let data = speed.data();
                paint(data.len(), &SPEED_STOPS, |i| data[i] / scale)
            }
            None => paint(self.phi.grid().n_nodes(), &SPEED_STOPS, |_| 0.0),
        }
    }

    /// Free energy of the current phase field.
    pub fn energy(&self) -> f64 {
        energy(&self.phi, &self.p)
    }

    /// Spatial mean of the phase field (conserved here: no reaction source).
    pub fn mean(&self) -> f64 {
        self.phi_spec.mean()
    }

    /// Maximum flow speed of the latest step.
    pub fn max_speed(&self) -> f64 {
        self.last_max_speed
    }

    /// Picard iterations of the latest velocity solve.
    pub fn brinkman_iterations(&self) -> u32 {
        self.last_brinkman_iterations as u32
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn steps_taken(&self) -> f64 {
        self.steps as f64
    }

    /// Nodes per side (canvas dimension).
    pub fn size(&self) -> u32 {
        self.phi.grid().sizes()[0] as u32
    }
}

// ---------------------------------------------------------------------------
// Exhibit 2: sparse actuation of a target vortex.
// ---------------------------------------------------------------------------

/// Interactive control loop: steer the flow toward a four-vortex target
/// velocity with a body force that pays per unit of support. `iterate`
/// resumes the production proximal projected-gradient optimizer from the
/// current control, so every number shown comes from the real pipeline.
#[wasm_bindgen]
pub struct ControlDemo {
    p: PhysParams,
    cp: ControlParams,
    time: TimeGrid,
    kappa_s: f64,
    targets: Targets,
    phi0: Field,
    g: Control,
    /// Weight at which actuation switches off everywhere (5% above the
    /// largest adjoint-velocity magnitude of the uncontrolled run).
    kappa_max: f64,
    target_speed: Field,
    /// |v| at the middle interval of the latest trajectory.
    achieved_speed: Field,
    iterations: u32,
    converged: bool,
    last_total: f64,
    last_tracking: f64,
    last_tikhonov: f64,
    last_sparsity_cost: f64,
    last_residual: f64,
    last_zero_fraction: f64,
}

#[wasm_bindgen]
impl ControlDemo {
    /// Build the fixed 24×24 problem (box side 2π, 6 time steps): constant
    /// drag, quartic well, random initial mixture from `seed`, and a vortex
    /// velocity target of amplitude 0.3.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<ControlDemo, String> {
        let grid = Grid::new(&[24, 24], &[TAU, TAU]).map_err(|e| e.to_string())?;
        let time = TimeGrid::new(0.3, 6).map_err(|e| e.to_string())?;
        let p = PhysParams {
            eta: 0.5,
            drag: Drag::Constant { value: 2.0 },
            nu: 1.0,
            sigma: 0.0,
            reaction: Reaction::Zero,
            potential: Potential::Quartic,
        };
        let kappa_s = p.default_stabilization();
        let cp = ControlParams {
            radius: 1e3,
            beta: [1.0, 0.0, 0.0, 0.5],
            kappa: 0.0,
            tol_rel: 1e-8,
            max_iters: 1,
            alpha0: None,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(seed as u64 ^ 0xC0DE_0001);
        let phi0 = random_smooth(&grid, &mut rng, 0.5, 2.0).dealiased();
        let target_v = swirl(&grid, 0.3);
        let target_speed = target_v.magnitude();
        let targets = Targets {
            v_q: Series::Constant(target_v),
            phi_q: Series::Constant(Field::zeros(&grid)),
            phi_t: Field::zeros(&grid),
        };

        // Uncontrolled run: baseline metrics, the sparsity-weight ceiling,
        // and the initial "achieved" picture.
        let g = Control::zeros(&grid, time.n_steps);
        let traj = solve_state(&phi0, &g, &time, &p, kappa_s).map_err(|e| e.to_string())?;
        let seeds = cost_seeds(&traj, &targets, &cp, &time);
        let sweep = solve_adjoint_seeded(&traj, &seeds, &time, &p, kappa_s, false)
            .map_err(|e| e.to_string())?;
        let va = sweep.adjoint_velocity(time.dt());
        let kappa_max = 1.05 * va.max_pointwise_norm();
        let cost = chb6::sensitivity::evaluate_cost(&traj, &g, &targets, &cp, &time);
        let achieved_speed = traj.v[time.n_steps / 2].magnitude();

        Ok(ControlDemo {
            p,
            cp,
            time,
            kappa_s,
            targets,
            phi0,
            g,
            kappa_max,
            target_speed,
            achieved_speed,
            iterations: 0,
            converged: false,
            last_total: cost.total(),
            last_tracking: cost.tracking_v,
            last_tikhonov: cost.tikhonov,
            last_sparsity_cost: cost.sparsity,
            last_residual: f64::NAN,
            last_zero_fraction: 1.0,
        })
    }

    /// Sparsity weight κ ≥ 0. Keeps the current control (warm start), so the
    /// next `iterate` continues from where the previous weight left off.
    pub fn set_kappa(&mut self, kappa: f64) -> Result<(), String> {
        if !kappa.is_finite() || kappa < 0.0 {
            return Err(format!("kappa must be nonnegative and finite, got {kappa}"));
        }
        self.cp.kappa = kappa;
        self.converged = false;
        Ok(())
    }

    /// Weight at which the optimal control is identically zero; the page's
    /// κ slider spans [0, this].
    pub fn kappa_max(&self) -> f64 {
        self.kappa_max
    }

    /// Drop the control back to zero (keeps κ).
    pub fn reset(&mut self) {
        self.g = Control::zeros(self.phi0.grid(), self.time.n_steps);
        self.iterations = 0;
        self.converged = false;
    }

    /// Run up to `n` proximal gradient iterations, warm-started from the
    /// current control. Stops early once the stationarity residual falls
    /// below 1e-8.
    pub fn iterate(&mut self, n: u32) -> Result<(), String> {
        if n == 0 {
            return Ok(());
        }
        let mut cp = self.cp.clone();
        cp.max_iters = n as usize;
        let outcome = optimize(
            &self.phi0,
            &self.g,
            &self.targets,
            &cp,
            &self.time,
            &self.p,
            self.kappa_s,
            |_| {},
        )
        .map_err(|e| e.to_string())?;
        let last = outcome.rows.last().expect("optimizer always reports at least one row");
        self.last_total = last.total;
        self.last_tracking = last.tracking_v;
        self.last_tikhonov = last.tikhonov;
        self.last_sparsity_cost = last.sparsity;
        self.last_residual = last.residual;
        self.last_zero_fraction = last.sparsity_fraction;
        self.iterations += outcome.iterations as u32;
        self.converged = outcome.converged;
        self.achieved_speed = outcome.trajectory.v[self.time.n_steps / 2].magnitude();
        self.g = outcome.control;
        Ok(())
    }

    /// Actuation magnitude as an RGBA canvas buffer: per node the maximum of
    /// |g| over time, dark slate where the node is switched off at all times.
    pub fn control_rgba(&self) -> Vec<u8> {
        let grid = self.phi0.grid();
        let n_nodes = grid.n_nodes();
        let mut mag = vec![0.0f64; n_nodes];
        for interval in self.g.intervals() {
            let m = interval.magnitude();
            for (acc, &v) in mag.iter_mut().zip(m.data()) {
                if v > *acc {
                    *acc = v;
                }
            }
        }
        let scale = mag.iter().cloned().fold(0.0f64, f64::max).max(1e-300);
        let mut buf = Vec::with_capacity(4 * n_nodes);
        for &v in &mag {
            if v <= OFF_TOL {
                buf.extend_from_slice(&OFF_COLOR);
            } else {
                buf.extend_from_slice(&ramp(&SPEED_STOPS, v / scale));
            }
            buf.push(255);
        }
        buf
    }

    /// Target flow speed as an RGBA canvas buffer (shared scale with
    /// `achieved_rgba`).
    pub fn target_rgba(&self) -> Vec<u8> {
        let scale = self.shared_speed_scale();
        let data = self.target_speed.data();
        paint(data.len(), &SPEED_STOPS, |i| data[i] / scale)
    }

    /// Mid-horizon flow speed of the latest trajectory as an RGBA canvas
    /// buffer (shared scale with `target_rgba`).
    pub fn achieved_rgba(&self) -> Vec<u8> {
        let scale = self.shared_speed_scale();
        let data = self.achieved_speed.data();
        paint(data.len(), &SPEED_STOPS, |i| data[i] / scale)
    }

    fn shared_speed_scale(&self) -> f64 {
        self.target_speed.max_abs().max(self.achieved_speed.max_abs()).max(1e-300)
    }

    /// Current run metrics as a JSON string:
    /// `{iterations, converged, kappa, kappa_max, cost_total, tracking,
    ///   tikhonov, sparsity_cost, residual, zero_fraction, control_norm}`.
    pub fn metrics(&self) -> String {
        serde_json::json!({
            "iterations": self.iterations,
            "converged": self.converged,
            "kappa": self.cp.kappa,
            "kappa_max": self.kappa_max,
            "cost_total": self.last_total,
            "tracking": self.last_tracking,
            "tikhonov": self.last_tikhonov,
            "sparsity_cost": self.last_sparsity_cost,
            "residual": if self.last_residual.is_finite() { Some(self.last_residual) } else { None },
            "zero_fraction": self.last_zero_fraction,
            "control_norm": self.g.norm_q(self.time.dt()),
        })
        .to_string()
    }

    /// Nodes per side (canvas dimension).
    pub fn size(&self) -> u32 {
        self.phi0.grid().sizes()[0] as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sim_constructs_steps_and_paints() {
        let mut sim = SimState::new(32, 7).expect("valid size");
        assert_eq!(sim.size(), 32);
        assert_eq!(sim.phi_rgba().len(), 32 * 32 * 4);
        assert_eq!(sim.speed_rgba().len(), 32 * 32 * 4);
        let e0 = sim.energy();
        assert!(e0.is_finite() && e0 > 0.0);

        assert!(sim.step(3).is_ok(), "three steps must succeed");
        assert_eq!(sim.steps_taken(), 3.0);
        assert!((sim.time() - 3.0 * 0.05).abs() < 1e-12);
        assert!(sim.energy().is_finite());
        // No reaction source: the mean is conserved (it starts at zero).
        assert!(sim.mean().abs() < 1e-12, "mean drifted to {}", sim.mean());
        // Capillary forcing alone already moves fluid.
        assert!(sim.max_speed() > 0.0);
        assert!(sim.brinkman_iterations() > 0, "variable drag iterates");

        let rgba = sim.phi_rgba();
        assert!(rgba.iter().skip(3).step_by(4).all(|&a| a == 255), "opaque alpha");
    }

    #[test]
    fn sim_stir_strengthens_the_flow() {
        let mut quiet = SimState::new(32, 11).expect("valid size");
        let mut stirred = SimState::new(32, 11).expect("valid size");
        stirred.set_stir(1.0);
        assert!(quiet.step(5).is_ok());
        assert!(stirred.step(5).is_ok());
        assert!(
            stirred.max_speed() > 10.0 * quiet.max_speed(),
            "stirred {} vs quiet {}",
            stirred.max_speed(),
            quiet.max_speed()
        );
    }

    #[test]
    fn sim_rejects_bad_sizes() {
        assert!(SimState::new(33, 0).is_err(), "odd size");
        assert!(SimState::new(8, 0).is_err(), "too small");
        assert!(SimState::new(256, 0).is_err(), "too large");
    }

    #[test]
    fn control_demo_tracks_and_sparsifies() {
        let mut demo = ControlDemo::new(3).expect("fixed problem builds");
        assert_eq!(demo.size(), 24);
        assert!(demo.kappa_max() > 0.0);
        let baseline: serde_json::Value = serde_json::from_str(&demo.metrics()).unwrap();
        let cost0 = baseline["cost_total"].as_f64().unwrap();
        assert_eq!(baseline["zero_fraction"].as_f64().unwrap(), 1.0);

        // Smooth phase (κ = 0): cost drops, control is dense.
        assert!(demo.iterate(5).is_ok());
        let m: serde_json::Value = serde_json::from_str(&demo.metrics()).unwrap();
        assert!(m["cost_total"].as_f64().unwrap() < cost0, "five steps reduce the cost");
        assert!(m["zero_fraction"].as_f64().unwrap() < 0.05, "κ = 0 keeps every node on");
        assert!(m["residual"].as_f64().unwrap().is_finite());
        assert!(m["control_norm"].as_f64().unwrap() > 0.0);

        // Heavy sparsity weight: most of the domain switches off exactly.
        demo.set_kappa(0.9 * demo.kappa_max()).unwrap();
        demo.reset();
        assert!(demo.iterate(5).is_ok());
        let m: serde_json::Value = serde_json::from_str(&demo.metrics()).unwrap();
        assert!(
            m["zero_fraction"].as_f64().unwrap() > 0.5,
            "near-ceiling κ switches most nodes off, got {}",
            m["zero_fraction"]
        );

        let rgba = demo.control_rgba();
        assert_eq!(rgba.len(), 24 * 24 * 4);
        let off = OFF_COLOR;
        let n_off = rgba
            .chunks_exact(4)
            .filter(|px| px[0] == off[0] && px[1] == off[1] && px[2] == off[2])
            .count();
        assert!(n_off > 0, "the off region is visibly marked");

        assert_eq!(demo.target_rgba().len(), 24 * 24 * 4);
        assert_eq!(demo.achieved_rgba().len(), 24 * 24 * 4);
    }

    #[test]
    fn control_demo_rejects_bad_kappa() {
        let mut demo = ControlDemo::new(1).expect("fixed problem builds");
        assert!(demo.set_kappa(-1.0).is_err());
        assert!(demo.set_kappa(f64::NAN).is_err());
        assert!(demo.set_kappa(0.5).is_ok());
    }
}
