//! Physical model: double-well potential F with f = F', the drag coefficient
//! λ(φ) of the Brinkman equation, the reaction source S(φ) = −σφ + h(φ), the
//! chemical-potential chain
//!
//! ```text
//!   w = −Δφ + f(φ),      µ = −Δw + f'(φ)w + νw,
//! ```
//!
//! and the free energy
//!
//! ```text
//!   E(φ) = ½∫(−Δφ + f(φ))² + ν∫(½|∇φ|² + F(φ)).
//! ```
//!
//! Nonlinear nodal evaluations feeding back into spectral operators pass
//! through the 2/3 mask (see [`crate::spectral::masked_product`]), matching
//! the convention used by every solver in this crate.

use serde::{Deserialize, Serialize};

use crate::spectral::{inner_l2, masked_spec, spec_inner, Field, Spec};

/// Double-well potential F; the solver consumes f = F' and its derivatives.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Potential {
    /// F(s) = ¼(s² − 1)², f(s) = s³ − s.
    Quartic,
    /// F(s) = Σ cᵢ sⁱ with ascending `coefficients`. An empty list is the
    /// zero potential (f ≡ 0), the linear test configuration.
    Polynomial { coefficients: Vec<f64> },
}

/// Evaluate Σ cᵢ sⁱ with Horner's rule.
fn horner(coeffs: &[f64], s: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * s + c)
}

/// Coefficients of the derivative of Σ cᵢ sⁱ.
fn derive(coeffs: &[f64]) -> Vec<f64> {
    coeffs.iter().enumerate().skip(1).map(|(i, &c)| i as f64 * c).collect()
}

impl Potential {
    /// F(s).
    pub fn value(&self, s: f64) -> f64 {
        match self {
            Potential::Quartic => {
                let q = s * s - 1.0;
                0.25 * q * q
            }
            Potential::Polynomial { coefficients } => horner(coefficients, s),
        }
    }

    /// f(s) = F'(s).
    pub fn f(&self, s: f64) -> f64 {
        match self {
            Potential::Quartic => s * s * s - s,
            Potential::Polynomial { coefficients } => horner(&derive(coefficients), s),
        }
    }

    /// f'(s).
    pub fn f_prime(&self, s: f64) -> f64 {
        match self {
            Potential::Quartic => 3.0 * s * s - 1.0,
            Potential::Polynomial { coefficients } => horner(&derive(&derive(coefficients)), s),
        }
    }

    /// f''(s).
    pub fn f_second(&self, s: f64) -> f64 {
        match self {
            Potential::Quartic => 6.0 * s,
            Potential::Polynomial { coefficients } => {
                horner(&derive(&derive(&derive(coefficients))), s)
            }
        }
    }
}

/// Drag coefficient λ(φ) of the Brinkman equation; bounded between two
/// positive constants so the velocity solve stays uniformly coercive.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Drag {
    Constant { value: f64 },
    /// λ(s) = min + (max − min)(1 + tanh s)/2, strictly inside [min, max].
    Smooth { min: f64, max: f64 },
}

impl Drag {
    pub fn value(&self, s: f64) -> f64 {
        match self {
            Drag::Constant { value } => *value,
            Drag::Smooth { min, max } => min + (max - min) * 0.5 * (1.0 + s.tanh()),
        }
    }

    /// λ'(s); zero in the constant case.
    pub fn derivative(&self, s: f64) -> f64 {
        match self {
            Drag::Constant { .. } => 0.0,
            Drag::Smooth { min, max } => {
                let t = s.tanh();
                (max - min) * 0.5 * (1.0 - t * t)
            }
        }
    }

    /// Lower/upper bounds (λ_*, λ*).
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            Drag::Constant { value } => (*value, *value),
            Drag::Smooth { min, max } => (*min, *max),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Drag::Constant { .. })
    }

    /// Midpoint of the bounds; the Picard splitting constant for the
    /// variable-coefficient velocity solve.
    pub fn midpoint(&self) -> f64 {
        let (lo, hi) = self.bounds();
        0.5 * (lo + hi)
    }
}

/// Bounded nonlinearity h in the reaction source S(φ) = −σφ + h(φ).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Reaction {
    Zero,
    /// h(s) = amplitude · tanh(s): bounded with bounded derivatives.
    Tanh { amplitude: f64 },
}

impl Reaction {
    pub fn value(&self, s: f64) -> f64 {
        match self {
            Reaction::Zero => 0.0,
            Reaction::Tanh { amplitude } => amplitude * s.tanh(),
        }
    }

    pub fn derivative(&self, s: f64) -> f64 {
        match self {
            Reaction::Zero => 0.0,
            Reaction::Tanh { amplitude } => {
                let t = s.tanh();
                amplitude * (1.0 - t * t)
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Reaction::Zero)
    }
}

/// Physical parameters of the coupled system.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysParams {
    /// Viscosity η > 0.
    pub eta: f64,
    /// Drag coefficient λ(φ).
    #[serde(rename = "lambda")]
    pub drag: Drag,
    /// Weight ν of the gradient/well part of the energy.
    pub nu: f64,
    /// Linear decay rate σ ≥ 0 in the source.
    pub sigma: f64,
    /// Bounded source nonlinearity h.
    #[serde(rename = "h")]
    pub reaction: Reaction,
    /// Double-well potential.
    pub potential: Potential,
}

impl Default for PhysParams {
    fn default() -> Self {
        PhysParams {
            eta: 1.0,
            drag: Drag::Constant { value: 1.0 },
            nu: 1.0,
            sigma: 0.0,
            reaction: Reaction::Zero,
            potential: Potential::Quartic,
        }
    }
}

impl PhysParams {
    /// Validate positivity/boundedness assumptions; returns a message naming
    /// the offending parameter.
    pub fn validate(&self) -> Result<(), String> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(format!("eta must be positive and finite, got {}", self.eta));
        }
        let (lo, hi) = self.drag.bounds();
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && hi >= lo) {
            return Err(format!("lambda bounds must satisfy 0 < min <= max, got [{lo}, {hi}]"));
        }
        if !self.nu.is_finite() || self.nu < 0.0 {
            return Err(format!("nu must be nonnegative and finite, got {}", self.nu));
        }
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(format!("sigma must be nonnegative and finite, got {}", self.sigma));
        }
        Ok(())
    }

    /// Default sixth-order stabilization shift: max(ν, 0) + 2, which bounds
    /// |f'| on the physical range [−1, 1] of the quartic well.
    pub fn default_stabilization(&self) -> f64 {
        self.nu.max(0.0) + 2.0
    }
}

/// Chemical-potential chain evaluated at a phase field.
pub struct ChemicalPotential {
    /// w = −Δφ + f(φ) (nodal).
    pub w: Field,
    /// µ = −Δw + f'(φ)w + νw (nodal).
    pub mu: Field,
    /// Spectrum of w (band-limited by construction).
    pub w_spec: Spec,
    /// Spectrum of µ (band-limited by construction).
    pub mu_spec: Spec,
}

/// Evaluate w and µ with dealiased nodal products. `phi_spec` must be the
/// spectrum of `phi`.
pub fn chemical_potential(phi: &Field, phi_spec: &Spec, p: &PhysParams) -> ChemicalPotential {
    let f_phi = phi.map(|s| p.potential.f(s));
    let mut w_spec = phi_spec.polyharmonic(1, -1.0);
    w_spec.axpy(1.0, &masked_spec(&f_phi));
    let w = w_spec.to_nodal();

    let fp_w = phi.map(|s| p.potential.f_prime(s)).product(&w);
    let mut mu_spec = w_spec.polyharmonic(1, -1.0);
    mu_spec.axpy(1.0, &masked_spec(&fp_w));
    mu_spec.axpy(p.nu, &w_spec);
    let mu = mu_spec.to_nodal();

    ChemicalPotential { w, mu, w_spec, mu_spec }
}

/// Reaction source S(φ) = −σφ + h(φ) as a band-limited spectrum.
pub fn source_spec(phi: &Field, phi_spec: &Spec, p: &PhysParams) -> Spec {
    let mut s = phi_spec.clone();
    s.scale(-p.sigma);
    if !p.reaction.is_zero() {
        let h = phi.map(|v| p.reaction.value(v));
        s.axpy(1.0, &masked_spec(&h));
    }
    s
}

/// Free energy E(φ) = ½‖w‖² + ν(½‖∇φ‖² + ∫F(φ)), with w evaluated by the
/// same dealiased rule as the solver.
pub fn energy(phi: &Field, p: &PhysParams) -> f64 {
    let phi_spec = phi.to_spec();
    let f_phi = phi.map(|s| p.potential.f(s));
    let mut w_spec = phi_spec.polyharmonic(1, -1.0);
    w_spec.axpy(1.0, &masked_spec(&f_phi));
    let quad = 0.5 * spec_inner(&w_spec, &w_spec);

    let grad = phi_spec.gradient();
    let mut grad_sq = 0.0;
    for c in &grad.comps {
        grad_sq += spec_inner(c, c);
    }
    let well = phi.map(|s| p.potential.value(s));
    let one = Field::constant(phi.grid(), 1.0);
    quad + p.nu * (0.5 * grad_sq + inner_l2(&well, &one))
}

/// Dissipation rate of the energy along the flow with g = 0 and S = 0:
/// ‖∇µ‖² + η‖∇v‖² + ∫λ(φ)|v|².
pub fn dissipation(
    mu_spec: &Spec,
    v: &crate::spectral::VectorField,
    phi: &Field,
    p: &PhysParams,
) -> f64 {
    let grad_mu = mu_spec.gradient();
    let mut d = 0.0;
    for c in &grad_mu.comps {
        d += spec_inner(c, c);
    }
    let vs = v.to_spec();
    for c in &vs.comps {
        let g = c.gradient();
        for gc in &g.comps {
            d += p.eta * spec_inner(gc, gc);
        }
    }
    let lam = phi.map(|s| p.drag.value(s));
    for c in &v.comps {
        d += inner_l2(&lam.product(c), c);
    }
    d
}

/// Space-time targets for the tracking cost. Per-interval entries may share
/// one field (constant in time) without replication.
pub enum Series<T> {
    Constant(T),
    PerStep(Vec<T>),
}

impl<T> Series<T> {
    pub fn at(&self, n: usize) -> &T {
        match self {
            Series::Constant(t) => t,
            Series::PerStep(v) => &v[n],
        }
    }
}

/// Tracking targets: velocity and phase over space-time, plus the terminal
/// phase snapshot.
pub struct Targets {
    /// Velocity target per interval (paired with v_n).
    pub v_q: Series<crate::spectral::VectorField>,
    /// Phase target per interval (paired with the right endpoint φ_{n+1}).
    pub phi_q: Series<Field>,
    /// Terminal phase target (paired with φ_N).
    pub phi_t: Field,
}

/// Weights and constraints of the control problem.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlParams {
    /// Radius M of the L²(Q) admissibility ball.
    #[serde(rename = "M")]
    pub radius: f64,
    /// β₁..β₄: velocity tracking, phase tracking, terminal, Tikhonov.
    pub beta: [f64; 4],
    /// Sparsity weight κ ≥ 0.
    pub kappa: f64,
    /// Relative stationarity tolerance of the optimizer.
    #[serde(default = "default_tol_rel")]
    pub tol_rel: f64,
    /// Iteration cap of the optimizer.
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Initial step size; `None` means 1/β₄.
    #[serde(default)]
    pub alpha0: Option<f64>,
}

fn default_tol_rel() -> f64 {
    1e-4
}
fn default_max_iters() -> usize {
    500
}

impl Default for ControlParams {
    fn default() -> Self {
        ControlParams {
            radius: 10.0,
            beta: [1.0, 1.0, 1.0, 1.0],
            kappa: 0.0,
            tol_rel: default_tol_rel(),
            max_iters: default_max_iters(),
            alpha0: None,
        }
    }
}

impl ControlParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(format!("M must be positive and finite, got {}", self.radius));
        }
        for (i, &b) in self.beta.iter().enumerate() {
            if !b.is_finite() || b < 0.0 {
                return Err(format!("beta[{i}] must be nonnegative and finite, got {b}"));
            }
        }
        // The loop above guarantees finiteness, so <= is a complete test.
        if self.beta[3] <= 0.0 {
            return Err("beta[3] (Tikhonov weight) must be strictly positive".into());
        }
        if !self.kappa.is_finite() || self.kappa < 0.0 {
            return Err(format!("kappa must be nonnegative and finite, got {}", self.kappa));
        }
        if !(self.tol_rel.is_finite() && self.tol_rel > 0.0) {
            return Err(format!("tol_rel must be positive, got {}", self.tol_rel));
        }
        Ok(())
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha0.unwrap_or(1.0 / self.beta[3])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::Grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn quartic_point_values() {
        let p = Potential::Quartic;
        assert_eq!(p.f(0.5), -0.375);
        assert_eq!(p.f(1.0), 0.0);
        assert_eq!(p.f_prime(1.0), 2.0);
        assert_eq!(p.value(0.0), 0.25);
        assert_eq!(p.f_second(-2.0), -12.0);
    }

    #[test]
    fn polynomial_matches_quartic_coefficients() {
        // ¼(s²−1)² = ¼ − ½s² + ¼s⁴.
        let poly = Potential::Polynomial { coefficients: vec![0.25, 0.0, -0.5, 0.0, 0.25] };
        let q = Potential::Quartic;
        for s in [-1.7, -0.3, 0.0, 0.4, 1.9] {
            assert!((poly.value(s) - q.value(s)).abs() < 1e-14);
            assert!((poly.f(s) - q.f(s)).abs() < 1e-14);
            assert!((poly.f_prime(s) - q.f_prime(s)).abs() < 1e-14);
            assert!((poly.f_second(s) - q.f_second(s)).abs() < 1e-14);
        }
    }

    #[test]
    fn derivative_chain_matches_central_differences() {
        // Each analytic derivative agrees with a central difference of its
        // parent at randomly drawn points.
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let pots = [
            Potential::Quartic,
            Potential::Polynomial { coefficients: vec![0.1, -0.2, 0.0, 0.3, 0.05, -0.01] },
        ];
        let d = 1e-5;
        for pot in &pots {
            for _ in 0..100 {
                let s: f64 = rng.gen_range(-1.5..1.5);
                let fd_f = (pot.value(s + d) - pot.value(s - d)) / (2.0 * d);
                let fd_fp = (pot.f(s + d) - pot.f(s - d)) / (2.0 * d);
                let fd_fpp = (pot.f_prime(s + d) - pot.f_prime(s - d)) / (2.0 * d);
                assert!((fd_f - pot.f(s)).abs() <= 1e-6 * (1.0 + pot.f(s).abs()));
                assert!((fd_fp - pot.f_prime(s)).abs() <= 1e-6 * (1.0 + pot.f_prime(s).abs()));
                assert!((fd_fpp - pot.f_second(s)).abs() <= 1e-6 * (1.0 + pot.f_second(s).abs()));
            }
        }
    }

    #[test]
    fn drag_bounds_and_midpoint() {
        let d = Drag::Smooth { min: 1.0, max: 3.0 };
        assert_eq!(d.value(0.0), 2.0); // midpoint at s = 0
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let s: f64 = rng.gen_range(-50.0..50.0);
            let v = d.value(s);
            assert!((1.0..=3.0).contains(&v), "λ({s}) = {v} escapes bounds");
        }
        // λ' against central differences.
        for s in [-2.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (d.value(s + h) - d.value(s - h)) / (2.0 * h);
            assert!((fd - d.derivative(s)).abs() < 1e-8);
        }
        assert_eq!(d.midpoint(), 2.0);
    }

    #[test]
    fn reaction_is_bounded_with_bounded_slope() {
        let r = Reaction::Tanh { amplitude: 0.7 };
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let s: f64 = rng.gen_range(-100.0..100.0);
            assert!(r.value(s).abs() <= 0.7);
            assert!(r.derivative(s) >= 0.0 && r.derivative(s) <= 0.7);
        }
    }

    #[test]
    fn energy_of_uniform_states() {
        let g = Grid::new(&[16, 16], &[1.0, 1.0]).unwrap();
        let p = PhysParams::default();
        // φ ≡ 0: w = f(0) = 0, so E = ν F(0) |Ω| = 0.25.
        let e0 = energy(&Field::zeros(&g), &p);
        assert!((e0 - 0.25 * g.volume()).abs() < 1e-13, "E(0) = {e0}");
        // φ ≡ 1 sits in a well: w = 0, F(1) = 0, so E = 0.
        let e1 = energy(&Field::constant(&g, 1.0), &p);
        assert!(e1.abs() < 1e-13, "E(1) = {e1}");
    }

    #[test]
    fn energy_nonnegative_on_random_fields() {
        let g = Grid::new(&[16, 16], &[1.0, 1.0]).unwrap();
        let p = PhysParams::default();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for _ in 0..20 {
            let f = crate::spectral::random_smooth(&g, &mut rng, 0.8, 3.0);
            assert!(energy(&f, &p) >= 0.0);
        }
    }

    #[test]
    fn chemical_potential_of_single_mode_linear_case() {
        // With f ≡ 0: w = −Δφ = |k|²φ and µ = (|k|² + ν)|k|²φ exactly.
        let g = Grid::new(&[16, 16], &[1.0, 1.0]).unwrap();
        let p = PhysParams {
            potential: Potential::Polynomial { coefficients: vec![] },
            nu: 2.0,
            ..PhysParams::default()
        };
        let k = 2.0 * std::f64::consts::PI;
        let phi = Field::from_fn(&g, |x| (k * x[0]).cos());
        let chem = chemical_potential(&phi, &phi.to_spec(), &p);
        let k2 = k * k;
        let werr = chem
            .w
            .data()
            .iter()
            .zip(phi.data())
            .map(|(w, &v)| (w - k2 * v).abs())
            .fold(0.0, f64::max);
        assert!(werr < 1e-10 * k2);
        let factor = (k2 + 2.0) * k2;
        let muerr = chem
            .mu
            .data()
            .iter()
            .zip(phi.data())
            .map(|(m, &v)| (m - factor * v).abs())
            .fold(0.0, f64::max);
        assert!(muerr < 1e-9 * factor);
    }

    #[test]
    fn config_fragments_round_trip() {
        let p = PhysParams {
            drag: Drag::Smooth { min: 1.0, max: 3.0 },
            reaction: Reaction::Tanh { amplitude: 0.2 },
            ..PhysParams::default()
        };
        let text = serde_json::to_string(&p).unwrap();
        assert!(text.contains("\"lambda\""), "serialized under the lambda key: {text}");
        assert!(text.contains("\"h\""));
        let back: PhysParams = serde_json::from_str(&text).unwrap();
        assert_eq!(back.drag, p.drag);

        let c: ControlParams =
            serde_json::from_str(r#"{"M": 5.0, "beta": [1, 0.5, 0, 2], "kappa": 0.1}"#).unwrap();
        assert_eq!(c.radius, 5.0);
        assert_eq!(c.tol_rel, 1e-4);
        assert_eq!(c.max_iters, 500);
        assert_eq!(c.alpha0(), 0.5);
        assert!(c.validate().is_ok());
    }
}
