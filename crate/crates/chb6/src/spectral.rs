//! Periodic pseudospectral toolbox: uniform torus grids, real FFTs with
//! Hermitian half-spectrum storage, differential multipliers, Leray
//! projection, 2/3-rule dealiasing and quadrature-exact inner products.
//!
//! Conventions
//! * Nodal data is row-major over `(i_0, ..., i_{d-1})`; the last axis is the
//!   one transformed real-to-complex, so spectra store `n_last/2 + 1` bins
//!   along it and the full signed range along every other axis.
//! * Coefficients are Fourier-series coefficients: `f(x) = Σ_k c_k e^{i k·x}`
//!   with angular wavenumbers `k_a = 2π m_a / L_a`. The forward transform is
//!   normalized by `1/N`, the inverse is the plain synthesis sum, so a
//!   round trip reproduces nodal values to round-off.
//! * Derivative multipliers zero the Nyquist bin of their axis (its sign is
//!   ambiguous on a real grid); dynamical fields are kept inside the 2/3
//!   dealias band, where this never triggers.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

/// Grid construction failures.
#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid dimension must be 1, 2 or 3, got {0}")]
    Dimension(usize),
    #[error("sizes and lengths must agree in dimension ({sizes} vs {lengths})")]
    Mismatch { sizes: usize, lengths: usize },
    #[error("axis {axis} size {size} must be even and at least 4")]
    BadSize { axis: usize, size: usize },
    #[error("axis {axis} length {length} must be positive and finite")]
    BadLength { axis: usize, length: f64 },
}

/// Uniform periodic grid with precomputed transform plans and multipliers.
///
/// Construction is the only expensive part; grids are shared behind `Arc` by
/// every field living on them.
pub struct Grid {
    sizes: Vec<usize>,
    lengths: Vec<f64>,
    spec_sizes: Vec<usize>,
    n_nodes: usize,
    n_spec: usize,
    volume: f64,
    cell_volume: f64,
    /// Signed angular wavenumber per axis and index (full range per axis).
    k_axis: Vec<Vec<f64>>,
    /// Derivative multiplier per axis and index: equals `k` with the Nyquist
    /// bin forced to zero.
    dk_axis: Vec<Vec<f64>>,
    /// |k|^2 per stored bin.
    k2: Vec<f64>,
    /// 2/3-rule mask per stored bin (1.0 keep, 0.0 drop).
    mask: Vec<f64>,
    /// Parseval weight per stored bin: 2.0 for bins representing a conjugate
    /// pair, 1.0 for the self-conjugate last-axis bins (0 and Nyquist).
    pair_weight: Vec<f64>,
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
    /// Complex plans for axes 0..dim-1, applied on the half spectrum.
    fft_fwd: Vec<Arc<dyn Fft<f64>>>,
    fft_inv: Vec<Arc<dyn Fft<f64>>>,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid")
            .field("sizes", &self.sizes)
            .field("lengths", &self.lengths)
            .finish()
    }
}

/// Signed mode index for position `i` on an axis of `n` nodes.
fn signed_mode(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

impl Grid {
    /// Build a grid; `sizes[a]` nodes on an axis of physical length
    /// `lengths[a]`. Sizes must be even (clean Nyquist bookkeeping) and at
    /// least 4 so the dealias band is non-trivial.
    pub fn new(sizes: &[usize], lengths: &[f64]) -> Result<Arc<Self>, GridError> {
        let dim = sizes.len();
        if !(1..=3).contains(&dim) {
            return Err(GridError::Dimension(dim));
        }
        if lengths.len() != dim {
            return Err(GridError::Mismatch { sizes: dim, lengths: lengths.len() });
        }
        for (axis, (&size, &length)) in sizes.iter().zip(lengths).enumerate() {
            if size < 4 || size % 2 != 0 {
                return Err(GridError::BadSize { axis, size });
            }
            if !(length.is_finite() && length > 0.0) {
                return Err(GridError::BadLength { axis, length });
            }
        }

        let n_nodes: usize = sizes.iter().product();
        let n_last = sizes[dim - 1];
        let mut spec_sizes = sizes.to_vec();
        spec_sizes[dim - 1] = n_last / 2 + 1;
        let n_spec: usize = spec_sizes.iter().product();
        let volume: f64 = lengths.iter().product();
        let cell_volume = volume / n_nodes as f64;

        let mut k_axis = Vec::with_capacity(dim);
        let mut dk_axis = Vec::with_capacity(dim);
        for a in 0..dim {
            let n = sizes[a];
            let base = 2.0 * std::f64::consts::PI / lengths[a];
            let mut k = Vec::with_capacity(n);
            let mut dk = Vec::with_capacity(n);
            for i in 0..n {
                let m = signed_mode(i, n);
                k.push(base * m as f64);
                dk.push(if m.unsigned_abs() as usize * 2 == n { 0.0 } else { base * m as f64 });
            }
            k_axis.push(k);
            dk_axis.push(dk);
        }

        // Per-bin tables over the half spectrum.
        let mut k2 = vec![0.0; n_spec];
        let mut mask = vec![1.0; n_spec];
        let mut pair_weight = vec![2.0; n_spec];
        let mut idx = vec![0usize; dim];
        for bin in 0..n_spec {
            let mut ksq = 0.0;
            let mut keep = true;
            for a in 0..dim {
                let m = signed_mode(idx[a], sizes[a]);
                ksq += k_axis[a][idx[a]] * k_axis[a][idx[a]];
                // Classic 2/3 rule: drop |m| > n/3 on every axis.
                if m.unsigned_abs() as usize > sizes[a] / 3 {
                    keep = false;
                }
            }
            k2[bin] = ksq;
            if !keep {
                mask[bin] = 0.0;
            }
            let last = idx[dim - 1];
            if last == 0 || 2 * last == n_last {
                pair_weight[bin] = 1.0;
            }
            // Advance the row-major multi-index over spec_sizes.
            for a in (0..dim).rev() {
                idx[a] += 1;
                if idx[a] < spec_sizes[a] {
                    break;
                }
                idx[a] = 0;
            }
        }

        let mut rplanner = RealFftPlanner::<f64>::new();
        let r2c = rplanner.plan_fft_forward(n_last);
        let c2r = rplanner.plan_fft_inverse(n_last);
        let mut cplanner = FftPlanner::<f64>::new();
        let mut fft_fwd = Vec::new();
        let mut fft_inv = Vec::new();
        for &size in sizes.iter().take(dim.saturating_sub(1)) {
            fft_fwd.push(cplanner.plan_fft_forward(size));
            fft_inv.push(cplanner.plan_fft_inverse(size));
        }

        Ok(Arc::new(Grid {
            sizes: sizes.to_vec(),
            lengths: lengths.to_vec(),
            spec_sizes,
            n_nodes,
            n_spec,
            volume,
            cell_volume,
            k_axis,
            dk_axis,
            k2,
            mask,
            pair_weight,
            r2c,
            c2r,
            fft_fwd,
            fft_inv,
        }))
    }

    pub fn dim(&self) -> usize {
        self.sizes.len()
    }
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }
    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }
    pub fn n_spec(&self) -> usize {
        self.n_spec
    }
    pub fn volume(&self) -> f64 {
        self.volume
    }
    pub fn cell_volume(&self) -> f64 {
        self.cell_volume
    }
    pub fn k2(&self) -> &[f64] {
        &self.k2
    }
    pub fn dealias_mask(&self) -> &[f64] {
        &self.mask
    }

    /// Physical coordinates of nodal index `flat`.
    pub fn coords(&self, flat: usize) -> Vec<f64> {
        let mut rem = flat;
        let mut x = vec![0.0; self.dim()];
        for a in (0..self.dim()).rev() {
            let i = rem % self.sizes[a];
            rem /= self.sizes[a];
            x[a] = self.lengths[a] * i as f64 / self.sizes[a] as f64;
        }
        x
    }

    /// Signed wavevector of a stored spectral bin.
    pub fn wavevector(&self, bin: usize) -> Vec<f64> {
        let mut rem = bin;
        let mut k = vec![0.0; self.dim()];
        for a in (0..self.dim()).rev() {
            let i = rem % self.spec_sizes[a];
            rem /= self.spec_sizes[a];
            k[a] = self.k_axis[a][i];
        }
        k
    }

    /// Derivative multiplier components (Nyquist-zeroed wavevector) per bin.
    fn deriv_wavevector(&self, bin: usize) -> [f64; 3] {
        let mut rem = bin;
        let mut k = [0.0; 3];
        for a in (0..self.dim()).rev() {
            let i = rem % self.spec_sizes[a];
            rem /= self.spec_sizes[a];
            k[a] = self.dk_axis[a][i];
        }
        k
    }

    /// Forward transform: nodal values to normalized coefficients.
    pub fn forward(&self, nodal: &[f64]) -> Vec<Complex64> {
        assert_eq!(nodal.len(), self.n_nodes);
        let dim = self.dim();
        let n_last = self.sizes[dim - 1];
        let n_half = self.spec_sizes[dim - 1];
        let rows = self.n_nodes / n_last;
        let mut spec = vec![Complex64::default(); self.n_spec];
        let mut row_in = vec![0.0f64; n_last];
        let mut row_out = vec![Complex64::default(); n_half];
        for r in 0..rows {
            row_in.copy_from_slice(&nodal[r * n_last..(r + 1) * n_last]);
            self.r2c
                .process(&mut row_in, &mut row_out)
                .expect("r2c buffer sizes are precomputed");
            spec[r * n_half..(r + 1) * n_half].copy_from_slice(&row_out);
        }
        for a in (0..dim - 1).rev() {
            self.fft_axis(&mut spec, a, true);
        }
        let scale = 1.0 / self.n_nodes as f64;
        for c in &mut spec {
            *c *= scale;
        }
        spec
    }

    /// Inverse transform: coefficients to nodal values.
    pub fn inverse(&self, spec: &[Complex64]) -> Vec<f64> {
        assert_eq!(spec.len(), self.n_spec);
        let dim = self.dim();
        let n_last = self.sizes[dim - 1];
        let n_half = self.spec_sizes[dim - 1];
        let rows = self.n_nodes / n_last;
        let mut work = spec.to_vec();
        for a in 0..dim - 1 {
            self.fft_axis(&mut work, a, false);
        }
        let mut nodal = vec![0.0f64; self.n_nodes];
        let mut row_in = vec![Complex64::default(); n_half];
        let mut row_out = vec![0.0f64; n_last];
        for r in 0..rows {
            row_in.copy_from_slice(&work[r * n_half..(r + 1) * n_half]);
            // Self-conjugate bins must be exactly real for the synthesis;
            // round-off from upstream multipliers lands in the imaginary part.
            row_in[0].im = 0.0;
            row_in[n_half - 1].im = 0.0;
            self.c2r
                .process(&mut row_in, &mut row_out)
                .expect("c2r buffer sizes are precomputed");
            nodal[r * n_last..(r + 1) * n_last].copy_from_slice(&row_out);
        }
        nodal
    }

    /// In-place unnormalized FFT along `axis` (one of the leading axes) of a
    /// half-spectrum array.
    fn fft_axis(&self, spec: &mut [Complex64], axis: usize, forward: bool) {
        let n = self.sizes[axis];
        let stride: usize = self.spec_sizes[axis + 1..].iter().product();
        let outer: usize = self.spec_sizes[..axis].iter().product();
        let block = n * stride;
        let plan = if forward { &self.fft_fwd[axis] } else { &self.fft_inv[axis] };
        let mut line = vec![Complex64::default(); n];
        for o in 0..outer {
            for s in 0..stride {
                let base = o * block + s;
                for j in 0..n {
                    line[j] = spec[base + j * stride];
                }
                plan.process(&mut line);
                for j in 0..n {
                    spec[base + j * stride] = line[j];
                }
            }
        }
    }
}

/// Scalar field: nodal values on a shared grid.
#[derive(Clone)]
pub struct Field {
    grid: Arc<Grid>,
    data: Vec<f64>,
}

impl fmt::Debug for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Field({:?}, |f|_2={:.3e})", self.grid.sizes, self.l2_norm())
    }
}

impl Field {
    pub fn zeros(grid: &Arc<Grid>) -> Self {
        Field { grid: grid.clone(), data: vec![0.0; grid.n_nodes()] }
    }

    pub fn constant(grid: &Arc<Grid>, value: f64) -> Self {
        Field { grid: grid.clone(), data: vec![value; grid.n_nodes()] }
    }

    pub fn from_values(grid: &Arc<Grid>, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), grid.n_nodes());
        Field { grid: grid.clone(), data }
    }

    /// Evaluate `f(x)` at every node.
    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn(&[f64]) -> f64) -> Self {
        let data = (0..grid.n_nodes()).map(|i| f(&grid.coords(i))).collect();
        Field { grid: grid.clone(), data }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_spec(&self) -> Spec {
        Spec { grid: self.grid.clone(), data: self.grid.forward(&self.data) }
    }

    /// Project into the 2/3 dealias band (round trip through spectral space).
    pub fn dealiased(&self) -> Field {
        let mut s = self.to_spec();
        s.dealias();
        s.to_nodal()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field { grid: self.grid.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Pointwise product of nodal values (no dealiasing; see `masked_product`).
    pub fn product(&self, other: &Field) -> Field {
        self.zip(other, |a, b| a * b)
    }

    pub fn zip(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Field {
        assert!(Arc::ptr_eq(&self.grid, &other.grid));
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Field { grid: self.grid.clone(), data }
    }

    pub fn axpy(&mut self, alpha: f64, x: &Field) {
        assert!(Arc::ptr_eq(&self.grid, &x.grid));
        for (d, &s) in self.data.iter_mut().zip(&x.data) {
            *d += alpha * s;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for d in &mut self.data {
            *d *= alpha;
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    /// `sqrt(∫ f² dx)` with the quadrature-exact nodal rule.
    pub fn l2_norm(&self) -> f64 {
        inner_l2(self, self).sqrt()
    }
}

/// Quadrature-exact `∫ a b dx` (trapezoid = exact for periodic band-limited).
pub fn inner_l2(a: &Field, b: &Field) -> f64 {
    assert!(Arc::ptr_eq(&a.grid, &b.grid));
    let dot: f64 = a.data.iter().zip(&b.data).map(|(&x, &y)| x * y).sum();
    dot * a.grid.cell_volume
}

/// `∫ a b + ∇a·∇b dx` with spectral gradients.
pub fn inner_h1(a: &Field, b: &Field) -> f64 {
    let ga = a.to_spec().gradient();
    let gb = b.to_spec().gradient();
    let mut acc = inner_l2(a, b);
    for (ca, cb) in ga.comps.iter().zip(&gb.comps) {
        acc += spec_inner(ca, cb);
    }
    acc
}

/// `∫ a b dx` evaluated in spectral space via Parseval.
pub fn spec_inner(a: &Spec, b: &Spec) -> f64 {
    assert!(Arc::ptr_eq(&a.grid, &b.grid));
    let g = &a.grid;
    let mut acc = 0.0;
    for i in 0..g.n_spec {
        acc += g.pair_weight[i] * (a.data[i] * b.data[i].conj()).re;
    }
    acc * g.volume
}

/// Scalar spectrum: normalized coefficients on the Hermitian half storage.
#[derive(Clone)]
pub struct Spec {
    grid: Arc<Grid>,
    data: Vec<Complex64>,
}

impl Spec {
    pub fn zeros(grid: &Arc<Grid>) -> Self {
        Spec { grid: grid.clone(), data: vec![Complex64::default(); grid.n_spec()] }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }
    pub fn data(&self) -> &[Complex64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn to_nodal(&self) -> Field {
        Field { grid: self.grid.clone(), data: self.grid.inverse(&self.data) }
    }

    /// Coefficient of the zero mode = spatial mean.
    pub fn mean(&self) -> f64 {
        self.data[0].re
    }

    /// Apply `sign · Δ^order`: multiplier `sign · (−|k|²)^order`.
    pub fn polyharmonic(&self, order: u32, sign: f64) -> Spec {
        let mut out = self.clone();
        for (c, &k2) in out.data.iter_mut().zip(&self.grid.k2) {
            *c *= sign * (-k2).powi(order as i32);
        }
        out
    }

    /// Multiply by an arbitrary real radial multiplier `m(|k|²)`.
    pub fn apply_radial(&self, m: impl Fn(f64) -> f64) -> Spec {
        let mut out = self.clone();
        for (c, &k2) in out.data.iter_mut().zip(&self.grid.k2) {
            *c *= m(k2);
        }
        out
    }

    /// Spectral gradient; Nyquist bins of each axis carry zero derivative.
    pub fn gradient(&self) -> VectorSpec {
        let g = &self.grid;
        let dim = g.dim();
        let mut comps = vec![Spec::zeros(g); dim];
        for bin in 0..g.n_spec() {
            let k = g.deriv_wavevector(bin);
            let c = self.data[bin];
            for a in 0..dim {
                comps[a].data[bin] = Complex64::new(0.0, k[a]) * c;
            }
        }
        VectorSpec { comps }
    }

    /// Zero every bin outside the 2/3 band.
    pub fn dealias(&mut self) {
        for (c, &m) in self.data.iter_mut().zip(&self.grid.mask) {
            *c *= m;
        }
    }

    pub fn axpy(&mut self, alpha: f64, x: &Spec) {
        assert!(Arc::ptr_eq(&self.grid, &x.grid));
        for (d, &s) in self.data.iter_mut().zip(&x.data) {
            *d += alpha * s;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for d in &mut self.data {
            *d *= alpha;
        }
    }

    pub fn l2_norm(&self) -> f64 {
        spec_inner(self, self).max(0.0).sqrt()
    }
}

/// Vector field with `dim` scalar components.
#[derive(Clone)]
pub struct VectorField {
    pub comps: Vec<Field>,
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VectorField(dim={}, |v|_2={:.3e})", self.comps.len(), self.l2_norm())
    }
}

impl VectorField {
    pub fn zeros(grid: &Arc<Grid>) -> Self {
        VectorField { comps: vec![Field::zeros(grid); grid.dim()] }
    }

    pub fn from_comps(comps: Vec<Field>) -> Self {
        assert!(!comps.is_empty());
        VectorField { comps }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.comps[0].grid()
    }

    pub fn dim(&self) -> usize {
        self.comps.len()
    }

    pub fn to_spec(&self) -> VectorSpec {
        VectorSpec { comps: self.comps.iter().map(Field::to_spec).collect() }
    }

    /// Pointwise Euclidean magnitude.
    pub fn magnitude(&self) -> Field {
        let grid = self.grid().clone();
        let n = grid.n_nodes();
        let mut data = vec![0.0; n];
        for c in &self.comps {
            for (d, &v) in data.iter_mut().zip(c.data()) {
                *d += v * v;
            }
        }
        for d in &mut data {
            *d = d.sqrt();
        }
        Field { grid, data }
    }

    /// Pointwise dot product with another vector field.
    pub fn dot(&self, other: &VectorField) -> Field {
        assert_eq!(self.dim(), other.dim());
        let mut acc = self.comps[0].product(&other.comps[0]);
        for a in 1..self.dim() {
            let p = self.comps[a].product(&other.comps[a]);
            acc.axpy(1.0, &p);
        }
        acc
    }

    /// Scale every component pointwise by a scalar field.
    pub fn scaled_by(&self, s: &Field) -> VectorField {
        VectorField { comps: self.comps.iter().map(|c| c.product(s)).collect() }
    }

    pub fn axpy(&mut self, alpha: f64, x: &VectorField) {
        assert_eq!(self.dim(), x.dim());
        for (c, xc) in self.comps.iter_mut().zip(&x.comps) {
            c.axpy(alpha, xc);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for c in &mut self.comps {
            c.scale(alpha);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.comps.iter().map(|c| inner_l2(c, c)).sum::<f64>().max(0.0).sqrt()
    }
}

/// `∫ a·b dx` for vector fields.
pub fn inner_l2_vec(a: &VectorField, b: &VectorField) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.comps.iter().zip(&b.comps).map(|(x, y)| inner_l2(x, y)).sum()
}

/// Vector spectrum (component-wise half storage).
#[derive(Clone)]
pub struct VectorSpec {
    pub comps: Vec<Spec>,
}

impl VectorSpec {
    pub fn zeros(grid: &Arc<Grid>) -> Self {
        VectorSpec { comps: vec![Spec::zeros(grid); grid.dim()] }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.comps[0].grid()
    }

    pub fn dim(&self) -> usize {
        self.comps.len()
    }

    pub fn to_nodal(&self) -> VectorField {
        VectorField { comps: self.comps.iter().map(Spec::to_nodal).collect() }
    }

    /// Spectral divergence `Σ_a ik_a v̂_a` (Nyquist-zeroed).
    pub fn divergence(&self) -> Spec {
        let g = self.grid().clone();
        let dim = g.dim();
        assert!(dim >= 2, "divergence needs a vector field in dim >= 2");
        let mut out = Spec::zeros(&g);
        for bin in 0..g.n_spec() {
            let k = g.deriv_wavevector(bin);
            let mut acc = Complex64::default();
            for (&ka, comp) in k.iter().zip(&self.comps) {
                acc += Complex64::new(0.0, ka) * comp.data[bin];
            }
            out.data[bin] = acc;
        }
        out
    }

    /// Leray projection onto divergence-free fields:
    /// `v̂ ← v̂ − k (k·v̂)/|k|²`, identity on the zero mode.
    pub fn leray_project(&mut self) {
        let g = self.grid().clone();
        let dim = g.dim();
        assert!(dim >= 2, "Leray projection needs a vector field in dim >= 2");
        for bin in 0..g.n_spec() {
            let k = g.deriv_wavevector(bin);
            let k2: f64 = k[..dim].iter().map(|&x| x * x).sum();
            if k2 == 0.0 {
                continue;
            }
            let mut kdotv = Complex64::default();
            for (&ka, comp) in k.iter().zip(&self.comps) {
                kdotv += ka * comp.data[bin];
            }
            let factor = kdotv / k2;
            for (&ka, comp) in k.iter().zip(&mut self.comps) {
                comp.data[bin] -= ka * factor;
            }
        }
    }

    pub fn dealias(&mut self) {
        for c in &mut self.comps {
            c.dealias();
        }
    }

    pub fn axpy(&mut self, alpha: f64, x: &VectorSpec) {
        for (c, xc) in self.comps.iter_mut().zip(&x.comps) {
            c.axpy(alpha, xc);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for c in &mut self.comps {
            c.scale(alpha);
        }
    }

    pub fn apply_radial(&self, m: impl Fn(f64) -> f64 + Copy) -> VectorSpec {
        VectorSpec { comps: self.comps.iter().map(|c| c.apply_radial(m)).collect() }
    }

    pub fn l2_norm(&self) -> f64 {
        self.comps.iter().map(|c| spec_inner(c, c)).sum::<f64>().max(0.0).sqrt()
    }
}

/// Nodal product of two fields followed by the 2/3 mask. This is the only
/// way nonlinear terms enter the solvers, which keeps every dynamical field
/// inside the dealias band.
pub fn masked_product(a: &Field, b: &Field) -> Spec {
    let mut s = a.product(b).to_spec();
    s.dealias();
    s
}

/// Mask an already-formed nodal field (e.g. a pointwise nonlinearity).
pub fn masked_spec(a: &Field) -> Spec {
    let mut s = a.to_spec();
    s.dealias();
    s
}

/// Smooth zero-mean random field: nodal Gaussian noise shaped by the radial
/// multiplier `(1+|k|²)^{-decay/2}`, masked, and normalized so the RMS value
/// (`‖f‖_{L²}/√|Ω|`) equals `amplitude`. Deterministic given the RNG state.
pub fn random_smooth(
    grid: &Arc<Grid>,
    rng: &mut impl rand::Rng,
    amplitude: f64,
    decay: f64,
) -> Field {
    use rand_distr::{Distribution, StandardNormal};
    let noise: Vec<f64> = (0..grid.n_nodes()).map(|_| StandardNormal.sample(rng)).collect();
    let mut s = Field::from_values(grid, noise).to_spec();
    let half = -decay / 2.0;
    for (c, (&k2, &m)) in s.data.iter_mut().zip(grid.k2.iter().zip(&grid.mask)) {
        *c *= m * (1.0 + k2).powf(half);
    }
    s.data[0] = Complex64::default();
    let f = s.to_nodal();
    let rms = f.l2_norm() / grid.volume().sqrt();
    if rms > 0.0 {
        let mut f = f;
        f.scale(amplitude / rms);
        f
    } else {
        f
    }
}

/// Smooth random vector field: independent smooth components.
pub fn random_smooth_vector(
    grid: &Arc<Grid>,
    rng: &mut impl rand::Rng,
    amplitude: f64,
    decay: f64,
) -> VectorField {
    VectorField {
        comps: (0..grid.dim()).map(|_| random_smooth(grid, rng, amplitude, decay)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn grid2(n: usize) -> Arc<Grid> {
        Grid::new(&[n, n], &[1.0, 1.0]).unwrap()
    }

    #[test]
    fn round_trip_random_fields() {
        for (sizes, lengths) in [
            (vec![16usize], vec![2.0]),
            (vec![12, 16], vec![1.0, 3.0]),
            (vec![8, 12, 16], vec![1.0, 2.0, 0.5]),
        ] {
            let g = Grid::new(&sizes, &lengths).unwrap();
            let mut rng = ChaCha20Rng::seed_from_u64(7);
            let f = Field::from_values(
                &g,
                (0..g.n_nodes()).map(|_| rng.gen::<f64>() - 0.5).collect(),
            );
            let back = f.to_spec().to_nodal();
            let err: f64 = f
                .data()
                .iter()
                .zip(back.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err <= 1e-12, "round trip error {err:.3e} on {sizes:?}");
        }
    }

    #[test]
    fn single_mode_coefficients() {
        // cos(2πx/L) must produce exactly the ±1 mode pair, i.e. the stored
        // half-spectrum bin (m=1 on axis 0) with coefficient 1/2.
        let g = Grid::new(&[16, 16], &[2.0, 1.0]).unwrap();
        let f = Field::from_fn(&g, |x| (2.0 * std::f64::consts::PI * x[0] / 2.0).cos());
        let s = f.to_spec();
        for bin in 0..g.n_spec() {
            let k = g.wavevector(bin);
            // Axis 0 stores the full signed range, so the pair ±1 both appear.
            let expect = if (k[0].abs() - std::f64::consts::PI).abs() < 1e-12 && k[1] == 0.0 {
                0.5
            } else {
                0.0
            };
            assert!(
                (s.data()[bin].re - expect).abs() < 1e-12 && s.data()[bin].im.abs() < 1e-12,
                "bin {bin} k={k:?} got {}",
                s.data()[bin]
            );
        }
    }

    #[test]
    fn laplacian_of_trig_modes() {
        // Δ cos(k·x) = −|k|² cos(k·x) and Δ³ brings −|k|⁶.
        let g = Grid::new(&[16, 24], &[2.0, 1.0]).unwrap();
        let kx = 2.0 * std::f64::consts::PI / 2.0;
        let ky = 2.0 * std::f64::consts::PI * 3.0 / 1.0;
        let f = Field::from_fn(&g, |x| (kx * x[0]).cos() * (ky * x[1]).sin());
        let k2 = kx * kx + ky * ky;

        let lap = f.to_spec().polyharmonic(1, 1.0).to_nodal();
        let err = lap
            .data()
            .iter()
            .zip(f.data())
            .map(|(l, v)| (l + k2 * v).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9 * k2, "laplacian error {err:.3e}");

        let tri = f.to_spec().polyharmonic(3, 1.0).to_nodal();
        let err3 = tri
            .data()
            .iter()
            .zip(f.data())
            .map(|(l, v)| (l + k2.powi(3) * v).abs())
            .fold(0.0, f64::max);
        assert!(err3 < 1e-6 * k2.powi(3), "triharmonic error {err3:.3e}");
    }

    #[test]
    fn gradient_of_trig_mode() {
        let g = Grid::new(&[16, 16], &[1.0, 1.0]).unwrap();
        let k = 2.0 * std::f64::consts::PI;
        let f = Field::from_fn(&g, |x| (k * x[0]).sin());
        let grad = f.to_spec().gradient().to_nodal();
        let exact = Field::from_fn(&g, |x| k * (k * x[0]).cos());
        let err = grad.comps[0]
            .data()
            .iter()
            .zip(exact.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-10 * k, "d/dx error {err:.3e}");
        assert!(grad.comps[1].max_abs() < 1e-12);
    }

    #[test]
    fn polyharmonic_and_derivatives_have_zero_mean() {
        let g = grid2(16);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let f = random_smooth(&g, &mut rng, 1.0, 2.0)
            .map(|v| v + 0.7); // nonzero mean input
        for m in 1..=3u32 {
            // Relative to max_abs: Δ³ scales bins by |k|⁶ ~ 1e10, so the
            // nodal mean only vanishes to round-off of that magnitude.
            let out = f.to_spec().polyharmonic(m, 1.0).to_nodal();
            let floor = 1e-13 * out.max_abs().max(1.0);
            assert!(out.mean().abs() < floor, "Δ^{m} mean {:.3e}", out.mean());
        }
        let grad = f.to_spec().gradient().to_nodal();
        for c in &grad.comps {
            assert!(c.mean().abs() < 1e-13 * c.max_abs().max(1.0));
        }
    }

    #[test]
    fn leray_output_divergence_free_and_orthogonal() {
        let g = grid2(24);
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let v = random_smooth_vector(&g, &mut rng, 1.0, 1.0);
        let mut vs = v.to_spec();
        vs.leray_project();
        let div = vs.divergence();
        assert!(
            div.l2_norm() <= 1e-11 * v.l2_norm().max(1.0),
            "divergence after projection {:.3e}",
            div.l2_norm()
        );
        // Orthogonality to gradients: ⟨P u, ∇q⟩ = 0.
        let q = random_smooth(&g, &mut rng, 1.0, 1.0);
        let gq = q.to_spec().gradient();
        let mut ip = 0.0;
        for (a, b) in vs.comps.iter().zip(&gq.comps) {
            ip += spec_inner(a, b);
        }
        assert!(ip.abs() <= 1e-10 * v.l2_norm() * q.l2_norm().max(1.0));
        // Idempotence.
        let mut vs2 = vs.clone();
        vs2.leray_project();
        let mut diff = 0.0f64;
        for (a, b) in vs.comps.iter().zip(&vs2.comps) {
            for (x, y) in a.data().iter().zip(b.data()) {
                diff = diff.max((x - y).norm());
            }
        }
        assert!(diff <= 1e-14);
    }

    #[test]
    fn parseval_matches_nodal_inner_product() {
        let g = Grid::new(&[12, 16], &[2.0, 3.0]).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let a = Field::from_values(&g, (0..g.n_nodes()).map(|_| rng.gen::<f64>() - 0.5).collect());
        let b = Field::from_values(&g, (0..g.n_nodes()).map(|_| rng.gen::<f64>() - 0.5).collect());
        let nodal = inner_l2(&a, &b);
        let spectral = spec_inner(&a.to_spec(), &b.to_spec());
        assert!(
            (nodal - spectral).abs() <= 1e-12 * nodal.abs().max(1.0),
            "nodal {nodal} vs spectral {spectral}"
        );
        // Closed form: ∫ cos² over the box is |Ω|/2.
        let c = Field::from_fn(&g, |x| (2.0 * std::f64::consts::PI * x[0] / 2.0).cos());
        assert!((inner_l2(&c, &c) - g.volume() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn h1_adds_gradient_energy() {
        let g = grid2(16);
        let k = 2.0 * std::f64::consts::PI;
        let f = Field::from_fn(&g, |x| (k * x[0]).cos());
        // ⟨f,f⟩_{H1} = (1+k²)·|Ω|/2 for a unit single mode.
        let want = (1.0 + k * k) * g.volume() / 2.0;
        assert!((inner_h1(&f, &f) - want).abs() < 1e-9 * want);
    }

    #[test]
    fn masked_product_kills_outer_third() {
        let g = grid2(24); // keep |m| ≤ 8
        let k = 2.0 * std::f64::consts::PI;
        let f = Field::from_fn(&g, |x| (5.0 * k * x[0]).cos());
        let p = masked_product(&f, &f); // cos² has modes 0 and 10; 10 > 8 is dropped
        let nodal = p.to_nodal();
        let err = nodal
            .data()
            .iter()
            .map(|&v| (v - 0.5).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-12, "masked cos² should be its mean 1/2, err {err:.3e}");
    }

    #[test]
    fn random_smooth_is_reproducible_and_zero_mean() {
        let g = grid2(16);
        let f1 = random_smooth(&g, &mut ChaCha20Rng::seed_from_u64(42), 0.3, 4.0);
        let f2 = random_smooth(&g, &mut ChaCha20Rng::seed_from_u64(42), 0.3, 4.0);
        assert_eq!(f1.data(), f2.data());
        assert!(f1.mean().abs() < 1e-13);
        let rms = f1.l2_norm() / g.volume().sqrt();
        assert!((rms - 0.3).abs() < 1e-12);
    }

    #[test]
    fn grid_rejects_bad_shapes() {
        assert!(Grid::new(&[16, 16, 16, 16], &[1.0; 4]).is_err());
        assert!(Grid::new(&[15, 16], &[1.0, 1.0]).is_err());
        assert!(Grid::new(&[2, 16], &[1.0, 1.0]).is_err());
        assert!(Grid::new(&[16, 16], &[1.0]).is_err());
        assert!(Grid::new(&[16, 16], &[0.0, 1.0]).is_err());
        // Smallest admissible grid: the |m| <= 1 band is still non-trivial.
        assert!(Grid::new(&[4, 4], &[1.0, 1.0]).is_ok());
    }
}
