//! Periodic grids, real fields and their spectral calculus.
//!
//! The box `[-L/2, L/2)^d` is sampled at `x_i = -L/2 + i h`, so the origin
//! sits on grid index `n_axis / 2` along every axis. Samples are stored
//! row-major with the last axis fastest. Frequencies follow the symmetric
//! range `(-N/2, N/2]`; odd-order derivatives zero the Nyquist mode.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::error::{KslbError, Result};

pub const MAX_DIM: usize = 3;
pub const MIN_POINTS_PER_AXIS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    d: usize,
    n_axis: usize,
    box_len: f64,
    spacing: f64,
}

impl Grid {
    pub fn new(d: usize, n_axis: usize, box_len: f64) -> Result<Self> {
        if !(1..=MAX_DIM).contains(&d) {
            return Err(KslbError::InvalidGrid(format!(
                "dimension must be 1, 2 or 3, got {d}"
            )));
        }
        if n_axis < MIN_POINTS_PER_AXIS || !n_axis.is_power_of_two() {
            return Err(KslbError::InvalidGrid(format!(
                "points per axis must be a power of two >= {MIN_POINTS_PER_AXIS}, got {n_axis}"
            )));
        }
        if !(box_len.is_finite() && box_len > 0.0) {
            return Err(KslbError::InvalidGrid(format!(
                "box length must be positive, got {box_len}"
            )));
        }
        Ok(Self {
            d,
            n_axis,
            box_len,
            spacing: box_len / n_axis as f64,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn n_axis(&self) -> usize {
        self.n_axis
    }

    pub fn box_len(&self) -> f64 {
        self.box_len
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Total number of samples, `n_axis^d`.
    pub fn len(&self) -> usize {
        self.n_axis.pow(self.d as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Quadrature weight of one sample, `h^d`.
    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(self.d as i32)
    }

    pub fn volume(&self) -> f64 {
        self.box_len.powi(self.d as i32)
    }

    pub fn coordinate(&self, i: usize) -> f64 {
        -0.5 * self.box_len + i as f64 * self.spacing
    }

    pub fn multi_index(&self, flat: usize) -> [usize; MAX_DIM] {
        let mut idx = [0; MAX_DIM];
        let mut rem = flat;
        for a in (0..self.d).rev() {
            idx[a] = rem % self.n_axis;
            rem /= self.n_axis;
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter()
            .take(self.d)
            .fold(0, |acc, &i| acc * self.n_axis + (i % self.n_axis))
    }

    pub fn position(&self, flat: usize) -> [f64; MAX_DIM] {
        let idx = self.multi_index(flat);
        let mut x = [0.0; MAX_DIM];
        for a in 0..self.d {
            x[a] = self.coordinate(idx[a]);
        }
        x
    }

    /// Flat index of the grid point at the origin.
    pub fn origin(&self) -> usize {
        self.flat_index(&[self.n_axis / 2; MAX_DIM])
    }

    /// Minimal-image representative of a coordinate difference.
    pub fn wrap(&self, dx: f64) -> f64 {
        dx - self.box_len * (dx / self.box_len).round()
    }

    /// Periodic (minimal-image) displacement `x - y`.
    pub fn displacement(&self, x: &[f64; MAX_DIM], y: &[f64; MAX_DIM]) -> [f64; MAX_DIM] {
        let mut out = [0.0; MAX_DIM];
        for a in 0..self.d {
            out[a] = self.wrap(x[a] - y[a]);
        }
        out
    }

    pub fn wrapped_distance(&self, x: &[f64; MAX_DIM], y: &[f64; MAX_DIM]) -> f64 {
        self.displacement(x, y).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Integer mode number of frequency index `i`, in `(-N/2, N/2]`.
    pub fn mode_number(&self, i: usize) -> i64 {
        let n = self.n_axis as i64;
        let i = i as i64;
        if i <= n / 2 {
            i
        } else {
            i - n
        }
    }

    /// Angular wavenumber `2 pi k / L` of frequency index `i`.
    pub fn wavenumber(&self, i: usize) -> f64 {
        2.0 * PI * self.mode_number(i) as f64 / self.box_len
    }

    /// Wavenumber used by odd-order derivatives: Nyquist mode zeroed.
    pub fn odd_wavenumber(&self, i: usize) -> f64 {
        if i == self.n_axis / 2 {
            0.0
        } else {
            self.wavenumber(i)
        }
    }

    /// Largest `|xi|` present on the grid (the Nyquist corner).
    pub fn max_wavenumber(&self) -> f64 {
        (self.d as f64).sqrt() * PI / self.spacing
    }

    pub(crate) fn wavenumber_table(&self) -> Vec<f64> {
        (0..self.n_axis).map(|i| self.wavenumber(i)).collect()
    }

    pub(crate) fn odd_wavenumber_table(&self) -> Vec<f64> {
        (0..self.n_axis).map(|i| self.odd_wavenumber(i)).collect()
    }

    /// `|xi|^2` per flat spectral index.
    pub fn wavenumber_sq(&self) -> Vec<f64> {
        let k = self.wavenumber_table();
        (0..self.len())
            .map(|flat| {
                let idx = self.multi_index(flat);
                (0..self.d).map(|a| k[idx[a]] * k[idx[a]]).sum()
            })
            .collect()
    }

    fn check_same(&self, other: &Grid) -> Result<()> {
        if self != other {
            return Err(KslbError::ShapeMismatch(format!(
                "grids differ: {self:?} vs {other:?}"
            )));
        }
        Ok(())
    }
}

pub fn make_grid(d: usize, n_axis: usize, box_len: f64) -> Result<Grid> {
    Grid::new(d, n_axis, box_len)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(KslbError::ShapeMismatch(format!(
                "expected {} samples, got {}",
                grid.len(),
                values.len()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.len()],
        }
    }

    /// Samples `f` at every grid position (only the first `d` coordinates are meaningful).
    pub fn from_fn(grid: Grid, f: impl Fn(&[f64; MAX_DIM]) -> f64) -> Self {
        let values = (0..grid.len()).map(|i| f(&grid.position(i))).collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.grid.check_same(&other.grid)?;
        Ok(Self {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        self.map(|v| alpha * v)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Flat index of the largest sample (first one on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.values.iter().position(|v| !v.is_finite())
    }

    pub fn is_finite(&self) -> bool {
        self.first_non_finite().is_none()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    grid: Grid,
    components: Vec<ScalarField>,
}

impl VectorField {
    pub fn new(components: Vec<ScalarField>) -> Result<Self> {
        let grid = *components
            .first()
            .ok_or_else(|| KslbError::ShapeMismatch("vector field needs components".into()))?
            .grid();
        if components.len() != grid.dim() {
            return Err(KslbError::ShapeMismatch(format!(
                "expected {} components, got {}",
                grid.dim(),
                components.len()
            )));
        }
        for c in &components {
            grid.check_same(c.grid())?;
        }
        Ok(Self { grid, components })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn components(&self) -> &[ScalarField] {
        &self.components
    }

    pub fn component(&self, axis: usize) -> &ScalarField {
        &self.components[axis]
    }

    /// Pointwise squared Euclidean norm.
    pub fn norm_sq(&self) -> ScalarField {
        let mut out = vec![0.0; self.grid.len()];
        for c in &self.components {
            for (o, v) in out.iter_mut().zip(c.values()) {
                *o += v * v;
            }
        }
        ScalarField {
            grid: self.grid,
            values: out,
        }
    }

    /// `max_x |v(x)|`.
    pub fn max_norm(&self) -> f64 {
        self.norm_sq().values().iter().fold(0.0_f64, |m, &v| m.max(v)).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralField {
    grid: Grid,
    coeffs: Vec<Complex64>,
}

impl SpectralField {
    pub fn new(grid: Grid, coeffs: Vec<Complex64>) -> Result<Self> {
        if coeffs.len() != grid.len() {
            return Err(KslbError::ShapeMismatch(format!(
                "expected {} coefficients, got {}",
                grid.len(),
                coeffs.len()
            )));
        }
        Ok(Self { grid, coeffs })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            coeffs: vec![Complex64::new(0.0, 0.0); grid.len()],
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    /// Multiplies every coefficient by `symbol(xi, xi_odd)`, where `xi_odd`
    /// has the Nyquist component zeroed.
    pub fn apply_symbol(
        &self,
        symbol: impl Fn(&[f64; MAX_DIM], &[f64; MAX_DIM]) -> Complex64 + Sync,
    ) -> Self {
        let g = self.grid;
        let k = g.wavenumber_table();
        let ko = g.odd_wavenumber_table();
        let coeffs = self
            .coeffs
            .par_iter()
            .enumerate()
            .map(|(flat, &c)| {
                let idx = g.multi_index(flat);
                let mut xi = [0.0; MAX_DIM];
                let mut xo = [0.0; MAX_DIM];
                for a in 0..g.d {
                    xi[a] = k[idx[a]];
                    xo[a] = ko[idx[a]];
                }
                c * symbol(&xi, &xo)
            })
            .collect();
        Self { grid: g, coeffs }
    }

    pub fn derivative(&self, axis: usize) -> Self {
        self.apply_symbol(|_, xo| Complex64::new(0.0, xo[axis]))
    }

    pub fn second_derivative(&self, a: usize, b: usize) -> Self {
        if a == b {
            self.apply_symbol(|xi, _| Complex64::new(-xi[a] * xi[a], 0.0))
        } else {
            self.apply_symbol(|_, xo| Complex64::new(-xo[a] * xo[b], 0.0))
        }
    }

    pub fn laplacian(&self) -> Self {
        self.apply_symbol(|xi, _| Complex64::new(-xi.iter().map(|v| v * v).sum::<f64>(), 0.0))
    }

    /// Zeroes every mode with `|k_a| > N/3` along some axis (2/3 rule).
    pub fn dealiased(mut self) -> Self {
        dealias_in_place(&self.grid, &mut self.coeffs);
        self
    }

    /// Largest violation of `F(-k) = conj(F(k))`, relative to the largest coefficient.
    pub fn hermitian_defect(&self) -> f64 {
        let g = self.grid;
        let n = g.n_axis;
        let scale = self.coeffs.iter().fold(0.0_f64, |m, c| m.max(c.norm()));
        if scale == 0.0 {
            return 0.0;
        }
        let mut worst = 0.0_f64;
        for flat in 0..g.len() {
            let idx = g.multi_index(flat);
            let mut mirror = [0; MAX_DIM];
            for a in 0..g.d {
                mirror[a] = (n - idx[a]) % n;
            }
            let m = g.flat_index(&mirror);
            worst = worst.max((self.coeffs[flat] - self.coeffs[m].conj()).norm());
        }
        worst / scale
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermitian_defect() <= tol
    }

    pub fn to_physical(&self) -> ScalarField {
        from_spectral(self)
    }
}

pub(crate) fn dealias_in_place(grid: &Grid, coeffs: &mut [Complex64]) {
    let n = grid.n_axis as i64;
    let keep: Vec<bool> = (0..grid.n_axis)
        .map(|i| 3 * grid.mode_number(i).abs() <= n)
        .collect();
    let zero = Complex64::new(0.0, 0.0);
    for (flat, c) in coeffs.iter_mut().enumerate() {
        let idx = grid.multi_index(flat);
        if (0..grid.d).any(|a| !keep[idx[a]]) {
            *c = zero;
        }
    }
}

type PlanCache = Mutex<HashMap<(usize, bool), Arc<dyn Fft<f64>>>>;

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    static PLANS: OnceLock<PlanCache> = OnceLock::new();
    let cache = PLANS.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
    guard
        .entry((n, inverse))
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            if inverse {
                planner.plan_fft_inverse(n)
            } else {
                planner.plan_fft_forward(n)
            }
        })
        .clone()
}

/// Columns gathered together on strided axes, so reads and writes touch short contiguous runs.
const TILE: usize = 16;

/// Unnormalized in-place d-dimensional DFT, one axis at a time.
pub(crate) fn fft_nd(grid: &Grid, data: &mut [Complex64], inverse: bool) {
    let n = grid.n_axis;
    let d = grid.d;
    let fft = plan(n, inverse);
    let scratch_len = fft.get_inplace_scratch_len();
    let zero = Complex64::new(0.0, 0.0);
    for axis in 0..d {
        let stride = n.pow((d - 1 - axis) as u32);
        if stride == 1 {
            data.par_chunks_mut(n * TILE).for_each_init(
                || vec![zero; scratch_len],
                |scratch, lines| fft.process_with_scratch(lines, scratch),
            );
            continue;
        }
        let block = n * stride;
        let mut tmp = take_scratch(block);
        for blk in data.chunks_mut(block) {
            let src: &[Complex64] = blk;
            // Line o of tmp holds column o of the block.
            tmp.par_chunks_mut(n * TILE).enumerate().for_each_init(
                || vec![zero; scratch_len],
                |scratch, (bi, lines)| {
                    let o0 = bi * TILE;
                    let w = lines.len() / n;
                    for k in 0..n {
                        let row = &src[k * stride + o0..k * stride + o0 + w];
                        for (b, v) in row.iter().enumerate() {
                            lines[b * n + k] = *v;
                        }
                    }
                    fft.process_with_scratch(lines, scratch);
                },
            );
            let t: &[Complex64] = &tmp;
            blk.par_chunks_mut(stride * TILE.min(n)).enumerate().for_each(|(ki, rows)| {
                let k0 = ki * TILE.min(n);
                let kw = rows.len() / stride;
                for o0 in (0..stride).step_by(TILE) {
                    let ow = TILE.min(stride - o0);
                    for dk in 0..kw {
                        let row = &mut rows[dk * stride + o0..dk * stride + o0 + ow];
                        for (b, v) in row.iter_mut().enumerate() {
                            *v = t[(o0 + b) * n + k0 + dk];
                        }
                    }
                }
            });
        }
        SCRATCH.with(|s| *s.borrow_mut() = tmp);
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<Complex64>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Reused transpose buffer; fully overwritten before it is read.
fn take_scratch(len: usize) -> Vec<Complex64> {
    let mut v = SCRATCH.with(|s| std::mem::take(&mut *s.borrow_mut()));
    v.resize(len, Complex64::new(0.0, 0.0));
    v
}

pub fn to_spectral(f: &ScalarField) -> Result<SpectralField> {
    if let Some(index) = f.first_non_finite() {
        return Err(KslbError::NonFinite { index });
    }
    Ok(forward_unchecked(f))
}

pub(crate) fn forward_unchecked(f: &ScalarField) -> SpectralField {
    let mut coeffs: Vec<Complex64> = f.values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_nd(&f.grid, &mut coeffs, false);
    SpectralField {
        grid: f.grid,
        coeffs,
    }
}

pub fn from_spectral(f: &SpectralField) -> ScalarField {
    let mut buf = f.coeffs.clone();
    fft_nd(&f.grid, &mut buf, true);
    let norm = 1.0 / f.grid.len() as f64;
    ScalarField {
        grid: f.grid,
        values: buf.iter().map(|c| c.re * norm).collect(),
    }
}

pub fn gradient(f: &ScalarField) -> VectorField {
    gradient_of(&forward_unchecked(f))
}

pub(crate) fn gradient_of(spec: &SpectralField) -> VectorField {
    let d = spec.grid.d;
    VectorField {
        grid: spec.grid,
        components: (0..d).map(|a| from_spectral(&spec.derivative(a))).collect(),
    }
}

pub fn laplacian(f: &ScalarField) -> ScalarField {
    from_spectral(&forward_unchecked(f).laplacian())
}

pub fn divergence(v: &VectorField) -> ScalarField {
    let g = v.grid;
    let mut acc = SpectralField::zeros(g);
    for (a, comp) in v.components.iter().enumerate() {
        let da = forward_unchecked(comp).derivative(a);
        for (o, c) in acc.coeffs.iter_mut().zip(da.coeffs) {
            *o += c;
        }
    }
    from_spectral(&acc)
}

/// All second partials; entry `[a][b]` is `d^2 f / dx_a dx_b` (symmetric).
pub fn hessian(f: &ScalarField) -> Vec<Vec<ScalarField>> {
    hessian_of(&forward_unchecked(f))
}

pub(crate) fn hessian_of(spec: &SpectralField) -> Vec<Vec<ScalarField>> {
    let d = spec.grid.d;
    let mut out: Vec<Vec<Option<ScalarField>>> = vec![vec![None; d]; d];
    for a in 0..d {
        for b in a..d {
            let h = from_spectral(&spec.second_derivative(a, b));
            out[b][a] = Some(h.clone());
            out[a][b] = Some(h);
        }
    }
    out.into_iter()
        .map(|row| row.into_iter().map(|h| h.expect("filled")).collect())
        .collect()
}

/// Pointwise `|D^2 f|^2`, the sum of squares of all second partials.
pub fn hessian_sq(f: &ScalarField) -> ScalarField {
    hessian_sq_from(&hessian(f))
}

pub(crate) fn hessian_sq_from(h: &[Vec<ScalarField>]) -> ScalarField {
    let grid = *h[0][0].grid();
    let mut out = vec![0.0; grid.len()];
    for row in h {
        for entry in row {
            for (o, v) in out.iter_mut().zip(entry.values()) {
                *o += v * v;
            }
        }
    }
    ScalarField { grid, values: out }
}

/// Whether the semigroup carries the `-1` zero-order term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Damping {
    /// `e^{(t/tau) Delta}`
    None,
    /// `e^{(t/tau)(-1 + Delta)}`
    Unit,
}

impl Damping {
    pub fn rate(self) -> f64 {
        match self {
            Damping::None => 0.0,
            Damping::Unit => 1.0,
        }
    }
}

/// Applies the Fourier multiplier `exp(-(t/tau)(damping + |xi|^2))`.
pub fn heat_propagate(f: &ScalarField, t: f64, tau: f64, damping: Damping) -> Result<ScalarField> {
    if !(t >= 0.0) {
        return Err(KslbError::InvalidArgument(format!(
            "propagation time must be >= 0, got {t}"
        )));
    }
    if !(tau > 0.0) {
        return Err(KslbError::InvalidArgument(format!(
            "tau must be positive, got {tau}"
        )));
    }
    if t == 0.0 {
        return Ok(f.clone());
    }
    Ok(from_spectral(&heat_propagate_spectral(
        &to_spectral(f)?,
        t,
        tau,
        damping,
    )))
}

pub(crate) fn heat_propagate_spectral(
    f: &SpectralField,
    t: f64,
    tau: f64,
    damping: Damping,
) -> SpectralField {
    let r = damping.rate();
    f.apply_symbol(|xi, _| {
        let ksq: f64 = xi.iter().map(|v| v * v).sum();
        Complex64::new((-(t / tau) * (r + ksq)).exp(), 0.0)
    })
}

/// Periodic midpoint rule: `h^d * sum(samples)`.
pub fn integrate(f: &ScalarField) -> f64 {
    f.grid.cell_volume() * f.values.iter().sum::<f64>()
}

/// Pointwise product, returned with the 2/3 rule applied.
pub fn product(f: &ScalarField, g: &ScalarField) -> Result<ScalarField> {
    let raw = f.zip_map(g, |a, b| a * b)?;
    Ok(from_spectral(&forward_unchecked(&raw).dealiased()))
}
