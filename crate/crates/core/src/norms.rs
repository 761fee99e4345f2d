//! Lebesgue, Sobolev and uniformly local norms, and the smooth cutoffs used
//! to localize energy functionals.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{KslbError, Result};
use crate::fields::{fft_nd, gradient, integrate, Grid, ScalarField, MAX_DIM};

/// `(int |f|^p)^{1/p}`; `p = f64::INFINITY` gives the largest absolute sample.
pub fn lp_norm(f: &ScalarField, p: f64) -> Result<f64> {
    check_exponent(p)?;
    if p.is_infinite() {
        return Ok(f.max_abs());
    }
    let s: f64 = f.values().iter().map(|v| v.abs().powf(p)).sum();
    Ok((f.grid().cell_volume() * s).powf(1.0 / p))
}

fn check_exponent(p: f64) -> Result<()> {
    if !(p >= 1.0) {
        return Err(KslbError::InvalidArgument(format!("exponent must be >= 1, got {p}")));
    }
    Ok(())
}

/// `||c||_inf + max_x |grad c(x)|`.
pub fn w1inf_norm(c: &ScalarField) -> f64 {
    c.max_abs() + gradient(c).max_norm()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CutoffSpec {
    /// Flat grid index of the center `x0`.
    pub center: usize,
    pub radius: f64,
}

impl CutoffSpec {
    pub fn validate(&self, grid: &Grid) -> Result<()> {
        if self.center >= grid.len() {
            return Err(KslbError::InvalidArgument(format!(
                "center index {} outside grid of {} points",
                self.center,
                grid.len()
            )));
        }
        if !(self.radius > 0.0) || 4.0 * self.radius >= grid.box_len() {
            return Err(KslbError::Precondition(format!(
                "cutoff radius {} needs 0 < 2R < L/2 = {}",
                self.radius,
                grid.box_len() / 2.0
            )));
        }
        Ok(())
    }
}

/// Value of the localizing bump at squared distance `r2` from its center.
pub fn phi_profile(r2: f64, radius: f64) -> f64 {
    let four_r2 = 4.0 * radius * radius;
    if r2 >= four_r2 {
        0.0
    } else {
        (4.0 / 3.0 + four_r2 / (r2 - four_r2)).exp()
    }
}

/// The bump restricted to its support, with analytic first and second derivatives.
#[derive(Clone, Debug)]
pub struct CutoffWeights {
    pub spec: CutoffSpec,
    pub indices: Vec<usize>,
    pub phi: Vec<f64>,
    pub grad: Vec<[f64; MAX_DIM]>,
    pub hess: Vec<[[f64; MAX_DIM]; MAX_DIM]>,
}

impl CutoffWeights {
    pub fn new(grid: &Grid, spec: CutoffSpec) -> Result<Self> {
        spec.validate(grid)?;
        let d = grid.dim();
        let r = spec.radius;
        let four_r2 = 4.0 * r * r;
        let x0 = grid.position(spec.center);
        let mut out = Self {
            spec,
            indices: Vec::new(),
            phi: Vec::new(),
            grad: Vec::new(),
            hess: Vec::new(),
        };
        for i in 0..grid.len() {
            let x = grid.displacement(&grid.position(i), &x0);
            let r2: f64 = x.iter().map(|v| v * v).sum();
            if r2 >= four_r2 {
                continue;
            }
            let phi = phi_profile(r2, r);
            let s = r2 - four_r2;
            let mut de = [0.0; MAX_DIM];
            for a in 0..d {
                de[a] = -2.0 * four_r2 * x[a] / (s * s);
            }
            let mut g = [0.0; MAX_DIM];
            let mut h = [[0.0; MAX_DIM]; MAX_DIM];
            for a in 0..d {
                g[a] = phi * de[a];
                for b in 0..d {
                    let mut dde = 8.0 * four_r2 * x[a] * x[b] / (s * s * s);
                    if a == b {
                        dde -= 2.0 * four_r2 / (s * s);
                    }
                    h[a][b] = phi * (de[a] * de[b] + dde);
                }
            }
            out.indices.push(i);
            out.phi.push(phi);
            out.grad.push(g);
            out.hess.push(h);
        }
        Ok(out)
    }

    /// `int f phi`.
    pub fn integrate(&self, grid: &Grid, f: &[f64]) -> f64 {
        self.integrate_with(grid, |i| f[i])
    }

    /// `int g(x) phi(x) dx` for a pointwise integrand given by flat index.
    pub fn integrate_with(&self, grid: &Grid, g: impl Fn(usize) -> f64) -> f64 {
        let s: f64 = self
            .indices
            .iter()
            .zip(&self.phi)
            .map(|(&i, &p)| g(i) * p)
            .sum();
        grid.cell_volume() * s
    }

    pub fn max_grad_norm(&self) -> f64 {
        self.grad
            .iter()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Largest Frobenius norm of the Hessian.
    pub fn max_hess_norm(&self) -> f64 {
        self.hess
            .iter()
            .map(|h| h.iter().flatten().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Largest `|grad phi|^2 / phi` over the support.
    pub fn max_grad_sq_over_phi(&self) -> f64 {
        self.grad
            .iter()
            .zip(&self.phi)
            .map(|(g, &p)| g.iter().map(|v| v * v).sum::<f64>() / p)
            .fold(0.0, f64::max)
    }
}

pub fn cutoff_phi(grid: &Grid, spec: CutoffSpec) -> Result<ScalarField> {
    let w = CutoffWeights::new(grid, spec)?;
    let mut f = ScalarField::zeros(*grid);
    for (&i, &p) in w.indices.iter().zip(&w.phi) {
        f.values_mut()[i] = p;
    }
    Ok(f)
}

fn smooth_step_g(s: f64) -> f64 {
    if s > 0.0 {
        (-1.0 / s).exp()
    } else {
        0.0
    }
}

/// Radial profile equal to 1 on `[0, 1]`, 0 on `[2, inf)`, smooth and decreasing between.
pub fn psi_profile(r: f64) -> f64 {
    let a = smooth_step_g(2.0 - r);
    let b = smooth_step_g(r - 1.0);
    if a + b == 0.0 {
        0.0
    } else {
        a / (a + b)
    }
}

/// The smooth cutoff `psi(x / M)` centered at the origin.
pub fn cutoff_psi(grid: &Grid, m: f64) -> Result<ScalarField> {
    if !(m > 0.0) || 4.0 * m >= grid.box_len() {
        return Err(KslbError::Precondition(format!(
            "cutoff scale {m} needs 0 < 2M < L/2 = {}",
            grid.box_len() / 2.0
        )));
    }
    let o = grid.position(grid.origin());
    Ok(ScalarField::from_fn(*grid, |x| {
        psi_profile(grid.wrapped_distance(x, &o) / m)
    }))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UlocNormParams {
    pub p: f64,
    pub ball_radius: f64,
    pub center_stride: usize,
}

impl UlocNormParams {
    /// Scan every point in 1-D and 2-D, every second point in 3-D unless
    /// that would step more than half a ball radius.
    pub fn new(grid: &Grid, p: f64, ball_radius: f64) -> Self {
        let mut center_stride = if grid.dim() == 3 { 2 } else { 1 };
        while center_stride > 1 && center_stride as f64 * grid.spacing() > ball_radius / 2.0 {
            center_stride -= 1;
        }
        Self {
            p,
            ball_radius,
            center_stride,
        }
    }

    pub fn validate(&self, grid: &Grid) -> Result<()> {
        check_exponent(self.p)?;
        if self.p.is_infinite() {
            return Err(KslbError::InvalidArgument("uniformly local norm needs finite p".into()));
        }
        if !(self.ball_radius >= 1.0) {
            return Err(KslbError::Precondition(format!(
                "ball radius must be >= 1, got {}",
                self.ball_radius
            )));
        }
        if self.center_stride == 0
            || self.center_stride as f64 * grid.spacing() > self.ball_radius / 2.0
        {
            return Err(KslbError::Precondition(format!(
                "center stride {} too coarse for ball radius {}",
                self.center_stride, self.ball_radius
            )));
        }
        if 2.0 * self.ball_radius >= grid.box_len() {
            return Err(KslbError::Precondition(format!(
                "ball radius {} does not fit the box",
                self.ball_radius
            )));
        }
        Ok(())
    }
}

/// Ball integrals `int_{B_R(x)} g` for every grid point `x`, computed as one
/// periodic convolution with the ball indicator. Samples lying exactly on
/// the sphere carry weight 1/2.
#[derive(Clone, Debug)]
pub struct BallAverager {
    grid: Grid,
    radius: f64,
    kernel_hat: Vec<Complex64>,
}

impl BallAverager {
    pub fn new(grid: &Grid, radius: f64) -> Self {
        let zero = grid.position(0);
        let tol = 1e-9 * grid.spacing();
        let mut kernel: Vec<Complex64> = (0..grid.len())
            .map(|i| {
                let r = grid.wrapped_distance(&grid.position(i), &zero);
                let w = if (r - radius).abs() <= tol {
                    0.5
                } else if r < radius {
                    1.0
                } else {
                    0.0
                };
                Complex64::new(w, 0.0)
            })
            .collect();
        fft_nd(grid, &mut kernel, false);
        Self {
            grid: *grid,
            radius,
            kernel_hat: kernel,
        }
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// `int_{B_R(x_i)} g` for every grid index `i` (clamped at 0 for `g >= 0` round-off).
    pub fn ball_integrals(&self, g: &[f64]) -> Vec<f64> {
        let grid = &self.grid;
        let mut buf: Vec<Complex64> = g.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft_nd(grid, &mut buf, false);
        buf.par_iter_mut()
            .zip(self.kernel_hat.par_iter())
            .for_each(|(a, k)| *a *= k);
        fft_nd(grid, &mut buf, true);
        let scale = grid.cell_volume() / grid.len() as f64;
        buf.iter().map(|c| (c.re * scale).max(0.0)).collect()
    }

    /// `sup_x int_{B_R(x)} g` over centers on the stride lattice.
    pub fn sup_ball_integral(&self, g: &[f64], stride: usize) -> f64 {
        let vals = self.ball_integrals(g);
        let grid = &self.grid;
        let mut best = 0.0_f64;
        for (i, &v) in vals.iter().enumerate() {
            if stride > 1 {
                let idx = grid.multi_index(i);
                if (0..grid.dim()).any(|a| idx[a] % stride != 0) {
                    continue;
                }
            }
            best = best.max(v);
        }
        best
    }

    /// `||f||_{p,R}` with this averager's radius.
    pub fn uloc_norm(&self, f: &[f64], p: f64, stride: usize) -> f64 {
        let g: Vec<f64> = f.iter().map(|v| v.abs().powf(p)).collect();
        self.sup_ball_integral(&g, stride).powf(1.0 / p)
    }
}

/// `sup_x (int_{B_R(x)} |f|^p)^{1/p}` over scanned grid centers.
pub fn uloc_norm(f: &ScalarField, params: UlocNormParams) -> Result<f64> {
    params.validate(f.grid())?;
    Ok(BallAverager::new(f.grid(), params.ball_radius).uloc_norm(
        f.values(),
        params.p,
        params.center_stride,
    ))
}

/// `||f||_{p,R}^p / (R^d ||f||_{p,1}^p)`; zero for the zero field.
pub fn uloc_covering_check(f: &ScalarField, p: f64, r: f64) -> Result<f64> {
    let grid = f.grid();
    let big = uloc_norm(f, UlocNormParams::new(grid, p, r))?;
    let unit = uloc_norm(f, UlocNormParams::new(grid, p, 1.0))?;
    if unit == 0.0 {
        return Ok(0.0);
    }
    Ok(big.powf(p) / (r.powi(grid.dim() as i32) * unit.powf(p)))
}

/// Convenience: `int |f|^p`.
pub fn lp_power(f: &ScalarField, p: f64) -> f64 {
    integrate(&f.map(|v| v.abs().powf(p)))
}
