//! Homogeneous Littlewood-Paley decomposition on the periodic grid.
//!
//! `low_freq(f, j)` multiplies by `chi(2^{-j} |xi|)` where `chi` is a smooth
//! radial profile equal to 1 on `[0, 3/4]` and 0 on `[4/3, inf)`. The block
//! `dyadic_block(f, j)` is the difference `S_{j+1} - S_j`, supported in the
//! annulus `3/4 * 2^j <= |xi| <= 8/3 * 2^j`, so the blocks telescope exactly.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{KslbError, Result};
use crate::fields::{
    forward_unchecked, from_spectral, gradient, Grid, ScalarField, SpectralField,
};
use crate::norms::{phi_profile, uloc_norm, UlocNormParams};

const INNER: f64 = 3.0 / 4.0;
const OUTER: f64 = 4.0 / 3.0;

fn g(s: f64) -> f64 {
    if s > 0.0 {
        (-1.0 / s).exp()
    } else {
        0.0
    }
}

/// Smooth low-pass profile: 1 for `r <= 3/4`, 0 for `r >= 4/3`.
pub fn low_pass_profile(r: f64) -> f64 {
    if r <= INNER {
        return 1.0;
    }
    if r >= OUTER {
        return 0.0;
    }
    let s = (r - INNER) / (OUTER - INNER);
    let a = g(1.0 - s);
    a / (a + g(s))
}

/// Annular profile of block `j` at `|xi|`.
pub fn block_profile(xi: f64, j: i32) -> f64 {
    low_pass_profile(xi * 2f64.powi(-j - 1)) - low_pass_profile(xi * 2f64.powi(-j))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DyadicConfig {
    /// Lowest block index: `2^{j_min}` does not exceed the fundamental wavenumber `2 pi / L`.
    pub j_min: i32,
    /// Highest block index: `S_{j_max + 1}` is the identity on every grid frequency.
    pub j_max: i32,
}

impl DyadicConfig {
    pub fn for_grid(grid: &Grid) -> Self {
        let j_min = (2.0 * PI / grid.box_len()).log2().floor() as i32;
        let j_max = (grid.max_wavenumber() / INNER).log2().ceil() as i32 - 1;
        Self { j_min, j_max }
    }

    pub fn contains(&self, j: i32) -> bool {
        (self.j_min..=self.j_max).contains(&j)
    }

    pub fn blocks(&self) -> std::ops::RangeInclusive<i32> {
        self.j_min..=self.j_max
    }
}

fn radial_multiplier(spec: &SpectralField, m: impl Fn(f64) -> f64 + Sync) -> SpectralField {
    spec.apply_symbol(|xi, _| {
        let r = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
        Complex64::new(m(r), 0.0)
    })
}

pub(crate) fn block_spectral(spec: &SpectralField, j: i32) -> SpectralField {
    radial_multiplier(spec, |r| block_profile(r, j))
}

pub(crate) fn low_spectral(spec: &SpectralField, j: i32) -> SpectralField {
    radial_multiplier(spec, |r| low_pass_profile(r * 2f64.powi(-j)))
}

/// Block `j` of `f`; the zero field when `j` is outside the resolvable range.
pub fn dyadic_block(f: &ScalarField, j: i32) -> ScalarField {
    if !DyadicConfig::for_grid(f.grid()).contains(j) {
        return ScalarField::zeros(*f.grid());
    }
    from_spectral(&block_spectral(&forward_unchecked(f), j))
}

pub fn low_freq(f: &ScalarField, j: i32) -> ScalarField {
    from_spectral(&low_spectral(&forward_unchecked(f), j))
}

/// `(||block_j f||_inf + ||low_j f||_inf) / (2^{d j / p} ||f||_{p,1})`.
pub fn generalized_young_check(f: &ScalarField, p: f64, j: i32) -> Result<f64> {
    if j < 0 {
        return Err(KslbError::Precondition(format!("block index must be >= 0, got {j}")));
    }
    let grid = f.grid();
    let denom_norm = uloc_norm(f, UlocNormParams::new(grid, p, 1.0))?;
    if denom_norm == 0.0 {
        return Ok(0.0);
    }
    let spec = forward_unchecked(f);
    let blk = if DyadicConfig::for_grid(grid).contains(j) {
        from_spectral(&block_spectral(&spec, j)).max_abs()
    } else {
        0.0
    };
    let low = from_spectral(&low_spectral(&spec, j)).max_abs();
    let scale = 2f64.powf(grid.dim() as f64 * j as f64 / p);
    Ok((blk + low) / (scale * denom_norm))
}

/// `(||bump * f||_inf, ||f||_{1,1})` for the fixed bump `exp(1/3 + 1/(|x|^2 - 1))`
/// supported in the unit ball, whose sup is `e^{1/3}`.
pub fn bump_convolution_check(f: &ScalarField) -> Result<(f64, f64)> {
    let grid = f.grid();
    let unit = uloc_norm(f, UlocNormParams::new(grid, 1.0, 1.0))?;
    let zero = grid.position(0);
    let kernel: Vec<f64> = (0..grid.len())
        .map(|i| {
            let r = grid.wrapped_distance(&grid.position(i), &zero);
            phi_profile(r * r, 0.5)
        })
        .collect();
    let kf = ScalarField::new(*grid, kernel)?;
    let kh = forward_unchecked(&kf);
    let fh = forward_unchecked(f);
    let coeffs = kh
        .coeffs()
        .iter()
        .zip(fh.coeffs())
        .map(|(a, b)| a * b * grid.cell_volume())
        .collect();
    let conv = from_spectral(&SpectralField::new(*grid, coeffs)?);
    Ok((conv.max_abs(), unit))
}

/// `||grad block_j f||_inf / (2^j ||block_j f||_inf)`, or 0 for an empty block.
pub fn bernstein_ratio(f: &ScalarField, j: i32) -> f64 {
    let b = dyadic_block(f, j);
    let m = b.max_abs();
    if m == 0.0 {
        return 0.0;
    }
    gradient(&b).max_norm() / (2f64.powi(j) * m)
}
