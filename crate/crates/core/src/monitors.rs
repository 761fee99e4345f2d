//! Functionals and differential inequalities evaluated along trajectories.
//!
//! Residuals are signed: a margin `<= 0` means the inequality holds at that
//! sample. Inequalities whose right-hand side carries an unspecified generic
//! constant are written as `LHS <= A + C * B`; the constant `C` is either
//! fitted on a reference trajectory (calibration) or supplied (assertion).

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;

use crate::dyadic::{block_spectral, low_spectral, DyadicConfig};
use crate::error::{KslbError, Result};
use crate::fields::{
    forward_unchecked, from_spectral, gradient_of, hessian_of, integrate, laplacian, Grid,
    ScalarField, MAX_DIM,
};
use crate::norms::{BallAverager, CutoffSpec, CutoffWeights, UlocNormParams};
use crate::solver::{Monitor, Params, State, StepInfo, TraceSample};

/// Largest sample spacing accepted for finite-difference time derivatives.
pub const MAX_SAMPLE_SPACING: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct MomentConfig {
    /// Top exponent `k >= 3`.
    pub k: usize,
    /// Cutoff radius `R >= 1`.
    pub radius: f64,
    /// Flat grid indices of the cutoff centers.
    pub centers: Vec<usize>,
    /// Scale `C0` of the weights `b_j`; `None` takes the assembled value.
    pub c0: Option<f64>,
}

impl MomentConfig {
    pub fn validate(&self, grid: &Grid) -> Result<()> {
        if self.k < 3 {
            return Err(KslbError::InvalidArgument(format!("k must be >= 3, got {}", self.k)));
        }
        if !(self.radius >= 1.0) {
            return Err(KslbError::InvalidArgument(format!(
                "cutoff radius must be >= 1, got {}",
                self.radius
            )));
        }
        if self.centers.is_empty() {
            return Err(KslbError::InvalidArgument("at least one center is needed".into()));
        }
        for &c in &self.centers {
            CutoffSpec { center: c, radius: self.radius }.validate(grid)?;
        }
        if let Some(c0) = self.c0 {
            if !(c0 > 0.0) {
                return Err(KslbError::InvalidArgument(format!("C0 must be > 0, got {c0}")));
            }
        }
        Ok(())
    }
}

/// The global maximum of `n` followed by eight points spread along the main diagonal.
pub fn default_centers(n: &ScalarField) -> Vec<usize> {
    let grid = n.grid();
    let m = grid.n_axis();
    let mut out = vec![n.argmax()];
    for s in 0..8 {
        let mut idx = [0; MAX_DIM];
        for (a, v) in idx.iter_mut().enumerate().take(grid.dim()) {
            *v = (s * m / 8 + a * m / 4) % m;
        }
        let flat = grid.flat_index(&idx);
        if !out.contains(&flat) {
            out.push(flat);
        }
    }
    out
}

/// Pointwise building blocks shared by the moment integrals.
struct Pointwise {
    n: Vec<f64>,
    /// `|∇c|²`
    gsq: Vec<f64>,
    /// `|∇n|²`
    gnsq: Vec<f64>,
    /// `|D²c|²`
    hsq: Vec<f64>,
    /// `|∇|∇c|²|²`
    ggsq: Vec<f64>,
}

fn pointwise(state: &State) -> Pointwise {
    let grid = state.grid();
    let d = grid.dim();
    let ch = forward_unchecked(&state.c);
    let gc = gradient_of(&ch);
    let hc = hessian_of(&ch);
    let gn = gradient_of(&forward_unchecked(&state.n));
    let len = grid.len();
    let mut gsq = vec![0.0; len];
    let mut gnsq = vec![0.0; len];
    let mut hsq = vec![0.0; len];
    let mut ggsq = vec![0.0; len];
    for i in 0..len {
        let mut s = 0.0;
        let mut sn = 0.0;
        let mut sh = 0.0;
        let mut sg = 0.0;
        for a in 0..d {
            let ga = gc.component(a).values()[i];
            s += ga * ga;
            let na = gn.component(a).values()[i];
            sn += na * na;
            let mut dgsq = 0.0;
            for b in 0..d {
                let h = hc[a][b].values()[i];
                sh += h * h;
                dgsq += 2.0 * h * gc.component(b).values()[i];
            }
            sg += dgsq * dgsq;
        }
        gsq[i] = s;
        gnsq[i] = sn;
        hsq[i] = sh;
        ggsq[i] = sg;
    }
    Pointwise {
        n: state.n.values().to_vec(),
        gsq,
        gnsq,
        hsq,
        ggsq,
    }
}

/// All cutoff-weighted integrals entering the moment inequalities at one center.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentSnapshot {
    pub center: usize,
    /// `[j] = ∫ nʲ |∇c|^{2k−2j} φ`, `j = 0..=k`.
    pub moments: Vec<f64>,
    /// `[j] = ∫ n^{j−2} |∇n|² |∇c|^{2k−2j} φ`, `j = 2..=k` (entries 0, 1 unused).
    pub grad_n_diag: Vec<f64>,
    /// `[j] = ∫ n^{j−1} |∇n|² |∇c|^{2k−2j−2} φ`, `j = 1..=k−1` (entry 0 unused).
    pub grad_n_cross: Vec<f64>,
    /// `[j] = ∫ n^{j+1} |∇c|^{2k−2j} φ`, `j = 1..=k` (entry 0 unused).
    pub higher: Vec<f64>,
    /// `∫ |∇|∇c|²|² |∇c|^{2k−4} φ`
    pub grad_gradsq: f64,
    /// `∫ |D²c|² |∇c|^{2k−2} φ`
    pub hess_grad: f64,
    /// `∫ |∇|∇c|²|² |∇c|^{2k−6} n φ`
    pub grad_gradsq_n: f64,
    /// `∫ |D²c|² |∇c|^{2k−4} n φ`
    pub hess_grad_n: f64,
    /// `∫ |∇c|^{2k−2} φ`
    pub grad_pow: f64,
}

fn snapshot(grid: &Grid, w: &CutoffWeights, p: &Pointwise, k: usize) -> MomentSnapshot {
    let k_i = k as i32;
    let mut s = MomentSnapshot {
        center: w.spec.center,
        moments: vec![0.0; k + 1],
        grad_n_diag: vec![0.0; k + 1],
        grad_n_cross: vec![0.0; k + 1],
        higher: vec![0.0; k + 1],
        grad_gradsq: 0.0,
        hess_grad: 0.0,
        grad_gradsq_n: 0.0,
        hess_grad_n: 0.0,
        grad_pow: 0.0,
    };
    for (&i, &phi) in w.indices.iter().zip(&w.phi) {
        let n = p.n[i];
        let g = p.gsq[i];
        let gn = p.gnsq[i];
        // |∇c|^{2m} = g^m for m >= 0.
        let gp = |m: i32| if m <= 0 { 1.0 } else { g.powi(m) };
        for j in 0..=k_i {
            let ju = j as usize;
            s.moments[ju] += n.powi(j) * gp(k_i - j) * phi;
            if j >= 2 {
                s.grad_n_diag[ju] += n.powi(j - 2) * gn * gp(k_i - j) * phi;
            }
            if (1..k_i).contains(&j) {
                s.grad_n_cross[ju] += n.powi(j - 1) * gn * gp(k_i - j - 1) * phi;
            }
            if j >= 1 {
                s.higher[ju] += n.powi(j + 1) * gp(k_i - j) * phi;
            }
        }
        s.grad_gradsq += p.ggsq[i] * gp(k_i - 2) * phi;
        s.hess_grad += p.hsq[i] * gp(k_i - 1) * phi;
        s.grad_gradsq_n += p.ggsq[i] * gp(k_i - 3) * n * phi;
        s.hess_grad_n += p.hsq[i] * gp(k_i - 2) * n * phi;
        s.grad_pow += gp(k_i - 1) * phi;
    }
    let dv = grid.cell_volume();
    for v in s
        .moments
        .iter_mut()
        .chain(s.grad_n_diag.iter_mut())
        .chain(s.grad_n_cross.iter_mut())
        .chain(s.higher.iter_mut())
    {
        *v *= dv;
    }
    s.grad_gradsq *= dv;
    s.hess_grad *= dv;
    s.grad_gradsq_n *= dv;
    s.hess_grad_n *= dv;
    s.grad_pow *= dv;
    s
}

/// `∫ nʲ |∇c|^{2k−2j} φ` for the cutoff `spec`.
pub fn moment(state: &State, j: usize, k: usize, spec: CutoffSpec) -> Result<f64> {
    if j > k {
        return Err(KslbError::InvalidArgument(format!("need 0 <= j <= k, got j={j}, k={k}")));
    }
    let w = CutoffWeights::new(state.grid(), spec)?;
    let gsq = gradient_of(&forward_unchecked(&state.c)).norm_sq();
    let n = state.n.values();
    let g = gsq.values();
    Ok(w.integrate_with(state.grid(), |i| {
        n[i].powi(j as i32) * g[i].powi((k - j) as i32)
    }))
}

/// Weights `b_j = k^{2−5k} (k−1) k^{2j} / (16 τ C0)` for `j = 1..=k`; entry 0 is 1,
/// the weight of the pure gradient moment in `y`.
pub fn b_coefficients(k: usize, tau: f64, c0: f64) -> Vec<f64> {
    let kf = k as f64;
    let base = kf.powf(2.0 - 5.0 * kf) * (kf - 1.0) / (16.0 * tau * c0);
    let mut b = vec![1.0];
    for j in 1..=k {
        b.push(base * kf.powi(2 * j as i32));
    }
    b
}

/// `y = ∫|∇c|^{2k}φ + Σ_j b_j ∫ nʲ |∇c|^{2k−2j} φ` from precomputed moments.
pub fn combined_y_from(moments: &[f64], b: &[f64]) -> f64 {
    moments[0] + (1..moments.len()).map(|j| b[j] * moments[j]).sum::<f64>()
}

/// `max` over the configured centers of `y`.
pub fn combined_y(state: &State, config: &MomentConfig, params: &Params) -> Result<f64> {
    config.validate(state.grid())?;
    let c0 = match config.c0 {
        Some(c0) => c0,
        None => mu_zero_estimate(config.k, state.grid().dim(), params)?.c0,
    };
    let b = b_coefficients(config.k, params.tau, c0);
    let mut best = f64::NEG_INFINITY;
    for &center in &config.centers {
        let spec = CutoffSpec { center, radius: config.radius };
        let mut m = Vec::with_capacity(config.k + 1);
        for j in 0..=config.k {
            m.push(moment(state, j, config.k, spec)?);
        }
        best = best.max(combined_y_from(&m, &b));
    }
    Ok(best)
}

/// The explicit constants behind the damping threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct MuZeroReport {
    pub k: usize,
    pub d: usize,
    /// `[j] = C_j` for `j = 1..=k` (entry 0 unused).
    pub c: Vec<f64>,
    pub c0: f64,
    /// Output of [`b_coefficients`] with the assembled `C0`.
    pub b: Vec<f64>,
    pub mu0: f64,
}

impl MuZeroReport {
    /// `Σ_{j<k} b_j C_j` and its bound `k(k−1)/(8τ)`.
    pub fn weighted_sum(&self) -> f64 {
        (1..self.k).map(|j| self.b[j] * self.c[j]).sum()
    }

    /// Left-hand sides of the sign conditions, each required to be negative
    /// (or non-positive for the per-index damping conditions).
    pub fn conditions(&self, tau: f64) -> Vec<(String, f64)> {
        let k = self.k as f64;
        let d = self.d as f64;
        let b = &self.b;
        let s = self.weighted_sum();
        let mut out = vec![
            ("weighted_sum_bound".to_string(), s - k * (k - 1.0) / (8.0 * tau)),
            (
                "gradient_dissipation".to_string(),
                -k * (k - 1.0) / (4.0 * tau) + s + k * (k - 1.0) / (16.0 * tau),
            ),
        ];
        let mut diag = b[self.k] / 8.0;
        for j in 2..=self.k {
            diag += b[j - 1] - (j * (j - 1)) as f64 * b[j] / 4.0;
        }
        out.push(("density_dissipation".to_string(), diag));
        for j in 2..=self.k {
            out.push((format!("damping_j{j}"), self.c[j] - self.mu0 * j as f64));
        }
        let tail: f64 = (2..self.k).map(|j| b[j] * self.c[j]).sum();
        out.push((
            "cross_term".to_string(),
            (d + 1.0) * k / tau + (self.c[1] - self.mu0) * b[1] + tail + k * b[self.k],
        ));
        out.push((
            "cross_term_bound".to_string(),
            (d + 1.0) * k / tau + k * (k - 1.0) / (8.0 * tau) + 1.0 / (16.0 * tau * self.c0)
                - self.mu0 * b[1],
        ));
        out
    }
}

/// Assembles `C_1..C_k`, `C0`, the weights `b_j` and the smallest damping `μ0`
/// meeting every sign condition of the combined moment inequality.
pub fn mu_zero_estimate(k: usize, d: usize, params: &Params) -> Result<MuZeroReport> {
    if k < 3 {
        return Err(KslbError::InvalidArgument(format!("k must be >= 3, got {k}")));
    }
    params.validate()?;
    let (chi, tau, lambda) = (params.chi, params.tau, params.lambda);
    let kf = k as f64;
    let mut c = vec![0.0; k + 1];
    c[1] = ((kf - 1.0).powi(2) * (1.0 + 2.0 * tau * tau) / (2.0 * tau * tau)).max(
        (lambda + lambda * lambda * (1.0 + tau * tau)) / 2.0 + (2.0 * kf - 2.0).powi(2) / (tau * tau),
    );
    for j in 2..k {
        let jf = j as f64;
        let kj = kf - jf;
        let first = chi * chi * jf * (8.0 * tau * jf * kj + jf / 2.0) + 4.0 * kj * kj / (tau * tau) + lambda * jf;
        let second = kj.powf(jf + 1.0)
            * (2f64.powf(2.0 * jf - 3.0) * jf.powf(2.0 * jf) / tau.powf(jf + 1.0)
                + (32.0 * tau * jf * jf).powf(jf) / (16.0 * tau));
        c[j] = first.max(second);
    }
    c[k] = lambda
        + chi.powf((kf + 1.0) / kf)
        + chi.powf(2.0 * (kf - 1.0) / (kf - 2.0)) * (kf - 1.0).powf((kf - 1.0) / (kf - 2.0));
    let scale = kf.powf(3.0 * kf + 1.0);
    let c0 = c[1..].iter().cloned().fold(0.0, f64::max) / scale;
    let b = b_coefficients(k, tau, c0);
    let mut mu0 = c0 * scale;
    for j in 2..=k {
        mu0 = mu0.max(c[j] / j as f64);
    }
    let need = ((d as f64 + 1.0) * kf / tau + kf * (kf - 1.0) / (8.0 * tau) + 1.0 / (16.0 * tau * c0)) / b[1];
    mu0 = mu0.max(need * (1.0 + 1e-9));
    Ok(MuZeroReport { k, d, c, c0, b, mu0 })
}

/// Pointwise `z = (τ/2)|∇c|² + n/χ`.
pub fn z_field(state: &State, params: &Params) -> Result<ScalarField> {
    if !(params.chi > 0.0) {
        return Err(KslbError::Precondition("z needs chi > 0".into()));
    }
    let gsq = gradient_of(&forward_unchecked(&state.c)).norm_sq();
    gsq.zip_map(&state.n, |g, n| 0.5 * params.tau * g + n / params.chi)
}

/// `(λ+1)² / (4μχ − dχ²)`.
pub fn z_bound(params: &Params, d: usize) -> f64 {
    (params.lambda + 1.0).powi(2) / (4.0 * params.mu * params.chi - d as f64 * params.chi.powi(2))
}

fn check_z_regime(params: &Params, d: usize) -> Result<()> {
    if (params.tau - 1.0).abs() > 1e-12 {
        return Err(KslbError::Precondition(format!(
            "z inequality needs tau = 1, got {}",
            params.tau
        )));
    }
    if !(params.chi > 0.0) || !(params.mu > d as f64 * params.chi / 4.0) {
        return Err(KslbError::Precondition(format!(
            "z inequality needs mu > d chi / 4 (mu = {}, chi = {}, d = {d})",
            params.mu, params.chi
        )));
    }
    Ok(())
}

/// Residual `(z⁺ − z⁻)/dt − Δz̄ + z̄ − (λ+1)²/(4μχ − dχ²)` with `z̄` the average of
/// the two states; returns the field and its maximum.
pub fn z_residual(prev: &State, next: &State, params: &Params) -> Result<(ScalarField, f64)> {
    let d = prev.grid().dim();
    check_z_regime(params, d)?;
    let dt = next.t - prev.t;
    if !(dt > 0.0) {
        return Err(KslbError::InvalidArgument(format!("states must advance in time, dt = {dt}")));
    }
    let zp = z_field(prev, params)?;
    let zn = z_field(next, params)?;
    let mid = zp.zip_map(&zn, |a, b| 0.5 * (a + b))?;
    let lap = laplacian(&mid);
    let k = z_bound(params, d);
    let vals: Vec<f64> = (0..mid.values().len())
        .map(|i| (zn.values()[i] - zp.values()[i]) / dt - lap.values()[i] + mid.values()[i] - k)
        .collect();
    let r = ScalarField::new(*prev.grid(), vals)?;
    let m = r.max();
    Ok((r, m))
}

/// Signed margins of one inequality along the trace.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualReport {
    pub name: String,
    pub times: Vec<f64>,
    pub margins: Vec<f64>,
    pub calibration: Option<f64>,
}

impl ResidualReport {
    pub fn max_margin(&self) -> f64 {
        self.margins.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn holds(&self) -> bool {
        self.margins.iter().all(|&m| m <= 0.0)
    }
}

fn trapezoid_running(times: &[f64], values: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; times.len()];
    for i in 1..times.len() {
        out[i] = out[i - 1] + 0.5 * (times[i] - times[i - 1]) * (values[i] + values[i - 1]);
    }
    out
}

/// Energy inequalities for `‖n‖_1`, `‖c‖_2` and `‖∇c‖_2` along a trace. Time
/// integrals use the trapezoid rule over the samples. Margins are
/// `LHS − RHS`, with the RHS also reported relative to its size by callers.
///
/// Returns, in order: the Grönwall form `‖n(t)‖₁ + μ∫‖n‖² ≤ e^{λt}‖n₀‖₁`, the same
/// without the factor `μ`, `τ‖c‖² + ∫‖c‖²_{H¹} ≤ τ‖c₀‖² + e^{λt}‖n₀‖₁` and
/// `τ‖∇c‖² + ∫(‖∇c‖² + ‖D²c‖²) ≤ τ‖∇c₀‖² + e^{λt}‖n₀‖₁`.
pub fn prop22_check(trace: &[TraceSample], params: &Params) -> Vec<ResidualReport> {
    let times: Vec<f64> = trace.iter().map(|s| s.t).collect();
    let t0 = times.first().copied().unwrap_or(0.0);
    let n2: Vec<f64> = trace.iter().map(|s| s.l2sq_n).collect();
    let h1: Vec<f64> = trace.iter().map(|s| s.l2sq_c + s.l2sq_gradc).collect();
    let h2: Vec<f64> = trace.iter().map(|s| s.l2sq_gradc + s.l2sq_hess_c).collect();
    let in2 = trapezoid_running(&times, &n2);
    let ih1 = trapezoid_running(&times, &h1);
    let ih2 = trapezoid_running(&times, &h2);
    let first = trace.first();
    let l1_0 = first.map_or(0.0, |s| s.l1_n);
    let c0 = first.map_or(0.0, |s| s.l2sq_c);
    let g0 = first.map_or(0.0, |s| s.l2sq_gradc);
    let tau = params.tau;
    let grow = |t: f64| (params.lambda * (t - t0)).exp() * l1_0;
    let mk = |name: &str, f: &dyn Fn(usize) -> f64| ResidualReport {
        name: name.to_string(),
        times: times.clone(),
        margins: (0..trace.len()).map(f).collect(),
        calibration: None,
    };
    vec![
        mk("l1_gronwall", &|i| trace[i].l1_n + params.mu * in2[i] - grow(times[i])),
        mk("l1_printed", &|i| trace[i].l1_n + in2[i] - grow(times[i])),
        mk("c_l2", &|i| tau * trace[i].l2sq_c + ih1[i] - tau * c0 - grow(times[i])),
        mk("gradc_l2", &|i| tau * trace[i].l2sq_gradc + ih2[i] - tau * g0 - grow(times[i])),
    ]
}

/// Right-hand side scale of each [`prop22_check`] report at sample `i`, for relative tolerances.
pub fn prop22_scale(trace: &[TraceSample], params: &Params, i: usize) -> [f64; 4] {
    let t0 = trace[0].t;
    let grow = (params.lambda * (trace[i].t - t0)).exp() * trace[0].l1_n;
    [
        grow,
        grow,
        params.tau * trace[0].l2sq_c + grow,
        params.tau * trace[0].l2sq_gradc + grow,
    ]
}

/// `‖n‖_{1,R} + (χτ/4) ‖∇c‖²_{2,R}`.
pub fn uloc_combined(state: &State, params: &Params, radius: f64) -> Result<f64> {
    let grid = state.grid();
    UlocNormParams::new(grid, 1.0, radius).validate(grid)?;
    let stride = UlocNormParams::new(grid, 1.0, radius).center_stride;
    let balls = BallAverager::new(grid, radius);
    let n1 = balls.uloc_norm(state.n.values(), 1.0, stride);
    let gsq = gradient_of(&forward_unchecked(&state.c)).norm_sq();
    let g2 = balls.sup_ball_integral(gsq.values(), stride);
    Ok(n1 + params.chi * params.tau / 4.0 * g2)
}

/// Everything recorded per sample by [`FunctionalMonitor`].
#[derive(Clone, Debug, PartialEq)]
pub struct FunctionalSample {
    pub base: TraceSample,
    /// `‖n‖_{L¹_uloc}` over unit balls.
    pub l1_uloc_n: f64,
    /// `‖∇c‖_{L²_uloc}` over unit balls.
    pub l2_uloc_gradc: f64,
    /// Largest `y` over the centers.
    pub y: f64,
    /// `max z`, or 0 when `χ = 0` leaves `z` undefined.
    pub z_max: f64,
    /// `‖n‖^k_{k,R}`
    pub n_uloc_k: f64,
    /// `‖∇c‖^{2k}_{2k,R}`
    pub gradc_uloc_2k: f64,
    pub snapshots: Vec<MomentSnapshot>,
}

/// Records the moment functionals and uniformly local norms at every sample.
pub struct FunctionalMonitor {
    params: Params,
    k: usize,
    radius: f64,
    b: Vec<f64>,
    weights: Vec<CutoffWeights>,
    unit_balls: BallAverager,
    unit_stride: usize,
    r_balls: BallAverager,
    r_stride: usize,
    pub samples: Vec<FunctionalSample>,
}

impl FunctionalMonitor {
    pub fn new(grid: &Grid, params: &Params, config: &MomentConfig) -> Result<Self> {
        config.validate(grid)?;
        let c0 = match config.c0 {
            Some(c0) => c0,
            None => mu_zero_estimate(config.k, grid.dim(), params)?.c0,
        };
        let unit = UlocNormParams::new(grid, 1.0, 1.0);
        unit.validate(grid)?;
        let rp = UlocNormParams::new(grid, 1.0, config.radius);
        rp.validate(grid)?;
        let weights = config
            .centers
            .iter()
            .map(|&center| CutoffWeights::new(grid, CutoffSpec { center, radius: config.radius }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            params: *params,
            k: config.k,
            radius: config.radius,
            b: b_coefficients(config.k, params.tau, c0),
            weights,
            unit_balls: BallAverager::new(grid, 1.0),
            unit_stride: unit.center_stride,
            r_balls: BallAverager::new(grid, config.radius),
            r_stride: rp.center_stride,
            samples: Vec::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn evaluate(&self, state: &State, base: &TraceSample) -> FunctionalSample {
        let grid = state.grid();
        let p = pointwise(state);
        let k = self.k;
        let snapshots: Vec<MomentSnapshot> = self
            .weights
            .par_iter()
            .map(|w| snapshot(grid, w, &p, k))
            .collect();
        let y = snapshots
            .iter()
            .map(|s| combined_y_from(&s.moments, &self.b))
            .fold(f64::NEG_INFINITY, f64::max);
        let l1_uloc_n = self.unit_balls.uloc_norm(&p.n, 1.0, self.unit_stride);
        let l2_uloc_gradc = self
            .unit_balls
            .sup_ball_integral(&p.gsq, self.unit_stride)
            .sqrt();
        let nk: Vec<f64> = p.n.iter().map(|v| v.abs().powi(k as i32)).collect();
        let gk: Vec<f64> = p.gsq.iter().map(|v| v.powi(k as i32)).collect();
        let z_max = if self.params.chi > 0.0 {
            p.n.iter()
                .zip(&p.gsq)
                .map(|(n, g)| 0.5 * self.params.tau * g + n / self.params.chi)
                .fold(f64::NEG_INFINITY, f64::max)
        } else {
            0.0
        };
        FunctionalSample {
            base: *base,
            l1_uloc_n,
            l2_uloc_gradc,
            y,
            z_max,
            n_uloc_k: self.r_balls.sup_ball_integral(&nk, self.r_stride),
            gradc_uloc_2k: self.r_balls.sup_ball_integral(&gk, self.r_stride),
            snapshots,
        }
    }
}

impl Monitor for FunctionalMonitor {
    fn on_sample(&mut self, state: &State, sample: &TraceSample) {
        let s = self.evaluate(state, sample);
        self.samples.push(s);
    }
}

/// Whether the moment inequalities fit their constants or use given ones.
#[derive(Clone, Debug, PartialEq)]
pub enum CalibrationMode {
    Calibrate,
    Assert(BTreeMap<String, f64>),
}

/// One inequality at one sample, split as `LHS <= A + C * B`.
struct Split {
    lhs: f64,
    a: f64,
    b: f64,
}

/// Finite-difference residuals of the localized moment inequalities, one report
/// per inequality and center. Time derivatives are centered differences; the
/// remaining integrals are taken at the central sample.
pub fn dyadic_ode_residuals(
    samples: &[FunctionalSample],
    k: usize,
    radius: f64,
    d: usize,
    params: &Params,
    mode: &CalibrationMode,
) -> Result<Vec<ResidualReport>> {
    if k < 3 {
        return Err(KslbError::InvalidArgument(format!("k must be >= 3, got {k}")));
    }
    if samples.len() < 3 {
        return Err(KslbError::Precondition(
            "at least three samples are needed for centered differences".into(),
        ));
    }
    for w in samples.windows(2) {
        let h = w[1].base.t - w[0].base.t;
        if h > MAX_SAMPLE_SPACING * (1.0 + 1e-9) {
            return Err(KslbError::Precondition(format!(
                "sample spacing {h} at t = {} exceeds {MAX_SAMPLE_SPACING}; sample more densely",
                w[0].base.t
            )));
        }
    }
    let report = mu_zero_estimate(k, d, params)?;
    let cj = &report.c;
    let (tau, lambda, mu) = (params.tau, params.lambda, params.mu);
    let kf = k as f64;
    let r2 = radius * radius;
    let three_d = 3f64.powi(d as i32);
    let rd = radius.powi(d as i32);

    let mut names: Vec<String> = vec!["density_moment".into(), "gradient_moment".into(), "mixed_moment_1".into()];
    for j in 2..k {
        names.push(format!("mixed_moment_{j}"));
    }
    let centers = samples[0].snapshots.len();
    let mut out = Vec::new();
    for name in &names {
        for ci in 0..centers {
            let mut times = Vec::new();
            let mut splits = Vec::new();
            for i in 1..samples.len() - 1 {
                let (prev, cur, next) = (&samples[i - 1], &samples[i], &samples[i + 1]);
                let dt = next.base.t - prev.base.t;
                let s = &cur.snapshots[ci];
                let ddt = |j: usize| (next.snapshots[ci].moments[j] - prev.snapshots[ci].moments[j]) / dt;
                let nk = cur.n_uloc_k;
                let gk = cur.gradc_uloc_2k;
                let e = s.higher[1];
                let split = match name.as_str() {
                    "density_moment" => Split {
                        lhs: ddt(k) + kf * (kf - 1.0) / 4.0 * s.grad_n_diag[k],
                        a: kf * e + (cj[k] - mu * kf) * s.higher[k],
                        b: three_d * kf / (2.0 * (kf - 1.0) * r2) * nk
                            + three_d * kf / radius.powi(2 * k as i32) * gk
                            + (lambda + 1.0) * rd * kf,
                    },
                    "gradient_moment" => Split {
                        lhs: ddt(0)
                            + kf * (kf - 1.0) / (4.0 * tau) * s.grad_gradsq
                            + kf / tau * s.hess_grad
                            + 2.0 * kf / tau * s.moments[0],
                        a: (d as f64 + 1.0 + 2.0 * (kf - 1.0)) * kf / tau * e,
                        b: three_d * kf / (tau * r2) * gk,
                    },
                    "mixed_moment_1" => Split {
                        lhs: ddt(1)
                            + (kf - 1.0) * (kf - 2.0) / (2.0 * tau) * s.grad_gradsq_n
                            + (2.0 * kf - 2.0) / tau * s.hess_grad_n,
                        a: cj[1] * s.grad_gradsq
                            + lambda / 2.0 * s.grad_pow
                            + (cj[1] - mu) * e
                            + s.grad_n_cross[1],
                        b: three_d * (1.0 + 1.0 / tau) / r2 * gk + three_d / (tau * r2) * nk,
                    },
                    other => {
                        let j: usize = other["mixed_moment_".len()..].parse().expect("own name");
                        let jf = j as f64;
                        Split {
                            lhs: ddt(j) + jf * (jf - 1.0) / 4.0 * s.grad_n_diag[j],
                            a: s.grad_n_cross[j]
                                + cj[j] * s.grad_gradsq
                                + (cj[j] - mu * jf) * s.higher[j]
                                + lambda * jf * s.grad_pow
                                + cj[j] * e
                                + cj[j] / r2 * (nk + gk),
                            b: (lambda + 1.0) * jf * rd,
                        }
                    }
                };
                times.push(cur.base.t);
                splits.push(split);
            }
            let key = format!("{name}@{ci}");
            let c = match mode {
                CalibrationMode::Calibrate => splits
                    .iter()
                    .filter(|s| s.b > 0.0)
                    .map(|s| (s.lhs - s.a) / s.b)
                    .fold(0.0, f64::max),
                CalibrationMode::Assert(map) => *map
                    .get(&key)
                    .or_else(|| map.get(name))
                    .ok_or_else(|| KslbError::Config(format!("no calibration constant for {key}")))?,
            };
            out.push(ResidualReport {
                name: key,
                times,
                margins: splits.iter().map(|s| s.lhs - s.a - c * s.b).collect(),
                calibration: Some(c),
            });
        }
    }
    Ok(out)
}

/// Smallest `C` with `‖u‖² <= C ‖∇u‖² + C^k (∫|u|^{2/k})^k`; 0 for the zero field.
pub fn interpolation_check(u: &ScalarField, k: usize) -> Result<f64> {
    if k < 2 {
        return Err(KslbError::InvalidArgument(format!("k must be >= 2, got {k}")));
    }
    let s = integrate(&u.map(|v| v * v));
    if s == 0.0 {
        return Ok(0.0);
    }
    let a = integrate(&gradient_of(&forward_unchecked(u)).norm_sq());
    let b = integrate(&u.map(|v| v.abs().powf(2.0 / k as f64))).powi(k as i32);
    let f = |c: f64| c * a + c.powi(k as i32) * b - s;
    let mut lo = 0.0;
    let mut hi = 1.0;
    while f(hi) < 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// Running bound of `‖∇c(t)‖∞` by initial data and the uniformly local `L^k` size of `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinfReport {
    pub times: Vec<f64>,
    pub lhs: Vec<f64>,
    /// `‖∇c₀‖_{2,uloc} + ‖c₀‖_{W^{1,∞}} + sup_{s<=t} ‖n(s)‖_{k,uloc}`
    pub rhs: Vec<f64>,
    /// Largest `‖∇c − ∇c^L − ∇c^H‖∞` seen.
    pub split_error: f64,
}

impl LinfReport {
    pub fn ratios(&self) -> Vec<f64> {
        self.lhs
            .iter()
            .zip(&self.rhs)
            .map(|(l, r)| if *r > 0.0 { l / r } else { 0.0 })
            .collect()
    }

    pub fn max_ratio(&self) -> f64 {
        self.ratios().into_iter().fold(0.0, f64::max)
    }
}

/// Collects the `‖∇c‖∞` reconstruction bound at every sample.
pub struct LinfMonitor {
    k: usize,
    balls: BallAverager,
    stride: usize,
    initial_part: Option<f64>,
    sup_n: f64,
    pub report: LinfReport,
}

impl LinfMonitor {
    pub fn new(grid: &Grid, k: usize) -> Result<Self> {
        if k <= grid.dim() {
            return Err(KslbError::Precondition(format!(
                "reconstruction bound needs k > d (k = {k}, d = {})",
                grid.dim()
            )));
        }
        let prm = UlocNormParams::new(grid, k as f64, 1.0);
        prm.validate(grid)?;
        Ok(Self {
            k,
            balls: BallAverager::new(grid, 1.0),
            stride: prm.center_stride,
            initial_part: None,
            sup_n: 0.0,
            report: LinfReport {
                times: Vec::new(),
                lhs: Vec::new(),
                rhs: Vec::new(),
                split_error: 0.0,
            },
        })
    }
}

/// `‖∇c − Ṡ₀∇c − Σ_{j>=0} Δ̇_j∇c‖∞` for one field.
pub fn gradient_split_error(c: &ScalarField) -> f64 {
    let grid = c.grid();
    let cfg = DyadicConfig::for_grid(grid);
    let ch = forward_unchecked(c);
    let mut worst = 0.0_f64;
    for a in 0..grid.dim() {
        let ga = ch.derivative(a);
        let full = from_spectral(&ga);
        let mut acc = from_spectral(&low_spectral(&ga, 0));
        for j in 0.max(cfg.j_min)..=cfg.j_max {
            let blk = from_spectral(&block_spectral(&ga, j));
            acc = acc.zip_map(&blk, |x, y| x + y).expect("same grid");
        }
        worst = worst.max(
            full.values()
                .iter()
                .zip(acc.values())
                .fold(0.0, |m, (x, y)| m.max((x - y).abs())),
        );
    }
    worst
}

impl Monitor for LinfMonitor {
    fn on_sample(&mut self, state: &State, sample: &TraceSample) {
        let nk = self.balls.uloc_norm(state.n.values(), self.k as f64, self.stride);
        self.sup_n = self.sup_n.max(nk);
        if self.initial_part.is_none() {
            let gsq = gradient_of(&forward_unchecked(&state.c)).norm_sq();
            let g2 = self.balls.sup_ball_integral(gsq.values(), self.stride).sqrt();
            self.initial_part = Some(g2 + sample.w1inf_c());
        }
        let r = &mut self.report;
        r.times.push(sample.t);
        r.lhs.push(sample.linf_gradc);
        r.rhs.push(self.initial_part.unwrap_or(0.0) + self.sup_n);
        r.split_error = r.split_error.max(gradient_split_error(&state.c));
    }
}

/// Per-step mass bookkeeping: largest `|Δ∫n − reaction| / ‖n‖₁`.
#[derive(Clone, Debug, Default)]
pub struct MassLedger {
    pub worst_relative: f64,
    pub worst_absolute: f64,
    pub steps: usize,
}

impl Monitor for MassLedger {
    fn on_step(&mut self, _prev: &State, _next: &State, info: &StepInfo) {
        let defect = info.mass_defect();
        self.worst_absolute = self.worst_absolute.max(defect);
        if info.l1_before > 0.0 {
            self.worst_relative = self.worst_relative.max(defect / info.l1_before);
        } else if defect > 0.0 {
            self.worst_relative = f64::INFINITY;
        }
        self.steps += 1;
    }
}

/// Step-by-step `z` residuals and sample-wise `sup z`.
#[derive(Clone, Debug)]
pub struct ZMonitor {
    params: Params,
    pub max_residual: f64,
    pub sup_z: f64,
    pub initial_sup_z: Option<f64>,
    pub error: Option<String>,
}

impl ZMonitor {
    pub fn new(params: &Params, d: usize) -> Result<Self> {
        check_z_regime(params, d)?;
        Ok(Self {
            params: *params,
            max_residual: f64::NEG_INFINITY,
            sup_z: f64::NEG_INFINITY,
            initial_sup_z: None,
            error: None,
        })
    }
}

impl Monitor for ZMonitor {
    fn on_sample(&mut self, state: &State, _sample: &TraceSample) {
        match z_field(state, &self.params) {
            Ok(z) => {
                let m = z.max();
                self.initial_sup_z.get_or_insert(m);
                self.sup_z = self.sup_z.max(m);
            }
            Err(e) => self.error = Some(e.to_string()),
        }
    }

    fn on_step(&mut self, prev: &State, next: &State, _info: &StepInfo) {
        match z_residual(prev, next, &self.params) {
            Ok((_, m)) => self.max_residual = self.max_residual.max(m),
            Err(e) => self.error = Some(e.to_string()),
        }
    }
}

/// Least-squares slope of `ln(values)` against time over samples with `t >= from`.
pub fn log_trend_slope(times: &[f64], values: &[f64], from: f64) -> f64 {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(t, v)| **t >= from && **v > 0.0)
        .map(|(t, v)| (*t, v.ln()))
        .collect();
    if pts.len() < 2 {
        return 0.0;
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub const TRACE_HEADER: &str = "t,mass,l1_uloc_n,l2_uloc_gradc,linf_n,w1inf_c,y,z_max,min_n,min_c";

pub fn write_trace_csv(samples: &[FunctionalSample], mut w: impl Write) -> Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for s in samples {
        let b = &s.base;
        let row = [
            b.t,
            b.mass,
            s.l1_uloc_n,
            s.l2_uloc_gradc,
            b.linf_n,
            b.w1inf_c(),
            s.y,
            s.z_max,
            b.min_n,
            b.min_c,
        ];
        let cells: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

pub const RESIDUAL_HEADER: &str = "t,name,margin,calibration";

pub fn write_residuals_csv(reports: &[ResidualReport], mut w: impl Write) -> Result<()> {
    writeln!(w, "{RESIDUAL_HEADER}")?;
    for r in reports {
        let cal = r.calibration.map(fmt_f64).unwrap_or_default();
        for (t, m) in r.times.iter().zip(&r.margins) {
            writeln!(w, "{},{},{},{}", fmt_f64(*t), r.name, fmt_f64(*m), cal)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::fields::{make_grid, gradient};
    use crate::norms::cutoff_phi;
    use crate::solver::{run, RunConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn smooth_random(grid: Grid, seed: u64, kmax: f64) -> ScalarField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = ScalarField::new(grid, (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let spec = forward_unchecked(&raw).apply_symbol(|xi, _| {
            let r2: f64 = xi.iter().map(|v| v * v).sum();
            num_complex::Complex64::new((-r2 / (kmax * kmax)).exp(), 0.0)
        });
        from_spectral(&spec)
    }

    fn bump_state(grid: Grid, amp: f64, width: f64) -> State {
        let n = ScalarField::from_fn(grid, |x| {
            amp * (-(x.iter().map(|v| v * v).sum::<f64>()) / (width * width)).exp()
        });
        State::new(0.0, n.clone(), n.scaled(0.5)).unwrap()
    }

    /// The weights written out for k = 3, τ = 1, C0 = 1: 2·3^{2j−13}/16.
    #[test]
    fn b_coefficients_k3() {
        let b = b_coefficients(3, 1.0, 1.0);
        for j in 1..=3 {
            let want = 2.0 * 3f64.powi(2 * j as i32 - 13) / 16.0;
            assert!((b[j] - want).abs() <= 1e-15 * want);
        }
        for k in [3usize, 4, 5] {
            let b = b_coefficients(k, 0.7, 3.3);
            for j in 2..=k {
                assert!((b[j - 1] / b[j] - (k as f64).powi(-2)).abs() < 1e-12);
            }
        }
    }

    /// Direct transcription of the threshold assembly, for cross-checking.
    fn mu_zero_oracle(k: f64, d: f64, chi: f64, tau: f64, lambda: f64) -> f64 {
        let mut cs = Vec::new();
        let c1a = (k - 1.0) * (k - 1.0) * (1.0 + 2.0 * tau * tau) / (2.0 * tau * tau);
        let c1b = (lambda + lambda * lambda * (1.0 + tau * tau)) / 2.0 + (2.0 * k - 2.0).powi(2) / (tau * tau);
        cs.push(if c1a > c1b { c1a } else { c1b });
        let mut j = 2.0;
        while j < k {
            let a = chi * chi * j * (8.0 * tau * j * (k - j) + j / 2.0)
                + 4.0 * (k - j) * (k - j) / (tau * tau)
                + lambda * j;
            let b = (k - j).powf(j + 1.0)
                * (2f64.powf(2.0 * j - 3.0) * j.powf(2.0 * j) / tau.powf(j + 1.0)
                    + (32.0 * tau * j * j).powf(j) / (16.0 * tau));
            cs.push(if a > b { a } else { b });
            j += 1.0;
        }
        let ck = lambda
            + chi.powf((k + 1.0) / k)
            + chi.powf(2.0 * (k - 1.0) / (k - 2.0)) * (k - 1.0).powf((k - 1.0) / (k - 2.0));
        cs.push(ck);
        let cmax = cs.iter().cloned().fold(0.0, f64::max);
        let c0 = cmax / k.powf(3.0 * k + 1.0);
        let b1 = k.powf(2.0 - 5.0 * k) * (k - 1.0) * k * k / (16.0 * tau * c0);
        let mut m = cmax;
        for (i, c) in cs.iter().enumerate().skip(1) {
            m = m.max(c / (i as f64 + 1.0));
        }
        let need = ((d + 1.0) * k / tau + k * (k - 1.0) / (8.0 * tau) + 1.0 / (16.0 * tau * c0)) / b1;
        m.max(need * (1.0 + 1e-9))
    }

    #[test]
    fn mu_zero_matches_oracle_and_conditions() {
        let p = Params::new(1.0, 1.0, 0.0, 1.0).unwrap();
        let r = mu_zero_estimate(3, 1, &p).unwrap();
        let want = mu_zero_oracle(3.0, 1.0, 1.0, 1.0, 0.0);
        assert!((r.mu0 - want).abs() <= 1e-12 * want, "{} vs {want}", r.mu0);
        // Hand evaluation for k = 3, τ = χ = 1, λ = 0: C_1 = 16, C_2 = max(38, 2·2^4 + 128^2/16) = 1056,
        // C_3 = 1 + 2^{2} = 5.
        assert!((r.c[1] - 16.0).abs() < 1e-12);
        assert!((r.c[2] - 1056.0).abs() < 1e-9);
        assert!((r.c[3] - 5.0).abs() < 1e-12);
        for k in [3usize, 4, 5] {
            for d in 1..=3 {
                for (chi, tau, lambda) in [(1.0, 1.0, 1.0), (0.3, 2.0, 0.0), (2.0, 0.5, 3.0)] {
                    let p = Params::new(chi, tau, lambda, 1.0).unwrap();
                    let r = mu_zero_estimate(k, d, &p).unwrap();
                    let o = mu_zero_oracle(k as f64, d as f64, chi, tau, lambda);
                    assert!((r.mu0 - o).abs() <= 1e-12 * o);
                    for (name, v) in r.conditions(tau) {
                        if name.starts_with("damping_j") {
                            assert!(v <= 0.0, "{name} = {v}");
                        } else {
                            assert!(v < 0.0, "{name} = {v} (k={k}, d={d})");
                        }
                    }
                }
            }
        }
        assert!(mu_zero_estimate(2, 1, &p).is_err());
    }

    #[test]
    fn mu_zero_monotone() {
        let mut last = 0.0;
        for chi in [0.1, 0.5, 1.0, 2.0, 4.0] {
            let r = mu_zero_estimate(4, 3, &Params::new(chi, 1.0, 1.0, 1.0).unwrap()).unwrap();
            assert!(r.mu0 >= last);
            last = r.mu0;
        }
        let mut last = 0.0;
        for lambda in [0.0, 0.5, 1.0, 5.0, 50.0] {
            let r = mu_zero_estimate(4, 3, &Params::new(1.0, 1.0, lambda, 1.0).unwrap()).unwrap();
            assert!(r.mu0 >= last);
            last = r.mu0;
        }
    }

    #[test]
    fn moment_examples() {
        let g = make_grid(2, 64, 16.0).unwrap();
        let spec = CutoffSpec { center: g.origin(), radius: 1.5 };
        let zero_n = State::new(0.0, ScalarField::zeros(g), smooth_random(g, 1, 2.0)).unwrap();
        for j in 1..=3 {
            assert_eq!(moment(&zero_n, j, 3, spec).unwrap(), 0.0);
        }
        let a = 0.7;
        let s = State::new(0.0, ScalarField::constant(g, a), ScalarField::constant(g, 2.0)).unwrap();
        let phi_int = integrate(&cutoff_phi(&g, spec).unwrap());
        let m = moment(&s, 3, 3, spec).unwrap();
        assert!((m - a.powi(3) * phi_int).abs() < 1e-12);
        assert!(moment(&s, 4, 3, spec).is_err());
    }

    #[test]
    fn gradient_moment_converges_under_refinement() {
        // c = sin(2πx/L): ∫|∇c|^{2k}φ evaluated on two resolutions agrees.
        let l = 16.0;
        let k = 3;
        let val = |n: usize| {
            let g = make_grid(1, n, l).unwrap();
            let c = ScalarField::from_fn(g, |x| (2.0 * std::f64::consts::PI * x[0] / l).sin());
            let s = State::new(0.0, ScalarField::zeros(g), c).unwrap();
            let spec = CutoffSpec { center: g.flat_index(&[n / 2 + n / 16]), radius: 1.5 };
            moment(&s, 0, k, spec).unwrap()
        };
        let coarse = val(512);
        let fine = val(4096);
        assert!((coarse - fine).abs() < 1e-8 * fine.abs().max(1e-300), "{coarse} {fine}");
    }

    #[test]
    fn combined_y_zero_state() {
        let g = make_grid(2, 32, 12.0).unwrap();
        let p = Params::new(1.0, 1.0, 1.0, 1.0).unwrap();
        let cfg = MomentConfig {
            k: 3,
            radius: 1.0,
            centers: default_centers(&ScalarField::zeros(g)),
            c0: Some(1.0),
        };
        assert_eq!(combined_y(&State::zeros(g), &cfg, &p).unwrap(), 0.0);
    }

    #[test]
    fn default_centers_cover_max_and_lattice() {
        let g = make_grid(2, 32, 10.0).unwrap();
        let s = bump_state(g, 1.0, 1.0);
        let c = default_centers(&s.n);
        assert_eq!(c[0], g.origin());
        assert_eq!(c.len(), 9);
    }

    #[test]
    fn z_examples() {
        let g = make_grid(2, 32, 10.0).unwrap();
        let p = Params::new(1.0, 1.0, 1.0, 1.0).unwrap();
        let a = State::zeros(g);
        let mut b = State::zeros(g);
        b.t = 0.01;
        let (r, m) = z_residual(&a, &b, &p).unwrap();
        let k = z_bound(&p, 2);
        assert!((k - 2.0).abs() < 1e-15);
        assert!((m + k).abs() < 1e-15);
        assert!(r.values().iter().all(|&v| (v + k).abs() < 1e-15));
        let bad = Params::new(1.0, 2.0, 1.0, 1.0).unwrap();
        assert!(z_residual(&a, &b, &bad).is_err());
        let weak = Params::new(1.0, 1.0, 1.0, 0.5).unwrap();
        assert!(z_residual(&a, &b, &weak).is_err());
    }

    #[test]
    fn prop22_zero_data_and_decay() {
        let g = make_grid(2, 32, 12.0).unwrap();
        let p = Params::new(1.0, 1.0, 0.0, 1.0).unwrap();
        let cfg = RunConfig { dt: 0.01, t_end: 0.3, monitor_every: 0.01, ..RunConfig::default() };
        let r = run(&State::zeros(g), &p, &cfg, &mut []).unwrap();
        for rep in prop22_check(&r.trace, &p) {
            assert!(rep.holds());
        }
        let r = run(&bump_state(g, 2.0, 1.0), &p, &cfg, &mut []).unwrap();
        for w in r.trace.windows(2) {
            assert!(w[1].l1_n <= w[0].l1_n + 1e-12);
        }
    }

    #[test]
    fn uloc_combined_examples() {
        let g = make_grid(1, 128, 16.0).unwrap();
        let p = Params::new(1.0, 1.0, 2.0, 1.0).unwrap();
        assert_eq!(uloc_combined(&State::zeros(g), &p, 1.0).unwrap(), 0.0);
        let eq = p.equilibrium();
        let s = State::new(0.0, ScalarField::constant(g, eq), ScalarField::constant(g, eq)).unwrap();
        let cfg = RunConfig { t_end: 0.2, monitor_every: 0.1, ..RunConfig::default() };
        let out = run(&s, &p, &cfg, &mut []).unwrap();
        let f0 = uloc_combined(&s, &p, 1.0).unwrap();
        let f1 = uloc_combined(&out.final_state, &p, 1.0).unwrap();
        assert!((f0 - f1).abs() < 1e-10);
        assert!((f0 - 2.0 * eq).abs() < 1e-10);
    }

    #[test]
    fn integration_by_parts_identity() {
        // −∫Δn n^{k−1}φ = (k−1)∫|∇n|² n^{k−2}φ + ∫n^{k−1}∇n·∇φ
        let g = make_grid(2, 256, 12.0).unwrap();
        let k = 4;
        let n = smooth_random(g, 3, 1.5).map(|v| 1.0 + v);
        let w = CutoffWeights::new(&g, CutoffSpec { center: g.flat_index(&[60, 70]), radius: 1.3 }).unwrap();
        let lap = laplacian(&n);
        let grad = gradient(&n);
        let gsq = grad.norm_sq();
        let nv = n.values();
        let lhs = -w.integrate_with(&g, |i| lap.values()[i] * nv[i].powi(k - 1));
        let first = (k - 1) as f64 * w.integrate_with(&g, |i| gsq.values()[i] * nv[i].powi(k - 2));
        let mut second = 0.0;
        for (s, &i) in w.indices.iter().enumerate() {
            let dot: f64 = (0..2).map(|a| grad.component(a).values()[i] * w.grad[s][a]).sum();
            second += nv[i].powi(k - 1) * dot;
        }
        second *= g.cell_volume();
        assert!((lhs - first - second).abs() < 1e-8 * (1.0 + lhs.abs()), "{lhs} {first} {second} {}", lhs - first - second);
    }

    #[test]
    fn bochner_identity_pointwise() {
        // ∇Δc·∇c = ½Δ|∇c|² − |D²c|²
        let g = make_grid(2, 64, 8.0).unwrap();
        let c = smooth_random(g, 7, 2.5);
        let gc = gradient(&c);
        let glap = gradient(&laplacian(&c));
        let half_lap = laplacian(&gc.norm_sq()).scaled(0.5);
        let hsq = crate::fields::hessian_sq(&c);
        let scale = half_lap.max_abs().max(1.0);
        for i in 0..g.len() {
            let lhs: f64 = (0..2).map(|a| glap.component(a).values()[i] * gc.component(a).values()[i]).sum();
            let rhs = half_lap.values()[i] - hsq.values()[i];
            assert!((lhs - rhs).abs() < 1e-9 * scale);
        }
    }

    #[test]
    fn moment_residuals_zero_state_and_density_refusal() {
        let g = make_grid(1, 64, 16.0).unwrap();
        let p = Params::new(1.0, 1.0, 1.0, 1.0).unwrap();
        let cfg = MomentConfig { k: 3, radius: 1.0, centers: default_centers(&ScalarField::zeros(g)), c0: None };
        let mut mon = FunctionalMonitor::new(&g, &p, &cfg).unwrap();
        let rc = RunConfig { dt: 0.01, t_end: 0.05, monitor_every: 0.01, ..RunConfig::default() };
        run(&State::zeros(g), &p, &rc, &mut [&mut mon]).unwrap();
        let reps = dyadic_ode_residuals(&mon.samples, 3, 1.0, 1, &p, &CalibrationMode::Calibrate).unwrap();
        assert!(reps.iter().all(|r| r.holds()));
        let frozen: BTreeMap<String, f64> = reps.iter().map(|r| (r.name.clone(), 0.0)).collect();
        let reps = dyadic_ode_residuals(&mon.samples, 3, 1.0, 1, &p, &CalibrationMode::Assert(frozen)).unwrap();
        assert!(reps.iter().all(|r| r.holds()));

        let mut sparse = FunctionalMonitor::new(&g, &p, &cfg).unwrap();
        let rc = RunConfig { monitor_every: 0.02, t_end: 0.1, ..rc };
        run(&State::zeros(g), &p, &rc, &mut [&mut sparse]).unwrap();
        assert!(matches!(
            dyadic_ode_residuals(&sparse.samples, 3, 1.0, 1, &p, &CalibrationMode::Calibrate),
            Err(KslbError::Precondition(_))
        ));
    }

    #[test]
    fn calibrated_residuals_on_bump_run() {
        let g = make_grid(2, 64, 16.0).unwrap();
        let p = Params::new(1.0, 1.0, 1.0, 2.0).unwrap();
        let s = bump_state(g, 1.0, 1.0);
        let cfg = MomentConfig { k: 3, radius: 1.5, centers: default_centers(&s.n), c0: None };
        let mut mon = FunctionalMonitor::new(&g, &p, &cfg).unwrap();
        let rc = RunConfig { dt: 0.005, t_end: 0.1, monitor_every: 0.01, ..RunConfig::default() };
        run(&s, &p, &rc, &mut [&mut mon]).unwrap();
        let reps = dyadic_ode_residuals(&mon.samples, 3, 1.5, 2, &p, &CalibrationMode::Calibrate).unwrap();
        assert_eq!(reps.len(), 4 * cfg.centers.len());
        for r in &reps {
            assert!(r.max_margin() <= 1e-12 * (1.0 + r.calibration.unwrap()), "{}", r.name);
        }
        for s in &mon.samples {
            for snap in &s.snapshots {
                assert!(snap.moments.iter().all(|&m| m >= -1e-12));
            }
        }
    }

    #[test]
    fn interpolation_examples() {
        let g = make_grid(1, 512, 40.0).unwrap();
        assert_eq!(interpolation_check(&ScalarField::zeros(g), 3).unwrap(), 0.0);
        assert!(interpolation_check(&ScalarField::zeros(g), 1).is_err());
        let mut per_k = Vec::new();
        for k in [2usize, 3, 4] {
            let mut worst: f64 = 0.0;
            for w in [0.5, 1.0, 2.0, 4.0] {
                let u = ScalarField::from_fn(g, |x| (-x[0] * x[0] / (w * w)).exp());
                let c = interpolation_check(&u, k).unwrap();
                assert!(c.is_finite() && c > 0.0);
                let a = integrate(&gradient(&u).norm_sq());
                let b = integrate(&u.map(|v| v.abs().powf(2.0 / k as f64))).powi(k as i32);
                let s = integrate(&u.map(|v| v * v));
                assert!(c * a + c.powi(k as i32) * b >= s * (1.0 - 1e-12));
                worst = worst.max(c);
            }
            per_k.push(worst);
        }
        let hi = per_k.iter().cloned().fold(0.0, f64::max);
        let lo = per_k.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(hi / lo <= 4.0, "{per_k:?}");
    }

    #[test]
    fn split_error_and_k_guard() {
        let g = make_grid(2, 64, 10.0).unwrap();
        let c = smooth_random(g, 2, 4.0);
        assert!(gradient_split_error(&c) <= 1e-10);
        assert!(LinfMonitor::new(&g, 2).is_err());
        let mut m = LinfMonitor::new(&g, 3).unwrap();
        let p = Params::new(1.0, 1.0, 1.0, 1.0).unwrap();
        run(&State::zeros(g), &p, &RunConfig { t_end: 0.05, ..RunConfig::default() }, &mut [&mut m]).unwrap();
        assert!(m.report.lhs.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn trend_slope_and_csv() {
        let t: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let v: Vec<f64> = t.iter().map(|x| (0.3 * x).exp()).collect();
        assert!((log_trend_slope(&t, &v, 5.0) - 0.3).abs() < 1e-12);
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(0.1).parse::<f64>().unwrap(), 0.1);
        let rep = ResidualReport {
            name: "x".into(),
            times: vec![0.0, 0.5],
            margins: vec![-1.0, -2.0],
            calibration: Some(0.25),
        };
        let mut buf = Vec::new();
        write_residuals_csv(&[rep], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("t,name,margin,calibration\n"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn weights_are_geometric(k in 3usize..8, tau in 0.05f64..20.0, c0 in 1e-6f64..1e3) {
            let b = b_coefficients(k, tau, c0);
            prop_assert_eq!(b.len(), k + 1);
            for j in 2..=k {
                prop_assert!((b[j - 1] / b[j] - (k as f64).powi(-2)).abs() <= 1e-12);
            }
        }

        #[test]
        fn threshold_meets_every_condition(
            k in 3usize..6,
            d in 1usize..=3,
            chi in 0.1f64..5.0,
            tau in 0.2f64..5.0,
            lambda in 0.0f64..3.0,
        ) {
            let r = mu_zero_estimate(k, d, &Params::new(chi, tau, lambda, 1.0).unwrap()).unwrap();
            prop_assert!(r.mu0.is_finite() && r.mu0 > 0.0);
            for (name, v) in r.conditions(tau) {
                if name.starts_with("damping_j") {
                    prop_assert!(v <= 0.0, "{} = {}", name, v);
                } else {
                    prop_assert!(v < 0.0, "{} = {}", name, v);
                }
            }
        }
    }
}
