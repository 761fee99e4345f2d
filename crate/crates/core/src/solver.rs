//! Time integration of the chemotaxis system
//!
//! ```text
//! n_t = Δn − χ∇·(n∇c) + λn − μn²
//! τ c_t = Δc − c + n
//! ```
//!
//! by second-order exponential time differencing (ETD-RK2), plus an
//! independent Picard iteration of the Duhamel formulation.

use num_complex::Complex64;

use crate::error::{KslbError, Result};
use crate::fields::{
    fft_nd, forward_unchecked, from_spectral, gradient_of,
    hessian_of, hessian_sq_from, integrate, Grid, ScalarField, SpectralField, MAX_DIM,
};
use crate::norms::{cutoff_psi, w1inf_norm};

/// Default tolerance below zero tolerated for the density.
pub const NONNEG_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Params {
    pub chi: f64,
    pub tau: f64,
    pub lambda: f64,
    pub mu: f64,
}

impl Params {
    pub fn new(chi: f64, tau: f64, lambda: f64, mu: f64) -> Result<Self> {
        let p = Self { chi, tau, lambda, mu };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        // chi = 0 is accepted so the decoupled heat/logistic limit stays reachable.
        if !(self.chi >= 0.0 && self.chi.is_finite()) {
            return Err(KslbError::InvalidArgument(format!("chi must be >= 0, got {}", self.chi)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(KslbError::InvalidArgument(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(KslbError::InvalidArgument(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(KslbError::InvalidArgument(format!("mu must be >= 0, got {}", self.mu)));
        }
        Ok(())
    }

    /// Homogeneous equilibrium level `λ/μ` (zero when `μ = 0`).
    pub fn equilibrium(&self) -> f64 {
        if self.mu > 0.0 {
            self.lambda / self.mu
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct State {
    pub t: f64,
    pub n: ScalarField,
    pub c: ScalarField,
}

impl State {
    pub fn new(t: f64, n: ScalarField, c: ScalarField) -> Result<Self> {
        if n.grid() != c.grid() {
            return Err(KslbError::ShapeMismatch("n and c live on different grids".into()));
        }
        Ok(Self { t, n, c })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            t: 0.0,
            n: ScalarField::zeros(grid),
            c: ScalarField::zeros(grid),
        }
    }

    pub fn grid(&self) -> &Grid {
        self.n.grid()
    }

    pub fn is_finite(&self) -> bool {
        self.n.is_finite() && self.c.is_finite()
    }

    /// `||n||_inf + ||c||_{W^{1,inf}}`, the continuation quantity.
    pub fn blowup_quantity(&self) -> f64 {
        self.n.max_abs() + w1inf_norm(&self.c)
    }
}

/// Cheap global functionals recorded at every sampling time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceSample {
    pub t: f64,
    /// `int n`
    pub mass: f64,
    /// `int |n|`
    pub l1_n: f64,
    pub l2sq_n: f64,
    pub l2sq_c: f64,
    pub l2sq_gradc: f64,
    pub l2sq_hess_c: f64,
    pub linf_n: f64,
    pub linf_c: f64,
    pub linf_gradc: f64,
    pub min_n: f64,
    pub min_c: f64,
}

impl TraceSample {
    pub fn of(state: &State) -> Self {
        let n = &state.n;
        let c = &state.c;
        let ch = forward_unchecked(c);
        let grad = gradient_of(&ch);
        let gsq = grad.norm_sq();
        let hsq = hessian_sq_from(&hessian_of(&ch));
        Self {
            t: state.t,
            mass: integrate(n),
            l1_n: integrate(&n.map(f64::abs)),
            l2sq_n: integrate(&n.map(|v| v * v)),
            l2sq_c: integrate(&c.map(|v| v * v)),
            l2sq_gradc: integrate(&gsq),
            l2sq_hess_c: integrate(&hsq),
            linf_n: n.max_abs(),
            linf_c: c.max_abs(),
            linf_gradc: gsq.max().max(0.0).sqrt(),
            min_n: n.min(),
            min_c: c.min(),
        }
    }

    pub fn w1inf_c(&self) -> f64 {
        self.linf_c + self.linf_gradc
    }

    pub fn blowup_quantity(&self) -> f64 {
        self.linf_n + self.w1inf_c()
    }
}

/// Bookkeeping for one accepted step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub t: f64,
    pub dt: f64,
    pub mass_before: f64,
    pub mass_after: f64,
    /// The step's own quadrature of `int_t^{t+dt} int (λn − μn²)`.
    pub reaction_integral: f64,
    /// `int |n|` before the step.
    pub l1_before: f64,
}

impl StepInfo {
    /// `|Δ int n − reaction integral|`; the transport term carries no mass.
    pub fn mass_defect(&self) -> f64 {
        (self.mass_after - self.mass_before - self.reaction_integral).abs()
    }
}

/// Read-only observer of a run.
pub trait Monitor {
    fn on_sample(&mut self, _state: &State, _sample: &TraceSample) {}
    fn on_step(&mut self, _prev: &State, _next: &State, _info: &StepInfo) {}
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunConfig {
    /// Largest step size.
    pub dt: f64,
    pub t_end: f64,
    /// Time between monitor samples.
    pub monitor_every: f64,
    /// Threshold on `||n||_inf + ||c||_{W^{1,inf}}`; `None` means 10³ × its initial value.
    pub blowup_cap: Option<f64>,
    pub dealias: bool,
    /// Shrink the step below `dt` according to the nonlinear stability heuristic.
    pub adaptive: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            t_end: 1.0,
            monitor_every: 0.01,
            blowup_cap: None,
            dealias: true,
            adaptive: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(KslbError::InvalidArgument(format!("dt must be > 0, got {}", self.dt)));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(KslbError::InvalidArgument(format!(
                "t_end must be >= 0, got {}",
                self.t_end
            )));
        }
        if !(self.monitor_every > 0.0 && self.monitor_every.is_finite()) {
            return Err(KslbError::InvalidArgument(format!(
                "monitor interval must be > 0, got {}",
                self.monitor_every
            )));
        }
        Ok(())
    }

    /// Effective cap for a run starting from `initial`. A cap at or below the
    /// initial value is accepted and stops the run at its first step.
    pub fn cap_for(&self, initial: &State) -> Result<f64> {
        match self.blowup_cap {
            None => Ok(1e3 * initial.blowup_quantity().max(1.0)),
            Some(cap) if cap > 0.0 && cap.is_finite() => Ok(cap),
            Some(cap) => Err(KslbError::InvalidArgument(format!(
                "blow-up cap must be positive and finite, got {cap}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RunStatus {
    Completed,
    BlowUpSuspected(f64),
    NumericalFailure(f64),
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub status: RunStatus,
    pub trace: Vec<TraceSample>,
    pub final_state: State,
    pub steps: usize,
    pub cap: f64,
}

/// Step-size heuristic for explicitly treated nonlinear terms.
///
/// Besides the drift and reaction rates this charges the aggregation rate `χ‖n‖∞/min(τ, 1)`
/// that the cross-diffusion term picks up through `Δc ≈ (c − n)`; without it concentrated
/// spikes at small μ go unstable.
pub fn stable_dt(params: &Params, linf_n: f64, linf_gradc: f64) -> f64 {
    let aggregation = params.chi * linf_n / params.tau.min(1.0);
    0.25 * (1.0 / (params.chi * linf_gradc + aggregation + params.lambda + 2.0 * params.mu * linf_n + 1.0))
        .min(1.0)
}

/// `(e^z − 1)/z` and `(e^z − 1 − z)/z²`, with series near zero.
pub fn phi_functions(z: f64) -> (f64, f64) {
    if z.abs() < 0.5 {
        let mut term = 1.0;
        let mut p1 = 0.0;
        let mut p2 = 0.0;
        // term = z^k / (k+2)!, built incrementally.
        let mut fact1 = 1.0; // z^k/(k+1)!
        for k in 0..22 {
            if k > 0 {
                fact1 *= z / (k as f64 + 1.0);
            }
            p1 += fact1;
            if k == 0 {
                term = 0.5;
            } else {
                term *= z / (k as f64 + 2.0);
            }
            p2 += term;
        }
        (p1, p2)
    } else {
        let em1 = z.exp_m1();
        (em1 / z, (em1 - z) / (z * z))
    }
}

struct EtdCoefficients {
    dt: f64,
    en: Vec<f64>,
    p1n: Vec<f64>,
    p2n: Vec<f64>,
    ec: Vec<f64>,
    p1c: Vec<f64>,
    p2c: Vec<f64>,
}

/// Evaluation of the nonlinear parts at one state.
pub(crate) struct NonlinearEval {
    n_hat: Vec<Complex64>,
    c_hat: Vec<Complex64>,
    nn_hat: Vec<Complex64>,
    /// Spectral `n / τ`.
    nc_hat: Vec<Complex64>,
    reaction: f64,
    linf_n: f64,
    linf_gradc: f64,
    linf_c: f64,
    mass: f64,
    l1: f64,
}

/// Reusable ETD-RK2 integrator bound to one grid and parameter set.
pub struct Stepper {
    grid: Grid,
    params: Params,
    dealias: bool,
    ksq: Vec<f64>,
    xi_odd: Vec<[f64; MAX_DIM]>,
    /// Flat index of the mode `−ξ`.
    neg: Vec<usize>,
    /// Modes surviving the 2/3 rule.
    keep: Vec<bool>,
    coef: Option<EtdCoefficients>,
}

impl Stepper {
    pub fn new(grid: Grid, params: Params, dealias: bool) -> Result<Self> {
        params.validate()?;
        let ko = grid.odd_wavenumber_table();
        let xi_odd = (0..grid.len())
            .map(|flat| {
                let idx = grid.multi_index(flat);
                let mut x = [0.0; MAX_DIM];
                for a in 0..grid.dim() {
                    x[a] = ko[idx[a]];
                }
                x
            })
            .collect();
        let n = grid.n_axis();
        let keep_axis: Vec<bool> = (0..n).map(|i| 3 * grid.mode_number(i).unsigned_abs() as usize <= n).collect();
        let mut neg = Vec::with_capacity(grid.len());
        let mut keep = Vec::with_capacity(grid.len());
        for flat in 0..grid.len() {
            let idx = grid.multi_index(flat);
            let mut m = 0;
            for &i in &idx[..grid.dim()] {
                m = m * n + (n - i) % n;
            }
            neg.push(m);
            keep.push(idx[..grid.dim()].iter().all(|&i| keep_axis[i]));
        }
        Ok(Self {
            grid,
            params,
            dealias,
            ksq: grid.wavenumber_sq(),
            xi_odd,
            neg,
            keep,
            coef: None,
        })
    }

    fn coefficients(&mut self, dt: f64) -> &EtdCoefficients {
        if self.coef.as_ref().map(|c| c.dt) != Some(dt) {
            let tau = self.params.tau;
            let len = self.ksq.len();
            let mut c = EtdCoefficients {
                dt,
                en: vec![0.0; len],
                p1n: vec![0.0; len],
                p2n: vec![0.0; len],
                ec: vec![0.0; len],
                p1c: vec![0.0; len],
                p2c: vec![0.0; len],
            };
            for (i, &k2) in self.ksq.iter().enumerate() {
                let zn = -k2 * dt;
                let (a, b) = phi_functions(zn);
                c.en[i] = zn.exp();
                c.p1n[i] = dt * a;
                c.p2n[i] = dt * b;
                let zc = -(1.0 + k2) / tau * dt;
                let (a, b) = phi_functions(zc);
                c.ec[i] = zc.exp();
                c.p1c[i] = dt * a;
                c.p2c[i] = dt * b;
            }
            self.coef = Some(c);
        }
        self.coef.as_ref().expect("set above")
    }

    fn inverse(&self, hat: &[Complex64]) -> Vec<f64> {
        self.inverse_pair(hat, None).0
    }

    /// Inverse transforms of two Hermitian spectra with one complex FFT.
    fn inverse_pair(&self, a: &[Complex64], b: Option<&[Complex64]>) -> (Vec<f64>, Vec<f64>) {
        let i = Complex64::new(0.0, 1.0);
        let mut buf: Vec<Complex64> = match b {
            Some(b) => a.iter().zip(b).map(|(x, y)| x + i * y).collect(),
            None => a.to_vec(),
        };
        fft_nd(&self.grid, &mut buf, true);
        let s = 1.0 / self.grid.len() as f64;
        let re = buf.iter().map(|v| v.re * s).collect();
        let im = if b.is_some() { buf.iter().map(|v| v.im * s).collect() } else { Vec::new() };
        (re, im)
    }

    /// Forward transforms of two real fields with one complex FFT, split by symmetry.
    fn forward_pair(&self, a: &[f64], b: Option<&[f64]>) -> (Vec<Complex64>, Vec<Complex64>) {
        let mut buf: Vec<Complex64> = match b {
            Some(b) => a.iter().zip(b).map(|(&x, &y)| Complex64::new(x, y)).collect(),
            None => a.iter().map(|&x| Complex64::new(x, 0.0)).collect(),
        };
        fft_nd(&self.grid, &mut buf, false);
        if b.is_none() {
            return (buf, Vec::new());
        }
        let (fa, fb) = buf
            .iter()
            .zip(&self.neg)
            .map(|(z, &m)| {
                let zc = buf[m].conj();
                ((z + zc) * 0.5, Complex64::new(0.0, -0.5) * (z - zc))
            })
            .unzip();
        (fa, fb)
    }

    /// Forward transforms of a list of real fields, two per FFT.
    fn forward_many(&self, fields: &[Vec<f64>]) -> Vec<Vec<Complex64>> {
        let mut out = Vec::with_capacity(fields.len());
        for pair in fields.chunks(2) {
            let (a, b) = self.forward_pair(&pair[0], pair.get(1).map(|v| v.as_slice()));
            out.push(a);
            if pair.len() == 2 {
                out.push(b);
            }
        }
        out
    }

    fn dealias(&self, coeffs: &mut [Complex64]) {
        if self.dealias {
            for (c, &k) in coeffs.iter_mut().zip(&self.keep) {
                if !k {
                    *c = Complex64::new(0.0, 0.0);
                }
            }
        }
    }

    fn eval_spectral(
        &self,
        n: &[f64],
        c: &[f64],
        n_hat: Vec<Complex64>,
        c_hat: Vec<Complex64>,
    ) -> Result<NonlinearEval> {
        let g = &self.grid;
        let p = &self.params;
        let len = g.len();
        let d = g.dim();
        let zero = Complex64::new(0.0, 0.0);
        let deriv = |a: usize| -> Vec<Complex64> {
            c_hat.iter().zip(&self.xi_odd).map(|(v, x)| v * Complex64::new(0.0, x[a])).collect()
        };
        let mut grads = Vec::with_capacity(d);
        for a in (0..d).step_by(2) {
            let da = deriv(a);
            let db = (a + 1 < d).then(|| deriv(a + 1));
            let (ga, gb) = self.inverse_pair(&da, db.as_deref());
            grads.push(ga);
            if db.is_some() {
                grads.push(gb);
            }
        }
        let mut gsq = vec![0.0; len];
        for ga in &grads {
            for (s, v) in gsq.iter_mut().zip(ga) {
                *s += v * v;
            }
        }
        let mut physical: Vec<Vec<f64>> = Vec::with_capacity(d + 1);
        if p.chi != 0.0 {
            for ga in &grads {
                physical.push(n.iter().zip(ga).map(|(u, v)| u * v).collect());
            }
        }
        let reaction: Vec<f64> = n.iter().map(|&u| p.lambda * u - p.mu * u * u).collect();
        let reaction_int = g.cell_volume() * reaction.iter().sum::<f64>();
        let has_reaction = p.lambda != 0.0 || p.mu != 0.0;
        if has_reaction {
            physical.push(reaction);
        }
        let mut spectra = self.forward_many(&physical);
        for sp in &mut spectra {
            self.dealias(sp);
        }
        let mut nn_hat = if has_reaction { spectra.pop().expect("reaction spectrum") } else { vec![zero; len] };
        for (a, f_hat) in spectra.iter().enumerate() {
            for ((o, f), x) in nn_hat.iter_mut().zip(f_hat).zip(&self.xi_odd) {
                *o -= f * Complex64::new(0.0, x[a] * p.chi);
            }
        }
        let inv_tau = 1.0 / p.tau;
        let nc_hat = n_hat.iter().map(|v| v * inv_tau).collect();
        let linf_gradc = gsq.iter().fold(0.0_f64, |m, &v| m.max(v)).sqrt();
        let eval = NonlinearEval {
            n_hat,
            c_hat,
            nn_hat,
            nc_hat,
            reaction: reaction_int,
            linf_n: n.iter().fold(0.0, |m, v| m.max(v.abs())),
            linf_gradc,
            linf_c: c.iter().fold(0.0, |m, v| m.max(v.abs())),
            mass: g.cell_volume() * n.iter().sum::<f64>(),
            l1: g.cell_volume() * n.iter().map(|v| v.abs()).sum::<f64>(),
        };
        if !(eval.reaction.is_finite() && eval.linf_gradc.is_finite() && eval.linf_n.is_finite()) {
            return Err(KslbError::NumericalFailure {
                t: f64::NAN,
                reason: "non-finite value in nonlinear terms".into(),
            });
        }
        Ok(eval)
    }

    pub(crate) fn evaluate(&self, state: &State) -> Result<NonlinearEval> {
        if state.grid() != &self.grid {
            return Err(KslbError::ShapeMismatch("state grid differs from stepper grid".into()));
        }
        let (n_hat, c_hat) = self.forward_pair(state.n.values(), Some(state.c.values()));
        self.eval_spectral(state.n.values(), state.c.values(), n_hat, c_hat)
            .map_err(|e| with_time(e, state.t))
    }

    /// Advances `state` by `dt`, given the nonlinear evaluation at `state`.
    pub(crate) fn advance(
        &mut self,
        state: &State,
        eu: &NonlinearEval,
        dt: f64,
    ) -> Result<(State, StepInfo)> {
        self.coefficients(dt);
        let k = self.coef.as_ref().expect("coefficients computed");
        let len = self.grid.len();
        let mut an_hat = Vec::with_capacity(len);
        let mut ac_hat = Vec::with_capacity(len);
        for i in 0..len {
            an_hat.push(eu.n_hat[i] * k.en[i] + eu.nn_hat[i] * k.p1n[i]);
            ac_hat.push(eu.c_hat[i] * k.ec[i] + eu.nc_hat[i] * k.p1c[i]);
        }
        let (an, ac) = self.inverse_pair(&an_hat, Some(&ac_hat));
        let ea = self
            .eval_spectral(&an, &ac, an_hat, ac_hat)
            .map_err(|e| with_time(e, state.t))?;
        let k = self.coef.as_ref().expect("coefficients computed");
        let mut un_hat = Vec::with_capacity(len);
        let mut uc_hat = Vec::with_capacity(len);
        for i in 0..len {
            un_hat.push(ea.n_hat[i] + (ea.nn_hat[i] - eu.nn_hat[i]) * k.p2n[i]);
            uc_hat.push(ea.c_hat[i] + (ea.nc_hat[i] - eu.nc_hat[i]) * k.p2c[i]);
        }
        let (un, uc) = self.inverse_pair(&un_hat, Some(&uc_hat));
        let n = ScalarField::new(self.grid, un)?;
        let c = ScalarField::new(self.grid, uc)?;
        let next = State {
            t: state.t + dt,
            n,
            c,
        };
        if !next.is_finite() {
            return Err(KslbError::NumericalFailure {
                t: state.t,
                reason: "non-finite sample after step".into(),
            });
        }
        let info = StepInfo {
            t: state.t,
            dt,
            mass_before: eu.mass,
            mass_after: integrate(&next.n),
            reaction_integral: 0.5 * dt * (eu.reaction + ea.reaction),
            l1_before: eu.l1,
        };
        Ok((next, info))
    }

    /// One ETD-RK2 step of size `dt`.
    pub fn step(&mut self, state: &State, dt: f64) -> Result<(State, StepInfo)> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(KslbError::InvalidArgument(format!("dt must be > 0, got {dt}")));
        }
        let eu = self.evaluate(state)?;
        self.advance(state, &eu, dt)
    }
}

fn with_time(e: KslbError, t: f64) -> KslbError {
    match e {
        KslbError::NumericalFailure { reason, .. } => KslbError::NumericalFailure { t, reason },
        other => other,
    }
}

/// Time derivatives `(dn/dt, dc/dt)` of the system at `state`, products dealiased.
pub fn rhs(state: &State, params: &Params) -> Result<(ScalarField, ScalarField)> {
    let grid = *state.grid();
    let stepper = Stepper::new(grid, *params, true)?;
    let e = stepper.evaluate(state)?;
    let tau = params.tau;
    let mut dn = Vec::with_capacity(grid.len());
    let mut dc = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let k2 = stepper.ksq[i];
        dn.push(e.nn_hat[i] - e.n_hat[i] * k2);
        dc.push(e.nc_hat[i] - e.c_hat[i] * ((1.0 + k2) / tau));
    }
    let dn = from_spectral(&SpectralField::new(grid, dn)?);
    let dc = from_spectral(&SpectralField::new(grid, dc)?);
    if let Some(index) = dn.first_non_finite().or(dc.first_non_finite()) {
        return Err(KslbError::NumericalFailure {
            t: state.t,
            reason: format!("non-finite time derivative at index {index}"),
        });
    }
    Ok((dn, dc))
}

/// One ETD-RK2 step with dealiasing.
pub fn step(state: &State, params: &Params, dt: f64) -> Result<State> {
    Ok(Stepper::new(*state.grid(), *params, true)?.step(state, dt)?.0)
}

/// Integrates from `initial` to `config.t_end`, sampling every `monitor_every`.
///
/// Invalid inputs are errors; blow-up and numerical failure are reported in
/// the returned status.
pub fn run(
    initial: &State,
    params: &Params,
    config: &RunConfig,
    monitors: &mut [&mut dyn Monitor],
) -> Result<RunResult> {
    config.validate()?;
    params.validate()?;
    if !initial.is_finite() {
        return Err(KslbError::InvalidArgument("initial state has non-finite samples".into()));
    }
    let cap = config.cap_for(initial)?;
    let mut stepper = Stepper::new(*initial.grid(), *params, config.dealias)?;
    let mut state = initial.clone();
    let mut trace = Vec::new();
    record(&state, &mut trace, monitors);

    let t0 = initial.t;
    let mut status = RunStatus::Completed;
    let mut steps = 0usize;
    if config.adaptive {
        let mut interval = 1u64;
        while state.t < config.t_end {
            let target = (t0 + interval as f64 * config.monitor_every).min(config.t_end);
            interval += 1;
            while state.t < target {
                let outcome = advance_once(&mut stepper, &state, params, config, cap, Some(target));
                match outcome {
                    Ok(Some((next, info))) => {
                        for m in monitors.iter_mut() {
                            m.on_step(&state, &next, &info);
                        }
                        state = next;
                        steps += 1;
                    }
                    Ok(None) => {
                        status = RunStatus::BlowUpSuspected(state.t);
                        break;
                    }
                    Err(KslbError::NumericalFailure { t, .. }) => {
                        status = RunStatus::NumericalFailure(t);
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            if status != RunStatus::Completed {
                break;
            }
            record(&state, &mut trace, monitors);
        }
    } else {
        // Steps sit on the lattice t0 + k dt regardless of the sampling stride,
        // so the trajectory does not depend on how often it is observed.
        let per_sample = ((config.monitor_every / config.dt).round() as usize).max(1);
        let total = (((config.t_end - t0) / config.dt) - 1e-9).ceil().max(0.0) as usize;
        for k in 0..total {
            let last = k + 1 == total;
            let end = if last {
                config.t_end
            } else {
                t0 + (k + 1) as f64 * config.dt
            };
            let outcome = advance_once(&mut stepper, &state, params, config, cap, None)
                .map(|o| o.map(|(mut next, info)| {
                    next.t = end;
                    (next, info)
                }));
            match outcome {
                Ok(Some((next, info))) => {
                    for m in monitors.iter_mut() {
                        m.on_step(&state, &next, &info);
                    }
                    state = next;
                    steps += 1;
                }
                Ok(None) => {
                    status = RunStatus::BlowUpSuspected(state.t);
                    break;
                }
                Err(KslbError::NumericalFailure { t, .. }) => {
                    status = RunStatus::NumericalFailure(t);
                    break;
                }
                Err(e) => return Err(e),
            }
            if last || (k + 1) % per_sample == 0 {
                record(&state, &mut trace, monitors);
            }
        }
    }
    if let RunStatus::BlowUpSuspected(t) = status {
        if trace.last().map(|s| s.t) != Some(t) {
            record(&state, &mut trace, monitors);
        }
    }
    Ok(RunResult {
        status,
        trace,
        final_state: state,
        steps,
        cap,
    })
}

/// One step from `state`, or `None` when the blow-up cap is exceeded there.
/// With a `target`, the step size is capped so the step lands on it exactly.
fn advance_once(
    stepper: &mut Stepper,
    state: &State,
    params: &Params,
    config: &RunConfig,
    cap: f64,
    target: Option<f64>,
) -> Result<Option<(State, StepInfo)>> {
    let eu = stepper.evaluate(state)?;
    if eu.linf_n + eu.linf_c + eu.linf_gradc > cap {
        return Ok(None);
    }
    let dt = match target {
        Some(target) => {
            let h = config.dt.min(stable_dt(params, eu.linf_n, eu.linf_gradc));
            let rem = target - state.t;
            if h >= rem * (1.0 - 1e-12) {
                let (mut next, info) = stepper.advance(state, &eu, rem)?;
                next.t = target;
                return Ok(Some((next, info)));
            }
            h
        }
        None => {
            let rem = config.t_end - state.t;
            if rem < config.dt {
                rem
            } else {
                config.dt
            }
        }
    };
    stepper.advance(state, &eu, dt).map(Some)
}

fn record(state: &State, trace: &mut Vec<TraceSample>, monitors: &mut [&mut dyn Monitor]) {
    let s = TraceSample::of(state);
    for m in monitors.iter_mut() {
        m.on_sample(state, &s);
    }
    trace.push(s);
}

/// Samples `n0`, `c0` and truncates both with `psi(x / M)`.
pub fn approx_initial(
    n0: impl Fn(&[f64; MAX_DIM]) -> f64,
    c0: impl Fn(&[f64; MAX_DIM]) -> f64,
    m: f64,
    grid: &Grid,
) -> Result<State> {
    let psi = cutoff_psi(grid, m)?;
    let n = ScalarField::from_fn(*grid, n0);
    if let Some(i) = n.values().iter().position(|&v| v < 0.0 || !v.is_finite()) {
        return Err(KslbError::InvalidArgument(format!(
            "initial density must be finite and nonnegative (index {i})"
        )));
    }
    let c = ScalarField::from_fn(*grid, c0);
    if let Some(index) = c.first_non_finite() {
        return Err(KslbError::NonFinite { index });
    }
    State::new(
        0.0,
        n.zip_map(&psi, |a, b| a * b)?,
        c.zip_map(&psi, |a, b| a * b)?,
    )
}

/// `(min n, min c)` over the grid.
pub fn nonnegativity_report(state: &State) -> (f64, f64) {
    (state.n.min(), state.c.min())
}

/// Runs twice from identical inputs and compares traces and final states bitwise.
pub fn determinism_check(initial: &State, params: &Params, config: &RunConfig) -> Result<bool> {
    let a = run(initial, params, config, &mut [])?;
    let b = run(initial, params, config, &mut [])?;
    let same_trace = a.trace.len() == b.trace.len()
        && a.trace.iter().zip(&b.trace).all(|(x, y)| bitwise_eq_sample(x, y));
    let same_final = bitwise_eq(a.final_state.n.values(), b.final_state.n.values())
        && bitwise_eq(a.final_state.c.values(), b.final_state.c.values());
    Ok(same_trace && same_final && a.status == b.status)
}

fn bitwise_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn bitwise_eq_sample(a: &TraceSample, b: &TraceSample) -> bool {
    let fa = [
        a.t, a.mass, a.l1_n, a.l2sq_n, a.l2sq_c, a.l2sq_gradc, a.l2sq_hess_c, a.linf_n, a.linf_c,
        a.linf_gradc, a.min_n, a.min_c,
    ];
    let fb = [
        b.t, b.mass, b.l1_n, b.l2sq_n, b.l2sq_c, b.l2sq_gradc, b.l2sq_hess_c, b.linf_n, b.linf_c,
        b.linf_gradc, b.min_n, b.min_c,
    ];
    bitwise_eq(&fa, &fb)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PicardConfig {
    pub horizon: f64,
    pub iterations: usize,
    /// Number of time subintervals for the Duhamel quadrature.
    pub quadrature_nodes: usize,
    /// Bound `M >= ||n0||_1 + ||n0||_inf`.
    pub data_bound: f64,
}

impl PicardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(KslbError::InvalidArgument(format!(
                "horizon must be > 0, got {}",
                self.horizon
            )));
        }
        if self.iterations == 0 || self.quadrature_nodes == 0 {
            return Err(KslbError::InvalidArgument(
                "iterations and quadrature nodes must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PicardReport {
    pub horizon: f64,
    /// `sup_i (||n^{m+1}(t_i) − n^m(t_i)||_inf + ||c^{m+1}(t_i) − c^m(t_i)||_{W^{1,inf}})`.
    pub differences: Vec<f64>,
    /// Ratios of successive differences.
    pub contraction: Vec<f64>,
    pub diverged: bool,
    /// Final iterate at `t = horizon`.
    pub final_state: State,
}

impl PicardReport {
    pub fn max_contraction(&self) -> f64 {
        self.contraction.iter().cloned().fold(0.0, f64::max)
    }
}

/// `||∇e^{tΔ}||_{L¹→L¹} · t^{1/2}` in dimension `d`, i.e. `Γ((d+1)/2) / Γ(d/2)`.
pub fn heat_gradient_constant(d: usize) -> f64 {
    let sqrt_pi = std::f64::consts::PI.sqrt();
    match d {
        1 => 1.0 / sqrt_pi,
        2 => sqrt_pi / 2.0,
        3 => 2.0 / sqrt_pi,
        _ => f64::NAN,
    }
}

/// Local existence horizon `min(T₁, T₂)` from the contraction argument.
pub fn default_picard_horizon(d: usize, params: &Params, data_bound: f64) -> f64 {
    let c = heat_gradient_constant(d);
    let growth = if params.lambda > 0.0 {
        1.0 / (4.0 * params.lambda)
    } else {
        f64::INFINITY
    };
    let coupling = 8.0 * data_bound * (2.0 * c * params.chi + params.mu);
    let t1 = 1f64.min(growth).min(if coupling > 0.0 {
        coupling.powi(-2)
    } else {
        f64::INFINITY
    });
    let t2 = 1f64.min((params.tau / (4.0 * (1.0 + c * params.tau.sqrt()))).powi(2));
    t1.min(t2)
}

/// Spectral values of an iterate at every time node.
struct Path {
    n: Vec<Vec<Complex64>>,
    c: Vec<Vec<Complex64>>,
}

/// Picard iteration of the Duhamel map on `[0, horizon]`.
pub fn picard_local_solve(
    initial: &State,
    params: &Params,
    config: &PicardConfig,
) -> Result<PicardReport> {
    config.validate()?;
    params.validate()?;
    let grid = *initial.grid();
    let stepper = Stepper::new(grid, *params, true)?;
    let q = config.quadrature_nodes;
    let ds = config.horizon / q as f64;
    let tau = params.tau;
    let n0 = to_hat(&initial.n);
    let c0 = to_hat(&initial.c);
    let ksq = &stepper.ksq;
    let heat = |t: f64| -> Vec<f64> { ksq.iter().map(|k2| (-t * k2).exp()).collect() };
    let damped = |t: f64| -> Vec<f64> { ksq.iter().map(|k2| (-(t / tau) * (1.0 + k2)).exp()).collect() };
    let (hs, hh) = (heat(ds), heat(0.5 * ds));
    let (gs, gh) = (damped(ds), damped(0.5 * ds));

    // Free evolution is the zeroth iterate.
    let mut path = Path {
        n: Vec::with_capacity(q + 1),
        c: Vec::with_capacity(q + 1),
    };
    for i in 0..=q {
        let t = i as f64 * ds;
        path.n.push(mul(&n0, &heat(t)));
        path.c.push(mul(&c0, &damped(t)));
    }

    let mut differences = Vec::new();
    let mut contraction = Vec::new();
    let mut diverged = false;
    for _ in 0..config.iterations {
        let evals = path
            .n
            .iter()
            .zip(&path.c)
            .map(|(nh, ch)| {
                let (n, c) = stepper.inverse_pair(nh, Some(ch));
                stepper.eval_spectral(&n, &c, nh.clone(), ch.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        let mut next = Path {
            n: vec![n0.clone()],
            c: vec![c0.clone()],
        };
        let mut int_n = vec![Complex64::new(0.0, 0.0); grid.len()];
        let mut int_c = int_n.clone();
        for l in 0..q {
            for i in 0..grid.len() {
                let avg_n = 0.5 * (evals[l].nn_hat[i] + evals[l + 1].nn_hat[i]);
                let avg_c = 0.5 * (evals[l].nc_hat[i] + evals[l + 1].nc_hat[i]);
                int_n[i] = int_n[i] * hs[i] + avg_n * (ds * hh[i]);
                int_c[i] = int_c[i] * gs[i] + avg_c * (ds * gh[i]);
            }
            let t = (l + 1) as f64 * ds;
            let free_n = mul(&n0, &heat(t));
            let free_c = mul(&c0, &damped(t));
            next.n.push(free_n.iter().zip(&int_n).map(|(a, b)| a + b).collect());
            next.c.push(free_c.iter().zip(&int_c).map(|(a, b)| a + b).collect());
        }
        let mut diff = 0.0_f64;
        for i in 0..=q {
            let dn: Vec<Complex64> = next.n[i].iter().zip(&path.n[i]).map(|(a, b)| a - b).collect();
            let dc: Vec<Complex64> = next.c[i].iter().zip(&path.c[i]).map(|(a, b)| a - b).collect();
            let dn = ScalarField::new(grid, stepper.inverse(&dn))?;
            let dc = ScalarField::new(grid, stepper.inverse(&dc))?;
            diff = diff.max(dn.max_abs() + w1inf_norm(&dc));
        }
        if let Some(&prev) = differences.last() {
            let r = if prev > 0.0 { diff / prev } else { 0.0 };
            contraction.push(r);
            if r >= 1.0 && diff > 0.0 {
                diverged = true;
            }
        }
        differences.push(diff);
        path = next;
        if !diff.is_finite() {
            diverged = true;
            break;
        }
    }
    let final_state = State {
        t: initial.t + config.horizon,
        n: ScalarField::new(grid, stepper.inverse(&path.n[q]))?,
        c: ScalarField::new(grid, stepper.inverse(&path.c[q]))?,
    };
    Ok(PicardReport {
        horizon: config.horizon,
        differences,
        contraction,
        diverged,
        final_state,
    })
}

/// Picard iteration on the default horizon, halved until every observed
/// contraction factor is below one (at most `max_halvings` times).
pub fn picard_default(
    initial: &State,
    params: &Params,
    iterations: usize,
    quadrature_nodes: usize,
    max_halvings: usize,
) -> Result<PicardReport> {
    let data_bound = integrate(&initial.n.map(f64::abs)) + initial.n.max_abs();
    let mut horizon = default_picard_horizon(initial.grid().dim(), params, data_bound);
    let mut report = None;
    for _ in 0..=max_halvings {
        let cfg = PicardConfig {
            horizon,
            iterations,
            quadrature_nodes,
            data_bound,
        };
        let r = picard_local_solve(initial, params, &cfg)?;
        let ok = !r.diverged && r.max_contraction() < 1.0;
        report = Some(r);
        if ok {
            break;
        }
        horizon *= 0.5;
    }
    Ok(report.expect("at least one attempt"))
}

fn to_hat(f: &ScalarField) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = f.values().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_nd(f.grid(), &mut buf, false);
    buf
}

fn mul(a: &[Complex64], m: &[f64]) -> Vec<Complex64> {
    a.iter().zip(m).map(|(v, s)| v * s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::fields::{heat_propagate, make_grid, Damping};

    fn bump_state(grid: Grid, amp: f64, width: f64) -> State {
        let n = ScalarField::from_fn(grid, |x| {
            amp * (-(x.iter().map(|v| v * v).sum::<f64>()) / (width * width)).exp()
        });
        let c = n.scaled(0.5);
        State::new(0.0, n, c).unwrap()
    }

    fn max_diff(a: &ScalarField, b: &ScalarField) -> f64 {
        a.values()
            .iter()
            .zip(b.values())
            .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn phi_functions_match_closed_forms() {
        for z in [-0.49, -0.1, -1e-6, 0.0, 1e-6, 0.3] {
            let (a, b) = phi_functions(z);
            if z != 0.0 {
                let ea = z.exp_m1() / z;
                assert!((a - ea).abs() < 1e-12);
                if z.abs() > 1e-3 {
                    let eb = (z.exp() - 1.0 - z) / (z * z);
                    assert!((b - eb).abs() < 1e-9);
                }
            } else {
                assert_eq!((a, b), (1.0, 0.5));
            }
        }
        let (a, b) = phi_functions(-40.0);
        assert!((a - 1.0 / 40.0).abs() < 1e-12);
        assert!((b - (39.0 / 1600.0)).abs() < 1e-12);
    }

    #[test]
    fn rhs_examples() {
        let g = make_grid(2, 64, 8.0).unwrap();
        let p = Params::new(1.3, 0.7, 2.0, 0.5).unwrap();
        let eq = p.equilibrium();
        let s = State::new(0.0, ScalarField::constant(g, eq), ScalarField::constant(g, eq)).unwrap();
        let (dn, dc) = rhs(&s, &p).unwrap();
        assert!(dn.max_abs() < 1e-12 && dc.max_abs() < 1e-12);
        let (dn, dc) = rhs(&State::zeros(g), &p).unwrap();
        assert_eq!(dn.max_abs() + dc.max_abs(), 0.0);
        // χ = 0: heat plus logistic, checked pointwise against a finite-difference-free oracle.
        let p0 = Params::new(0.0, 1.0, 1.0, 2.0).unwrap();
        let s = bump_state(g, 1.0, 1.5);
        let (dn, _) = rhs(&s, &p0).unwrap();
        let lap = crate::fields::laplacian(&s.n);
        for i in 0..g.len() {
            let u = s.n.values()[i];
            let want = lap.values()[i] + u - 2.0 * u * u;
            assert!((dn.values()[i] - want).abs() < 1e-3 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn rhs_undealiased_matches_direct_formula() {
        let g = make_grid(1, 64, 10.0).unwrap();
        let p = Params::new(0.0, 1.0, 1.0, 2.0).unwrap();
        let s = bump_state(g, 1.0, 1.5);
        let st = Stepper::new(g, p, false).unwrap();
        let e = st.evaluate(&s).unwrap();
        let nn = from_spectral(&SpectralField::new(g, e.nn_hat.clone()).unwrap());
        for i in 0..g.len() {
            let u = s.n.values()[i];
            assert!((nn.values()[i] - (u - 2.0 * u * u)).abs() < 1e-13);
        }
    }

    #[test]
    fn linear_flow_is_exact() {
        let g = make_grid(2, 32, 10.0).unwrap();
        let p = Params::new(0.0, 1.7, 0.0, 0.0).unwrap();
        let s = bump_state(g, 1.0, 1.0);
        let out = step(&s, &p, 0.05).unwrap();
        let want_n = heat_propagate(&s.n, 0.05, 1.0, Damping::None).unwrap();
        assert!(max_diff(&out.n, &want_n) < 1e-12);
        let z = State::new(0.0, ScalarField::zeros(g), s.c.clone()).unwrap();
        let out = step(&z, &p, 0.05).unwrap();
        let want_c = heat_propagate(&s.c, 0.05, 1.7, Damping::Unit).unwrap();
        assert!(max_diff(&out.c, &want_c) < 1e-12);
    }

    #[test]
    fn equilibrium_is_fixed() {
        let g = make_grid(3, 8, 4.0).unwrap();
        let p = Params::new(2.0, 0.5, 3.0, 1.5).unwrap();
        let eq = p.equilibrium();
        let s = State::new(0.0, ScalarField::constant(g, eq), ScalarField::constant(g, eq)).unwrap();
        let out = step(&s, &p, 0.1).unwrap();
        assert!(max_diff(&out.n, &s.n) < 1e-12);
        assert!(max_diff(&out.c, &s.c) < 1e-12);
    }

    #[test]
    fn local_error_is_third_order() {
        let g = make_grid(1, 64, 12.0).unwrap();
        let p = Params::new(1.0, 1.0, 1.0, 0.5).unwrap();
        let s = bump_state(g, 2.0, 1.2);
        let reference = |h: f64| {
            let mut st = Stepper::new(g, p, true).unwrap();
            let mut x = s.clone();
            for _ in 0..256 {
                x = st.step(&x, h / 256.0).unwrap().0;
            }
            x
        };
        let err = |h: f64| {
            let one = step(&s, &p, h).unwrap();
            let r = reference(h);
            max_diff(&one.n, &r.n).max(max_diff(&one.c, &r.c))
        };
        let e1 = err(0.04);
        let e2 = err(0.02);
        let ratio = e1 / e2;
        assert!((ratio - 8.0).abs() <= 0.2 * 8.0, "ratio {ratio}");
    }

    #[test]
    fn mass_ledger_per_step() {
        let g = make_grid(2, 32, 10.0).unwrap();
        let p = Params::new(2.0, 1.0, 1.0, 0.3).unwrap();
        let mut s = bump_state(g, 3.0, 1.0);
        let mut st = Stepper::new(g, p, true).unwrap();
        for _ in 0..20 {
            let (next, info) = st.step(&s, 0.01).unwrap();
            assert!(info.mass_defect() <= 1e-10 * info.l1_before);
            s = next;
        }
    }

    #[test]
    fn run_examples() {
        let g = make_grid(1, 64, 20.0).unwrap();
        let p = Params::new(1.0, 1.0, 1.0, 1.0).unwrap();
        let cfg = RunConfig {
            dt: 0.01,
            t_end: 0.5,
            monitor_every: 0.1,
            ..RunConfig::default()
        };
        let r = run(&State::zeros(g), &p, &cfg, &mut []).unwrap();
        assert_eq!(r.status, RunStatus::Completed);
        assert_eq!(r.final_state.n.max_abs(), 0.0);
        assert_eq!(r.trace.len(), 6);
        assert_eq!(r.final_state.t, 0.5);
        for w in r.trace.windows(2) {
            assert!(w[1].t > w[0].t);
        }
        let s = bump_state(g, 1.0, 1.0);
        let r = run(&s, &p, &cfg, &mut []).unwrap();
        assert_eq!(r.status, RunStatus::Completed);
        assert!(r.trace.iter().all(|x| x.linf_n < 10.0));

        let tight = RunConfig {
            blowup_cap: Some(s.blowup_quantity() * 1.0001),
            ..cfg
        };
        let p_grow = Params::new(1.0, 1.0, 5.0, 0.0).unwrap();
        let r = run(&s, &p_grow, &tight, &mut []).unwrap();
        assert!(matches!(r.status, RunStatus::BlowUpSuspected(_)));
        assert!(r.trace.last().unwrap().blowup_quantity() > r.cap);

        let bad = RunConfig { dt: 0.0, ..cfg };
        assert!(run(&s, &p, &bad, &mut []).is_err());
        let low_cap = RunConfig {
            blowup_cap: Some(0.1),
            ..cfg
        };
        let r = run(&s, &p, &low_cap, &mut []).unwrap();
        assert_eq!(r.status, RunStatus::BlowUpSuspected(0.0));
        assert_eq!(r.steps, 0);
        let zero_cap = RunConfig {
            blowup_cap: Some(0.0),
            ..cfg
        };
        assert!(run(&s, &p, &zero_cap, &mut []).is_err());
    }

    #[test]
    fn fixed_steps_hit_sample_times() {
        let g = make_grid(1, 32, 10.0).unwrap();
        let p = Params::new(1.0, 1.0, 0.0, 0.0).unwrap();
        let cfg = RunConfig {
            dt: 1e-3,
            t_end: 0.05,
            monitor_every: 0.01,
            adaptive: false,
            ..RunConfig::default()
        };
        let r = run(&bump_state(g, 1.0, 1.0), &p, &cfg, &mut []).unwrap();
        assert_eq!(r.steps, 50);
        assert_eq!(r.trace.len(), 6);
    }

    #[test]
    fn monitors_do_not_change_result() {
        struct Count(usize, usize);
        impl Monitor for Count {
            fn on_sample(&mut self, _: &State, _: &TraceSample) {
                self.0 += 1;
            }
            fn on_step(&mut self, _: &State, _: &State, _: &StepInfo) {
                self.1 += 1;
            }
        }
        let g = make_grid(2, 16, 8.0).unwrap();
        let p = Params::new(1.0, 1.0, 1.0, 1.0).unwrap();
        let s = bump_state(g, 1.0, 1.0);
        let base = RunConfig {
            dt: 0.01,
            t_end: 0.2,
            monitor_every: 0.05,
            adaptive: false,
            ..RunConfig::default()
        };
        let mut c = Count(0, 0);
        let a = run(&s, &p, &base, &mut [&mut c]).unwrap();
        assert_eq!(c.0, a.trace.len());
        assert_eq!(c.1, a.steps);
        let b = run(&s, &p, &RunConfig { monitor_every: 0.1, ..base }, &mut []).unwrap();
        assert_eq!(a.final_state.n, b.final_state.n);
        assert!(determinism_check(&s, &p, &base).unwrap());
    }

    #[test]
    fn approx_initial_examples() {
        let g = make_grid(1, 256, 64.0).unwrap();
        let s = approx_initial(|_| 1.0, |_| 0.0, 4.0, &g).unwrap();
        let o = g.origin();
        let h = g.spacing();
        assert_eq!(s.n.values()[o], 1.0);
        assert_eq!(s.n.values()[o + (3.0 / h) as usize], 1.0);
        assert_eq!(s.n.values()[o + (8.0 / h) as usize], 0.0);
        assert!(approx_initial(|x| x[0], |_| 0.0, 4.0, &g).is_err());
        let f = |x: &[f64; MAX_DIM]| 1.0 / (1.0 + x[0] * x[0]);
        let a = approx_initial(f, f, 3.0, &g).unwrap();
        let b = approx_initial(f, f, 6.0, &g).unwrap();
        for i in 0..g.len() {
            if g.position(i)[0].abs() <= 3.0 {
                assert_eq!(a.n.values()[i], b.n.values()[i]);
            }
        }
    }

    #[test]
    fn nonnegativity_on_positive_constant() {
        let g = make_grid(2, 16, 8.0).unwrap();
        let p = Params::new(1.0, 1.0, 1.0, 2.0).unwrap();
        let s = State::new(0.0, ScalarField::constant(g, 2.0), ScalarField::constant(g, 0.3)).unwrap();
        let r = run(&s, &p, &RunConfig { t_end: 0.3, ..RunConfig::default() }, &mut []).unwrap();
        let (mn, mc) = nonnegativity_report(&r.final_state);
        assert!(mn >= -1e-10 && mc >= -1e-10);
        assert_eq!(nonnegativity_report(&State::zeros(g)), (0.0, 0.0));
    }

    #[test]
    fn picard_examples() {
        let g = make_grid(1, 64, 16.0).unwrap();
        let s = bump_state(g, 1.0, 1.5);
        let heat = Params::new(0.0, 1.0, 0.0, 0.0).unwrap();
        let cfg = PicardConfig {
            horizon: 0.1,
            iterations: 2,
            quadrature_nodes: 4,
            data_bound: 4.0,
        };
        let r = picard_local_solve(&s, &heat, &cfg).unwrap();
        // n is fixed from the start; c settles after one application.
        assert_eq!(r.differences[1], 0.0);
        let want = heat_propagate(&s.n, 0.1, 1.0, Damping::None).unwrap();
        assert!(max_diff(&r.final_state.n, &want) < 1e-13);

        let p = Params::new(1.0, 1.0, 1.0, 1.0).unwrap();
        let r = picard_default(&s, &p, 6, 8, 10).unwrap();
        assert!(!r.diverged);
        assert!(r.max_contraction() < 1.0);
        assert!(r.horizon > 0.0);
    }

    #[test]
    fn heat_gradient_constant_by_quadrature() {
        // ||∇G_t||_1 sqrt(t) for the Gaussian heat kernel, estimated on a fine grid.
        for (d, n) in [(1, 4096), (2, 512), (3, 64)] {
            let t: f64 = 0.5;
            let g = make_grid(d, n, 24.0).unwrap();
            let kernel = ScalarField::from_fn(g, |x| {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                (4.0 * std::f64::consts::PI * t).powf(-(d as f64) / 2.0) * (-r2 / (4.0 * t)).exp()
            });
            let grad = crate::fields::gradient(&kernel).norm_sq().map(f64::sqrt);
            let est = integrate(&grad) * t.sqrt();
            let want = heat_gradient_constant(d);
            assert!((est - want).abs() < 2e-2 * want, "d={d} est={est} want={want}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn paired_transforms_match_single(d in 1usize..=3, seed in 0u64..1000) {
            let g = make_grid(d, 8, 5.0).unwrap();
            let st = Stepper::new(g, Params::new(1.0, 1.0, 1.0, 1.0).unwrap(), true).unwrap();
            let a = ScalarField::from_fn(g, |x| ((seed % 7) as f64 + x[0]).sin() + x[d - 1].cos());
            let b = ScalarField::from_fn(g, |x| (x[0] * 0.3 + seed as f64).cos() * (2.0 * x[d - 1]).sin());
            let (fa, fb) = st.forward_pair(a.values(), Some(b.values()));
            let sa = crate::fields::to_spectral(&a).unwrap();
            let sb = crate::fields::to_spectral(&b).unwrap();
            for i in 0..g.len() {
                prop_assert!((fa[i] - sa.coeffs()[i]).norm() <= 1e-12);
                prop_assert!((fb[i] - sb.coeffs()[i]).norm() <= 1e-12);
            }
            let (ra, rb) = st.inverse_pair(&fa, Some(&fb));
            for i in 0..g.len() {
                prop_assert!((ra[i] - a.values()[i]).abs() <= 1e-12);
                prop_assert!((rb[i] - b.values()[i]).abs() <= 1e-12);
            }
        }

        #[test]
        fn mass_ledger_and_step_bound(
            chi in 0.0f64..3.0,
            tau in 0.3f64..3.0,
            lambda in 0.0f64..2.0,
            mu in 0.0f64..2.0,
            amp in 0.1f64..3.0,
        ) {
            let g = make_grid(1, 64, 16.0).unwrap();
            let p = Params::new(chi, tau, lambda, mu).unwrap();
            let mut s = bump_state(g, amp, 2.0);
            let mut st = Stepper::new(g, p, true).unwrap();
            for _ in 0..5 {
                let e = st.evaluate(&s).unwrap();
                let h = stable_dt(&p, e.linf_n, e.linf_gradc);
                let prescribed = 0.25 * (1.0 / (chi * e.linf_gradc + lambda + 2.0 * mu * e.linf_n + 1.0)).min(1.0);
                prop_assert!(h > 0.0 && h <= prescribed);
                let (next, info) = st.step(&s, h).unwrap();
                prop_assert!(info.mass_defect() <= 1e-10 * info.l1_before.max(1e-300));
                s = next;
            }
        }
    }
}
