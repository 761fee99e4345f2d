//! Property suites behind `kslb check`, printed as one line per property.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ExitCode;
use crate::dyadic::{dyadic_block, generalized_young_check, low_freq, DyadicConfig};
use crate::error::{KslbError, Result};
use crate::fields::{
    from_spectral, gradient, heat_propagate, laplacian, make_grid, to_spectral, Damping, Grid,
    ScalarField,
};
use crate::monitors::{b_coefficients, mu_zero_estimate, MassLedger};
use crate::norms::{cutoff_phi, lp_norm, uloc_norm, CutoffSpec, CutoffWeights, UlocNormParams};
use crate::solver::{determinism_check, run, Params, RunConfig, State};

pub const SUITES: [&str; 5] = ["fields", "norms", "dyadic", "solver", "monitors"];

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &str, pass: bool, detail: String) -> Check {
    Check { name: name.into(), pass, detail }
}

fn random_field(grid: Grid, seed: u64) -> ScalarField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ScalarField::new(grid, (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("length matches grid")
}

fn max_diff(a: &ScalarField, b: &ScalarField) -> f64 {
    a.values().iter().zip(b.values()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn fields_suite() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let grid = make_grid(2, 64, 2.0 * PI)?;
    let f = random_field(grid, 1);
    let back = from_spectral(&to_spectral(&f)?);
    let e = max_diff(&f, &back);
    out.push(check("fft_roundtrip", e <= 1e-12, format!("err {e:.2e}")));
    let s = ScalarField::from_fn(grid, |x| (3.0 * x[0]).sin() * (2.0 * x[1]).cos());
    let want = s.scaled(-13.0);
    let e = max_diff(&laplacian(&s), &want);
    out.push(check("laplacian_eigenfunction", e <= 1e-10, format!("err {e:.2e}")));
    let g = gradient(&s);
    let dx = ScalarField::from_fn(grid, |x| 3.0 * (3.0 * x[0]).cos() * (2.0 * x[1]).cos());
    let e = max_diff(g.component(0), &dx);
    out.push(check("gradient_exact", e <= 1e-10, format!("err {e:.2e}")));
    let h = heat_propagate(&s, 0.1, 1.0, Damping::Unit)?;
    let e = max_diff(&h, &s.scaled((-14.0 * 0.1f64).exp()));
    out.push(check("damped_semigroup_mode", e <= 1e-12, format!("err {e:.2e}")));
    let spec = to_spectral(&f)?;
    out.push(check("hermitian_symmetry", spec.is_hermitian(1e-10), format!("defect {:.2e}", spec.hermitian_defect())));
    Ok(out)
}

fn norms_suite() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let e13 = (1.0f64 / 3.0).exp();
    let mut grad_c = Vec::new();
    let mut hess_c = Vec::new();
    let mut range_ok = true;
    let mut center_err: f64 = 0.0;
    let grid = make_grid(1, 4096, 40.0)?;
    for r in [1.0, 2.0, 4.0, 8.0] {
        let spec = CutoffSpec { center: grid.origin(), radius: r };
        let phi = cutoff_phi(&grid, spec)?;
        center_err = center_err.max((phi.values()[grid.origin()] - e13).abs());
        for i in 0..grid.len() {
            let d = grid.position(i)[0].abs();
            let v = phi.values()[i];
            if d <= r && !(1.0 - 1e-12..2.0).contains(&v) {
                range_ok = false;
            }
            if d >= 2.0 * r && v != 0.0 {
                range_ok = false;
            }
        }
        let w = CutoffWeights::new(&grid, spec)?;
        grad_c.push(w.max_grad_norm() * r);
        hess_c.push(w.max_hess_norm() * r * r);
    }
    out.push(check("cutoff_center_value", center_err <= 1e-12, format!("err {center_err:.2e}")));
    out.push(check("cutoff_range_and_support", range_ok, String::new()));
    for (name, cs) in [("cutoff_gradient_constant", &grad_c), ("cutoff_hessian_constant", &hess_c)] {
        let hi = cs.iter().cloned().fold(0.0, f64::max);
        let lo = cs.iter().cloned().fold(f64::INFINITY, f64::min);
        out.push(check(name, hi / lo <= 1.05, format!("fitted {hi:.4} spread {:.4}", hi / lo)));
    }
    let grid = make_grid(1, 256, 32.0)?;
    let one = ScalarField::constant(grid, 1.0);
    let v = uloc_norm(&one, UlocNormParams::new(&grid, 1.0, 1.0))?;
    out.push(check("uloc_unit_ball", (v - 2.0).abs() <= 1e-12, format!("value {v}")));
    let g2 = make_grid(2, 64, 16.0)?;
    let (a, b) = (random_field(g2, 2), random_field(g2, 3));
    let prm = UlocNormParams::new(&g2, 2.0, 1.0);
    let na = uloc_norm(&a, prm)?;
    let nb = uloc_norm(&b, prm)?;
    let nab = uloc_norm(&a.zip_map(&b, |x, y| x + y)?, prm)?;
    let n3 = uloc_norm(&a.scaled(-3.0), prm)?;
    out.push(check(
        "uloc_is_norm",
        nab <= na + nb + 1e-10 && (n3 - 3.0 * na).abs() <= 1e-10 * na,
        String::new(),
    ));
    let lp = lp_norm(&a, 3.0)?;
    let bound = lp_norm(&a, f64::INFINITY)? * 16f64.powf(2.0 / 3.0);
    out.push(check("lp_below_linf_volume", lp <= bound, format!("{lp:.4} <= {bound:.4}")));
    Ok(out)
}

fn dyadic_suite() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut worst: f64 = 0.0;
    for (d, n, l) in [(1, 256, 40.0), (2, 64, 10.0)] {
        let grid = make_grid(d, n, l)?;
        let cfg = DyadicConfig::for_grid(&grid);
        let f = random_field(grid, 7);
        let mut acc = low_freq(&f, cfg.j_min);
        for j in cfg.blocks() {
            acc = acc.zip_map(&dyadic_block(&f, j), |x, y| x + y)?;
        }
        worst = worst.max(max_diff(&acc, &f));
    }
    out.push(check("partition_of_unity", worst <= 1e-10, format!("err {worst:.2e}")));
    let grid = make_grid(2, 64, 16.0)?;
    let cfg = DyadicConfig::for_grid(&grid);
    let mut consts = Vec::new();
    for seed in 0..4 {
        let f = random_field(grid, 100 + seed);
        let mut c: f64 = 0.0;
        for j in 0..=cfg.j_max {
            c = c.max(generalized_young_check(&f, 2.0, j)?);
        }
        consts.push(c);
    }
    let hi = consts.iter().cloned().fold(0.0, f64::max);
    let lo = consts.iter().cloned().fold(f64::INFINITY, f64::min);
    out.push(check("young_constant_spread", hi / lo <= 2.0, format!("fitted {hi:.4} spread {:.3}", hi / lo)));
    Ok(out)
}

fn bump(grid: Grid, amp: f64) -> Result<State> {
    let n = ScalarField::from_fn(grid, |x| amp * (-(x[0] * x[0] + x[1] * x[1] + x[2] * x[2]) / 4.0).exp());
    State::new(0.0, n.clone(), n.scaled(0.5))
}

fn solver_suite() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let grid = make_grid(1, 256, 40.0)?;
    let heat = Params::new(0.0, 1.0, 0.0, 0.0)?;
    let s0 = bump(grid, 1.0)?;
    let cfg = RunConfig { dt: 0.01, t_end: 0.1, monitor_every: 0.1, ..RunConfig::default() };
    let r = run(&s0, &heat, &cfg, &mut [])?;
    let exact = heat_propagate(&s0.n, 0.1, 1.0, Damping::None)?;
    let e = max_diff(&r.final_state.n, &exact) / exact.max_abs();
    out.push(check("heat_flow", e <= 1e-9, format!("rel err {e:.2e}")));
    let grid = make_grid(2, 64, 16.0)?;
    let p = Params::new(1.0, 1.0, 1.0, 1.0)?;
    let s0 = bump(grid, 2.0)?;
    let cfg = RunConfig { dt: 0.01, t_end: 0.5, monitor_every: 0.05, ..RunConfig::default() };
    let mut ledger = MassLedger::default();
    let r = run(&s0, &p, &cfg, &mut [&mut ledger])?;
    out.push(check("mass_ledger", ledger.worst_relative <= 1e-10, format!("{:.2e}", ledger.worst_relative)));
    let min_n = r.trace.iter().map(|s| s.min_n).fold(f64::INFINITY, f64::min);
    out.push(check("nonnegativity", min_n >= -1e-8, format!("min n {min_n:.2e}")));
    out.push(check("determinism", determinism_check(&s0, &p, &cfg)?, String::new()));
    Ok(out)
}

fn monitors_suite() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut ok = true;
    for k in [3usize, 4, 5] {
        let r = mu_zero_estimate(k, 3, &Params::new(1.0, 1.0, 1.0, 1.0)?)?;
        for (name, v) in r.conditions(1.0) {
            let holds = if name.starts_with("damping_j") { v <= 0.0 } else { v < 0.0 };
            ok &= holds;
        }
        let b = b_coefficients(k, 1.0, r.c0);
        for j in 2..=k {
            ok &= (b[j - 1] / b[j] - (k as f64).powi(-2)).abs() <= 1e-12;
        }
    }
    out.push(check("threshold_conditions", ok, "k = 3, 4, 5".into()));
    Ok(out)
}

pub fn run_suite(name: &str) -> Result<Vec<Check>> {
    match name {
        "fields" => fields_suite(),
        "norms" => norms_suite(),
        "dyadic" => dyadic_suite(),
        "solver" => solver_suite(),
        "monitors" => monitors_suite(),
        "all" => {
            let mut all = Vec::new();
            for s in SUITES {
                for mut c in run_suite(s)? {
                    c.name = format!("{s}.{}", c.name);
                    all.push(c);
                }
            }
            Ok(all)
        }
        other => Err(KslbError::Config(format!(
            "unknown suite {other:?}; expected one of {} or all",
            SUITES.join(", ")
        ))),
    }
}

pub fn cmd_check(name: &str) -> Result<ExitCode> {
    let checks = run_suite(name)?;
    let mut code = ExitCode::Ok;
    for c in &checks {
        say!("{} {} {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
        if !c.pass {
            code = ExitCode::Invariant;
        }
    }
    Ok(code)
}
