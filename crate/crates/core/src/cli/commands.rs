//! Experiment drivers behind the subcommands.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use super::config::{ExperimentConfig, MuValue, SweepParam};
use super::ExitCode;
use crate::checkpoint::Checkpoint;
use crate::error::{KslbError, Result};
use crate::monitors::{
    dyadic_ode_residuals, fmt_f64, log_trend_slope, prop22_check, prop22_scale, write_residuals_csv,
    write_trace_csv, z_bound, CalibrationMode, FunctionalMonitor, MassLedger, ResidualReport,
    ZMonitor, MAX_SAMPLE_SPACING,
};
use crate::solver::{run, RunStatus, NONNEG_TOL};

/// Relative tolerance of the per-step mass bookkeeping.
pub const MASS_TOL: f64 = 1e-10;
/// Relative tolerance on the energy inequalities.
pub const ENERGY_TOL: f64 = 1e-6;
/// Tolerance on the pointwise `z` residual and on `sup z`.
pub const Z_TOL: f64 = 1e-3;
/// Largest log-trend slope still counted as bounded.
pub const TREND_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Calibrate,
    Assert,
}

/// What a single run produced, beyond its files.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub final_t: f64,
    pub sup_linf_n: f64,
    pub sup_w1inf_c: f64,
    /// Log-trend slope of `‖n‖∞ + ‖c‖_{W1,∞}` over the second half of the run.
    pub trend_slope: f64,
    /// `(name, passed, detail)` for each invariant.
    pub verdicts: Vec<(String, bool, String)>,
}

impl RunOutcome {
    pub fn invariants_hold(&self) -> bool {
        self.verdicts.iter().all(|v| v.1)
    }

    pub fn exit_code(&self, mode: Mode) -> ExitCode {
        match self.status {
            RunStatus::BlowUpSuspected(_) => ExitCode::BlowUp,
            RunStatus::NumericalFailure(_) => ExitCode::NumericalFailure,
            RunStatus::Completed if mode == Mode::Assert && !self.invariants_hold() => ExitCode::Invariant,
            RunStatus::Completed => ExitCode::Ok,
        }
    }

    pub fn verdict(&self) -> &'static str {
        match self.status {
            RunStatus::BlowUpSuspected(_) => "blowup_suspected",
            RunStatus::NumericalFailure(_) => "numerical_failure",
            RunStatus::Completed if self.trend_slope <= TREND_TOL => "bounded",
            RunStatus::Completed => "growing",
        }
    }
}

pub fn status_name(s: RunStatus) -> &'static str {
    match s {
        RunStatus::Completed => "completed",
        RunStatus::BlowUpSuspected(_) => "blowup_suspected",
        RunStatus::NumericalFailure(_) => "numerical_failure",
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn moment_tolerance(r: &ResidualReport) -> f64 {
    1e-9 * r.margins.iter().fold(1.0_f64, |m, v| m.max(v.abs()))
}

/// Runs one experiment and writes `trace.csv`, `residuals.csv`, `final.kslb`,
/// `summary.txt` (and `calibration.cfg` when calibrating) into `out`.
pub fn execute_run(cfg: &ExperimentConfig, out: &Path, mode: Mode) -> Result<RunOutcome> {
    let params = cfg.params()?;
    let initial = cfg.initial_state()?;
    let grid = *initial.grid();
    let mcfg = cfg.moment_config(&initial)?;
    let mut functionals = FunctionalMonitor::new(&grid, &params, &mcfg)?;
    let mut ledger = MassLedger::default();
    let mut zmon = ZMonitor::new(&params, grid.dim()).ok();
    let result = {
        let mut monitors: Vec<&mut dyn crate::solver::Monitor> = vec![&mut functionals, &mut ledger];
        if let Some(z) = zmon.as_mut() {
            monitors.push(z);
        }
        run(&initial, &params, &cfg.run, &mut monitors)?
    };
    fs::create_dir_all(out)?;

    let samples = &functionals.samples;
    let mut verdicts = Vec::new();
    verdicts.push((
        "mass_ledger".to_string(),
        ledger.worst_relative <= MASS_TOL,
        format!("max relative defect {:.3e}", ledger.worst_relative),
    ));
    let min_c0 = initial.c.min();
    let t0 = initial.t;
    let mut nonneg = true;
    let mut worst_n = f64::INFINITY;
    for s in &result.trace {
        worst_n = worst_n.min(s.min_n);
        let c_floor = (-(s.t - t0) / params.tau).exp() * min_c0;
        if s.min_n < -NONNEG_TOL || s.min_c < c_floor - NONNEG_TOL {
            nonneg = false;
        }
    }
    verdicts.push(("nonnegativity".into(), nonneg, format!("min n {worst_n:.3e}")));

    let mut reports = prop22_check(&result.trace, &params);
    let mut failed_energy = Vec::new();
    let mut judged = Vec::new();
    for (ri, rep) in reports.iter().enumerate() {
        // The printed form without the damping factor is reported but not judged. The L² bounds
        // absorb μ∫‖n‖² into the right-hand side, which needs μ ≥ 1.
        if rep.name == "l1_printed" || (params.mu < 1.0 && rep.name != "l1_gronwall") {
            continue;
        }
        judged.push(rep.name.clone());
        let bad = (0..rep.margins.len()).any(|i| {
            let scale = prop22_scale(&result.trace, &params, i)[ri].max(f64::MIN_POSITIVE);
            rep.margins[i] > ENERGY_TOL * scale
        });
        if bad {
            failed_energy.push(rep.name.clone());
        }
    }
    let detail = if failed_energy.is_empty() {
        format!("checked {}", judged.join(", "))
    } else {
        format!("violated {}", failed_energy.join(", "))
    };
    verdicts.push(("energy".into(), failed_energy.is_empty(), detail));

    let dense = samples.len() >= 3
        && samples
            .windows(2)
            .all(|w| w[1].base.t - w[0].base.t <= MAX_SAMPLE_SPACING * (1.0 + 1e-9));
    let mut calibration = None;
    if dense {
        let cmode = match mode {
            Mode::Calibrate => CalibrationMode::Calibrate,
            Mode::Assert => CalibrationMode::Assert(cfg.calibration.clone()),
        };
        let moments = dyadic_ode_residuals(samples, cfg.k, cfg.radius, grid.dim(), &params, &cmode)?;
        let ok = moments.iter().all(|r| r.max_margin() <= moment_tolerance(r));
        verdicts.push(("moment_inequalities".into(), ok, format!("{} reports", moments.len())));
        if mode == Mode::Calibrate {
            calibration = Some(moments.clone());
        }
        reports.extend(moments);
    } else {
        verdicts.push((
            "moment_inequalities".into(),
            true,
            format!("skipped: needs three or more samples spaced at most {MAX_SAMPLE_SPACING}"),
        ));
    }
    if let Some(z) = &zmon {
        let bound = z.initial_sup_z.unwrap_or(0.0).max(z_bound(&params, grid.dim())) + Z_TOL;
        let ok = z.error.is_none() && z.max_residual <= Z_TOL && z.sup_z <= bound;
        verdicts.push((
            "z_comparison".into(),
            ok,
            format!("max residual {:.3e}, sup z {:.6e}", z.max_residual, z.sup_z),
        ));
    }

    write_trace_csv(samples, create(&out.join("trace.csv"))?)?;
    write_residuals_csv(&reports, create(&out.join("residuals.csv"))?)?;
    let fs_ = &result.final_state;
    Checkpoint::new(fs_.t, fs_.n.clone(), fs_.c.clone())?.save(out.join("final.kslb"))?;
    if let Some(cal) = calibration {
        let mut w = create(&out.join("calibration.cfg"))?;
        for r in cal {
            writeln!(w, "calibration.{}={}", r.name, fmt_f64(r.calibration.unwrap_or(0.0)))?;
        }
    }

    let times: Vec<f64> = result.trace.iter().map(|s| s.t).collect();
    let q: Vec<f64> = result.trace.iter().map(|s| s.blowup_quantity()).collect();
    let final_t = result.final_state.t;
    let outcome = RunOutcome {
        status: result.status,
        final_t,
        sup_linf_n: result.trace.iter().map(|s| s.linf_n).fold(0.0, f64::max),
        sup_w1inf_c: result.trace.iter().map(|s| s.w1inf_c()).fold(0.0, f64::max),
        trend_slope: log_trend_slope(&times, &q, t0 + 0.5 * (final_t - t0)),
        verdicts,
    };
    let mut summary = String::new();
    writeln!(summary, "status={}", status_name(outcome.status)).ok();
    writeln!(summary, "t_final={}", fmt_f64(final_t)).ok();
    writeln!(summary, "steps={}", result.steps).ok();
    writeln!(summary, "mu={}", fmt_f64(params.mu)).ok();
    writeln!(summary, "sup_linf_n={}", fmt_f64(outcome.sup_linf_n)).ok();
    writeln!(summary, "sup_w1inf_c={}", fmt_f64(outcome.sup_w1inf_c)).ok();
    writeln!(summary, "trend_slope={}", fmt_f64(outcome.trend_slope)).ok();
    writeln!(summary, "verdict={}", outcome.verdict()).ok();
    for (name, ok, detail) in &outcome.verdicts {
        writeln!(summary, "check.{name}={} ({detail})", if *ok { "pass" } else { "fail" }).ok();
    }
    fs::write(out.join("summary.txt"), summary)?;
    Ok(outcome)
}

pub fn cmd_run(cfg: &ExperimentConfig, mode: Mode) -> Result<ExitCode> {
    let outcome = execute_run(cfg, &cfg.out_dir, mode)?;
    say!(
        "status={} t={} sup_linf_n={:.6e} verdict={}",
        status_name(outcome.status),
        outcome.final_t,
        outcome.sup_linf_n,
        outcome.verdict()
    );
    for (name, ok, detail) in &outcome.verdicts {
        say!("{} {name}: {detail}", if *ok { "PASS" } else { "FAIL" });
    }
    Ok(outcome.exit_code(mode))
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| KslbError::Config(format!("cannot start {workers} workers: {e}")))
}

pub const SWEEP_HEADER: &str = "index,param,value,status,sup_linf_n,trend_slope,verdict,mu0_reference";

/// One run per sweep value, each in its own `row_NNN` directory, summarized in `sweep.csv`.
pub fn cmd_sweep(cfg: &ExperimentConfig, mode: Mode, workers: usize) -> Result<ExitCode> {
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| KslbError::Config("sweep needs sweep.param and sweep.values".into()))?;
    if sweep.values.is_empty() {
        return Err(KslbError::Config("sweep.values is empty".into()));
    }
    let mut rows_cfg = Vec::new();
    for v in &sweep.values {
        let mut c = cfg.clone();
        match sweep.param {
            SweepParam::Mu => {
                c.mu = if v == "mu0" {
                    MuValue::Threshold
                } else {
                    MuValue::Value(v.parse().map_err(|_| KslbError::Config(format!("bad sweep value {v:?}")))?)
                }
            }
            SweepParam::Chi => {
                c.chi = v.parse().map_err(|_| KslbError::Config(format!("bad sweep value {v:?}")))?
            }
        }
        c.validate()?;
        rows_cfg.push(c);
    }
    let mu0 = cfg.mu_zero()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let pool = thread_pool(workers)?;
    let outcomes: Vec<Result<RunOutcome>> = pool.install(|| {
        rows_cfg
            .par_iter()
            .enumerate()
            .map(|(i, c)| execute_run(c, &cfg.out_dir.join(format!("row_{i:03}")), mode))
            .collect()
    });
    let param = match sweep.param {
        SweepParam::Mu => "mu",
        SweepParam::Chi => "chi",
    };
    let mut w = create(&cfg.out_dir.join("sweep.csv"))?;
    writeln!(w, "{SWEEP_HEADER}")?;
    let mut code = ExitCode::Ok;
    for (i, (o, c)) in outcomes.iter().zip(&rows_cfg).enumerate() {
        let value = match sweep.param {
            SweepParam::Mu => c.params().map(|p| p.mu).unwrap_or(f64::NAN),
            SweepParam::Chi => c.chi,
        };
        match o {
            Ok(o) => {
                writeln!(
                    w,
                    "{i},{param},{},{},{},{},{},{}",
                    fmt_f64(value),
                    status_name(o.status),
                    fmt_f64(o.sup_linf_n),
                    fmt_f64(o.trend_slope),
                    o.verdict(),
                    fmt_f64(mu0)
                )?;
                say!("row {i}: {param}={value:e} {}", o.verdict());
                if mode == Mode::Assert && !o.invariants_hold() {
                    code = ExitCode::Invariant;
                }
            }
            Err(e) => {
                let msg = e.to_string().replace([',', '\n'], ";");
                writeln!(w, "{i},{param},{},error,,,{msg},{}", fmt_f64(value), fmt_f64(mu0))?;
                say!("row {i}: {param}={value:e} error: {e}");
                code = ExitCode::NumericalFailure;
            }
        }
    }
    Ok(code)
}

/// Runs the truncated data for each `M` and compares final states on `B_{M_min}`.
pub fn cmd_mconv(cfg: &ExperimentConfig, mode: Mode, workers: usize) -> Result<ExitCode> {
    let mut ms = cfg.m_values.clone();
    if ms.is_empty() {
        return Err(KslbError::Config("mconv needs mconv.m_values".into()));
    }
    ms.sort_by(f64::total_cmp);
    for &m in &ms {
        if !(m > 0.0 && 4.0 * m < cfg.box_len) {
            return Err(KslbError::Config(format!("M = {m} does not fit the box (need 0 < 4M < L)")));
        }
    }
    fs::create_dir_all(&cfg.out_dir)?;
    let pool = thread_pool(workers)?;
    let results: Vec<Result<_>> = pool.install(|| {
        ms.par_iter()
            .map(|&m| {
                let mut c = cfg.clone();
                c.init.m = Some(m);
                let params = c.params()?;
                let initial = c.initial_state()?;
                run(&initial, &params, &c.run, &mut [])
            })
            .collect()
    });
    let mut finals = Vec::new();
    let mut code = ExitCode::Ok;
    for (m, r) in ms.iter().zip(results) {
        let r = r?;
        match r.status {
            RunStatus::Completed => {}
            RunStatus::BlowUpSuspected(_) => code = ExitCode::BlowUp,
            RunStatus::NumericalFailure(_) => code = ExitCode::NumericalFailure,
        }
        say!("M={m}: {}", status_name(r.status));
        finals.push(r.final_state);
    }
    let grid = *finals[0].grid();
    let origin = grid.position(grid.origin());
    let region: Vec<usize> = (0..grid.len())
        .filter(|&i| grid.wrapped_distance(&grid.position(i), &origin) <= ms[0])
        .collect();
    let mut w = create(&cfg.out_dir.join("mconv.csv"))?;
    writeln!(w, "m_a,m_b,sup_diff_n,sup_diff_c")?;
    let mut last = f64::INFINITY;
    let mut decreasing = true;
    for i in 1..finals.len() {
        let (a, b) = (&finals[i - 1], &finals[i]);
        let dn = region.iter().map(|&j| (a.n.values()[j] - b.n.values()[j]).abs()).fold(0.0, f64::max);
        let dc = region.iter().map(|&j| (a.c.values()[j] - b.c.values()[j]).abs()).fold(0.0, f64::max);
        writeln!(w, "{},{},{},{}", fmt_f64(ms[i - 1]), fmt_f64(ms[i]), fmt_f64(dn), fmt_f64(dc))?;
        say!("M={} vs M={}: sup|dn|={dn:.3e} sup|dc|={dc:.3e}", ms[i - 1], ms[i]);
        let diff = dn + dc;
        if diff > last * (1.0 + 1e-9) + 1e-14 {
            decreasing = false;
        }
        last = diff;
    }
    if finals.len() < 2 {
        say!("single M: nothing to compare");
    } else {
        say!("differences decreasing: {decreasing}");
    }
    if code == ExitCode::Ok && mode == Mode::Assert && !decreasing {
        code = ExitCode::Invariant;
    }
    Ok(code)
}

/// Rewrites `trace.csv` and `residuals.csv` in `dir` as long-format tables.
pub fn cmd_report(dir: &Path) -> Result<ExitCode> {
    let trace = dir.join("trace.csv");
    if !trace.exists() {
        return Err(KslbError::Config(format!("{} not found", trace.display())));
    }
    let mut lines = BufReader::new(File::open(&trace)?).lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    let cols: Vec<String> = header.split(',').map(String::from).collect();
    let mut w = create(&dir.join("trace_long.csv"))?;
    writeln!(w, "t,quantity,value")?;
    let mut rows = 0usize;
    for line in lines {
        let line = line?;
        let cells: Vec<&str> = line.split(',').collect();
        for (name, v) in cols.iter().zip(&cells).skip(1) {
            writeln!(w, "{},{name},{v}", cells[0])?;
        }
        rows += 1;
    }
    let res = dir.join("residuals.csv");
    if res.exists() {
        let mut w = create(&dir.join("residuals_long.csv"))?;
        writeln!(w, "t,name,quantity,value")?;
        for line in BufReader::new(File::open(&res)?).lines().skip(1) {
            let line = line?;
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() < 4 {
                continue;
            }
            writeln!(w, "{},{},margin,{}", cells[0], cells[1], cells[2])?;
            if !cells[3].is_empty() {
                writeln!(w, "{},{},calibration,{}", cells[0], cells[1], cells[3])?;
            }
        }
    }
    say!("rendered {rows} trace rows");
    Ok(ExitCode::Ok)
}
