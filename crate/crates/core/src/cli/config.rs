//! Flat `key=value` experiment configuration with dotted sections.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{KslbError, Result};
use crate::fields::{forward_unchecked, from_spectral, make_grid, Grid, ScalarField, MAX_DIM};
use crate::monitors::{default_centers, mu_zero_estimate, MomentConfig};
use crate::solver::{approx_initial, Params, RunConfig, State};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    GaussianBump,
    TwoBumps,
    Constant,
    RandomSmooth,
}

impl Preset {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian_bump" => Ok(Self::GaussianBump),
            "two_bumps" => Ok(Self::TwoBumps),
            "constant" => Ok(Self::Constant),
            "random_smooth" => Ok(Self::RandomSmooth),
            other => Err(KslbError::Config(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitSpec {
    pub preset: Preset,
    pub amplitude: f64,
    /// Gaussian width; `None` means `L/16`.
    pub width: Option<f64>,
    /// Peak of `c0` relative to the profile of `n0`.
    pub c_amplitude: f64,
    /// Truncation radius of the approximation scheme; `None` leaves the data untruncated.
    pub m: Option<f64>,
    pub seed: u64,
}

/// A damping value, possibly deferred to the assembled threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MuValue {
    Value(f64),
    /// `mu_zero_estimate` at the configured `k` and dimension.
    Threshold,
}

fn parse_mu(s: &str) -> Result<MuValue> {
    if s == "mu0" {
        Ok(MuValue::Threshold)
    } else {
        Ok(MuValue::Value(parse_f64("params.mu", s)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Mu,
    Chi,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub param: SweepParam,
    /// Raw values; `mu0` is allowed for the damping sweep.
    pub values: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub d: usize,
    pub n_axis: usize,
    pub box_len: f64,
    pub chi: f64,
    pub tau: f64,
    pub lambda: f64,
    pub mu: MuValue,
    pub init: InitSpec,
    pub run: RunConfig,
    pub k: usize,
    pub radius: f64,
    /// Explicit center positions; empty means the default policy.
    pub centers: Vec<[f64; MAX_DIM]>,
    pub out_dir: PathBuf,
    pub sweep: Option<SweepSpec>,
    pub m_values: Vec<f64>,
    pub calibration: BTreeMap<String, f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            d: 1,
            n_axis: 256,
            box_len: 40.0,
            chi: 1.0,
            tau: 1.0,
            lambda: 1.0,
            mu: MuValue::Value(1.0),
            init: InitSpec {
                preset: Preset::GaussianBump,
                amplitude: 1.0,
                width: None,
                c_amplitude: 0.5,
                m: None,
                seed: 0,
            },
            run: RunConfig::default(),
            k: 3,
            radius: 2.0,
            centers: Vec::new(),
            out_dir: PathBuf::from("out"),
            sweep: None,
            m_values: Vec::new(),
            calibration: BTreeMap::new(),
        }
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse::<f64>()
        .map_err(|_| KslbError::Config(format!("{key}: expected a number, got {v:?}")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse::<usize>()
        .map_err(|_| KslbError::Config(format!("{key}: expected a nonnegative integer, got {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(KslbError::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn split_list(v: &str) -> Vec<&str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

impl ExperimentConfig {
    /// Parses `key=value` lines; `#` starts a comment, blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut sweep_param = None;
        let mut sweep_values = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                KslbError::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1))
            })?;
            let (key, v) = (key.trim(), value.trim());
            match key {
                "grid.d" => cfg.d = parse_usize(key, v)?,
                "grid.n_axis" => cfg.n_axis = parse_usize(key, v)?,
                "grid.box_len" => cfg.box_len = parse_f64(key, v)?,
                "params.chi" => cfg.chi = parse_f64(key, v)?,
                "params.tau" => cfg.tau = parse_f64(key, v)?,
                "params.lambda" => cfg.lambda = parse_f64(key, v)?,
                "params.mu" => cfg.mu = parse_mu(v)?,
                "init.preset" => cfg.init.preset = Preset::parse(v)?,
                "init.amplitude" => cfg.init.amplitude = parse_f64(key, v)?,
                "init.width" => cfg.init.width = Some(parse_f64(key, v)?),
                "init.c_amplitude" => cfg.init.c_amplitude = parse_f64(key, v)?,
                "init.m" => cfg.init.m = Some(parse_f64(key, v)?),
                "init.seed" => cfg.init.seed = v.parse().map_err(|_| KslbError::Config(format!("{key}: bad seed {v:?}")))?,
                "run.dt" => cfg.run.dt = parse_f64(key, v)?,
                "run.t_end" => cfg.run.t_end = parse_f64(key, v)?,
                "run.monitor_every" => cfg.run.monitor_every = parse_f64(key, v)?,
                "run.blowup_cap" => cfg.run.blowup_cap = Some(parse_f64(key, v)?),
                "run.dealias" => cfg.run.dealias = parse_bool(key, v)?,
                "run.adaptive" => cfg.run.adaptive = parse_bool(key, v)?,
                "monitor.k" => cfg.k = parse_usize(key, v)?,
                "monitor.radius" => cfg.radius = parse_f64(key, v)?,
                "monitor.centers" => {
                    cfg.centers.clear();
                    if v != "auto" {
                        for pt in v.split(';').map(str::trim).filter(|s| !s.is_empty()) {
                            let mut x = [0.0; MAX_DIM];
                            let coords = split_list(pt);
                            if coords.is_empty() || coords.len() > MAX_DIM {
                                return Err(KslbError::Config(format!("{key}: bad point {pt:?}")));
                            }
                            for (a, c) in coords.iter().enumerate() {
                                x[a] = parse_f64(key, c)?;
                            }
                            cfg.centers.push(x);
                        }
                    }
                }
                "output.dir" => cfg.out_dir = PathBuf::from(v),
                "sweep.param" => {
                    sweep_param = Some(match v {
                        "mu" => SweepParam::Mu,
                        "chi" => SweepParam::Chi,
                        _ => return Err(KslbError::Config(format!("{key}: expected mu or chi, got {v:?}"))),
                    })
                }
                "sweep.values" => sweep_values = Some(split_list(v).into_iter().map(String::from).collect()),
                "mconv.m_values" => {
                    cfg.m_values = split_list(v)
                        .into_iter()
                        .map(|s| parse_f64(key, s))
                        .collect::<Result<_>>()?
                }
                _ => {
                    if let Some(name) = key.strip_prefix("calibration.") {
                        cfg.calibration.insert(name.to_string(), parse_f64(key, v)?);
                    } else {
                        return Err(KslbError::Config(format!("unknown key {key:?}")));
                    }
                }
            }
        }
        if sweep_param.is_some() || sweep_values.is_some() {
            cfg.sweep = Some(SweepSpec {
                param: sweep_param.unwrap_or(SweepParam::Mu),
                values: sweep_values.unwrap_or_default(),
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn grid(&self) -> Result<Grid> {
        make_grid(self.d, self.n_axis, self.box_len)
    }

    /// Checks everything that can be checked without running.
    pub fn validate(&self) -> Result<()> {
        let grid = self.grid()?;
        self.params()?;
        self.run.validate()?;
        if !(self.init.amplitude >= 0.0) || !self.init.c_amplitude.is_finite() {
            return Err(KslbError::Config("init amplitudes must be finite, density amplitude >= 0".into()));
        }
        if let Some(w) = self.init.width {
            if !(w > 0.0) {
                return Err(KslbError::Config(format!("init.width must be > 0, got {w}")));
            }
        }
        if let Some(m) = self.init.m {
            if !(m > 0.0 && 4.0 * m < self.box_len) {
                return Err(KslbError::Config(format!("init.m must satisfy 0 < 4M < L, got {m}")));
            }
        }
        self.moment_config(&State::zeros(grid))?.validate(&grid)?;
        Ok(())
    }

    /// Parameters with the damping resolved.
    pub fn params(&self) -> Result<Params> {
        self.params_with(self.chi, self.mu)
    }

    pub fn params_with(&self, chi: f64, mu: MuValue) -> Result<Params> {
        let mu = match mu {
            MuValue::Value(v) => v,
            MuValue::Threshold => {
                let probe = Params::new(chi, self.tau, self.lambda, 0.0)?;
                mu_zero_estimate(self.k, self.d, &probe)?.mu0
            }
        };
        Params::new(chi, self.tau, self.lambda, mu)
    }

    pub fn mu_zero(&self) -> Result<f64> {
        let probe = Params::new(self.chi, self.tau, self.lambda, 0.0)?;
        Ok(mu_zero_estimate(self.k, self.d, &probe)?.mu0)
    }

    /// Initial state from the preset, truncated with `psi(x/M)` when `m` is given.
    pub fn initial_state_at(&self, m: Option<f64>) -> Result<State> {
        let grid = self.grid()?;
        let w = self.init.width.unwrap_or(self.box_len / 16.0);
        let a = self.init.amplitude;
        let ca = self.init.c_amplitude;
        let l = self.box_len;
        let gauss = move |x: &[f64; MAX_DIM], shift: f64| {
            let r2 = (x[0] - shift).powi(2) + x[1] * x[1] + x[2] * x[2];
            (-r2 / (w * w)).exp()
        };
        type Profile = Box<dyn Fn(&[f64; MAX_DIM]) -> f64>;
        let (n0, c0): (Profile, Profile) = match self.init.preset {
            Preset::GaussianBump => (
                Box::new(move |x| a * gauss(x, 0.0)),
                Box::new(move |x| ca * gauss(x, 0.0)),
            ),
            Preset::TwoBumps => {
                let two = move |x: &[f64; MAX_DIM]| gauss(x, -l / 8.0) + gauss(x, l / 8.0);
                (Box::new(move |x| a * two(x)), Box::new(move |x| ca * two(x)))
            }
            Preset::Constant => (Box::new(move |_| a), Box::new(move |_| ca)),
            Preset::RandomSmooth => {
                let r1 = random_profile(grid, self.init.seed, w);
                let r2 = random_profile(grid, self.init.seed.wrapping_add(1), w);
                (
                    Box::new(move |x| a * (1.0 + 0.5 * r1.values()[nearest(&grid, x)])),
                    Box::new(move |x| ca * (1.0 + 0.5 * r2.values()[nearest(&grid, x)])),
                )
            }
        };
        match m {
            Some(m) => approx_initial(n0, c0, m, &grid),
            None => State::new(0.0, ScalarField::from_fn(grid, n0), ScalarField::from_fn(grid, c0)),
        }
    }

    pub fn initial_state(&self) -> Result<State> {
        self.initial_state_at(self.init.m)
    }

    pub fn moment_config(&self, initial: &State) -> Result<MomentConfig> {
        let grid = initial.grid();
        let centers = if self.centers.is_empty() {
            default_centers(&initial.n)
        } else {
            self.centers.iter().map(|x| nearest(grid, x)).collect()
        };
        Ok(MomentConfig {
            k: self.k,
            radius: self.radius,
            centers,
            c0: None,
        })
    }
}

/// Flat index of the grid point closest to `x`.
fn nearest(grid: &Grid, x: &[f64; MAX_DIM]) -> usize {
    let h = grid.spacing();
    let n = grid.n_axis() as i64;
    let mut idx = [0usize; MAX_DIM];
    for a in 0..grid.dim() {
        let i = ((x[a] + grid.box_len() / 2.0) / h).round() as i64;
        idx[a] = i.rem_euclid(n) as usize;
    }
    grid.flat_index(&idx)
}

/// Seeded smooth field in `[-1, 1]`: white noise filtered at wavenumbers `~ 1/w`.
fn random_profile(grid: Grid, seed: u64, w: f64) -> ScalarField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = ScalarField::new(grid, (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("length matches grid");
    let filtered = forward_unchecked(&raw).apply_symbol(|xi, _| {
        let r2: f64 = xi.iter().map(|v| v * v).sum();
        num_complex::Complex64::new((-r2 * w * w / 4.0).exp(), 0.0)
    });
    let f = from_spectral(&filtered);
    let m = f.max_abs();
    if m > 0.0 {
        f.scaled(1.0 / m)
    } else {
        f
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = ExperimentConfig::parse("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        let c = ExperimentConfig::parse(
            "# comment\ngrid.d = 2\ngrid.n_axis=64\ngrid.box_len=16\nparams.mu=mu0\nmonitor.k=4\n\
             sweep.values=0.1, 1,mu0\ncalibration.density_moment@0=2.5\nmonitor.centers=0,0;1,1\n",
        )
        .unwrap();
        assert_eq!(c.d, 2);
        assert_eq!(c.mu, MuValue::Threshold);
        assert_eq!(c.sweep.as_ref().unwrap().values, vec!["0.1", "1", "mu0"]);
        assert_eq!(c.calibration["density_moment@0"], 2.5);
        assert_eq!(c.centers.len(), 2);
        let p = c.params().unwrap();
        assert_eq!(p.mu, c.mu_zero().unwrap());
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "run.dt=0",
            "run.dt=-1",
            "grid.n_axis=100",
            "nonsense",
            "grid.q=1",
            "init.preset=square",
            "params.tau=0",
            "monitor.k=2",
            "init.m=100",
        ] {
            assert!(ExperimentConfig::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn presets_are_nonnegative_and_seeded() {
        for preset in ["gaussian_bump", "two_bumps", "constant", "random_smooth"] {
            let c = ExperimentConfig::parse(&format!("grid.d=2\ngrid.n_axis=32\ngrid.box_len=16\ninit.preset={preset}"))
                .unwrap();
            let s = c.initial_state().unwrap();
            assert!(s.n.min() >= 0.0);
            assert!(s.n.max() > 0.0);
        }
        let mk = |seed: u64| {
            let c = ExperimentConfig::parse(&format!("init.preset=random_smooth\ninit.seed={seed}")).unwrap();
            c.initial_state().unwrap()
        };
        assert_eq!(mk(3).n.values(), mk(3).n.values());
        assert_ne!(mk(3).n.values(), mk(4).n.values());
    }
}
