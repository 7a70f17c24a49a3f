//! Run configuration: a strict TOML schema with defaults.
//!
//! ```toml
//! [grid]
//! dim = 1
//! points = 128
//! box_length = 20.0
//!
//! [sde]
//! alpha = 0.1
//! dt = 1e-3
//! ```
//!
//! Every other block is optional. Unknown keys are rejected.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use snls_core::dynamics::{NoiseKind, SdeParams};
use snls_core::exit::{Domain, DomainKind};
use snls_core::functionals::AnalysisConstants;
use snls_core::grid::{Field, Grid, GridSpec};
use snls_core::init::{random_bumps, sech};
use snls_core::noise::{NoiseOperator, NoiseProfile};
use snls_core::rng::trajectory_stream;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(String),
    #[error("invalid `{key}`: {reason}")]
    Invalid { key: &'static str, reason: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(key: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key, reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    pub sde: SdeConfig,
    #[serde(default = "default_domain")]
    pub domain: DomainKind,
    #[serde(default)]
    pub initial: InitialConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dim: usize,
    pub points: usize,
    pub box_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default = "default_profile")]
    pub profile: NoiseProfile,
    /// Real-valued noise; required for multiplicative forcing.
    #[serde(default)]
    pub real_valued: bool,
    /// Reject operators with `Σ (1+|k|²)^s φ(k)² > bound²`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothness: Option<SmoothnessTarget>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothnessTarget {
    pub s: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeConfig {
    #[serde(default = "one")]
    pub lambda: f64,
    #[serde(default = "one")]
    pub sigma: f64,
    pub alpha: f64,
    #[serde(default)]
    pub epsilon: f64,
    /// Sweep for `exit-mc`; strictly decreasing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_list: Option<Vec<f64>>,
    pub dt: f64,
    #[serde(default = "default_kind")]
    pub noise_kind: NoiseKind,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConfig {
    #[default]
    Zero,
    Sech { amplitude: f64, width: f64 },
    Gaussian { amplitude: f64, width: f64 },
    Bumps { count: usize, seed: u64 },
    Snapshot { path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    /// Horizon of `simulate`.
    #[serde(default = "one")]
    pub t_end: f64,
    #[serde(default = "default_t_list")]
    pub t_list: Vec<f64>,
    #[serde(default = "one_u64")]
    pub seed: u64,
    /// Fourier labels defining exit-point sectors.
    #[serde(default)]
    pub sectors: Vec<[i64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: String,
    /// Keep every n-th state in `simulate` (0: endpoints only).
    #[serde(default)]
    pub snapshot_stride: usize,
    #[serde(default = "one_usize")]
    pub scalar_stride: usize,
    /// Also write the Wiener path consumed by `simulate`.
    #[serde(default)]
    pub record_noise: bool,
}

fn one() -> f64 {
    1.0
}
fn one_u64() -> u64 {
    1
}
fn one_usize() -> usize {
    1
}
fn default_paths() -> usize {
    200
}
fn default_t_max() -> f64 {
    100.0
}
fn default_t_list() -> Vec<f64> {
    vec![1.0, 2.0, 4.0]
}
fn default_dir() -> String {
    "snls-out".into()
}
fn default_kind() -> NoiseKind {
    NoiseKind::Additive
}
fn default_domain() -> DomainKind {
    DomainKind::L2Ball { radius: 1.0 }
}
fn default_profile() -> NoiseProfile {
    NoiseProfile::GaussianCutoff { k0: 2.0, amplitude: 1.0 }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { profile: default_profile(), real_valued: false, smoothness: None }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            paths: default_paths(),
            t_max: default_t_max(),
            t_end: 1.0,
            t_list: default_t_list(),
            seed: 1,
            sectors: Vec::new(),
        }
    }
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: default_dir(), snapshot_stride: 0, scalar_stride: 1, record_noise: false }
    }
}

impl Default for RunConfig {
    /// The configuration used when none is given.
    fn default() -> Self {
        Self {
            grid: GridConfig { dim: 1, points: 128, box_length: 20.0 },
            noise: NoiseConfig::default(),
            sde: SdeConfig {
                lambda: 1.0,
                sigma: 1.0,
                alpha: 0.1,
                epsilon: 0.05,
                epsilon_list: None,
                dt: 1e-3,
                noise_kind: NoiseKind::Additive,
            },
            domain: default_domain(),
            initial: InitialConfig::Zero,
            experiment: ExperimentConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

/// Parses and validates a configuration.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text)
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable in TOML")
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        GridSpec::new(self.grid.dim, self.grid.points, self.grid.box_length)
            .map_err(|e| invalid("grid", e.to_string()))?;
        let s = &self.sde;
        if !(s.sigma * (self.grid.dim as f64) < 2.0) || !(s.sigma > 0.0) {
            return Err(invalid("sde.sigma", "sigma*dim must be < 2 (and sigma > 0)"));
        }
        if !(s.dt > 0.0) {
            return Err(invalid("sde.dt", "must be positive"));
        }
        if !(s.alpha >= 0.0) {
            return Err(invalid("sde.alpha", "must be nonnegative"));
        }
        if !(s.epsilon >= 0.0) {
            return Err(invalid("sde.epsilon", "must be nonnegative"));
        }
        if let Some(list) = &s.epsilon_list {
            if list.is_empty() || list.iter().any(|e| !(*e > 0.0)) || list.windows(2).any(|w| !(w[1] < w[0])) {
                return Err(invalid("sde.epsilon_list", "must be positive and strictly decreasing"));
            }
        }
        if s.noise_kind == NoiseKind::Multiplicative && !self.noise.real_valued {
            return Err(invalid("noise.real_valued", "multiplicative noise needs real-valued noise"));
        }
        match self.domain {
            DomainKind::L2Ball { radius } | DomainKind::H1Ball { radius } if !(radius > 0.0) => {
                return Err(invalid("domain.radius", "must be positive"));
            }
            DomainKind::HtildeSublevel { level } if !(level > 0.0) => {
                return Err(invalid("domain.level", "must be positive"));
            }
            _ => {}
        }
        let e = &self.experiment;
        if e.paths == 0 {
            return Err(invalid("experiment.paths", "must be at least 1"));
        }
        if !(e.t_max > 0.0) || !(e.t_end > 0.0) {
            return Err(invalid("experiment.t_max", "horizons must be positive"));
        }
        if e.t_list.is_empty() || e.t_list.iter().any(|t| !(*t > 0.0)) || e.t_list.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("experiment.t_list", "must be positive and increasing"));
        }
        Ok(())
    }

    pub fn build_grid(&self) -> snls_core::Result<Arc<Grid<f64>>> {
        Grid::build(self.grid.dim, self.grid.points, self.grid.box_length)
    }

    pub fn params(&self) -> SdeParams<f64> {
        let s = &self.sde;
        let p = SdeParams::deterministic(s.lambda, s.sigma, s.alpha, s.dt);
        if s.noise_kind == NoiseKind::None {
            p
        } else {
            p.with_noise(s.noise_kind, s.epsilon)
        }
    }

    pub fn noise_operator(&self, grid: &Arc<Grid<f64>>) -> snls_core::Result<NoiseOperator<f64>> {
        let op = NoiseOperator::new(grid, &self.noise.profile, self.noise.real_valued)?;
        match self.noise.smoothness {
            Some(t) => op.check_smoothness(t.s, t.bound),
            None => Ok(op),
        }
    }

    /// Only the `H̃` sublevel needs the (grid-dependent) constants.
    pub fn domain(&self, grid: &Arc<Grid<f64>>) -> snls_core::Result<Domain<f64>> {
        match self.domain {
            DomainKind::HtildeSublevel { .. } => {
                let consts = AnalysisConstants::for_grid(self.sde.sigma, grid)?;
                Domain::new(self.domain, Some(consts), self.sde.lambda)
            }
            kind => Domain::new(kind, None, self.sde.lambda),
        }
    }

    pub fn initial_field(&self, grid: &Arc<Grid<f64>>) -> snls_core::Result<Field<f64>> {
        Ok(match &self.initial {
            InitialConfig::Zero => Field::zeros(grid),
            InitialConfig::Sech { amplitude, width } => sech(grid, *amplitude, *width),
            InitialConfig::Gaussian { amplitude, width } => Field::gaussian(grid, *amplitude, *width),
            InitialConfig::Bumps { count, seed } => random_bumps(grid, *count, &mut trajectory_stream(*seed, 0)),
            InitialConfig::Snapshot { path } => {
                let file = std::fs::File::open(path)?;
                snls_core::snapshot::read_snapshot(std::io::BufReader::new(file), Some(grid))?
            }
        })
    }
}

/// `kind:value`, e.g. `l2_ball:1.0`, `h1_ball:2`, `htilde_sublevel:0.5`.
pub fn parse_domain(spec: &str) -> Result<DomainKind, ConfigError> {
    let (kind, value) = spec
        .split_once(':')
        .ok_or_else(|| invalid("domain", format!("expected kind:value, got `{spec}`")))?;
    let v: f64 = value
        .trim()
        .parse()
        .map_err(|_| invalid("domain", format!("`{value}` is not a number")))?;
    let kind = match kind.trim() {
        "l2_ball" => DomainKind::L2Ball { radius: v },
        "h1_ball" => DomainKind::H1Ball { radius: v },
        "htilde_sublevel" => DomainKind::HtildeSublevel { level: v },
        other => return Err(invalid("domain", format!("unknown kind `{other}`"))),
    };
    Ok(kind)
}

/// Comma-separated numbers.
pub fn parse_list(key: &'static str, spec: &str) -> Result<Vec<f64>, ConfigError> {
    spec.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| invalid(key, format!("`{t}` is not a number"))))
        .collect()
}

/// Comma-separated mode labels `jx` or `jx:jy`.
pub fn parse_sectors(spec: &str) -> Result<Vec<[i64; 2]>, ConfigError> {
    spec.split(',')
        .map(|item| {
            let mut parts = item.split(':').map(|t| t.trim().parse::<i64>());
            let bad = || invalid("sectors", format!("`{item}` is not a mode label"));
            let jx = parts.next().and_then(|r| r.ok()).ok_or_else(bad)?;
            let jy = match parts.next() {
                Some(r) => r.map_err(|_| bad())?,
                None => 0,
            };
            if parts.next().is_some() {
                return Err(bad());
            }
            Ok([jx, jy])
        })
        .collect()
}
