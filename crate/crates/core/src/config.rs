//! Scenario configuration: a TOML document with sections `grid`, `kernel`,
//! `memory`, `regions`, `costs`, `leader` and `run`.
//!
//! Only `run.seed` is mandatory. Everything else falls back to the default
//! scenario below; see the README for the full key table.
//!
//! ```toml
//! [grid]
//! nx = 16
//! ny = 16
//! nt = 16
//!
//! [kernel]
//! nu = 1.0
//! k = 0.5
//! lambda = 1.0
//!
//! [[regions.followers]]
//! control = [0.55, 0.9, 0.1, 0.45]
//! core = [0.5, 1.0, 0.0, 0.5]
//!
//! [run]
//! seed = 7
//! ```

use std::ops::Range;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use toml::Spanned;

use crate::geometry::{build_grid, GridSpec, Region};
use crate::kernel::{kernel_params, KernelParams, MemoryScheme};
use crate::leader::DualMethod;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfigErrorKind {
    Syntax,
    UnknownKey,
    MissingKey,
    InvalidValue,
    RegionViolation,
}

impl ConfigErrorKind {
    pub fn code(self) -> &'static str {
        match self {
            Self::Syntax => "E_CONFIG_SYNTAX",
            Self::UnknownKey => "E_CONFIG_UNKNOWN_KEY",
            Self::MissingKey => "E_CONFIG_MISSING_KEY",
            Self::InvalidValue => "E_CONFIG_INVALID_VALUE",
            Self::RegionViolation => "E_CONFIG_REGION",
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error, Serialize)]
#[error("{}{}: {message}", kind.code(), line.map(|l| format!(" (line {l})")).unwrap_or_default())]
pub struct ConfigError {
    pub kind: ConfigErrorKind,
    /// 1-based line of the offending key, when known.
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn new(kind: ConfigErrorKind, line: Option<usize>, message: impl Into<String>) -> Self {
        Self {
            kind,
            line,
            message: message.into(),
        }
    }

    pub fn code(&self) -> &'static str {
        self.kind.code()
    }
}

/// Where the target `u^T` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSource {
    Zero,
    /// `u(T)` of a random leader control with idle followers.
    #[default]
    Reachable,
    /// Projected white noise.
    Random,
    /// Projected noise after a few implicit diffusion steps.
    SmoothRandom,
}

/// Leader control used by the `nash` subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeaderControlSource {
    Zero,
    #[default]
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FollowerSpec {
    /// Control region `O_i` (`omega_i` in tracking mode).
    pub control: Region,
    /// `rho_i = 1` on `core` ...
    pub core: Region,
    /// ... and vanishes outside `support`.
    pub support: Region,
    /// Observation region `omega_{i,d}` of the tracking cost.
    pub observe: Region,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioConfig {
    pub grid: GridSpec,
    pub kernel: KernelParams,
    pub scheme: MemoryScheme,
    pub leader_region: Region,
    pub followers: Vec<FollowerSpec>,
    pub alphas: Vec<f64>,
    pub target: TargetSource,
    /// H norm of generated targets.
    pub target_scale: f64,
    pub tracking: bool,
    /// Control weights `mu_i` of the tracking cost.
    pub mus: Vec<f64>,
    pub epsilon: f64,
    pub epsilons: Vec<f64>,
    pub leader_control: LeaderControlSource,
    pub vi_samples: usize,
    pub dual_method: DualMethod,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub adjoint_trials: usize,
    pub coercivity_samples: usize,
    pub perturbations: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    grid: RawGrid,
    #[serde(default)]
    kernel: RawKernel,
    #[serde(default)]
    memory: RawMemory,
    #[serde(default)]
    regions: RawRegions,
    #[serde(default)]
    costs: RawCosts,
    #[serde(default)]
    leader: RawLeader,
    run: RawRun,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    nx: Option<Spanned<i64>>,
    ny: Option<Spanned<i64>>,
    lx: Option<f64>,
    ly: Option<f64>,
    nt: Option<Spanned<i64>>,
    t_final: Option<f64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawKernel {
    nu: Option<Spanned<f64>>,
    k: Option<Spanned<f64>>,
    lambda: Option<Spanned<f64>>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawMemory {
    scheme: Option<MemoryScheme>,
}

type Rect = Spanned<[f64; 4]>;

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawRegions {
    leader: Option<Rect>,
    followers: Option<Vec<RawFollower>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFollower {
    control: Rect,
    core: Option<Rect>,
    support: Option<Rect>,
    observe: Option<Rect>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawCosts {
    alpha: Option<Spanned<f64>>,
    alphas: Option<Spanned<Vec<f64>>>,
    target: Option<TargetSource>,
    target_scale: Option<Spanned<f64>>,
    tracking: Option<bool>,
    mus: Option<Spanned<Vec<f64>>>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawLeader {
    epsilon: Option<Spanned<f64>>,
    epsilons: Option<Spanned<Vec<f64>>>,
    control: Option<LeaderControlSource>,
    vi_samples: Option<usize>,
    method: Option<DualMethod>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    seed: u64,
    out: Option<PathBuf>,
    adjoint_trials: Option<usize>,
    coercivity_samples: Option<usize>,
    perturbations: Option<usize>,
}

pub const DEFAULT_ALPHA: f64 = 1e-2;
pub const DEFAULT_EPSILON: f64 = 0.2;
pub const DEFAULT_EPSILONS: [f64; 4] = [0.5, 0.2, 0.1, 0.05];

pub fn default_leader_region() -> Region {
    Region::new(0.1, 0.5, 0.1, 0.9)
}

/// Two followers on the right half; each weight is one on a slightly
/// larger block around its own control region and tapers to zero beyond.
pub fn default_followers() -> Vec<FollowerSpec> {
    vec![
        FollowerSpec {
            control: Region::new(0.55, 0.9, 0.1, 0.45),
            core: Region::new(0.5, 0.95, 0.05, 0.5),
            support: Region::new(0.4, 1.0, 0.0, 0.6),
            observe: Region::new(0.5, 0.95, 0.05, 0.5),
        },
        FollowerSpec {
            control: Region::new(0.55, 0.9, 0.55, 0.9),
            core: Region::new(0.5, 0.95, 0.5, 0.95),
            support: Region::new(0.4, 1.0, 0.4, 1.0),
            observe: Region::new(0.5, 0.95, 0.5, 0.95),
        },
    ]
}

fn line_of(text: &str, span: Option<Range<usize>>) -> Option<usize> {
    span.map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
}

fn classify(message: &str) -> ConfigErrorKind {
    if message.contains("unknown field") {
        ConfigErrorKind::UnknownKey
    } else if message.contains("missing field") {
        ConfigErrorKind::MissingKey
    } else if ["unknown variant", "invalid type", "invalid value", "invalid length"]
        .iter()
        .any(|p| message.contains(p))
    {
        ConfigErrorKind::InvalidValue
    } else {
        ConfigErrorKind::Syntax
    }
}

/// Parse and validate a scenario; the first problem found is reported with
/// its line number.
pub fn parse_config(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| {
        let message = e.message().trim().to_string();
        ConfigError::new(classify(&message), line_of(text, e.span()), message)
    })?;
    Validator { text }.validate(raw)
}

struct Validator<'a> {
    text: &'a str,
}

impl Validator<'_> {
    fn line<T>(&self, s: &Spanned<T>) -> Option<usize> {
        line_of(self.text, Some(s.span()))
    }

    fn invalid<T>(&self, s: &Spanned<T>, msg: impl Into<String>) -> ConfigError {
        ConfigError::new(ConfigErrorKind::InvalidValue, self.line(s), msg)
    }

    fn count(&self, v: Option<Spanned<i64>>, default: usize, min: i64, name: &str) -> Result<usize, ConfigError> {
        match v {
            None => Ok(default),
            Some(s) if *s.get_ref() >= min => Ok(*s.get_ref() as usize),
            Some(s) => Err(self.invalid(&s, format!("{name} must be >= {min}, got {}", s.get_ref()))),
        }
    }

    fn positive(&self, v: &Option<Spanned<f64>>, default: f64, name: &str) -> Result<f64, ConfigError> {
        match v {
            None => Ok(default),
            Some(s) if *s.get_ref() > 0.0 && s.get_ref().is_finite() => Ok(*s.get_ref()),
            Some(s) => Err(self.invalid(s, format!("{name} must be positive, got {}", s.get_ref()))),
        }
    }

    fn region(&self, r: &Rect, spec: &GridSpec, what: &str) -> Result<Region, ConfigError> {
        let [x0, x1, y0, y1] = *r.get_ref();
        let reg = Region::new(x0, x1, y0, y1);
        let inside = x0 >= 0.0 && y0 >= 0.0 && x1 <= spec.lx && y1 <= spec.ly;
        if !(x0 < x1 && y0 < y1) || !inside {
            return Err(ConfigError::new(
                ConfigErrorKind::RegionViolation,
                self.line(r),
                format!("{what} {:?} must be a nonempty rectangle inside the domain", r.get_ref()),
            ));
        }
        Ok(reg)
    }

    fn validate(&self, raw: RawConfig) -> Result<ScenarioConfig, ConfigError> {
        use ConfigErrorKind::*;
        let d = GridSpec::default();
        let g = raw.grid;
        let grid = GridSpec {
            nx: self.count(g.nx, d.nx, 1, "grid.nx")?,
            ny: self.count(g.ny, d.ny, 1, "grid.ny")?,
            lx: g.lx.unwrap_or(d.lx),
            ly: g.ly.unwrap_or(d.ly),
            nt: self.count(g.nt, d.nt, 1, "grid.nt")?,
            t_final: g.t_final.unwrap_or(d.t_final),
        };
        build_grid(grid).map_err(|e| ConfigError::new(InvalidValue, None, format!("[grid] {e}")))?;

        let kr = &raw.kernel;
        let kernel = kernel_params(
            kr.nu.as_ref().map_or(1.0, |s| *s.get_ref()),
            kr.k.as_ref().map_or(0.5, |s| *s.get_ref()),
            kr.lambda.as_ref().map_or(1.0, |s| *s.get_ref()),
        )
        .map_err(|e| {
            let line = [&kr.nu, &kr.k, &kr.lambda].into_iter().flatten().map(|s| self.line(s)).min().flatten();
            ConfigError::new(InvalidValue, line, e.to_string())
        })?;

        let leader_region = match &raw.regions.leader {
            Some(r) => self.region(r, &grid, "regions.leader")?,
            None => default_leader_region(),
        };
        let followers = match &raw.regions.followers {
            None => default_followers(),
            Some(list) if list.is_empty() => {
                return Err(ConfigError::new(InvalidValue, None, "regions.followers must not be empty"))
            }
            Some(list) => {
                let mut out = Vec::new();
                for f in list {
                    let control = self.region(&f.control, &grid, "follower control region")?;
                    let core = match &f.core {
                        Some(r) => self.region(r, &grid, "follower weight core")?,
                        None => control,
                    };
                    let support = match &f.support {
                        Some(r) => self.region(r, &grid, "follower weight support")?,
                        None => core,
                    };
                    if !support.contains_region(&core) {
                        let at = f.support.as_ref().or(f.core.as_ref()).unwrap_or(&f.control);
                        return Err(ConfigError::new(
                            RegionViolation,
                            self.line(at),
                            "weight core region is not contained in its support",
                        ));
                    }
                    let observe = match &f.observe {
                        Some(r) => self.region(r, &grid, "follower observation region")?,
                        None => core,
                    };
                    out.push((f, FollowerSpec {
                        control,
                        core,
                        support,
                        observe,
                    }));
                }
                for a in 0..out.len() {
                    for b in a + 1..out.len() {
                        if out[a].1.control.overlaps(&out[b].1.control) {
                            return Err(ConfigError::new(
                                RegionViolation,
                                self.line(&out[b].0.control),
                                "follower domains must be disjoint",
                            ));
                        }
                    }
                }
                out.into_iter().map(|(_, s)| s).collect()
            }
        };
        let n = followers.len();

        let c = &raw.costs;
        let alphas = match (&c.alpha, &c.alphas) {
            (Some(a), Some(_)) => return Err(self.invalid(a, "give either costs.alpha or costs.alphas, not both")),
            (Some(a), None) => vec![*a.get_ref(); n],
            (None, Some(list)) => {
                if list.get_ref().len() != n {
                    return Err(self.invalid(list, format!("costs.alphas needs {n} entries")));
                }
                list.get_ref().clone()
            }
            (None, None) => vec![DEFAULT_ALPHA; n],
        };
        if let Some(bad) = alphas.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            let at = c.alpha.as_ref().map(|s| self.line(s)).or(c.alphas.as_ref().map(|s| self.line(s))).flatten();
            return Err(ConfigError::new(InvalidValue, at, format!("follower weights alpha must be positive, got {bad}")));
        }
        let mus = match &c.mus {
            None => vec![1.0; n],
            Some(list) => {
                if list.get_ref().len() != n || list.get_ref().iter().any(|m| !(*m > 0.0 && m.is_finite())) {
                    return Err(self.invalid(list, format!("costs.mus needs {n} positive entries")));
                }
                list.get_ref().clone()
            }
        };

        let l = &raw.leader;
        let epsilon = self.positive(&l.epsilon, DEFAULT_EPSILON, "leader.epsilon")?;
        let epsilons = match &l.epsilons {
            None => DEFAULT_EPSILONS.to_vec(),
            Some(list) => {
                if list.get_ref().is_empty() || list.get_ref().iter().any(|e| !(*e > 0.0 && e.is_finite())) {
                    return Err(self.invalid(list, "leader.epsilons must be a nonempty list of positive values"));
                }
                list.get_ref().clone()
            }
        };

        Ok(ScenarioConfig {
            grid,
            kernel,
            scheme: raw.memory.scheme.unwrap_or_default(),
            leader_region,
            followers,
            alphas,
            target: c.target.unwrap_or_default(),
            target_scale: self.positive(&c.target_scale, 1.0, "costs.target_scale")?,
            tracking: c.tracking.unwrap_or(false),
            mus,
            epsilon,
            epsilons,
            leader_control: l.control.unwrap_or_default(),
            vi_samples: l.vi_samples.unwrap_or(100),
            dual_method: l.method.unwrap_or_default(),
            seed: raw.run.seed,
            out: raw.run.out,
            adjoint_trials: raw.run.adjoint_trials.unwrap_or(10),
            coercivity_samples: raw.run.coercivity_samples.unwrap_or(50),
            perturbations: raw.run.perturbations.unwrap_or(20),
        })
    }
}
