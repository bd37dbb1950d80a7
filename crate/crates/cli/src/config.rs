//! Experiment configuration: TOML parsing, documented defaults and validation.

use std::fmt;
use std::path::{Path, PathBuf};

use convhom::density::CATALOG;
use convhom::energy::check_commensurate;
use convhom::grid::BoundaryMode;
use serde::{Deserialize, Serialize};

pub const EXPERIMENTS: &[&str] = &["energy", "minimize", "homogenize", "flow", "pointcloud", "sweep"];
pub const KERNELS: &[&str] = &["indicator_ball", "gaussian", "polynomial_decay"];

/// Canonical kernel name; `indicator` and `polynomial` are accepted as short forms.
pub fn kernel_name(name: &str) -> &str {
    match name {
        "indicator" => "indicator_ball",
        "polynomial" => "polynomial_decay",
        other => other,
    }
}
pub const METHODS: &[&str] = &["closed_form", "cell", "asymptotic", "stochastic"];
pub const INITIALS: &[&str] = &["affine", "sine", "bump", "random"];
pub const INTEGRATORS: &[&str] = &["mm", "explicit", "reference"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub density: DensityConfig,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub scales: ScaleConfig,
    #[serde(default)]
    pub probes: ProbeConfig,
    #[serde(default)]
    pub homogenize: HomogenizeConfig,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub pointcloud: PointCloudConfig,
    #[serde(default)]
    pub tolerances: ToleranceConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("convhom-out")
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityConfig {
    pub name: String,
    pub p: f64,
    pub codim: usize,
    pub amplitude: f64,
    pub gamma: f64,
    pub low: f64,
    pub high: f64,
    pub prob: f64,
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig {
            name: "plaplace".into(),
            p: 2.0,
            codim: 1,
            amplitude: 0.5,
            gamma: 1.0,
            low: 1.0,
            high: 2.0,
            prob: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub name: String,
    /// Support radius of `indicator_ball`.
    pub radius: f64,
    /// Width of `gaussian`.
    pub width: f64,
    /// Decay exponent of `polynomial_decay`.
    pub exponent: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            name: "indicator_ball".into(),
            radius: 1.0,
            width: 1.0,
            exponent: 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub lengths: Vec<f64>,
    pub h: f64,
    pub boundary: String,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            lengths: vec![1.0],
            h: 0.01,
            boundary: "truncated".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScaleConfig {
    pub eps: Vec<f64>,
    pub r_list: Vec<f64>,
    /// Coarsest cell resolution; the ladder is `{n, 2n}`.
    pub n: usize,
    pub t: Option<f64>,
    /// Boundary layer width of box problems (`max(1, t)` when absent).
    pub layer: Option<f64>,
    /// Dirichlet layer width in units of `eps`.
    pub dirichlet_r: f64,
    /// Grid cells per unit length in box problems.
    pub resolution: usize,
    pub tau: f64,
    pub t_end: f64,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        ScaleConfig {
            eps: vec![0.1],
            r_list: vec![4.0, 8.0, 16.0],
            n: 32,
            t: None,
            layer: None,
            dirichlet_r: 1.0,
            resolution: 16,
            tau: 1e-4,
            t_end: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Probe matrices, row-major `m x d`.
    pub m: Vec<Vec<f64>>,
    pub initial: String,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            m: vec![vec![1.0]],
            initial: "affine".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HomogenizeConfig {
    pub method: String,
    /// Methods run by `sweep`.
    pub methods: Vec<String>,
}

impl Default for HomogenizeConfig {
    fn default() -> Self {
        HomogenizeConfig {
            method: "closed_form".into(),
            methods: vec!["closed_form".into(), "cell".into(), "asymptotic".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub integrator: String,
    /// Reference flow compared against, if any.
    pub reference: Option<String>,
    pub decimation: Option<usize>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            integrator: "explicit".into(),
            reference: None,
            decimation: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointCloudConfig {
    pub n_list: Vec<usize>,
    pub density: String,
    pub c: f64,
    pub beta: f64,
    pub prefactor: f64,
    /// `None` selects `1/(d+2)`.
    pub exponent: Option<f64>,
}

impl Default for PointCloudConfig {
    fn default() -> Self {
        PointCloudConfig {
            n_list: vec![500, 1000, 2000],
            density: "uniform".into(),
            c: 1.0,
            beta: 0.0,
            prefactor: 1.0,
            exponent: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToleranceConfig {
    pub grad_tol: Option<f64>,
    pub max_iters: usize,
    /// Write the solver trace of each minimization.
    pub trace: bool,
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        ToleranceConfig {
            grad_tol: None,
            max_iters: 100_000,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    Io(String),
    /// Syntax or type error; the message carries the line number.
    Parse(String),
    Invalid(Vec<String>),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(m) => write!(f, "cannot read config: {m}"),
            ConfigError::Parse(m) => write!(f, "parse error: {m}"),
            ConfigError::Invalid(v) => {
                writeln!(f, "invalid config ({} problems):", v.len())?;
                for m in v {
                    writeln!(f, "  - {m}")?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for ConfigError {}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let problems = cfg.violations();
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError::Invalid(problems))
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

fn listed(field: &str, value: &str, allowed: &[&str], what: &str) -> Option<String> {
    if allowed.contains(&value) {
        None
    } else {
        Some(format!("{field}: unknown {what} '{value}'; catalog: {}", allowed.join(", ")))
    }
}

fn writable(path: &Path) -> bool {
    let mut probe = Some(path);
    while let Some(p) = probe {
        if let Ok(meta) = std::fs::metadata(p) {
            return meta.is_dir() && !meta.permissions().readonly();
        }
        probe = p.parent().filter(|q| !q.as_os_str().is_empty());
    }
    // relative path whose first component does not exist yet
    path.is_relative()
}

impl ExperimentConfig {
    pub fn dim(&self) -> usize {
        self.grid.lengths.len()
    }

    /// Every problem with the configuration, each naming its field.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        v.extend(listed("experiment", &self.experiment, EXPERIMENTS, "experiment kind"));
        v.extend(listed("density.name", &self.density.name, CATALOG, "density"));
        v.extend(listed("kernel.name", kernel_name(&self.kernel.name), KERNELS, "kernel"));
        v.extend(listed("probes.initial", &self.probes.initial, INITIALS, "initial condition"));
        v.extend(listed("homogenize.method", &self.homogenize.method, METHODS, "method"));
        for m in &self.homogenize.methods {
            v.extend(listed("homogenize.methods", m, METHODS, "method"));
        }
        v.extend(listed("flow.integrator", &self.flow.integrator, INTEGRATORS, "integrator"));
        if let Some(r) = &self.flow.reference {
            v.extend(listed("flow.reference", r, &["spectral_p2", "fd_plaplace"], "reference mode"));
        }
        v.extend(listed("pointcloud.density", &self.pointcloud.density, &["uniform", "affine"], "sampling density"));
        if BoundaryMode::parse(&self.grid.boundary).is_err() {
            v.push(format!(
                "grid.boundary: unknown boundary mode '{}'; catalog: truncated, periodic",
                self.grid.boundary
            ));
        }

        let d = self.dim();
        if d == 0 || d > 3 {
            v.push(format!("grid.lengths: dimension must be 1, 2 or 3, got {d}"));
        }
        if self.grid.lengths.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            v.push("grid.lengths: every length must be positive".into());
        }
        if !(self.grid.h > 0.0 && self.grid.h.is_finite()) {
            v.push(format!("grid.h: must be positive, got {}", self.grid.h));
        } else {
            for &l in &self.grid.lengths {
                if l > 0.0 && convhom::grid::integer_ratio(l, self.grid.h).is_none() {
                    v.push(format!("grid.h: {} does not divide the length {l}", self.grid.h));
                }
            }
            for &eps in &self.scales.eps {
                if !(eps > 0.0) {
                    v.push(format!("scales.eps: must be positive, got {eps}"));
                } else if check_commensurate(self.grid.h, eps).is_err() {
                    v.push(format!(
                        "scales.eps: incommensurate grid: h = {} does not divide eps = {eps}",
                        self.grid.h
                    ));
                }
            }
        }
        if self.scales.eps.is_empty() {
            v.push("scales.eps: at least one scale is required".into());
        }
        if self.scales.r_list.is_empty() || self.scales.r_list.windows(2).any(|w| !(w[1] > w[0])) {
            v.push("scales.r_list: must be a nonempty increasing list".into());
        }
        if self.scales.n < 2 {
            v.push(format!("scales.n: need at least 2 nodes per period, got {}", self.scales.n));
        }
        if self.scales.resolution == 0 {
            v.push("scales.resolution: must be positive".into());
        }
        if !(self.scales.tau > 0.0) {
            v.push(format!("scales.tau: must be positive, got {}", self.scales.tau));
        }
        if !(self.scales.t_end > 0.0) {
            v.push(format!("scales.t_end: must be positive, got {}", self.scales.t_end));
        }
        if !(self.scales.dirichlet_r > 0.0) {
            v.push(format!("scales.dirichlet_r: must be positive, got {}", self.scales.dirichlet_r));
        }
        if !(self.density.p > 1.0) {
            v.push(format!("density.p: must exceed 1, got {}", self.density.p));
        }
        if self.density.codim == 0 {
            v.push("density.codim: must be at least 1".into());
        }
        let entries = self.density.codim * d;
        if self.probes.m.is_empty() {
            v.push("probes.m: at least one probe is required".into());
        }
        for (k, m) in self.probes.m.iter().enumerate() {
            if m.len() != entries {
                v.push(format!(
                    "probes.m[{k}]: expected {entries} entries (codim {} x dim {d}), got {}",
                    self.density.codim,
                    m.len()
                ));
            }
        }
        if self.seeds.is_empty() {
            v.push("seeds: at least one seed is required".into());
        }
        if self.experiment == "homogenize" && self.homogenize.method == "stochastic" && self.seeds.len() < 2 {
            v.push("seeds: stochastic homogenization needs at least two seeds".into());
        }
        if self.pointcloud.n_list.iter().any(|&n| n < 2) {
            v.push("pointcloud.n_list: every cloud needs at least 2 points".into());
        }
        if let Some(t) = self.tolerances.grad_tol {
            if !(t > 0.0) {
                v.push(format!("tolerances.grad_tol: must be positive, got {t}"));
            }
        }
        if self.tolerances.max_iters == 0 {
            v.push("tolerances.max_iters: must be positive".into());
        }
        if !writable(&self.output) {
            v.push(format!("output: '{}' is not writable", self.output.display()));
        }
        v
    }
}
