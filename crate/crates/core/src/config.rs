//! TOML run configuration shared by the solvers, the convergence study and the CLI.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::constitutive::ModelConfig;
use crate::dynamics::{Numerics, Reconstruction, SineMode, SlabGrid, SlabMotion, TauInit};
use crate::gasdyn::GasParams;
use crate::minors::{Dim, Mat};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid field `{field}`: {reason}")]
    Field { field: String, reason: String },
}

fn field(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Field { field: field.to_string(), reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub n_cells: usize,
    pub x_min: f64,
    pub x_max: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { n_cells: 128, x_min: 0.0, x_max: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeConfig {
    pub t_end: f64,
    pub cfl: f64,
    pub snapshot_stride: usize,
}

impl Default for TimeConfig {
    fn default() -> Self {
        TimeConfig { t_end: 0.2, cfl: 0.4, snapshot_stride: 10 }
    }
}

/// Which slab system `simulate` advances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SystemKind {
    #[default]
    Relax,
    Equilibrium,
    Augmented,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelaxConfig {
    pub system: SystemKind,
    pub epsilon: f64,
    pub eps_list: Vec<f64>,
}

impl Default for RelaxConfig {
    fn default() -> Self {
        RelaxConfig { system: SystemKind::Relax, epsilon: 0.1, eps_list: vec![0.1, 0.05, 0.025, 0.0125] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    Identity,
    /// Longitudinal wave: displacement and velocity on component 1 only.
    #[default]
    Sine,
    /// Every component displaced with distinct phases, sheared background.
    Coupled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub kind: InitKind,
    pub amplitude: f64,
    pub wavenumber: u32,
    pub velocity_amplitude: f64,
    pub prepared: bool,
    /// Constant added to every active `tau` component when `prepared = false`.
    pub tau_offset: f64,
    /// Row-major `d x d` background; only columns 2..d matter for the slab.
    pub background: Option<Vec<f64>>,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            kind: InitKind::Sine,
            amplitude: 0.05,
            wavenumber: 1,
            velocity_amplitude: 0.0,
            prepared: true,
            tau_offset: 0.0,
            background: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub directory: Option<String>,
    pub formats: Vec<String>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { directory: None, formats: vec!["csv".into(), "json".into()] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericsConfig {
    pub reconstruction: Reconstruction,
    pub deterministic_reduction: bool,
    pub w_min: f64,
    pub rho_min: f64,
}

impl Default for NumericsConfig {
    fn default() -> Self {
        NumericsConfig { reconstruction: Reconstruction::FirstOrder, deterministic_reduction: true, w_min: 0.1, rho_min: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergeConfig {
    pub threshold: f64,
    /// Refinement factor of the equilibrium reference.
    pub refinement: usize,
    /// Number of uniformly spaced comparison times in `(0, t_end]`.
    pub snapshots: usize,
    /// Abort when `max |dF/dx|` of the reference grows by more than this factor.
    pub blowup_factor: f64,
    /// `eps` values with `sup e_r < floor_factor * floor` are excluded from the fit.
    pub floor_factor: f64,
}

impl Default for ConvergeConfig {
    fn default() -> Self {
        ConvergeConfig { threshold: 0.8, refinement: 4, snapshots: 20, blowup_factor: 50.0, floor_factor: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckConfig {
    pub samples: usize,
    pub seed: u64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig { samples: 512, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GasConfig {
    pub family: String,
    pub params: GasParams,
}

impl Default for GasConfig {
    fn default() -> Self {
        GasConfig { family: "default".into(), params: GasParams::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<ModelConfig>,
    pub gas: Option<GasConfig>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub time: TimeConfig,
    #[serde(default)]
    pub relax: RelaxConfig,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub numerics: NumericsConfig,
    #[serde(default)]
    pub converge: ConvergeConfig,
    #[serde(default)]
    pub check: CheckConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<RunConfig, ConfigError> {
        let c: RunConfig = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<(RunConfig, String), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.display().to_string(), reason: e.to_string() })?;
        Ok((RunConfig::from_toml_str(&text)?, text))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let pos = |name: &str, v: f64| if v.is_finite() && v > 0.0 { Ok(()) } else { Err(field(name, format!("must be positive, got {v}"))) };
        if self.grid.n_cells < crate::dynamics::MIN_CELLS {
            return Err(field("grid.n_cells", format!("must be >= {}", crate::dynamics::MIN_CELLS)));
        }
        if !(self.grid.x_max > self.grid.x_min) {
            return Err(field("grid.x_max", "must exceed grid.x_min"));
        }
        if !(self.time.t_end >= 0.0) || !self.time.t_end.is_finite() {
            return Err(field("time.t_end", "must be >= 0"));
        }
        pos("time.cfl", self.time.cfl)?;
        if self.time.cfl > 1.0 {
            return Err(field("time.cfl", "must be <= 1"));
        }
        if self.time.snapshot_stride == 0 {
            return Err(field("time.snapshot_stride", "must be >= 1"));
        }
        if self.relax.epsilon.is_nan() || self.relax.epsilon < 0.0 {
            return Err(field("relax.epsilon", "must be >= 0"));
        }
        for (k, &e) in self.relax.eps_list.iter().enumerate() {
            pos(&format!("relax.eps_list[{k}]"), e)?;
            if k > 0 && e >= self.relax.eps_list[k - 1] {
                return Err(field("relax.eps_list", "must be strictly decreasing"));
            }
        }
        if self.init.wavenumber == 0 {
            return Err(field("init.wavenumber", "must be >= 1"));
        }
        if !self.init.amplitude.is_finite() || !self.init.velocity_amplitude.is_finite() || !self.init.tau_offset.is_finite() {
            return Err(field("init", "amplitudes must be finite"));
        }
        pos("numerics.w_min", self.numerics.w_min)?;
        pos("numerics.rho_min", self.numerics.rho_min)?;
        pos("converge.blowup_factor", self.converge.blowup_factor)?;
        pos("converge.floor_factor", self.converge.floor_factor)?;
        if self.converge.refinement < 1 {
            return Err(field("converge.refinement", "must be >= 1"));
        }
        if self.converge.snapshots < 1 {
            return Err(field("converge.snapshots", "must be >= 1"));
        }
        if self.check.samples == 0 {
            return Err(field("check.samples", "must be >= 1"));
        }
        for f in &self.output.formats {
            if f != "csv" && f != "json" {
                return Err(field("output.formats", format!("unknown format `{f}`")));
            }
        }
        if let Some(m) = &self.model {
            Dim::new(m.dim).map_err(|e| field("model.dim", e.to_string()))?;
            if let Some(b) = &self.init.background {
                if b.len() != m.dim * m.dim {
                    return Err(field("init.background", format!("needs {} entries", m.dim * m.dim)));
                }
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> SlabGrid {
        SlabGrid { n_cells: self.grid.n_cells, x_min: self.grid.x_min, x_max: self.grid.x_max }
    }

    pub fn numerics(&self) -> Numerics {
        Numerics { cfl: self.time.cfl, reconstruction: self.numerics.reconstruction, w_min: self.numerics.w_min }
    }

    pub fn tau_init(&self) -> TauInit {
        if self.init.prepared {
            TauInit::Prepared
        } else {
            TauInit::Offset(self.init.tau_offset)
        }
    }

    /// Initial plane-wave motion in dimension `dim`.
    pub fn motion(&self, dim: Dim) -> Result<SlabMotion, ConfigError> {
        let d = dim.d();
        let background = match &self.init.background {
            Some(b) => Mat::from_row_major(dim, b).map_err(|e| field("init.background", e.to_string()))?,
            None => Mat::identity(dim),
        };
        let (a, b, k) = (self.init.amplitude, self.init.velocity_amplitude, self.init.wavenumber);
        let mut displacement = Vec::new();
        let mut velocity = Vec::new();
        match self.init.kind {
            InitKind::Identity => {}
            InitKind::Sine => {
                displacement.push(SineMode { component: 0, amplitude: a, wavenumber: k, phase: 0.0 });
                if b != 0.0 {
                    velocity.push(SineMode { component: 0, amplitude: b, wavenumber: k, phase: std::f64::consts::FRAC_PI_2 });
                }
            }
            InitKind::Coupled => {
                for c in 0..d {
                    displacement.push(SineMode { component: c, amplitude: a / (c + 1) as f64, wavenumber: k, phase: 0.7 * c as f64 });
                    if b != 0.0 {
                        velocity.push(SineMode { component: c, amplitude: b, wavenumber: k, phase: 0.3 + 0.5 * c as f64 });
                    }
                }
            }
        }
        Ok(SlabMotion { background, displacement, velocity })
    }

    pub fn writes_csv(&self) -> bool {
        self.output.formats.iter().any(|f| f == "csv")
    }

    pub fn writes_json(&self) -> bool {
        self.output.formats.iter().any(|f| f == "json")
    }
}

/// Git-style content hash: SHA-256 of `"blob <len>\0" + bytes`, hex encoded.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}
