use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use curvature::grid::GridError;
use curvature::{FieldKind, GridManifold, ScalarField, Topology};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("grid: {0}")]
    Grid(#[from] GridError),
    #[error("field {name}: {reason}")]
    Field { name: String, reason: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    ClosedZeroEigenvalue,
    MinimalBoundary,
    ScalarMean,
    Gauss2d,
    HanLiNegative,
    HanLiPositive,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Expectation {
    #[default]
    Solved,
    Refused,
    Any,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioKind,
    #[serde(default)]
    pub expect: Expectation,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub manifold: ManifoldSpec,
    #[serde(default)]
    pub fields: BTreeMap<String, FieldSpec>,
    #[serde(default)]
    pub solver: SolverOverrides,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldSpec {
    pub topology: Topology,
    pub n: usize,
    pub shape: Vec<usize>,
    pub lengths: Vec<f64>,
}

/// Analytic presets and file-backed fields. Axes are 1-based.
#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    Constant { c: f64 },
    SinusoidShift { amplitude: f64, shift: f64, axis: usize },
    Bump { center: Vec<f64>, radius: f64, height: f64 },
    Csv { path: PathBuf },
    /// A few seeded Fourier modes plus a shift.
    RandomModes {
        modes: usize,
        amplitude: f64,
        shift: f64,
    },
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverOverrides {
    pub max_iter: Option<usize>,
    pub tol_residual: Option<f64>,
    pub gamma0: Option<f64>,
    pub beta0: Option<f64>,
    pub levels: Option<usize>,
    pub neg_beta: Option<f64>,
    pub eps_margin: Option<f64>,
    pub c_halvings: Option<usize>,
    pub smallness_budget: Option<f64>,
}

type Preset = Box<dyn Fn(&[f64]) -> f64>;

const KNOWN_FIELDS: [&str; 5] = ["S", "H", "K", "R", "h"];

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: RunConfig = toml::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.check()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        if self.output.is_relative() {
            self.output = base.join(&self.output);
        }
        for spec in self.fields.values_mut() {
            if let FieldSpec::Csv { path } = spec {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        }
    }

    fn check(&self) -> Result<(), ConfigError> {
        if let Some(name) = self.fields.keys().find(|k| !KNOWN_FIELDS.contains(&k.as_str())) {
            return Err(ConfigError::Invalid(format!(
                "unknown field {name:?}; expected one of {KNOWN_FIELDS:?}"
            )));
        }
        for (name, spec) in &self.fields {
            if let FieldSpec::Csv { path } = spec {
                if !path.is_file() {
                    return Err(ConfigError::Field {
                        name: name.clone(),
                        reason: format!("file {} does not exist", path.display()),
                    });
                }
            }
        }
        let required: &[&str] = match self.scenario {
            ScenarioKind::ClosedZeroEigenvalue | ScenarioKind::MinimalBoundary => &["S"],
            ScenarioKind::ScalarMean => &["S", "H"],
            ScenarioKind::Gauss2d => &["K"],
            ScenarioKind::HanLiNegative | ScenarioKind::HanLiPositive => &[],
        };
        if let Some(missing) = required.iter().find(|r| !self.fields.contains_key(**r)) {
            return Err(ConfigError::Invalid(format!("scenario needs field {missing:?}")));
        }
        Ok(())
    }

    /// Grid with the background fields `R` and `h` installed.
    pub fn build_grid(&self) -> Result<GridManifold, ConfigError> {
        let m = &self.manifold;
        let mut grid = GridManifold::build(m.topology, m.n, &m.shape, &m.lengths)?;
        if let Some(r) = self.field(&grid, "R")? {
            grid = grid.with_coeff_r(r)?;
        }
        if let Some(h) = self.field(&grid, "h")? {
            grid = grid.with_coeff_h(h)?;
        }
        Ok(grid)
    }

    /// Materialize a named field; `H` and `h` live on the boundary.
    pub fn field(&self, grid: &GridManifold, name: &str) -> Result<Option<ScalarField>, ConfigError> {
        let Some(spec) = self.fields.get(name) else {
            return Ok(None);
        };
        let kind = if name == "H" || name == "h" {
            FieldKind::Boundary
        } else {
            FieldKind::Interior
        };
        if kind == FieldKind::Boundary && !grid.has_boundary() {
            return Err(ConfigError::Field {
                name: name.into(),
                reason: "boundary field on a manifold without boundary".into(),
            });
        }
        let err = |reason: String| ConfigError::Field {
            name: name.into(),
            reason,
        };
        let f: Preset = match spec {
            FieldSpec::Constant { c } => {
                let c = *c;
                Box::new(move |_| c)
            }
            FieldSpec::SinusoidShift { amplitude, shift, axis } => {
                if *axis == 0 || *axis > grid.dim() {
                    return Err(err(format!("axis {axis} outside 1..={}", grid.dim())));
                }
                let (amp, shift, k, len) = (*amplitude, *shift, axis - 1, grid.lengths()[axis - 1]);
                Box::new(move |x| amp * (2.0 * PI * x[k] / len).sin() + shift)
            }
            FieldSpec::Bump { center, radius, height } => {
                if center.len() != grid.dim() {
                    return Err(err(format!("center needs {} coordinates", grid.dim())));
                }
                if !(*radius > 0.0) {
                    return Err(err("radius must be positive".into()));
                }
                let (center, radius, height) = (center.clone(), *radius, *height);
                let lengths = grid.lengths().to_vec();
                let periodic: Vec<bool> = (0..grid.dim())
                    .map(|k| !(k == 0 && grid.has_boundary()))
                    .collect();
                Box::new(move |x| {
                    let r2: f64 = (0..x.len())
                        .map(|k| {
                            let mut d = (x[k] - center[k]).abs();
                            if periodic[k] {
                                d = d.min(lengths[k] - d);
                            }
                            d * d
                        })
                        .sum();
                    let t = r2 / (radius * radius);
                    if t < 1.0 {
                        height * (1.0 - 1.0 / (1.0 - t)).exp() * std::f64::consts::E
                    } else {
                        0.0
                    }
                })
            }
            FieldSpec::RandomModes { modes, amplitude, shift } => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_salt(name));
                let terms: Vec<(usize, f64, f64, f64)> = (0..*modes)
                    .map(|_| {
                        let axis = rng.gen_range(0..grid.dim());
                        let freq = rng.gen_range(1..=3) as f64;
                        let phase = rng.gen_range(0.0..2.0 * PI);
                        let amp = rng.gen_range(-1.0..1.0) * amplitude;
                        (axis, freq, phase, amp)
                    })
                    .collect();
                let (shift, lengths) = (*shift, grid.lengths().to_vec());
                Box::new(move |x| {
                    shift
                        + terms
                            .iter()
                            .map(|&(k, f, ph, a)| a * (2.0 * PI * f * x[k] / lengths[k] + ph).cos())
                            .sum::<f64>()
                })
            }
            FieldSpec::Csv { path } => {
                let file = File::open(path).map_err(|source| ConfigError::Io {
                    path: path.clone(),
                    source,
                })?;
                return Ok(Some(grid.read_field(BufReader::new(file), kind)?));
            }
        };
        Ok(Some(match kind {
            FieldKind::Interior => grid.field_from(|x| f(x)),
            FieldKind::Boundary => grid.boundary_field_from(|x| f(x)),
        }))
    }
}

fn name_salt(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}
