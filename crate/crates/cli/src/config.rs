use std::path::{Path, PathBuf};

use kolmolab::degiorgi::LevelSpec;
use kolmolab::fd_solver::{BoundarySpec, CoefficientSpec, FdGrid, ProductDomain};
use kolmolab::group_conv::KernelConvSpec;
use kolmolab::kernel::QuadratureSpec;
use kolmolab::lie_group::BlockSpec;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// One experiment file. Only the section of the invoked subcommand is read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub structure: BlockSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default, rename = "kernel-norms")]
    pub kernel_norms: Option<KernelNormsSection>,
    #[serde(default)]
    pub embed: Option<EmbedSection>,
    #[serde(default)]
    pub mc: Option<McSection>,
    #[serde(default)]
    pub solve: Option<SolveSection>,
    #[serde(default)]
    pub degiorgi: Option<DegiorgiSection>,
    #[serde(default)]
    pub maxprinciple: Option<SolveSection>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

fn default_horizon() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelNormsSection {
    /// Exponents of the sweep.
    pub p: Vec<f64>,
    #[serde(rename = "T", default = "default_horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub quadrature: QuadratureSpec,
    /// Fixed lower time limits evaluated for every divergent exponent.
    #[serde(default)]
    pub t_min_sweep: Vec<f64>,
}

/// A cell-centred field over `lo..hi × (0, T)`: an expression, or uniform
/// random values in `[0, max)` drawn from the experiment seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSection {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    #[serde(rename = "T")]
    pub horizon: f64,
    /// Cells per spatial axis, then per time.
    pub shape: Vec<usize>,
    #[serde(default)]
    pub expr: Option<String>,
    #[serde(default)]
    pub random_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientSection {
    pub eps1: f64,
    /// Zero-based gradient index, below `m_0`.
    #[serde(default)]
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedSection {
    pub q: f64,
    pub eps0: f64,
    pub field: FieldSection,
    #[serde(default)]
    pub conv: KernelConvSpec,
    #[serde(default)]
    pub gradient: Option<GradientSection>,
    #[serde(default)]
    pub sigma_quadrature: QuadratureSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McMethod {
    Exact,
    EulerMaruyama,
}

fn default_bins() -> usize {
    24
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    pub t: f64,
    pub start: Vec<f64>,
    pub n: usize,
    pub method: McMethod,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_true")]
    pub write_samples: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DtScaling {
    /// `dt ∝ h`.
    #[default]
    Linear,
    /// `dt ∝ h²`.
    Quadratic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveSection {
    pub domain: ProductDomain,
    #[serde(default = "default_coefficients")]
    pub coefficients: CoefficientSpec,
    pub boundary: BoundarySpec,
    pub grid: FdGrid,
    /// Exact solution for error measurement.
    #[serde(default)]
    pub exact: Option<String>,
    /// Number of grid halvings after the base grid.
    #[serde(default)]
    pub refinements: usize,
    #[serde(default)]
    pub dt_scaling: DtScaling,
    #[serde(default)]
    pub write_field_csv: bool,
}

fn default_coefficients() -> CoefficientSpec {
    serde_json::from_str("{}").expect("all coefficient fields have defaults")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantField {
    pub value: f64,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LevelInput {
    /// A binary field container, relative to the config file.
    Field(PathBuf),
    Solve(Box<SolveSection>),
    Constant(ConstantField),
}

fn default_eps0() -> f64 {
    0.1
}

fn default_theta() -> f64 {
    kolmolab::degiorgi::DEFAULT_THETA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegiorgiSection {
    pub input: LevelInput,
    /// Data bound; taken from the solver when absent.
    #[serde(rename = "M", default)]
    pub m: Option<f64>,
    #[serde(default = "default_eps0")]
    pub eps0: f64,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default)]
    pub level: LevelSpec,
}
