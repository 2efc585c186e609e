//! Scenario configuration: one TOML file with nested sections, fully
//! validated before any computation. Boxes and resolutions are required;
//! everything else has a documented default.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::grid::{AxisSpec, PhaseSpaceGrid, VelocityMap};
use crate::kernels::{KernelSet, NormalizationMode, PairKernel, ScalarField};
use crate::solver::MappingKind;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridConfig {
    pub dim: usize,
    /// Per-axis spatial box (length units).
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
    pub nx: Vec<usize>,
    /// Per-axis velocity (or momentum) box.
    pub v_min: Vec<f64>,
    pub v_max: Vec<f64>,
    pub nv: Vec<usize>,
    /// Number of time nodes; the step is t_final / (nt - 1).
    pub nt: usize,
    pub t_final: f64,
    /// `relativistic` reads the velocity coordinate as momentum.
    #[serde(default)]
    pub velocity_map: VelocityMap,
}

/// Scalar-field spec: either an inline family or a tabulated CSV.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldSpec {
    Inline(ScalarField),
    Csv { kind: String, csv: PathBuf },
}

impl FieldSpec {
    fn resolve(&self, base: &Path, expected: usize, name: &str) -> Result<ScalarField> {
        match self {
            FieldSpec::Inline(f) => Ok(f.clone()),
            FieldSpec::Csv { kind, csv } => {
                if kind != "tabulated" {
                    return Err(CoreError::Config(format!(
                        "{name}: csv input is only valid with kind = \"tabulated\""
                    )));
                }
                let path = if csv.is_absolute() {
                    csv.clone()
                } else {
                    base.join(csv)
                };
                let values = read_value_column(&path)?;
                if values.len() != expected {
                    return Err(CoreError::Config(format!(
                        "{name}: {} values in {}, grid has {} nodes",
                        values.len(),
                        path.display(),
                        expected
                    )));
                }
                Ok(ScalarField::Tabulated { values })
            }
        }
    }
}

/// Redistribution-density spec.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PConfig {
    #[serde(flatten)]
    pub kernel: PairKernelSpec,
    #[serde(default)]
    pub normalization: NormalizationMode,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PairKernelSpec {
    Inline(PairKernel),
    Csv { kind: String, csv: PathBuf },
}

impl PairKernelSpec {
    fn resolve(&self, base: &Path) -> Result<PairKernel> {
        match self {
            PairKernelSpec::Inline(k) => Ok(k.clone()),
            PairKernelSpec::Csv { kind, csv } => {
                if kind != "tabulated" {
                    return Err(CoreError::Config(
                        "p: csv input is only valid with kind = \"tabulated\"".into(),
                    ));
                }
                let path = if csv.is_absolute() {
                    csv.clone()
                } else {
                    base.join(csv)
                };
                let (s, value) = read_two_columns(&path)?;
                Ok(PairKernel::Tabulated { s, value })
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KernelsConfig {
    pub eta: FieldSpec,
    pub gamma: FieldSpec,
    pub p: PConfig,
    pub f0: FieldSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolverConfig {
    #[serde(default = "default_mapping")]
    pub mapping: MappingKind,
    /// Weight rate; when omitted, 4 for the plain mapping and 2 for the
    /// exponential one.
    #[serde(default)]
    pub a: Option<f64>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_mapping() -> MappingKind {
    MappingKind::JPlus
}
fn default_tol() -> f64 {
    crate::tolerances::DEFAULT_SOLVER_TOL
}
fn default_max_iter() -> usize {
    crate::tolerances::DEFAULT_MAX_ITER
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            mapping: default_mapping(),
            a: None,
            tol: default_tol(),
            max_iter: default_max_iter(),
        }
    }
}

impl SolverConfig {
    pub fn weight_rate(&self) -> f64 {
        self.a.unwrap_or(match self.mapping {
            MappingKind::J => 4.0,
            MappingKind::JPlus => 2.0,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct McConfig {
    #[serde(default = "default_particles")]
    pub n_particles: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Requested step; the runner shrinks it to land exactly on the
    /// comparison checkpoints.
    #[serde(default = "default_mc_dt")]
    pub dt: f64,
    /// Write a final-time histogram snapshot in the field CSV format.
    #[serde(default)]
    pub histogram: bool,
}

fn default_particles() -> usize {
    100_000
}
fn default_seed() -> u64 {
    42
}
fn default_mc_dt() -> f64 {
    0.05
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_particles: default_particles(),
            seed: default_seed(),
            dt: default_mc_dt(),
            histogram: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OutputConfig {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
    /// Snapshot cadence in time nodes; 0 means ceil(nt / 10).
    #[serde(default)]
    pub snapshot_every: usize,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_out_dir(),
            snapshot_every: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub grid: GridConfig,
    pub kernels: KernelsConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub mc: McConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| CoreError::Config(format!("toml parse: {e}")))?;
        Self::from_toml_value(toml::Value::Table(table))
    }

    pub fn from_toml_value(value: toml::Value) -> Result<Self> {
        let config: ScenarioConfig = value
            .try_into()
            .map_err(|e| CoreError::Config(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Loads a config file and applies dotted-path overrides
    /// (`section.key=value`) before deserialization.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::Config(format!("cannot read {}: {e}", path.display())))?;
        let table: toml::Table = text
            .parse()
            .map_err(|e| CoreError::Config(format!("toml parse in {}: {e}", path.display())))?;
        let mut value = toml::Value::Table(table);
        for (key, raw) in overrides {
            apply_override(&mut value, key, raw)?;
        }
        Self::from_toml_value(value)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.dim == 0 || g.dim > crate::grid::MAX_DIM {
            return Err(CoreError::Config(format!("grid.dim must be 1..=3, got {}", g.dim)));
        }
        for (name, v) in [
            ("x_min", g.x_min.len()),
            ("x_max", g.x_max.len()),
            ("nx", g.nx.len()),
            ("v_min", g.v_min.len()),
            ("v_max", g.v_max.len()),
            ("nv", g.nv.len()),
        ] {
            if v != g.dim {
                return Err(CoreError::Config(format!(
                    "grid.{name} needs {} entries for dim = {}",
                    g.dim, g.dim
                )));
            }
        }
        if g.nt < 2 {
            return Err(CoreError::Config("grid.nt must be at least 2".into()));
        }
        if !(g.t_final.is_finite() && g.t_final > 0.0) {
            return Err(CoreError::Config("grid.t_final must be positive".into()));
        }
        if !(self.solver.tol.is_finite() && self.solver.tol > 0.0) {
            return Err(CoreError::Config("solver.tol must be positive".into()));
        }
        if self.solver.max_iter == 0 {
            return Err(CoreError::Config("solver.max_iter must be positive".into()));
        }
        if self.mc.n_particles == 0 {
            return Err(CoreError::Config("mc.n_particles must be positive".into()));
        }
        if !(self.mc.dt.is_finite() && self.mc.dt > 0.0) {
            return Err(CoreError::Config("mc.dt must be positive".into()));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.grid.t_final / (self.grid.nt - 1) as f64
    }

    pub fn build_grid(&self) -> Result<Arc<PhaseSpaceGrid>> {
        let g = &self.grid;
        let mut x_axes = Vec::with_capacity(g.dim);
        let mut v_axes = Vec::with_capacity(g.dim);
        for a in 0..g.dim {
            x_axes.push(AxisSpec::new(g.x_min[a], g.x_max[a], g.nx[a])?);
            v_axes.push(AxisSpec::new(g.v_min[a], g.v_max[a], g.nv[a])?);
        }
        Ok(Arc::new(PhaseSpaceGrid::new(
            x_axes,
            v_axes,
            g.nt,
            self.dt(),
            g.velocity_map,
        )?))
    }

    /// Resolves kernel specs (loading any CSV tables) against `base_dir`.
    pub fn build_kernels(&self, grid: &PhaseSpaceGrid, base_dir: &Path) -> Result<KernelSet> {
        let n_xv = grid.n_xv();
        let set = KernelSet {
            eta: self.kernels.eta.resolve(base_dir, n_xv, "eta")?,
            gamma: self.kernels.gamma.resolve(base_dir, n_xv, "gamma")?,
            p_kernel: self.kernels.p.kernel.resolve(base_dir)?,
            p_normalization: self.kernels.p.normalization,
            f0: self.kernels.f0.resolve(base_dir, n_xv, "f0")?,
        };
        set.validate(grid)?;
        Ok(set)
    }

    /// Snapshot cadence in nodes.
    pub fn snapshot_stride(&self) -> usize {
        if self.output.snapshot_every > 0 {
            self.output.snapshot_every
        } else {
            self.grid.nt.div_ceil(10)
        }
    }
}

fn apply_override(value: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.is_empty() {
        return Err(CoreError::Config("empty override key".into()));
    }
    let mut node = value;
    for part in &parts[..parts.len() - 1] {
        node = node
            .as_table_mut()
            .ok_or_else(|| CoreError::Config(format!("override path {key} crosses a non-table")))?
            .entry(part.to_string())
            .or_insert(toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| CoreError::Config(format!("override path {key} crosses a non-table")))?;
    let parsed: toml::Value = match format!("x = {raw}").parse::<toml::Table>() {
        Ok(t) => t
            .get("x")
            .cloned()
            .unwrap_or(toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    table.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

fn read_value_column(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let last = line
            .rsplit(',')
            .next()
            .ok_or_else(|| CoreError::Config(format!("malformed csv line {i}")))?;
        out.push(
            last.trim()
                .parse::<f64>()
                .map_err(|e| CoreError::Config(format!("bad value on line {i}: {e}")))?,
        );
    }
    Ok(out)
}

fn read_two_columns(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let text = std::fs::read_to_string(path)?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split(',');
        let (a, b) = (cols.next(), cols.next());
        match (a, b) {
            (Some(a), Some(b)) => {
                xs.push(a.trim().parse::<f64>().map_err(|e| {
                    CoreError::Config(format!("bad s on line {i}: {e}"))
                })?);
                ys.push(b.trim().parse::<f64>().map_err(|e| {
                    CoreError::Config(format!("bad value on line {i}: {e}"))
                })?);
            }
            _ => return Err(CoreError::Config(format!("line {i} needs two columns"))),
        }
    }
    Ok((xs, ys))
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[grid]
dim = 1
x_min = [-8.0]
x_max = [8.0]
nx = [33]
v_min = [-2.0]
v_max = [2.0]
nv = [17]
nt = 65
t_final = 1.0

[kernels.eta]
kind = "constant"
value = 0.5

[kernels.gamma]
kind = "constant"
value = 1.0

[kernels.p]
kind = "constant"

[kernels.f0]
kind = "gaussian-bump"
amplitude = 1.0
x_center = [0.0]
x_sigma = [1.5]
v_center = [0.0]
v_sigma = [0.5]
"#;

    #[test]
    fn parse_defaults_and_build() {
        let cfg = ScenarioConfig::from_toml_str(BASE).unwrap();
        assert_eq!(cfg.solver.mapping, MappingKind::JPlus);
        assert_eq!(cfg.solver.weight_rate(), 2.0);
        assert_eq!(cfg.solver.tol, 1e-10);
        assert_eq!(cfg.mc.n_particles, 100_000);
        assert_eq!(cfg.mc.seed, 42);
        assert_eq!(cfg.snapshot_stride(), 7);
        let grid = cfg.build_grid().unwrap();
        assert_eq!(grid.n_x(), 33);
        assert_eq!(grid.n_v(), 17);
        let kernels = cfg.build_kernels(&grid, Path::new(".")).unwrap();
        assert_eq!(kernels.eta.constant_value(), Some(0.5));
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let dir = std::env::temp_dir().join("fireworks-scenario-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("s.toml");
        std::fs::write(&path, BASE).unwrap();
        let cfg = ScenarioConfig::load(
            &path,
            &[
                ("kernels.gamma.value".into(), "0.25".into()),
                ("solver.a".into(), "3.5".into()),
                ("grid.nt".into(), "33".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.grid.nt, 33);
        assert_eq!(cfg.solver.weight_rate(), 3.5);
        let grid = cfg.build_grid().unwrap();
        let ks = cfg.build_kernels(&grid, &dir).unwrap();
        assert_eq!(ks.gamma.constant_value(), Some(0.25));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn validation_names_the_failing_field() {
        let bad = BASE.replace("t_final = 1.0", "t_final =
0.0");
        let err = ScenarioConfig::from_toml_str(&bad);
        assert!(err.is_err());

        let bad = BASE.replace("nx = [33]", "nx = [33, 5]");
        match ScenarioConfig::from_toml_str(&bad) {
            Err(CoreError::Config(msg)) => assert!(msg.contains("nx"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn tabulated_csv_round_trip() {
        let dir = std::env::temp_dir().join("fireworks-scenario-csv");
        std::fs::create_dir_all(&dir).unwrap();
        let mut rows = String::from("x0,v0,value\n");
        for i in 0..(33 * 17) {
            rows.push_str(&format!("0,0,{}\n", i as f64 * 0.001));
        }
        std::fs::write(dir.join("f0.csv"), rows).unwrap();
        let text = BASE.replace(
            "[kernels.f0]\nkind = \"gaussian-bump\"\namplitude = 1.0\nx_center = [0.0]\nx_sigma = [1.5]\nv_center = [0.0]\nv_sigma = [0.5]",
            "[kernels.f0]\nkind = \"tabulated\"\ncsv = \"f0.csv\"",
        );
        let cfg = ScenarioConfig::from_toml_str(&text).unwrap();
        let grid = cfg.build_grid().unwrap();
        let ks = cfg.build_kernels(&grid, &dir).unwrap();
        match ks.f0 {
            ScalarField::Tabulated { values } => assert_eq!(values.len(), 33 * 17),
            other => panic!("expected tabulated field, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
