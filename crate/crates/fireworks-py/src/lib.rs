//! Python bindings: scenario loading, the admissibility checks, the
//! fixed-point solver and the particle comparison, with field access as
//! flat float lists.

use std::path::Path;
use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use fireworks_core::analysis::{mass_trace, shipped_test_bumps, weak_residual};
use fireworks_core::field::DistributionField;
use fireworks_core::grid::{relativistic_velocity_map as rel_map, PhaseSpaceGrid, MAX_DIM};
use fireworks_core::kernels::{check_admissibility, estimate_delta, FieldSelector, KernelSet};
use fireworks_core::runner::{cmd_compare, RunOptions};
use fireworks_core::scenario::ScenarioConfig;
use fireworks_core::solver::{picard_solve, OperatorContext, PicardSettings};
use fireworks_core::tolerances::QuadTolerances;
use fireworks_core::CoreError;

fn to_py_err(e: CoreError) -> PyErr {
    match e {
        CoreError::InvalidArgument(_) | CoreError::Config(_) | CoreError::ShapeMismatch(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, value: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match value {
        serde_json::Value::Null => py.None().into_bound(py),
        serde_json::Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        serde_json::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_pyobject(py)?.into_any()
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any()
            }
        }
        serde_json::Value::String(s) => s.into_pyobject(py)?.into_any(),
        serde_json::Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any()
        }
        serde_json::Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, v) in map {
                dict.set_item(k, json_to_py(py, v)?)?;
            }
            dict.into_any()
        }
    })
}

fn serialize_to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let json = serde_json::to_value(value)
        .map_err(|e| PyRuntimeError::new_err(format!("encode: {e}")))?;
    json_to_py(py, &json)
}

/// A parsed scenario; the entry point for everything else.
#[pyclass]
struct Scenario {
    config: ScenarioConfig,
    base_dir: std::path::PathBuf,
}

#[pymethods]
impl Scenario {
    /// Parses a TOML scenario from text.
    #[new]
    fn new(toml_text: &str) -> PyResult<Self> {
        let config = ScenarioConfig::from_toml_str(toml_text).map_err(to_py_err)?;
        Ok(Self {
            config,
            base_dir: std::path::PathBuf::from("."),
        })
    }

    /// Loads a scenario file; kernel CSV paths resolve against its folder.
    #[staticmethod]
    fn from_file(path: &str) -> PyResult<Self> {
        let path = Path::new(path);
        let config = ScenarioConfig::load(path, &[]).map_err(to_py_err)?;
        Ok(Self {
            config,
            base_dir: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        })
    }

    /// Admissibility report plus the uniform redistribution bound, as a dict.
    fn check(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let (grid, kernels) = self.build()?;
        let report = check_admissibility(&kernels, &grid).map_err(to_py_err)?;
        let delta = estimate_delta(&kernels, &grid, &grid.times()).map_err(to_py_err)?;
        let out = PyDict::new(py);
        out.set_item("conditions", serialize_to_py(py, &report)?)?;
        out.set_item("delta", delta.delta)?;
        out.set_item("delta_below_one", delta.satisfied)?;
        out.set_item("passed", report.passed() && delta.satisfied)?;
        Ok(out.into_any().unbind())
    }

    /// Runs the fixed-point solver.
    #[pyo3(signature = (workers = 2))]
    fn solve(&self, workers: usize) -> PyResult<Solution> {
        let (grid, kernels) = self.build()?;
        let ctx = OperatorContext::new(&kernels, grid.clone(), workers).map_err(to_py_err)?;
        let settings = PicardSettings {
            mapping: self.config.solver.mapping,
            a: self.config.solver.weight_rate(),
            tol: self.config.solver.tol,
            max_iter: self.config.solver.max_iter,
        };
        let (field, diagnostics) = picard_solve(&ctx, &settings).map_err(to_py_err)?;
        Ok(Solution {
            grid,
            kernels,
            ctx: Arc::new(ctx),
            field,
            iterations: diagnostics.iterations,
            converged: diagnostics.converged,
            residuals: diagnostics.residual_history,
            ratios: diagnostics.contraction_ratios,
        })
    }

    /// Deterministic-vs-particle comparison rows (writes artifacts under
    /// `out_dir`).
    #[pyo3(signature = (out_dir, workers = 2))]
    fn compare(&self, py: Python<'_>, out_dir: &str, workers: usize) -> PyResult<Py<PyAny>> {
        let opts = RunOptions {
            workers,
            out_dir: Some(out_dir.into()),
            seed: None,
            base_dir: self.base_dir.clone(),
        };
        let outcome = cmd_compare(&self.config, &opts)
            .map_err(|e| PyRuntimeError::new_err(e.message()))?;
        serialize_to_py(py, &outcome.rows).map(|b| b.unbind())
    }

    fn delta(&self) -> PyResult<f64> {
        let (grid, kernels) = self.build()?;
        Ok(estimate_delta(&kernels, &grid, &grid.times())
            .map_err(to_py_err)?
            .delta)
    }

    fn __repr__(&self) -> String {
        format!(
            "Scenario(dim={}, nx={:?}, nv={:?}, nt={}, t_final={})",
            self.config.grid.dim,
            self.config.grid.nx,
            self.config.grid.nv,
            self.config.grid.nt,
            self.config.grid.t_final
        )
    }
}

impl Scenario {
    fn build(&self) -> PyResult<(Arc<PhaseSpaceGrid>, KernelSet)> {
        let grid = self.config.build_grid().map_err(to_py_err)?;
        let kernels = self
            .config
            .build_kernels(&grid, &self.base_dir)
            .map_err(to_py_err)?;
        Ok((grid, kernels))
    }
}

/// A converged run: the field along characteristics plus diagnostics.
#[pyclass]
struct Solution {
    grid: Arc<PhaseSpaceGrid>,
    kernels: KernelSet,
    ctx: Arc<OperatorContext>,
    field: DistributionField,
    #[pyo3(get)]
    iterations: usize,
    #[pyo3(get)]
    converged: bool,
    residuals: Vec<f64>,
    ratios: Vec<f64>,
}

#[pymethods]
impl Solution {
    /// (time nodes, velocity nodes, spatial nodes)
    fn shape(&self) -> (usize, usize, usize) {
        (self.grid.nt, self.grid.n_v(), self.grid.n_x())
    }

    fn times(&self) -> Vec<f64> {
        self.grid.times()
    }

    fn residual_history(&self) -> Vec<f64> {
        self.residuals.clone()
    }

    fn contraction_ratios(&self) -> Vec<f64> {
        self.ratios.clone()
    }

    /// Mass per time node.
    fn mass(&self) -> Vec<f64> {
        (0..self.grid.nt).map(|k| self.field.mass_at(k)).collect()
    }

    /// L1 norm at one time node.
    fn l1(&self, k: usize) -> PyResult<f64> {
        self.check_node(k)?;
        Ok(self.field.l1_at(k))
    }

    /// sup over time of exp(-a t) times the L1 norm.
    fn weighted_norm(&self, a: f64) -> PyResult<f64> {
        if a <= 0.0 {
            return Err(PyValueError::new_err("weight rate must be positive"));
        }
        Ok(self.field.weighted_norm(a))
    }

    /// Values along characteristics at node k, flat over (v, x).
    fn slice(&self, k: usize) -> PyResult<Vec<f64>> {
        self.check_node(k)?;
        Ok(self.field.slice(k).to_vec())
    }

    /// Eulerian values at node k, flat over (v, x).
    #[pyo3(signature = (k, workers = 2))]
    fn eulerian_slice(&self, k: usize, workers: usize) -> PyResult<Vec<f64>> {
        self.check_node(k)?;
        Ok(self.field.eulerian_slice(k, workers))
    }

    fn min_value(&self) -> f64 {
        self.field.min_value()
    }

    /// Mass trace with the decay-inequality verdicts, as a dict.
    fn mass_inequalities(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let delta = estimate_delta(&self.kernels, &self.grid, &self.grid.times())
            .map_err(to_py_err)?
            .delta;
        let gamma_max = self
            .kernels
            .sample_field(FieldSelector::Gamma, self.grid.t_final(), &self.grid)
            .map_err(to_py_err)?
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        let (curv_l1, curv_max) = self.grid.x_second_differences(self.ctx.f0());
        let eps = QuadTolerances::derive(
            self.ctx.l1_f0(),
            self.field.max_abs(),
            self.grid.dt,
            gamma_max,
            delta,
            self.grid.t_final(),
            curv_l1,
            curv_max,
        );
        let trace = mass_trace(&self.field, &self.ctx, delta, eps.mass_ineq, eps.positivity)
            .map_err(to_py_err)?;
        let out = PyDict::new(py);
        out.set_item("mass", trace.mass.clone())?;
        out.set_item("gamma_weighted_mass", trace.gamma_weighted_mass.clone())?;
        out.set_item("delta", trace.delta)?;
        out.set_item("eps_quad", trace.eps_quad)?;
        out.set_item("differential_holds", trace.diff_inequality_holds())?;
        out.set_item("integrated_holds", trace.int_inequality_holds())?;
        Ok(out.into_any().unbind())
    }

    /// Weak-form residuals against the three shipped test bumps.
    fn weak_residuals(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let list = PyList::empty(py);
        for bump in shipped_test_bumps(&self.grid) {
            let r = weak_residual(&self.field, &self.ctx, &bump).map_err(to_py_err)?;
            let d = PyDict::new(py);
            d.set_item("residual", r.residual)?;
            d.set_item("allowance", r.allowance)?;
            list.append(d)?;
        }
        Ok(list.into_any().unbind())
    }
}

impl Solution {
    fn check_node(&self, k: usize) -> PyResult<()> {
        if k >= self.grid.nt {
            return Err(PyValueError::new_err(format!(
                "time node {k} outside 0..{}",
                self.grid.nt
            )));
        }
        Ok(())
    }
}

/// Sublight momentum-to-velocity map p -> p / sqrt(1 + |p|^2).
#[pyfunction]
fn relativistic_velocity_map(p: Vec<f64>) -> PyResult<Vec<f64>> {
    if p.is_empty() || p.len() > MAX_DIM {
        return Err(PyValueError::new_err("momentum must have 1 to 3 components"));
    }
    let mut point = [0.0; MAX_DIM];
    point[..p.len()].copy_from_slice(&p);
    let out = rel_map(&point, p.len());
    Ok(out[..p.len()].to_vec())
}

#[pymodule]
fn fireworks_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scenario>()?;
    m.add_class::<Solution>()?;
    m.add_function(wrap_pyfunction!(relativistic_velocity_map, m)?)?;
    Ok(())
}
