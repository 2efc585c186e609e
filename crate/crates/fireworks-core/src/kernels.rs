//! Model inputs: the survival ratio `eta`, the explosion rate `gamma`, the
//! velocity redistribution density `p_kernel` and the initial mass density
//! `f0`, as parametric families, plus the physical admissibility checks.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::grid::{PhaseSpaceGrid, Point, MAX_DIM};

/// One-dimensional profile used as a factor of separable fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "kebab-case")]
pub enum Profile1d {
    /// 1 everywhere on the axis box.
    Uniform,
    Gaussian { center: f64, sigma: f64 },
    /// (1 - s^2)^3 for |s| < 1 with s = (u - center)/radius, else 0.
    Bump { center: f64, radius: f64 },
}

impl Profile1d {
    fn eval(&self, u: f64) -> f64 {
        match self {
            Profile1d::Uniform => 1.0,
            Profile1d::Gaussian { center, sigma } => {
                let s = (u - center) / sigma;
                (-0.5 * s * s).exp()
            }
            Profile1d::Bump { center, radius } => {
                let s = (u - center) / radius;
                let q = 1.0 - s * s;
                if q > 0.0 {
                    q * q * q
                } else {
                    0.0
                }
            }
        }
    }
}

/// Scalar field over (t, x, v): the families behind eta, gamma and f0.
///
/// f0 is read at t = 0; the time argument is ignored by time-constant
/// families but kept in the signature so all three inputs share one shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScalarField {
    Constant { value: f64 },
    /// amplitude * prod_a fx_a(x_a) * prod_a fv_a(v_a), optionally damped
    /// in time by exp(-t / t_decay).
    SeparableProduct {
        amplitude: f64,
        x_factors: Vec<Profile1d>,
        v_factors: Vec<Profile1d>,
        #[serde(default)]
        t_decay: Option<f64>,
    },
    /// amplitude * exp(-sum_a ((x_a - cx_a)/sx_a)^2 / 2 - sum_a ((v_a - cv_a)/sv_a)^2 / 2)
    GaussianBump {
        amplitude: f64,
        x_center: Vec<f64>,
        x_sigma: Vec<f64>,
        v_center: Vec<f64>,
        v_sigma: Vec<f64>,
    },
    /// Values sampled on the grid nodes (time-constant), `iv * n_x + ix`.
    Tabulated { values: Vec<f64> },
}

impl ScalarField {
    pub fn constant_value(&self) -> Option<f64> {
        match self {
            ScalarField::Constant { value } => Some(*value),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.constant_value() == Some(0.0)
    }

    /// Pointwise evaluation; pure and thread-safe.
    pub fn eval(&self, t: f64, x: &Point, v: &Point, grid: &PhaseSpaceGrid) -> f64 {
        match self {
            ScalarField::Constant { value } => *value,
            ScalarField::SeparableProduct {
                amplitude,
                x_factors,
                v_factors,
                t_decay,
            } => {
                let mut out = *amplitude;
                for (a, f) in x_factors.iter().enumerate() {
                    out *= f.eval(x[a]);
                }
                for (a, f) in v_factors.iter().enumerate() {
                    out *= f.eval(v[a]);
                }
                if let Some(tau) = t_decay {
                    out *= (-t / tau).exp();
                }
                out
            }
            ScalarField::GaussianBump {
                amplitude,
                x_center,
                x_sigma,
                v_center,
                v_sigma,
            } => {
                let mut e = 0.0;
                for a in 0..grid.dim {
                    let sx = (x[a] - x_center[a]) / x_sigma[a];
                    let sv = (v[a] - v_center[a]) / v_sigma[a];
                    e += 0.5 * (sx * sx + sv * sv);
                }
                amplitude * (-e).exp()
            }
            ScalarField::Tabulated { values } => {
                // nearest velocity row, multilinear in x
                let iv = nearest_v_index(grid, v);
                let row = &values[iv * grid.n_x()..(iv + 1) * grid.n_x()];
                grid.interp_x(row, x)
            }
        }
    }

    fn validate(&self, grid: &PhaseSpaceGrid, name: &str) -> Result<()> {
        match self {
            ScalarField::SeparableProduct {
                x_factors, v_factors, ..
            } => {
                if x_factors.len() != grid.dim || v_factors.len() != grid.dim {
                    return Err(CoreError::Config(format!(
                        "{name}: separable-product needs {} factors per coordinate",
                        grid.dim
                    )));
                }
                Ok(())
            }
            ScalarField::GaussianBump {
                x_center,
                x_sigma,
                v_center,
                v_sigma,
                ..
            } => {
                let d = grid.dim;
                if [x_center.len(), x_sigma.len(), v_center.len(), v_sigma.len()] != [d, d, d, d] {
                    return Err(CoreError::Config(format!(
                        "{name}: gaussian-bump parameter lists must have length {d}"
                    )));
                }
                if x_sigma.iter().chain(v_sigma).any(|&s| s <= 0.0) {
                    return Err(CoreError::Config(format!("{name}: widths must be positive")));
                }
                Ok(())
            }
            ScalarField::Tabulated { values } => {
                if values.len() != grid.n_xv() {
                    return Err(CoreError::Config(format!(
                        "{name}: tabulated field has {} values, grid has {} nodes",
                        values.len(),
                        grid.n_xv()
                    )));
                }
                Ok(())
            }
            ScalarField::Constant { .. } => Ok(()),
        }
    }
}

fn nearest_v_index(grid: &PhaseSpaceGrid, v: &Point) -> usize {
    let mut idx = 0usize;
    for (a, axis) in grid.v_axes.iter().enumerate() {
        let s = ((v[a] - axis.min) / axis.step()).round();
        let i = s.clamp(0.0, (axis.nodes - 1) as f64) as usize;
        idx = idx * axis.nodes + i;
    }
    idx
}

/// Redistribution density family; the argument is s = -xi . xi1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PairKernel {
    /// Constant over the velocity box; 1/volume in analytic mode, exactly
    /// row-normalized on any truncated box.
    Constant,
    /// exp(-((s - center)/width)^2)
    GaussianBump { center: f64, width: f64 },
    /// prod_a exp(-(xi_a * xi1_a / width_a)^2); depends on the per-axis
    /// products only, so it is still a dot-product-style kernel.
    SeparableProduct { widths: Vec<f64> },
    /// Piecewise-linear table of (s, value) pairs, zero outside the table.
    Tabulated { s: Vec<f64>, value: Vec<f64> },
}

/// How p_kernel rows are normalized on the truncated box.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationMode {
    /// Use the family as parameterized (constant family divides by the box
    /// volume, which is exact).
    #[default]
    Analytic,
    /// Rescale each xi row so its xi1 quadrature is exactly 1.
    PerRowNumeric,
}

impl PairKernel {
    fn raw(&self, xi: &Point, xi1: &Point, dim: usize, v_volume: f64) -> f64 {
        match self {
            PairKernel::Constant => 1.0 / v_volume,
            PairKernel::GaussianBump { center, width } => {
                let s = -dot(xi, xi1, dim);
                let u = (s - center) / width;
                (-u * u).exp()
            }
            PairKernel::SeparableProduct { widths } => {
                let mut e = 0.0;
                for a in 0..dim {
                    let u = xi[a] * xi1[a] / widths[a];
                    e += u * u;
                }
                (-e).exp()
            }
            PairKernel::Tabulated { s, value } => {
                let q = -dot(xi, xi1, dim);
                table_interp(s, value, q)
            }
        }
    }
}

fn dot(a: &Point, b: &Point, dim: usize) -> f64 {
    (0..dim).map(|i| a[i] * b[i]).sum()
}

fn table_interp(xs: &[f64], ys: &[f64], q: f64) -> f64 {
    if xs.is_empty() || q < xs[0] || q > xs[xs.len() - 1] {
        return 0.0;
    }
    match xs.binary_search_by(|x| x.partial_cmp(&q).unwrap()) {
        Ok(i) => ys[i],
        Err(i) => {
            let (x0, x1) = (xs[i - 1], xs[i]);
            let w = (q - x0) / (x1 - x0);
            ys[i - 1] * (1.0 - w) + ys[i] * w
        }
    }
}

/// The model data: all four inputs plus the p_kernel normalization mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSet {
    pub eta: ScalarField,
    pub gamma: ScalarField,
    pub p_kernel: PairKernel,
    #[serde(default)]
    pub p_normalization: NormalizationMode,
    pub f0: ScalarField,
}

impl KernelSet {
    pub fn validate(&self, grid: &PhaseSpaceGrid) -> Result<()> {
        self.eta.validate(grid, "eta")?;
        self.gamma.validate(grid, "gamma")?;
        self.f0.validate(grid, "f0")?;
        if let PairKernel::SeparableProduct { widths } = &self.p_kernel {
            if widths.len() != grid.dim {
                return Err(CoreError::Config(
                    "p_kernel: separable-product needs one width per axis".into(),
                ));
            }
        }
        if let PairKernel::Tabulated { s, value } = &self.p_kernel {
            if s.len() != value.len() || s.len() < 2 {
                return Err(CoreError::Config("p_kernel: table needs matching s/value columns".into()));
            }
            if s.windows(2).any(|w| w[0] >= w[1]) {
                return Err(CoreError::Config("p_kernel: table s column must be increasing".into()));
            }
        }
        Ok(())
    }

    /// Discretized redistribution matrix, row-major `[xi][xi1]`, with the
    /// configured normalization applied.
    pub fn p_matrix(&self, grid: &PhaseSpaceGrid) -> Result<Vec<f64>> {
        let n_v = grid.n_v();
        let vol = grid.v_volume();
        let mut m = vec![0.0; n_v * n_v];
        for i in 0..n_v {
            let xi = grid.v_node(i);
            let row = &mut m[i * n_v..(i + 1) * n_v];
            for (j, out) in row.iter_mut().enumerate() {
                let p = self.p_kernel.raw(xi, grid.v_node(j), grid.dim, vol);
                if !p.is_finite() {
                    return Err(CoreError::NonFiniteModel {
                        field: "p_kernel".into(),
                        location: format!("(xi node {i}, xi1 node {j})"),
                    });
                }
                *out = p;
            }
            if self.p_normalization == NormalizationMode::PerRowNumeric {
                let q: f64 = row.iter().zip(grid.v_weights()).map(|(p, w)| p * w).sum();
                if q <= 0.0 {
                    return Err(CoreError::Config(format!(
                        "p_kernel row {i} has zero quadrature; cannot normalize"
                    )));
                }
                for p in row.iter_mut() {
                    *p /= q;
                }
            }
        }
        Ok(m)
    }

    /// Samples one scalar field on the full (x, v) grid at time `t`,
    /// laid out `iv * n_x + ix`.
    pub fn sample_field(
        &self,
        which: FieldSelector,
        t: f64,
        grid: &PhaseSpaceGrid,
    ) -> Result<Vec<f64>> {
        let field = self.field(which);
        let n_x = grid.n_x();
        let mut out = vec![0.0; grid.n_xv()];
        for iv in 0..grid.n_v() {
            let v = grid.v_node(iv);
            for ix in 0..n_x {
                let val = field.eval(t, grid.x_node(ix), v, grid);
                if !val.is_finite() {
                    return Err(CoreError::NonFiniteModel {
                        field: which.name().into(),
                        location: format!("(t = {t}, x node {ix}, v node {iv})"),
                    });
                }
                out[iv * n_x + ix] = val;
            }
        }
        Ok(out)
    }

    fn field(&self, which: FieldSelector) -> &ScalarField {
        match which {
            FieldSelector::Eta => &self.eta,
            FieldSelector::Gamma => &self.gamma,
            FieldSelector::F0 => &self.f0,
        }
    }

    pub fn l1_f0(&self, grid: &PhaseSpaceGrid) -> Result<f64> {
        let f0 = self.sample_field(FieldSelector::F0, 0.0, grid)?;
        Ok(grid.slice_l1(&f0))
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum FieldSelector {
    Eta,
    Gamma,
    F0,
}

impl FieldSelector {
    fn name(&self) -> &'static str {
        match self {
            FieldSelector::Eta => "eta",
            FieldSelector::Gamma => "gamma",
            FieldSelector::F0 => "f0",
        }
    }
}

/// All four inputs sampled on the grid at one time.
#[derive(Debug)]
pub struct SampledKernels {
    pub eta: Vec<f64>,
    pub gamma: Vec<f64>,
    /// `n_v x n_v` row-major redistribution matrix (normalization applied).
    pub p_matrix: Vec<f64>,
    pub f0: Vec<f64>,
}

/// Samples eta, gamma, p and f0 on the grid nodes at time `t`.
pub fn eval_kernels(kernel_set: &KernelSet, t: f64, grid: &PhaseSpaceGrid) -> Result<SampledKernels> {
    if t < 0.0 {
        return Err(CoreError::InvalidArgument(format!("t must be nonnegative, got {t}")));
    }
    kernel_set.validate(grid)?;
    Ok(SampledKernels {
        eta: kernel_set.sample_field(FieldSelector::Eta, t, grid)?,
        gamma: kernel_set.sample_field(FieldSelector::Gamma, t, grid)?,
        p_matrix: kernel_set.p_matrix(grid)?,
        f0: kernel_set.sample_field(FieldSelector::F0, 0.0, grid)?,
    })
}

/// One admissibility condition outcome.
#[derive(Clone, Debug, Serialize)]
pub struct ConditionCheck {
    pub name: String,
    pub passed: bool,
    /// Worst offending value (meaning depends on the condition).
    pub worst_value: f64,
    pub worst_location: String,
    pub detail: String,
}

/// Pass/fail report over the physical conditions; violations are entries,
/// not errors.
#[derive(Clone, Debug, Serialize)]
pub struct AdmissibilityReport {
    pub conditions: Vec<ConditionCheck>,
}

impl AdmissibilityReport {
    pub fn passed(&self) -> bool {
        self.conditions.iter().all(|c| c.passed)
    }
}

/// Accepted deviation of a p_kernel row quadrature from 1 before the
/// normalization condition is reported as failed.
pub const ROW_NORM_TOL: f64 = 1e-8;

/// Checks the bounds on eta and gamma, nonnegativity and row normalization
/// of p, and nonnegativity plus finite mass of f0, sampled on the grid and
/// on the run's time nodes.
pub fn check_admissibility(kernel_set: &KernelSet, grid: &PhaseSpaceGrid) -> Result<AdmissibilityReport> {
    kernel_set.validate(grid)?;
    let mut conditions = Vec::new();

    for (name, which) in [("eta", FieldSelector::Eta), ("gamma", FieldSelector::Gamma)] {
        let mut worst = f64::NEG_INFINITY;
        let mut worst_loc = String::new();
        // time-constant families need one sample; others are checked on the
        // run's own time nodes
        let t_samples: Vec<f64> = match kernel_set.field(which) {
            ScalarField::SeparableProduct { t_decay: Some(_), .. } => grid.times(),
            _ => vec![0.0],
        };
        for &t in &t_samples {
            let sampled = kernel_set.sample_field(which, t, grid)?;
            for (idx, &val) in sampled.iter().enumerate() {
                let excess = (val - 1.0).max(-val);
                if excess > worst {
                    worst = excess;
                    let (iv, ix) = (idx / grid.n_x(), idx % grid.n_x());
                    worst_loc = format!("t = {t}, x node {ix}, v node {iv} (value {val})");
                }
            }
        }
        conditions.push(ConditionCheck {
            name: format!("{name} in [0, 1]"),
            passed: worst <= 0.0,
            worst_value: worst.max(0.0),
            worst_location: worst_loc,
            detail: "largest excursion outside [0, 1]".into(),
        });
    }

    let p = kernel_set.p_matrix(grid)?;
    let n_v = grid.n_v();
    let mut min_p = f64::INFINITY;
    let mut min_loc = String::new();
    let mut worst_row_dev = 0.0;
    let mut worst_row = 0usize;
    for i in 0..n_v {
        let row = &p[i * n_v..(i + 1) * n_v];
        for (j, &val) in row.iter().enumerate() {
            if val < min_p {
                min_p = val;
                min_loc = format!("(xi node {i}, xi1 node {j})");
            }
        }
        let q: f64 = row.iter().zip(grid.v_weights()).map(|(p, w)| p * w).sum();
        if (q - 1.0).abs() > worst_row_dev {
            worst_row_dev = (q - 1.0).abs();
            worst_row = i;
        }
    }
    conditions.push(ConditionCheck {
        name: "p_kernel nonnegative".into(),
        passed: min_p >= 0.0,
        worst_value: min_p,
        worst_location: min_loc,
        detail: "minimum sampled value".into(),
    });
    conditions.push(ConditionCheck {
        name: "p_kernel rows normalized".into(),
        passed: worst_row_dev <= ROW_NORM_TOL,
        worst_value: worst_row_dev,
        worst_location: format!("xi node {worst_row}"),
        detail: format!("largest |row quadrature - 1| (tolerance {ROW_NORM_TOL:.0e})"),
    });

    let f0 = kernel_set.sample_field(FieldSelector::F0, 0.0, grid)?;
    let (mut min_f0, mut min_idx) = (f64::INFINITY, 0usize);
    for (idx, &val) in f0.iter().enumerate() {
        if val < min_f0 {
            min_f0 = val;
            min_idx = idx;
        }
    }
    let mass = grid.slice_l1(&f0);
    conditions.push(ConditionCheck {
        name: "f0 nonnegative".into(),
        passed: min_f0 >= 0.0,
        worst_value: min_f0,
        worst_location: format!(
            "x node {}, v node {}",
            min_idx % grid.n_x(),
            min_idx / grid.n_x()
        ),
        detail: "minimum sampled value".into(),
    });
    conditions.push(ConditionCheck {
        name: "f0 has finite mass".into(),
        passed: mass.is_finite(),
        worst_value: mass,
        worst_location: "whole grid".into(),
        detail: "initial mass quadrature".into(),
    });

    Ok(AdmissibilityReport { conditions })
}

/// Result of the uniform-fraction estimate behind the mass-decay condition.
#[derive(Clone, Debug, Serialize)]
pub struct DeltaEstimate {
    pub delta: f64,
    /// True when delta < 1 (strict mass loss per explosion).
    pub satisfied: bool,
    pub worst_t: f64,
    pub worst_x_node: usize,
    pub worst_v1_node: usize,
}

/// Maximum over sampled (t, x, xi1) of the xi quadrature of
/// eta(t, x, xi) * p(xi, xi1). Linear in eta.
pub fn estimate_delta(
    kernel_set: &KernelSet,
    grid: &PhaseSpaceGrid,
    t_samples: &[f64],
) -> Result<DeltaEstimate> {
    if t_samples.is_empty() {
        return Err(CoreError::InvalidArgument("estimate_delta needs at least one time sample".into()));
    }
    let p = kernel_set.p_matrix(grid)?;
    let n_v = grid.n_v();
    let n_x = grid.n_x();
    let wv = grid.v_weights();

    let mut best = f64::NEG_INFINITY;
    let mut worst = (0.0f64, 0usize, 0usize);
    for &t in t_samples {
        let eta = kernel_set.sample_field(FieldSelector::Eta, t, grid)?;
        for ix in 0..n_x {
            for j1 in 0..n_v {
                // column quadrature: sum over xi of w(xi) eta(xi) p[xi][j1]
                let mut q = 0.0;
                for i in 0..n_v {
                    q += wv[i] * eta[i * n_x + ix] * p[i * n_v + j1];
                }
                if q > best {
                    best = q;
                    worst = (t, ix, j1);
                }
            }
        }
    }
    Ok(DeltaEstimate {
        delta: best,
        satisfied: best < 1.0,
        worst_t: worst.0,
        worst_x_node: worst.1,
        worst_v1_node: worst.2,
    })
}

/// Convenience constructor for a uniform initial state over the spatial box
/// with a Gaussian velocity profile.
pub fn homogeneous_f0(amplitude: f64, v_sigma: f64, dim: usize) -> ScalarField {
    ScalarField::SeparableProduct {
        amplitude,
        x_factors: vec![Profile1d::Uniform; dim],
        v_factors: vec![
            Profile1d::Gaussian {
                center: 0.0,
                sigma: v_sigma,
            };
            dim.min(MAX_DIM)
        ],
        t_decay: None,
    }
}
