//! Truncated uniform phase-space grids, trapezoidal quadrature and
//! multilinear off-grid evaluation.
//!
//! Positions and velocities live on tensor grids over closed boxes; the
//! velocity coordinate may be reinterpreted as momentum through a
//! sublight advection map. Everything here is pure and immutable after
//! construction.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Maximum supported spatial/velocity dimension.
pub const MAX_DIM: usize = 3;

/// Fixed-size coordinate; axes beyond `dim` are zero.
pub type Point = [f64; MAX_DIM];

/// One axis: `nodes` uniformly spaced points on `[min, max]`, endpoints included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisSpec {
    pub min: f64,
    pub max: f64,
    pub nodes: usize,
}

impl AxisSpec {
    pub fn new(min: f64, max: f64, nodes: usize) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) || max <= min {
            return Err(CoreError::InvalidArgument(format!(
                "axis interval [{min}, {max}] must be finite with positive length"
            )));
        }
        if nodes < 2 {
            return Err(CoreError::InvalidArgument(format!(
                "axis needs at least 2 nodes, got {nodes}"
            )));
        }
        Ok(Self { min, max, nodes })
    }

    #[inline]
    pub fn step(&self) -> f64 {
        (self.max - self.min) / (self.nodes - 1) as f64
    }

    #[inline]
    pub fn node(&self, i: usize) -> f64 {
        self.min + self.step() * i as f64
    }

    pub fn length(&self) -> f64 {
        self.max - self.min
    }
}

/// Advection map applied to the velocity-box coordinate.
///
/// `Identity` advects with the coordinate itself. `Relativistic` reads the
/// coordinate as momentum and advects with p/sqrt(1+|p|^2), which is
/// strictly inside the unit ball (light speed 1).
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VelocityMap {
    #[default]
    Identity,
    Relativistic,
}

/// Sublight map p -> p/sqrt(1+|p|^2); odd, monotone per axis, |result| < 1.
pub fn relativistic_velocity_map(p: &Point, dim: usize) -> Point {
    let norm_sq: f64 = p[..dim].iter().map(|c| c * c).sum();
    let scale = 1.0 / (1.0 + norm_sq).sqrt();
    let mut out = [0.0; MAX_DIM];
    for a in 0..dim {
        out[a] = p[a] * scale;
    }
    out
}

impl VelocityMap {
    pub fn apply(&self, v: &Point, dim: usize) -> Point {
        match self {
            VelocityMap::Identity => *v,
            VelocityMap::Relativistic => relativistic_velocity_map(v, dim),
        }
    }
}

/// Truncated tensor grid over space x velocity with a uniform time grid.
///
/// Node layout is row-major over axes; flattened (x, v) slices are indexed
/// `iv * n_x + ix` so the innermost spatial axis is contiguous.
#[derive(Clone, Debug)]
pub struct PhaseSpaceGrid {
    pub dim: usize,
    pub x_axes: Vec<AxisSpec>,
    pub v_axes: Vec<AxisSpec>,
    pub nt: usize,
    pub dt: f64,
    pub velocity_map: VelocityMap,
    n_x: usize,
    n_v: usize,
    x_weights: Vec<f64>,
    v_weights: Vec<f64>,
    /// Combined (v, x) quadrature weights, `iv * n_x + ix`.
    xv_weights: Vec<f64>,
    x_nodes: Vec<Point>,
    v_nodes: Vec<Point>,
    /// Advection velocity per velocity node (after the velocity map).
    v_advect: Vec<Point>,
}

fn tensor_weights(axes: &[AxisSpec]) -> Vec<f64> {
    let mut weights = vec![1.0];
    for axis in axes {
        let h = axis.step();
        let mut axis_w = vec![h; axis.nodes];
        axis_w[0] = 0.5 * h;
        axis_w[axis.nodes - 1] = 0.5 * h;
        let mut next = Vec::with_capacity(weights.len() * axis.nodes);
        for w in &weights {
            for aw in &axis_w {
                next.push(w * aw);
            }
        }
        weights = next;
    }
    weights
}

fn tensor_nodes(axes: &[AxisSpec], dim: usize) -> Vec<Point> {
    let mut nodes: Vec<Point> = vec![[0.0; MAX_DIM]];
    for (a, axis) in axes.iter().enumerate() {
        let mut next = Vec::with_capacity(nodes.len() * axis.nodes);
        for base in &nodes {
            for i in 0..axis.nodes {
                let mut p = *base;
                p[a] = axis.node(i);
                next.push(p);
            }
        }
        nodes = next;
    }
    debug_assert_eq!(axes.len(), dim);
    nodes
}

impl PhaseSpaceGrid {
    pub fn new(
        x_axes: Vec<AxisSpec>,
        v_axes: Vec<AxisSpec>,
        nt: usize,
        dt: f64,
        velocity_map: VelocityMap,
    ) -> Result<Self> {
        let dim = x_axes.len();
        if dim == 0 || dim > MAX_DIM {
            return Err(CoreError::InvalidArgument(format!(
                "dimension must be 1..={MAX_DIM}, got {dim}"
            )));
        }
        if v_axes.len() != dim {
            return Err(CoreError::InvalidArgument(
                "space and velocity must have the same dimension".into(),
            ));
        }
        if nt < 2 {
            return Err(CoreError::InvalidArgument(format!(
                "need at least 2 time nodes, got {nt}"
            )));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(CoreError::InvalidArgument(format!("dt must be positive, got {dt}")));
        }

        let n_x: usize = x_axes.iter().map(|a| a.nodes).product();
        let n_v: usize = v_axes.iter().map(|a| a.nodes).product();
        let x_weights = tensor_weights(&x_axes);
        let v_weights = tensor_weights(&v_axes);
        let mut xv_weights = Vec::with_capacity(n_x * n_v);
        for wv in &v_weights {
            for wx in &x_weights {
                xv_weights.push(wv * wx);
            }
        }
        let x_nodes = tensor_nodes(&x_axes, dim);
        let v_nodes = tensor_nodes(&v_axes, dim);
        let v_advect = v_nodes.iter().map(|v| velocity_map.apply(v, dim)).collect();

        Ok(Self {
            dim,
            x_axes,
            v_axes,
            nt,
            dt,
            velocity_map,
            n_x,
            n_v,
            x_weights,
            v_weights,
            xv_weights,
            x_nodes,
            v_nodes,
            v_advect,
        })
    }

    #[inline]
    pub fn n_x(&self) -> usize {
        self.n_x
    }

    #[inline]
    pub fn n_v(&self) -> usize {
        self.n_v
    }

    /// Number of nodes in one (x, v) slice.
    #[inline]
    pub fn n_xv(&self) -> usize {
        self.n_x * self.n_v
    }

    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        self.dt * k as f64
    }

    pub fn t_final(&self) -> f64 {
        self.time(self.nt - 1)
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.nt).map(|k| self.time(k)).collect()
    }

    /// Index of the time node equal to `t`, within a small matching tolerance.
    pub fn time_index(&self, t: f64) -> Result<usize> {
        let k = (t / self.dt).round();
        if k < 0.0 || k as usize >= self.nt || (t - self.dt * k).abs() > 1e-9 * self.dt.max(1.0) {
            return Err(CoreError::InvalidArgument(format!(
                "t = {t} is not a node of the time grid (dt = {}, nt = {})",
                self.dt, self.nt
            )));
        }
        Ok(k as usize)
    }

    #[inline]
    pub fn x_node(&self, ix: usize) -> &Point {
        &self.x_nodes[ix]
    }

    #[inline]
    pub fn v_node(&self, iv: usize) -> &Point {
        &self.v_nodes[iv]
    }

    /// Advection velocity of velocity node `iv` (velocity map applied).
    #[inline]
    pub fn advection(&self, iv: usize) -> &Point {
        &self.v_advect[iv]
    }

    pub fn max_advection_speed(&self) -> f64 {
        self.v_advect
            .iter()
            .map(|v| v[..self.dim].iter().map(|c| c * c).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    pub fn x_weights(&self) -> &[f64] {
        &self.x_weights
    }

    pub fn v_weights(&self) -> &[f64] {
        &self.v_weights
    }

    pub fn xv_weights(&self) -> &[f64] {
        &self.xv_weights
    }

    pub fn x_volume(&self) -> f64 {
        self.x_axes.iter().map(|a| a.length()).product()
    }

    pub fn v_volume(&self) -> f64 {
        self.v_axes.iter().map(|a| a.length()).product()
    }

    /// Weighted sum of `values` against `weights`; linear in `values`.
    pub fn quadrature(values: &[f64], weights: &[f64]) -> Result<f64> {
        if values.len() != weights.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "quadrature over {} values with {} weights",
                values.len(),
                weights.len()
            )));
        }
        Ok(values.iter().zip(weights).map(|(v, w)| v * w).sum())
    }

    /// L1 quadrature of an (x, v) slice laid out `iv * n_x + ix`.
    pub fn slice_l1(&self, slice: &[f64]) -> f64 {
        debug_assert_eq!(slice.len(), self.n_xv());
        slice
            .iter()
            .zip(&self.xv_weights)
            .map(|(v, w)| v.abs() * w)
            .sum()
    }

    /// Plain (signed) integral of an (x, v) slice.
    pub fn slice_integral(&self, slice: &[f64]) -> f64 {
        debug_assert_eq!(slice.len(), self.n_xv());
        slice.iter().zip(&self.xv_weights).map(|(v, w)| v * w).sum()
    }

    /// Multilinear interpolation of a spatial block (`n_x` values, row-major
    /// over x axes) at an arbitrary point; zero outside the box.
    pub fn interp_x(&self, values: &[f64], point: &Point) -> f64 {
        debug_assert_eq!(values.len(), self.n_x);
        // Per-axis cell index and fractional offset.
        let mut idx = [0usize; MAX_DIM];
        let mut frac = [0.0f64; MAX_DIM];
        for a in 0..self.dim {
            let axis = &self.x_axes[a];
            let s = (point[a] - axis.min) / axis.step();
            if s < 0.0 || s > (axis.nodes - 1) as f64 {
                return 0.0;
            }
            let mut i = s.floor() as usize;
            if i >= axis.nodes - 1 {
                i = axis.nodes - 2;
            }
            idx[a] = i;
            frac[a] = s - i as f64;
        }
        // Row-major strides: last axis contiguous.
        let mut strides = [0usize; MAX_DIM];
        let mut acc = 1usize;
        for a in (0..self.dim).rev() {
            strides[a] = acc;
            acc *= self.x_axes[a].nodes;
        }
        let corners = 1usize << self.dim;
        let mut out = 0.0;
        for c in 0..corners {
            let mut w = 1.0;
            let mut off = 0usize;
            for a in 0..self.dim {
                if c >> a & 1 == 1 {
                    w *= frac[a];
                    off += strides[a] * (idx[a] + 1);
                } else {
                    w *= 1.0 - frac[a];
                    off += strides[a] * idx[a];
                }
            }
            // skip zero-weight corners so on-node samples never touch the
            // neighbouring value
            if w != 0.0 {
                out += w * values[off];
            }
        }
        out
    }

    /// L1 and max of the second differences of an (x, v) slice along every
    /// spatial axis; `sum / h^2` estimates the integral of |d2f/dx2| and
    /// `max` the pointwise curvature, both used for interpolation-error
    /// allowances.
    pub fn x_second_differences(&self, slice: &[f64]) -> (f64, f64) {
        debug_assert_eq!(slice.len(), self.n_xv());
        let n_x = self.n_x;
        let mut strides = [0usize; MAX_DIM];
        let mut acc = 1usize;
        for a in (0..self.dim).rev() {
            strides[a] = acc;
            acc *= self.x_axes[a].nodes;
        }
        let mut l1 = 0.0;
        let mut max = 0.0f64;
        for iv in 0..self.n_v {
            let row = &slice[iv * n_x..(iv + 1) * n_x];
            let w_row = &self.xv_weights[iv * n_x..(iv + 1) * n_x];
            for a in 0..self.dim {
                let stride = strides[a];
                let nodes = self.x_axes[a].nodes;
                for ix in 0..n_x {
                    let pos = ix / stride % nodes;
                    if pos == 0 || pos == nodes - 1 {
                        continue;
                    }
                    let d2 = row[ix + stride] - 2.0 * row[ix] + row[ix - stride];
                    l1 += d2.abs() * w_row[ix];
                    max = max.max(d2.abs());
                }
            }
        }
        (l1, max)
    }

    /// Samples `src` (a spatial block) at every node shifted by `shift`:
    /// `dst[ix] = interp(src, x_node(ix) + shift)`, zero extension outside.
    ///
    /// The shift is constant over the block, so the interpolation weights are
    /// shared by all nodes; this is the workhorse behind streaming and the
    /// characteristic restriction.
    pub fn shifted_sample(&self, src: &[f64], shift: &Point, dst: &mut [f64]) {
        debug_assert_eq!(src.len(), self.n_x);
        debug_assert_eq!(dst.len(), self.n_x);
        if self.dim == 1 {
            self.shifted_sample_1d(src, shift[0], dst);
            return;
        }
        for (ix, out) in dst.iter_mut().enumerate() {
            let node = &self.x_nodes[ix];
            let mut p = [0.0; MAX_DIM];
            for a in 0..self.dim {
                p[a] = node[a] + shift[a];
            }
            *out = self.interp_x(src, &p);
        }
    }

    fn shifted_sample_1d(&self, src: &[f64], shift: f64, dst: &mut [f64]) {
        let axis = &self.x_axes[0];
        let n = axis.nodes as i64;
        let s = shift / axis.step();
        let k = s.floor();
        let alpha = s - k;
        let k = k as i64;
        dst.fill(0.0);
        // dst[i] = (1-alpha) src[i+k] + alpha src[i+k+1]; the sample point
        // i + s must stay inside [0, n-1], else zero extension applies
        if alpha == 0.0 {
            let lo = (-k).max(0);
            let hi = (n - k).min(n).max(lo);
            for i in lo..hi {
                dst[i as usize] = src[(i + k) as usize];
            }
            return;
        }
        let lo = (-k).max(0);
        let hi = (n - 1 - k).min(n).max(lo);
        for i in lo..hi {
            dst[i as usize] =
                (1.0 - alpha) * src[(i + k) as usize] + alpha * src[(i + k + 1) as usize];
        }
    }
}

/// Splits `0..n` into at most `workers` contiguous ranges and runs `body` on
/// each in its own scoped thread. Outputs must be written through disjoint
/// slices; reductions belong to the caller, in index order.
pub fn run_chunked<F>(workers: usize, n: usize, body: F)
where
    F: Fn(std::ops::Range<usize>) + Sync,
{
    let workers = workers.max(1).min(n.max(1));
    if workers == 1 || n < 2 {
        body(0..n);
        return;
    }
    let chunk = n.div_ceil(workers);
    std::thread::scope(|scope| {
        for w in 0..workers {
            let lo = w * chunk;
            let hi = ((w + 1) * chunk).min(n);
            if lo >= hi {
                break;
            }
            let body = &body;
            scope.spawn(move || body(lo..hi));
        }
    });
}
