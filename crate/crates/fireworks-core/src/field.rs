//! Time-indexed mass-density fields on the phase-space grid.
//!
//! A field stores one (x, v) slice per time node. Two representations are
//! used: `Eulerian` values f(t, x, v) on the nodes, and `Characteristic`
//! values f(t, y + t v_adv, v) indexed by the launch point y — the solver
//! works in the latter because the transport operator there is a plain time
//! derivative. Slices are laid out `iv * n_x + ix`.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::grid::{run_chunked, PhaseSpaceGrid, Point, MAX_DIM};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Representation {
    Eulerian,
    Characteristic,
}

/// Nonnegative mass density sampled over (time, x, v).
#[derive(Clone, Debug)]
pub struct DistributionField {
    grid: Arc<PhaseSpaceGrid>,
    representation: Representation,
    values: Vec<f64>,
}

impl DistributionField {
    pub fn zeros(grid: Arc<PhaseSpaceGrid>, representation: Representation) -> Self {
        let len = grid.nt * grid.n_xv();
        Self {
            grid,
            representation,
            values: vec![0.0; len],
        }
    }

    pub fn from_values(
        grid: Arc<PhaseSpaceGrid>,
        representation: Representation,
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.len() != grid.nt * grid.n_xv() {
            return Err(CoreError::ShapeMismatch(format!(
                "field needs {} values, got {}",
                grid.nt * grid.n_xv(),
                values.len()
            )));
        }
        Ok(Self {
            grid,
            representation,
            values,
        })
    }

    /// Free-streamed initial state: in characteristic coordinates the free
    /// solution is the initial slice at every time node.
    pub fn free_streamed(grid: Arc<PhaseSpaceGrid>, f0: &[f64]) -> Result<Self> {
        if f0.len() != grid.n_xv() {
            return Err(CoreError::ShapeMismatch("f0 slice does not match grid".into()));
        }
        let nt = grid.nt;
        let mut values = Vec::with_capacity(nt * f0.len());
        for _ in 0..nt {
            values.extend_from_slice(f0);
        }
        Ok(Self {
            grid,
            representation: Representation::Characteristic,
            values,
        })
    }

    #[inline]
    pub fn grid(&self) -> &Arc<PhaseSpaceGrid> {
        &self.grid
    }

    #[inline]
    pub fn representation(&self) -> Representation {
        self.representation
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn slice(&self, k: usize) -> &[f64] {
        let n = self.grid.n_xv();
        &self.values[k * n..(k + 1) * n]
    }

    #[inline]
    pub fn slice_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.grid.n_xv();
        &mut self.values[k * n..(k + 1) * n]
    }

    /// L1 norm of the slice at time node `k`.
    pub fn l1_at(&self, k: usize) -> f64 {
        self.grid.slice_l1(self.slice(k))
    }

    /// Signed mass of the slice at time node `k`.
    pub fn mass_at(&self, k: usize) -> f64 {
        self.grid.slice_integral(self.slice(k))
    }

    /// sup over time nodes of exp(-a t) times the L1 norm.
    pub fn weighted_norm(&self, a: f64) -> f64 {
        (0..self.grid.nt)
            .map(|k| (-a * self.grid.time(k)).exp() * self.l1_at(k))
            .fold(0.0, f64::max)
    }

    /// Weighted norm of the difference of two fields without materializing it.
    pub fn weighted_norm_of_diff(&self, other: &DistributionField, a: f64) -> f64 {
        debug_assert_eq!(self.values.len(), other.values.len());
        let grid = &self.grid;
        let n = grid.n_xv();
        let w = grid.xv_weights();
        let mut out: f64 = 0.0;
        for k in 0..grid.nt {
            let sa = &self.values[k * n..(k + 1) * n];
            let sb = &other.values[k * n..(k + 1) * n];
            let l1: f64 = sa
                .iter()
                .zip(sb)
                .zip(w)
                .map(|((x, y), w)| (x - y).abs() * w)
                .sum();
            out = out.max((-a * grid.time(k)).exp() * l1);
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().fold(f64::INFINITY, |m, &v| m.min(v))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// The Eulerian slice at time node `k`. Converting from characteristic
    /// storage samples each velocity row at x - t v_adv with zero extension.
    pub fn eulerian_slice(&self, k: usize, workers: usize) -> Vec<f64> {
        let grid = &self.grid;
        let n_x = grid.n_x();
        let src = self.slice(k);
        match self.representation {
            Representation::Eulerian => src.to_vec(),
            Representation::Characteristic => {
                let t = grid.time(k);
                let mut out = vec![0.0; src.len()];
                let out_ptr = SendPtr(out.as_mut_ptr());
                run_chunked(workers, grid.n_v(), |range| {
                    let _ = &out_ptr;
                    for iv in range {
                        let adv = grid.advection(iv);
                        let mut shift = [0.0; MAX_DIM];
                        for a in 0..grid.dim {
                            shift[a] = -t * adv[a];
                        }
                        // SAFETY: velocity rows are disjoint across chunks
                        let dst = unsafe {
                            std::slice::from_raw_parts_mut(out_ptr.0.add(iv * n_x), n_x)
                        };
                        grid.shifted_sample(&src[iv * n_x..(iv + 1) * n_x], &shift, dst);
                    }
                });
                out
            }
        }
    }

    /// Restriction to characteristics h#(t, x, v) = h(t, x + t v_adv, v),
    /// with multilinear interpolation in x and zero extension; `t` must be a
    /// node of the time grid.
    pub fn restrict_to_characteristics(&self, t: f64, x: &Point, iv: usize) -> Result<f64> {
        let grid = &self.grid;
        let k = grid.time_index(t)?;
        let n_x = grid.n_x();
        let row = &self.slice(k)[iv * n_x..(iv + 1) * n_x];
        let adv = grid.advection(iv);
        let mut p = [0.0; MAX_DIM];
        match self.representation {
            // h#(t,x,v) = h(t, x + t v, v)
            Representation::Eulerian => {
                for a in 0..grid.dim {
                    p[a] = x[a] + t * adv[a];
                }
            }
            // stored g(t, y, v) = h(t, y + t v, v), so h# at x is g at y = x
            Representation::Characteristic => {
                p[..grid.dim].copy_from_slice(&x[..grid.dim]);
            }
        }
        Ok(grid.interp_x(row, &p))
    }
}

/// Free streaming of an initial slice: returns f0(x - t v_adv, v) on the
/// grid nodes (Eulerian), interpolated with zero extension. Exact solution
/// of the source-free transport equation.
pub fn free_stream(f0: &[f64], t: f64, grid: &PhaseSpaceGrid, workers: usize) -> Result<Vec<f64>> {
    if f0.len() != grid.n_xv() {
        return Err(CoreError::ShapeMismatch("f0 slice does not match grid".into()));
    }
    if !t.is_finite() {
        return Err(CoreError::InvalidArgument("t must be finite".into()));
    }
    let n_x = grid.n_x();
    let mut out = vec![0.0; f0.len()];
    let out_ptr = SendPtr(out.as_mut_ptr());
    run_chunked(workers, grid.n_v(), |range| {
        let _ = &out_ptr;
        for iv in range {
            let adv = grid.advection(iv);
            let mut shift = [0.0; MAX_DIM];
            for a in 0..grid.dim {
                shift[a] = -t * adv[a];
            }
            // SAFETY: velocity rows are disjoint across chunks
            let dst = unsafe {
                std::slice::from_raw_parts_mut(out_ptr.0.add(iv * n_x), n_x)
            };
            grid.shifted_sample(&f0[iv * n_x..(iv + 1) * n_x], &shift, dst);
        }
    });
    Ok(out)
}

/// Raw pointer wrapper so disjoint row writes can cross the scoped-thread
/// boundary.
#[derive(Copy, Clone)]
pub(crate) struct SendPtr<T>(pub *mut T);
unsafe impl<T> Send for SendPtr<T> {}
unsafe impl<T> Sync for SendPtr<T> {}

// ---------------------------------------------------------------------------
// snapshot formats
// ---------------------------------------------------------------------------

/// JSON sidecar describing a binary snapshot.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub dim: usize,
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
    pub x_nodes: Vec<usize>,
    pub v_min: Vec<f64>,
    pub v_max: Vec<f64>,
    pub v_nodes: Vec<usize>,
    pub time: f64,
    pub representation: Representation,
    /// Number of f64 values, `iv * n_x + ix` order.
    pub count: usize,
}

impl SnapshotMeta {
    pub fn for_grid(grid: &PhaseSpaceGrid, time: f64, representation: Representation) -> Self {
        Self {
            dim: grid.dim,
            x_min: grid.x_axes.iter().map(|a| a.min).collect(),
            x_max: grid.x_axes.iter().map(|a| a.max).collect(),
            x_nodes: grid.x_axes.iter().map(|a| a.nodes).collect(),
            v_min: grid.v_axes.iter().map(|a| a.min).collect(),
            v_max: grid.v_axes.iter().map(|a| a.max).collect(),
            v_nodes: grid.v_axes.iter().map(|a| a.nodes).collect(),
            time,
            representation,
            count: grid.n_xv(),
        }
    }
}

/// Writes one slice as CSV: coordinate columns then the value column.
pub fn write_slice_csv(path: &Path, grid: &PhaseSpaceGrid, slice: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let dim = grid.dim;
    let mut header = Vec::new();
    for a in 0..dim {
        header.push(format!("x{a}"));
    }
    for a in 0..dim {
        header.push(format!("v{a}"));
    }
    header.push("value".into());
    writeln!(w, "{}", header.join(","))?;
    let n_x = grid.n_x();
    for iv in 0..grid.n_v() {
        let v = grid.v_node(iv);
        for ix in 0..n_x {
            let x = grid.x_node(ix);
            let mut cols = Vec::with_capacity(2 * dim + 1);
            for a in 0..dim {
                cols.push(format!("{:?}", x[a]));
            }
            for a in 0..dim {
                cols.push(format!("{:?}", v[a]));
            }
            cols.push(format!("{:?}", slice[iv * n_x + ix]));
            writeln!(w, "{}", cols.join(","))?;
        }
    }
    Ok(())
}

/// Reads back a slice CSV written by [`write_slice_csv`] (values only).
pub fn read_slice_csv(path: &Path, grid: &PhaseSpaceGrid) -> Result<Vec<f64>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::with_capacity(grid.n_xv());
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if i == 0 {
            continue;
        }
        let last = line
            .rsplit(',')
            .next()
            .ok_or_else(|| CoreError::Validity(format!("malformed csv line {i}")))?;
        out.push(last.parse::<f64>().map_err(|e| {
            CoreError::Validity(format!("bad value on csv line {i}: {e}"))
        })?);
    }
    if out.len() != grid.n_xv() {
        return Err(CoreError::ShapeMismatch(format!(
            "csv has {} values, grid expects {}",
            out.len(),
            grid.n_xv()
        )));
    }
    Ok(out)
}

/// Writes one slice as flat little-endian f64 plus a JSON sidecar
/// (`<path>.json`). Round-trips exactly.
pub fn write_slice_binary(
    path: &Path,
    grid: &PhaseSpaceGrid,
    slice: &[f64],
    time: f64,
    representation: Representation,
) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for v in slice {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    let meta = SnapshotMeta::for_grid(grid, time, representation);
    let sidecar = path.with_extension(format!(
        "{}.json",
        path.extension().and_then(|e| e.to_str()).unwrap_or("bin")
    ));
    let body = serde_json::to_string_pretty(&meta)
        .map_err(|e| CoreError::Validity(format!("sidecar encode: {e}")))?;
    std::fs::write(sidecar, body)?;
    Ok(())
}

/// Reads a binary slice and its sidecar back.
pub fn read_slice_binary(path: &Path) -> Result<(SnapshotMeta, Vec<f64>)> {
    let sidecar = path.with_extension(format!(
        "{}.json",
        path.extension().and_then(|e| e.to_str()).unwrap_or("bin")
    ));
    let meta: SnapshotMeta = serde_json::from_str(&std::fs::read_to_string(sidecar)?)
        .map_err(|e| CoreError::Validity(format!("sidecar decode: {e}")))?;
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    if raw.len() != meta.count * 8 {
        return Err(CoreError::ShapeMismatch(format!(
            "binary has {} bytes, sidecar promises {}",
            raw.len(),
            meta.count * 8
        )));
    }
    let values = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((meta, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{AxisSpec, VelocityMap};

    fn grid() -> Arc<PhaseSpaceGrid> {
        Arc::new(
            PhaseSpaceGrid::new(
                vec![AxisSpec::new(-4.0, 4.0, 129).unwrap()],
                vec![AxisSpec::new(-2.0, 2.0, 9).unwrap()],
                11,
                0.1,
                VelocityMap::Identity,
            )
            .unwrap(),
        )
    }

    fn gaussian_f0(grid: &PhaseSpaceGrid) -> Vec<f64> {
        let n_x = grid.n_x();
        let mut f0 = vec![0.0; grid.n_xv()];
        for iv in 0..grid.n_v() {
            let v = grid.v_node(iv)[0];
            for ix in 0..n_x {
                let x = grid.x_node(ix)[0];
                f0[iv * n_x + ix] = (-x * x - 0.5 * v * v).exp();
            }
        }
        f0
    }

    #[test]
    fn free_stream_at_zero_is_identity() {
        let g = grid();
        let f0 = gaussian_f0(&g);
        let out = free_stream(&f0, 0.0, &g, 1).unwrap();
        assert_eq!(out, f0);
    }

    #[test]
    fn free_stream_shifts_profile() {
        // all mass at the v = 1 row; after t = 2 the x profile moves right by 2
        let g = grid();
        let n_x = g.n_x();
        let iv = 6; // v node at 1.0
        assert!((g.v_node(iv)[0] - 1.0).abs() < 1e-12);
        let mut f0 = vec![0.0; g.n_xv()];
        for ix in 0..n_x {
            let x = g.x_node(ix)[0];
            f0[iv * n_x + ix] = (-4.0 * x * x).exp();
        }
        let out = free_stream(&f0, 2.0, &g, 1).unwrap();
        for ix in 0..n_x {
            let x = g.x_node(ix)[0];
            let expect = (-4.0 * (x - 2.0) * (x - 2.0)).exp();
            // grid spacing 1/16; node values land back on nodes so the shift
            // is exact up to interpolation of the sampled tails
            assert!(
                (out[iv * n_x + ix] - expect).abs() < 1e-3,
                "ix {ix}: {} vs {expect}",
                out[iv * n_x + ix]
            );
        }
    }

    #[test]
    fn free_stream_conserves_interior_mass() {
        let g = grid();
        let f0 = gaussian_f0(&g);
        let m0 = g.slice_l1(&f0);
        let out = free_stream(&f0, 0.5, &g, 2).unwrap();
        let m1 = g.slice_l1(&out);
        // support well inside the box; only interpolation wiggle remains
        assert!((m1 - m0).abs() / m0 < 1e-3, "m0 {m0} m1 {m1}");
    }

    #[test]
    fn translation_semigroup_within_interp_tolerance() {
        let g = grid();
        let f0 = gaussian_f0(&g);
        let s = free_stream(&f0, 0.3, &g, 1).unwrap();
        let st = free_stream(&s, 0.4, &g, 1).unwrap();
        let direct = free_stream(&f0, 0.7, &g, 1).unwrap();
        let mut diff = vec![0.0; st.len()];
        for i in 0..st.len() {
            diff[i] = st[i] - direct[i];
        }
        let err = g.slice_l1(&diff) / g.slice_l1(&direct);
        assert!(err < 2e-3, "semigroup defect {err}");
    }

    #[test]
    fn restriction_on_characteristic_field_is_node_lookup() {
        let g = grid();
        let f0 = gaussian_f0(&g);
        let field = DistributionField::free_streamed(g.clone(), &f0).unwrap();
        // h independent of storage time: h#(t, x, v) equals the stored slice
        let val = field
            .restrict_to_characteristics(0.5, &[0.25, 0.0, 0.0], 6)
            .unwrap();
        let expect = g.interp_x(&f0[6 * g.n_x()..7 * g.n_x()], &[0.25, 0.0, 0.0]);
        assert_eq!(val, expect);
    }

    #[test]
    fn restriction_of_eulerian_indicator() {
        // indicator of x in [0,1], v = 1, t = 0.5, x = 0.25 -> looks up 0.75
        let g = Arc::new(
            PhaseSpaceGrid::new(
                vec![AxisSpec::new(-4.0, 4.0, 129).unwrap()],
                vec![AxisSpec::new(-2.0, 2.0, 9).unwrap()],
                11,
                0.1,
                VelocityMap::Identity,
            )
            .unwrap(),
        );
        let n_x = g.n_x();
        let mut values = vec![0.0; g.nt * g.n_xv()];
        for k in 0..g.nt {
            for iv in 0..g.n_v() {
                for ix in 0..n_x {
                    let x = g.x_node(ix)[0];
                    if (0.0..=1.0).contains(&x) {
                        values[(k * g.n_v() + iv) * n_x + ix] = 1.0;
                    }
                }
            }
        }
        let field =
            DistributionField::from_values(g.clone(), Representation::Eulerian, values).unwrap();
        let val = field
            .restrict_to_characteristics(0.5, &[0.25, 0.0, 0.0], 6)
            .unwrap();
        assert!((val - 1.0).abs() < 1e-12);
        // t = 0 is the identity
        let at0 = field
            .restrict_to_characteristics(0.0, &[0.25, 0.0, 0.0], 6)
            .unwrap();
        assert!((at0 - 1.0).abs() < 1e-12);
        // off-grid time is an argument error
        assert!(field
            .restrict_to_characteristics(0.123, &[0.25, 0.0, 0.0], 6)
            .is_err());
    }

    #[test]
    fn restriction_of_free_stream_is_time_independent() {
        let g = grid();
        let f0 = gaussian_f0(&g);
        let nt = g.nt;
        let mut values = Vec::new();
        for k in 0..nt {
            values.extend(free_stream(&f0, g.time(k), &g, 1).unwrap());
        }
        let field =
            DistributionField::from_values(g.clone(), Representation::Eulerian, values).unwrap();
        let x = [0.375, 0.0, 0.0];
        let base = field.restrict_to_characteristics(0.0, &x, 6).unwrap();
        for k in 1..nt {
            let t = g.time(k);
            let v = field.restrict_to_characteristics(t, &x, 6).unwrap();
            assert!(
                (v - base).abs() < 2e-3 * base.abs().max(1.0),
                "t {t}: {v} vs {base}"
            );
        }
    }

    #[test]
    fn weighted_norm_examples() {
        let g = grid();
        let n = g.n_xv();
        // constant-in-time field with unit L1 norm: norm attained at t = 0
        let f0 = gaussian_f0(&g);
        let m = g.slice_l1(&f0);
        let normalized: Vec<f64> = f0.iter().map(|v| v / m).collect();
        let field = DistributionField::free_streamed(g.clone(), &normalized).unwrap();
        assert!((field.weighted_norm(2.0) - 1.0).abs() < 1e-12);

        let zero = DistributionField::zeros(g.clone(), Representation::Characteristic);
        assert_eq!(zero.weighted_norm(2.0), 0.0);

        // L1(t) = exp(b t): below a the sup sits at t = 0, above at T
        for (b, a) in [(1.0, 2.0), (3.0, 2.0)] {
            let mut values = Vec::with_capacity(g.nt * n);
            for k in 0..g.nt {
                let scale = (b * g.time(k)).exp();
                values.extend(normalized.iter().map(|v| v * scale));
            }
            let f = DistributionField::from_values(
                g.clone(),
                Representation::Characteristic,
                values,
            )
            .unwrap();
            let expect = if b <= a {
                1.0
            } else {
                ((b - a) * g.t_final()).exp()
            };
            assert!(
                (f.weighted_norm(a) - expect).abs() < 1e-10 * expect,
                "b {b} a {a}"
            );
        }
    }

    #[test]
    fn eulerian_slice_matches_free_stream() {
        let g = grid();
        let f0 = gaussian_f0(&g);
        let field = DistributionField::free_streamed(g.clone(), &f0).unwrap();
        for k in [0, 3, 10] {
            let slice = field.eulerian_slice(k, 2);
            let expect = free_stream(&f0, g.time(k), &g, 1).unwrap();
            for (a, b) in slice.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn snapshot_formats_round_trip() {
        let g = grid();
        let f0 = gaussian_f0(&g);
        let dir = std::env::temp_dir().join("fireworks-field-io-test");
        std::fs::create_dir_all(&dir).unwrap();

        let bin = dir.join("slice.bin");
        write_slice_binary(&bin, &g, &f0, 0.25, Representation::Eulerian).unwrap();
        let (meta, back) = read_slice_binary(&bin).unwrap();
        assert_eq!(back, f0, "binary round trip must be exact");
        assert_eq!(meta.count, f0.len());
        assert_eq!(meta.time, 0.25);

        let csv = dir.join("slice.csv");
        write_slice_csv(&csv, &g, &f0).unwrap();
        let back = read_slice_csv(&csv, &g).unwrap();
        assert_eq!(back, f0, "csv round trip must be exact");

        std::fs::remove_dir_all(&dir).ok();
    }
}
