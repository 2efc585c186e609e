//! The two contraction mappings of the characteristic-form integral
//! equation and the fixed-point iteration built on them.
//!
//! Fields are handled in characteristic coordinates g(t, y, v) =
//! f(t, y + t v_adv, v), where the transport operator reduces to d/dt. The
//! plain mapping accumulates loss and gain time integrals with the
//! composite trapezoidal rule; the exponential-form mapping folds the loss
//! into an attenuation factor, which keeps every iterate nonnegative, and
//! is evaluated through per-step attenuation products so no growing
//! exponential is ever formed.

use std::sync::Arc;

use crate::error::{CoreError, Result};
use crate::field::{DistributionField, Representation, SendPtr};
use crate::grid::{run_chunked, PhaseSpaceGrid, MAX_DIM};
use crate::kernels::{FieldSelector, KernelSet, SampledKernels};

/// Exponential weight rate and the ball radius of the weighted space.
#[derive(Clone, Copy, Debug)]
pub struct WeightedNormParams {
    pub a: f64,
    /// Ball radius: (a/2) ||f0||_1 for the plain mapping, a ||f0||_1 for the
    /// exponential one.
    pub norm_bound: f64,
}

impl WeightedNormParams {
    pub fn for_j(a: f64, l1_f0: f64) -> Result<Self> {
        if a <= 2.0 {
            return Err(CoreError::InvalidArgument(format!(
                "the plain mapping contracts only for a > 2, got a = {a}"
            )));
        }
        Ok(Self {
            a,
            norm_bound: 0.5 * a * l1_f0,
        })
    }

    pub fn for_j_plus(a: f64, l1_f0: f64) -> Result<Self> {
        if a <= 1.0 {
            return Err(CoreError::InvalidArgument(format!(
                "the exponential mapping contracts only for a > 1, got a = {a}"
            )));
        }
        Ok(Self {
            a,
            norm_bound: a * l1_f0,
        })
    }
}

/// Which fixed-point mapping drives the iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MappingKind {
    J,
    JPlus,
}

impl MappingKind {
    /// Lower bound on the admissible weight rate.
    pub fn a_threshold(&self) -> f64 {
        match self {
            MappingKind::J => 2.0,
            MappingKind::JPlus => 1.0,
        }
    }

    /// Theoretical contraction constant in the weighted norm.
    pub fn contraction_bound(&self, a: f64) -> f64 {
        match self {
            MappingKind::J => 2.0 / a,
            MappingKind::JPlus => 1.0 / a,
        }
    }
}

/// Observability of the fixed-point iteration.
#[derive(Clone, Debug, Default, serde::Serialize)]
pub struct IterationDiagnostics {
    pub residual_history: Vec<f64>,
    pub contraction_ratios: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Wall time per sweep; reporting only, never part of reproducible
    /// artifacts.
    #[serde(skip)]
    pub sweep_seconds: Vec<f64>,
}

impl IterationDiagnostics {
    /// Least-squares slope of ln(residual) against the sweep index, using
    /// sweeps `from..`; the geometric rate is exp(slope).
    pub fn log_residual_slope(&self, from: usize) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .residual_history
            .iter()
            .enumerate()
            .skip(from)
            .filter(|(_, r)| **r > 0.0)
            .map(|(i, r)| (i as f64, r.ln()))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        Some((n * sxy - sx * sy) / (n * sxx - sx * sx))
    }
}

/// Kernel samples over all (t, x, v) nodes, or a constant shortcut.
enum Samples {
    Constant(f64),
    /// nt * n_xv values, slice layout `iv * n_x + ix`.
    Full(Vec<f64>),
}

impl Samples {
    #[inline]
    fn slice(&self, k: usize, n_xv: usize) -> SliceRef<'_> {
        match self {
            Samples::Constant(c) => SliceRef::Constant(*c),
            Samples::Full(v) => SliceRef::Full(&v[k * n_xv..(k + 1) * n_xv]),
        }
    }
}

/// One (x, v) slice of kernel samples.
#[derive(Clone, Copy)]
pub enum SliceRef<'a> {
    Constant(f64),
    Full(&'a [f64]),
}

impl SliceRef<'_> {
    #[inline]
    pub fn get(&self, idx: usize) -> f64 {
        match self {
            SliceRef::Constant(c) => *c,
            SliceRef::Full(v) => v[idx],
        }
    }

    pub fn constant(&self) -> Option<f64> {
        match self {
            SliceRef::Constant(c) => Some(*c),
            SliceRef::Full(_) => None,
        }
    }
}

/// Everything the mappings need, sampled once per (kernels, grid) pair.
pub struct OperatorContext {
    grid: Arc<PhaseSpaceGrid>,
    pub workers: usize,
    /// Survival ratio along characteristics.
    eta_hash: Samples,
    /// Explosion rate along characteristics.
    gamma_hash: Samples,
    /// Explosion rate on the Eulerian nodes (feeds the redistribution sum).
    gamma_eul: Samples,
    /// Redistribution matrix with the xi1 quadrature weights folded in:
    /// pw[j * n_v + k] = p[j][k] * w_v[k].
    p_weighted: Vec<f64>,
    /// Initial slice (nonnegativity is the caller's admissibility check).
    f0: Vec<f64>,
    l1_f0: f64,
    /// False when the gain term is identically zero (eta or gamma vanish).
    gain_active: bool,
}

impl OperatorContext {
    pub fn new(kernel_set: &KernelSet, grid: Arc<PhaseSpaceGrid>, workers: usize) -> Result<Self> {
        kernel_set.validate(&grid)?;
        let f0 = kernel_set.sample_field(FieldSelector::F0, 0.0, &grid)?;
        let l1_f0 = grid.slice_l1(&f0);
        let p = kernel_set.p_matrix(&grid)?;
        let n_v = grid.n_v();
        let wv = grid.v_weights();
        let mut p_weighted = p;
        for j in 0..n_v {
            for k in 0..n_v {
                p_weighted[j * n_v + k] *= wv[k];
            }
        }

        let eta_hash = sample_hash(kernel_set, FieldSelector::Eta, &grid, workers)?;
        let gamma_hash = sample_hash(kernel_set, FieldSelector::Gamma, &grid, workers)?;
        let gamma_eul = match kernel_set.gamma.constant_value() {
            Some(c) => Samples::Constant(c),
            None => {
                let mut all = Vec::with_capacity(grid.nt * grid.n_xv());
                for k in 0..grid.nt {
                    all.extend(kernel_set.sample_field(
                        FieldSelector::Gamma,
                        grid.time(k),
                        &grid,
                    )?);
                }
                Samples::Full(all)
            }
        };
        let gain_active = !(kernel_set.eta.is_zero() || kernel_set.gamma.is_zero());

        Ok(Self {
            grid,
            workers,
            eta_hash,
            gamma_hash,
            gamma_eul,
            p_weighted,
            f0,
            l1_f0,
            gain_active,
        })
    }

    pub fn grid(&self) -> &Arc<PhaseSpaceGrid> {
        &self.grid
    }

    pub fn f0(&self) -> &[f64] {
        &self.f0
    }

    pub fn l1_f0(&self) -> f64 {
        self.l1_f0
    }

    /// Free-streamed initial iterate.
    pub fn initial_iterate(&self) -> Result<DistributionField> {
        DistributionField::free_streamed(self.grid.clone(), &self.f0)
    }

    /// Plain mapping: f0 minus the loss time integral plus the gain time
    /// integral, accumulated along characteristics.
    pub fn apply_j(&self, f: &DistributionField) -> Result<DistributionField> {
        let mut out = DistributionField::zeros(self.grid.clone(), Representation::Characteristic);
        self.apply_j_into(f, &mut out)?;
        Ok(out)
    }

    /// Exponential-form mapping; nonnegative input, nonnegative output.
    pub fn apply_j_plus(&self, f: &DistributionField) -> Result<DistributionField> {
        let mut out = DistributionField::zeros(self.grid.clone(), Representation::Characteristic);
        self.apply_j_plus_into(f, &mut out)?;
        Ok(out)
    }

    fn check_characteristic(&self, f: &DistributionField) -> Result<()> {
        if f.representation() != Representation::Characteristic {
            return Err(CoreError::InvalidArgument(
                "mappings expect a characteristic-representation field".into(),
            ));
        }
        if f.grid().n_xv() != self.grid.n_xv() || f.grid().nt != self.grid.nt {
            return Err(CoreError::ShapeMismatch("field grid does not match context".into()));
        }
        Ok(())
    }

    pub(crate) fn apply_j_into(&self, f: &DistributionField, out: &mut DistributionField) -> Result<()> {
        self.check_characteristic(f)?;
        let grid = &self.grid;
        let n_xv = grid.n_xv();
        let dt = grid.dt;
        let mut scratch = GainScratch::new(n_xv);
        let mut loss_acc = vec![0.0; n_xv];
        let mut gain_acc = vec![0.0; n_xv];
        let mut prev_loss = vec![0.0; n_xv];
        let mut prev_gain = vec![0.0; n_xv];
        let mut loss_k = vec![0.0; n_xv];

        for k in 0..grid.nt {
            let g_k = f.slice(k);
            let gamma_k = self.gamma_hash.slice(k, n_xv);
            match gamma_k {
                SliceRef::Constant(c) => {
                    for (o, g) in loss_k.iter_mut().zip(g_k) {
                        *o = c * g;
                    }
                }
                SliceRef::Full(gam) => {
                    for ((o, g), c) in loss_k.iter_mut().zip(g_k).zip(gam) {
                        *o = c * g;
                    }
                }
            }
            self.gain_hash_slice(f, k, &mut scratch)?;

            if k > 0 {
                for i in 0..n_xv {
                    loss_acc[i] += 0.5 * dt * (prev_loss[i] + loss_k[i]);
                    gain_acc[i] += 0.5 * dt * (prev_gain[i] + scratch.gain[i]);
                }
            }
            let out_k = out.slice_mut(k);
            let mut finite = true;
            for i in 0..n_xv {
                let v = self.f0[i] - loss_acc[i] + gain_acc[i];
                finite &= v.is_finite();
                out_k[i] = v;
            }
            if !finite {
                return Err(CoreError::NumericalBlowup {
                    time_index: k,
                    detail: "non-finite value in the plain mapping".into(),
                });
            }
            prev_loss.copy_from_slice(&loss_k);
            prev_gain.copy_from_slice(&scratch.gain);
        }
        Ok(())
    }

    pub(crate) fn apply_j_plus_into(
        &self,
        f: &DistributionField,
        out: &mut DistributionField,
    ) -> Result<()> {
        self.check_characteristic(f)?;
        if f.min_value() < 0.0 {
            return Err(CoreError::Validity(
                "the exponential mapping is defined on nonnegative fields".into(),
            ));
        }
        let grid = &self.grid;
        let n_xv = grid.n_xv();
        let dt = grid.dt;
        let mut scratch = GainScratch::new(n_xv);
        // running e^{-F}, attenuated gain integral, previous gain slice
        let mut exp_f = vec![1.0; n_xv];
        let mut atten_int = vec![0.0; n_xv];
        let mut prev_gain = vec![0.0; n_xv];
        let mut prev_gamma = vec![0.0; n_xv];

        for k in 0..grid.nt {
            self.gain_hash_slice(f, k, &mut scratch)?;
            let gamma_k = self.gamma_hash.slice(k, n_xv);

            if k > 0 {
                match (gamma_k.constant(), self.gamma_hash.slice(k - 1, n_xv).constant()) {
                    (Some(c), Some(c_prev)) => {
                        let atten = (-0.5 * dt * (c_prev + c)).exp();
                        for i in 0..n_xv {
                            exp_f[i] *= atten;
                            atten_int[i] = atten * atten_int[i]
                                + 0.5 * dt * (atten * prev_gain[i] + scratch.gain[i]);
                        }
                    }
                    _ => {
                        for i in 0..n_xv {
                            let atten = (-0.5 * dt * (prev_gamma[i] + gamma_k.get(i))).exp();
                            exp_f[i] *= atten;
                            atten_int[i] = atten * atten_int[i]
                                + 0.5 * dt * (atten * prev_gain[i] + scratch.gain[i]);
                        }
                    }
                }
            }
            let out_k = out.slice_mut(k);
            let mut finite = true;
            for i in 0..n_xv {
                let v = exp_f[i] * self.f0[i] + atten_int[i];
                finite &= v.is_finite();
                out_k[i] = v;
            }
            if !finite {
                return Err(CoreError::NumericalBlowup {
                    time_index: k,
                    detail: "non-finite value in the exponential mapping".into(),
                });
            }
            if gamma_k.constant().is_none() {
                if let SliceRef::Full(g) = gamma_k {
                    prev_gamma.copy_from_slice(g);
                }
            }
            prev_gain.copy_from_slice(&scratch.gain);
        }
        Ok(())
    }

    /// Gain term restricted to characteristics at time node `k`:
    /// eta#(k) times the xi1 quadrature of gamma p f along the trajectory.
    fn gain_hash_slice(&self, f: &DistributionField, k: usize, scratch: &mut GainScratch) -> Result<()> {
        let grid = &self.grid;
        let n_x = grid.n_x();
        let n_v = grid.n_v();
        let n_xv = grid.n_xv();
        if !self.gain_active {
            scratch.gain.fill(0.0);
            return Ok(());
        }
        let t = grid.time(k);
        let g_k = f.slice(k);

        // Eulerian slice of the iterate, times the explosion rate.
        let gamma_eul_k = self.gamma_eul.slice(k, n_xv);
        let w_ptr = SendPtr(scratch.weighted.as_mut_ptr());
        run_chunked(self.workers, n_v, |range| {
            let _ = &w_ptr;
            for iv in range {
                let adv = grid.advection(iv);
                let mut shift = [0.0; MAX_DIM];
                for a in 0..grid.dim {
                    shift[a] = -t * adv[a];
                }
                // SAFETY: rows are disjoint across chunks
                let dst =
                    unsafe { std::slice::from_raw_parts_mut(w_ptr.0.add(iv * n_x), n_x) };
                grid.shifted_sample(&g_k[iv * n_x..(iv + 1) * n_x], &shift, dst);
                match gamma_eul_k {
                    SliceRef::Constant(c) => {
                        for v in dst.iter_mut() {
                            *v *= c;
                        }
                    }
                    SliceRef::Full(gam) => {
                        for (v, c) in dst.iter_mut().zip(&gam[iv * n_x..(iv + 1) * n_x]) {
                            *v *= c;
                        }
                    }
                }
            }
        });

        // Redistribute: s[j] = sum_k pw[j][k] * weighted[k], per x node.
        let weighted = &scratch.weighted;
        let pw = &self.p_weighted;
        let s_ptr = SendPtr(scratch.redistributed.as_mut_ptr());
        run_chunked(self.workers, n_v, |range| {
            let _ = &s_ptr;
            for j in range {
                // SAFETY: rows are disjoint across chunks
                let s_row =
                    unsafe { std::slice::from_raw_parts_mut(s_ptr.0.add(j * n_x), n_x) };
                s_row.fill(0.0);
                for k1 in 0..n_v {
                    let p = pw[j * n_v + k1];
                    if p == 0.0 {
                        continue;
                    }
                    let w_row = &weighted[k1 * n_x..(k1 + 1) * n_x];
                    for (s, w) in s_row.iter_mut().zip(w_row) {
                        *s += p * w;
                    }
                }
            }
        });

        // Restrict back to the characteristic launched from y: sample at
        // y + t v_adv, then scale by the survival ratio.
        let redistributed = &scratch.redistributed;
        let eta_k = self.eta_hash.slice(k, n_xv);
        let gain_ptr = SendPtr(scratch.gain.as_mut_ptr());
        run_chunked(self.workers, n_v, |range| {
            let _ = &gain_ptr;
            for iv in range {
                let adv = grid.advection(iv);
                let mut shift = [0.0; MAX_DIM];
                for a in 0..grid.dim {
                    shift[a] = t * adv[a];
                }
                // SAFETY: rows are disjoint across chunks
                let dst =
                    unsafe { std::slice::from_raw_parts_mut(gain_ptr.0.add(iv * n_x), n_x) };
                grid.shifted_sample(&redistributed[iv * n_x..(iv + 1) * n_x], &shift, dst);
                match eta_k {
                    SliceRef::Constant(c) => {
                        for v in dst.iter_mut() {
                            *v *= c;
                        }
                    }
                    SliceRef::Full(eta) => {
                        for (v, e) in dst.iter_mut().zip(&eta[iv * n_x..(iv + 1) * n_x]) {
                            *v *= e;
                        }
                    }
                }
            }
        });
        Ok(())
    }

    /// Explosion rate along characteristics at time node `k`.
    pub fn gamma_hash_at(&self, k: usize) -> SliceRef<'_> {
        self.gamma_hash.slice(k, self.grid.n_xv())
    }

    /// Collision source along characteristics at node `k`:
    /// Q# = gain# - Gamma# g.
    pub fn source_hash_slice(&self, f: &DistributionField, k: usize) -> Result<Vec<f64>> {
        self.check_characteristic(f)?;
        let n_xv = self.grid.n_xv();
        let mut scratch = GainScratch::new(n_xv);
        self.gain_hash_slice(f, k, &mut scratch)?;
        let gamma_k = self.gamma_hash.slice(k, n_xv);
        let g_k = f.slice(k);
        let mut out = scratch.gain;
        for i in 0..n_xv {
            out[i] -= gamma_k.get(i) * g_k[i];
        }
        Ok(out)
    }

    /// Both sides of the exponential-form identity between nodes `s_idx`
    /// and `t_idx`, returning the largest pointwise mismatch. Small for
    /// fixed points of either mapping.
    pub fn duhamel_consistency(
        &self,
        f: &DistributionField,
        s_idx: usize,
        t_idx: usize,
    ) -> Result<f64> {
        self.check_characteristic(f)?;
        let grid = &self.grid;
        if t_idx >= grid.nt || s_idx > t_idx {
            return Err(CoreError::InvalidArgument(format!(
                "need 0 <= s <= t within the grid; got ({s_idx}, {t_idx}) with nt = {}",
                grid.nt
            )));
        }
        if s_idx == t_idx {
            return Ok(0.0);
        }
        let n_xv = grid.n_xv();
        let dt = grid.dt;
        let mut scratch = GainScratch::new(n_xv);
        let mut exp_df = vec![1.0; n_xv]; // e^{-(F_k - F_s)}
        let mut atten_int = vec![0.0; n_xv];
        let mut prev_gain = vec![0.0; n_xv];
        self.gain_hash_slice(f, s_idx, &mut scratch)?;
        prev_gain.copy_from_slice(&scratch.gain);

        for k in (s_idx + 1)..=t_idx {
            self.gain_hash_slice(f, k, &mut scratch)?;
            let gamma_k = self.gamma_hash.slice(k, n_xv);
            let gamma_prev = self.gamma_hash.slice(k - 1, n_xv);
            for i in 0..n_xv {
                let atten = (-0.5 * dt * (gamma_prev.get(i) + gamma_k.get(i))).exp();
                exp_df[i] *= atten;
                atten_int[i] =
                    atten * atten_int[i] + 0.5 * dt * (atten * prev_gain[i] + scratch.gain[i]);
            }
            prev_gain.copy_from_slice(&scratch.gain);
        }

        let g_s = f.slice(s_idx);
        let g_t = f.slice(t_idx);
        let mut worst = 0.0f64;
        for i in 0..n_xv {
            let lhs = g_t[i] - g_s[i] * exp_df[i];
            worst = worst.max((lhs - atten_int[i]).abs());
        }
        Ok(worst)
    }
}

struct GainScratch {
    /// Eulerian iterate times the explosion rate.
    weighted: Vec<f64>,
    /// After the redistribution matrix.
    redistributed: Vec<f64>,
    /// Gain restricted to characteristics.
    gain: Vec<f64>,
}

impl GainScratch {
    fn new(n_xv: usize) -> Self {
        Self {
            weighted: vec![0.0; n_xv],
            redistributed: vec![0.0; n_xv],
            gain: vec![0.0; n_xv],
        }
    }
}

fn sample_hash(
    kernel_set: &KernelSet,
    which: FieldSelector,
    grid: &PhaseSpaceGrid,
    workers: usize,
) -> Result<Samples> {
    let field = match which {
        FieldSelector::Eta => &kernel_set.eta,
        FieldSelector::Gamma => &kernel_set.gamma,
        FieldSelector::F0 => &kernel_set.f0,
    };
    if let Some(c) = field.constant_value() {
        return Ok(Samples::Constant(c));
    }
    let n_x = grid.n_x();
    let n_v = grid.n_v();
    let n_xv = grid.n_xv();
    let mut all = vec![0.0; grid.nt * n_xv];
    let ptr = SendPtr(all.as_mut_ptr());
    let bad = std::sync::atomic::AtomicBool::new(false);
    run_chunked(workers, grid.nt, |range| {
        let _ = &ptr;
        for k in range {
            let t = grid.time(k);
            // SAFETY: time slices are disjoint across chunks
            let slice = unsafe { std::slice::from_raw_parts_mut(ptr.0.add(k * n_xv), n_xv) };
            for iv in 0..n_v {
                let v = grid.v_node(iv);
                let adv = grid.advection(iv);
                for ix in 0..n_x {
                    let node = grid.x_node(ix);
                    let mut x = [0.0; MAX_DIM];
                    for a in 0..grid.dim {
                        x[a] = node[a] + t * adv[a];
                    }
                    let val = field.eval(t, &x, v, grid);
                    if !val.is_finite() {
                        bad.store(true, std::sync::atomic::Ordering::Relaxed);
                    }
                    slice[iv * n_x + ix] = val;
                }
            }
        }
    });
    if bad.load(std::sync::atomic::Ordering::Relaxed) {
        return Err(CoreError::NonFiniteModel {
            field: format!("{which:?}"),
            location: "characteristic sampling".into(),
        });
    }
    Ok(Samples::Full(all))
}

/// Gain term on one Eulerian slice: eta times the xi1 quadrature of
/// gamma p f. Nonnegative whenever the slice is.
pub fn gain_term(
    f_slice: &[f64],
    kernels: &SampledKernels,
    grid: &PhaseSpaceGrid,
    workers: usize,
) -> Result<Vec<f64>> {
    let n_x = grid.n_x();
    let n_v = grid.n_v();
    if f_slice.len() != grid.n_xv() {
        return Err(CoreError::ShapeMismatch("gain_term slice does not match grid".into()));
    }
    let wv = grid.v_weights();
    let weighted: Vec<f64> = (0..grid.n_xv())
        .map(|i| kernels.gamma[i] * f_slice[i])
        .collect();
    let mut out = vec![0.0; grid.n_xv()];
    let out_ptr = SendPtr(out.as_mut_ptr());
    run_chunked(workers, n_v, |range| {
        let _ = &out_ptr;
        for j in range {
            // SAFETY: rows are disjoint across chunks
            let row = unsafe { std::slice::from_raw_parts_mut(out_ptr.0.add(j * n_x), n_x) };
            row.fill(0.0);
            for k1 in 0..n_v {
                let p = kernels.p_matrix[j * n_v + k1] * wv[k1];
                if p == 0.0 {
                    continue;
                }
                for (o, w) in row.iter_mut().zip(&weighted[k1 * n_x..(k1 + 1) * n_x]) {
                    *o += p * w;
                }
            }
            for (o, e) in row.iter_mut().zip(&kernels.eta[j * n_x..(j + 1) * n_x]) {
                *o *= e;
            }
        }
    });
    Ok(out)
}

/// sup over time nodes of exp(-a t) times the L1 norm.
pub fn weighted_norm(f: &DistributionField, a: f64) -> Result<f64> {
    if a <= 0.0 {
        return Err(CoreError::InvalidArgument(format!("weight rate must be positive, got {a}")));
    }
    Ok(f.weighted_norm(a))
}

/// Solver settings; defaults follow the shipped scenarios.
#[derive(Clone, Copy, Debug)]
pub struct PicardSettings {
    pub mapping: MappingKind,
    pub a: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PicardSettings {
    fn default() -> Self {
        Self {
            mapping: MappingKind::JPlus,
            a: 2.0,
            tol: crate::tolerances::DEFAULT_SOLVER_TOL,
            max_iter: crate::tolerances::DEFAULT_MAX_ITER,
        }
    }
}

/// Fixed-point iteration from the free-streamed initial iterate; stops when
/// the weighted-norm residual drops below `tol`.
pub fn picard_solve(
    ctx: &OperatorContext,
    settings: &PicardSettings,
) -> Result<(DistributionField, IterationDiagnostics)> {
    if settings.a <= settings.mapping.a_threshold() {
        return Err(CoreError::InvalidArgument(format!(
            "weight rate a = {} is at or below the mapping threshold {}",
            settings.a,
            settings.mapping.a_threshold()
        )));
    }
    let mut diagnostics = IterationDiagnostics::default();

    // zero initial mass: zero is the fixed point and ratios are undefined
    if ctx.l1_f0() == 0.0 {
        let field = DistributionField::zeros(ctx.grid().clone(), Representation::Characteristic);
        diagnostics.iterations = 1;
        diagnostics.converged = true;
        return Ok((field, diagnostics));
    }

    let mut current = ctx.initial_iterate()?;
    let mut next = DistributionField::zeros(ctx.grid().clone(), Representation::Characteristic);

    for sweep in 0..settings.max_iter {
        let started = std::time::Instant::now();
        match settings.mapping {
            MappingKind::J => ctx.apply_j_into(&current, &mut next)?,
            MappingKind::JPlus => ctx.apply_j_plus_into(&current, &mut next)?,
        }
        diagnostics.sweep_seconds.push(started.elapsed().as_secs_f64());
        let residual = next.weighted_norm_of_diff(&current, settings.a);
        if !residual.is_finite() {
            return Err(CoreError::NumericalBlowup {
                time_index: 0,
                detail: "non-finite residual".into(),
            });
        }
        if let Some(prev) = diagnostics.residual_history.last() {
            if *prev > 0.0 {
                diagnostics.contraction_ratios.push(residual / prev);
            }
        }
        diagnostics.residual_history.push(residual);
        diagnostics.iterations = sweep + 1;
        std::mem::swap(&mut current, &mut next);
        if residual < settings.tol {
            diagnostics.converged = true;
            return Ok((current, diagnostics));
        }
    }
    Err(CoreError::NonConvergence {
        max_iter: settings.max_iter,
        last_residual: *diagnostics.residual_history.last().unwrap_or(&f64::NAN),
        residual_history: diagnostics.residual_history,
    })
}

/// Measured sup-norm contraction ratio of the plain mapping over the early
/// era `[0, t0]` with t0 < 1/2: max-over-nodes L1 of J(f)-J(h) divided by
/// the same for f-h.
pub fn local_contraction_check(
    ctx: &OperatorContext,
    f: &DistributionField,
    h: &DistributionField,
    t0: f64,
) -> Result<f64> {
    if !(0.0..0.5).contains(&t0) {
        return Err(CoreError::InvalidArgument(format!(
            "the early-era bound needs 0 <= t0 < 1/2, got {t0}"
        )));
    }
    let grid = ctx.grid();
    let k_max = (0..grid.nt)
        .take_while(|&k| grid.time(k) <= t0 + 1e-12)
        .last()
        .ok_or_else(|| CoreError::InvalidArgument("no time nodes in [0, t0]".into()))?;

    let mut den = 0.0f64;
    for k in 0..=k_max {
        let l1: f64 = f
            .slice(k)
            .iter()
            .zip(h.slice(k))
            .zip(grid.xv_weights())
            .map(|((a, b), w)| (a - b).abs() * w)
            .sum();
        den = den.max(l1);
    }
    if den == 0.0 {
        return Err(CoreError::InvalidArgument(
            "contraction ratio is undefined for identical fields".into(),
        ));
    }
    let jf = ctx.apply_j(f)?;
    let jh = ctx.apply_j(h)?;
    let mut num = 0.0f64;
    for k in 0..=k_max {
        let l1: f64 = jf
            .slice(k)
            .iter()
            .zip(jh.slice(k))
            .zip(grid.xv_weights())
            .map(|((a, b), w)| (a - b).abs() * w)
            .sum();
        num = num.max(l1);
    }
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{AxisSpec, VelocityMap};
    use crate::kernels::{NormalizationMode, PairKernel, Profile1d, ScalarField};
    use crate::mc::SimRng;

    fn grid(nx: usize, nv: usize, nt: usize, t_final: f64) -> Arc<PhaseSpaceGrid> {
        Arc::new(
            PhaseSpaceGrid::new(
                vec![AxisSpec::new(-6.0, 6.0, nx).unwrap()],
                vec![AxisSpec::new(-2.0, 2.0, nv).unwrap()],
                nt,
                t_final / (nt - 1) as f64,
                VelocityMap::Identity,
            )
            .unwrap(),
        )
    }

    fn kernel_set(eta: f64, gamma: f64) -> KernelSet {
        KernelSet {
            eta: ScalarField::Constant { value: eta },
            gamma: ScalarField::Constant { value: gamma },
            p_kernel: PairKernel::Constant,
            p_normalization: NormalizationMode::Analytic,
            f0: ScalarField::GaussianBump {
                amplitude: 1.0,
                x_center: vec![0.0],
                x_sigma: vec![1.0],
                v_center: vec![0.0],
                v_sigma: vec![0.6],
            },
        }
    }

    fn random_field(ctx: &OperatorContext, seed: u64, nonneg: bool) -> DistributionField {
        let grid = ctx.grid().clone();
        let mut rng = SimRng::new(seed);
        let mut values = vec![0.0; grid.nt * grid.n_xv()];
        for v in values.iter_mut() {
            let u = rng.next_f64();
            *v = if nonneg { u } else { u - 0.5 };
        }
        DistributionField::from_values(grid, Representation::Characteristic, values).unwrap()
    }

    #[test]
    fn gain_term_examples() {
        let g = grid(17, 33, 4, 0.3);
        let ks = kernel_set(0.5, 0.7);
        let sampled = crate::kernels::eval_kernels(&ks, 0.0, &g).unwrap();

        // zero slice -> zero gain
        let zero = vec![0.0; g.n_xv()];
        let out = gain_term(&zero, &sampled, &g, 1).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));

        // eta = 0 -> zero gain
        let ks0 = kernel_set(0.0, 0.7);
        let sampled0 = crate::kernels::eval_kernels(&ks0, 0.0, &g).unwrap();
        let f: Vec<f64> = (0..g.n_xv()).map(|i| (i as f64 * 0.01).sin().abs()).collect();
        let out = gain_term(&f, &sampled0, &g, 1).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));

        // x-homogeneous slice: gain = eta * gamma * M / vol at every node
        let n_x = g.n_x();
        let mut f = vec![0.0; g.n_xv()];
        for iv in 0..g.n_v() {
            let v = g.v_node(iv)[0];
            let phi = (-v * v).exp();
            for ix in 0..n_x {
                f[iv * n_x + ix] = phi;
            }
        }
        let m: f64 = (0..g.n_v())
            .map(|iv| g.v_weights()[iv] * (-g.v_node(iv)[0].powi(2)).exp())
            .sum();
        let expect = 0.5 * 0.7 * m / g.v_volume();
        let out = gain_term(&f, &sampled, &g, 2).unwrap();
        for &v in &out {
            assert!((v - expect).abs() < 1e-13 * expect, "{v} vs {expect}");
        }
    }

    #[test]
    fn apply_j_with_zero_gamma_is_free_streaming() {
        let g = grid(33, 17, 8, 0.5);
        let ctx = OperatorContext::new(&kernel_set(0.5, 0.0), g.clone(), 1).unwrap();
        let f = random_field(&ctx, 7, false);
        let jf = ctx.apply_j(&f).unwrap();
        let free = ctx.initial_iterate().unwrap();
        for k in 0..g.nt {
            for (a, b) in jf.slice(k).iter().zip(free.slice(k)) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn apply_j_time_zero_slice_is_f0() {
        let g = grid(33, 17, 8, 0.5);
        let ctx = OperatorContext::new(&kernel_set(0.5, 0.8), g, 1).unwrap();
        let f = random_field(&ctx, 11, false);
        let jf = ctx.apply_j(&f).unwrap();
        for (a, b) in jf.slice(0).iter().zip(ctx.f0()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn apply_j_pure_loss_closed_form() {
        // eta = 0, constant rate: applying to the free-streamed iterate
        // gives f0 (1 - gamma t) exactly (trapezoid of a constant integrand)
        let g = grid(33, 17, 16, 0.8);
        let gamma = 0.6;
        let ctx = OperatorContext::new(&kernel_set(0.0, gamma), g.clone(), 1).unwrap();
        let free = ctx.initial_iterate().unwrap();
        let jf = ctx.apply_j(&free).unwrap();
        for k in 0..g.nt {
            let factor = 1.0 - gamma * g.time(k);
            for (out, f0) in jf.slice(k).iter().zip(ctx.f0()) {
                assert!(
                    (out - f0 * factor).abs() <= 1e-14 * f0.abs().max(1e-30),
                    "k {k}"
                );
            }
        }
    }

    #[test]
    fn apply_j_plus_pure_loss_is_exponential_decay_for_any_input() {
        let g = grid(33, 17, 16, 0.8);
        let gamma = 0.6;
        let ctx = OperatorContext::new(&kernel_set(0.0, gamma), g.clone(), 1).unwrap();
        let f = random_field(&ctx, 13, true);
        let jf = ctx.apply_j_plus(&f).unwrap();
        for k in 0..g.nt {
            let factor = (-gamma * g.time(k)).exp();
            for (out, f0) in jf.slice(k).iter().zip(ctx.f0()) {
                assert!(
                    (out - f0 * factor).abs() <= 1e-13 * f0.abs().max(1e-300),
                    "k {k}: {out} vs {}",
                    f0 * factor
                );
            }
        }
    }

    #[test]
    fn apply_j_plus_zero_gamma_is_free_streaming_and_t0_is_f0() {
        let g = grid(25, 9, 6, 0.4);
        let ctx = OperatorContext::new(&kernel_set(0.5, 0.0), g.clone(), 1).unwrap();
        let f = random_field(&ctx, 17, true);
        let jf = ctx.apply_j_plus(&f).unwrap();
        let free = ctx.initial_iterate().unwrap();
        for k in 0..g.nt {
            for (a, b) in jf.slice(k).iter().zip(free.slice(k)) {
                assert_eq!(a, b);
            }
        }
        assert_eq!(jf.slice(0), ctx.f0());
    }

    #[test]
    fn apply_j_plus_rejects_negative_input() {
        let g = grid(17, 9, 4, 0.3);
        let ctx = OperatorContext::new(&kernel_set(0.5, 0.5), g, 1).unwrap();
        let f = random_field(&ctx, 3, false);
        assert!(ctx.apply_j_plus(&f).is_err());
    }

    #[test]
    fn picard_converges_in_one_sweep_without_explosions() {
        let g = grid(33, 17, 8, 0.5);
        let ctx = OperatorContext::new(&kernel_set(0.5, 0.0), g, 1).unwrap();
        let (field, diag) = picard_solve(
            &ctx,
            &PicardSettings {
                mapping: MappingKind::J,
                a: 4.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(diag.iterations, 1);
        assert!(diag.converged);
        let free = ctx.initial_iterate().unwrap();
        assert_eq!(field.values(), free.values());
    }

    #[test]
    fn picard_pure_decay_fixed_point_matches_closed_form() {
        let g = grid(33, 17, 64, 2.0);
        let gamma = 0.5;
        let ctx = OperatorContext::new(&kernel_set(0.0, gamma), g.clone(), 1).unwrap();
        for (mapping, a) in [(MappingKind::JPlus, 2.0), (MappingKind::J, 4.0)] {
            let (field, diag) = picard_solve(
                &ctx,
                &PicardSettings {
                    mapping,
                    a,
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(diag.converged);
            for k in 0..g.nt {
                let expect = (-gamma * g.time(k)).exp();
                for (out, f0) in field.slice(k).iter().zip(ctx.f0()) {
                    if *f0 > 1e-12 {
                        let rel = (out / f0 - expect).abs() / expect;
                        assert!(rel < 1e-3, "{mapping:?} k {k}: rel {rel}");
                    }
                }
            }
            if mapping == MappingKind::JPlus {
                for r in &diag.contraction_ratios {
                    assert!(*r <= 0.5 + crate::tolerances::CONTRACTION_RATIO_TOL);
                }
            }
        }
    }

    #[test]
    fn picard_zero_initial_state_returns_zero_field() {
        let g = grid(17, 9, 4, 0.3);
        let ks = KernelSet {
            f0: ScalarField::Constant { value: 0.0 },
            ..kernel_set(0.5, 0.5)
        };
        let ctx = OperatorContext::new(&ks, g, 1).unwrap();
        let (field, diag) = picard_solve(&ctx, &PicardSettings::default()).unwrap();
        assert!(diag.converged);
        assert_eq!(diag.iterations, 1);
        assert!(diag.contraction_ratios.is_empty());
        assert!(field.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn picard_rejects_weight_rate_below_threshold() {
        let g = grid(17, 9, 4, 0.3);
        let ctx = OperatorContext::new(&kernel_set(0.5, 0.5), g, 1).unwrap();
        for (mapping, a) in [(MappingKind::J, 2.0), (MappingKind::J, 1.5), (MappingKind::JPlus, 1.0)] {
            let err = picard_solve(
                &ctx,
                &PicardSettings {
                    mapping,
                    a,
                    ..Default::default()
                },
            );
            assert!(err.is_err(), "{mapping:?} a = {a} must be rejected");
        }
    }

    #[test]
    fn picard_random_kernels_contract_within_bound() {
        let g = grid(25, 25, 32, 1.0);
        let ctx = OperatorContext::new(&kernel_set(0.5, 0.3), g, 2).unwrap();
        let (field, diag) = picard_solve(
            &ctx,
            &PicardSettings {
                mapping: MappingKind::J,
                a: 4.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(diag.converged);
        for r in &diag.contraction_ratios {
            assert!(*r <= 0.5 + crate::tolerances::CONTRACTION_RATIO_TOL, "ratio {r}");
        }
        // fixed-point residual below tolerance
        let reapplied = ctx.apply_j(&field).unwrap();
        assert!(reapplied.weighted_norm_of_diff(&field, 4.0) < crate::tolerances::DEFAULT_SOLVER_TOL);
    }

    #[test]
    fn duhamel_identity_of_pure_decay_solution() {
        let g = grid(33, 17, 32, 1.0);
        let gamma = 0.5;
        let ctx = OperatorContext::new(&kernel_set(0.0, gamma), g.clone(), 1).unwrap();
        let (field, _) = picard_solve(
            &ctx,
            &PicardSettings {
                mapping: MappingKind::JPlus,
                a: 2.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(ctx.duhamel_consistency(&field, 5, 5).unwrap(), 0.0);
        let res = ctx.duhamel_consistency(&field, 3, 20).unwrap();
        assert!(res < 1e-12, "residual {res}");
    }

    #[test]
    fn duhamel_residual_of_fixed_point_is_small() {
        let g = grid(25, 25, 32, 1.0);
        let ctx = OperatorContext::new(&kernel_set(0.5, 0.5), g, 2).unwrap();
        let (field, _) = picard_solve(
            &ctx,
            &PicardSettings {
                mapping: MappingKind::JPlus,
                a: 2.0,
                ..Default::default()
            },
        )
        .unwrap();
        let res = ctx.duhamel_consistency(&field, 0, 31).unwrap();
        // fixed point of the same recurrence: residual at solver-tol scale
        assert!(res < 1e-9, "residual {res}");
    }

    #[test]
    fn local_contraction_examples() {
        let g = Arc::new(
            PhaseSpaceGrid::new(
                vec![AxisSpec::new(-6.0, 6.0, 25).unwrap()],
                vec![AxisSpec::new(-2.0, 2.0, 17).unwrap()],
                26,
                0.01,
                VelocityMap::Identity,
            )
            .unwrap(),
        );
        let ctx = OperatorContext::new(&kernel_set(0.5, 0.9), g.clone(), 1).unwrap();
        let f = random_field(&ctx, 21, true);
        let h = random_field(&ctx, 22, true);
        let t0 = 0.25;
        let ratio = local_contraction_check(&ctx, &f, &h, t0).unwrap();
        assert!(ratio <= 2.0 * t0 + crate::tolerances::CONTRACTION_RATIO_TOL, "ratio {ratio}");

        // scaling f - h leaves the ratio unchanged (mapping difference is
        // linear in the difference)
        let mut scaled_vals = h.values().to_vec();
        for (s, (a, b)) in scaled_vals.iter_mut().zip(f.values().iter().zip(h.values())) {
            *s = b + 0.37 * (a - b);
        }
        let h2 = DistributionField::from_values(g, Representation::Characteristic, scaled_vals)
            .unwrap();
        let ratio2 = local_contraction_check(&ctx, &f, &h2, t0).unwrap();
        assert!((ratio2 - ratio).abs() < 1e-10 * ratio.max(1.0));

        // identical fields are an argument error
        assert!(local_contraction_check(&ctx, &f, &f, t0).is_err());
        // gamma = 0 maps both to the same image: ratio 0
        let ctx0 = OperatorContext::new(&kernel_set(0.5, 0.0), ctx.grid().clone(), 1).unwrap();
        let r0 = local_contraction_check(&ctx0, &f, &h, t0).unwrap();
        assert_eq!(r0, 0.0);
    }

    #[test]
    fn weighted_norm_bound_holds_in_the_ball() {
        // ||J(f)||_a <= (a/2) ||f0||_1 for ||f||_a inside the ball, and the
        // exponential analogue with a ||f0||_1
        let g = grid(25, 17, 24, 1.0);
        let ctx = OperatorContext::new(&kernel_set(0.5, 0.8), g.clone(), 1).unwrap();
        let a = 4.0;
        let params = WeightedNormParams::for_j(a, ctx.l1_f0()).unwrap();
        let mut rng = SimRng::new(99);
        for _ in 0..5 {
            let mut field = random_field(&ctx, rng.next_u64(), true);
            // rescale into the ball
            let norm = field.weighted_norm(a);
            let target = params.norm_bound * (0.1 + 0.9 * rng.next_f64());
            let scale = target / norm;
            for v in field.values_mut() {
                *v *= scale;
            }
            let jf = ctx.apply_j(&field).unwrap();
            assert!(jf.weighted_norm(a) <= params.norm_bound * (1.0 + 1e-12));

            let params_plus = WeightedNormParams::for_j_plus(2.0, ctx.l1_f0()).unwrap();
            let jpf = ctx.apply_j_plus(&field).unwrap();
            assert!(jpf.weighted_norm(2.0) <= params_plus.norm_bound * (1.0 + 1e-12));
        }
    }

    #[test]
    fn fixed_point_is_linear_in_f0() {
        let g = grid(25, 17, 24, 1.0);
        let base = kernel_set(0.5, 0.6);
        let scaled = KernelSet {
            f0: ScalarField::GaussianBump {
                amplitude: 2.0,
                x_center: vec![0.0],
                x_sigma: vec![1.0],
                v_center: vec![0.0],
                v_sigma: vec![0.6],
            },
            ..base.clone()
        };
        let settings = PicardSettings {
            mapping: MappingKind::JPlus,
            a: 2.0,
            tol: 1e-12,
            max_iter: 200,
        };
        let ctx1 = OperatorContext::new(&base, g.clone(), 1).unwrap();
        let ctx2 = OperatorContext::new(&scaled, g, 1).unwrap();
        let (f1, _) = picard_solve(&ctx1, &settings).unwrap();
        let (f2, _) = picard_solve(&ctx2, &settings).unwrap();
        let scale = f1.max_abs();
        for (a, b) in f1.values().iter().zip(f2.values()) {
            assert!((2.0 * a - b).abs() <= 1e-10 * scale, "{a} {b}");
        }
    }

    #[test]
    fn two_dimensional_pure_decay_matches_closed_form() {
        let g = Arc::new(
            PhaseSpaceGrid::new(
                vec![
                    AxisSpec::new(-3.0, 3.0, 9).unwrap(),
                    AxisSpec::new(-3.0, 3.0, 9).unwrap(),
                ],
                vec![
                    AxisSpec::new(-1.0, 1.0, 5).unwrap(),
                    AxisSpec::new(-1.0, 1.0, 5).unwrap(),
                ],
                17,
                0.05,
                VelocityMap::Identity,
            )
            .unwrap(),
        );
        let gamma = 0.7;
        let ks = KernelSet {
            eta: ScalarField::Constant { value: 0.0 },
            gamma: ScalarField::Constant { value: gamma },
            p_kernel: PairKernel::Constant,
            p_normalization: NormalizationMode::Analytic,
            f0: ScalarField::GaussianBump {
                amplitude: 1.0,
                x_center: vec![0.0, 0.5],
                x_sigma: vec![0.8, 1.0],
                v_center: vec![0.0, 0.0],
                v_sigma: vec![0.4, 0.4],
            },
        };
        let ctx = OperatorContext::new(&ks, g.clone(), 2).unwrap();
        let (field, diag) = picard_solve(
            &ctx,
            &PicardSettings {
                mapping: MappingKind::JPlus,
                a: 2.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(diag.converged);
        for k in [0, 8, 16] {
            let factor = (-gamma * g.time(k)).exp();
            for (out, f0) in field.slice(k).iter().zip(ctx.f0()) {
                assert!((out - f0 * factor).abs() <= 1e-12 * f0.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn separable_f0_uniform_profile_is_homogeneous() {
        let g = grid(17, 17, 4, 0.2);
        let ks = KernelSet {
            f0: ScalarField::SeparableProduct {
                amplitude: 0.7,
                x_factors: vec![Profile1d::Uniform],
                v_factors: vec![Profile1d::Gaussian { center: 0.0, sigma: 0.5 }],
                t_decay: None,
            },
            ..kernel_set(0.5, 0.5)
        };
        let ctx = OperatorContext::new(&ks, g.clone(), 1).unwrap();
        let n_x = g.n_x();
        for iv in 0..g.n_v() {
            let row = &ctx.f0()[iv * n_x..(iv + 1) * n_x];
            for v in row {
                assert_eq!(*v, row[0]);
            }
        }
    }
}
