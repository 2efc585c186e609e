//! Weighted-particle oracle: an independent stochastic reading of the same
//! kinetic model, used to cross-validate the deterministic solver.
//!
//! Each particle carries (weight, position, velocity). Per step a particle
//! advects, survives with probability exp(-Gamma dt), and on explosion
//! draws a new velocity from its redistribution row and keeps the mass
//! fraction eta of its weight. Every particle owns an RNG stream derived
//! from (seed, particle index), so results do not depend on scheduling.

use crate::error::{CoreError, Result};
use crate::grid::{run_chunked, PhaseSpaceGrid, Point, MAX_DIM};
use crate::kernels::{FieldSelector, KernelSet};
use crate::tolerances::{MC_BATCHES, MC_RATE_BOUND};

/// Deterministic RNG (splitmix64 core). Not cryptographic; stable across
/// platforms.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimRng {
    state: u64,
}

impl SimRng {
    pub fn new(seed: u64) -> Self {
        Self {
            state: seed ^ 0x9E37_79B9_7F4A_7C15,
        }
    }

    /// Stream for one (purpose, particle) pair. Stream 0 is the initial
    /// sampling; step k uses stream k + 1, so no step ever replays the
    /// draws that placed a particle.
    pub fn for_stream(seed: u64, stream: u64, index: u64) -> Self {
        let mut base = Self::new(seed);
        base.state = base
            .state
            .wrapping_add(stream.wrapping_mul(0x9E6D_62CC_59F5_2A6B));
        let mixed = base.next_u64();
        let mut rng = Self {
            state: mixed ^ index.wrapping_mul(0xA24B_AED4_963E_E407),
        };
        rng.next_u64();
        rng
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }
}

/// One weighted fragment.
#[derive(Clone, Copy, Debug)]
pub struct Particle {
    pub weight: f64,
    pub x: Point,
    pub v: Point,
    /// Nearest velocity node; keeps the redistribution rows consistent with
    /// the deterministic discretization.
    pub v_row: usize,
}

/// The particle population at one instant.
#[derive(Clone, Debug)]
pub struct ParticleEnsemble {
    pub particles: Vec<Particle>,
    pub rng_seed: u64,
    pub t: f64,
    /// Weight removed through the spatial boundary so far.
    pub outflow: f64,
    step_count: u64,
}

impl ParticleEnsemble {
    pub fn total_weight(&self) -> f64 {
        self.particles.iter().map(|p| p.weight).sum()
    }
}

/// Samples the initial ensemble from f0 by inverse transform over grid
/// cells with uniform jitter inside each cell; every particle carries the
/// same weight mass0 / n.
pub fn init_ensemble(
    kernel_set: &KernelSet,
    grid: &PhaseSpaceGrid,
    n_particles: usize,
    seed: u64,
) -> Result<ParticleEnsemble> {
    if n_particles == 0 {
        return Err(CoreError::InvalidArgument("need at least one particle".into()));
    }
    let f0 = kernel_set.sample_field(FieldSelector::F0, 0.0, grid)?;
    if f0.iter().any(|&v| v < 0.0) {
        return Err(CoreError::Validity("f0 must be nonnegative".into()));
    }
    // cell masses from the node quadrature
    let weights = grid.xv_weights();
    let masses: Vec<f64> = f0.iter().zip(weights).map(|(v, w)| v * w).collect();
    let total: f64 = masses.iter().sum();
    if total <= 0.0 {
        return Err(CoreError::InvalidArgument("f0 carries no mass to sample".into()));
    }
    let mut cdf = Vec::with_capacity(masses.len());
    let mut acc = 0.0;
    for m in &masses {
        acc += m;
        cdf.push(acc);
    }
    let norm = acc;

    let n_x = grid.n_x();
    let weight = total / n_particles as f64;
    let mut particles = Vec::with_capacity(n_particles);
    for idx in 0..n_particles {
        let mut rng = SimRng::for_stream(seed, 0, idx as u64);
        let u = rng.next_f64() * norm;
        let cell = match cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
            Ok(i) => (i + 1).min(cdf.len() - 1),
            Err(i) => i.min(cdf.len() - 1),
        };
        let (iv, ix) = (cell / n_x, cell % n_x);
        let mut x = [0.0; MAX_DIM];
        let mut v = [0.0; MAX_DIM];
        // jitter uniformly inside the node cell (half cells at box edges)
        jitter_within_cell(&grid.x_axes, ix, &mut rng, &mut x);
        jitter_within_cell(&grid.v_axes, iv, &mut rng, &mut v);
        particles.push(Particle {
            weight,
            x,
            v,
            v_row: iv,
        });
    }
    Ok(ParticleEnsemble {
        particles,
        rng_seed: seed,
        t: 0.0,
        outflow: 0.0,
        step_count: 0,
    })
}

fn jitter_within_cell(axes: &[crate::grid::AxisSpec], flat: usize, rng: &mut SimRng, out: &mut Point) {
    // decompose the flat index row-major, last axis contiguous
    let mut rem = flat;
    let mut indices = [0usize; MAX_DIM];
    for a in (0..axes.len()).rev() {
        indices[a] = rem % axes[a].nodes;
        rem /= axes[a].nodes;
    }
    for (a, axis) in axes.iter().enumerate() {
        let h = axis.step();
        let center = axis.node(indices[a]);
        let lo = (center - 0.5 * h).max(axis.min);
        let hi = (center + 0.5 * h).min(axis.max);
        out[a] = lo + (hi - lo) * rng.next_f64();
    }
}

/// Advances the ensemble by one step of length `dt`: advect, then explode
/// with the exact per-step survival probability, with the rate frozen at
/// the step's start. Particles leaving the spatial box are removed and
/// their weight is counted as outflow.
pub fn step_ensemble(
    ens: &mut ParticleEnsemble,
    kernel_set: &KernelSet,
    grid: &PhaseSpaceGrid,
    p_matrix: &[f64],
    dt: f64,
    workers: usize,
) -> Result<()> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(CoreError::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let t = ens.t;
    let n_v = grid.n_v();
    let wv = grid.v_weights();
    let dim = grid.dim;
    let seed = ens.rng_seed;
    let step = ens.step_count;

    let rate_violation = std::sync::atomic::AtomicBool::new(false);
    let n = ens.particles.len();
    let parts_ptr = crate::field::SendPtr(ens.particles.as_mut_ptr());
    run_chunked(workers, n, |range| {
        let _ = &parts_ptr;
        for idx in range {
            // SAFETY: particle indices are disjoint across chunks
            let p = unsafe { &mut *parts_ptr.0.add(idx) };
            if p.weight == 0.0 {
                continue;
            }
            // fresh stream per (particle, step): independent of worker layout
            let mut rng = SimRng::for_stream(seed, step + 1, idx as u64);

            let adv = grid.velocity_map.apply(&p.v, dim);
            for a in 0..dim {
                p.x[a] += adv[a] * dt;
            }
            let inside = (0..dim).all(|a| p.x[a] >= grid.x_axes[a].min && p.x[a] <= grid.x_axes[a].max);
            if !inside {
                p.weight = -p.weight; // flag for outflow accounting below
                continue;
            }

            let gamma = kernel_set.gamma.eval(t, &p.x, &p.v, grid);
            if gamma * dt > MC_RATE_BOUND {
                rate_violation.store(true, std::sync::atomic::Ordering::Relaxed);
                continue;
            }
            let survival = (-gamma * dt).exp();
            if rng.next_f64() < survival {
                continue;
            }
            // explosion: redistribute the velocity from this particle's row
            let row = &p_matrix[p.v_row * n_v..(p.v_row + 1) * n_v];
            let mut target = rng.next_f64();
            let mut new_row = n_v - 1;
            let total: f64 = row.iter().zip(wv).map(|(p, w)| p * w).sum();
            target *= total;
            let mut acc = 0.0;
            for (k, (pk, w)) in row.iter().zip(wv).enumerate() {
                acc += pk * w;
                if target < acc {
                    new_row = k;
                    break;
                }
            }
            let mut v = [0.0; MAX_DIM];
            jitter_within_cell(&grid.v_axes, new_row, &mut rng, &mut v);
            p.v = v;
            p.v_row = new_row;
            let eta = kernel_set.eta.eval(t, &p.x, &p.v, grid);
            p.weight *= eta.clamp(0.0, 1.0);
        }
    });
    if rate_violation.load(std::sync::atomic::Ordering::Relaxed) {
        return Err(CoreError::InvalidArgument(format!(
            "dt = {dt} violates the per-step rate bound max Gamma dt <= {MC_RATE_BOUND}"
        )));
    }
    // collect outflow (flagged as negative weights) and drop those particles
    let mut outflow = 0.0;
    for p in &mut ens.particles {
        if p.weight < 0.0 {
            outflow += -p.weight;
            p.weight = 0.0;
        }
    }
    ens.outflow += outflow;
    ens.particles.retain(|p| p.weight > 0.0);
    ens.t += dt;
    ens.step_count += 1;
    Ok(())
}

/// Weight-weighted observables with batch-means standard errors.
#[derive(Clone, Debug, serde::Serialize)]
pub struct Observables {
    pub total_mass: f64,
    pub mass_se: f64,
    pub mean_velocity: Vec<f64>,
    pub mean_velocity_se: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub second_moment_se: Vec<f64>,
    /// Surviving particles behind the estimates.
    pub particles: usize,
    /// Set when the ensemble is empty: estimates are zero with no power.
    pub empty: bool,
}

/// Estimators over the ensemble; batches are particles with equal index
/// residue so the split is scheduling-independent.
pub fn tally(ens: &ParticleEnsemble, grid: &PhaseSpaceGrid) -> Observables {
    let dim = grid.dim;
    if ens.particles.is_empty() {
        return Observables {
            total_mass: 0.0,
            mass_se: f64::INFINITY,
            mean_velocity: vec![0.0; dim],
            mean_velocity_se: vec![f64::INFINITY; dim],
            second_moment: vec![0.0; dim],
            second_moment_se: vec![f64::INFINITY; dim],
            particles: 0,
            empty: true,
        };
    }
    let b = MC_BATCHES;
    // per batch: weight, weight*v, weight*v^2
    let mut bw = vec![0.0f64; b];
    let mut bwv = vec![[0.0f64; MAX_DIM]; b];
    let mut bwv2 = vec![[0.0f64; MAX_DIM]; b];
    for (idx, p) in ens.particles.iter().enumerate() {
        let batch = idx % b;
        bw[batch] += p.weight;
        for a in 0..dim {
            bwv[batch][a] += p.weight * p.v[a];
            bwv2[batch][a] += p.weight * p.v[a] * p.v[a];
        }
    }
    let w_total: f64 = bw.iter().sum();
    let mut mean_velocity = vec![0.0; dim];
    let mut second_moment = vec![0.0; dim];
    for a in 0..dim {
        let sv: f64 = bwv.iter().map(|v| v[a]).sum();
        let sv2: f64 = bwv2.iter().map(|v| v[a]).sum();
        mean_velocity[a] = sv / w_total;
        second_moment[a] = sv2 / w_total;
    }

    // batch means: scale each batch total to a full-population estimate
    let mass_batches: Vec<f64> = bw.iter().map(|w| w * b as f64).collect();
    let total_mass = w_total;
    let mass_se = batch_se(&mass_batches, total_mass);
    let mut mean_velocity_se = vec![0.0; dim];
    let mut second_moment_se = vec![0.0; dim];
    for a in 0..dim {
        let vb: Vec<f64> = (0..b)
            .map(|i| if bw[i] > 0.0 { bwv[i][a] / bw[i] } else { 0.0 })
            .collect();
        mean_velocity_se[a] = batch_se(&vb, mean_velocity[a]);
        let v2b: Vec<f64> = (0..b)
            .map(|i| if bw[i] > 0.0 { bwv2[i][a] / bw[i] } else { 0.0 })
            .collect();
        second_moment_se[a] = batch_se(&v2b, second_moment[a]);
    }
    Observables {
        total_mass,
        mass_se,
        mean_velocity,
        mean_velocity_se,
        second_moment,
        second_moment_se,
        particles: ens.particles.len(),
        empty: false,
    }
}

fn batch_se(batch_estimates: &[f64], center: f64) -> f64 {
    let b = batch_estimates.len() as f64;
    let var: f64 = batch_estimates.iter().map(|e| (e - center).powi(2)).sum::<f64>() / (b - 1.0);
    (var / b).sqrt()
}

/// Coarse histogram of the ensemble on the grid nodes, as a density
/// comparable with an Eulerian field slice.
pub fn histogram(ens: &ParticleEnsemble, grid: &PhaseSpaceGrid) -> Vec<f64> {
    let n_x = grid.n_x();
    let mut out = vec![0.0; grid.n_xv()];
    for p in &ens.particles {
        let mut flat_x = 0usize;
        let mut flat_v = 0usize;
        let mut ok = true;
        for (a, axis) in grid.x_axes.iter().enumerate() {
            let s = ((p.x[a] - axis.min) / axis.step()).round();
            if s < 0.0 || s > (axis.nodes - 1) as f64 {
                ok = false;
                break;
            }
            flat_x = flat_x * axis.nodes + s as usize;
        }
        for (a, axis) in grid.v_axes.iter().enumerate() {
            let s = ((p.v[a] - axis.min) / axis.step()).round();
            flat_v = flat_v * axis.nodes + (s.clamp(0.0, (axis.nodes - 1) as f64) as usize);
        }
        if ok {
            out[flat_v * n_x + flat_x] += p.weight;
        }
    }
    // mass per node cell -> density
    for (o, w) in out.iter_mut().zip(grid.xv_weights()) {
        *o /= w;
    }
    out
}
