//! Grid discretization of the one-step transfer operator (dimension 1 and 2
//! only), used as an independent oracle for the Monte Carlo estimator.
//!
//! One Euler step of the SDE moves mass from a point `x` to a Gaussian with
//! mean `wrap(x + dt F(x))` and standard deviation `sigma sqrt(dt)`,
//! periodized over the torus. Collocating source and target on a regular
//! grid of cell centers yields a strictly positive column-stochastic matrix;
//! its fixed density, spectral gap, and resolvent give non-stochastic
//! reference values for the invariant measure, the mixing rate, and the
//! linear response
//!
//! ```text
//!     R(phi, eta) = sum phi * u,    (I - K) u = D,    D = d/d delta [K_delta f0],
//! ```
//!
//! where the derivative is realized as a central finite difference in the
//! perturbation amplitude and the resolvent is solved by Neumann iteration
//! on the zero-mass subspace (convergent because the kernel strictly
//! contracts that subspace). Two appendix-style estimates are also checked
//! here: the first-order expansion of the perturbed kernel in the amplitude,
//! and the pre-equilibration smoothing law `||p_t||_2 ~ t^(-d/4)` for
//! driftless diffusion started from a near-Dirac density.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::torus::{Observable, SdeSystem, TorusDomain, VectorField};

/// A regular grid of cell centers tiling a 1- or 2-dimensional torus.
#[derive(Debug, Clone)]
pub struct Grid {
    domain: TorusDomain,
    m_per_dim: usize,
    /// Flat row-major list of cell centers (`d` coordinates per cell).
    cell_centers: Vec<f64>,
    cell_volume: f64,
}

impl Grid {
    pub fn new(domain: TorusDomain, m_per_dim: usize) -> Result<Self> {
        let d = domain.dim();
        if d > 2 {
            return Err(Error::UnsupportedDimension { d });
        }
        if m_per_dim < 8 {
            return Err(Error::invalid(format!(
                "grid needs at least 8 cells per dimension, got {m_per_dim}"
            )));
        }
        let h = domain.period() / m_per_dim as f64;
        let n_cells = m_per_dim.pow(d as u32);
        let mut cell_centers = Vec::with_capacity(n_cells * d);
        for idx in 0..n_cells {
            let mut rem = idx;
            let mut digits = [0usize; 2];
            for i in (0..d).rev() {
                digits[i] = rem % m_per_dim;
                rem /= m_per_dim;
            }
            for (&digit, &center) in digits.iter().zip(domain.centers()) {
                let lo = center - domain.r_box();
                cell_centers.push(lo + (digit as f64 + 0.5) * h);
            }
        }
        let cell_volume = h.powi(d as i32);
        Ok(Grid {
            domain,
            m_per_dim,
            cell_centers,
            cell_volume,
        })
    }

    pub fn domain(&self) -> &TorusDomain {
        &self.domain
    }

    pub fn m_per_dim(&self) -> usize {
        self.m_per_dim
    }

    /// Total number of cells, `m_per_dim^d`.
    pub fn n_cells(&self) -> usize {
        self.cell_centers.len() / self.domain.dim()
    }

    /// Cell width per coordinate.
    pub fn spacing(&self) -> f64 {
        self.domain.period() / self.m_per_dim as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_volume
    }

    /// Center of cell `idx` (row-major over coordinates).
    pub fn center(&self, idx: usize) -> &[f64] {
        let d = self.domain.dim();
        &self.cell_centers[idx * d..(idx + 1) * d]
    }

    /// Index of the cell containing the point (after wrapping).
    pub fn cell_of(&self, x: &[f64]) -> usize {
        let h = self.spacing();
        let mut idx = 0;
        for (i, &coord) in x.iter().enumerate() {
            let lo = self.domain.centers()[i] - self.domain.r_box();
            let xi = self.domain.wrap_coord(i, coord);
            let k = (((xi - lo) / h) as usize).min(self.m_per_dim - 1);
            idx = idx * self.m_per_dim + k;
        }
        idx
    }
}

/// Discretized one-step transfer operator: entry `(target i, source j)`
/// approximates the transition density from cell `j` to cell `i` times the
/// cell volume. Columns sum to one exactly by construction (renormalized),
/// and every entry is strictly positive for resolvable noise.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    /// Column-major storage: `entries[j * n + i]` is `K[i][j]`.
    entries: Vec<f64>,
    n: usize,
    cell_volume: f64,
    dt: f64,
    /// Perturbation amplitude baked into the drift this kernel was built
    /// from (0 for the base system).
    delta: f64,
}

impl KernelMatrix {
    pub fn n_cells(&self) -> usize {
        self.n
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_volume
    }

    /// Entry `K[target][source]`.
    pub fn entry(&self, target: usize, source: usize) -> f64 {
        self.entries[source * self.n + target]
    }

    /// Applies the operator to a density-values vector: `out = K f`.
    pub fn apply_into(&self, f: &[f64], out: &mut [f64]) {
        assert_eq!(f.len(), self.n);
        assert_eq!(out.len(), self.n);
        out.fill(0.0);
        for (j, &fj) in f.iter().enumerate() {
            if fj == 0.0 {
                continue;
            }
            let col = &self.entries[j * self.n..(j + 1) * self.n];
            for (o, &k) in out.iter_mut().zip(col) {
                *o += k * fj;
            }
        }
    }

    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.apply_into(f, &mut out);
        out
    }

    /// Smallest entry divided by cell volume: a lower bound on the
    /// transition density itself.
    pub fn min_density(&self) -> f64 {
        self.entries.iter().copied().fold(f64::INFINITY, f64::min) / self.cell_volume
    }
}

/// A density on the grid: non-negative cell values with unit total mass
/// `sum(values) * cell_volume = 1`.
#[derive(Debug, Clone)]
pub struct DensityVector {
    values: Vec<f64>,
    cell_volume: f64,
}

impl DensityVector {
    /// The uniform density on the grid.
    pub fn uniform(grid: &Grid) -> Self {
        let n = grid.n_cells();
        let value = 1.0 / (n as f64 * grid.cell_volume());
        DensityVector {
            values: vec![value; n],
            cell_volume: grid.cell_volume(),
        }
    }

    /// All mass in a single cell (a grid-scale Dirac approximation).
    pub fn dirac(grid: &Grid, cell: usize) -> Self {
        let mut values = vec![0.0; grid.n_cells()];
        values[cell] = 1.0 / grid.cell_volume();
        DensityVector {
            values,
            cell_volume: grid.cell_volume(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_volume
    }

    /// Total mass `sum(values) * cell_volume`.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_volume
    }

    /// `L^1` distance to another density.
    pub fn l1_distance(&self, other: &DensityVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * self.cell_volume
    }

    /// `L^2` norm `sqrt(sum(values^2) * cell_volume)`.
    pub fn l2_norm(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() * self.cell_volume).sqrt()
    }
}

/// Periodized Gaussian density at wrapped offset `diff` (in
/// `[-period/2, period/2)`): the sum over image shifts `diff + k * period`,
/// truncated once a shift pair adds less than `1e-14` of the running sum.
fn periodized_gaussian(diff: f64, std: f64, period: f64) -> f64 {
    let inv_norm = 1.0 / (std * (2.0 * std::f64::consts::PI).sqrt());
    let gauss = |z: f64| inv_norm * (-0.5 * (z / std) * (z / std)).exp();
    let mut sum = gauss(diff);
    for k in 1..=1024 {
        let shift = k as f64 * period;
        let pair = gauss(diff + shift) + gauss(diff - shift);
        sum += pair;
        if pair < 1e-14 * sum {
            break;
        }
    }
    sum
}

/// Builds the discretized one-step kernel for the system at step `dt`.
/// Requires the noise scale `sigma * sqrt(dt)` to span at least two cells;
/// otherwise the Gaussian is not resolvable and the error names the grid
/// size that would be.
pub fn build_kernel_matrix(system: &SdeSystem, grid: &Grid, dt: f64) -> Result<KernelMatrix> {
    build_kernel_inner(system, grid, dt, 0.0)
}

fn build_kernel_inner(
    system: &SdeSystem,
    grid: &Grid,
    dt: f64,
    delta: f64,
) -> Result<KernelMatrix> {
    if dt <= 0.0 || !dt.is_finite() {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    let domain = grid.domain();
    if domain != system.domain() {
        return Err(Error::invalid("grid and system domains differ"));
    }
    let d = domain.dim();
    let m = grid.m_per_dim();
    let n = grid.n_cells();
    let h = grid.spacing();
    let noise_std = system.sigma() * dt.sqrt();
    if noise_std < 2.0 * h {
        let required = (2.0 * domain.period() / noise_std).ceil() as usize;
        return Err(Error::GridTooCoarse {
            noise_std,
            required,
            m_per_dim: m,
        });
    }

    let period = domain.period();
    let mut entries = vec![0.0; n * n];
    let columns: Vec<Result<()>> = entries
        .par_chunks_mut(n)
        .enumerate()
        .map(|(j, col)| {
            let x = grid.center(j);
            let mut f = vec![0.0; d];
            system.drift().eval(x, &mut f);
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteDrift { state: x.to_vec() });
            }
            // Post-step Gaussian mean, wrapped back into the box.
            let mut mu = vec![0.0; d];
            for i in 0..d {
                mu[i] = domain.wrap_coord(i, x[i] + dt * f[i]);
            }
            // Per-dimension target profiles; the full entry is their product.
            let mut profiles = vec![vec![0.0; m]; d];
            for i in 0..d {
                let lo = domain.centers()[i] - domain.r_box();
                for (k, slot) in profiles[i].iter_mut().enumerate() {
                    let y = lo + (k as f64 + 0.5) * h;
                    let diff = domain.wrap_delta(y - mu[i]);
                    *slot = periodized_gaussian(diff, noise_std, period);
                }
            }
            for (target, slot) in col.iter_mut().enumerate() {
                let mut rem = target;
                let mut prod = grid.cell_volume();
                for i in (0..d).rev() {
                    prod *= profiles[i][rem % m];
                    rem /= m;
                }
                *slot = prod;
            }
            // Renormalize the column so stochasticity is exact, absorbing
            // the midpoint quadrature error.
            let sum: f64 = col.iter().sum();
            for slot in col.iter_mut() {
                *slot /= sum;
            }
            Ok(())
        })
        .collect();
    for c in columns {
        c?;
    }

    Ok(KernelMatrix {
        entries,
        n,
        cell_volume: grid.cell_volume(),
        dt,
        delta,
    })
}

/// The system with drift `F + delta * eta` (same domain and noise).
fn perturbed_system(system: &SdeSystem, eta: &VectorField, delta: f64) -> SdeSystem {
    let base = system.drift().clone();
    let eta = eta.clone();
    let d = base.dim();
    let drift = VectorField::from_fn(
        format!("{}{:+}*{}", base.label(), delta, eta.label()),
        d,
        move |x, out| {
            base.eval(x, out);
            let mut buf = vec![0.0; d];
            eta.eval(x, &mut buf);
            for i in 0..d {
                out[i] += delta * buf[i];
            }
        },
    );
    system.with_drift(drift).expect("dimensions preserved")
}

const DENSITY_ITER_CAP: usize = 200_000;

/// Invariant density of the kernel by power iteration from uniform, stopping
/// once successive iterates differ by less than `tol` in `L^1`. The result
/// is renormalized to unit mass.
pub fn invariant_density(k: &KernelMatrix, tol: f64) -> Result<DensityVector> {
    let n = k.n_cells();
    let vol = k.cell_volume();
    let mut f = vec![1.0 / (n as f64 * vol); n];
    let mut next = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for _iter in 0..DENSITY_ITER_CAP {
        k.apply_into(&f, &mut next);
        // Renormalize the mass; stochasticity keeps it at 1 up to roundoff.
        let mass: f64 = next.iter().sum::<f64>() * vol;
        for v in next.iter_mut() {
            *v /= mass;
        }
        residual = f
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * vol;
        std::mem::swap(&mut f, &mut next);
        if residual < tol {
            return Ok(DensityVector {
                values: f,
                cell_volume: vol,
            });
        }
    }
    Err(Error::NoConvergence {
        what: "invariant density power iteration".into(),
        iterations: DENSITY_ITER_CAP,
        residual,
    })
}

/// Spectral summary of a kernel.
#[derive(Debug, Clone, Copy)]
pub struct SpectralDiagnostics {
    /// Modulus of the second-largest eigenvalue (power iteration on the
    /// zero-mass subspace, geometric mean of late iteration ratios).
    pub lambda2_modulus: f64,
    /// Smallest transition-density value `min K / cell_volume`: the kernel
    /// lower bound `c` in the Doeblin-type positivity estimate.
    pub min_entry: f64,
    /// Largest observed `L^1` contraction factor `||K g||_1 / ||g||_1` over
    /// a test set of zero-mass vectors; bounded by `1 - c * volume`.
    pub contraction_rho: f64,
}

/// Computes the spectral diagnostics of a kernel. The second eigenvalue
/// comes from 1000 power iterations (with mass re-projection and a geometric
/// mean over the last 20 ratio samples, which also averages out the
/// oscillation of complex pairs). The contraction factor maximizes over
/// differences of unit point masses, which are the extreme points of the
/// zero-mass `L^1` ball; all pairs are scanned up to grids of 512 cells,
/// evenly strided subsets beyond.
pub fn spectral_diagnostics(k: &KernelMatrix) -> SpectralDiagnostics {
    let n = k.n_cells();

    // --- lambda_2 by power iteration on the zero-mass subspace ---
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0123);
    let mut g: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
    project_zero_mean(&mut g);
    normalize_l1(&mut g);
    let mut next = vec![0.0; n];
    let window = 20;
    let mut ratios = Vec::with_capacity(window);
    for iter in 0..1000 {
        k.apply_into(&g, &mut next);
        project_zero_mean(&mut next);
        let r: f64 = next.iter().map(|v| v.abs()).sum();
        for v in next.iter_mut() {
            *v /= r;
        }
        std::mem::swap(&mut g, &mut next);
        if ratios.len() == window {
            ratios.remove(0);
        }
        ratios.push(r);
        if iter >= 60 && ratios.len() == window {
            let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi - lo < 1e-10 * hi {
                break;
            }
        }
    }
    let lambda2_modulus =
        (ratios.iter().map(|r| r.ln()).sum::<f64>() / ratios.len() as f64).exp();

    // --- kernel lower bound and L^1 contraction over point-mass pairs ---
    let min_entry = k.min_density();
    let stride = if n <= 512 { 1 } else { n / 512 };
    let indices: Vec<usize> = (0..n).step_by(stride).collect();
    let mut contraction_rho: f64 = 0.0;
    for (ai, &a) in indices.iter().enumerate() {
        for &b in indices.iter().skip(ai + 1) {
            let mut diff = 0.0;
            for i in 0..n {
                diff += (k.entry(i, a) - k.entry(i, b)).abs();
            }
            contraction_rho = contraction_rho.max(diff / 2.0);
        }
    }

    SpectralDiagnostics {
        lambda2_modulus,
        min_entry,
        contraction_rho,
    }
}

fn project_zero_mean(g: &mut [f64]) {
    let mean = g.iter().sum::<f64>() / g.len() as f64;
    for v in g.iter_mut() {
        *v -= mean;
    }
}

fn normalize_l1(g: &mut [f64]) {
    let norm: f64 = g.iter().map(|v| v.abs()).sum();
    for v in g.iter_mut() {
        *v /= norm;
    }
}

/// The finite-difference response direction `D = (K_{+d} - K_{-d}) f0 / (2 d)`
/// together with the base kernel and density. Shared by the resolvent
/// responses below.
struct ResponsePieces {
    k0: KernelMatrix,
    d_vec: Vec<f64>,
}

fn response_pieces(
    system: &SdeSystem,
    eta: &VectorField,
    grid: &Grid,
    dt: f64,
    fd_delta: f64,
) -> Result<ResponsePieces> {
    if fd_delta <= 0.0 || !fd_delta.is_finite() {
        return Err(Error::invalid(format!(
            "fd_delta must be positive, got {fd_delta}"
        )));
    }
    let k0 = build_kernel_matrix(system, grid, dt)?;
    let f0 = invariant_density(&k0, 1e-12)?;
    let mut k_plus = build_kernel_inner(&perturbed_system(system, eta, fd_delta), grid, dt, fd_delta)?;
    let plus = k_plus.apply(f0.values());
    // Reuse the allocation for the minus kernel.
    k_plus = build_kernel_inner(
        &perturbed_system(system, eta, -fd_delta),
        grid,
        dt,
        -fd_delta,
    )?;
    let minus = k_plus.apply(f0.values());

    let d_vec: Vec<f64> = plus
        .iter()
        .zip(&minus)
        .map(|(p, m)| (p - m) / (2.0 * fd_delta))
        .collect();

    // The response direction is a derivative of probability densities, so it
    // must carry no mass; a violation signals a broken finite difference.
    let mass: f64 = d_vec.iter().sum::<f64>() * grid.cell_volume();
    if mass.abs() > 1e-10 {
        return Err(Error::DegenerateFit(format!(
            "finite-difference response direction carries mass {mass:.3e} (tolerance 1e-10)"
        )));
    }

    Ok(ResponsePieces { k0, d_vec })
}

const RESOLVENT_ITER_CAP: usize = 500_000;

/// Solves `(I - K) u = rhs` on the zero-mass subspace by Neumann iteration
/// `u <- rhs + K u` (convergent since `K` strictly contracts that subspace),
/// re-projecting the mass component each step against roundoff drift.
fn solve_zero_mass(k: &KernelMatrix, rhs: &[f64]) -> Result<Vec<f64>> {
    let n = k.n_cells();
    let mut rhs = rhs.to_vec();
    project_zero_mean(&mut rhs);
    let rhs_norm: f64 = rhs.iter().map(|v| v.abs()).sum();
    if rhs_norm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let mut u = rhs.clone();
    let mut ku = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for iter in 0..RESOLVENT_ITER_CAP {
        k.apply_into(&u, &mut ku);
        let mut max_change = 0.0f64;
        for i in 0..n {
            let new = rhs[i] + ku[i];
            max_change = max_change.max((new - u[i]).abs());
            u[i] = new;
        }
        project_zero_mean(&mut u);
        if iter % 32 == 0 || max_change == 0.0 {
            // True residual ||(I - K) u - rhs||_1 relative to ||rhs||_1.
            k.apply_into(&u, &mut ku);
            residual = u
                .iter()
                .zip(&ku)
                .zip(&rhs)
                .map(|((ui, kui), ri)| (ui - kui - ri).abs())
                .sum::<f64>()
                / rhs_norm;
            if residual < 1e-11 {
                return Ok(u);
            }
        }
    }
    Err(Error::NoConvergence {
        what: "resolvent Neumann iteration".into(),
        iterations: RESOLVENT_ITER_CAP,
        residual,
    })
}

/// Grid-oracle linear response of the stationary average of `phi` to the
/// drift perturbation `eta`: builds the base kernel and its invariant
/// density, realizes the kernel derivative as a central finite difference of
/// amplitude `fd_delta`, solves the resolvent equation on the zero-mass
/// subspace, and integrates against the observable.
pub fn response_resolvent(
    system: &SdeSystem,
    eta: &VectorField,
    phi: &Observable,
    grid: &Grid,
    dt: f64,
    fd_delta: f64,
) -> Result<f64> {
    let pieces = response_pieces(system, eta, grid, dt, fd_delta)?;
    let u = solve_zero_mass(&pieces.k0, &pieces.d_vec)?;
    Ok(integrate_against(phi, grid, &u))
}

/// Variant of [`response_resolvent`] that truncates the resolvent's Neumann
/// series after `w_steps` kernel applications, mirroring the finite
/// decorrelation horizon of the Monte Carlo estimator:
/// `sum_{k=0}^{w_steps-1} K^k D` instead of `(I - K)^{-1} D`. The difference
/// between the two quantifies the truncation bias at horizon `w_steps * dt`.
pub fn response_resolvent_truncated(
    system: &SdeSystem,
    eta: &VectorField,
    phi: &Observable,
    grid: &Grid,
    dt: f64,
    fd_delta: f64,
    w_steps: usize,
) -> Result<f64> {
    if w_steps == 0 {
        return Err(Error::invalid("truncation horizon must be at least 1 step"));
    }
    let pieces = response_pieces(system, eta, grid, dt, fd_delta)?;
    let mut rhs = pieces.d_vec.clone();
    project_zero_mean(&mut rhs);
    // u_t = sum_{k=0}^{t} K^k rhs via u <- rhs + K u.
    let mut u = rhs.clone();
    let mut ku = vec![0.0; u.len()];
    for _ in 0..w_steps - 1 {
        pieces.k0.apply_into(&u, &mut ku);
        for i in 0..u.len() {
            u[i] = rhs[i] + ku[i];
        }
    }
    Ok(integrate_against(phi, grid, &u))
}

fn integrate_against(phi: &Observable, grid: &Grid, values: &[f64]) -> f64 {
    let mut sum = 0.0;
    for (idx, v) in values.iter().enumerate() {
        sum += phi.eval(grid.center(idx)) * v;
    }
    sum * grid.cell_volume()
}

/// Outcome of the first-order-expansion check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExpansionCheck {
    /// The perturbation is identically zero on the grid: every difference
    /// quotient vanishes exactly and no slope is defined.
    ExactZero,
    /// Fitted log-log slope of the remainder `||r^delta - r_ref||_2` against
    /// `delta`; first-order expansion predicts slope 1.
    Slope(f64),
}

/// Checks the first-order expansion of the perturbed kernel in the
/// amplitude: for each `delta` in a decreasing geometric ladder (consecutive
/// ratios of at least 1.5), forms the one-step difference quotient
/// `r^delta = (K_delta p0 - K_0 p0) / delta`, Richardson extrapolates the
/// two smallest deltas to a reference derivative, and fits the decay rate of
/// the remaining quotients' `L^2` distance to that reference. A first-order
/// expansion makes the distance linear in `delta`, so the fitted slope
/// should be 1. A ladder whose distances fail to decay by at least 5% per
/// rung (stalled or growing) signals that the grid or finite-difference
/// noise floor has been hit and is reported as an error.
pub fn first_order_expansion_check(
    system: &SdeSystem,
    eta: &VectorField,
    p0: &DensityVector,
    grid: &Grid,
    dt: f64,
    deltas: &[f64],
) -> Result<ExpansionCheck> {
    if deltas.len() < 4 {
        return Err(Error::invalid(
            "expansion check needs at least 4 deltas (2 for the reference, 2 for the fit)",
        ));
    }
    for &delta in deltas {
        if delta <= 0.0 || !delta.is_finite() {
            return Err(Error::invalid(
                "deltas must be positive and decrease geometrically (ratio of at least 1.5)",
            ));
        }
    }
    for pair in deltas.windows(2) {
        if pair[1] * 1.5 > pair[0] {
            return Err(Error::invalid(
                "deltas must be positive and decrease geometrically (ratio of at least 1.5)",
            ));
        }
    }
    if p0.values().len() != grid.n_cells() {
        return Err(Error::invalid("density does not match the grid"));
    }

    let k0 = build_kernel_matrix(system, grid, dt)?;
    let base = k0.apply(p0.values());
    let quotient = |delta: f64| -> Result<Vec<f64>> {
        let kd = build_kernel_inner(&perturbed_system(system, eta, delta), grid, dt, delta)?;
        let moved = kd.apply(p0.values());
        Ok(moved
            .iter()
            .zip(&base)
            .map(|(m, b)| (m - b) / delta)
            .collect())
    };

    let quotients: Vec<Vec<f64>> = deltas
        .iter()
        .map(|&d| quotient(d))
        .collect::<Result<Vec<_>>>()?;

    if quotients
        .iter()
        .all(|q| q.iter().all(|&v| v == 0.0))
    {
        return Ok(ExpansionCheck::ExactZero);
    }

    // Richardson limit from the two smallest deltas (first-order error
    // model): r_ref = (d2 * r(d1) - d1 * r(d2)) / (d2 - d1), d1 < d2.
    let n = deltas.len();
    let (d1, d2) = (deltas[n - 1], deltas[n - 2]);
    let r_ref: Vec<f64> = quotients[n - 1]
        .iter()
        .zip(&quotients[n - 2])
        .map(|(r1, r2)| (d2 * r1 - d1 * r2) / (d2 - d1))
        .collect();

    let vol = grid.cell_volume();
    let errors: Vec<f64> = quotients[..n - 2]
        .iter()
        .map(|q| {
            (q.iter()
                .zip(&r_ref)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                * vol)
                .sqrt()
        })
        .collect();

    // Deltas shrink at least 1.5x per rung, so a first-order remainder must
    // shrink clearly too; a stall or growth means a noise floor dominates.
    for (w, pair) in errors.windows(2).enumerate() {
        if pair[1] >= 0.95 * pair[0] {
            return Err(Error::NonMonotoneLadder(format!(
                "remainder moved from {:.3e} to {:.3e} between delta {:.3e} and {:.3e} \
                 (needs at least a 5% drop per rung); the grid or finite-difference \
                 noise floor has been reached",
                pair[0],
                pair[1],
                deltas[w],
                deltas[w + 1]
            )));
        }
    }

    let logs: Vec<(f64, f64)> = deltas[..n - 2]
        .iter()
        .zip(&errors)
        .map(|(d, e)| (d.ln(), e.ln()))
        .collect();
    Ok(ExpansionCheck::Slope(fit_slope(&logs)))
}

/// Checks the pre-equilibration smoothing law for driftless diffusion: a
/// near-Dirac initial density evolved for time `t` has
/// `||p_t||_2 ~ t^(-d/4)`. The kernel is built once at `dt = times[0]` and
/// applied repeatedly, so every requested time must be an integer multiple
/// of the first. Returns the fitted log-log exponent.
pub fn l2_smoothing_check(system: &SdeSystem, grid: &Grid, times: &[f64]) -> Result<f64> {
    if times.len() < 2 {
        return Err(Error::invalid("smoothing check needs at least 2 times"));
    }
    for &t in times {
        if t <= 0.0 || !t.is_finite() {
            return Err(Error::invalid("times must be positive"));
        }
    }
    for pair in times.windows(2) {
        if pair[0] >= pair[1] {
            return Err(Error::invalid("times must be strictly increasing"));
        }
    }
    let dt = times[0];
    let steps: Vec<usize> = times
        .iter()
        .map(|&t| {
            let k = t / dt;
            if (k - k.round()).abs() > 1e-9 {
                Err(Error::invalid(format!(
                    "time {t} is not an integer multiple of the smallest time {dt}"
                )))
            } else {
                Ok(k.round() as usize)
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let k = build_kernel_matrix(system, grid, dt)?;
    let mut p = DensityVector::dirac(grid, grid.cell_of(grid.domain().centers())).values
        .clone();
    let mut next = vec![0.0; p.len()];
    let vol = grid.cell_volume();
    let mut samples: Vec<(f64, f64)> = Vec::with_capacity(times.len());
    let mut done = 0usize;
    for (&t, &s) in times.iter().zip(&steps) {
        while done < s {
            k.apply_into(&p, &mut next);
            std::mem::swap(&mut p, &mut next);
            done += 1;
        }
        let norm = (p.iter().map(|v| v * v).sum::<f64>() * vol).sqrt();
        samples.push((t.ln(), norm.ln()));
    }

    // The law only holds before equilibration: once the density is close to
    // uniform the norm saturates at volume^(-1/2) and the window is empty.
    let uniform_norm = 1.0 / grid.domain().volume().sqrt();
    let last_norm = samples.last().expect("non-empty").1.exp();
    if last_norm <= 1.02 * uniform_norm {
        return Err(Error::invalid(format!(
            "largest time is past equilibration: ||p||_2 = {last_norm:.6} vs uniform {uniform_norm:.6}"
        )));
    }

    Ok(fit_slope(&samples))
}

/// Least-squares slope of `y` against `x`.
fn fit_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xb = points.iter().map(|p| p.0).sum::<f64>() / n;
    let yb = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - xb) * (p.0 - xb)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - xb) * (p.1 - yb)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

    fn circle_grid(m: usize) -> Grid {
        Grid::new(TorusDomain::standard(1).unwrap(), m).unwrap()
    }

    fn driftless(sigma: f64) -> SdeSystem {
        SdeSystem::new(TorusDomain::standard(1).unwrap(), VectorField::zero(1), sigma).unwrap()
    }

    /// dX = gamma sin(X) dt + dW, whose invariant density is the Gibbs
    /// density ~ exp(-2 gamma cos x).
    fn gradient_system(gamma: f64) -> SdeSystem {
        let drift = VectorField::from_fn("grad", 1, move |x, out| out[0] = gamma * x[0].sin());
        SdeSystem::new(TorusDomain::standard(1).unwrap(), drift, 1.0).unwrap()
    }

    #[test]
    fn grid_construction_and_validation() {
        let g = circle_grid(16);
        assert_eq!(g.n_cells(), 16);
        assert_abs_diff_eq!(
            g.cell_volume() * g.n_cells() as f64,
            TWO_PI,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(g.center(0)[0], g.spacing() / 2.0, epsilon = 1e-12);

        assert!(Grid::new(TorusDomain::standard(1).unwrap(), 7).is_err());
        let err = Grid::new(TorusDomain::standard(3).unwrap(), 16).unwrap_err();
        assert!(matches!(err, Error::UnsupportedDimension { d: 3 }));

        // Two-dimensional layout: row-major, last coordinate fastest.
        let g2 = Grid::new(TorusDomain::standard(2).unwrap(), 8).unwrap();
        assert_eq!(g2.n_cells(), 64);
        assert_abs_diff_eq!(g2.center(1)[1] - g2.center(0)[1], g2.spacing(), epsilon = 1e-12);
        assert_abs_diff_eq!(g2.center(8)[0] - g2.center(0)[0], g2.spacing(), epsilon = 1e-12);
        assert_eq!(g2.cell_of(g2.center(37)), 37);
    }

    #[test]
    fn kernel_columns_are_stochastic_and_positive() {
        let grid = circle_grid(64);
        let k = build_kernel_matrix(&gradient_system(0.7), &grid, 0.05).unwrap();
        for j in 0..grid.n_cells() {
            let sum: f64 = (0..grid.n_cells()).map(|i| k.entry(i, j)).sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
        }
        assert!(k.min_density() > 0.0);
    }

    #[test]
    fn too_coarse_grid_is_rejected_with_required_size() {
        let grid = circle_grid(16);
        let err = build_kernel_matrix(&driftless(0.1), &grid, 0.01).unwrap_err();
        match err {
            Error::GridTooCoarse {
                noise_std,
                required,
                m_per_dim,
            } => {
                assert_abs_diff_eq!(noise_std, 0.01, epsilon = 1e-12);
                assert_eq!(m_per_dim, 16);
                assert!(required > 1000, "required {required} should be ~ 2P/s");
            }
            other => panic!("expected GridTooCoarse, got {other:?}"),
        }
    }

    #[test]
    fn driftless_kernel_is_translation_invariant() {
        let m = 32;
        let grid = circle_grid(m);
        let k = build_kernel_matrix(&driftless(1.0), &grid, 0.25).unwrap();
        for shift in [1usize, 5, 17] {
            for j in 0..m {
                for i in (0..m).step_by(3) {
                    let a = k.entry(i, j);
                    let b = k.entry((i + shift) % m, (j + shift) % m);
                    assert_abs_diff_eq!(a, b, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn huge_noise_flattens_every_column() {
        let grid = circle_grid(32);
        let k = build_kernel_matrix(&driftless(50.0), &grid, 1.0).unwrap();
        let uniform = 1.0 / 32.0;
        for j in 0..32 {
            for i in 0..32 {
                assert_abs_diff_eq!(k.entry(i, j), uniform, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn invariant_density_of_driftless_kernel_is_uniform() {
        let grid = circle_grid(64);
        let k = build_kernel_matrix(&driftless(1.0), &grid, 0.05).unwrap();
        let f = invariant_density(&k, 1e-13).unwrap();
        assert_abs_diff_eq!(f.mass(), 1.0, epsilon = 1e-12);
        let uniform = 1.0 / TWO_PI;
        for &v in f.values() {
            assert_abs_diff_eq!(v, uniform, epsilon = 1e-10);
        }
    }

    /// Modified Bessel I_0 by its power series (converges fast for small z).
    fn bessel_i0(z: f64) -> f64 {
        let q = z * z / 4.0;
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..40 {
            term *= q / ((k * k) as f64);
            sum += term;
        }
        sum
    }

    #[test]
    fn invariant_density_matches_gibbs_for_gradient_drift() {
        let gamma = 0.5;
        let grid = circle_grid(256);
        let k = build_kernel_matrix(&gradient_system(gamma), &grid, 0.005).unwrap();
        let f = invariant_density(&k, 1e-13).unwrap();
        // Stationary density of the continuous system: exp(-2 gamma cos x)/Z
        // with Z = 2 pi I_0(2 gamma). The dt-chain differs at O(dt) and the
        // grid at O(h^2), both far below the 2% tolerance used here.
        let z = TWO_PI * bessel_i0(2.0 * gamma);
        let mut max_rel = 0.0f64;
        for (idx, &v) in f.values().iter().enumerate() {
            let x = grid.center(idx)[0];
            let want = (-2.0 * gamma * x.cos()).exp() / z;
            max_rel = max_rel.max((v - want).abs() / want);
        }
        assert!(max_rel < 0.02, "max relative deviation {max_rel}");
    }

    #[test]
    fn invariant_density_is_independent_of_the_start() {
        use rand::Rng;
        use rand::SeedableRng;
        let grid = circle_grid(64);
        let k = build_kernel_matrix(&gradient_system(0.8), &grid, 0.05).unwrap();
        let reference = invariant_density(&k, 1e-13).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let n = grid.n_cells();
        let vol = grid.cell_volume();
        for _ in 0..10 {
            // Random positive start, iterated to stationarity directly.
            let mut f: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 0.1).collect();
            let mass: f64 = f.iter().sum::<f64>() * vol;
            f.iter_mut().for_each(|v| *v /= mass);
            let mut next = vec![0.0; n];
            for _ in 0..20_000 {
                k.apply_into(&f, &mut next);
                std::mem::swap(&mut f, &mut next);
            }
            let dist: f64 = f
                .iter()
                .zip(reference.values())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                * vol;
            assert!(dist < 1e-8, "start-dependent density, L1 distance {dist}");
        }
    }

    #[test]
    fn lambda2_of_driftless_kernel_matches_fourier_value() {
        // Fourier modes diagonalize the driftless kernel with eigenvalues
        // exp(-sigma^2 k^2 dt / 2); the gap is exp(-0.25) at sigma=1, dt=0.5.
        let grid = circle_grid(64);
        let k = build_kernel_matrix(&driftless(1.0), &grid, 0.5).unwrap();
        let diag = spectral_diagnostics(&k);
        assert_abs_diff_eq!(diag.lambda2_modulus, (-0.25f64).exp(), epsilon = 1e-3);
        assert!(diag.min_entry > 0.0);
        assert!(diag.contraction_rho < 1.0);
    }

    #[test]
    fn contraction_bound_and_zero_mass_vectors() {
        use rand::Rng;
        use rand::SeedableRng;
        let grid = circle_grid(48);
        let k = build_kernel_matrix(&gradient_system(0.6), &grid, 0.1).unwrap();
        let diag = spectral_diagnostics(&k);
        let volume = TWO_PI;
        assert!(
            diag.contraction_rho <= 1.0 - diag.min_entry * volume + 1e-12,
            "rho {} vs Doeblin bound {}",
            diag.contraction_rho,
            1.0 - diag.min_entry * volume
        );
        // Any zero-mass vector contracts at least as strongly as the worst
        // point-mass pair (they are the extreme points of the L^1 ball).
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let n = grid.n_cells();
        for _ in 0..20 {
            let mut g: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
            project_zero_mean(&mut g);
            let kg = k.apply(&g);
            let num: f64 = kg.iter().map(|v| v.abs()).sum();
            let den: f64 = g.iter().map(|v| v.abs()).sum();
            assert!(
                num <= diag.contraction_rho * den + 1e-12,
                "zero-mass vector contracted by {} > rho {}",
                num / den,
                diag.contraction_rho
            );
        }
    }

    #[test]
    fn resolvent_response_vanishes_for_constant_perturbations_of_driftless() {
        let grid = circle_grid(64);
        let system = driftless(1.0);
        let eta = VectorField::from_fn("const", 1, |_, out| out[0] = 1.0);
        let phi = Observable::from_fn("cos", |x| x[0].cos());
        let r = response_resolvent(&system, &eta, &phi, &grid, 0.05, 1e-3).unwrap();
        assert!(r.abs() < 1e-6, "response {r} should vanish");
    }

    #[test]
    fn resolvent_response_matches_gibbs_derivative() {
        // d/d gamma at 0 of the cos-average under exp(-2 gamma cos)/Z is -1.
        let grid = circle_grid(256);
        let system = driftless(1.0);
        let eta = VectorField::from_fn("sin", 1, |x, out| out[0] = x[0].sin());
        let phi = Observable::from_fn("cos", |x| x[0].cos());
        let r = response_resolvent(&system, &eta, &phi, &grid, 0.05, 1e-3).unwrap();
        assert!(
            (r - (-1.0)).abs() < 0.02,
            "resolvent response {r} vs exact -1 (2% tolerance)"
        );
    }

    #[test]
    fn finite_difference_amplitude_is_stable() {
        let grid = circle_grid(128);
        let system = gradient_system(0.3);
        let eta = VectorField::from_fn("mix", 1, |x, out| {
            out[0] = 0.8 * x[0].sin() - 0.4 * (2.0 * x[0]).cos()
        });
        let phi = Observable::from_fn("cos", |x| x[0].cos());
        let a = response_resolvent(&system, &eta, &phi, &grid, 0.05, 1e-3).unwrap();
        let b = response_resolvent(&system, &eta, &phi, &grid, 0.05, 5e-4).unwrap();
        assert!(
            (a - b).abs() <= 0.01 * a.abs().max(1e-3),
            "fd_delta halving moved the response from {a} to {b}"
        );
    }

    #[test]
    fn truncated_resolvent_approaches_the_full_one() {
        let grid = circle_grid(128);
        let system = driftless(1.0);
        let eta = VectorField::from_fn("sin", 1, |x, out| out[0] = x[0].sin());
        let phi = Observable::from_fn("cos", |x| x[0].cos());
        let dt = 0.05;
        let full = response_resolvent(&system, &eta, &phi, &grid, dt, 1e-3).unwrap();
        // Horizon w: the cos mode decays like exp(-dt k^2/2) per step, so the
        // truncated series recovers a 1 - exp(-w dt / 2) share.
        let short = response_resolvent_truncated(&system, &eta, &phi, &grid, dt, 1e-3, 40).unwrap();
        let long = response_resolvent_truncated(&system, &eta, &phi, &grid, dt, 1e-3, 400).unwrap();
        let expect_short = full * (1.0 - (-40.0 * dt / 2.0).exp());
        assert!(
            (short - expect_short).abs() < 0.02 * full.abs(),
            "short-horizon value {short} vs decay model {expect_short}"
        );
        assert!(
            (long - full).abs() < 1e-4 * full.abs(),
            "long horizon {long} should match full {full}"
        );
    }

    #[test]
    fn expansion_check_finds_first_order_slope() {
        let grid = circle_grid(128);
        let system = gradient_system(0.4);
        let eta = VectorField::from_fn("sin", 1, |x, out| out[0] = x[0].sin());
        let k = build_kernel_matrix(&system, &grid, 0.05).unwrap();
        let p0 = invariant_density(&k, 1e-13).unwrap();
        let deltas = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 3e-4];
        match first_order_expansion_check(&system, &eta, &p0, &grid, 0.05, &deltas).unwrap() {
            ExpansionCheck::Slope(s) => {
                assert!((s - 1.0).abs() <= 0.15, "expansion slope {s} not ~ 1");
            }
            ExpansionCheck::ExactZero => panic!("nonzero perturbation reported as zero"),
        }
    }

    #[test]
    fn expansion_check_zero_perturbation_is_special_cased() {
        let grid = circle_grid(32);
        let system = driftless(1.0);
        let eta = VectorField::zero(1);
        let p0 = DensityVector::uniform(&grid);
        let deltas = [1e-1, 3e-2, 1e-2, 3e-3];
        let out = first_order_expansion_check(&system, &eta, &p0, &grid, 0.25, &deltas).unwrap();
        assert_eq!(out, ExpansionCheck::ExactZero);
    }

    #[test]
    fn expansion_check_is_grid_independent() {
        let system = gradient_system(0.4);
        let eta = VectorField::from_fn("sin", 1, |x, out| out[0] = x[0].sin());
        let deltas = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3];
        let mut slopes = Vec::new();
        for m in [96usize, 192] {
            let grid = circle_grid(m);
            let k = build_kernel_matrix(&system, &grid, 0.05).unwrap();
            let p0 = invariant_density(&k, 1e-13).unwrap();
            match first_order_expansion_check(&system, &eta, &p0, &grid, 0.05, &deltas).unwrap() {
                ExpansionCheck::Slope(s) => slopes.push(s),
                ExpansionCheck::ExactZero => panic!("unexpected zero"),
            }
        }
        assert!(
            (slopes[0] - slopes[1]).abs() <= 0.05,
            "slope moved from {} to {} under grid doubling",
            slopes[0],
            slopes[1]
        );
    }

    #[test]
    fn expansion_check_reports_noise_floor() {
        // Deltas so small that the difference quotients are pure roundoff:
        // the remainder ladder cannot decrease monotonically.
        let grid = circle_grid(32);
        let system = gradient_system(0.4);
        let eta = VectorField::from_fn("sin", 1, |x, out| out[0] = x[0].sin());
        let k = build_kernel_matrix(&system, &grid, 0.25).unwrap();
        let p0 = invariant_density(&k, 1e-12).unwrap();
        let deltas = [1e-9, 3e-10, 1e-10, 3e-11, 1e-11, 3e-12];
        let out = first_order_expansion_check(&system, &eta, &p0, &grid, 0.25, &deltas);
        assert!(
            matches!(out, Err(Error::NonMonotoneLadder(_))),
            "expected the noise floor to trip the ladder check, got {out:?}"
        );
    }

    #[test]
    fn smoothing_exponent_one_dimension() {
        let grid = circle_grid(256);
        let system = driftless(1.0);
        let times = [0.02, 0.04, 0.08, 0.16, 0.32, 0.64];
        let exponent = l2_smoothing_check(&system, &grid, &times).unwrap();
        assert!(
            (exponent - (-0.25)).abs() <= 0.05,
            "1-d smoothing exponent {exponent} not within -0.25 +- 0.05"
        );
    }

    #[test]
    fn smoothing_exponent_two_dimensions() {
        let grid = Grid::new(TorusDomain::standard(2).unwrap(), 48).unwrap();
        let system = SdeSystem::new(
            TorusDomain::standard(2).unwrap(),
            VectorField::zero(2),
            1.0,
        )
        .unwrap();
        let times = [0.08, 0.16, 0.32, 0.64];
        let exponent = l2_smoothing_check(&system, &grid, &times).unwrap();
        assert!(
            (exponent - (-0.5)).abs() <= 0.05,
            "2-d smoothing exponent {exponent} not within -0.5 +- 0.05"
        );
    }

    #[test]
    fn smoothing_saturates_at_the_uniform_norm() {
        // Far past equilibration the norm sits at volume^(-1/2), and the
        // check refuses to fit a power law there.
        let grid = circle_grid(64);
        let system = driftless(1.0);
        let err = l2_smoothing_check(&system, &grid, &[0.05, 40.0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("equilibration"), "unexpected message: {msg}");

        // Direct check of the limit value.
        let k = build_kernel_matrix(&system, &grid, 0.05).unwrap();
        let mut p = DensityVector::dirac(&grid, 11).values().to_vec();
        let mut next = vec![0.0; p.len()];
        for _ in 0..800 {
            k.apply_into(&p, &mut next);
            std::mem::swap(&mut p, &mut next);
        }
        let norm = (p.iter().map(|v| v * v).sum::<f64>() * grid.cell_volume()).sqrt();
        assert_abs_diff_eq!(norm, 1.0 / TWO_PI.sqrt(), epsilon = 1e-6);
    }

    #[test]
    fn mass_is_conserved_under_repeated_application() {
        let grid = circle_grid(64);
        let k = build_kernel_matrix(&gradient_system(0.9), &grid, 0.05).unwrap();
        let mut p = DensityVector::dirac(&grid, 5).values().to_vec();
        let vol = grid.cell_volume();
        let mut next = vec![0.0; p.len()];
        for _ in 0..200 {
            k.apply_into(&p, &mut next);
            std::mem::swap(&mut p, &mut next);
            let mass: f64 = p.iter().sum::<f64>() * vol;
            assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-12);
        }
    }
}
