//! Torus geometry, vector fields, and the Euler–Maruyama integrator.
//!
//! The phase space is the flat torus `T^d`: a product of `d` circles, each
//! represented by the half-open interval `[c_i - r_box, c_i + r_box)` of
//! circumference `2 * r_box`. All dynamics wrap periodically; the drift and
//! every perturbation field are periodic functions of the representative
//! coordinates.
//!
//! The integrator is the Euler–Maruyama chain
//!
//! ```text
//!     X_{n+1} = wrap( X_n + dt * F(X_n) + sigma * sqrt(dt) * xi_n ),
//! ```
//!
//! with `xi_n` independent standard Gaussian vectors. Reproducibility is a
//! hard contract here: every chain derives its noise from a counter-based
//! stream cipher seeded by `(seed, chain_index)`, and Gaussians are produced
//! by the Box–Muller transform, so identical inputs give bit-identical
//! trajectories on any platform with IEEE-754 doubles.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::basis::BasisField;
use crate::error::{Error, Result};

/// The flat torus `T^d`, stored as per-coordinate centers plus a common
/// half-width. Coordinate `i` lives on `[centers[i] - r_box, centers[i] + r_box)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TorusDomain {
    d: usize,
    centers: Vec<f64>,
    r_box: f64,
}

impl TorusDomain {
    /// Builds a torus with the given per-coordinate centers and half-width.
    pub fn new(centers: Vec<f64>, r_box: f64) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::invalid("torus dimension must be at least 1"));
        }
        if r_box <= 0.0 || !r_box.is_finite() {
            return Err(Error::invalid(format!(
                "torus half-width must be positive and finite, got {r_box}"
            )));
        }
        if centers.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("torus centers must be finite"));
        }
        Ok(TorusDomain {
            d: centers.len(),
            centers,
            r_box,
        })
    }

    /// The standard circle `[0, 2*pi)^d` used by the oscillator examples
    /// (center `pi`, half-width `pi` in every coordinate).
    pub fn standard(d: usize) -> Result<Self> {
        TorusDomain::new(vec![std::f64::consts::PI; d], std::f64::consts::PI)
    }

    /// Dimension `d`.
    pub fn dim(&self) -> usize {
        self.d
    }

    /// Per-coordinate centers `c_i`.
    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    /// Common per-coordinate half-width `r_box`.
    pub fn r_box(&self) -> f64 {
        self.r_box
    }

    /// Circumference of each coordinate circle, `2 * r_box`.
    pub fn period(&self) -> f64 {
        2.0 * self.r_box
    }

    /// Total volume `(2 * r_box)^d`.
    pub fn volume(&self) -> f64 {
        self.period().powi(self.d as i32)
    }

    /// Wraps one coordinate into its representative interval
    /// `[c - r_box, c + r_box)`.
    #[inline]
    pub fn wrap_coord(&self, i: usize, x: f64) -> f64 {
        let lo = self.centers[i] - self.r_box;
        lo + (x - lo).rem_euclid(self.period())
    }

    /// Wraps a point in place.
    #[inline]
    pub fn wrap_in_place(&self, x: &mut [f64]) {
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = self.wrap_coord(i, *xi);
        }
    }

    /// Wraps a signed coordinate difference into `[-r_box, r_box)`; this is
    /// the geodesic displacement on the circle.
    #[inline]
    pub fn wrap_delta(&self, dx: f64) -> f64 {
        (dx + self.r_box).rem_euclid(self.period()) - self.r_box
    }
}

/// Wraps a point into the representative box of `domain`, coordinate by
/// coordinate. The result differs from `x` by an integer multiple of the
/// period in every coordinate, and wrapping an already-wrapped point is the
/// identity.
pub fn wrap_point(x: &[f64], domain: &TorusDomain) -> Vec<f64> {
    assert_eq!(x.len(), domain.dim(), "point dimension mismatch");
    x.iter()
        .enumerate()
        .map(|(i, &xi)| domain.wrap_coord(i, xi))
        .collect()
}

/// Internal representation of a vector field.
///
/// Fields constructed from trigonometric basis elements keep their structure
/// so that downstream consumers (the batched response estimator, perturbed
/// drifts in sweeps) can share per-coordinate evaluations across many fields;
/// the values produced are identical to evaluating each field on its own.
#[derive(Clone)]
pub(crate) enum FieldRepr {
    /// Arbitrary user closure writing the field value into an output buffer.
    Closure(#[allow(clippy::type_complexity)] Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>),
    /// A linear combination of trigonometric product elements.
    Basis(BasisField),
}

/// A vector field on the torus: a deterministic, total map from points to
/// `d`-vectors (drift units, state per time). Evaluation is pure and
/// thread-safe; periodicity is part of the contract, and fields built from
/// the trigonometric basis wrap their argument internally so that
/// `eval(x) == eval(wrap(x))` holds exactly.
#[derive(Clone)]
pub struct VectorField {
    label: String,
    dim: usize,
    pub(crate) repr: FieldRepr,
}

impl VectorField {
    /// Wraps a closure as a vector field. The closure must write exactly
    /// `dim` values into the output slice and must be periodic on the torus
    /// it is used with.
    pub fn from_fn<F>(label: impl Into<String>, dim: usize, f: F) -> Self
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        VectorField {
            label: label.into(),
            dim,
            repr: FieldRepr::Closure(Arc::new(f)),
        }
    }

    /// The zero field in dimension `dim`.
    pub fn zero(dim: usize) -> Self {
        VectorField::from_fn("zero", dim, |_, out| out.fill(0.0))
    }

    pub(crate) fn from_basis(label: impl Into<String>, field: BasisField) -> Self {
        VectorField {
            label: label.into(),
            dim: field.ambient_dim(),
            repr: FieldRepr::Basis(field),
        }
    }

    /// Identifier used in logs and CSV metadata.
    pub fn label(&self) -> &str {
        &self.label
    }

    /// Output dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Evaluates the field at `x`, writing into `out`.
    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(out.len(), self.dim);
        match &self.repr {
            FieldRepr::Closure(f) => f(x, out),
            FieldRepr::Basis(b) => b.eval(x, out),
        }
    }

    /// Evaluates the field into a freshly allocated vector.
    pub fn eval_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval(x, &mut out);
        out
    }
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorField")
            .field("label", &self.label)
            .field("dim", &self.dim)
            .finish_non_exhaustive()
    }
}

/// Shared closure backing an [`Observable`].
type ObservableFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// A scalar observable `phi: T^d -> R`.
#[derive(Clone)]
pub struct Observable {
    label: String,
    f: Arc<ObservableFn>,
}

impl Observable {
    /// Wraps a closure as an observable.
    pub fn from_fn<F>(label: impl Into<String>, f: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Observable {
            label: label.into(),
            f: Arc::new(f),
        }
    }

    /// Identifier used in logs and CSV metadata.
    pub fn label(&self) -> &str {
        &self.label
    }

    /// Evaluates the observable.
    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

impl fmt::Debug for Observable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Observable")
            .field("label", &self.label)
            .finish_non_exhaustive()
    }
}

/// An SDE `dX = F(X) dt + sigma dW` on a torus. The noise amplitude is a
/// single positive scalar; non-degenerate noise is what gives the transfer
/// operator its spectral gap, so `sigma > 0` is enforced at construction.
#[derive(Debug, Clone)]
pub struct SdeSystem {
    domain: TorusDomain,
    drift: VectorField,
    sigma: f64,
}

impl SdeSystem {
    /// Builds a system, validating noise positivity and dimension agreement.
    pub fn new(domain: TorusDomain, drift: VectorField, sigma: f64) -> Result<Self> {
        if sigma <= 0.0 || !sigma.is_finite() {
            return Err(Error::invalid(format!(
                "noise amplitude must be positive and finite, got {sigma}"
            )));
        }
        if drift.dim() != domain.dim() {
            return Err(Error::invalid(format!(
                "drift dimension {} does not match domain dimension {}",
                drift.dim(),
                domain.dim()
            )));
        }
        Ok(SdeSystem {
            domain,
            drift,
            sigma,
        })
    }

    pub fn domain(&self) -> &TorusDomain {
        &self.domain
    }

    pub fn drift(&self) -> &VectorField {
        &self.drift
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// A copy of the system with drift replaced (same domain and noise).
    pub fn with_drift(&self, drift: VectorField) -> Result<Self> {
        SdeSystem::new(self.domain.clone(), drift, self.sigma)
    }
}

/// Gaussian noise source: a ChaCha8 stream cipher (seeded from a 64-bit seed,
/// with the chain index selecting an independent stream) feeding the
/// Box–Muller transform
///
/// ```text
///     u1 in (0, 1],  u2 in [0, 1),
///     z0 = sqrt(-2 ln u1) * cos(2 pi u2),
///     z1 = sqrt(-2 ln u1) * sin(2 pi u2),
/// ```
///
/// where `u1 = 1 - r` for `r` uniform on `[0, 1)` so the logarithm never sees
/// zero. Draws come in pairs; the second member is cached so consecutive
/// single draws consume the stream deterministically.
#[derive(Debug, Clone)]
pub struct GaussianSource {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl GaussianSource {
    /// Noise source for chain `chain_index` of a run seeded with `seed`.
    /// Distinct `(seed, chain_index)` pairs give independent streams.
    pub fn new(seed: u64, chain_index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(chain_index);
        GaussianSource { rng, spare: None }
    }

    /// One standard normal draw.
    #[inline]
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1: f64 = 1.0 - self.rng.gen::<f64>();
        let u2: f64 = self.rng.gen::<f64>();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    /// Fills a slice with standard normal draws.
    #[inline]
    pub fn fill_standard_normal(&mut self, out: &mut [f64]) {
        for z in out.iter_mut() {
            *z = self.standard_normal();
        }
    }
}

/// A realized Euler–Maruyama trajectory: the wrapped states, the standard
/// Gaussian increments that produced them, and the step size and seed needed
/// to reproduce the run. There is one fewer increment than states.
#[derive(Debug, Clone)]
pub struct Trajectory {
    d: usize,
    states: Vec<f64>,
    increments: Vec<f64>,
    dt: f64,
    seed: u64,
}

impl Trajectory {
    /// Number of stored states (steps + 1).
    pub fn n_states(&self) -> usize {
        self.states.len() / self.d
    }

    /// State `n` as a slice of length `d`.
    pub fn state(&self, n: usize) -> &[f64] {
        &self.states[n * self.d..(n + 1) * self.d]
    }

    /// Iterator over states in order.
    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks_exact(self.d)
    }

    /// The Gaussian increment used for step `n` (from state `n` to `n+1`).
    pub fn increment(&self, n: usize) -> &[f64] {
        &self.increments[n * self.d..(n + 1) * self.d]
    }

    /// Iterator over Gaussian increments in order.
    pub fn increments(&self) -> impl Iterator<Item = &[f64]> {
        self.increments.chunks_exact(self.d)
    }

    /// Step size `dt`.
    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Seed the noise stream was derived from.
    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Advances one Euler–Maruyama step in place. The drift is evaluated into
/// `drift_buf`, checked for finiteness, and the update uses the fixed
/// expression `x + dt * F + sigma_sqrt_dt * xi` followed by wrapping, so the
/// floating-point result is identical wherever this helper is used.
#[inline]
pub(crate) fn em_step_in_place(
    domain: &TorusDomain,
    drift: &VectorField,
    dt: f64,
    sigma_sqrt_dt: f64,
    x: &mut [f64],
    drift_buf: &mut [f64],
    xi: &[f64],
) -> Result<()> {
    drift.eval(x, drift_buf);
    if drift_buf.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteDrift { state: x.to_vec() });
    }
    for i in 0..x.len() {
        x[i] = domain.wrap_coord(i, x[i] + dt * drift_buf[i] + sigma_sqrt_dt * xi[i]);
    }
    Ok(())
}

fn simulate_impl(
    system: &SdeSystem,
    x0: &[f64],
    dt: f64,
    steps: usize,
    seed: u64,
    with_noise: bool,
) -> Result<Trajectory> {
    if dt <= 0.0 || !dt.is_finite() {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    if steps == 0 {
        return Err(Error::invalid("steps must be at least 1"));
    }
    let d = system.domain().dim();
    if x0.len() != d {
        return Err(Error::invalid(format!(
            "initial state has dimension {}, expected {d}",
            x0.len()
        )));
    }

    let domain = system.domain();
    let mut x = wrap_point(x0, domain);
    let mut noise = GaussianSource::new(seed, 0);
    let sigma_sqrt_dt = if with_noise {
        system.sigma() * dt.sqrt()
    } else {
        0.0
    };

    let mut states = Vec::with_capacity((steps + 1) * d);
    let mut increments = Vec::with_capacity(steps * d);
    let mut drift_buf = vec![0.0; d];
    let mut xi = vec![0.0; d];

    states.extend_from_slice(&x);
    for _ in 0..steps {
        if with_noise {
            noise.fill_standard_normal(&mut xi);
        }
        em_step_in_place(domain, system.drift(), dt, sigma_sqrt_dt, &mut x, &mut drift_buf, &xi)?;
        increments.extend_from_slice(&xi);
        states.extend_from_slice(&x);
    }

    Ok(Trajectory {
        d,
        states,
        increments,
        dt,
        seed,
    })
}

/// Simulates the Euler–Maruyama chain for `steps` steps from `x0`.
///
/// Identical `(system, x0, dt, steps, seed)` give bit-identical output. The
/// initial state is wrapped into the representative box before use. A
/// non-finite drift evaluation aborts with the offending state.
pub fn simulate_em(
    system: &SdeSystem,
    x0: &[f64],
    dt: f64,
    steps: usize,
    seed: u64,
) -> Result<Trajectory> {
    simulate_impl(system, x0, dt, steps, seed, true)
}

/// Deterministic variant of [`simulate_em`]: the noise term is dropped
/// entirely (all recorded increments are zero), leaving the explicit Euler
/// recursion `x_{n+1} = wrap(x_n + dt * F(x_n))`. The stationary theory
/// requires positive noise, so this variant exists for exact-arithmetic
/// tests only.
pub fn simulate_em_deterministic(
    system: &SdeSystem,
    x0: &[f64],
    dt: f64,
    steps: usize,
    seed: u64,
) -> Result<Trajectory> {
    simulate_impl(system, x0, dt, steps, seed, false)
}

/// Arithmetic mean of `phi` over the states after `burn_in` (an index into
/// the state sequence). Errors if no states remain.
pub fn ergodic_average(traj: &Trajectory, phi: &Observable, burn_in: usize) -> Result<f64> {
    let n = traj.n_states();
    if burn_in >= n {
        return Err(Error::invalid(format!(
            "burn-in of {burn_in} states leaves an empty averaging window (trajectory has {n})"
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for state in traj.states().skip(burn_in) {
        sum += phi.eval(state);
        count += 1;
    }
    Ok(sum / count as f64)
}
