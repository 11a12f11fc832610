//! The benchmark systems: coupled oscillator networks on `[0, 2*pi)^d` and
//! the cutoff Lorenz-63 flow embedded in a 3-torus, plus the reduced
//! perturbation family used by the high-dimensional oscillator run.
//!
//! Each system is exposed as plain building blocks (spec struct, drift
//! field, observable, domain) so callers can assemble them with whatever
//! estimator or oracle parameters they need, and registered under a string
//! id for config-driven selection.

use std::fmt;
use std::str::FromStr;

use crate::basis::PerturbationSpace;
use crate::error::{Error, Result};
use crate::torus::{Observable, TorusDomain, VectorField};

/// A network of phase oscillators with mean-field sine coupling on
/// `[0, 2*pi)^d`:
///
/// ```text
///     F^i(x) = omega^i + (1/d) * sum_j sin(x^j - x^i).
/// ```
#[derive(Debug, Clone)]
pub struct KuramotoSpec {
    omegas: Vec<f64>,
}

impl KuramotoSpec {
    pub fn new(omegas: Vec<f64>) -> Result<Self> {
        if omegas.is_empty() {
            return Err(Error::invalid("oscillator network needs at least one node"));
        }
        if omegas.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("oscillator frequencies must be finite"));
        }
        Ok(KuramotoSpec { omegas })
    }

    /// The two-oscillator benchmark: frequencies (1, 3).
    pub fn two_dim() -> Self {
        KuramotoSpec {
            omegas: vec![1.0, 3.0],
        }
    }

    /// The twenty-oscillator benchmark: frequencies 1, 1.2, ..., 4.8.
    pub fn twenty_dim() -> Self {
        KuramotoSpec {
            omegas: (0..20).map(|i| 1.0 + 0.2 * i as f64).collect(),
        }
    }

    pub fn d(&self) -> usize {
        self.omegas.len()
    }

    pub fn omegas(&self) -> &[f64] {
        &self.omegas
    }

    /// The phase torus `[0, 2*pi)^d`.
    pub fn domain(&self) -> TorusDomain {
        TorusDomain::standard(self.d()).expect("d >= 1 by construction")
    }
}

/// The oscillator drift field. The coupling sum is folded through the
/// identity `sum_j sin(x^j - x^i) = S_sin * cos(x^i) - S_cos * sin(x^i)`
/// with `S_sin = sum_j sin(x^j)`, `S_cos = sum_j cos(x^j)`, which costs
/// `O(d)` per evaluation instead of `O(d^2)`; the `j = i` self-term
/// contributes exactly zero either way.
pub fn kuramoto_drift(spec: &KuramotoSpec) -> VectorField {
    let omegas = spec.omegas().to_vec();
    let d = omegas.len();
    let inv_d = 1.0 / d as f64;
    VectorField::from_fn("kuramoto", d, move |x, out| {
        let mut s_sin = 0.0;
        let mut s_cos = 0.0;
        for &xj in x {
            let (sj, cj) = xj.sin_cos();
            s_sin += sj;
            s_cos += cj;
        }
        for i in 0..d {
            let (si, ci) = x[i].sin_cos();
            out[i] = omegas[i] + inv_d * (s_sin * ci - s_cos * si);
        }
    })
}

/// The oscillator observable `phi(x) = (1/d) * sum_i sin(x^i)`.
pub fn kuramoto_observable(d: usize) -> Observable {
    let inv_d = 1.0 / d as f64;
    Observable::from_fn("mean-sin", move |x| {
        inv_d * x.iter().map(|xi| xi.sin()).sum::<f64>()
    })
}

/// The Lorenz-63 flow damped to zero near the boundary of the box
/// `[-40, 40)^2 x [0, 80)` so it extends continuously to the 3-torus. The
/// cutoff is a piecewise linear profile in the sup distance from the box
/// center `c_enter`, equal to 1 out to `r_box - r_bezel` and falling
/// linearly to 0 at `r_box`.
#[derive(Debug, Clone)]
pub struct LorenzCutoffSpec {
    r_box: f64,
    r_bezel: f64,
    c_enter: [f64; 3],
    sigma: f64,
}

impl Default for LorenzCutoffSpec {
    fn default() -> Self {
        LorenzCutoffSpec {
            r_box: 40.0,
            r_bezel: 2.0,
            c_enter: [0.0, 0.0, 40.0],
            sigma: 5.0,
        }
    }
}

impl LorenzCutoffSpec {
    pub fn r_box(&self) -> f64 {
        self.r_box
    }

    pub fn r_bezel(&self) -> f64 {
        self.r_bezel
    }

    pub fn c_enter(&self) -> [f64; 3] {
        self.c_enter
    }

    /// Default noise amplitude for this benchmark.
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// The torus `[-40, 40)^2 x [0, 80)`: centered on `c_enter` with
    /// half-width `r_box` in every coordinate.
    pub fn domain(&self) -> TorusDomain {
        TorusDomain::new(self.c_enter.to_vec(), self.r_box).expect("static spec is valid")
    }
}

/// The cutoff profile `b(rho)`: 1 on `[0, r_box - r_bezel]`, linear down to
/// 0 at `r_box`, clamped to 0 beyond.
pub fn cutoff_profile(rho: f64, spec: &LorenzCutoffSpec) -> f64 {
    let knee = spec.r_box - spec.r_bezel;
    if rho <= knee {
        1.0
    } else if rho <= spec.r_box {
        (spec.r_box - rho) / spec.r_bezel
    } else {
        0.0
    }
}

/// The cutoff Lorenz drift `F(x) = b(|x - c_enter|_inf) * F'(x)` with `F'`
/// the classical Lorenz-63 field
/// `(10 (x^2 - x^1), x^1 (28 - x^3) - x^2, x^1 x^2 - 8 x^3 / 3)`.
/// The input is wrapped into the representative box first, so the field is
/// exactly periodic and vanishes on the box boundary, making it continuous
/// across the torus seam.
pub fn lorenz_cutoff_drift(spec: &LorenzCutoffSpec) -> VectorField {
    let spec = spec.clone();
    let domain = spec.domain();
    VectorField::from_fn("lorenz-cutoff", 3, move |x, out| {
        let xw = [
            domain.wrap_coord(0, x[0]),
            domain.wrap_coord(1, x[1]),
            domain.wrap_coord(2, x[2]),
        ];
        let c = spec.c_enter();
        let rho = (xw[0] - c[0])
            .abs()
            .max((xw[1] - c[1]).abs())
            .max((xw[2] - c[2]).abs());
        let b = cutoff_profile(rho, &spec);
        let (x1, x2, x3) = (xw[0], xw[1], xw[2]);
        out[0] = b * (10.0 * (x2 - x1));
        out[1] = b * (x1 * (28.0 - x3) - x2);
        out[2] = b * (x1 * x2 - 8.0 * x3 / 3.0);
    })
}

/// The Lorenz observable `phi(x) = sum_i sin(2 pi x^i / (2 r_box))`, one
/// full period per coordinate across the box.
pub fn lorenz_observable(spec: &LorenzCutoffSpec) -> Observable {
    let k = std::f64::consts::PI / spec.r_box();
    Observable::from_fn("sum-sin-box", move |x| {
        x.iter().map(|xi| (k * xi).sin()).sum::<f64>()
    })
}

/// The reduced perturbation family for the twenty-oscillator run: fields
/// `B_n(x) = [b_n(x^1), b_n(x^1), 0, ..., 0]` that depend only on the first
/// coordinate and push the first two oscillators identically. The inner
/// product is the 1-dimensional weighted `H^p` norm of the scalar generator.
#[derive(Debug, Clone)]
pub struct ReducedSpaceSpec {
    ambient_d: usize,
    p: usize,
}

impl Default for ReducedSpaceSpec {
    fn default() -> Self {
        ReducedSpaceSpec { ambient_d: 20, p: 4 }
    }
}

impl ReducedSpaceSpec {
    pub fn ambient_d(&self) -> usize {
        self.ambient_d
    }

    pub fn p(&self) -> usize {
        self.p
    }
}

/// Builds the reduced space with generator indices `0..n_max`.
pub fn reduced_space_basis(spec: &ReducedSpaceSpec, n_max: usize) -> Result<PerturbationSpace> {
    let domain = TorusDomain::standard(spec.ambient_d())?;
    PerturbationSpace::reduced(domain, spec.p(), n_max)
}

/// String ids under which the benchmark systems are registered for
/// config-driven selection.
pub const REGISTERED_SYSTEM_IDS: &[&str] = &["kuramoto2", "kuramoto20-reduced", "lorenz-cutoff"];

/// A registered benchmark system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SystemId {
    /// Two coupled oscillators, frequencies (1, 3), full product basis.
    Kuramoto2,
    /// Twenty coupled oscillators with the reduced perturbation family.
    Kuramoto20Reduced,
    /// Cutoff Lorenz-63 on the 3-torus, full product basis.
    LorenzCutoff,
}

impl SystemId {
    pub fn as_str(&self) -> &'static str {
        match self {
            SystemId::Kuramoto2 => "kuramoto2",
            SystemId::Kuramoto20Reduced => "kuramoto20-reduced",
            SystemId::LorenzCutoff => "lorenz-cutoff",
        }
    }
}

impl fmt::Display for SystemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SystemId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kuramoto2" => Ok(SystemId::Kuramoto2),
            "kuramoto20-reduced" => Ok(SystemId::Kuramoto20Reduced),
            "lorenz-cutoff" => Ok(SystemId::LorenzCutoff),
            other => Err(Error::invalid(format!(
                "unknown system id {other:?}; registered ids: {}",
                REGISTERED_SYSTEM_IDS.join(", ")
            ))),
        }
    }
}
