//! Linear response of additive-noise SDEs on flat tori, and the search for
//! the unit-norm drift perturbation that maximizes it.
//!
//! The crate studies systems of the form
//!
//! ```text
//!     dX_t = F(X_t) dt + sigma dW_t        on T^d,
//! ```
//!
//! where `T^d` is a box with opposite faces identified. For a fixed scalar
//! observable `phi`, perturbing the drift to `F + gamma * eta` moves the
//! stationary expectation `mu_gamma(phi)`; the linear response
//! `R(eta) = d/dgamma mu_gamma(phi) |_{gamma=0}` is a bounded linear
//! functional of the perturbation field `eta`. Over the unit ball of a
//! weighted `H^p` space of vector fields spanned by a trigonometric product
//! basis, the maximizer is the normalized Riesz representative of `R`, whose
//! coordinates are just the responses of the orthonormal basis elements.
//!
//! Functionality is split into five modules:
//!
//! - [`torus`] — torus geometry, vector fields, and the Euler–Maruyama
//!   integrator with reproducible, counter-based randomness;
//! - [`basis`] — the trigonometric product basis, the weighted `H^p` norm,
//!   multi-index enumeration, and Riesz-vector assembly/normalization;
//! - [`response`] — ergodic kernel-differentiation (likelihood-ratio)
//!   Monte Carlo estimation of `R(eta)`, batched over whole bases from
//!   shared trajectories, plus parameter sweeps and slope validation;
//! - [`oracle`] — a dense grid discretization of the one-step transition
//!   kernel (d <= 2) serving as an independent check: invariant densities,
//!   spectral gap, resolvent-formula responses, and kernel rate estimates;
//! - [`systems`] — the benchmark systems (coupled-oscillator networks, a
//!   cutoff Lorenz-63 field) and a reduced perturbation space for high
//!   ambient dimension.
//!
//! CSV serialization for the coefficient tables lives in [`io`].

pub mod basis;
pub mod error;
pub mod io;
pub mod oracle;
pub mod response;
pub mod systems;
pub mod torus;

pub use error::{Error, Result};
