//! Monte Carlo estimation of the linear response by ergodic kernel
//! differentiation.
//!
//! For the Euler chain `X_{n+1} = wrap(X_n + dt F(X_n) + sigma sqrt(dt) xi_n)`
//! the one-step transition density is Gaussian in the increment, so the
//! derivative of its logarithm with respect to the amplitude of a drift
//! perturbation `eta` at amplitude zero is the likelihood-ratio score
//!
//! ```text
//!     s_n = eta(X_n) . xi_n * sqrt(dt) / sigma.
//! ```
//!
//! The response of the stationary average of `phi` is then estimated from a
//! single long orbit (split across independent chains) as
//!
//! ```text
//!     R(eta) ~= sum_{w=1}^{W} mean_n [ (phi(X_{n+w}) - phi_bar) * s_n ],
//! ```
//!
//! truncated at the decorrelation horizon `W` beyond which correlations are
//! negligible. The whole sum over `w` collapses into a rolling window sum of
//! `phi` values, so a full basis of perturbation fields is estimated from
//! one shared trajectory in a single pass, one score ring buffer per field.
//! Error bars come from batch means over at least 20 batches.

use rayon::prelude::*;

use crate::basis::{BasisField, BasisTables};
use crate::error::{Error, Result};
use crate::torus::{em_step_in_place, FieldRepr, GaussianSource, Observable, SdeSystem, VectorField};

/// Configuration of a kernel-differentiation run. Times are physical; step
/// counts are derived by rounding.
#[derive(Debug, Clone)]
pub struct KdConfig {
    /// Total physical orbit time, split evenly across chains.
    pub total_time: f64,
    /// Horizon `W` of the response sum, in physical time.
    pub decorrelation_time: f64,
    /// Integrator step.
    pub dt: f64,
    /// Physical time discarded at the start of every chain.
    pub burn_in_time: f64,
    /// Master seed; chain `c` draws from the stream `(seed, c)`.
    pub seed: u64,
    /// Number of independent chains.
    pub n_chains: usize,
}

impl KdConfig {
    /// A config with the library defaults for burn-in (100 time units) and
    /// chain count (8).
    pub fn new(total_time: f64, decorrelation_time: f64, dt: f64, seed: u64) -> Self {
        KdConfig {
            total_time,
            decorrelation_time,
            dt,
            burn_in_time: 100.0,
            seed,
            n_chains: 8,
        }
    }

    /// Horizon in steps, `round(W / dt)`.
    pub fn w_steps(&self) -> usize {
        (self.decorrelation_time / self.dt).round() as usize
    }

    /// Burn-in steps per chain, `round(burn_in_time / dt)`.
    pub fn burn_steps(&self) -> usize {
        (self.burn_in_time / self.dt).round() as usize
    }

    /// Measurement steps per chain, `round(total_time / (n_chains * dt))`.
    pub fn steps_per_chain(&self) -> usize {
        (self.total_time / self.n_chains as f64 / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_time <= 0.0 || !self.total_time.is_finite() {
            return Err(Error::invalid("total_time must be positive"));
        }
        if self.decorrelation_time <= 0.0 || !self.decorrelation_time.is_finite() {
            return Err(Error::invalid("decorrelation_time must be positive"));
        }
        if self.decorrelation_time >= self.total_time {
            return Err(Error::invalid(format!(
                "decorrelation_time {} must be below total_time {}",
                self.decorrelation_time, self.total_time
            )));
        }
        if self.dt <= 0.0 || !self.dt.is_finite() {
            return Err(Error::invalid("dt must be positive"));
        }
        if self.burn_in_time < 0.0 || !self.burn_in_time.is_finite() {
            return Err(Error::invalid("burn_in_time must be non-negative"));
        }
        if self.n_chains == 0 {
            return Err(Error::invalid("n_chains must be at least 1"));
        }
        if self.w_steps() == 0 {
            return Err(Error::invalid(
                "decorrelation_time rounds to zero steps at this dt",
            ));
        }
        if self.steps_per_chain() == 0 {
            return Err(Error::invalid(
                "total_time rounds to zero steps per chain at this dt",
            ));
        }
        Ok(())
    }

    /// Number of batch-mean segments per chain: enough that all chains
    /// together give at least 20 batches.
    fn segments_per_chain(&self) -> usize {
        20usize.div_ceil(self.n_chains)
    }
}

/// One response estimate with its batch-means standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResponseEstimate {
    /// Estimated response `R(phi, eta)`.
    pub value: f64,
    /// Standard error from batch means over at least 20 batches.
    pub std_error: f64,
    /// Number of score samples entering the mean (across all chains).
    pub n_samples: u64,
}

/// One point of a perturbation-amplitude sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub gamma: f64,
    /// Ergodic average of the observable under drift `F + gamma * eta`.
    pub mean: f64,
    /// Batch-means standard error of the average.
    pub std_error: f64,
}

/// Result of comparing a sweep slope against a direct response estimate.
#[derive(Debug, Clone, Copy)]
pub struct SlopeCheck {
    /// Least-squares slope of the sweep means against gamma.
    pub slope: f64,
    /// Standard error of the slope propagated from the sweep error bars.
    pub slope_std_error: f64,
    /// `3 * (combined std error) - |slope - estimate|`; non-negative means
    /// the two response measurements agree.
    pub margin: f64,
    pub pass: bool,
}

/// The per-step likelihood-ratio weight `eta(X_n) . xi_n * sqrt(dt) / sigma`:
/// the derivative of the log one-step transition density with respect to the
/// perturbation amplitude at amplitude zero. The dot product runs over
/// coordinates in order; the scalar factor is applied once at the end.
#[inline]
pub fn score_weight(eta_at_x: &[f64], xi: &[f64], dt: f64, sigma: f64) -> f64 {
    debug_assert_eq!(eta_at_x.len(), xi.len());
    let mut dot = 0.0;
    for (e, z) in eta_at_x.iter().zip(xi) {
        dot += e * z;
    }
    dot * (dt.sqrt() / sigma)
}

/// How a field is evaluated inside the hot loop: basis-backed fields on the
/// system's own domain share per-point scalar tables; everything else calls
/// the field directly. Both paths produce bit-identical values for the same
/// field.
enum FieldEval<'a> {
    Tabulated(&'a BasisField),
    Direct(&'a VectorField),
}

fn classify_fields<'a>(
    system: &SdeSystem,
    fields: &'a [VectorField],
) -> (Vec<FieldEval<'a>>, Option<usize>) {
    let mut max_m: Option<usize> = None;
    let evals = fields
        .iter()
        .map(|f| match &f.repr {
            FieldRepr::Basis(b) if b.domain() == system.domain() => {
                max_m = Some(max_m.unwrap_or(0).max(b.max_m()));
                FieldEval::Tabulated(b)
            }
            _ => FieldEval::Direct(f),
        })
        .collect();
    (evals, max_m)
}

impl FieldEval<'_> {
    #[inline]
    fn eval(&self, x: &[f64], tables: Option<&BasisTables>, out: &mut [f64]) {
        match self {
            FieldEval::Tabulated(b) => {
                b.eval_tabulated(tables.expect("tables exist when any field is tabulated"), out)
            }
            FieldEval::Direct(f) => f.eval(x, out),
        }
    }
}

/// Running sums of one batch segment for one field.
#[derive(Debug, Clone, Copy, Default)]
struct SegAccum {
    /// Sum over scores of `s_n * (rolling window sum of phi)`.
    psi: f64,
    /// Sum of the scores themselves (for the global centering correction).
    s: f64,
    count: u64,
}

struct ChainOut {
    phi_sum: f64,
    phi_count: u64,
    /// `segs[field][segment]` in fixed order.
    segs: Vec<Vec<SegAccum>>,
}

/// Estimates the response of `phi` to every perturbation field in `fields`,
/// all from the same trajectories (common random numbers). Estimates come
/// back in field order. The run is deterministic given the config: chains
/// use the streams `(seed, chain)`, start at the domain center, and are
/// reduced in fixed chain order.
pub fn estimate_responses(
    system: &SdeSystem,
    phi: &Observable,
    fields: &[VectorField],
    config: &KdConfig,
) -> Result<Vec<ResponseEstimate>> {
    config.validate()?;
    if fields.is_empty() {
        return Err(Error::invalid("at least one perturbation field is required"));
    }
    let d = system.domain().dim();
    for f in fields {
        if f.dim() != d {
            return Err(Error::invalid(format!(
                "field {:?} has dimension {}, system has {d}",
                f.label(),
                f.dim()
            )));
        }
    }
    let steps = config.steps_per_chain();
    let w_steps = config.w_steps();
    if w_steps >= steps {
        return Err(Error::HorizonTooLong {
            w_steps,
            available: steps,
        });
    }

    let (evals, tab_max_m) = classify_fields(system, fields);
    let n_segments = config.segments_per_chain();
    let n_scores = steps - w_steps + 1;

    let chains: Vec<ChainOut> = (0..config.n_chains)
        .into_par_iter()
        .map(|chain| {
            run_response_chain(
                system, phi, &evals, tab_max_m, config, chain as u64, steps, w_steps, n_segments,
                n_scores,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    // Global centering mean over every measured state of every chain.
    let phi_total: f64 = chains.iter().map(|c| c.phi_sum).sum();
    let phi_count: u64 = chains.iter().map(|c| c.phi_count).sum();
    let phi_bar = phi_total / phi_count as f64;
    if !phi_bar.is_finite() {
        return Err(Error::NonFiniteSum {
            context: "ergodic mean of the observable".into(),
        });
    }

    let w = w_steps as f64;
    let n_batches = config.n_chains * n_segments;
    let mut out = Vec::with_capacity(fields.len());
    for (e, field) in fields.iter().enumerate() {
        let mut psi_tot = 0.0;
        let mut s_tot = 0.0;
        let mut count_tot = 0u64;
        let mut batch_means = Vec::with_capacity(n_batches);
        for chain in &chains {
            for seg in &chain.segs[e] {
                psi_tot += seg.psi;
                s_tot += seg.s;
                count_tot += seg.count;
                batch_means.push((seg.psi - phi_bar * w * seg.s) / seg.count as f64);
            }
        }
        let value = (psi_tot - phi_bar * w * s_tot) / count_tot as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteSum {
                context: format!("response accumulator for field {:?}", field.label()),
            });
        }
        out.push(ResponseEstimate {
            value,
            std_error: std_error_of_means(&batch_means),
            n_samples: count_tot,
        });
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn run_response_chain(
    system: &SdeSystem,
    phi: &Observable,
    evals: &[FieldEval<'_>],
    tab_max_m: Option<usize>,
    config: &KdConfig,
    chain: u64,
    steps: usize,
    w_steps: usize,
    n_segments: usize,
    n_scores: usize,
) -> Result<ChainOut> {
    let domain = system.domain();
    let d = domain.dim();
    let dt = config.dt;
    let sigma = system.sigma();
    let sigma_sqrt_dt = sigma * dt.sqrt();
    let k = evals.len();

    let mut noise = GaussianSource::new(config.seed, chain);
    let mut x = domain.centers().to_vec();
    let mut xi = vec![0.0; d];
    let mut drift_buf = vec![0.0; d];
    let mut field_buf = vec![0.0; d];
    let mut tables = tab_max_m.map(|m| BasisTables::new(d, m));

    for _ in 0..config.burn_steps() {
        noise.fill_standard_normal(&mut xi);
        em_step_in_place(domain, system.drift(), dt, sigma_sqrt_dt, &mut x, &mut drift_buf, &xi)?;
    }

    // Rolling window of the last w_steps observable values and its sum.
    let mut phi_ring = vec![0.0; w_steps];
    let mut phi_roll = 0.0;
    // Per-field ring of pending scores, indexed by score index mod w_steps.
    let mut score_rings = vec![vec![0.0; w_steps]; k];
    let mut segs = vec![vec![SegAccum::default(); n_segments]; k];
    let mut phi_sum = 0.0;

    for i in 0..steps {
        noise.fill_standard_normal(&mut xi);
        // Score of step i, taken at the pre-step state; only recorded while
        // its observable window x_{i+1}..x_{i+w} still fits the chain.
        if i + w_steps <= steps {
            if let Some(t) = tables.as_mut() {
                t.fill(domain, &x);
            }
            let slot = i % w_steps;
            for (e, eval) in evals.iter().enumerate() {
                eval.eval(&x, tables.as_ref(), &mut field_buf);
                score_rings[e][slot] = score_weight(&field_buf, &xi, dt, sigma);
            }
        }
        em_step_in_place(domain, system.drift(), dt, sigma_sqrt_dt, &mut x, &mut drift_buf, &xi)?;

        let m = i + 1; // index of the state just produced
        let phi_m = phi.eval(&x);
        phi_sum += phi_m;
        let pos = (m - 1) % w_steps;
        if m <= w_steps {
            phi_roll += phi_m;
            phi_ring[pos] = phi_m;
        } else {
            phi_roll += phi_m - phi_ring[pos];
            phi_ring[pos] = phi_m;
        }

        // The window of score n = m - w_steps is now complete.
        if m >= w_steps {
            let n = m - w_steps;
            let seg = n * n_segments / n_scores;
            let slot = n % w_steps;
            for e in 0..k {
                let s = score_rings[e][slot];
                let acc = &mut segs[e][seg];
                acc.psi += s * phi_roll;
                acc.s += s;
                acc.count += 1;
            }
        }
    }

    Ok(ChainOut {
        phi_sum,
        phi_count: steps as u64,
        segs,
    })
}

/// Sample standard error of a set of batch means.
fn std_error_of_means(means: &[f64]) -> f64 {
    let b = means.len() as f64;
    let mean = means.iter().sum::<f64>() / b;
    let var = means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / (b - 1.0);
    (var / b).sqrt()
}

/// Ergodic averages of `phi` under the perturbed drift `F + gamma * eta`,
/// one sweep point per requested amplitude. All amplitudes reuse the same
/// noise streams (common random numbers), which makes finite differences of
/// neighbouring points far less noisy than their individual error bars.
pub fn sweep_observable(
    system: &SdeSystem,
    eta: &VectorField,
    gammas: &[f64],
    phi: &Observable,
    config: &KdConfig,
) -> Result<Vec<SweepPoint>> {
    config.validate()?;
    if gammas.is_empty() {
        return Err(Error::invalid("at least one gamma value is required"));
    }
    if eta.dim() != system.domain().dim() {
        return Err(Error::invalid(format!(
            "perturbation has dimension {}, system has {}",
            eta.dim(),
            system.domain().dim()
        )));
    }
    let mut out = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        if !gamma.is_finite() {
            return Err(Error::invalid(format!("gamma must be finite, got {gamma}")));
        }
        let (mean, std_error) = perturbed_ergodic_mean(system, eta, gamma, phi, config)?;
        out.push(SweepPoint {
            gamma,
            mean,
            std_error,
        });
    }
    Ok(out)
}

/// Ergodic mean of `phi` under `F + gamma * eta` with batch-means error,
/// using the same chain layout and seeds as the response estimator.
fn perturbed_ergodic_mean(
    system: &SdeSystem,
    eta: &VectorField,
    gamma: f64,
    phi: &Observable,
    config: &KdConfig,
) -> Result<(f64, f64)> {
    let steps = config.steps_per_chain();
    let n_segments = config.segments_per_chain();
    let (eta_evals, tab_max_m) = classify_fields(system, std::slice::from_ref(eta));

    let chains: Vec<(f64, Vec<(f64, u64)>)> = (0..config.n_chains)
        .into_par_iter()
        .map(|chain| -> Result<(f64, Vec<(f64, u64)>)> {
            let domain = system.domain();
            let d = domain.dim();
            let dt = config.dt;
            let sigma_sqrt_dt = system.sigma() * dt.sqrt();
            let mut noise = GaussianSource::new(config.seed, chain as u64);
            let mut x = domain.centers().to_vec();
            let mut xi = vec![0.0; d];
            let mut drift_buf = vec![0.0; d];
            let mut eta_buf = vec![0.0; d];
            let mut tables = tab_max_m.map(|m| BasisTables::new(d, m));
            let mut segs = vec![(0.0f64, 0u64); n_segments];

            let step = |x: &mut Vec<f64>,
                            xi: &mut Vec<f64>,
                            noise: &mut GaussianSource,
                            drift_buf: &mut Vec<f64>,
                            eta_buf: &mut Vec<f64>,
                            tables: &mut Option<BasisTables>|
             -> Result<()> {
                noise.fill_standard_normal(xi);
                system.drift().eval(x, drift_buf);
                if let Some(t) = tables.as_mut() {
                    t.fill(domain, x);
                }
                eta_evals[0].eval(x, tables.as_ref(), eta_buf);
                for i in 0..d {
                    let f = drift_buf[i] + gamma * eta_buf[i];
                    if !f.is_finite() {
                        return Err(Error::NonFiniteDrift { state: x.clone() });
                    }
                    x[i] = domain.wrap_coord(i, x[i] + dt * f + sigma_sqrt_dt * xi[i]);
                }
                Ok(())
            };

            for _ in 0..config.burn_steps() {
                step(&mut x, &mut xi, &mut noise, &mut drift_buf, &mut eta_buf, &mut tables)?;
            }
            for m in 0..steps {
                step(&mut x, &mut xi, &mut noise, &mut drift_buf, &mut eta_buf, &mut tables)?;
                let seg = &mut segs[m * n_segments / steps];
                seg.0 += phi.eval(&x);
                seg.1 += 1;
            }
            Ok((segs.iter().map(|s| s.0).sum(), segs))
        })
        .collect::<Result<Vec<_>>>()?;

    let total: f64 = chains.iter().map(|c| c.0).sum();
    let count: u64 = chains.iter().flat_map(|c| c.1.iter().map(|s| s.1)).sum();
    let mean = total / count as f64;
    if !mean.is_finite() {
        return Err(Error::NonFiniteSum {
            context: format!("ergodic mean at gamma = {gamma}"),
        });
    }
    let batch_means: Vec<f64> = chains
        .iter()
        .flat_map(|c| c.1.iter().map(|s| s.0 / s.1 as f64))
        .collect();
    Ok((mean, std_error_of_means(&batch_means)))
}

/// Fits a least-squares line through the sweep points and compares its slope
/// at the origin with a direct response estimate. Passes when the two agree
/// within three combined standard errors.
pub fn slope_match_check(sweep: &[SweepPoint], estimate: &ResponseEstimate) -> Result<SlopeCheck> {
    if sweep.len() < 3 {
        return Err(Error::invalid("slope check needs at least 3 sweep points"));
    }
    let g_min = sweep.iter().map(|p| p.gamma).fold(f64::INFINITY, f64::min);
    let g_max = sweep.iter().map(|p| p.gamma).fold(f64::NEG_INFINITY, f64::max);
    if g_min > 0.0 || g_max < 0.0 {
        return Err(Error::invalid("sweep gammas must span 0"));
    }
    let n = sweep.len() as f64;
    let g_bar = sweep.iter().map(|p| p.gamma).sum::<f64>() / n;
    let sxx: f64 = sweep.iter().map(|p| (p.gamma - g_bar).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateFit(
            "all sweep gammas are equal; slope is undefined".into(),
        ));
    }
    let y_bar = sweep.iter().map(|p| p.mean).sum::<f64>() / n;
    let sxy: f64 = sweep
        .iter()
        .map(|p| (p.gamma - g_bar) * (p.mean - y_bar))
        .sum();
    let slope = sxy / sxx;
    // Propagate the per-point error bars through the linear fit. Common
    // random numbers correlate the points positively, which only shrinks the
    // true slope error, so this bound is conservative.
    let slope_var: f64 = sweep
        .iter()
        .map(|p| ((p.gamma - g_bar) / sxx * p.std_error).powi(2))
        .sum();
    let slope_std_error = slope_var.sqrt();
    let combined = slope_std_error + estimate.std_error;
    let margin = 3.0 * combined - (slope - estimate.value).abs();
    Ok(SlopeCheck {
        slope,
        slope_std_error,
        margin,
        pass: margin >= 0.0,
    })
}
