//! The five experiment stages behind the subcommands. Each stage builds the
//! registered system, runs its pipeline, writes CSV artifacts into the output
//! directory, and finishes with a `metadata.toml` that reproduces the run.

use std::fs;
use std::path::{Path, PathBuf};

use toml::Value;

use torus_response::basis::{assemble_optimal_perturbation, PerturbationSpace, RieszVector};
use torus_response::io::{self, format_float};
use torus_response::oracle::{
    build_kernel_matrix, first_order_expansion_check, invariant_density, l2_smoothing_check,
    response_resolvent, spectral_diagnostics, ExpansionCheck, Grid,
};
use torus_response::response::{estimate_responses, sweep_observable, ResponseEstimate};
use torus_response::systems::{
    kuramoto_drift, kuramoto_observable, lorenz_cutoff_drift, lorenz_observable, KuramotoSpec,
    LorenzCutoffSpec, SystemId,
};
use torus_response::torus::{simulate_em, Observable, SdeSystem, VectorField};
use torus_response::{Error, Result};

use crate::config::{self, find_element, Resolved, SweepTarget};

/// Which stage to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Respond,
    Optimize,
    Sweep,
    Oracle,
    Simulate,
}

impl CommandKind {
    fn name(self) -> &'static str {
        match self {
            CommandKind::Respond => "respond",
            CommandKind::Optimize => "optimize",
            CommandKind::Sweep => "sweep",
            CommandKind::Oracle => "oracle",
            CommandKind::Simulate => "simulate",
        }
    }
}

/// A registered system wired to its observable and perturbation space.
pub struct Experiment {
    pub system: SdeSystem,
    pub phi: Observable,
    pub space: PerturbationSpace,
}

pub fn build_experiment(r: &Resolved) -> Result<Experiment> {
    let (system, phi) = match r.system {
        SystemId::Kuramoto2 => {
            let spec = KuramotoSpec::two_dim();
            let phi = kuramoto_observable(spec.d());
            let system = SdeSystem::new(spec.domain(), kuramoto_drift(&spec), 1.0)?;
            (system, phi)
        }
        SystemId::Kuramoto20Reduced => {
            let spec = KuramotoSpec::twenty_dim();
            let phi = kuramoto_observable(spec.d());
            let system = SdeSystem::new(spec.domain(), kuramoto_drift(&spec), 1.0)?;
            (system, phi)
        }
        SystemId::LorenzCutoff => {
            let spec = LorenzCutoffSpec::default();
            let phi = lorenz_observable(&spec);
            let system =
                SdeSystem::new(spec.domain(), lorenz_cutoff_drift(&spec), spec.sigma())?;
            (system, phi)
        }
    };
    let domain = system.domain().clone();
    let d = domain.dim();
    let space = if r.space.reduced {
        PerturbationSpace::reduced(domain, r.space.p, r.space.n_max)?
    } else {
        if d > 3 {
            return Err(Error::invalid(format!(
                "a full product basis over {d} dimensions has {d} * {}^{d} elements; \
                 set space.reduced = true for high-dimensional systems",
                r.space.n_max
            )));
        }
        PerturbationSpace::full_product(domain, r.space.p, r.space.n_max)?
    };
    Ok(Experiment { system, phi, space })
}

/// Runs one stage and writes its artifacts plus `metadata.toml`.
pub fn run(command: CommandKind, resolved: &Resolved, out_dir: &Path, scale: &str) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let ex = build_experiment(resolved)?;

    let mut results = toml::Table::new();
    results.insert("command".into(), Value::String(command.name().into()));
    results.insert("scale".into(), Value::String(scale.into()));

    match command {
        CommandKind::Respond => cmd_respond(resolved, &ex, out_dir, &mut results)?,
        CommandKind::Optimize => cmd_optimize(resolved, &ex, out_dir, &mut results)?,
        CommandKind::Sweep => cmd_sweep(resolved, &ex, out_dir, &mut results)?,
        CommandKind::Oracle => cmd_oracle(resolved, &ex, out_dir, &mut results)?,
        CommandKind::Simulate => cmd_simulate(resolved, &ex, out_dir, &mut results)?,
    }

    let meta = out_dir.join("metadata.toml");
    config::write_metadata(&meta, resolved, results)?;
    println!("wrote {}", meta.display());
    Ok(())
}

fn coefficient_norm(estimates: &[ResponseEstimate]) -> f64 {
    estimates
        .iter()
        .map(|e| e.value * e.value)
        .sum::<f64>()
        .sqrt()
}

fn estimate_basis(r: &Resolved, ex: &Experiment) -> Result<Vec<ResponseEstimate>> {
    estimate_responses(&ex.system, &ex.phi, &ex.space.element_fields(), &r.kd_config())
}

fn write_coefficients(ex: &Experiment, estimates: &[ResponseEstimate], out: &Path) -> Result<PathBuf> {
    let path = out.join("coefficients.csv");
    io::write_response_csv(&path, &ex.space, estimates)?;
    Ok(path)
}

fn cmd_respond(
    r: &Resolved,
    ex: &Experiment,
    out: &Path,
    results: &mut toml::Table,
) -> Result<()> {
    let estimates = estimate_basis(r, ex)?;
    let path = write_coefficients(ex, &estimates, out)?;
    results.insert(
        "coefficient_norm".into(),
        Value::Float(coefficient_norm(&estimates)),
    );
    println!(
        "wrote {} coefficient estimates to {}",
        estimates.len(),
        path.display()
    );
    Ok(())
}

fn cmd_optimize(
    r: &Resolved,
    ex: &Experiment,
    out: &Path,
    results: &mut toml::Table,
) -> Result<()> {
    let estimates = estimate_basis(r, ex)?;
    let path = write_coefficients(ex, &estimates, out)?;
    println!(
        "wrote {} coefficient estimates to {}",
        estimates.len(),
        path.display()
    );

    let riesz = RieszVector::new(
        ex.space.clone(),
        estimates.iter().map(|e| e.value).collect(),
    )?;
    let norm = riesz.norm();
    let unit: Vec<f64> = riesz.coefficients().iter().map(|c| c / norm).collect();
    let unit_riesz = RieszVector::new(ex.space.clone(), unit)?;
    let sq = ex
        .space
        .inner_product(unit_riesz.coefficients(), unit_riesz.coefficients());
    if (sq - 1.0).abs() > 1.0e-12 {
        return Err(Error::invalid(format!(
            "normalized perturbation has squared norm {sq:.17}, expected 1"
        )));
    }
    let path = out.join("eta_opt.csv");
    io::write_riesz_csv(&path, &unit_riesz)?;
    results.insert("riesz_norm".into(), Value::Float(norm));
    println!(
        "wrote the optimal direction to {} (response coefficient norm {norm:.6e})",
        path.display()
    );
    Ok(())
}

fn cmd_sweep(r: &Resolved, ex: &Experiment, out: &Path, results: &mut toml::Table) -> Result<()> {
    let cfg = r.kd_config();
    let (label, field): (String, VectorField) = match &r.sweep.target {
        SweepTarget::EtaOpt => {
            let estimates = estimate_basis(r, ex)?;
            let riesz = RieszVector::new(
                ex.space.clone(),
                estimates.iter().map(|e| e.value).collect(),
            )?;
            let (eta_opt, _norm) = assemble_optimal_perturbation(&riesz)?;
            ("eta-opt".to_string(), eta_opt)
        }
        SweepTarget::Element(sel) => {
            let idx = find_element(&ex.space, sel)?;
            let element = &ex.space.elements()[idx];
            (element.label(), element.to_field())
        }
    };
    let points = sweep_observable(&ex.system, &field, &r.sweep.gammas, &ex.phi, &cfg)?;
    let path = out.join("sweep.csv");
    io::write_sweep_csv(&path, &points)?;
    results.insert("target".into(), Value::String(r.sweep.target.to_string()));
    results.insert("target_label".into(), Value::String(label.clone()));
    println!(
        "wrote a {}-point sweep of {label} to {}",
        points.len(),
        path.display()
    );
    Ok(())
}

/// Remainder ladder used by the oracle's first-order-expansion row.
const EXPANSION_DELTAS: [f64; 6] = [1.0e-1, 3.0e-2, 1.0e-2, 3.0e-3, 1.0e-3, 3.0e-4];

fn cmd_oracle(r: &Resolved, ex: &Experiment, out: &Path, results: &mut toml::Table) -> Result<()> {
    let grid = Grid::new(ex.system.domain().clone(), r.oracle.m_per_dim)?;
    let kernel = build_kernel_matrix(&ex.system, &grid, r.oracle.dt)?;
    let f0 = invariant_density(&kernel, 1.0e-12)?;
    let diag = spectral_diagnostics(&kernel);

    let idx = find_element(&ex.space, &r.oracle.element)?;
    let element = &ex.space.elements()[idx];
    let eta = element.to_field();
    let resolvent = response_resolvent(
        &ex.system,
        &eta,
        &ex.phi,
        &grid,
        r.oracle.dt,
        r.oracle.fd_delta,
    )?;
    let expansion = match first_order_expansion_check(
        &ex.system,
        &eta,
        &f0,
        &grid,
        r.oracle.dt,
        &EXPANSION_DELTAS,
    )? {
        ExpansionCheck::Slope(s) => s,
        ExpansionCheck::ExactZero => 0.0,
    };
    let times: Vec<f64> = (0..4).map(|k| r.oracle.dt * (1u32 << k) as f64).collect();
    let smoothing = l2_smoothing_check(&ex.system, &grid, &times)?;

    let rows = vec![
        ("invariant_density_mass".to_string(), f0.mass()),
        ("lambda2_modulus".to_string(), diag.lambda2_modulus),
        ("spectral_gap".to_string(), 1.0 - diag.lambda2_modulus),
        ("min_kernel_density".to_string(), diag.min_entry),
        ("contraction_rho".to_string(), diag.contraction_rho),
        ("resolvent_response".to_string(), resolvent),
        ("expansion_slope".to_string(), expansion),
        ("l2_smoothing_exponent".to_string(), smoothing),
    ];
    let path = out.join("oracle_report.csv");
    io::write_report_csv(&path, &rows)?;
    results.insert("element".into(), Value::String(r.oracle.element.to_string()));
    results.insert("element_label".into(), Value::String(element.label()));
    println!(
        "wrote {} oracle metrics for {} to {}",
        rows.len(),
        element.label(),
        path.display()
    );
    Ok(())
}

fn cmd_simulate(
    r: &Resolved,
    ex: &Experiment,
    out: &Path,
    results: &mut toml::Table,
) -> Result<()> {
    let dt = r.estimator.dt;
    let steps = (r.simulate.time / dt).round().max(1.0) as usize;
    let x0 = ex.system.domain().centers().to_vec();
    let traj = simulate_em(&ex.system, &x0, dt, steps, r.estimator.seed)?;

    let d = ex.system.domain().dim();
    let mut text = String::from("t");
    for i in 1..=d {
        text.push_str(&format!(",x_{i}"));
    }
    text.push('\n');
    let mut rows = 0u64;
    for (n, state) in traj.states().enumerate() {
        if n % r.simulate.stride != 0 {
            continue;
        }
        text.push_str(&format_float(n as f64 * dt));
        for v in state {
            text.push(',');
            text.push_str(&format_float(*v));
        }
        text.push('\n');
        rows += 1;
    }
    let path = out.join("orbit.csv");
    fs::write(&path, text).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    results.insert("orbit_rows".into(), Value::Integer(rows as i64));
    println!("wrote {rows} orbit samples to {}", path.display());
    Ok(())
}
