//! Experiment configuration: one TOML file, one table per concern.
//!
//! Every field except the system id has a per-system default, and unknown
//! keys are rejected so a typo cannot silently fall back to a default. A
//! metadata file written by a run is itself a valid configuration (its
//! `[results]` table is accepted and ignored), so re-running from metadata
//! reproduces the artifacts bit-exactly.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use torus_response::basis::{PerturbationSpace, SpaceElement};
use torus_response::response::KdConfig;
use torus_response::systems::{SystemId, REGISTERED_SYSTEM_IDS};
use torus_response::{Error, Result};

/// On-disk configuration. All fields are optional; [`resolve`] fills in the
/// per-system defaults and applies flag overrides.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Registered system id; the one key without a default.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    #[serde(default)]
    pub space: SpaceSection,
    #[serde(default)]
    pub estimator: EstimatorSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    /// Informational table written by runs into their metadata file;
    /// accepted and ignored on input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub results: Option<toml::Table>,
}

/// Perturbation-space parameters.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSection {
    /// Sobolev regularity of the norm constraint.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<usize>,
    /// Scalar indices per dimension run over `0..n_max`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_max: Option<usize>,
    /// Use the reduced family (fields of the first coordinate acting on the
    /// first two components) instead of the full product basis.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reduced: Option<bool>,
}

/// Kernel-differentiation estimator parameters.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSection {
    /// Total measured orbit time, split evenly across chains.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_time: Option<f64>,
    /// Response-sum horizon in physical time.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decorrelation_time: Option<f64>,
    /// Integrator step.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    /// Physical time discarded at the start of every chain.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub burn_in_time: Option<f64>,
    /// Independent chains (each on its own noise stream).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_chains: Option<usize>,
    /// Master seed; the `--seed` flag overrides this.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Amplitude-sweep parameters.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Perturbation amplitudes; one ergodic average per entry.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gammas: Option<Vec<f64>>,
    /// Swept field: `eta-opt`, `j:n1,..,nd` (product basis element), or a
    /// bare `n` (reduced basis element).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
}

/// Grid-oracle parameters.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    /// Grid cells per dimension.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m_per_dim: Option<usize>,
    /// Kernel time step (independent of the estimator's dt).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    /// Central-difference amplitude for the response direction.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fd_delta: Option<f64>,
    /// Basis element whose resolvent response is reported; same grammar as
    /// the sweep target, minus "eta-opt".
    #[serde(skip_serializing_if = "Option::is_none")]
    pub element: Option<String>,
}

/// Orbit-sampling parameters.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    /// Physical orbit length (uses the estimator's dt and seed).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time: Option<f64>,
    /// Record every `stride`-th state.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
}

/// A basis element named on the command line or in a config file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ElementSel {
    /// Product element: component `j` (1-based), scalar index per dimension.
    Product { j: usize, index: Vec<usize> },
    /// Reduced element: scalar generator index.
    Reduced { n: usize },
}

impl fmt::Display for ElementSel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ElementSel::Product { j, index } => {
                let list: Vec<String> = index.iter().map(|n| n.to_string()).collect();
                write!(f, "{j}:{}", list.join(","))
            }
            ElementSel::Reduced { n } => write!(f, "{n}"),
        }
    }
}

impl FromStr for ElementSel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some((j, list)) = s.split_once(':') {
            let j: usize = j
                .trim()
                .parse()
                .map_err(|_| bad_element(s, "component before ':' is not an integer"))?;
            let index = list
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<usize>()
                        .map_err(|_| bad_element(s, "indices after ':' must be integers"))
                })
                .collect::<Result<Vec<usize>>>()?;
            if index.is_empty() {
                return Err(bad_element(s, "no indices after ':'"));
            }
            Ok(ElementSel::Product { j, index })
        } else {
            let n: usize = s
                .parse()
                .map_err(|_| bad_element(s, "expected '<j>:<n1>,..,<nd>' or a bare index"))?;
            Ok(ElementSel::Reduced { n })
        }
    }
}

fn bad_element(s: &str, why: &str) -> Error {
    Error::invalid(format!("cannot parse basis element {s:?}: {why}"))
}

/// What a sweep perturbs: the assembled optimal direction or one element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SweepTarget {
    EtaOpt,
    Element(ElementSel),
}

impl fmt::Display for SweepTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepTarget::EtaOpt => f.write_str("eta-opt"),
            SweepTarget::Element(sel) => sel.fmt(f),
        }
    }
}

impl FromStr for SweepTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "eta-opt" {
            Ok(SweepTarget::EtaOpt)
        } else {
            Ok(SweepTarget::Element(s.parse()?))
        }
    }
}

/// Finds a named element in a space, with a listing of what was searched.
pub fn find_element(space: &PerturbationSpace, sel: &ElementSel) -> Result<usize> {
    let hit = space.elements().iter().position(|e| match (e, sel) {
        (SpaceElement::Product(b), ElementSel::Product { j, index }) => {
            b.component_j() == *j && b.index().entries() == index.as_slice()
        }
        (SpaceElement::Reduced(r), ElementSel::Reduced { n }) => r.n() == *n,
        _ => false,
    });
    hit.ok_or_else(|| {
        Error::invalid(format!(
            "basis element {sel} is not in this space ({} elements; product \
             elements are named '<j>:<n1>,..,<nd>', reduced elements by a bare index)",
            space.len()
        ))
    })
}

/// Fully resolved run parameters: every knob concrete.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub system: SystemId,
    pub space: SpaceParams,
    pub estimator: EstimatorParams,
    pub sweep: SweepParams,
    pub oracle: OracleParams,
    pub simulate: SimulateParams,
}

#[derive(Debug, Clone)]
pub struct SpaceParams {
    pub p: usize,
    pub n_max: usize,
    pub reduced: bool,
}

#[derive(Debug, Clone)]
pub struct EstimatorParams {
    pub total_time: f64,
    pub decorrelation_time: f64,
    pub dt: f64,
    pub burn_in_time: f64,
    pub n_chains: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SweepParams {
    pub gammas: Vec<f64>,
    pub target: SweepTarget,
}

#[derive(Debug, Clone)]
pub struct OracleParams {
    pub m_per_dim: usize,
    pub dt: f64,
    pub fd_delta: f64,
    pub element: ElementSel,
}

#[derive(Debug, Clone)]
pub struct SimulateParams {
    pub time: f64,
    pub stride: usize,
}

/// Per-system defaults (the reference run lengths; `--scale desk` divides
/// the resolved total_time by 5).
struct SystemDefaults {
    p: usize,
    n_max: usize,
    reduced: bool,
    total_time: f64,
    decorrelation_time: f64,
    dt: f64,
}

fn defaults_for(id: SystemId) -> SystemDefaults {
    match id {
        SystemId::Kuramoto2 => SystemDefaults {
            p: 5,
            n_max: 11,
            reduced: false,
            total_time: 1.0e5,
            decorrelation_time: 4.0,
            dt: 0.01,
        },
        SystemId::Kuramoto20Reduced => SystemDefaults {
            p: 4,
            n_max: 22,
            reduced: true,
            total_time: 5.0e5,
            decorrelation_time: 6.0,
            dt: 0.01,
        },
        SystemId::LorenzCutoff => SystemDefaults {
            p: 5,
            n_max: 9,
            reduced: false,
            total_time: 1.0e5,
            decorrelation_time: 4.0,
            dt: 0.002,
        },
    }
}

const DEFAULT_GAMMAS: [f64; 6] = [-0.2, -0.1, -0.05, 0.05, 0.1, 0.2];

/// Reads and parses a config file; parse errors carry the offending path
/// and serde's description (including unknown-key reports).
pub fn load(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    toml::from_str(&text)
        .map_err(|e| Error::invalid(format!("config {}: {e}", path.display())))
}

/// Applies per-system defaults, the seed flag, and the scale divisor.
pub fn resolve(
    file: &ExperimentConfig,
    seed_override: Option<u64>,
    total_time_divisor: f64,
) -> Result<Resolved> {
    let id_str = file.system.as_deref().ok_or_else(|| {
        Error::invalid(format!(
            "no system id in config; registered ids: {}",
            REGISTERED_SYSTEM_IDS.join(", ")
        ))
    })?;
    let system: SystemId = id_str.parse()?;
    let d = defaults_for(system);

    let space = SpaceParams {
        p: file.space.p.unwrap_or(d.p),
        n_max: file.space.n_max.unwrap_or(d.n_max),
        reduced: file.space.reduced.unwrap_or(d.reduced),
    };
    let estimator = EstimatorParams {
        total_time: file.estimator.total_time.unwrap_or(d.total_time) / total_time_divisor,
        decorrelation_time: file
            .estimator
            .decorrelation_time
            .unwrap_or(d.decorrelation_time),
        dt: file.estimator.dt.unwrap_or(d.dt),
        burn_in_time: file.estimator.burn_in_time.unwrap_or(100.0),
        n_chains: file.estimator.n_chains.unwrap_or(8),
        seed: seed_override.or(file.estimator.seed).unwrap_or(0),
    };
    let sweep = SweepParams {
        gammas: file
            .sweep
            .gammas
            .clone()
            .unwrap_or_else(|| DEFAULT_GAMMAS.to_vec()),
        target: match &file.sweep.target {
            Some(t) => t.parse()?,
            None => SweepTarget::EtaOpt,
        },
    };
    let oracle = OracleParams {
        m_per_dim: file.oracle.m_per_dim.unwrap_or(64),
        dt: file.oracle.dt.unwrap_or(0.05),
        fd_delta: file.oracle.fd_delta.unwrap_or(1.0e-3),
        element: match &file.oracle.element {
            Some(t) => t.parse()?,
            None => default_oracle_element(&space, system),
        },
    };
    let simulate = SimulateParams {
        time: file.simulate.time.unwrap_or(1000.0),
        stride: file.simulate.stride.unwrap_or(10).max(1),
    };

    if sweep.gammas.is_empty() {
        return Err(Error::invalid("sweep.gammas must not be empty"));
    }

    Ok(Resolved {
        system,
        space,
        estimator,
        sweep,
        oracle,
        simulate,
    })
}

/// The element with the strongest expected response: the first component
/// driven along its own coordinate (product spaces), or the first
/// non-constant generator (reduced spaces).
fn default_oracle_element(space: &SpaceParams, system: SystemId) -> ElementSel {
    if space.reduced {
        ElementSel::Reduced { n: 1 }
    } else {
        let d = match system {
            SystemId::Kuramoto2 => 2,
            SystemId::Kuramoto20Reduced => 20,
            SystemId::LorenzCutoff => 3,
        };
        let mut index = vec![0usize; d];
        index[0] = 1;
        ElementSel::Product { j: 1, index }
    }
}

impl Resolved {
    /// The estimator configuration this run uses.
    pub fn kd_config(&self) -> KdConfig {
        KdConfig {
            total_time: self.estimator.total_time,
            decorrelation_time: self.estimator.decorrelation_time,
            dt: self.estimator.dt,
            burn_in_time: self.estimator.burn_in_time,
            seed: self.estimator.seed,
            n_chains: self.estimator.n_chains,
        }
    }

    /// Re-expresses the resolved state as a fully populated config file.
    pub fn to_config(&self) -> ExperimentConfig {
        ExperimentConfig {
            system: Some(self.system.to_string()),
            space: SpaceSection {
                p: Some(self.space.p),
                n_max: Some(self.space.n_max),
                reduced: Some(self.space.reduced),
            },
            estimator: EstimatorSection {
                total_time: Some(self.estimator.total_time),
                decorrelation_time: Some(self.estimator.decorrelation_time),
                dt: Some(self.estimator.dt),
                burn_in_time: Some(self.estimator.burn_in_time),
                n_chains: Some(self.estimator.n_chains),
                seed: Some(self.estimator.seed),
            },
            sweep: SweepSection {
                gammas: Some(self.sweep.gammas.clone()),
                target: Some(self.sweep.target.to_string()),
            },
            oracle: OracleSection {
                m_per_dim: Some(self.oracle.m_per_dim),
                dt: Some(self.oracle.dt),
                fd_delta: Some(self.oracle.fd_delta),
                element: Some(self.oracle.element.to_string()),
            },
            simulate: SimulateSection {
                time: Some(self.simulate.time),
                stride: Some(self.simulate.stride),
            },
            results: None,
        }
    }
}

/// Writes the metadata file: the fully resolved config plus an informational
/// `[results]` table. The file parses as a config and reproduces the run.
pub fn write_metadata(path: &Path, resolved: &Resolved, results: toml::Table) -> Result<()> {
    let mut doc = resolved.to_config();
    if !results.is_empty() {
        doc.results = Some(results);
    }
    let text = toml::to_string_pretty(&doc)
        .map_err(|e| Error::invalid(format!("metadata serialization failed: {e}")))?;
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}
