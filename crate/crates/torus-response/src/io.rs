//! CSV emission and ingestion for pipeline artifacts.
//!
//! All tables are plain comma-separated text with a single header line.
//! Floating-point cells are printed with 17 significant digits, which is
//! enough for the shortest round-trip: writing a table and reading it back
//! reproduces every `f64` bit for bit. Writers emit rows in enumeration
//! order, so equal inputs produce byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::basis::{PerturbationSpace, RieszVector, SpaceElement};
use crate::error::{Error, Result};
use crate::response::{ResponseEstimate, SweepPoint};

/// Formats a float with 17 significant digits (`{:.16e}`), the precision at
/// which decimal text identifies every `f64` uniquely.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedCsv {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Number of index columns a space's elements occupy: `d` for product
/// spaces, 1 for reduced spaces.
fn index_columns(space: &PerturbationSpace) -> usize {
    match space.elements().first() {
        Some(SpaceElement::Product(e)) => e.index().dim(),
        Some(SpaceElement::Reduced(_)) | None => 1,
    }
}

fn index_header(space: &PerturbationSpace) -> String {
    let mut s = String::from("j");
    for i in 1..=index_columns(space) {
        let _ = write!(s, ",n_{i}");
    }
    s
}

/// The `j,n_1,...` cells identifying one element. Reduced elements act on
/// the first two components identically and are filed under `j = 1` with
/// their single frequency index.
fn element_cells(elem: &SpaceElement) -> String {
    match elem {
        SpaceElement::Product(e) => {
            let mut s = e.component_j().to_string();
            for &m in e.index().entries() {
                let _ = write!(s, ",{m}");
            }
            s
        }
        SpaceElement::Reduced(e) => format!("1,{}", e.n()),
    }
}

/// Writes a Riesz coefficient vector as `j,n_1,...,n_d,coefficient`, one row
/// per basis element in enumeration order.
pub fn write_riesz_csv(path: &Path, riesz: &RieszVector) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "{},coefficient", index_header(riesz.space()));
    for (elem, c) in riesz.entries() {
        let _ = writeln!(out, "{},{}", element_cells(elem), format_float(c));
    }
    write_text(path, &out)
}

/// Reads a Riesz coefficient vector previously written by
/// [`write_riesz_csv`] against the same space. Row order, element indices,
/// and the header must match the space exactly; coefficients round-trip
/// bit for bit.
pub fn read_riesz_csv(path: &Path, space: &PerturbationSpace) -> Result<RieszVector> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| malformed(path, "empty file"))?;
    let expected_header = format!("{},coefficient", index_header(space));
    if header != expected_header {
        return Err(malformed(
            path,
            format!("header '{header}' does not match expected '{expected_header}'"),
        ));
    }
    let mut coefficients = Vec::with_capacity(space.len());
    for (row, line) in lines.filter(|l| !l.is_empty()).enumerate() {
        let elem = space.elements().get(row).ok_or_else(|| {
            malformed(path, format!("more rows than the {} space elements", space.len()))
        })?;
        let expected_cells = element_cells(elem);
        let (cells, coeff_text) = line.rsplit_once(',').ok_or_else(|| {
            malformed(path, format!("row {}: expected comma-separated cells", row + 2))
        })?;
        if cells != expected_cells {
            return Err(malformed(
                path,
                format!(
                    "row {}: element cells '{cells}' do not match '{expected_cells}'",
                    row + 2
                ),
            ));
        }
        let c: f64 = coeff_text.parse().map_err(|_| {
            malformed(path, format!("row {}: unparseable coefficient '{coeff_text}'", row + 2))
        })?;
        coefficients.push(c);
    }
    if coefficients.len() != space.len() {
        return Err(malformed(
            path,
            format!(
                "{} coefficient rows for a space of {} elements",
                coefficients.len(),
                space.len()
            ),
        ));
    }
    RieszVector::new(space.clone(), coefficients)
}

/// Writes per-element response estimates as
/// `j,n_1,...,n_d,estimate,std_error`, one row per element in enumeration
/// order.
pub fn write_response_csv(
    path: &Path,
    space: &PerturbationSpace,
    estimates: &[ResponseEstimate],
) -> Result<()> {
    if estimates.len() != space.len() {
        return Err(Error::invalid(format!(
            "{} estimates for a space of {} elements",
            estimates.len(),
            space.len()
        )));
    }
    let mut out = String::new();
    let _ = writeln!(out, "{},estimate,std_error", index_header(space));
    for (elem, est) in space.elements().iter().zip(estimates) {
        let _ = writeln!(
            out,
            "{},{},{}",
            element_cells(elem),
            format_float(est.value),
            format_float(est.std_error)
        );
    }
    write_text(path, &out)
}

/// Writes amplitude-sweep results as `gamma,mean,std_error`.
pub fn write_sweep_csv(path: &Path, points: &[SweepPoint]) -> Result<()> {
    let mut out = String::from("gamma,mean,std_error\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{}",
            format_float(p.gamma),
            format_float(p.mean),
            format_float(p.std_error)
        );
    }
    write_text(path, &out)
}

/// Writes a flat `metric,value` report (used for the oracle diagnostics).
pub fn write_report_csv(path: &Path, rows: &[(String, f64)]) -> Result<()> {
    let mut out = String::from("metric,value\n");
    for (name, value) in rows {
        if name.contains(',') || name.contains('\n') {
            return Err(Error::invalid(format!(
                "metric name '{name}' contains a delimiter"
            )));
        }
        let _ = writeln!(out, "{name},{}", format_float(*value));
    }
    write_text(path, &out)
}
