//! The trigonometric product basis of vector fields on `T^d` and its
//! weighted Sobolev geometry.
//!
//! Scalar building blocks on one circle of half-width `r` are indexed by
//! `m >= 0`:
//!
//! ```text
//!     b_0 = 1/sqrt(2r),
//!     b_m = sqrt(1/r) * sin(f * pi/r * x)   for odd m,
//!     b_m = sqrt(1/r) * cos(f * pi/r * x)   for even m > 0,
//! ```
//!
//! with frequency `f = floor((m+1)/2)` and `x` the representative of the
//! point in `[c - r, c + r)`. Amplitudes are chosen so every `b_m` has unit
//! `L^2` integral over one period. Vector fields are unit-vector products
//! `B^j_n(x) = prod_i b_{n_i}(x_i) * e_j`; the weighted `H^p` norm of such a
//! field has the closed form
//!
//! ```text
//!     ||B^j_n||^2 = sum_{l=0}^{p} S^l,    S = sum_i floor((n_i+1)/2)^2,
//! ```
//!
//! which makes the normalized family `B~ = B / ||B||` orthonormal. The
//! response functional restricted to the span of a finite family is
//! represented by its coefficient vector (the Riesz representative), and the
//! unit-ball maximizer of the response is that vector rescaled to unit
//! length.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::torus::{TorusDomain, VectorField};

/// A `d`-tuple of non-negative scalar basis indices, one per coordinate.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MultiIndex(Vec<usize>);

impl MultiIndex {
    pub fn new(entries: Vec<usize>) -> Self {
        MultiIndex(entries)
    }

    pub fn entries(&self) -> &[usize] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, n) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{n}")?;
        }
        write!(f, ")")
    }
}

/// Enumerates the index set of the full product family: all pairs of a
/// component `j` in `1..=d` (outer, ascending) and a multi-index `n` in
/// `{0..N-1}^d` (inner, row-major with the last coordinate fastest). The
/// result has exactly `d * N^d` entries and fixes the coefficient order used
/// everywhere downstream (CSV files, Riesz vectors, batched estimates).
pub fn enumerate_indices(d: usize, n_max: usize) -> Vec<(usize, MultiIndex)> {
    assert!(d >= 1, "dimension must be at least 1");
    assert!(n_max >= 1, "index cutoff must be at least 1");
    let per_component = n_max
        .checked_pow(d as u32)
        .expect("index family too large to enumerate");
    let mut out = Vec::with_capacity(d * per_component);
    for j in 1..=d {
        for k in 0..per_component {
            // Decode k as d base-N digits, most significant first, so the
            // last coordinate varies fastest.
            let mut entries = vec![0usize; d];
            let mut rem = k;
            for slot in entries.iter_mut().rev() {
                *slot = rem % n_max;
                rem /= n_max;
            }
            out.push((j, MultiIndex::new(entries)));
        }
    }
    out
}

/// Evaluates the scalar basis function `b_m` on the circle of center `c` and
/// half-width `r_box`.
///
/// The argument is first wrapped into the representative interval
/// `[c - r_box, c + r_box)`, then the trigonometric factor is taken at phase
/// `f * pi/r_box * x_wrapped` with `f = floor((m+1)/2)`. Wrapping first makes
/// the evaluation exactly periodic: representatives of the same torus point
/// give bit-identical values. `m = 0` is the constant `1/sqrt(2 r_box)`, odd
/// `m` the sine branch, even `m > 0` the cosine branch, all with unit `L^2`
/// integral over one period.
pub fn eval_scalar_basis(m: usize, x: f64, c: f64, r_box: f64) -> f64 {
    let period = 2.0 * r_box;
    if m == 0 {
        return 1.0 / period.sqrt();
    }
    let lo = c - r_box;
    let xw = lo + (x - lo).rem_euclid(period);
    let freq = m.div_ceil(2) as f64;
    let amp = (1.0 / r_box).sqrt();
    let phase = freq * std::f64::consts::PI / r_box * xw;
    if m % 2 == 1 {
        amp * phase.sin()
    } else {
        amp * phase.cos()
    }
}

/// Squared weighted `H^p` norm of the product field with multi-index
/// `index`: `sum_{l=0}^{p} sum_{k in {1..d}^l} prod_i floor((n_{k_i}+1)/2)^2`.
/// The inner sum over tuples collapses to `S^l` with
/// `S = sum_i floor((n_i+1)/2)^2`, so the whole expression is the geometric
/// sum `sum_{l=0}^{p} S^l` (the empty product at `l = 0` contributes 1). The
/// value does not depend on the unit-vector component of the field.
pub fn hp_norm_sq(index: &MultiIndex, p: usize) -> f64 {
    let s: f64 = index
        .entries()
        .iter()
        .map(|&n| {
            let f = n.div_ceil(2) as f64;
            f * f
        })
        .sum();
    if s == 1.0 {
        return (p + 1) as f64;
    }
    // Geometric sum (s^{p+1} - 1) / (s - 1); also correct at s = 0 where it
    // evaluates to 1.
    (s.powi(p as i32 + 1) - 1.0) / (s - 1.0)
}

/// One normalized element `B~^j_n` of the full product family: zero in every
/// component except `j` (1-based), which carries
/// `prod_i b_{n_i}(x_i) / norm_hp`.
#[derive(Debug, Clone)]
pub struct BasisElement {
    component_j: usize,
    index: MultiIndex,
    norm_hp: f64,
    domain: TorusDomain,
    p: usize,
}

impl BasisElement {
    /// Builds the element and computes its closed-form `H^p` norm.
    pub fn new(component_j: usize, index: MultiIndex, domain: TorusDomain, p: usize) -> Result<Self> {
        let d = domain.dim();
        if component_j == 0 || component_j > d {
            return Err(Error::invalid(format!(
                "component {component_j} out of range 1..={d}"
            )));
        }
        if index.dim() != d {
            return Err(Error::invalid(format!(
                "multi-index dimension {} does not match domain dimension {d}",
                index.dim()
            )));
        }
        let norm_hp = hp_norm_sq(&index, p).sqrt();
        Ok(BasisElement {
            component_j,
            index,
            norm_hp,
            domain,
            p,
        })
    }

    pub fn component_j(&self) -> usize {
        self.component_j
    }

    pub fn index(&self) -> &MultiIndex {
        &self.index
    }

    /// The weighted norm of the raw (unnormalized) product field.
    pub fn norm_hp(&self) -> f64 {
        self.norm_hp
    }

    pub fn domain(&self) -> &TorusDomain {
        &self.domain
    }

    pub fn p(&self) -> usize {
        self.p
    }

    fn core(&self) -> ElementCore {
        ElementCore::Product {
            j: self.component_j,
            ms: self.index.entries().to_vec(),
            norm: self.norm_hp,
        }
    }
}

/// One normalized element of the reduced family used by the many-oscillator
/// example: the first two components both carry `b_n(x^1) / norm_hp`, all
/// other components vanish. The norm is the 1-dimensional weighted `H^p`
/// norm of the scalar generator `b_n`.
#[derive(Debug, Clone)]
pub struct ReducedElement {
    n: usize,
    norm_hp: f64,
    domain: TorusDomain,
    p: usize,
}

impl ReducedElement {
    pub fn new(n: usize, domain: TorusDomain, p: usize) -> Result<Self> {
        if domain.dim() < 2 {
            return Err(Error::invalid(
                "reduced elements need at least 2 ambient dimensions",
            ));
        }
        let norm_hp = hp_norm_sq(&MultiIndex::new(vec![n]), p).sqrt();
        Ok(ReducedElement {
            n,
            norm_hp,
            domain,
            p,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn norm_hp(&self) -> f64 {
        self.norm_hp
    }

    pub fn domain(&self) -> &TorusDomain {
        &self.domain
    }

    pub fn p(&self) -> usize {
        self.p
    }

    fn core(&self) -> ElementCore {
        ElementCore::Reduced {
            n: self.n,
            norm: self.norm_hp,
        }
    }
}

/// Evaluates the normalized product field `B~^j_n` at a point: zero in all
/// components except `component_j`, which carries the normalized product of
/// scalar factors.
pub fn eval_basis_field(elem: &BasisElement, x: &[f64]) -> Vec<f64> {
    let field = BasisField::single(elem.domain.clone(), elem.core());
    let mut out = vec![0.0; elem.domain.dim()];
    field.eval(x, &mut out);
    out
}

/// An element of a [`PerturbationSpace`]: either a full product element or a
/// reduced element.
#[derive(Debug, Clone)]
pub enum SpaceElement {
    Product(BasisElement),
    Reduced(ReducedElement),
}

impl SpaceElement {
    /// Short identifier used in field labels and logs.
    pub fn label(&self) -> String {
        match self {
            SpaceElement::Product(e) => format!("B~[j={},n={}]", e.component_j(), e.index()),
            SpaceElement::Reduced(e) => format!("B~[n={}]", e.n()),
        }
    }

    /// The weighted norm of the raw element this was normalized by.
    pub fn norm_hp(&self) -> f64 {
        match self {
            SpaceElement::Product(e) => e.norm_hp(),
            SpaceElement::Reduced(e) => e.norm_hp(),
        }
    }

    fn core(&self) -> ElementCore {
        match self {
            SpaceElement::Product(e) => e.core(),
            SpaceElement::Reduced(e) => e.core(),
        }
    }

    fn domain(&self) -> &TorusDomain {
        match self {
            SpaceElement::Product(e) => e.domain(),
            SpaceElement::Reduced(e) => e.domain(),
        }
    }

    /// The element as a standalone vector field.
    pub fn to_field(&self) -> VectorField {
        let field = BasisField::single(self.domain().clone(), self.core());
        VectorField::from_basis(self.label(), field)
    }
}

/// Which family a perturbation space enumerates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpaceKind {
    /// All `d * N^d` product elements `B~^j_n`.
    FullProduct,
    /// The reduced family `n = 0..N-1` acting equally on components 1 and 2.
    Reduced,
}

/// A finite orthonormal family of perturbation fields together with its
/// coefficient inner product. Elements are stored in enumeration order; this
/// order is the contract for coefficient vectors and CSV files.
#[derive(Debug, Clone)]
pub struct PerturbationSpace {
    kind: SpaceKind,
    domain: TorusDomain,
    p: usize,
    n_max: usize,
    elements: Vec<SpaceElement>,
}

impl PerturbationSpace {
    /// The full product family on `domain` with Sobolev order `p` and index
    /// cutoff `n_max` (indices `0..n_max` per coordinate): `d * n_max^d`
    /// elements in the order of [`enumerate_indices`].
    pub fn full_product(domain: TorusDomain, p: usize, n_max: usize) -> Result<Self> {
        if n_max == 0 {
            return Err(Error::invalid("index cutoff must be at least 1"));
        }
        let d = domain.dim();
        if n_max.checked_pow(d as u32).is_none() {
            return Err(Error::invalid(format!(
                "full product family with N={n_max}, d={d} is too large to enumerate"
            )));
        }
        let elements = enumerate_indices(d, n_max)
            .into_iter()
            .map(|(j, index)| {
                BasisElement::new(j, index, domain.clone(), p).map(SpaceElement::Product)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PerturbationSpace {
            kind: SpaceKind::FullProduct,
            domain,
            p,
            n_max,
            elements,
        })
    }

    /// The reduced family on `domain` (dimension at least 2): elements
    /// `n = 0..n_max`, each acting as `b_n(x^1)` on the first two components
    /// and zero elsewhere, normalized by the 1-dimensional weighted norm of
    /// the generator.
    pub fn reduced(domain: TorusDomain, p: usize, n_max: usize) -> Result<Self> {
        if n_max == 0 {
            return Err(Error::invalid("index cutoff must be at least 1"));
        }
        let elements = (0..n_max)
            .map(|n| ReducedElement::new(n, domain.clone(), p).map(SpaceElement::Reduced))
            .collect::<Result<Vec<_>>>()?;
        Ok(PerturbationSpace {
            kind: SpaceKind::Reduced,
            domain,
            p,
            n_max,
            elements,
        })
    }

    pub fn kind(&self) -> SpaceKind {
        self.kind
    }

    pub fn domain(&self) -> &TorusDomain {
        &self.domain
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn elements(&self) -> &[SpaceElement] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// All elements as standalone vector fields, in enumeration order.
    pub fn element_fields(&self) -> Vec<VectorField> {
        self.elements.iter().map(SpaceElement::to_field).collect()
    }

    /// Inner product of two coefficient vectors. The elements are
    /// orthonormal, so this is the plain dot product in enumeration order.
    pub fn inner_product(&self, a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), self.len(), "coefficient length mismatch");
        assert_eq!(b.len(), self.len(), "coefficient length mismatch");
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
}

/// The Riesz representative of the response functional on a perturbation
/// space: one coefficient `C_k = R(B~_k)` per element, stored in enumeration
/// order.
#[derive(Debug, Clone)]
pub struct RieszVector {
    space: PerturbationSpace,
    coefficients: Vec<f64>,
}

impl RieszVector {
    pub fn new(space: PerturbationSpace, coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.len() != space.len() {
            return Err(Error::invalid(format!(
                "{} coefficients for a space of {} elements",
                coefficients.len(),
                space.len()
            )));
        }
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("Riesz coefficients must be finite"));
        }
        Ok(RieszVector {
            space,
            coefficients,
        })
    }

    pub fn space(&self) -> &PerturbationSpace {
        &self.space
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    /// Norm of the representative, `sqrt(sum C_k^2)`; by Riesz duality this
    /// equals the operator norm of the response functional on the space and
    /// the optimal achievable response on the unit ball.
    pub fn norm(&self) -> f64 {
        self.coefficients.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    /// Pairs of elements and their coefficients, in enumeration order.
    pub fn entries(&self) -> impl Iterator<Item = (&SpaceElement, f64)> {
        self.space
            .elements()
            .iter()
            .zip(self.coefficients.iter().copied())
    }
}

/// Builds the unit-norm optimal perturbation `eta_opt = v / ||v||` from the
/// Riesz representative `v`, returning the field and `||v||` (the optimal
/// response value itself). Errors if every coefficient is zero, in which
/// case the response functional vanishes on the space and no maximizer
/// exists.
pub fn assemble_optimal_perturbation(coeffs: &RieszVector) -> Result<(VectorField, f64)> {
    let norm = coeffs.norm();
    if norm == 0.0 {
        return Err(Error::ZeroCoefficients);
    }
    let terms: Vec<(f64, ElementCore)> = coeffs
        .entries()
        .map(|(elem, c)| (c / norm, elem.core()))
        .collect();
    let field = BasisField::combination(coeffs.space().domain().clone(), terms);
    Ok((VectorField::from_basis("eta-opt", field), norm))
}

/// Internal core of a basis-backed field term, shared between single
/// elements and linear combinations so that both evaluate through exactly
/// the same arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum ElementCore {
    Product {
        j: usize,
        ms: Vec<usize>,
        norm: f64,
    },
    Reduced {
        n: usize,
        norm: f64,
    },
}

impl ElementCore {
    fn max_m(&self) -> usize {
        match self {
            ElementCore::Product { ms, .. } => ms.iter().copied().max().unwrap_or(0),
            ElementCore::Reduced { n, .. } => *n,
        }
    }
}

/// A linear combination of basis element cores over a common domain. This is
/// the structured payload behind basis-backed [`VectorField`]s; keeping the
/// structure lets hot loops share the per-coordinate scalar tables across
/// many fields while producing bit-identical values to one-off evaluation
/// (both paths call [`eval_scalar_basis`] with the same arguments and
/// combine factors in the same order).
#[derive(Debug, Clone)]
pub(crate) struct BasisField {
    domain: TorusDomain,
    terms: Arc<Vec<(f64, ElementCore)>>,
    max_m: usize,
}

impl BasisField {
    pub(crate) fn single(domain: TorusDomain, core: ElementCore) -> Self {
        BasisField::combination(domain, vec![(1.0, core)])
    }

    pub(crate) fn combination(domain: TorusDomain, terms: Vec<(f64, ElementCore)>) -> Self {
        let max_m = terms.iter().map(|(_, c)| c.max_m()).max().unwrap_or(0);
        BasisField {
            domain,
            terms: Arc::new(terms),
            max_m,
        }
    }

    pub(crate) fn domain(&self) -> &TorusDomain {
        &self.domain
    }

    pub(crate) fn ambient_dim(&self) -> usize {
        self.domain.dim()
    }

    pub(crate) fn max_m(&self) -> usize {
        self.max_m
    }

    /// Direct evaluation at a point.
    pub(crate) fn eval(&self, x: &[f64], out: &mut [f64]) {
        let centers = self.domain.centers();
        let r = self.domain.r_box();
        out.fill(0.0);
        for (coeff, core) in self.terms.iter() {
            match core {
                ElementCore::Product { j, ms, norm } => {
                    let mut prod = 1.0;
                    for (i, &m) in ms.iter().enumerate() {
                        prod *= eval_scalar_basis(m, x[i], centers[i], r);
                    }
                    out[*j - 1] += coeff * (prod / norm);
                }
                ElementCore::Reduced { n, norm } => {
                    let v = coeff * (eval_scalar_basis(*n, x[0], centers[0], r) / norm);
                    out[0] += v;
                    out[1] += v;
                }
            }
        }
    }

    /// Evaluation against precomputed scalar tables for the same point. The
    /// tables must have been filled for this field's domain and an `m` range
    /// covering `self.max_m()`.
    pub(crate) fn eval_tabulated(&self, tables: &BasisTables, out: &mut [f64]) {
        out.fill(0.0);
        for (coeff, core) in self.terms.iter() {
            match core {
                ElementCore::Product { j, ms, norm } => {
                    let mut prod = 1.0;
                    for (i, &m) in ms.iter().enumerate() {
                        prod *= tables.get(i, m);
                    }
                    out[*j - 1] += coeff * (prod / norm);
                }
                ElementCore::Reduced { n, norm } => {
                    let v = coeff * (tables.get(0, *n) / norm);
                    out[0] += v;
                    out[1] += v;
                }
            }
        }
    }
}

/// Per-point table of scalar basis values: entry `(i, m)` holds
/// `eval_scalar_basis(m, x_i, c_i, r_box)` for the point the table was last
/// filled with. Filling costs `d * (max_m + 1)` trigonometric evaluations
/// and makes evaluating a whole family of fields at the same point cheap.
#[derive(Debug, Clone)]
pub(crate) struct BasisTables {
    stride: usize,
    vals: Vec<f64>,
}

impl BasisTables {
    pub(crate) fn new(d: usize, max_m: usize) -> Self {
        let stride = max_m + 1;
        BasisTables {
            stride,
            vals: vec![0.0; d * stride],
        }
    }

    pub(crate) fn fill(&mut self, domain: &TorusDomain, x: &[f64]) {
        let centers = domain.centers();
        let r = domain.r_box();
        for i in 0..x.len() {
            for m in 0..self.stride {
                self.vals[i * self.stride + m] = eval_scalar_basis(m, x[i], centers[i], r);
            }
        }
    }

    #[inline]
    pub(crate) fn get(&self, i: usize, m: usize) -> f64 {
        self.vals[i * self.stride + m]
    }
}
