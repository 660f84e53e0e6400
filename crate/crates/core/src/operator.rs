//! Trigonometric potentials, diagonal index projectors and truncated fiber
//! matrices H(κ).

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{enumerate_indices, LatticeIndex, QuasiLattice, NORM_SLACK};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OperatorError {
    #[error("potential has a nonzero mean term")]
    NonzeroMean,
    #[error("term {q} has |||p_q||| = {norm} > Q = {radius}")]
    OutOfSupport { q: LatticeIndex, norm: f64, radius: f64 },
    #[error("terms {q} and its negative are not complex conjugates")]
    Asymmetric { q: LatticeIndex },
    #[error("support radius Q must be positive and finite, got {0}")]
    BadRadius(f64),
    #[error("polyharmonic order l must be an integer >= 2, got {0}")]
    BadOrder(u32),
    #[error("projector is empty")]
    EmptyProjector,
    #[error("{missing} is not in the matrix index set")]
    NotASubset { missing: LatticeIndex },
    #[error("potential file: {0}")]
    Io(String),
}

/// V = Σ V_q e^{i⟨p_q, x⟩} on |||p_q||| ≤ Q, with V₀ = 0 and V_{−q} = conj V_q.
#[derive(Clone, Debug, PartialEq)]
pub struct TrigPotential {
    q_radius: f64,
    coeffs: BTreeMap<LatticeIndex, Complex64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PotentialTerm {
    pub s1: [i64; 2],
    pub s2: [i64; 2],
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PotentialFile {
    #[serde(rename = "Q")]
    pub q: f64,
    pub terms: Vec<PotentialTerm>,
}

impl TrigPotential {
    /// Builds V from (q, V_q) pairs, filling in V_{−q} = conj V_q.
    pub fn new(
        q_radius: f64,
        terms: impl IntoIterator<Item = (LatticeIndex, Complex64)>,
    ) -> Result<Self, OperatorError> {
        if !(q_radius.is_finite() && q_radius > 0.0) {
            return Err(OperatorError::BadRadius(q_radius));
        }
        let mut coeffs = BTreeMap::new();
        for (q, v) in terms {
            if v == Complex64::new(0.0, 0.0) {
                continue;
            }
            if q.is_zero() {
                return Err(OperatorError::NonzeroMean);
            }
            let norm = q.norm_triple();
            if norm > q_radius * (1.0 + NORM_SLACK) {
                return Err(OperatorError::OutOfSupport {
                    q,
                    norm,
                    radius: q_radius,
                });
            }
            for (idx, val) in [(q, v), (-q, v.conj())] {
                match coeffs.get(&idx) {
                    Some(old) => {
                        let old: &Complex64 = old;
                        if (old - val).norm() > 1e-14 * val.norm().max(1.0) {
                            return Err(OperatorError::Asymmetric { q });
                        }
                    }
                    None => {
                        coeffs.insert(idx, val);
                    }
                }
            }
        }
        Ok(Self { q_radius, coeffs })
    }

    pub fn zero(q_radius: f64) -> Self {
        Self {
            q_radius,
            coeffs: BTreeMap::new(),
        }
    }

    /// V_q = amplitude at q, conj at −q, zero elsewhere.
    pub fn single_harmonic(
        q_radius: f64,
        q: LatticeIndex,
        amplitude: Complex64,
    ) -> Result<Self, OperatorError> {
        Self::new(q_radius, [(q, amplitude)])
    }

    pub fn from_file(file: &PotentialFile) -> Result<Self, OperatorError> {
        Self::new(
            file.q,
            file.terms
                .iter()
                .map(|t| (LatticeIndex::new(t.s1, t.s2), Complex64::new(t.re, t.im))),
        )
    }

    pub fn from_json_path(path: &Path) -> Result<Self, OperatorError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| OperatorError::Io(format!("{}: {e}", path.display())))?;
        let file: PotentialFile =
            serde_json::from_str(&text).map_err(|e| OperatorError::Io(e.to_string()))?;
        Self::from_file(&file)
    }

    pub fn to_file(&self) -> PotentialFile {
        PotentialFile {
            q: self.q_radius,
            terms: self
                .coeffs
                .iter()
                .filter(|(q, _)| q.is_positive())
                .map(|(q, v)| PotentialTerm {
                    s1: q.s1,
                    s2: q.s2,
                    re: v.re,
                    im: v.im,
                })
                .collect(),
        }
    }

    pub fn q_radius(&self) -> f64 {
        self.q_radius
    }

    pub fn coeff(&self, q: &LatticeIndex) -> Complex64 {
        self.coeffs.get(q).copied().unwrap_or_default()
    }

    /// Nonzero (q, V_q), both signs, in canonical order.
    pub fn terms(&self) -> impl Iterator<Item = (&LatticeIndex, &Complex64)> {
        self.coeffs.iter()
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Σ|V_q|, an upper bound for the operator norm of V.
    pub fn l1_norm(&self) -> f64 {
        self.coeffs.values().map(|v| v.norm()).sum()
    }

    /// Multiply every coefficient by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            q_radius: self.q_radius,
            coeffs: self
                .coeffs
                .iter()
                .map(|(q, v)| (*q, v * factor))
                .filter(|(_, v)| v.norm() > 0.0)
                .collect(),
        }
    }
}

/// Diagonal 0/1 projector onto an ordered set of indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexProjector {
    members: Vec<LatticeIndex>,
    pub label: String,
}

impl IndexProjector {
    pub fn new(label: impl Into<String>, members: impl IntoIterator<Item = LatticeIndex>) -> Self {
        let mut members: Vec<LatticeIndex> = members.into_iter().collect();
        members.sort_unstable();
        members.dedup();
        Self {
            members,
            label: label.into(),
        }
    }

    /// Ω(R) = {m : |||p_m||| ≤ R}.
    pub fn ball(label: impl Into<String>, radius: f64) -> Self {
        Self {
            members: enumerate_indices(radius),
            label: label.into(),
        }
    }

    pub fn members(&self) -> &[LatticeIndex] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn position(&self, m: &LatticeIndex) -> Option<usize> {
        self.members.binary_search(m).ok()
    }

    pub fn contains(&self, m: &LatticeIndex) -> bool {
        self.position(m).is_some()
    }

    pub fn is_subset_of(&self, other: &IndexProjector) -> bool {
        self.members.iter().all(|m| other.contains(m))
    }

    pub fn union(&self, other: &IndexProjector, label: impl Into<String>) -> Self {
        Self::new(label, self.members.iter().chain(&other.members).copied())
    }

    pub fn difference(&self, other: &IndexProjector, label: impl Into<String>) -> Self {
        Self::new(
            label,
            self.members.iter().filter(|m| !other.contains(m)).copied(),
        )
    }

    pub fn intersection(&self, other: &IndexProjector, label: impl Into<String>) -> Self {
        Self::new(
            label,
            self.members.iter().filter(|m| other.contains(m)).copied(),
        )
    }
}

#[derive(Clone, Debug)]
pub struct FiberMatrix {
    pub kappa: [Complex64; 2],
    pub l: u32,
    pub indexset: IndexProjector,
    pub entries: DMatrix<Complex64>,
}

impl FiberMatrix {
    pub fn dim(&self) -> usize {
        self.indexset.len()
    }

    /// max |H − H*| over all entries.
    pub fn hermiticity_residual(&self) -> f64 {
        hermiticity_residual(&self.entries)
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn is_real_kappa(&self) -> bool {
        self.kappa.iter().all(|z| z.im == 0.0)
    }
}

pub fn hermiticity_residual(a: &DMatrix<Complex64>) -> f64 {
    let n = a.nrows();
    let mut r: f64 = 0.0;
    for i in 0..n {
        for j in i..n {
            r = r.max((a[(i, j)] - a[(j, i)].conj()).norm());
        }
    }
    r
}

/// (κ + p_m)·(κ + p_m) with the bilinear (not Hermitian) product, raised to l.
pub fn diagonal_entry(lat: &QuasiLattice, kappa: &[Complex64; 2], l: u32, m: &LatticeIndex) -> Complex64 {
    let [px, py] = lat.p_xy(m);
    let zx = kappa[0] + px;
    let zy = kappa[1] + py;
    let s = zx * zx + zy * zy;
    if kappa[0].im == 0.0 && kappa[1].im == 0.0 {
        Complex64::new((zx.re * zx.re + zy.re * zy.re).powi(l as i32), 0.0)
    } else {
        s.powu(l)
    }
}

/// |κ + p_m|^{2l} for real κ.
pub fn free_energy(lat: &QuasiLattice, kappa: [f64; 2], l: u32, m: &LatticeIndex) -> f64 {
    let [px, py] = lat.p_xy(m);
    let (x, y) = (kappa[0] + px, kappa[1] + py);
    (x * x + y * y).powi(l as i32)
}

pub fn real_kappa(kappa: [f64; 2]) -> [Complex64; 2] {
    [Complex64::new(kappa[0], 0.0), Complex64::new(kappa[1], 0.0)]
}

/// κ ν(φ) = κ (cos φ, sin φ), complex in both arguments.
pub fn polar_kappa(kappa: Complex64, phi: Complex64) -> [Complex64; 2] {
    [kappa * phi.cos(), kappa * phi.sin()]
}

pub fn build_fiber(
    lat: &QuasiLattice,
    pot: &TrigPotential,
    kappa: [Complex64; 2],
    l: u32,
    proj: &IndexProjector,
) -> Result<FiberMatrix, OperatorError> {
    if l < 2 {
        return Err(OperatorError::BadOrder(l));
    }
    if proj.is_empty() {
        return Err(OperatorError::EmptyProjector);
    }
    let n = proj.len();
    let terms: Vec<(LatticeIndex, Complex64)> = pot.terms().map(|(q, v)| (*q, *v)).collect();
    let row_of = |m: &LatticeIndex| {
        let mut row = vec![(0usize, diagonal_entry(lat, &kappa, l, m))];
        row[0].0 = proj.position(m).expect("member of its own projector");
        for (q, v) in &terms {
            // entry(m, n) = V_{m−n}, so n = m − q.
            if let Some(j) = proj.position(&(*m - *q)) {
                row.push((j, *v));
            }
        }
        row
    };
    // rayon only pays off for large truncations
    let rows: Vec<Vec<(usize, Complex64)>> = if n >= 256 {
        proj.members().par_iter().map(row_of).collect()
    } else {
        proj.members().iter().map(row_of).collect()
    };
    let mut entries = DMatrix::<Complex64>::zeros(n, n);
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row {
            entries[(i, j)] = v;
        }
    }
    Ok(FiberMatrix {
        kappa,
        l,
        indexset: proj.clone(),
        entries,
    })
}

/// κ² + p_m² + 2κ p_m cos(φ − φ_m), the analytic extension of |κν(φ) + p_m|².
pub fn complexified_norm2(
    lat: &QuasiLattice,
    kappa: Complex64,
    phi: Complex64,
    m: &LatticeIndex,
) -> Complex64 {
    let p = lat.p_vec(m);
    kappa * kappa + p.norm * p.norm + 2.0 * kappa * p.norm * (phi - p.angle).cos()
}

/// Principal submatrix on `proj`, in `proj`'s order.
pub fn restrict(h: &FiberMatrix, proj: &IndexProjector) -> Result<FiberMatrix, OperatorError> {
    if proj.is_empty() {
        return Err(OperatorError::EmptyProjector);
    }
    let pos: Vec<usize> = proj
        .members()
        .iter()
        .map(|m| {
            h.indexset
                .position(m)
                .ok_or(OperatorError::NotASubset { missing: *m })
        })
        .collect::<Result<_, _>>()?;
    let n = pos.len();
    let entries = DMatrix::from_fn(n, n, |i, j| h.entries[(pos[i], pos[j])]);
    Ok(FiberMatrix {
        kappa: h.kappa,
        l: h.l,
        indexset: proj.clone(),
        entries,
    })
}
