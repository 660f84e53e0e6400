//! Perturbed eigenvalues and projections of truncated fiber matrices.
//!
//! The contour integrals g_r = (−1)^r/(2πi r) Tr∮(W R(z))^r dz are evaluated by
//! residues at the single eigenvalue μ₀ of H̃ inside the contour. Expanding
//! R(z) around μ₀ turns the residue into the Rayleigh–Schrödinger recursion in
//! the eigenbasis of H̃, which is what `series_terms` runs.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::lattice::{LatticeIndex, QuasiLattice, NORM_SLACK};
use crate::operator::{
    build_fiber, free_energy, hermiticity_residual, real_kappa, restrict, FiberMatrix,
    IndexProjector, OperatorError, TrigPotential,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectraError {
    #[error("matrix is not Hermitian (residual {0:e})")]
    NotHermitian(f64),
    #[error("half width must be positive, got {0}")]
    BadWidth(f64),
    #[error("no eigenvalue within {half_width} of {center}")]
    NoneInInterval { center: f64, half_width: f64 },
    #[error("{count} eigenvalues within {half_width} of {center}")]
    ResonantCollision {
        count: usize,
        center: f64,
        half_width: f64,
    },
    #[error("small denominator {denominator:e} at q = {q}")]
    SmallDenominator { q: LatticeIndex, denominator: f64 },
    #[error("the two forms of g2 disagree: {first} vs {second}")]
    FormMismatch { first: f64, second: f64 },
    #[error("eigenvalue {eigenvalue} lies on the contour |z - {center}| = {radius}")]
    EigenvalueOnContour {
        eigenvalue: f64,
        center: f64,
        radius: f64,
    },
    #[error("{count} eigenvalues of the unperturbed operator inside the contour")]
    MultipleInside { count: usize },
    #[error("blocks couple: entry ({row}, {col}) crosses blocks")]
    BlockCoupling { row: usize, col: usize },
    #[error("series does not converge (ratio {ratio})")]
    SeriesDiverged { ratio: f64 },
    #[error("Feshbach iteration is not diagonally dominant")]
    NotDominant,
    #[error(transparent)]
    Operator(#[from] OperatorError),
}

impl SpectraError {
    /// Errors that mean "this angle is resonant at this level".
    pub fn is_resonance(&self) -> bool {
        matches!(
            self,
            SpectraError::NoneInInterval { .. }
                | SpectraError::ResonantCollision { .. }
                | SpectraError::SmallDenominator { .. }
                | SpectraError::EigenvalueOnContour { .. }
                | SpectraError::MultipleInside { .. }
                | SpectraError::SeriesDiverged { .. }
        )
    }
}

/// Ascending eigenvalues and matching unit eigenvectors (columns).
#[derive(Clone, Debug)]
pub struct HermitianEigen {
    pub values: Vec<f64>,
    pub vectors: DMatrix<Complex64>,
}

pub fn hermitian_eigen(a: &DMatrix<Complex64>) -> HermitianEigen {
    let n = a.nrows();
    if n == 1 {
        return HermitianEigen {
            values: vec![a[(0, 0)].re],
            vectors: DMatrix::identity(1, 1),
        };
    }
    let diagonal = (0..n).all(|i| (0..n).all(|j| i == j || a[(i, j)] == Complex64::new(0.0, 0.0)));
    if diagonal {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| a[(i, i)].re.total_cmp(&a[(j, j)].re));
        let values = order.iter().map(|&i| a[(i, i)].re).collect();
        let vectors = DMatrix::from_fn(n, n, |r, c| {
            if r == order[c] {
                Complex64::new(1.0, 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        });
        return HermitianEigen { values, vectors };
    }
    let eig = SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    HermitianEigen { values, vectors }
}

/// Rotate so the largest-magnitude entry is real positive.
pub fn fix_phase(v: &mut DVector<Complex64>) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].norm() > v[best].norm() {
            best = i;
        }
    }
    let z = v[best];
    if z.norm() > 0.0 {
        let phase = z.conj() / z.norm();
        for x in v.iter_mut() {
            *x *= phase;
        }
        v[best] = Complex64::new(v[best].re, 0.0);
    }
}

#[derive(Clone, Debug)]
pub struct EigenPair {
    pub lambda: f64,
    pub vector: DVector<Complex64>,
    pub indexset: IndexProjector,
    pub level: u32,
    pub residual: f64,
}

impl EigenPair {
    pub fn component(&self, m: &LatticeIndex) -> Complex64 {
        self.indexset
            .position(m)
            .map(|i| self.vector[i])
            .unwrap_or_default()
    }

    /// E = v v*.
    pub fn projection(&self) -> DMatrix<Complex64> {
        &self.vector * self.vector.adjoint()
    }
}

/// The unique eigenpair with |λ − center| < half_width.
pub fn eigenvalue_in_interval(
    h: &FiberMatrix,
    center: f64,
    half_width: f64,
    level: u32,
) -> Result<EigenPair, SpectraError> {
    if !(half_width > 0.0) {
        return Err(SpectraError::BadWidth(half_width));
    }
    let scale = h.max_abs().max(1.0);
    let herm = h.hermiticity_residual();
    if herm > 1e-12 * scale {
        return Err(SpectraError::NotHermitian(herm));
    }
    let eig = hermitian_eigen(&h.entries);
    let hits: Vec<usize> = (0..eig.values.len())
        .filter(|&i| (eig.values[i] - center).abs() < half_width)
        .collect();
    match hits.len() {
        0 => Err(SpectraError::NoneInInterval { center, half_width }),
        1 => {
            let i = hits[0];
            let lambda = eig.values[i];
            let mut vector = eig.vectors.column(i).into_owned();
            fix_phase(&mut vector);
            let residual = (&h.entries * &vector - &vector * Complex64::new(lambda, 0.0)).norm();
            Ok(EigenPair {
                lambda,
                vector,
                indexset: h.indexset.clone(),
                level,
                residual,
            })
        }
        count => Err(SpectraError::ResonantCollision {
            count,
            center,
            half_width,
        }),
    }
}

/// Eigenvalue-only variant of `eigenvalue_in_interval`.
pub fn eigenvalue_in_interval_value(h: &FiberMatrix, center: f64, half_width: f64) -> Result<f64, SpectraError> {
    if !(half_width > 0.0) {
        return Err(SpectraError::BadWidth(half_width));
    }
    let scale = h.max_abs().max(1.0);
    let herm = h.hermiticity_residual();
    if herm > 1e-12 * scale {
        return Err(SpectraError::NotHermitian(herm));
    }
    let n = h.dim();
    let diagonal = (0..n).all(|i| (0..n).all(|j| i == j || h.entries[(i, j)] == Complex64::new(0.0, 0.0)));
    let values: Vec<f64> = if diagonal {
        (0..n).map(|i| h.entries[(i, i)].re).collect()
    } else {
        h.entries.clone().symmetric_eigenvalues().iter().copied().collect()
    };
    let hits: Vec<f64> = values.into_iter().filter(|v| (v - center).abs() < half_width).collect();
    match hits.as_slice() {
        [] => Err(SpectraError::NoneInInterval { center, half_width }),
        [v] => Ok(*v),
        _ => Err(SpectraError::ResonantCollision {
            count: hits.len(),
            center,
            half_width,
        }),
    }
}

/// Σ_q |V_q|² (|κ|^{2l} − |κ+p_q|^{2l})⁻¹ over q ∈ proj \ {0}, checked against
/// the symmetrized form.
pub fn g2_explicit(
    lat: &QuasiLattice,
    pot: &TrigPotential,
    kappa: [f64; 2],
    l: u32,
    proj: &IndexProjector,
) -> Result<f64, SpectraError> {
    let a = free_energy(lat, kappa, l, &LatticeIndex::ZERO);
    let mut first = 0.0;
    let mut second = 0.0;
    for (q, v) in pot.terms() {
        if !proj.contains(q) {
            continue;
        }
        let ap = free_energy(lat, kappa, l, q);
        let am = free_energy(lat, kappa, l, &-*q);
        for (idx, d) in [(*q, a - ap), (-*q, a - am)] {
            if d.abs() < 1e-8 * a {
                return Err(SpectraError::SmallDenominator {
                    q: idx,
                    denominator: d,
                });
            }
        }
        let w = v.norm_sqr();
        first += w / (a - ap);
        second += -0.5 * w * (ap + am - 2.0 * a) / ((a - ap) * (a - am));
    }
    let scale = first.abs().max(second.abs());
    if (first - second).abs() > 1e-10 * scale {
        return Err(SpectraError::FormMismatch { first, second });
    }
    Ok(first)
}

/// A Hermitian matrix together with a partition of its indices into decoupled blocks.
#[derive(Clone, Debug)]
pub struct BlockOperator {
    pub matrix: DMatrix<Complex64>,
    pub blocks: Vec<Vec<usize>>,
}

impl BlockOperator {
    pub fn new(matrix: DMatrix<Complex64>, blocks: Vec<Vec<usize>>) -> Result<Self, SpectraError> {
        let n = matrix.nrows();
        let mut owner = vec![usize::MAX; n];
        for (b, idx) in blocks.iter().enumerate() {
            for &i in idx {
                assert!(owner[i] == usize::MAX, "index {i} in two blocks");
                owner[i] = b;
            }
        }
        assert!(owner.iter().all(|&o| o != usize::MAX), "blocks must cover all indices");
        for i in 0..n {
            for j in 0..n {
                if owner[i] != owner[j] && matrix[(i, j)].norm() != 0.0 {
                    return Err(SpectraError::BlockCoupling { row: i, col: j });
                }
            }
        }
        Ok(Self { matrix, blocks })
    }

    /// Every index is its own block; off-diagonal entries must vanish.
    pub fn diagonal(matrix: DMatrix<Complex64>) -> Result<Self, SpectraError> {
        let n = matrix.nrows();
        Self::new(matrix, (0..n).map(|i| vec![i]).collect())
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Eigenvalues and the global unitary assembled from per-block eigensolves.
    pub fn diagonalize(&self) -> (Vec<f64>, DMatrix<Complex64>) {
        let n = self.dim();
        let mut values = vec![0.0; n];
        let mut u = DMatrix::<Complex64>::zeros(n, n);
        for idx in &self.blocks {
            let sub = DMatrix::from_fn(idx.len(), idx.len(), |a, b| self.matrix[(idx[a], idx[b])]);
            let eig = hermitian_eigen(&sub);
            for (c, &col) in idx.iter().enumerate() {
                values[col] = eig.values[c];
                for (r, &row) in idx.iter().enumerate() {
                    u[(row, col)] = eig.vectors[(r, c)];
                }
            }
        }
        (values, u)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SeriesReport {
    /// terms[r-1] = g_r; terms[0] is g₁.
    pub terms: Vec<f64>,
    pub r_max: usize,
    pub tail_bound: f64,
    /// Geometric tail estimate alone.
    pub truncation_tail: f64,
    /// Floating-point floor folded into `tail_bound`.
    pub roundoff: f64,
    pub ratio: f64,
    pub converged: bool,
    pub center_eigenvalue: Option<f64>,
}

impl SeriesReport {
    pub fn sum(&self) -> f64 {
        self.terms.iter().sum()
    }

    /// Unperturbed eigenvalue plus the series, when one eigenvalue is inside.
    pub fn eigenvalue(&self) -> Option<f64> {
        self.center_eigenvalue.map(|c| c + self.sum())
    }

    pub fn g(&self, r: usize) -> f64 {
        self.terms.get(r - 1).copied().unwrap_or(0.0)
    }
}

struct Expansion {
    mu0: Option<f64>,
    inner: usize,
    values: Vec<f64>,
    u: DMatrix<Complex64>,
    wt: DMatrix<Complex64>,
}

fn expansion(
    htilde: &BlockOperator,
    w: &DMatrix<Complex64>,
    center: f64,
    radius: f64,
) -> Result<Expansion, SpectraError> {
    let (values, u) = htilde.diagonalize();
    let tol = 1e-12 * center.abs().max(radius).max(1.0);
    let mut inside = Vec::new();
    for (i, &mu) in values.iter().enumerate() {
        let d = (mu - center).abs();
        if (d - radius).abs() <= tol {
            return Err(SpectraError::EigenvalueOnContour {
                eigenvalue: mu,
                center,
                radius,
            });
        }
        if d < radius {
            inside.push(i);
        }
    }
    if inside.len() > 1 {
        return Err(SpectraError::MultipleInside {
            count: inside.len(),
        });
    }
    let wt = u.adjoint() * w * &u;
    Ok(Expansion {
        mu0: inside.first().map(|&i| values[i]),
        inner: inside.first().copied().unwrap_or(0),
        values,
        u,
        wt,
    })
}

/// Eigenbasis coefficients ψ_r and energies E_r of the Rayleigh–Schrödinger
/// recursion for H̃ + tW at the interior eigenvalue.
fn rs_recursion(e: &Expansion, r_max: usize, stop_rel: Option<f64>) -> (Vec<f64>, Vec<DVector<Complex64>>) {
    let n = e.values.len();
    let mu0 = e.mu0.expect("caller checked an eigenvalue is inside");
    let i0 = e.inner;
    let mut psi = vec![DVector::<Complex64>::zeros(n)];
    psi[0][i0] = Complex64::new(1.0, 0.0);
    let mut energies: Vec<Complex64> = vec![Complex64::new(0.0, 0.0)];
    let mut out = Vec::new();
    for r in 1..=r_max {
        let wpsi = &e.wt * &psi[r - 1];
        let er = wpsi[i0];
        energies.push(er);
        out.push(er.re);
        let mut rhs = -wpsi;
        for j in 1..r {
            rhs += &psi[r - j] * energies[j];
        }
        let mut next = DVector::<Complex64>::zeros(n);
        for i in 0..n {
            if i != i0 {
                next[i] = rhs[i] / (e.values[i] - mu0);
            }
        }
        psi.push(next);
        if let Some(rel) = stop_rel {
            let floor = rel * (mu0 + out.iter().sum::<f64>()).abs();
            if r >= 2 && er.norm() < floor && energies[r - 1].norm() < floor {
                break;
            }
        }
    }
    (out, psi)
}

/// g_r for r ≤ r_max by residues at the eigenvalue of H̃ inside |z − center| = radius.
pub fn series_terms(
    htilde: &BlockOperator,
    w: &DMatrix<Complex64>,
    center: f64,
    radius: f64,
    r_max: usize,
) -> Result<SeriesReport, SpectraError> {
    let e = expansion(htilde, w, center, radius)?;
    let n = e.values.len();
    let Some(mu0) = e.mu0 else {
        return Ok(SeriesReport {
            terms: vec![0.0; r_max],
            r_max,
            tail_bound: 0.0,
            truncation_tail: 0.0,
            roundoff: 0.0,
            ratio: 0.0,
            converged: true,
            center_eigenvalue: None,
        });
    };
    let (terms, _) = rs_recursion(&e, r_max, Some(1e-14));
    let nonzero: Vec<usize> = (0..terms.len()).filter(|&i| terms[i] != 0.0).collect();
    let (ratio, last) = match nonzero.as_slice() {
        [] => (0.0, 0.0),
        [only] => (0.0, terms[*only].abs()),
        [.., a, b] => {
            let gap = (b - a) as f64;
            ((terms[*b].abs() / terms[*a].abs()).powf(1.0 / gap), terms[*b].abs())
        }
    };
    let converged = ratio < 1.0;
    let truncation_tail = if converged {
        last * ratio / (1.0 - ratio)
    } else {
        f64::INFINITY
    };
    let spectral = e.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let wmax = w.iter().fold(0.0f64, |m, z| m.max(z.norm()));
    let roundoff = 16.0 * n as f64 * f64::EPSILON * (spectral + n as f64 * wmax);
    Ok(SeriesReport {
        terms,
        r_max,
        tail_bound: truncation_tail + roundoff,
        truncation_tail,
        roundoff,
        ratio,
        converged,
        center_eigenvalue: Some(mu0),
    })
}

/// Taylor coefficients G_r of the spectral projection of H̃ + tW at t = 0, in
/// the original basis.
pub fn projection_series(
    htilde: &BlockOperator,
    w: &DMatrix<Complex64>,
    center: f64,
    radius: f64,
    r_max: usize,
) -> Result<Vec<DMatrix<Complex64>>, SpectraError> {
    let e = expansion(htilde, w, center, radius)?;
    let n = e.values.len();
    if e.mu0.is_none() {
        return Ok(vec![DMatrix::zeros(n, n); r_max + 1]);
    }
    let (_, psi_eig) = rs_recursion(&e, r_max, None);
    let psi: Vec<DVector<Complex64>> = psi_eig.iter().map(|p| &e.u * p).collect();
    // ⟨ψ(t), ψ(t)⟩ and its reciprocal as power series.
    let norm: Vec<Complex64> = (0..=r_max)
        .map(|r| (0..=r).map(|a| psi[a].dotc(&psi[r - a])).sum())
        .collect();
    let mut inv = vec![Complex64::new(0.0, 0.0); r_max + 1];
    inv[0] = Complex64::new(1.0, 0.0) / norm[0];
    for r in 1..=r_max {
        let s: Complex64 = (1..=r).map(|j| norm[j] * inv[r - j]).sum();
        inv[r] = -s / norm[0];
    }
    let mut out = Vec::with_capacity(r_max + 1);
    for r in 0..=r_max {
        let mut g = DMatrix::<Complex64>::zeros(n, n);
        for c in 0..=r {
            if inv[c] == Complex64::new(0.0, 0.0) {
                continue;
            }
            for a in 0..=(r - c) {
                let b = r - c - a;
                g += (&psi[a] * psi[b].adjoint()) * inv[c];
            }
        }
        out.push(g);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct FeshbachShift {
    /// λ − H₀₀
    pub shift: f64,
    /// λ − H₀₀ − g₂, computed without cancellation.
    pub remainder: f64,
    pub g2: f64,
    pub iterations: usize,
}

/// Solve ((d₀ + s) − A) z = y by Jacobi sweeps on the diagonally dominant complement.
fn jacobi_solve(
    diag: &[f64],
    off: &[Vec<(usize, Complex64)>],
    shift: f64,
    y: &[Complex64],
) -> Result<Vec<Complex64>, SpectraError> {
    let n = diag.len();
    let denom: Vec<f64> = diag.iter().map(|d| shift - d).collect();
    for i in 0..n {
        let row: f64 = off[i].iter().map(|(_, v)| v.norm()).sum();
        if row >= 0.5 * denom[i].abs() {
            return Err(SpectraError::NotDominant);
        }
    }
    let mut z: Vec<Complex64> = (0..n).map(|i| y[i] / denom[i]).collect();
    for _ in 0..200 {
        let next: Vec<Complex64> = (0..n)
            .map(|i| {
                let mut acc = y[i];
                for (j, v) in &off[i] {
                    acc += v * z[*j];
                }
                acc / denom[i]
            })
            .collect();
        let change = next
            .iter()
            .zip(&z)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        let size = next.iter().map(|a| a.norm()).fold(0.0, f64::max);
        z = next;
        if change <= 1e-17 * size || change == 0.0 {
            break;
        }
    }
    Ok(z)
}

/// Feshbach reduction onto index `i0`: λ = d₀ + b*(λ − A)⁻¹b, iterated to a fixed point.
pub fn feshbach_shift(h: &DMatrix<Complex64>, i0: usize) -> Result<FeshbachShift, SpectraError> {
    let n = h.nrows();
    let rest: Vec<usize> = (0..n).filter(|&i| i != i0).collect();
    let d0 = h[(i0, i0)].re;
    let diag: Vec<f64> = rest.iter().map(|&i| h[(i, i)].re).collect();
    let b: Vec<Complex64> = rest.iter().map(|&i| h[(i, i0)]).collect();
    let off: Vec<Vec<(usize, Complex64)>> = rest
        .iter()
        .map(|&i| {
            rest.iter()
                .enumerate()
                .filter(|&(_, &j)| j != i && h[(i, j)].norm() != 0.0)
                .map(|(jj, &j)| (jj, h[(i, j)]))
                .collect()
        })
        .collect();
    let quad = |z: &[Complex64]| -> f64 { b.iter().zip(z).map(|(bi, zi)| (bi.conj() * zi).re).sum() };
    let u: Vec<Complex64> = b.iter().zip(&diag).map(|(bi, d)| bi / (d0 - d)).collect();
    let g2 = quad(&u);
    let mut s = g2;
    let mut iterations = 0;
    for it in 1..=100 {
        iterations = it;
        let z = jacobi_solve(&diag, &off, d0 + s, &b)?;
        let next = quad(&z);
        let done = (next - s).abs() <= 1e-16 * next.abs() || next == s;
        s = next;
        if done {
            break;
        }
    }
    // Δ = −b*(λ − A)⁻¹ (s − O) (d₀ − D)⁻¹ b
    let y: Vec<Complex64> = (0..rest.len())
        .map(|i| {
            let mut acc = u[i] * s;
            for (j, v) in &off[i] {
                acc -= v * u[*j];
            }
            acc
        })
        .collect();
    let z = jacobi_solve(&diag, &off, d0 + s, &y)?;
    let remainder = -quad(&z);
    Ok(FeshbachShift {
        shift: s,
        remainder,
        g2,
        iterations,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct DecayReport {
    /// (|||p_s|||, log|E_{0s}|) for s ≠ 0 with E_{0s} ≠ 0.
    pub rows: Vec<(f64, f64)>,
    pub fitted_rate: f64,
    /// −(2l − 1 − 44μδ) ln k / Q, the slope of the reference bound with C = 1.
    pub reference_rate: f64,
    pub zero_entries: usize,
}

/// log|E_{0s}| against |||p_s||| and its least-squares slope.
pub fn projection_decay_report(
    pair: &EigenPair,
    q_radius: f64,
    l: u32,
    mu: f64,
    delta: f64,
    k: f64,
) -> DecayReport {
    let v0 = pair.component(&LatticeIndex::ZERO);
    let mut rows = Vec::new();
    let mut zero_entries = 0;
    for (i, s) in pair.indexset.members().iter().enumerate() {
        if s.is_zero() {
            continue;
        }
        let e = (v0 * pair.vector[i].conj()).norm();
        if e > 0.0 {
            rows.push((s.norm_triple(), e.ln()));
        } else {
            zero_entries += 1;
        }
    }
    DecayReport {
        fitted_rate: least_squares_slope(&rows),
        reference_rate: -(2.0 * l as f64 - 1.0 - 44.0 * mu * delta) * k.ln() / q_radius,
        rows,
        zero_entries,
    }
}

pub fn least_squares_slope(rows: &[(f64, f64)]) -> f64 {
    let n = rows.len() as f64;
    if rows.len() < 2 {
        return f64::NAN;
    }
    let mx = rows.iter().map(|r| r.0).sum::<f64>() / n;
    let my = rows.iter().map(|r| r.1).sum::<f64>() / n;
    let sxy: f64 = rows.iter().map(|r| (r.0 - mx) * (r.1 - my)).sum();
    let sxx: f64 = rows.iter().map(|r| (r.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// ‖(PHP − z)⁻¹‖ via the block spectrum; `f64::INFINITY` when z is an eigenvalue.
pub fn resolvent_norm(h: &FiberMatrix, z: Complex64, proj: &IndexProjector) -> Result<f64, SpectraError> {
    let sub = restrict(h, proj)?;
    let n = sub.dim();
    let scale = sub.max_abs().max(1.0);
    let smallest = if hermiticity_residual(&sub.entries) <= 1e-12 * scale {
        let eig = hermitian_eigen(&sub.entries);
        eig.values
            .iter()
            .map(|&l| (Complex64::new(l, 0.0) - z).norm())
            .fold(f64::INFINITY, f64::min)
    } else {
        let shifted = &sub.entries - DMatrix::<Complex64>::identity(n, n) * z;
        let sv = shifted.singular_values();
        sv.iter().copied().fold(f64::INFINITY, f64::min)
    };
    Ok(if smallest == 0.0 { f64::INFINITY } else { 1.0 / smallest })
}

#[derive(Clone, Debug, Serialize)]
pub struct ResidualReport {
    pub residual_coeffs: Vec<(LatticeIndex, Complex64)>,
    pub support_ok: bool,
    pub l1_norm: f64,
    pub linf_function_norm_bound: f64,
}

/// ((I − P) V P) v for the eigenvector v on P = Ω(boundary_radius).
pub fn eigenfunction_residual(
    pair: &EigenPair,
    pot: &TrigPotential,
    boundary_radius: f64,
) -> ResidualReport {
    let mut acc: BTreeMap<LatticeIndex, Complex64> = BTreeMap::new();
    for (n, vn) in pair.indexset.members().iter().zip(pair.vector.iter()) {
        for (q, vq) in pot.terms() {
            let s = *n + *q;
            if !pair.indexset.contains(&s) {
                *acc.entry(s).or_default() += vq * vn;
            }
        }
    }
    let residual_coeffs: Vec<(LatticeIndex, Complex64)> =
        acc.into_iter().filter(|(_, c)| c.norm() != 0.0).collect();
    let lo = boundary_radius;
    let hi = boundary_radius + pot.q_radius();
    let support_ok = residual_coeffs.iter().all(|(s, _)| {
        let n = s.norm_triple();
        n > lo * (1.0 + NORM_SLACK) && n <= hi * (1.0 + NORM_SLACK)
    });
    let l1_norm: f64 = residual_coeffs.iter().map(|(_, c)| c.norm()).sum();
    ResidualReport {
        residual_coeffs,
        support_ok,
        l1_norm,
        linf_function_norm_bound: l1_norm,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ResidualIdentity {
    /// max over s ∉ P of |(H_larger v − λ v)_s − residual_s|
    pub outside_mismatch: f64,
    /// max over s ∈ P of |(H_larger v − λ v)_s|
    pub inside_residual: f64,
    pub scale: f64,
}

/// Build H on Ω(R + Q), apply it to the zero-extended eigenvector and compare
/// with the residual coefficients.
pub fn residual_identity(
    lat: &QuasiLattice,
    pot: &TrigPotential,
    pair: &EigenPair,
    kappa: [f64; 2],
    l: u32,
    boundary_radius: f64,
    report: &ResidualReport,
) -> Result<ResidualIdentity, SpectraError> {
    let larger = IndexProjector::ball("P(R+Q)", boundary_radius + pot.q_radius());
    let h = build_fiber(lat, pot, real_kappa(kappa), l, &larger)?;
    let mut v = DVector::<Complex64>::zeros(larger.len());
    for (m, c) in pair.indexset.members().iter().zip(pair.vector.iter()) {
        if let Some(i) = larger.position(m) {
            v[i] = *c;
        }
    }
    let r = &h.entries * &v - &v * Complex64::new(pair.lambda, 0.0);
    let coeffs: BTreeMap<LatticeIndex, Complex64> = report.residual_coeffs.iter().copied().collect();
    let mut outside: f64 = 0.0;
    let mut inside: f64 = 0.0;
    for (i, m) in larger.members().iter().enumerate() {
        if pair.indexset.contains(m) {
            inside = inside.max(r[i].norm());
        } else {
            let expect = coeffs.get(m).copied().unwrap_or_default();
            outside = outside.max((r[i] - expect).norm());
        }
    }
    // Indices of the residual that fall outside Ω(R + Q) would break the identity.
    for (s, c) in &report.residual_coeffs {
        if !larger.contains(s) {
            outside = outside.max(c.norm());
        }
    }
    Ok(ResidualIdentity {
        outside_mismatch: outside,
        inside_residual: inside,
        scale: pot.l1_norm() * pair.vector.iter().map(|c| c.norm()).sum::<f64>(),
    })
}

/// Ψ(x) = Σ_s v_s exp(i⟨κ + p_s, x⟩).
pub fn evaluate_psi(
    pair: &EigenPair,
    lat: &QuasiLattice,
    kappa: [f64; 2],
    xs: &[[f64; 2]],
) -> Vec<Complex64> {
    let waves: Vec<([f64; 2], Complex64)> = pair
        .indexset
        .members()
        .iter()
        .zip(pair.vector.iter())
        .map(|(m, c)| {
            let [px, py] = lat.p_xy(m);
            ([kappa[0] + px, kappa[1] + py], *c)
        })
        .collect();
    xs.iter()
        .map(|x| {
            waves
                .iter()
                .map(|(k, c)| c * Complex64::from_polar(1.0, k[0] * x[0] + k[1] * x[1]))
                .sum()
        })
        .collect()
}

/// H̃ = H₀ and W = V on P, the unperturbed split used at the first step.
pub fn step_one_split(
    lat: &QuasiLattice,
    pot: &TrigPotential,
    kappa: [f64; 2],
    l: u32,
    proj: &IndexProjector,
) -> Result<(FiberMatrix, BlockOperator, DMatrix<Complex64>), SpectraError> {
    let h = build_fiber(lat, pot, real_kappa(kappa), l, proj)?;
    let n = h.dim();
    let h0 = DMatrix::from_fn(n, n, |i, j| if i == j { h.entries[(i, i)] } else { Complex64::new(0.0, 0.0) });
    let w = &h.entries - &h0;
    Ok((h, BlockOperator::diagonal(h0)?, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::real_kappa;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(x: f64) -> Complex64 {
        Complex64::new(x, 0.0)
    }

    /// First φ on a 0.01 grid from `start` where every other diagonal entry sits
    /// at least `gap` away from k^{2l}.
    fn quiet_phi(lat: &QuasiLattice, k: f64, l: u32, radius: f64, gap: f64, start: f64) -> [f64; 2] {
        let ms = crate::lattice::enumerate_indices(radius);
        let target = k.powi(2 * l as i32);
        (0..)
            .map(|j| start + 0.01 * j as f64)
            .map(|phi| [k * phi.cos(), k * phi.sin()])
            .find(|kappa| {
                ms.iter()
                    .filter(|m| !m.is_zero())
                    .all(|m| (free_energy(lat, *kappa, l, m) - target).abs() > gap)
            })
            .unwrap()
    }

    fn harmonic(amp: f64) -> TrigPotential {
        TrigPotential::single_harmonic(1.0, LatticeIndex::new([1, 0], [0, 0]), c(amp)).unwrap()
    }

    #[test]
    fn free_eigenpair() {
        let lat = QuasiLattice::golden();
        let proj = IndexProjector::ball("P", 1.0);
        let h = build_fiber(&lat, &TrigPotential::zero(1.0), real_kappa([2.0, 0.0]), 2, &proj).unwrap();
        let pair = eigenvalue_in_interval(&h, 16.0, 1.0, 1).unwrap();
        assert_eq!(pair.lambda, 16.0);
        assert_eq!(pair.component(&LatticeIndex::ZERO), c(1.0));
    }

    #[test]
    fn degenerate_collision() {
        let lat = QuasiLattice::new(crate::lattice::Alpha::from_decimal("0.5", 60).unwrap(), 2.0);
        // κ = (−π, 0) and p_m = (2π, 0) give |κ| = |κ + p_m|.
        let m = LatticeIndex::new([1, 0], [0, 0]);
        let proj = IndexProjector::new("P", [LatticeIndex::ZERO, m]);
        let k = -std::f64::consts::PI;
        let h = build_fiber(&lat, &TrigPotential::zero(1.0), real_kappa([k, 0.0]), 2, &proj).unwrap();
        let err = eigenvalue_in_interval(&h, k.powi(4), 1.0, 1).unwrap_err();
        assert!(matches!(err, SpectraError::ResonantCollision { count: 2, .. }));
        assert!(err.is_resonance());
    }

    #[test]
    fn g2_pair_formula() {
        let lat = QuasiLattice::golden();
        let pot = harmonic(0.1);
        let proj = IndexProjector::ball("P", 2.0);
        let kappa = [7.0 * 0.3f64.cos(), 7.0 * 0.3f64.sin()];
        let g2 = g2_explicit(&lat, &pot, kappa, 2, &proj).unwrap();
        let q = LatticeIndex::new([1, 0], [0, 0]);
        let a = free_energy(&lat, kappa, 2, &LatticeIndex::ZERO);
        let expect = 0.01
            * (1.0 / (a - free_energy(&lat, kappa, 2, &q)) + 1.0 / (a - free_energy(&lat, kappa, 2, &-q)));
        assert!((g2 - expect).abs() < 1e-15 * expect.abs());
        assert_eq!(g2_explicit(&lat, &TrigPotential::zero(1.0), kappa, 2, &proj).unwrap(), 0.0);
    }

    #[test]
    fn g2_forms_agree_randomly() {
        let lat = QuasiLattice::golden();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let proj = IndexProjector::ball("P", 2.0);
        for _ in 0..50 {
            let terms: Vec<(LatticeIndex, Complex64)> = crate::lattice::enumerate_indices(1.5)
                .into_iter()
                .filter(|m| m.is_positive())
                .map(|m| (m, Complex64::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1))))
                .collect();
            let pot = TrigPotential::new(1.5, terms).unwrap();
            let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let k: f64 = rng.gen_range(5.0..20.0);
            match g2_explicit(&lat, &pot, [k * phi.cos(), k * phi.sin()], 2, &proj) {
                Ok(_) | Err(SpectraError::SmallDenominator { .. }) => {}
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn series_zero_perturbation() {
        let h0 = DMatrix::from_diagonal(&DVector::from_vec(vec![c(1.0), c(5.0), c(9.0)]));
        let op = BlockOperator::diagonal(h0).unwrap();
        let w = DMatrix::<Complex64>::zeros(3, 3);
        let rep = series_terms(&op, &w, 5.0, 1.0, 12).unwrap();
        assert!(rep.terms.iter().all(|&g| g == 0.0));
        assert_eq!(rep.eigenvalue(), Some(5.0));
    }

    #[test]
    fn series_on_contour_is_an_error() {
        let h0 = DMatrix::from_diagonal(&DVector::from_vec(vec![c(1.0), c(5.0)]));
        let op = BlockOperator::diagonal(h0).unwrap();
        let w = DMatrix::<Complex64>::zeros(2, 2);
        assert!(matches!(
            series_terms(&op, &w, 5.0, 4.0, 12),
            Err(SpectraError::EigenvalueOnContour { .. })
        ));
    }

    /// Trapezoid quadrature of Tr[(W R(z))^r] on the contour: an oracle for g_r
    /// that does not use residues.
    fn quadrature_g(h: &DMatrix<Complex64>, w: &DMatrix<Complex64>, center: f64, radius: f64, r: usize) -> f64 {
        let n = h.nrows();
        let npts = 4096;
        let mut acc = Complex64::new(0.0, 0.0);
        for j in 0..npts {
            let th = std::f64::consts::TAU * j as f64 / npts as f64;
            let e = Complex64::from_polar(1.0, th);
            let z = c(center) + e * radius;
            let dz = Complex64::i() * e * radius * (std::f64::consts::TAU / npts as f64);
            let res = (h - DMatrix::<Complex64>::identity(n, n) * z).try_inverse().unwrap();
            let a = w * res;
            let mut p = DMatrix::<Complex64>::identity(n, n);
            for _ in 0..r {
                p = &p * &a;
            }
            acc += p.trace() * dz;
        }
        let sign = if r % 2 == 0 { 1.0 } else { -1.0 };
        (acc * sign / (Complex64::new(0.0, std::f64::consts::TAU) * r as f64)).re
    }

    #[test]
    fn residues_match_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..6 {
            let n = 4 + trial % 3;
            let mut h = DMatrix::<Complex64>::zeros(n, n);
            for i in 0..n {
                h[(i, i)] = c(3.0 * i as f64 + rng.gen_range(-0.2..0.2));
            }
            // one 2×2 block coupling indices 1 and 2
            let t = Complex64::new(0.3, 0.2);
            h[(1, 2)] = t;
            h[(2, 1)] = t.conj();
            let mut blocks = vec![vec![0], vec![1, 2]];
            blocks.extend((3..n).map(|i| vec![i]));
            let op = BlockOperator::new(h.clone(), blocks).unwrap();
            let mut w = DMatrix::<Complex64>::zeros(n, n);
            for i in 0..n {
                for j in i..n {
                    let z = Complex64::new(rng.gen_range(-0.1..0.1), if i == j { 0.0 } else { rng.gen_range(-0.1..0.1) });
                    w[(i, j)] = z;
                    w[(j, i)] = z.conj();
                }
            }
            let center = h[(0, 0)].re;
            let rep = series_terms(&op, &w, center, 1.2, 6).unwrap();
            for r in 1..=rep.terms.len().min(5) {
                let q = quadrature_g(&h, &w, center, 1.2, r);
                assert!((rep.g(r) - q).abs() < 1e-11, "r={r}: {} vs {q}", rep.g(r));
            }
            let full = &h + &w;
            let eig = hermitian_eigen(&full);
            let direct = eig.values.iter().copied().min_by(|a, b| (a - center).abs().total_cmp(&(b - center).abs())).unwrap();
            let rep = series_terms(&op, &w, center, 1.2, 40).unwrap();
            assert!((rep.eigenvalue().unwrap() - direct).abs() <= rep.tail_bound.max(1e-13));
        }
    }

    #[test]
    fn first_term_vanishes_for_zero_mean() {
        let lat = QuasiLattice::golden();
        let proj = IndexProjector::ball("P", 2.0);
        let kappa = quiet_phi(&lat, 10.0, 2, 2.0, 200.0, 0.4);
        let (_, op, w) = step_one_split(&lat, &harmonic(0.05), kappa, 2, &proj).unwrap();
        let rep = series_terms(&op, &w, 1e4, 50.0, 12).unwrap();
        assert_eq!(rep.g(1), 0.0);
        assert_eq!(rep.g(3), 0.0);
        let g2 = g2_explicit(&lat, &harmonic(0.05), kappa, 2, &proj).unwrap();
        assert!((rep.g(2) - g2).abs() < 1e-14 * g2.abs());
    }

    #[test]
    fn feshbach_agrees_with_series_and_eigensolve() {
        let lat = QuasiLattice::golden();
        let proj = IndexProjector::ball("P", 2.0);
        let kappa = quiet_phi(&lat, 10.0, 2, 2.0, 200.0, 1.1);
        let pot = harmonic(0.1);
        let (h, op, w) = step_one_split(&lat, &pot, kappa, 2, &proj).unwrap();
        let i0 = proj.position(&LatticeIndex::ZERO).unwrap();
        let f = feshbach_shift(&h.entries, i0).unwrap();
        let rep = series_terms(&op, &w, 1e4, 50.0, 12).unwrap();
        let beyond: f64 = rep.terms.iter().skip(2).sum();
        assert!((f.remainder - beyond).abs() <= 1e-6 * beyond.abs(), "{} vs {beyond}", f.remainder);
        let pair = eigenvalue_in_interval(&h, 1e4, 50.0, 1).unwrap();
        assert!((pair.lambda - (1e4 + f.shift)).abs() < 1e-9);
    }

    #[test]
    fn projection_idempotent_and_series_sparse() {
        let lat = QuasiLattice::golden();
        let proj = IndexProjector::ball("P", 2.0);
        let kappa = quiet_phi(&lat, 10.0, 2, 2.0, 200.0, 0.9);
        let pot = harmonic(0.1);
        let (h, op, w) = step_one_split(&lat, &pot, kappa, 2, &proj).unwrap();
        let pair = eigenvalue_in_interval(&h, 1e4, 50.0, 1).unwrap();
        let e = pair.projection();
        assert!((&e * &e - &e).norm() < 1e-12);
        assert!((e.trace().re - 1.0).abs() < 1e-12);
        let g = projection_series(&op, &w, 1e4, 50.0, 6).unwrap();
        let norms: Vec<f64> = proj.members().iter().map(|m| m.norm_triple()).collect();
        let mut partial = DMatrix::<Complex64>::zeros(proj.len(), proj.len());
        for (r, gr) in g.iter().enumerate() {
            partial += gr;
            for i in 0..proj.len() {
                for j in 0..proj.len() {
                    if (r as f64) * 1.0 < norms[i] + norms[j] - 1e-12 {
                        assert_eq!(partial[(i, j)], c(0.0), "r={r} ({i},{j})");
                    }
                }
            }
        }
        assert!((&partial - &e).norm() < 1e-8);
    }

    #[test]
    fn decay_report_cases() {
        let lat = QuasiLattice::golden();
        let proj = IndexProjector::ball("P", 3.0);
        let kappa = quiet_phi(&lat, 10.0, 2, 3.0, 200.0, 0.9);
        let h = build_fiber(&lat, &TrigPotential::zero(1.0), real_kappa(kappa), 2, &proj).unwrap();
        let pair = eigenvalue_in_interval(&h, 1e4, 50.0, 1).unwrap();
        let rep = projection_decay_report(&pair, 1.0, 2, 2.0, 0.0, 10.0);
        assert!(rep.rows.is_empty());
        let q2 = LatticeIndex::new([0, 1], [0, 0]);
        let pot = TrigPotential::new(1.0, [(LatticeIndex::new([1, 0], [0, 0]), c(0.05)), (q2, c(0.05))]).unwrap();
        let h = build_fiber(&lat, &pot, real_kappa(kappa), 2, &proj).unwrap();
        let pair = eigenvalue_in_interval(&h, 1e4, 50.0, 1).unwrap();
        let rep = projection_decay_report(&pair, 1.0, 2, 2.0, 0.0, 10.0);
        assert!(rep.fitted_rate < 0.0);
    }

    #[test]
    fn resolvent_norm_cases() {
        let lat = QuasiLattice::golden();
        let p0 = IndexProjector::new("0", [LatticeIndex::ZERO]);
        let h = build_fiber(&lat, &TrigPotential::zero(1.0), real_kappa([2.0, 0.0]), 2, &p0).unwrap();
        assert_eq!(resolvent_norm(&h, c(10.0), &p0).unwrap(), 1.0 / 6.0);
        assert_eq!(resolvent_norm(&h, c(16.0), &p0).unwrap(), f64::INFINITY);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let proj = IndexProjector::ball("P", 1.0);
        for _ in 0..10 {
            let pot = TrigPotential::new(
                1.0,
                [(LatticeIndex::new([1, 0], [0, 0]), Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))],
            )
            .unwrap();
            let h = build_fiber(&lat, &pot, real_kappa([rng.gen_range(0.0..3.0), 0.5]), 2, &proj).unwrap();
            let z = Complex64::new(rng.gen_range(0.0..50.0), rng.gen_range(-1.0..1.0));
            let n = h.dim();
            let inv = (&h.entries - DMatrix::<Complex64>::identity(n, n) * z).try_inverse().unwrap();
            let oracle = inv.singular_values().max();
            let got = resolvent_norm(&h, z, &proj).unwrap();
            assert!((got - oracle).abs() < 1e-8 * oracle);
        }
    }

    #[test]
    fn residual_and_psi() {
        let lat = QuasiLattice::golden();
        let kappa = quiet_phi(&lat, 10.0, 2, 4.0, 200.0, 0.9);
        let r = 2.0;
        let proj = IndexProjector::ball("P", r);
        let free = build_fiber(&lat, &TrigPotential::zero(1.0), real_kappa(kappa), 2, &proj).unwrap();
        let pair = eigenvalue_in_interval(&free, 1e4, 50.0, 1).unwrap();
        let rep = eigenfunction_residual(&pair, &TrigPotential::zero(1.0), r);
        assert!(rep.residual_coeffs.is_empty() && rep.support_ok);
        let psi = evaluate_psi(&pair, &lat, kappa, &[[0.0, 0.0], [1.0, -2.0]]);
        assert!(psi.iter().all(|z| (z.norm() - 1.0).abs() < 1e-14));

        let pot = harmonic(0.1);
        let mut l1 = Vec::new();
        for radius in [1.0, 2.0, 3.0] {
            let proj = IndexProjector::ball("P", radius);
            let h = build_fiber(&lat, &pot, real_kappa(kappa), 2, &proj).unwrap();
            let pair = eigenvalue_in_interval(&h, 1e4, 50.0, 1).unwrap();
            let rep = eigenfunction_residual(&pair, &pot, radius);
            assert!(rep.support_ok);
            let id = residual_identity(&lat, &pot, &pair, kappa, 2, radius, &rep).unwrap();
            assert!(id.outside_mismatch <= 1e-15 * id.scale.max(1.0));
            l1.push(rep.l1_norm);
            let xs: Vec<[f64; 2]> = (0..20).map(|i| [0.37 * i as f64, -0.21 * i as f64]).collect();
            let vals = evaluate_psi(&pair, &lat, kappa, &xs);
            let tail: f64 = pair
                .indexset
                .members()
                .iter()
                .zip(pair.vector.iter())
                .filter(|(m, _)| !m.is_zero())
                .map(|(_, c)| c.norm())
                .sum();
            let v0 = pair.component(&LatticeIndex::ZERO);
            for (x, v) in xs.iter().zip(vals) {
                let plane = Complex64::from_polar(1.0, kappa[0] * x[0] + kappa[1] * x[1]);
                assert!((v - plane * v0).norm() <= tail + 1e-12);
            }
            let sum: Complex64 = pair.vector.iter().sum();
            assert!((evaluate_psi(&pair, &lat, kappa, &[[0.0, 0.0]])[0] - sum).norm() < 1e-14);
        }
        assert!(l1[0] > l1[1] && l1[1] > l1[2], "{l1:?}");
    }
}
