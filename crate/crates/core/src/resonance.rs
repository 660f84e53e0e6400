//! Resonant angle sets: complex discs in φ around the zeros of the level
//! determinants, and the surviving real arcs.

use std::f64::consts::{PI, TAU};
use std::fmt;

use nalgebra::{DMatrix, LU};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::lattice::{enumerate_indices, reduce_angle, LatticeIndex, QuasiLattice};
use crate::operator::{build_fiber, polar_kappa, real_kappa, IndexProjector, OperatorError, TrigPotential};
use crate::spectra::hermitian_eigen;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ResonanceError {
    #[error("|f| on the contour |z - {center}| = {radius} drops below the zero floor")]
    ContourThroughZero { center: Complex64, radius: f64 },
    #[error("winding number did not settle with {points} quadrature points")]
    WindingNotConverged { points: usize },
    #[error("{count} zeros in one disc is more than the moment solver handles")]
    TooManyZeros { count: i64 },
    #[error("negative winding {0}: the function has poles inside the disc")]
    NegativeWinding(i64),
    #[error("Newton refinement did not converge near {0}")]
    NewtonFailed(Complex64),
    #[error("local multiplicities sum to {found}, winding is {winding}")]
    InconsistentMultiplicity { found: i64, winding: i64 },
    #[error("radius must be positive, got {0}")]
    BadRadius(f64),
    #[error("window {window}, block {block}: {source}")]
    Scan {
        window: usize,
        block: usize,
        source: Box<ResonanceError>,
    },
    #[error(transparent)]
    Operator(#[from] OperatorError),
}

impl ResonanceError {
    /// A contour passed through a zero, possibly inside a window scan.
    pub fn is_degenerate(&self) -> bool {
        match self {
            ResonanceError::ContourThroughZero { .. } => true,
            ResonanceError::Scan { source, .. } => source.is_degenerate(),
            _ => false,
        }
    }
}

/// Which contour constant multiplies k^{2l−1−40μδ} in the level-1 interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ContourConstant {
    #[default]
    TauL,
    TauPowL,
}

/// Right-hand side of the level-1 resonance inequality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdMode {
    /// τk^{1−40μδ} for |||p_m||| ≤ k^δ and τk^{−40μδ} beyond.
    Paper {
        tau: f64,
        delta: f64,
        #[serde(default)]
        contour: ContourConstant,
    },
    /// One explicit threshold for every m.
    Desk { t_res: f64 },
}

impl ThresholdMode {
    pub fn threshold(&self, mu: f64, k: f64, norm_triple: f64) -> f64 {
        match *self {
            ThresholdMode::Paper { tau, delta, .. } => {
                let e = 40.0 * mu * delta;
                if norm_triple <= k.powf(delta) {
                    tau * k.powf(1.0 - e)
                } else {
                    tau * k.powf(-e)
                }
            }
            ThresholdMode::Desk { t_res } => t_res,
        }
    }

    /// ε₁: half-width of the level-1 eigenvalue interval around k^{2l}.
    pub fn level1_half_width(&self, mu: f64, k: f64, l: u32) -> f64 {
        let lf = l as f64;
        match *self {
            ThresholdMode::Paper {
                tau,
                delta,
                contour,
            } => {
                let c = match contour {
                    ContourConstant::TauL => tau * lf,
                    ContourConstant::TauPowL => tau.powi(l as i32),
                };
                0.5 * c * k.powf(2.0 * lf - 1.0 - 40.0 * mu * delta)
            }
            ThresholdMode::Desk { t_res } => 0.5 * lf * k.powi(2 * l as i32 - 2) * t_res,
        }
    }

    /// Radius of the contour C₁ around k^{2l}.
    pub fn contour_radius(&self, mu: f64, k: f64, l: u32) -> f64 {
        0.5 * self.level1_half_width(mu, k, l)
    }

    pub fn tau(&self) -> f64 {
        match *self {
            ThresholdMode::Paper { tau, .. } => tau,
            ThresholdMode::Desk { t_res } => t_res,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum DiscSource {
    Index(LatticeIndex),
    Pole { window: usize, block: usize, id: usize },
}

impl fmt::Display for DiscSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DiscSource::Index(m) => write!(f, "{m}"),
            DiscSource::Pole { window, block, id } => write!(f, "pole:w{window}:b{block}:{id}"),
        }
    }
}

impl Serialize for DiscSource {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AngularDisc {
    pub center: Complex64,
    pub radius: f64,
    pub source: DiscSource,
    pub level: u32,
}

impl AngularDisc {
    pub fn new(center: Complex64, radius: f64, source: DiscSource, level: u32) -> Self {
        assert!(radius > 0.0, "disc radius must be positive");
        Self {
            center: Complex64::new(reduce_angle(center.re), center.im),
            radius,
            source,
            level,
        }
    }

    /// (Re c − w, Re c + w) with w = √(r² − Im c²), unreduced.
    pub fn shadow(&self) -> Option<(f64, f64)> {
        let h = self.center.im.abs();
        if h >= self.radius {
            return None;
        }
        let w = (self.radius * self.radius - h * h).sqrt();
        Some((self.center.re - w, self.center.re + w))
    }

    pub fn contains(&self, z: Complex64) -> bool {
        // compare against the nearest 2π translate
        let dx = reduce_angle(z.re - self.center.re + PI) - PI;
        Complex64::new(dx, z.im - self.center.im).norm() < self.radius
    }
}

/// Sorted, disjoint closed arcs inside [0, 2π].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArcSet {
    arcs: Vec<(f64, f64)>,
}

impl ArcSet {
    pub fn full() -> Self {
        Self {
            arcs: vec![(0.0, TAU)],
        }
    }

    pub fn empty() -> Self {
        Self { arcs: Vec::new() }
    }

    /// Sorts and merges overlapping arcs; each arc must satisfy 0 ≤ a < b ≤ 2π.
    pub fn from_arcs(mut arcs: Vec<(f64, f64)>) -> Self {
        arcs.retain(|&(a, b)| a < b);
        for &(a, b) in &arcs {
            assert!((0.0..=TAU).contains(&a) && b <= TAU, "arc ({a}, {b}) outside [0, 2pi]");
        }
        arcs.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut out: Vec<(f64, f64)> = Vec::with_capacity(arcs.len());
        for (a, b) in arcs {
            match out.last_mut() {
                Some(last) if a <= last.1 => last.1 = last.1.max(b),
                _ => out.push((a, b)),
            }
        }
        Self { arcs: out }
    }

    pub fn arcs(&self) -> &[(f64, f64)] {
        &self.arcs
    }

    pub fn measure(&self) -> f64 {
        self.arcs.iter().map(|(a, b)| b - a).sum()
    }

    pub fn contains(&self, phi: f64) -> bool {
        let phi = reduce_angle(phi);
        let i = self.arcs.partition_point(|&(a, _)| a <= phi);
        (i > 0 && phi <= self.arcs[i - 1].1) || (phi == 0.0 && self.arcs.last().is_some_and(|&(_, b)| b == TAU))
    }

    fn subtract_plain(&mut self, a: f64, b: f64) {
        let mut out = Vec::with_capacity(self.arcs.len() + 1);
        for &(x, y) in &self.arcs {
            if b <= x || a >= y {
                out.push((x, y));
                continue;
            }
            if x < a {
                out.push((x, a));
            }
            if b < y {
                out.push((b, y));
            }
        }
        self.arcs = out;
    }

    /// Remove the open interval (lo, hi), taken mod 2π.
    pub fn subtract(&mut self, lo: f64, hi: f64) {
        if !(hi > lo) {
            return;
        }
        if hi - lo >= TAU {
            self.arcs.clear();
            return;
        }
        let a = reduce_angle(lo);
        let b = a + (hi - lo);
        if b <= TAU {
            self.subtract_plain(a, b);
        } else {
            self.subtract_plain(a, TAU);
            self.subtract_plain(0.0, b - TAU);
        }
    }

    pub fn is_subset_of(&self, other: &ArcSet) -> bool {
        self.arcs
            .iter()
            .all(|&(a, b)| other.arcs.iter().any(|&(x, y)| x <= a && b <= y))
    }

    pub fn intersect(&self, other: &ArcSet) -> ArcSet {
        let mut out = Vec::new();
        for &(a, b) in &self.arcs {
            for &(x, y) in &other.arcs {
                let lo = a.max(x);
                let hi = b.min(y);
                if lo < hi {
                    out.push((lo, hi));
                }
            }
        }
        ArcSet::from_arcs(out)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AngleSetLevel {
    pub level: u32,
    pub k: f64,
    pub tau: f64,
    pub discs: Vec<AngularDisc>,
    pub real_arcs: ArcSet,
}

impl AngleSetLevel {
    /// `base` minus the real shadows of `discs`.
    pub fn from_discs(level: u32, k: f64, tau: f64, discs: Vec<AngularDisc>, base: &ArcSet) -> Self {
        let mut real_arcs = base.clone();
        for d in &discs {
            if let Some((lo, hi)) = d.shadow() {
                real_arcs.subtract(lo, hi);
            }
        }
        Self {
            level,
            k,
            tau,
            discs,
            real_arcs,
        }
    }
}

/// Solutions of p_m² + 2k p_m cos(φ − φ_m) = 0 in [0, 2π), the + branch first.
pub fn phi_roots(lat: &QuasiLattice, k: f64, m: &LatticeIndex) -> Vec<f64> {
    assert!(k > 0.0 && !m.is_zero(), "phi_roots needs k > 0 and m != 0");
    let p = lat.p_vec(m);
    let c = -p.norm / (2.0 * k);
    if c < -1.0 {
        return Vec::new();
    }
    let psi = c.acos();
    let plus = reduce_angle(p.angle + psi);
    let minus = reduce_angle(p.angle - psi);
    if plus == minus {
        vec![plus]
    } else {
        vec![plus, minus]
    }
}

const COVER_SLACK: f64 = 1e-9;

/// Covering discs for one m: their real shadows contain every real φ with
/// |p² + 2kp cos(φ − φ_m)| < t.
pub fn index_discs(lat: &QuasiLattice, k: f64, m: &LatticeIndex, t: f64, level: u32) -> Vec<AngularDisc> {
    let pv = lat.p_vec(m);
    let p = pv.norm;
    let src = DiscSource::Index(*m);
    let c_lo = (-t - p * p) / (2.0 * k * p);
    let c_hi = (t - p * p) / (2.0 * k * p);
    let has_real = c_lo < 1.0 && c_hi > -1.0;
    // ψ-range of the exact real resonance set on [0, π]
    let a_lo = c_hi.min(1.0).acos();
    let a_hi = c_lo.max(-1.0).acos();
    let pad = |r: f64| r * (1.0 + COVER_SLACK) + 1e-15;
    let ratio = p / (2.0 * k);
    if ratio <= 1.0 {
        let psi = (-ratio).acos();
        let s = (1.0 - ratio * ratio).sqrt();
        let regular = 2.0 * k * p * s * s > 4.0 * t;
        if regular {
            let taylor = t / (k * p * s);
            let r = pad(taylor.max(psi - a_lo).max(a_hi - psi));
            return vec![
                AngularDisc::new(Complex64::new(pv.angle + psi, 0.0), r, src, level),
                AngularDisc::new(Complex64::new(pv.angle - psi, 0.0), r, src, level),
            ];
        }
    }
    if has_real {
        let balance = ((t + p * (p - 2.0 * k).abs()) / (k * p)).sqrt();
        let r = pad(balance.max(PI - a_lo));
        return vec![AngularDisc::new(Complex64::new(pv.angle + PI, 0.0), r, src, level)];
    }
    if ratio > 2.0 {
        return Vec::new();
    }
    let eta = ratio.acosh();
    let r = t / (k * p * eta.sinh());
    vec![
        AngularDisc::new(Complex64::new(pv.angle + PI, eta), r, src, level),
        AngularDisc::new(Complex64::new(pv.angle + PI, -eta), r, src, level),
    ]
}

/// O⁽¹⁾ over 0 < |||p_m||| ≤ range_radius and the surviving arcs ω⁽¹⁾.
pub fn resonance_discs_level1(
    lat: &QuasiLattice,
    k: f64,
    mode: &ThresholdMode,
    range_radius: f64,
) -> AngleSetLevel {
    let ms: Vec<LatticeIndex> = enumerate_indices(range_radius)
        .into_iter()
        .filter(|m| !m.is_zero())
        .collect();
    let discs: Vec<AngularDisc> = ms
        .par_iter()
        .map(|m| index_discs(lat, k, m, mode.threshold(lat.mu, k, m.norm_triple()), 1))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    AngleSetLevel::from_discs(1, k, mode.tau(), discs, &ArcSet::full())
}

pub fn nonresonant_measure(set: &AngleSetLevel) -> f64 {
    set.real_arcs.measure()
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct MeasureReport {
    pub measure: f64,
    pub removed: f64,
    pub bound: f64,
    pub within_bound: bool,
}

/// 2π − |ω| against C k^{−37δμ}; reported, not asserted.
pub fn measure_report(set: &AngleSetLevel, c: f64, mu: f64, delta: f64) -> MeasureReport {
    let measure = nonresonant_measure(set);
    let removed = TAU - measure;
    let bound = c * set.k.powf(-37.0 * delta * mu);
    MeasureReport {
        measure,
        removed,
        bound,
        within_bound: removed <= bound,
    }
}

/// A function analytic in φ, given through its logarithm (any branch).
pub trait AnalyticFamily: Sync {
    fn log_value(&self, phi: Complex64) -> Complex64;

    /// f′/f; the default differences f/f(φ) centrally, which keeps its
    /// relative accuracy right next to a simple or double zero.
    fn log_derivative(&self, phi: Complex64, h: f64) -> Complex64 {
        let mid = self.log_value(phi);
        let up = (self.log_value(phi + h) - mid).exp();
        let down = (self.log_value(phi - h) - mid).exp();
        (up - down) / (2.0 * h)
    }
}

/// Adapter for plain closures returning log f.
pub struct FnFamily<F>(pub F);

impl<F: Fn(Complex64) -> Complex64 + Sync> AnalyticFamily for FnFamily<F> {
    fn log_value(&self, phi: Complex64) -> Complex64 {
        (self.0)(phi)
    }
}

/// A matrix family that is Hermitian for real φ.
pub trait HermitianFamily {
    fn matrix_at(&self, phi: f64) -> DMatrix<Complex64>;
}

fn wrap_pi(x: f64) -> f64 {
    let y = x.rem_euclid(TAU);
    if y > PI {
        y - TAU
    } else {
        y
    }
}

/// log det A together with Tr(A⁻¹ D) for a diagonal D.
fn log_det_and_trace(a: DMatrix<Complex64>, diag: Option<&[Complex64]>) -> (Complex64, Complex64) {
    let n = a.nrows();
    let lu = LU::new(a);
    let mut log = if lu.p().determinant::<f64>() < 0.0 {
        Complex64::new(0.0, PI)
    } else {
        Complex64::new(0.0, 0.0)
    };
    let u = lu.u();
    for i in 0..n {
        log += u[(i, i)].ln();
    }
    let trace = match diag {
        None => Complex64::new(0.0, 0.0),
        Some(d) => match lu.try_inverse() {
            Some(inv) => (0..n).map(|i| inv[(i, i)] * d[i]).sum(),
            None => Complex64::new(f64::INFINITY, 0.0),
        },
    };
    (log, trace)
}

/// φ ↦ det(P(H(κν(φ)) − E)P) with κ frozen.
pub struct FiberBlockFamily<'a> {
    pub lat: &'a QuasiLattice,
    pub pot: &'a TrigPotential,
    pub l: u32,
    pub kappa: f64,
    pub proj: IndexProjector,
    pub energy: f64,
}

impl FiberBlockFamily<'_> {
    fn shifted(&self, phi: Complex64) -> DMatrix<Complex64> {
        let kappa = polar_kappa(Complex64::new(self.kappa, 0.0), phi);
        let mut a = build_fiber(self.lat, self.pot, kappa, self.l, &self.proj)
            .expect("block family is validated on construction")
            .entries;
        for i in 0..a.nrows() {
            a[(i, i)] -= self.energy;
        }
        a
    }

    /// d/dφ of the diagonal entries (κ² + p² + 2κp cos(φ − φ_m))^l.
    fn diag_derivative(&self, phi: Complex64) -> Vec<Complex64> {
        let lf = self.l as f64;
        self.proj
            .members()
            .iter()
            .map(|m| {
                let p = self.lat.p_vec(m);
                let base = self.kappa * self.kappa + p.norm * p.norm + 2.0 * self.kappa * p.norm * (phi - p.angle).cos();
                let dbase = -2.0 * self.kappa * p.norm * (phi - p.angle).sin();
                base.powu(self.l - 1) * dbase * lf
            })
            .collect()
    }
}

impl AnalyticFamily for FiberBlockFamily<'_> {
    fn log_value(&self, phi: Complex64) -> Complex64 {
        log_det_and_trace(self.shifted(phi), None).0
    }

    fn log_derivative(&self, phi: Complex64, _h: f64) -> Complex64 {
        let d = self.diag_derivative(phi);
        log_det_and_trace(self.shifted(phi), Some(&d)).1
    }
}

impl HermitianFamily for FiberBlockFamily<'_> {
    fn matrix_at(&self, phi: f64) -> DMatrix<Complex64> {
        build_fiber(
            self.lat,
            self.pot,
            real_kappa([self.kappa * phi.cos(), self.kappa * phi.sin()]),
            self.l,
            &self.proj,
        )
        .expect("block family is validated on construction")
        .entries
    }
}

/// φ ↦ det(φS + C − E) with S positive diagonal and C Hermitian: every zero is real.
pub struct PencilFamily {
    pub s: Vec<f64>,
    pub c: DMatrix<Complex64>,
    pub energy: f64,
}

impl PencilFamily {
    fn shifted(&self, phi: Complex64) -> DMatrix<Complex64> {
        let mut a = self.c.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += phi * self.s[i] - self.energy;
        }
        a
    }
}

impl AnalyticFamily for PencilFamily {
    fn log_value(&self, phi: Complex64) -> Complex64 {
        log_det_and_trace(self.shifted(phi), None).0
    }

    fn log_derivative(&self, phi: Complex64, _h: f64) -> Complex64 {
        let d: Vec<Complex64> = self.s.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        log_det_and_trace(self.shifted(phi), Some(&d)).1
    }
}

impl HermitianFamily for PencilFamily {
    fn matrix_at(&self, phi: f64) -> DMatrix<Complex64> {
        let mut a = self.c.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += phi * self.s[i];
        }
        a
    }
}

/// Number of crossings of `energy` by the sorted eigenvalues of a Hermitian
/// family along [a, b], sampled on `samples` intervals.
pub fn real_crossings<F: HermitianFamily + ?Sized>(family: &F, energy: f64, a: f64, b: f64, samples: usize) -> usize {
    let signs = |phi: f64| -> Vec<bool> {
        hermitian_eigen(&family.matrix_at(phi))
            .values
            .iter()
            .map(|&v| v >= energy)
            .collect()
    };
    let mut prev = signs(a);
    let mut count = 0;
    for j in 1..=samples {
        let cur = signs(a + (b - a) * j as f64 / samples as f64);
        count += prev.iter().zip(&cur).filter(|(x, y)| x != y).count();
        prev = cur;
    }
    count
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct PoleScanOptions {
    pub initial_points: usize,
    pub max_points: usize,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub zero_floor: f64,
    pub max_zeros: i64,
}

impl Default for PoleScanOptions {
    fn default() -> Self {
        Self {
            initial_points: 256,
            max_points: 1 << 16,
            newton_tol: 1e-12,
            newton_max_iter: 50,
            zero_floor: 1e-12,
            max_zeros: 24,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Pole {
    pub location: Complex64,
    pub multiplicity: u32,
}

#[derive(Clone, Debug, Serialize)]
pub struct PoleScan {
    pub winding: i64,
    pub poles: Vec<Pole>,
    pub quadrature_points: usize,
}

struct ContourData {
    points: usize,
    winding: i64,
    /// Σ u_j^n over the zeros, n = 1..=winding, with u = (z − c)/r.
    power_sums: Vec<Complex64>,
}

fn contour_data<F: AnalyticFamily + ?Sized>(
    f: &F,
    center: Complex64,
    radius: f64,
    opts: &PoleScanOptions,
    want_moments: bool,
) -> Result<ContourData, ResonanceError> {
    if !(radius > 0.0) {
        return Err(ResonanceError::BadRadius(radius));
    }
    let h = radius * 1e-5;
    let mut n = opts.initial_points;
    while n <= opts.max_points {
        let us: Vec<Complex64> = (0..n)
            .map(|j| Complex64::from_polar(1.0, TAU * j as f64 / n as f64))
            .collect();
        let vals: Vec<(Complex64, Complex64)> = us
            .par_iter()
            .map(|u| {
                let z = center + u * radius;
                (f.log_value(z), f.log_derivative(z, h))
            })
            .collect();
        let re_max = vals.iter().map(|v| v.0.re).fold(f64::NEG_INFINITY, f64::max);
        let re_min = vals.iter().map(|v| v.0.re).fold(f64::INFINITY, f64::min);
        if !re_min.is_finite() || !re_max.is_finite() || re_min < re_max + opts.zero_floor.ln() {
            return Err(ResonanceError::ContourThroughZero { center, radius });
        }
        let quad: Complex64 = vals.iter().zip(&us).map(|(v, u)| v.1 * u * radius).sum::<Complex64>() / n as f64;
        let mut arg = 0.0;
        for j in 0..n {
            arg += wrap_pi(vals[(j + 1) % n].0.im - vals[j].0.im);
        }
        let arg_count = (arg / TAU).round() as i64;
        let nearest = quad.re.round();
        if (quad.re - nearest).abs() < 0.1 && quad.im.abs() < 0.1 && nearest as i64 == arg_count {
            let winding = arg_count;
            let mut power_sums = Vec::new();
            if want_moments && winding > 0 {
                for p in 1..=winding as i32 {
                    let s: Complex64 = vals
                        .iter()
                        .zip(&us)
                        .map(|(v, u)| v.1 * u.powi(p + 1) * radius)
                        .sum::<Complex64>()
                        / n as f64;
                    power_sums.push(s);
                }
            }
            return Ok(ContourData {
                points: n,
                winding,
                power_sums,
            });
        }
        n *= 2;
    }
    Err(ResonanceError::WindingNotConverged {
        points: opts.max_points,
    })
}

/// Roots of the monic polynomial whose root power sums are `p`.
fn roots_from_power_sums(p: &[Complex64]) -> Vec<Complex64> {
    let n = p.len();
    // elementary symmetric polynomials by Newton's identities
    let mut e = vec![Complex64::new(1.0, 0.0)];
    for j in 1..=n {
        let mut acc = Complex64::new(0.0, 0.0);
        for i in 1..=j {
            let sign = if i % 2 == 1 { 1.0 } else { -1.0 };
            acc += e[j - i] * p[i - 1] * sign;
        }
        e.push(acc / j as f64);
    }
    // coefficients of u^n + c₁u^{n−1} + … + c_n
    let coeffs: Vec<Complex64> = (0..=n)
        .map(|j| if j % 2 == 0 { e[j] } else { -e[j] })
        .collect();
    let eval = |u: Complex64| -> (Complex64, Complex64) {
        let mut pv = Complex64::new(0.0, 0.0);
        let mut dv = Complex64::new(0.0, 0.0);
        for c in &coeffs {
            dv = dv * u + pv;
            pv = pv * u + c;
        }
        (pv, dv)
    };
    if n == 1 {
        return vec![-coeffs[1]];
    }
    // Aberth iteration
    let mut z: Vec<Complex64> = (0..n)
        .map(|j| Complex64::from_polar(0.5, TAU * j as f64 / n as f64 + 0.4))
        .collect();
    for _ in 0..500 {
        let mut biggest: f64 = 0.0;
        for i in 0..n {
            let (pv, dv) = eval(z[i]);
            if pv.norm() == 0.0 {
                continue;
            }
            let ratio = pv / dv;
            let repulsion: Complex64 = (0..n)
                .filter(|&j| j != i)
                .map(|j| Complex64::new(1.0, 0.0) / (z[i] - z[j]))
                .sum();
            let w = ratio / (Complex64::new(1.0, 0.0) - ratio * repulsion);
            if w.is_finite() {
                z[i] -= w;
                biggest = biggest.max(w.norm());
            }
        }
        if biggest < 1e-15 {
            break;
        }
    }
    z
}

/// Zeros of f inside the disc, with multiplicities.
pub fn pole_scan<F: AnalyticFamily + ?Sized>(
    f: &F,
    disc: &AngularDisc,
    opts: &PoleScanOptions,
) -> Result<PoleScan, ResonanceError> {
    let (c, r) = (disc.center, disc.radius);
    let data = contour_data(f, c, r, opts, true)?;
    if data.winding < 0 {
        return Err(ResonanceError::NegativeWinding(data.winding));
    }
    if data.winding > opts.max_zeros {
        return Err(ResonanceError::TooManyZeros { count: data.winding });
    }
    if data.winding == 0 {
        return Ok(PoleScan {
            winding: 0,
            poles: Vec::new(),
            quadrature_points: data.points,
        });
    }
    let mut us = roots_from_power_sums(&data.power_sums);
    us.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    // merge approximations of one multiple zero
    let mut groups: Vec<(Complex64, u32)> = Vec::new();
    for u in us {
        match groups.iter_mut().find(|(g, _)| (*g - u).norm() < 1e-4) {
            Some((g, m)) => {
                *g = (*g * *m as f64 + u) / (*m as f64 + 1.0);
                *m += 1;
            }
            None => groups.push((u, 1)),
        }
    }
    let h = r * 1e-5;
    let mut refined: Vec<(Complex64, u32)> = Vec::with_capacity(groups.len());
    for (u, m) in &groups {
        let start = c + u * r;
        let mut z = start;
        let mut ok = false;
        let mut last_step = f64::INFINITY;
        for _ in 0..opts.newton_max_iter {
            let d = f.log_derivative(z, h);
            if !d.is_finite() || d.norm() == 0.0 {
                ok = true;
                break;
            }
            let step = Complex64::new(*m as f64, 0.0) / d;
            z -= step;
            last_step = step.norm();
            if step.norm() < opts.newton_tol * z.norm().max(1.0) {
                ok = true;
                break;
            }
        }
        if !z.is_finite() || (z - start).norm() > 1e-3 * r {
            z = start;
        } else if !ok && last_step > 1e-9 * r {
            return Err(ResonanceError::NewtonFailed(z));
        }
        refined.push((z, *m));
    }
    // multiplicity from the winding of a small circle around each zero
    let mut poles = Vec::with_capacity(refined.len());
    for (i, (z, m)) in refined.iter().enumerate() {
        let gap = refined
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, (w, _))| (w - z).norm())
            .fold(r, f64::min);
        let rho = (0.25 * gap).min(0.05 * r);
        let local = contour_data(f, *z, rho, opts, false)
            .map(|d| d.winding)
            .unwrap_or(*m as i64);
        let multiplicity = if local > 0 { local as u32 } else { *m };
        poles.push(Pole {
            location: *z,
            multiplicity,
        });
    }
    let found: i64 = poles.iter().map(|p| p.multiplicity as i64).sum();
    if found != data.winding {
        return Err(ResonanceError::InconsistentMultiplicity {
            found,
            winding: data.winding,
        });
    }
    poles.sort_by(|a, b| a.location.re.total_cmp(&b.location.re).then(a.location.im.total_cmp(&b.location.im)));
    Ok(PoleScan {
        winding: data.winding,
        poles,
        quadrature_points: data.points,
    })
}

/// One determinant family scanned on a disc around a window center.
pub struct ScanTask<'a> {
    pub window: usize,
    pub block: usize,
    pub center: f64,
    pub scan_radius: f64,
    pub family: &'a (dyn AnalyticFamily + 'a),
}

/// Split each arc into windows of length at most 2·half_width: (center, half_width).
pub fn scan_windows(arcs: &ArcSet, half_width: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for &(a, b) in arcs.arcs() {
        let n = ((b - a) / (2.0 * half_width)).ceil().max(1.0) as usize;
        let w = (b - a) / n as f64;
        for j in 0..n {
            out.push((a + w * (j as f64 + 0.5), 0.5 * w));
        }
    }
    out
}

/// Scan with up to three radius enlargements when the contour hits a zero.
pub fn scan_with_retry<F: AnalyticFamily + ?Sized>(
    f: &F,
    center: Complex64,
    radius: f64,
    opts: &PoleScanOptions,
) -> Result<PoleScan, ResonanceError> {
    let mut r = radius;
    let mut last = None;
    for _ in 0..4 {
        let disc = AngularDisc::new(center, r, DiscSource::Pole { window: 0, block: 0, id: 0 }, 0);
        match pole_scan(f, &disc, opts) {
            Err(e @ ResonanceError::ContourThroughZero { .. }) => {
                last = Some(e);
                r *= 1.07;
            }
            other => return other,
        }
    }
    Err(last.expect("loop ran"))
}

/// The next level: discs of `radius` around every pole found by the tasks,
/// subtracted from the previous level's arcs.
pub fn resonant_set_next(
    prev: &AngleSetLevel,
    tasks: &[ScanTask<'_>],
    radius: f64,
    opts: &PoleScanOptions,
) -> Result<AngleSetLevel, ResonanceError> {
    let level = prev.level + 1;
    let scans: Vec<Result<Vec<Pole>, ResonanceError>> = tasks
        .par_iter()
        .map(|t| {
            scan_with_retry(t.family, Complex64::new(t.center, 0.0), t.scan_radius, opts)
                .map(|s| s.poles)
                .map_err(|e| ResonanceError::Scan {
                    window: t.window,
                    block: t.block,
                    source: Box::new(e),
                })
        })
        .collect();
    let mut discs = Vec::new();
    let mut seen: Vec<Complex64> = Vec::new();
    for (t, res) in tasks.iter().zip(scans) {
        for (id, pole) in res?.into_iter().enumerate() {
            let z = pole.location;
            if seen.iter().any(|w| (w - z).norm() < 1e-9) {
                continue;
            }
            seen.push(z);
            discs.push(AngularDisc::new(
                z,
                radius,
                DiscSource::Pole {
                    window: t.window,
                    block: t.block,
                    id,
                },
                level,
            ));
        }
    }
    Ok(AngleSetLevel::from_discs(level, prev.k, prev.tau, discs, &prev.real_arcs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::free_energy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn disc(c: Complex64, r: f64) -> AngularDisc {
        AngularDisc::new(c, r, DiscSource::Pole { window: 0, block: 0, id: 0 }, 1)
    }

    #[test]
    fn roots_examples() {
        let lat = QuasiLattice::golden();
        let m = LatticeIndex::new([1, 0], [0, 0]);
        let r = phi_roots(&lat, 10.0, &m);
        let expect = (-PI / 10.0).acos();
        assert!((r[0] - expect).abs() < 1e-15);
        assert!((r[1] - (TAU - expect)).abs() < 1e-14);
        assert!((expect - 1.8903672801021563).abs() < 1e-15);
        assert!(phi_roots(&lat, 1.0, &LatticeIndex::new([1, 0], [0, 0])).is_empty());
        for m in enumerate_indices(3.0).iter().filter(|m| !m.is_zero()) {
            let p = lat.p_vec(m);
            let k = 200.0;
            for (root, sign) in phi_roots(&lat, k, m).into_iter().zip([1.0, -1.0]) {
                let diff = reduce_angle(root - p.angle - sign * PI / 2.0 + PI) - PI;
                assert!(diff.abs() <= 2.0 * p.norm / k);
            }
        }
    }

    #[test]
    fn arc_arithmetic() {
        let mut a = ArcSet::full();
        a.subtract(1.0, 1.1);
        assert!((a.measure() - (TAU - 0.1)).abs() < 1e-15);
        a.subtract(-0.2, 0.1);
        assert!((a.measure() - (TAU - 0.4)).abs() < 1e-14);
        assert!(!a.contains(0.0) && !a.contains(TAU - 0.1) && a.contains(0.5));
        let b = {
            let mut b = a.clone();
            b.subtract(3.0, 3.5);
            b
        };
        assert!(b.is_subset_of(&a) && !a.is_subset_of(&b));
        assert_eq!(a.intersect(&b), b);
        let mut c = ArcSet::full();
        c.subtract(0.0, 7.0);
        assert_eq!(c.measure(), 0.0);
    }

    #[test]
    fn empty_range_and_antipodes() {
        let lat = QuasiLattice::golden();
        let mode = ThresholdMode::Desk { t_res: 1.0 };
        let set = resonance_discs_level1(&lat, 10.0, &mode, 0.5);
        assert!(set.discs.is_empty());
        assert_eq!(nonresonant_measure(&set), TAU);
        let set = resonance_discs_level1(&lat, 10.0, &mode, 2.0);
        for d in &set.discs {
            let DiscSource::Index(m) = d.source else { unreachable!() };
            let twin = set
                .discs
                .iter()
                .filter(|e| e.source == DiscSource::Index(-m))
                .any(|e| {
                    let shift = reduce_angle(d.center.re + PI);
                    let diff = (reduce_angle(e.center.re - shift + PI) - PI).abs();
                    diff < 1e-12 && e.radius == d.radius && e.center.im.abs() == d.center.im.abs()
                });
            assert!(twin, "{d:?}");
        }
        for &(a, b) in set.real_arcs.arcs() {
            let (x, y) = (reduce_angle(a + PI), reduce_angle(b + PI));
            let mid = reduce_angle(0.5 * (a + b) + PI);
            assert!(set.real_arcs.contains(mid), "{x} {y}");
        }
    }

    #[test]
    fn arcs_are_nonresonant_on_a_grid() {
        let lat = QuasiLattice::golden();
        for (k, t, range) in [(10.0, 1.0, 2.0), (10.0, 2.0, 2.5), (30.0, 5.0, 2.5), (5.0, 0.5, 2.0)] {
            let mode = ThresholdMode::Desk { t_res: t };
            let set = resonance_discs_level1(&lat, k, &mode, range);
            let ms: Vec<LatticeIndex> = enumerate_indices(range).into_iter().filter(|m| !m.is_zero()).collect();
            let mut checked = 0;
            for j in 0..10_000 {
                let phi = TAU * (j as f64 + 0.5) / 10_000.0;
                if !set.real_arcs.contains(phi) {
                    continue;
                }
                checked += 1;
                let kv = [k * phi.cos(), k * phi.sin()];
                for m in &ms {
                    let d = free_energy(&lat, kv, 1, m) - k * k;
                    assert!(d.abs() >= t * (1.0 - 1e-9), "phi={phi} m={m} d={d}");
                }
            }
            assert!(checked > 0, "k={k} t={t}");
        }
    }

    #[test]
    fn measure_matches_monte_carlo() {
        let lat = QuasiLattice::golden();
        let set = resonance_discs_level1(&lat, 10.0, &ThresholdMode::Desk { t_res: 3.0 }, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 1_000_000;
        let hits = (0..n).filter(|_| set.real_arcs.contains(rng.gen_range(0.0..TAU))).count();
        let frac = hits as f64 / n as f64;
        let sigma = (frac * (1.0 - frac) / n as f64).sqrt();
        assert!((frac * TAU - set.real_arcs.measure()).abs() <= 3.0 * sigma * TAU);
        let one = AngleSetLevel::from_discs(1, 1.0, 1.0, vec![disc(Complex64::new(2.0, 0.0), 0.05)], &ArcSet::full());
        assert!((nonresonant_measure(&one) - (TAU - 0.1)).abs() < 1e-15);
    }

    #[test]
    fn scan_polynomial_zeros() {
        let (a, b) = (Complex64::new(0.3, 0.1), Complex64::new(2.0, -0.5));
        let f = FnFamily(move |z: Complex64| (z - a).ln() + (z - b).ln());
        let s = pole_scan(&f, &disc(Complex64::new(0.2, 0.0), 0.5), &PoleScanOptions::default()).unwrap();
        assert_eq!(s.winding, 1);
        assert!((s.poles[0].location - a).norm() < 1e-10);
        let g = FnFamily(move |z: Complex64| (z - a).ln() * 2.0);
        let s = pole_scan(&g, &disc(a + 0.05, 0.3), &PoleScanOptions::default()).unwrap();
        assert_eq!(s.winding, 2);
        assert_eq!(s.poles.len(), 1);
        assert_eq!(s.poles[0].multiplicity, 2);
        let three = FnFamily(|z: Complex64| (z - 1.0).ln() + (z - 1.2).ln() + (z - Complex64::new(1.1, 0.1)).ln());
        let s = pole_scan(&three, &disc(Complex64::new(1.1, 0.0), 0.4), &PoleScanOptions::default()).unwrap();
        assert_eq!(s.winding, 3);
        assert!((s.poles[0].location - 1.0).norm() < 1e-9);
        let through = FnFamily(|z: Complex64| (z - 1.5).ln());
        assert!(matches!(
            pole_scan(&through, &disc(Complex64::new(1.0, 0.0), 0.5), &PoleScanOptions::default()),
            Err(ResonanceError::ContourThroughZero { .. })
        ));
    }

    #[test]
    fn scalar_block_root() {
        let lat = QuasiLattice::golden();
        let pot = TrigPotential::zero(1.0);
        let m = LatticeIndex::new([1, 0], [0, 0]);
        let k = 10.0;
        let fam = FiberBlockFamily {
            lat: &lat,
            pot: &pot,
            l: 2,
            kappa: k,
            proj: IndexProjector::new("m", [m]),
            energy: k.powi(4),
        };
        let root = phi_roots(&lat, k, &m)[0];
        let s = pole_scan(&fam, &disc(Complex64::new(root + 0.01, 0.0), 0.1), &PoleScanOptions::default()).unwrap();
        assert_eq!(s.winding, 1);
        // scalar Newton on |kν + p_m|^4 − k^4
        let g = |phi: f64| free_energy(&lat, [k * phi.cos(), k * phi.sin()], 2, &m) - k.powi(4);
        let mut x = root + 0.01;
        for _ in 0..50 {
            let d = (g(x + 1e-7) - g(x - 1e-7)) / 2e-7;
            x -= g(x) / d;
        }
        assert!((s.poles[0].location - x).norm() < 1e-6);
        assert!(s.poles[0].location.im.abs() < 1e-9);
    }

    #[test]
    fn winding_matches_crossings_on_pencils() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let n = 4;
            let s: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..2.0)).collect();
            let mut c = DMatrix::<Complex64>::zeros(n, n);
            for i in 0..n {
                for j in i..n {
                    let z = Complex64::new(rng.gen_range(-1.0..1.0), if i == j { 0.0 } else { rng.gen_range(-1.0..1.0) });
                    c[(i, j)] = z;
                    c[(j, i)] = z.conj();
                }
            }
            let fam = PencilFamily { s, c, energy: 0.3 };
            let d = disc(Complex64::new(0.1, 0.0), 1.0);
            let scan = scan_with_retry(&fam, d.center, d.radius, &PoleScanOptions::default()).unwrap();
            let r = scan.quadrature_points;
            assert!(r >= 256);
            let crossings = real_crossings(&fam, 0.3, d.center.re - d.radius, d.center.re + d.radius, 4000);
            assert_eq!(scan.winding as usize, crossings);
            for p in &scan.poles {
                assert!(p.location.im.abs() < 1e-8);
            }
        }
    }

    #[test]
    fn next_level_cases() {
        let lat = QuasiLattice::golden();
        let prev = resonance_discs_level1(&lat, 10.0, &ThresholdMode::Desk { t_res: 1.0 }, 1.0);
        let same = resonant_set_next(&prev, &[], 0.01, &PoleScanOptions::default()).unwrap();
        assert_eq!(same.real_arcs, prev.real_arcs);
        assert_eq!(same.level, 2);
        // one real pole well inside the first arc
        let (a, b) = prev.real_arcs.arcs()[0];
        let mid = 0.5 * (a + b);
        let f = FnFamily(move |z: Complex64| (z - mid).ln());
        let task = ScanTask {
            window: 0,
            block: 0,
            center: mid + 0.001,
            scan_radius: 0.05,
            family: &f,
        };
        let next = resonant_set_next(&prev, &[task], 0.01, &PoleScanOptions::default()).unwrap();
        assert!((prev.real_arcs.measure() - next.real_arcs.measure() - 0.02).abs() < 1e-9);
        assert!(next.real_arcs.is_subset_of(&prev.real_arcs));
        // V = 0 with 1×1 blocks at non-resonant window centers: no poles
        let pot = TrigPotential::zero(1.0);
        let fams: Vec<(f64, FiberBlockFamily)> = scan_windows(&prev.real_arcs, 0.05)
            .into_iter()
            .take(6)
            .map(|(c, _)| {
                (
                    c,
                    FiberBlockFamily {
                        lat: &lat,
                        pot: &pot,
                        l: 2,
                        kappa: 10.0,
                        proj: IndexProjector::new("m", [LatticeIndex::new([1, 0], [0, 0])]),
                        energy: 1e4,
                    },
                )
            })
            .collect();
        let tasks: Vec<ScanTask> = fams
            .iter()
            .enumerate()
            .map(|(i, (c, f))| ScanTask {
                window: i,
                block: 0,
                center: *c,
                scan_radius: 0.005,
                family: f,
            })
            .collect();
        let next = resonant_set_next(&prev, &tasks, 0.01, &PoleScanOptions::default()).unwrap();
        assert!(next.discs.is_empty());
        assert_eq!(next.real_arcs, prev.real_arcs);
    }

    #[test]
    fn paper_mode_thresholds() {
        let mode = ThresholdMode::Paper {
            tau: 1.0,
            delta: 0.004,
            contour: ContourConstant::TauL,
        };
        let k: f64 = 1e4;
        let e = 40.0 * 2.0 * 0.004;
        assert_eq!(mode.threshold(2.0, k, 1.0), k.powf(1.0 - e));
        assert_eq!(mode.threshold(2.0, k, 10.0), k.powf(-e));
        assert_eq!(mode.level1_half_width(2.0, k, 2), k.powf(3.0 - e));
        let desk = ThresholdMode::Desk { t_res: 1.0 };
        assert_eq!(desk.contour_radius(2.0, 10.0, 2), 50.0);
    }
}
