//! Quasi-lattice arithmetic: p_s = 2π(s₁ + α s₂), the triple norm, best
//! rational approximations of α and the cluster geometry they induce.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::{PI, TAU};
use std::fmt;
use std::ops::{Add, Neg, Sub};

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative slack used when testing `|||p||| <= radius`.
pub const NORM_SLACK: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error("alpha must lie strictly between 0 and 1, got {0}")]
    AlphaOutOfRange(String),
    #[error("cannot parse alpha literal {0:?}")]
    BadLiteral(String),
    #[error("precision must be between 17 and 2000 digits, got {0}")]
    BadPrecision(u32),
    #[error("no C_eps certificate for eps={eps} covering |||p|||={norm}")]
    MissingCEps { eps: f64, norm: f64 },
    #[error("zero index has no lower bound")]
    ZeroIndex,
    #[error(
        "cluster separation violated for q={q}: diameter {diameter:e}, separation {separation:e}"
    )]
    SeparationViolated {
        q: i64,
        diameter: f64,
        separation: f64,
    },
}

/// m = (s₁, s₂) ∈ ℤ² × ℤ². Ordered lexicographically on (s₁.x, s₁.y, s₂.x, s₂.y).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LatticeIndex {
    pub s1: [i64; 2],
    pub s2: [i64; 2],
}

impl LatticeIndex {
    pub const ZERO: LatticeIndex = LatticeIndex {
        s1: [0, 0],
        s2: [0, 0],
    };

    pub const fn new(s1: [i64; 2], s2: [i64; 2]) -> Self {
        Self { s1, s2 }
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::ZERO
    }

    /// True for exactly one of m, −m when m ≠ 0.
    pub fn is_positive(&self) -> bool {
        *self > Self::ZERO
    }

    /// |s₁| + |s₂| with Euclidean norms on each slot.
    pub fn norm_triple(&self) -> f64 {
        slot_norm(self.s1) + slot_norm(self.s2)
    }

    pub fn as_array(&self) -> [i64; 4] {
        [self.s1[0], self.s1[1], self.s2[0], self.s2[1]]
    }

    pub fn from_array(a: [i64; 4]) -> Self {
        Self::new([a[0], a[1]], [a[2], a[3]])
    }
}

impl fmt::Display for LatticeIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({},{};{},{})",
            self.s1[0], self.s1[1], self.s2[0], self.s2[1]
        )
    }
}

impl Add for LatticeIndex {
    type Output = LatticeIndex;
    fn add(self, o: Self) -> Self {
        Self::new(
            [self.s1[0] + o.s1[0], self.s1[1] + o.s1[1]],
            [self.s2[0] + o.s2[0], self.s2[1] + o.s2[1]],
        )
    }
}

impl Sub for LatticeIndex {
    type Output = LatticeIndex;
    fn sub(self, o: Self) -> Self {
        self + (-o)
    }
}

impl Neg for LatticeIndex {
    type Output = LatticeIndex;
    fn neg(self) -> Self {
        Self::new([-self.s1[0], -self.s1[1]], [-self.s2[0], -self.s2[1]])
    }
}

pub fn norm_triple(m: &LatticeIndex) -> f64 {
    m.norm_triple()
}

fn slot_norm(v: [i64; 2]) -> f64 {
    ((v[0] * v[0] + v[1] * v[1]) as f64).sqrt()
}

/// Reduce an angle into [0, 2π).
pub fn reduce_angle(x: f64) -> f64 {
    let r = x.rem_euclid(TAU);
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// α stored exactly as `numer / 10^digits`, plus its correctly rounded f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Alpha {
    numer: BigInt,
    digits: u32,
    value: f64,
    /// Set when the literal is visibly rational (fewer digits than the precision).
    pub literal_rational: bool,
}

impl Alpha {
    fn from_numer(numer: BigInt, digits: u32, literal_rational: bool) -> Result<Self, LatticeError> {
        if !(17..=2000).contains(&digits) {
            return Err(LatticeError::BadPrecision(digits));
        }
        let scale = pow10(digits);
        if numer <= BigInt::zero() || numer >= scale {
            return Err(LatticeError::AlphaOutOfRange(format!("{numer}/10^{digits}")));
        }
        let s = format!("0.{:0>width$}", numer.to_string(), width = digits as usize);
        let value: f64 = s.parse().map_err(|_| LatticeError::BadLiteral(s.clone()))?;
        Ok(Self {
            numer,
            digits,
            value,
            literal_rational,
        })
    }

    /// (√5 − 1)/2 truncated to `digits` decimals.
    pub fn golden(digits: u32) -> Result<Self, LatticeError> {
        let scale = pow10(digits);
        let root5 = (BigInt::from(5) * &scale * &scale).sqrt();
        Self::from_numer((root5 - &scale) / 2, digits, false)
    }

    /// A decimal literal such as "0.5" or "0.41421356237309504880".
    pub fn from_decimal(literal: &str, digits: u32) -> Result<Self, LatticeError> {
        let bad = || LatticeError::BadLiteral(literal.to_string());
        let t = literal.trim();
        let (int_part, frac) = t.split_once('.').unwrap_or((t, ""));
        if !int_part.chars().all(|c| c.is_ascii_digit())
            || !frac.chars().all(|c| c.is_ascii_digit())
            || int_part.trim_start_matches('0') != ""
        {
            return Err(if int_part.chars().all(|c| c.is_ascii_digit()) {
                LatticeError::AlphaOutOfRange(literal.to_string())
            } else {
                bad()
            });
        }
        let significant = frac.trim_end_matches('0');
        let mut padded: String = frac.chars().take(digits as usize).collect();
        while padded.len() < digits as usize {
            padded.push('0');
        }
        let numer: BigInt = padded.parse().map_err(|_| bad())?;
        Self::from_numer(numer, digits, significant.len() < digits as usize)
    }

    /// Continued fraction [0; a₁, a₂, …] whose last term repeats forever.
    /// `[0, 1]` is the golden mean, `[0, 2]` is √2 − 1.
    pub fn from_periodic_cf(terms: &[u64], digits: u32) -> Result<Self, LatticeError> {
        if terms.len() < 2 || terms[0] != 0 || terms[1..].iter().any(|&a| a == 0) {
            return Err(LatticeError::BadLiteral(format!("{terms:?}")));
        }
        let scale = pow10(digits);
        let target = &scale * &scale;
        let (mut h_prev, mut h) = (BigInt::one(), BigInt::zero());
        let (mut k_prev, mut k) = (BigInt::zero(), BigInt::one());
        let mut i = 1;
        while k.abs() <= target {
            let a = BigInt::from(terms[i.min(terms.len() - 1)]);
            let h_next = &a * &h + &h_prev;
            let k_next = &a * &k + &k_prev;
            h_prev = std::mem::replace(&mut h, h_next);
            k_prev = std::mem::replace(&mut k, k_next);
            i += 1;
        }
        Self::from_numer((h * &scale) / k, digits, false)
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn digits(&self) -> u32 {
        self.digits
    }

    pub fn numer(&self) -> &BigInt {
        &self.numer
    }

    /// Convergents (h, k) of the exact rational numer/10^digits.
    pub fn convergents(&self) -> Vec<(BigInt, BigInt)> {
        let mut out = Vec::new();
        let (mut a, mut b) = (self.numer.clone(), pow10(self.digits));
        let (mut h_prev, mut h) = (BigInt::one(), BigInt::zero());
        let (mut k_prev, mut k) = (BigInt::zero(), BigInt::one());
        // First partial quotient is 0 because 0 < α < 1.
        out.push((h.clone(), k.clone()));
        while !a.is_zero() {
            let (q, r) = b.div_rem(&a);
            let h_next = &q * &h + &h_prev;
            let k_next = &q * &k + &k_prev;
            h_prev = std::mem::replace(&mut h, h_next);
            k_prev = std::mem::replace(&mut k, k_next);
            out.push((h.clone(), k.clone()));
            b = a;
            a = r;
        }
        out
    }
}

fn pow10(d: u32) -> BigInt {
    num_traits::pow(BigInt::from(10), d as usize)
}

/// Best approximation |αq + p| → min with q ≤ bound. `eps_q = α + p/q`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RationalApprox {
    pub p: i64,
    pub q: i64,
    pub eps_q: f64,
}

/// Range-certified constant: p_m ≥ 2π C |||p_m|||^{−(μ−1+ε)} for 0 < |||p_m||| ≤ range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CEpsCertificate {
    pub eps: f64,
    pub range: f64,
    pub c_eps: f64,
    pub fitted: bool,
}

#[derive(Clone, Debug, Default)]
pub struct CEpsTable {
    certs: Vec<CEpsCertificate>,
}

impl CEpsTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, cert: CEpsCertificate) {
        self.certs.push(cert);
    }

    pub fn lookup(&self, eps: f64, norm: f64) -> Option<&CEpsCertificate> {
        self.certs
            .iter()
            .filter(|c| c.eps == eps && norm <= c.range * (1.0 + NORM_SLACK))
            .min_by(|a, b| a.range.total_cmp(&b.range))
    }
}

/// Vector data of p_m.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PVec {
    pub x: f64,
    pub y: f64,
    pub norm: f64,
    pub angle: f64,
}

#[derive(Clone, Debug)]
pub struct QuasiLattice {
    pub alpha: Alpha,
    pub mu: f64,
}

impl QuasiLattice {
    pub fn new(alpha: Alpha, mu: f64) -> Self {
        Self { alpha, mu }
    }

    pub fn golden() -> Self {
        Self::new(Alpha::golden(60).expect("60 digits is in range"), 2.0)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.value()
    }

    /// 2π(s₁ + α s₂) as a plain vector.
    pub fn p_xy(&self, m: &LatticeIndex) -> [f64; 2] {
        let a = self.alpha.value();
        [
            TAU * (m.s1[0] as f64 + a * m.s2[0] as f64),
            TAU * (m.s1[1] as f64 + a * m.s2[1] as f64),
        ]
    }

    pub fn p_norm(&self, m: &LatticeIndex) -> f64 {
        let [x, y] = self.p_xy(m);
        x.hypot(y)
    }

    /// φ_m in [0, 2π). The angle of −m is derived from m's so that antipodes are exact.
    pub fn p_angle(&self, m: &LatticeIndex) -> f64 {
        if m.is_zero() {
            return 0.0;
        }
        if m.is_positive() {
            let [x, y] = self.p_xy(m);
            reduce_angle(y.atan2(x))
        } else {
            reduce_angle(self.p_angle(&-*m) + PI)
        }
    }

    pub fn p_vec(&self, m: &LatticeIndex) -> PVec {
        let [x, y] = self.p_xy(m);
        PVec {
            x,
            y,
            norm: x.hypot(y),
            angle: self.p_angle(m),
        }
    }

    /// Sweep all 0 < |||p_m||| ≤ range and fit the largest admissible C_ε.
    pub fn certify_c_eps(&self, eps: f64, range: f64) -> CEpsCertificate {
        let expo = self.mu - 1.0 + eps;
        let ratio_min = enumerate_indices(range)
            .par_iter()
            .filter(|m| !m.is_zero())
            .map(|m| self.p_norm(m) * m.norm_triple().powf(expo) / TAU)
            .reduce(|| f64::INFINITY, f64::min);
        CEpsCertificate {
            eps,
            range,
            c_eps: ratio_min * (1.0 - 1e-12),
            fitted: true,
        }
    }

    /// 2π C_ε |||p_m|||^{−(μ−1+ε)}.
    pub fn pnorm_lower_bound(
        &self,
        m: &LatticeIndex,
        eps: f64,
        table: &CEpsTable,
    ) -> Result<f64, LatticeError> {
        if m.is_zero() {
            return Err(LatticeError::ZeroIndex);
        }
        let n = m.norm_triple();
        let cert = table
            .lookup(eps, n)
            .ok_or(LatticeError::MissingCEps { eps, norm: n })?;
        Ok(TAU * cert.c_eps * n.powf(-(self.mu - 1.0 + eps)))
    }

    /// Largest convergent with denominator ≤ q_bound, written as α q + p ≈ 0.
    pub fn best_rational(&self, q_bound: u64) -> RationalApprox {
        assert!(q_bound >= 1, "q_bound must be positive");
        let bound = BigInt::from(q_bound);
        let (h, k) = self
            .alpha
            .convergents()
            .into_iter()
            .filter(|(_, k)| *k <= bound && k.is_positive())
            .last()
            .expect("convergent with q = 1 always exists");
        let scale = pow10(self.alpha.digits);
        // ε = α − h/k = (numer·k − h·10^d) / (k·10^d)
        let num = self.alpha.numer() * &k - &h * &scale;
        let eps = big_ratio(&num, &(&k * &scale));
        RationalApprox {
            p: -h.to_i64().expect("convergent numerator fits i64"),
            q: k.to_i64().expect("convergent denominator fits i64"),
            eps_q: eps,
        }
    }
}

fn big_ratio(num: &BigInt, den: &BigInt) -> f64 {
    // Shift both to ~60 bits before converting so huge exponents never overflow.
    let shift = den.bits().saturating_sub(60);
    let n = num >> shift;
    let d = den >> shift;
    n.to_f64().unwrap_or(f64::NAN) / d.to_f64().unwrap_or(f64::NAN)
}

/// All m with |||p_m||| ≤ radius in canonical order.
pub fn enumerate_indices(radius: f64) -> Vec<LatticeIndex> {
    if radius < 0.0 {
        return Vec::new();
    }
    let lim = radius * (1.0 + NORM_SLACK) + NORM_SLACK;
    let r = lim.floor() as i64;
    let mut out = Vec::new();
    for a in -r..=r {
        for b in -r..=r {
            let n1 = slot_norm([a, b]);
            if n1 > lim {
                continue;
            }
            let rest = lim - n1;
            let r2 = rest.floor() as i64;
            for c in -r2..=r2 {
                for d in -r2..=r2 {
                    if n1 + slot_norm([c, d]) <= lim {
                        out.push(LatticeIndex::new([a, b], [c, d]));
                    }
                }
            }
        }
    }
    out
}

/// All m with |s₁| ≤ bound and |s₂| ≤ bound (Euclidean per slot).
pub fn enumerate_slot_box(bound: f64) -> Vec<LatticeIndex> {
    let r = bound.floor() as i64;
    let disc: Vec<[i64; 2]> = (-r..=r)
        .flat_map(|a| (-r..=r).map(move |b| [a, b]))
        .filter(|v| slot_norm(*v) <= bound)
        .collect();
    let mut out = Vec::with_capacity(disc.len() * disc.len());
    for s1 in &disc {
        for s2 in &disc {
            out.push(LatticeIndex::new(*s1, *s2));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClusterKey {
    /// s = s₁ − p s₂′
    pub s: [i64; 2],
    /// s₂″ ∈ [0, q)²
    pub s2pp: [i64; 2],
}

/// s₂ = q s₂′ + s₂″ with 0 ≤ (s₂″)_j < q.
pub fn split_s2(s2: [i64; 2], q: i64) -> ([i64; 2], [i64; 2]) {
    let (a0, r0) = s2[0].div_mod_floor(&q);
    let (a1, r1) = s2[1].div_mod_floor(&q);
    ([a0, a1], [r0, r1])
}

pub fn cluster_key(m: &LatticeIndex, approx: &RationalApprox) -> ClusterKey {
    let (sp, spp) = split_s2(m.s2, approx.q);
    ClusterKey {
        s: [m.s1[0] - approx.p * sp[0], m.s1[1] - approx.p * sp[1]],
        s2pp: spp,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ClusterDecomposition {
    pub approx: RationalApprox,
    pub clusters: BTreeMap<ClusterKey, Vec<LatticeIndex>>,
    /// |ε_q| q, the square-lattice step inside a cluster.
    pub step: f64,
    /// max_j |s_j| / 4 over the input: the index scale K of the cluster hypothesis.
    pub scale: f64,
    pub scale_condition_holds: bool,
    pub max_diameter: f64,
    /// Smallest distance between points of different clusters, if any pair is closer than 1/q.
    pub min_separation: Option<f64>,
}

impl ClusterDecomposition {
    pub fn diameter_bound(&self) -> f64 {
        1.0 / (8.0 * self.approx.q as f64)
    }

    pub fn separation_bound(&self) -> f64 {
        1.0 / (2.0 * self.approx.q as f64)
    }
}

/// (2π)⁻¹(p_a − p_b) split into its (1/q)ℤ² part and its ε_q part.
fn scaled_diff(a: &LatticeIndex, b: &LatticeIndex, approx: &RationalApprox) -> f64 {
    let (ka, kb) = (cluster_key(a, approx), cluster_key(b, approx));
    let q = approx.q as f64;
    let mut sq = 0.0;
    for j in 0..2 {
        let lattice_part =
            (approx.q * (ka.s[j] - kb.s[j]) - approx.p * (ka.s2pp[j] - kb.s2pp[j])) as f64 / q;
        let d = lattice_part + approx.eps_q * (a.s2[j] - b.s2[j]) as f64;
        sq += d * d;
    }
    sq.sqrt()
}

/// Group indices into clusters keyed by (s, s₂″) and measure their geometry in
/// units of (2π)⁻¹p.
pub fn decompose_clusters(
    indices: &[LatticeIndex],
    approx: &RationalApprox,
) -> Result<ClusterDecomposition, LatticeError> {
    let mut clusters: BTreeMap<ClusterKey, Vec<LatticeIndex>> = BTreeMap::new();
    for m in indices {
        clusters.entry(cluster_key(m, approx)).or_default().push(*m);
    }
    let q = approx.q as f64;
    let scale = indices
        .iter()
        .map(|m| slot_norm(m.s1).max(slot_norm(m.s2)))
        .fold(0.0, f64::max)
        / 4.0;
    let scale_condition_holds = approx.eps_q.abs() * 64.0 * q * scale <= 1.0;

    let max_diameter = clusters
        .par_iter()
        .map(|(_, members)| {
            let mut d: f64 = 0.0;
            for (i, a) in members.iter().enumerate() {
                for b in &members[i + 1..] {
                    d = d.max(scaled_diff(a, b, approx));
                }
            }
            d
        })
        .reduce(|| 0.0, f64::max);

    let min_separation = min_cross_distance(indices, approx, 1.0 / q);
    let out = ClusterDecomposition {
        approx: *approx,
        clusters,
        step: approx.eps_q.abs() * q,
        scale,
        scale_condition_holds,
        max_diameter,
        min_separation,
    };
    if scale_condition_holds {
        let sep_ok = out.min_separation.map_or(true, |s| s > out.separation_bound());
        if out.max_diameter >= out.diameter_bound() || !sep_ok {
            return Err(LatticeError::SeparationViolated {
                q: approx.q,
                diameter: out.max_diameter,
                separation: out.min_separation.unwrap_or(f64::INFINITY),
            });
        }
    }
    Ok(out)
}

/// Minimum distance between points in different clusters, restricted to pairs closer than `cell`.
fn min_cross_distance(indices: &[LatticeIndex], approx: &RationalApprox, cell: f64) -> Option<f64> {
    let a = approx.eps_q - approx.p as f64 / approx.q as f64;
    let pos = |m: &LatticeIndex| {
        [
            m.s1[0] as f64 + a * m.s2[0] as f64,
            m.s1[1] as f64 + a * m.s2[1] as f64,
        ]
    };
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, m) in indices.iter().enumerate() {
        let [x, y] = pos(m);
        grid.entry(((x / cell).floor() as i64, (y / cell).floor() as i64))
            .or_default()
            .push(i);
    }
    let keys: Vec<ClusterKey> = indices.iter().map(|m| cluster_key(m, approx)).collect();
    let cells: Vec<(&(i64, i64), &Vec<usize>)> = grid.iter().collect();
    cells
        .par_iter()
        .filter_map(|((cx, cy), members)| {
            let mut best: Option<f64> = None;
            for dx in -1..=1 {
                for dy in -1..=1 {
                    let Some(other) = grid.get(&(cx + dx, cy + dy)) else {
                        continue;
                    };
                    for &i in members.iter() {
                        for &j in other {
                            if j <= i || keys[i] == keys[j] {
                                continue;
                            }
                            let d = scaled_diff(&indices[i], &indices[j], approx);
                            if d < cell {
                                best = Some(best.map_or(d, |b: f64| b.min(d)));
                            }
                        }
                    }
                }
            }
            best
        })
        .reduce_with(f64::min)
}

fn count_filtered(lat: &QuasiLattice, radius: f64, p_threshold: f64) -> u64 {
    if p_threshold <= 0.0 || radius <= 0.0 {
        return 0;
    }
    let a = lat.alpha();
    let r = radius.ceil() as i64;
    let t = p_threshold / TAU;
    (-r..=r)
        .into_par_iter()
        .map(|c| {
            let mut n = 0u64;
            for d in -r..=r {
                let n2 = slot_norm([c, d]);
                if n2 >= radius {
                    continue;
                }
                let rest = radius - n2;
                let cx = -a * c as f64;
                let cy = -a * d as f64;
                let (x0, x1) = ((cx - t).ceil() as i64, (cx + t).floor() as i64);
                let (y0, y1) = ((cy - t).ceil() as i64, (cy + t).floor() as i64);
                let rb = rest.ceil() as i64;
                for x in x0.max(-rb)..=x1.min(rb) {
                    for y in y0.max(-rb)..=y1.min(rb) {
                        let m = LatticeIndex::new([x, y], [c, d]);
                        if m.is_zero() || slot_norm([x, y]) + n2 >= radius {
                            continue;
                        }
                        if lat.p_norm(&m) < p_threshold {
                            n += 1;
                        }
                    }
                }
            }
            n
        })
        .sum()
}

/// Number of m ≠ 0 with |||p_m||| < radius and p_m < p_threshold.
pub fn count_short_vectors(lat: &QuasiLattice, radius_triple: f64, p_threshold: f64) -> u64 {
    count_filtered(lat, radius_triple, p_threshold)
}

#[derive(Clone, Debug, Serialize)]
pub struct ShortVectorReport {
    pub k: f64,
    pub r1: f64,
    pub approx: RationalApprox,
    pub radius: f64,
    pub coarse_threshold: f64,
    pub coarse_count: u64,
    pub coarse_bound: f64,
    pub coarse_within: bool,
    pub fine_hypothesis: bool,
    pub fine_threshold: f64,
    pub fine_count: u64,
    pub fine_bound: f64,
    pub fine_within: bool,
}

/// Counts against the short-vector bounds at scale (k, r₁); q is the best
/// approximation with q ≤ 4k^{r₁}.
pub fn short_vector_report(lat: &QuasiLattice, k: f64, r1: f64) -> ShortVectorReport {
    let kr = k.powf(r1);
    let approx = lat.best_rational((4.0 * kr).floor().max(1.0) as u64);
    let radius = 2.0 * kr;
    let t_coarse = approx.eps_q.abs() * approx.q as f64 * k.powf(r1 / 3.0);
    let t_fine = k.powf(-2.0 * r1 / 3.0);
    let bound = k.powf(2.0 * r1 / 3.0);
    let n_coarse = count_short_vectors(lat, radius, t_coarse);
    let n_fine = count_short_vectors(lat, radius, t_fine);
    ShortVectorReport {
        k,
        r1,
        approx,
        radius,
        coarse_threshold: t_coarse,
        coarse_count: n_coarse,
        coarse_bound: bound,
        coarse_within: (n_coarse as f64) <= bound,
        fine_hypothesis: approx.q as f64 > bound,
        fine_threshold: t_fine,
        fine_count: n_fine,
        fine_bound: 4096.0 * bound,
        fine_within: (n_fine as f64) <= 4096.0 * bound,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half() -> QuasiLattice {
        QuasiLattice::new(Alpha::from_decimal("0.5", 60).unwrap(), 2.0)
    }

    #[test]
    fn norm_examples() {
        assert_eq!(LatticeIndex::new([1, 0], [0, 0]).norm_triple(), 1.0);
        assert_eq!(LatticeIndex::new([3, 4], [0, 0]).norm_triple(), 5.0);
        let v = LatticeIndex::new([1, 1], [1, 0]).norm_triple();
        assert!((v - 2.414_213_562_373_095).abs() < 1e-15);
    }

    #[test]
    fn p_vec_examples() {
        let p = half().p_vec(&LatticeIndex::new([1, 0], [2, 0]));
        assert_eq!((p.x, p.y), (4.0 * PI, 0.0));
        let z = QuasiLattice::golden().p_vec(&LatticeIndex::ZERO);
        assert_eq!(z.norm, 0.0);
        let g = QuasiLattice::golden().p_vec(&LatticeIndex::new([0, 0], [1, 0]));
        assert!((g.x - 3.883_222_077_450_933).abs() < 1e-14);
        assert_eq!(g.y, 0.0);
    }

    #[test]
    fn golden_digits_are_exact() {
        let a = Alpha::golden(60).unwrap();
        assert_eq!(
            a.numer().to_string(),
            "618033988749894848204586834365638117720309179805762862135448"
        );
        assert_eq!(a.value(), 0.618_033_988_749_894_9);
        let cf = Alpha::from_periodic_cf(&[0, 1], 60).unwrap();
        assert_eq!(cf.numer(), a.numer());
    }

    #[test]
    fn antipodal_angles() {
        let lat = QuasiLattice::golden();
        for m in enumerate_indices(3.0).into_iter().filter(|m| m.is_positive()) {
            assert_eq!(lat.p_angle(&-m), reduce_angle(lat.p_angle(&m) + PI));
        }
    }

    #[test]
    fn best_rational_examples() {
        let lat = QuasiLattice::golden();
        let r = lat.best_rational(13);
        assert_eq!((r.p, r.q), (-8, 13));
        assert!((r.eps_q - (lat.alpha() - 8.0 / 13.0)).abs() < 1e-15);
        let r = lat.best_rational(2);
        assert_eq!((r.p, r.q), (-1, 2));
        assert!((r.eps_q - 0.118_033_988_749_894_85).abs() < 1e-15);
        let r = half().best_rational(10);
        assert_eq!((r.p, r.q, r.eps_q), (-1, 2, 0.0));
    }

    #[test]
    fn split_example() {
        let (sp, spp) = split_s2([7, 2], 5);
        assert_eq!((sp, spp), ([1, 0], [2, 2]));
        let (sp, spp) = split_s2([-1, -6], 5);
        assert_eq!((sp, spp), ([-1, -2], [4, 4]));
    }

    #[test]
    fn enumerate_small() {
        assert_eq!(enumerate_indices(0.0), vec![LatticeIndex::ZERO]);
        assert_eq!(enumerate_indices(1.0).len(), 9);
        let v = enumerate_indices(2.5);
        assert!(v.windows(2).all(|w| w[0] < w[1]));
        assert!(v.len() <= 625);
    }

    #[test]
    fn lower_bound_requires_certificate() {
        let lat = QuasiLattice::golden();
        let m = LatticeIndex::new([1, 0], [0, 0]);
        let mut table = CEpsTable::new();
        assert!(matches!(
            lat.pnorm_lower_bound(&m, 0.01, &table),
            Err(LatticeError::MissingCEps { .. })
        ));
        table.insert(lat.certify_c_eps(0.01, 10.0));
        let b = lat.pnorm_lower_bound(&m, 0.01, &table).unwrap();
        assert_eq!(b, TAU * table.lookup(0.01, 1.0).unwrap().c_eps);
    }

    #[test]
    fn single_cluster() {
        let lat = QuasiLattice::golden();
        let approx = lat.best_rational(5);
        let d = decompose_clusters(&[LatticeIndex::new([1, 2], [3, 4])], &approx).unwrap();
        assert_eq!(d.clusters.len(), 1);
        assert_eq!(d.max_diameter, 0.0);
        assert_eq!(d.min_separation, None);
    }

    #[test]
    fn short_vector_trivia() {
        let lat = QuasiLattice::golden();
        assert_eq!(count_short_vectors(&lat, 5.0, 0.0), 0);
        let all = enumerate_indices(3.0).len() as u64;
        // Strict radius: nothing sits exactly on |||p||| = 3.5.
        assert_eq!(count_short_vectors(&lat, 3.5, 1e9), enumerate_indices(3.5).len() as u64 - 1);
        assert!(all > 1);
    }

    #[test]
    fn literal_validation() {
        assert!(Alpha::from_decimal("0.5", 60).unwrap().literal_rational);
        assert!(Alpha::from_decimal("1.5", 60).is_err());
        assert!(Alpha::from_decimal("abc", 60).is_err());
        assert!(Alpha::from_decimal("0", 60).is_err());
    }
}
