//! Model-operator combinatorics: resonant index sets and their classes,
//! block-structure checks, pole-based detection of the next resonant set, the
//! colored region decomposition of Ω(r₂), lattice counting near isoenergetic
//! curves and the exponent schedule.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::isocurve::{near_resonant, window_blocks, IsoCurve};
use crate::lattice::{enumerate_indices, reduce_angle, LatticeIndex, QuasiLattice, NORM_SLACK};
use crate::operator::{build_fiber, diagonal_entry, real_kappa, IndexProjector, OperatorError, TrigPotential};
use crate::resonance::{
    pole_scan, resonance_discs_level1, AngularDisc, DiscSource, FiberBlockFamily, PoleScanOptions, ResonanceError,
    ThresholdMode,
};
use crate::spectra::{resolvent_norm, SpectraError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MultiscaleError {
    #[error("phi0 = {phi0} lies in the level-1 resonant set")]
    Phi0Resonant { phi0: f64 },
    #[error("block leak ({check}) at ({row}, {col}), |entry| = {value:e}")]
    BlockLeak {
        check: LeakKind,
        row: LatticeIndex,
        col: LatticeIndex,
        value: f64,
    },
    #[error("bad parameter: {0}")]
    BadParameter(String),
    #[error("pole scan of block {block} failed: {source}")]
    Scan { block: usize, source: ResonanceError },
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Spectra(#[from] SpectraError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LeakKind {
    /// Two projectors share an index.
    Overlap,
    /// V couples two different blocks.
    Coupling,
    /// A block matrix differs from the same entries of the assembled operator.
    Assembly,
    /// Coupling to the outside leaves from a non-boundary index.
    Boundary,
}

impl fmt::Display for LeakKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LeakKind::Overlap => "overlap",
            LeakKind::Coupling => "coupling",
            LeakKind::Assembly => "assembly",
            LeakKind::Boundary => "boundary",
        };
        f.write_str(s)
    }
}

fn dist(a: &LatticeIndex, b: &LatticeIndex) -> f64 {
    (*a - *b).norm_triple()
}

/// Spatial hash on the 4 integer coordinates. Every coordinate of m − n is
/// bounded by |||m − n|||, so a query of radius ≤ cell only visits the 3⁴
/// surrounding cells.
struct Grid {
    cell: i64,
    map: HashMap<[i64; 4], Vec<LatticeIndex>>,
}

impl Grid {
    fn new<'a>(radius: f64, pts: impl IntoIterator<Item = &'a LatticeIndex>) -> Self {
        let cell = (radius.ceil() as i64).max(1);
        let mut map: HashMap<[i64; 4], Vec<LatticeIndex>> = HashMap::new();
        for m in pts {
            map.entry(Self::key_of(cell, m)).or_default().push(*m);
        }
        Grid { cell, map }
    }

    fn key_of(cell: i64, m: &LatticeIndex) -> [i64; 4] {
        m.as_array().map(|x| x.div_euclid(cell))
    }

    fn candidates<'s>(&'s self, m: &LatticeIndex) -> impl Iterator<Item = &'s LatticeIndex> + 's {
        let k = Self::key_of(self.cell, m);
        (0..81).flat_map(move |code: i64| {
            let mut c = code;
            let mut key = k;
            for x in key.iter_mut() {
                *x += c % 3 - 1;
                c /= 3;
            }
            self.map.get(&key).into_iter().flatten()
        })
    }

    /// Some point strictly closer than r (r ≤ cell).
    fn any_within(&self, m: &LatticeIndex, r: f64) -> bool {
        self.candidates(m).any(|n| dist(m, n) < r)
    }
}

/// Minimal union-find over 0..n.
struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect() }
    }

    fn find(&mut self, i: usize) -> usize {
        let mut r = i;
        while self.parent[r] != r {
            r = self.parent[r];
        }
        let mut j = i;
        while self.parent[j] != r {
            let next = self.parent[j];
            self.parent[j] = r;
            j = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (a, b) = (self.find(a), self.find(b));
        if a != b {
            self.parent[a.max(b)] = a.min(b);
        }
    }
}

/// Groups of `points` chained by steps of |||·||| strictly below `link`.
/// Members and groups come out sorted.
pub fn linkage_components(points: &[LatticeIndex], link: f64) -> Vec<Vec<LatticeIndex>> {
    let mut pts: Vec<LatticeIndex> = points.to_vec();
    pts.sort();
    pts.dedup();
    let pos: HashMap<LatticeIndex, usize> = pts.iter().enumerate().map(|(i, m)| (*m, i)).collect();
    let grid = Grid::new(link, &pts);
    let mut uf = UnionFind::new(pts.len());
    for (i, m) in pts.iter().enumerate() {
        for n in grid.candidates(m) {
            if dist(m, n) < link {
                uf.union(i, pos[n]);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<LatticeIndex>> = BTreeMap::new();
    for i in 0..pts.len() {
        let r = uf.find(i);
        groups.entry(r).or_default().push(pts[i]);
    }
    groups.into_values().collect()
}

/// Points of `universe` strictly closer than r to some seed.
fn neighborhood(universe: &[LatticeIndex], seeds: &[LatticeIndex], r: f64) -> BTreeSet<LatticeIndex> {
    if seeds.is_empty() || r <= 0.0 {
        return BTreeSet::new();
    }
    let grid = Grid::new(r, seeds);
    universe
        .par_iter()
        .filter(|m| grid.any_within(m, r))
        .copied()
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

/// All n with |||n − c||| < r for some centre c.
fn balls(centers: &[LatticeIndex], r: f64) -> Vec<LatticeIndex> {
    let offsets: Vec<LatticeIndex> = enumerate_indices(r).into_iter().filter(|o| o.norm_triple() < r).collect();
    let mut out: BTreeSet<LatticeIndex> = BTreeSet::new();
    for c in centers {
        for o in &offsets {
            out.insert(*c + *o);
        }
    }
    out.into_iter().collect()
}

// ---------------------------------------------------------------------------
// resonant index sets

/// A class whose size breaks the four-member bound, listed so that every
/// element lies within k^δ of an earlier one.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassWitness {
    pub class: usize,
    pub chain: Vec<LatticeIndex>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ResonantIndexSets {
    pub m: BTreeSet<LatticeIndex>,
    pub m_prime: BTreeSet<LatticeIndex>,
    pub m1: BTreeSet<LatticeIndex>,
    pub m2: BTreeSet<LatticeIndex>,
    /// Chain classes in M′ that meet M₂, each sorted.
    pub classes: Vec<Vec<LatticeIndex>>,
    pub oversized: Vec<ClassWitness>,
    pub phi0: f64,
    pub k: f64,
    pub r1: f64,
    pub delta: f64,
}

impl ResonantIndexSets {
    pub fn k_delta(&self) -> f64 {
        self.k.powf(self.delta)
    }

    /// P_m for m ∈ M₁, then P₂ʲ per class: (k^δ/3)-neighbourhoods.
    pub fn projectors(&self) -> Vec<IndexProjector> {
        let r = self.k_delta() / 3.0;
        let mut out: Vec<IndexProjector> = self
            .m1
            .iter()
            .map(|m| IndexProjector::new(format!("m1:{m}"), balls(&[*m], r)))
            .collect();
        for (j, class) in self.classes.iter().enumerate() {
            out.push(IndexProjector::new(format!("m2:{j}"), balls(class, r)));
        }
        out
    }

    /// Ω(δ) = {|||m||| ≤ k^δ}.
    pub fn p_delta(&self) -> IndexProjector {
        IndexProjector::ball("omega_delta", self.k_delta())
    }

    pub fn max_class_size(&self) -> usize {
        self.classes.iter().map(Vec::len).max().unwrap_or(0)
    }
}

fn in_o_m(lat: &QuasiLattice, k: f64, phi0: f64, m: &LatticeIndex, threshold: f64) -> bool {
    let p = lat.p_vec(m);
    (p.norm * p.norm + 2.0 * k * p.norm * (phi0 - p.angle).cos()).abs() <= threshold
}

/// The same threshold rule with τ scaled by `factor`.
fn scaled_mode(mode: &ThresholdMode, factor: f64) -> ThresholdMode {
    match *mode {
        ThresholdMode::Paper { tau, delta, contour } => ThresholdMode::Paper {
            tau: tau * factor,
            delta,
            contour,
        },
        ThresholdMode::Desk { t_res } => ThresholdMode::Desk { t_res: t_res * factor },
    }
}

/// Chain classes of `pts` under |||·||| ≤ link, by union-find.
fn chain_classes(pts: &[LatticeIndex], link: f64) -> Vec<Vec<LatticeIndex>> {
    let pos: HashMap<LatticeIndex, usize> = pts.iter().enumerate().map(|(i, m)| (*m, i)).collect();
    let grid = Grid::new(link, pts);
    let mut uf = UnionFind::new(pts.len());
    for (i, m) in pts.iter().enumerate() {
        for n in grid.candidates(m) {
            if dist(m, n) <= link {
                uf.union(i, pos[n]);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<LatticeIndex>> = BTreeMap::new();
    for (i, m) in pts.iter().enumerate() {
        let r = uf.find(i);
        groups.entry(r).or_default().push(*m);
    }
    groups.into_values().collect()
}

/// Breadth-first order of a class from `start`.
fn chain_order(class: &[LatticeIndex], start: LatticeIndex, link: f64) -> Vec<LatticeIndex> {
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([start]);
    let mut out = Vec::new();
    while let Some(m) = queue.pop_front() {
        out.push(m);
        for n in class {
            if !seen.contains(n) && dist(&m, n) <= link {
                seen.insert(*n);
                queue.push_back(*n);
            }
        }
    }
    out
}

/// M, M′, M₁, M₂ and the M₂ classes at φ₀. φ₀ must avoid the level-1 set
/// built with 8τ on indices up to 4k^δ.
pub fn build_resonant_sets(
    lat: &QuasiLattice,
    phi0: f64,
    k: f64,
    r1: f64,
    delta: f64,
    mode: &ThresholdMode,
) -> Result<ResonantIndexSets, MultiscaleError> {
    if !(k > 0.0 && r1 > 0.0 && delta > 0.0) {
        return Err(MultiscaleError::BadParameter(format!("k={k}, r1={r1}, delta={delta}")));
    }
    let phi0 = reduce_angle(phi0);
    let kd = k.powf(delta);
    let level1 = resonance_discs_level1(lat, k, &scaled_mode(mode, 8.0), 4.0 * kd);
    if !level1.real_arcs.contains(phi0) {
        return Err(MultiscaleError::Phi0Resonant { phi0 });
    }
    let range = k.powf(r1);
    let m_prime: BTreeSet<LatticeIndex> = enumerate_indices(2.0 * range)
        .into_par_iter()
        .filter(|m| !m.is_zero() && in_o_m(lat, k, phi0, m, mode.threshold(lat.mu, k, m.norm_triple())))
        .collect::<Vec<_>>()
        .into_iter()
        .collect();
    let lim = range * (1.0 + NORM_SLACK) + NORM_SLACK;
    let m: BTreeSet<LatticeIndex> = m_prime.iter().copied().filter(|m| m.norm_triple() <= lim).collect();
    let prime_vec: Vec<LatticeIndex> = m_prime.iter().copied().collect();
    let grid = Grid::new(kd, &prime_vec);
    let (m1, m2): (BTreeSet<LatticeIndex>, BTreeSet<LatticeIndex>) = m
        .iter()
        .partition(|a| !grid.candidates(a).any(|b| b != *a && dist(a, b) <= kd));
    let classes: Vec<Vec<LatticeIndex>> = chain_classes(&prime_vec, kd)
        .into_iter()
        .filter(|c| c.iter().any(|x| m2.contains(x)))
        .collect();
    let oversized = classes
        .iter()
        .enumerate()
        .filter(|(_, c)| c.len() > 4)
        .map(|(j, c)| {
            let start = *c.iter().find(|x| m2.contains(x)).expect("class meets M2");
            ClassWitness {
                class: j,
                chain: chain_order(c, start, kd),
            }
        })
        .collect();
    Ok(ResonantIndexSets {
        m,
        m_prime,
        m1,
        m2,
        classes,
        oversized,
        phi0,
        k,
        r1,
        delta,
    })
}

// ---------------------------------------------------------------------------
// block structure

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BlockReport {
    pub blocks: usize,
    pub members: usize,
    pub coupling_checks: usize,
    pub assembly_entries: usize,
    /// The assembled operator on the union was also built densely.
    pub dense_assembly: bool,
    pub boundary_checks: usize,
}

/// Dense assembly of the union is skipped above this many indices.
pub const DENSE_ASSEMBLY_LIMIT: usize = 1500;

/// Checks that the blocks are disjoint, that V never couples two of them and
/// that the block matrices are exactly the corresponding entries of the
/// operator on their union. With `boundary_width`, also checks that coupling
/// from a block to indices outside every block leaves only from points within
/// that distance of the block's complement.
pub fn verify_block_structure(
    lat: &QuasiLattice,
    pot: &TrigPotential,
    kappa: [f64; 2],
    l: u32,
    blocks: &[IndexProjector],
    boundary_width: Option<f64>,
) -> Result<BlockReport, MultiscaleError> {
    let mut owner: HashMap<LatticeIndex, usize> = HashMap::new();
    let mut report = BlockReport {
        blocks: blocks.len(),
        ..Default::default()
    };
    for (i, b) in blocks.iter().enumerate() {
        for m in b.members() {
            if let Some(&j) = owner.get(m) {
                debug_assert_ne!(i, j);
                return Err(MultiscaleError::BlockLeak {
                    check: LeakKind::Overlap,
                    row: *m,
                    col: *m,
                    value: 1.0,
                });
            }
            owner.insert(*m, i);
        }
    }
    report.members = owner.len();
    let terms: Vec<(LatticeIndex, Complex64)> = pot
        .terms()
        .filter(|(_, v)| **v != Complex64::new(0.0, 0.0))
        .map(|(q, v)| (*q, *v))
        .collect();
    // entry(m, n) = V_{m−n}: scan n = m − q for every block member
    for (i, b) in blocks.iter().enumerate() {
        for m in b.members() {
            for (q, v) in &terms {
                let n = *m - *q;
                report.coupling_checks += 1;
                if let Some(&j) = owner.get(&n) {
                    if j != i {
                        return Err(MultiscaleError::BlockLeak {
                            check: LeakKind::Coupling,
                            row: *m,
                            col: n,
                            value: v.norm(),
                        });
                    }
                }
            }
        }
    }
    let kc = real_kappa(kappa);
    let expected = |a: &LatticeIndex, b: &LatticeIndex| -> Complex64 {
        if a == b {
            diagonal_entry(lat, &kc, l, a)
        } else {
            pot.coeff(&(*a - *b))
        }
    };
    let mats: Vec<_> = blocks
        .par_iter()
        .map(|b| build_fiber(lat, pot, kc, l, b))
        .collect::<Result<Vec<_>, _>>()?;
    for (b, h) in blocks.iter().zip(&mats) {
        for (i, a) in b.members().iter().enumerate() {
            for (j, c) in b.members().iter().enumerate() {
                report.assembly_entries += 1;
                let want = expected(a, c);
                if h.entries[(i, j)] != want {
                    return Err(MultiscaleError::BlockLeak {
                        check: LeakKind::Assembly,
                        row: *a,
                        col: *c,
                        value: (h.entries[(i, j)] - want).norm(),
                    });
                }
            }
        }
    }
    if report.members <= DENSE_ASSEMBLY_LIMIT && report.members > 0 {
        let union = IndexProjector::new("union", owner.keys().copied());
        let h = build_fiber(lat, pot, kc, l, &union)?;
        for (i, a) in union.members().iter().enumerate() {
            for (j, c) in union.members().iter().enumerate() {
                let (bi, bj) = (owner[a], owner[c]);
                let want = if bi == bj {
                    let blk = &blocks[bi];
                    mats[bi].entries[(blk.position(a).unwrap(), blk.position(c).unwrap())]
                } else {
                    Complex64::new(0.0, 0.0)
                };
                if h.entries[(i, j)] != want {
                    return Err(MultiscaleError::BlockLeak {
                        check: LeakKind::Assembly,
                        row: *a,
                        col: *c,
                        value: (h.entries[(i, j)] - want).norm(),
                    });
                }
            }
        }
        report.dense_assembly = true;
    }
    if let Some(width) = boundary_width {
        let offsets = enumerate_indices(width);
        for (i, b) in blocks.iter().enumerate() {
            for m in b.members() {
                let leaves = terms.iter().any(|(q, _)| !owner.contains_key(&(*m - *q)));
                if !leaves {
                    continue;
                }
                report.boundary_checks += 1;
                let on_boundary = offsets.iter().any(|o| owner.get(&(*m + *o)) != Some(&i));
                if !on_boundary {
                    let (q, v) = terms.iter().find(|(q, _)| !owner.contains_key(&(*m - *q))).unwrap();
                    return Err(MultiscaleError::BlockLeak {
                        check: LeakKind::Boundary,
                        row: *m - *q,
                        col: *m,
                        value: v.norm(),
                    });
                }
            }
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// pole-based detection

#[derive(Clone, Debug, Serialize)]
pub struct M2Detection {
    pub set: BTreeSet<LatticeIndex>,
    pub blocks_scanned: usize,
    /// (block, pole location) for every pole found inside the disc.
    pub poles: Vec<(usize, Complex64)>,
}

/// Indices of Ω(r_high) \ Ω(r_low) (radii in |||·|||) whose V-connected block
/// has a pole of (P(H(κ e^{iφ}) − λ)P)⁻¹ within `pole_radius` of φ₀, with κ
/// frozen. With `candidates`, only those indices can be marked.
#[allow(clippy::too_many_arguments)]
pub fn detect_m2_level(
    lat: &QuasiLattice,
    pot: &TrigPotential,
    l: u32,
    lambda: f64,
    kappa: f64,
    phi0: f64,
    r_low: f64,
    r_high: f64,
    pole_radius: f64,
    candidates: Option<&BTreeSet<LatticeIndex>>,
    opts: &PoleScanOptions,
) -> Result<M2Detection, MultiscaleError> {
    if pole_radius <= 0.0 {
        return Ok(M2Detection {
            set: BTreeSet::new(),
            blocks_scanned: 0,
            poles: Vec::new(),
        });
    }
    let blocks = window_blocks(lat, pot, l, kappa, phi0, lambda, r_low, r_high, pole_radius);
    let scans: Vec<_> = blocks
        .par_iter()
        .enumerate()
        .map(|(b, proj)| {
            let fam = FiberBlockFamily {
                lat,
                pot,
                l,
                kappa,
                proj: proj.clone(),
                energy: lambda,
            };
            let disc = AngularDisc::new(
                Complex64::new(phi0, 0.0),
                pole_radius,
                DiscSource::Pole {
                    window: 0,
                    block: b,
                    id: 0,
                },
                0,
            );
            pole_scan(&fam, &disc, opts).map_err(|source| MultiscaleError::Scan { block: b, source })
        })
        .collect();
    let mut out = M2Detection {
        set: BTreeSet::new(),
        blocks_scanned: blocks.len(),
        poles: Vec::new(),
    };
    for (b, scan) in scans.into_iter().enumerate() {
        let scan = scan?;
        if scan.winding == 0 {
            continue;
        }
        for p in &scan.poles {
            out.poles.push((b, p.location));
        }
        for m in blocks[b].members() {
            let allowed = candidates.map_or(true, |c| c.contains(m));
            if allowed && near_resonant(lat, pot, l, kappa, phi0, lambda, m, pole_radius) {
                out.set.insert(*m);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// region coloring

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Core,
    Simple,
    Black,
    Grey,
    White,
    Nonres,
    Outside,
}

impl Color {
    pub const ALL: [Color; 7] = [
        Color::Core,
        Color::Simple,
        Color::Black,
        Color::Grey,
        Color::White,
        Color::Nonres,
        Color::Outside,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Core => "core",
            Color::Simple => "simple",
            Color::Black => "black",
            Color::Grey => "grey",
            Color::White => "white",
            Color::Nonres => "nonres",
            Color::Outside => "outside",
        }
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Sizes of the construction. `derived` fills every field from the exponents
/// as max(1, floor(k^e)); the fields stay public for desk experiments.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegionParams {
    pub k: f64,
    pub r1: f64,
    pub r2: f64,
    pub gamma: f64,
    pub delta0: f64,
    pub delta: f64,
    /// Ω_s = {0 < p_m ≤ simple_threshold} outside the core.
    pub simple_threshold: f64,
    /// Radii of Ω(r₁) and Ω(r₂) in |||·|||.
    pub core_radius: f64,
    pub outer_radius: f64,
    pub box_size: i64,
    pub small_box: i64,
    pub black_count: usize,
    pub grey_count: usize,
    pub simple_nbhd: f64,
    pub black_nbhd: f64,
    pub grey_nbhd: f64,
    pub white_nbhd: f64,
    pub nonres_nbhd: f64,
    /// Component linkage per color; also the merge distance for white and grey.
    pub sep_simple: f64,
    pub sep_black: f64,
    pub sep_grey: f64,
    pub sep_white: f64,
    pub sep_nonres: f64,
    /// Distance under which a nonres cluster joins a colored area.
    pub merge_nonres: f64,
}

fn floor_pow(k: f64, e: f64) -> f64 {
    k.powf(e).floor().max(1.0)
}

impl RegionParams {
    pub fn derived(k: f64, r1: f64, r2: f64, gamma: f64, delta: f64, simple_threshold: f64) -> Self {
        let d0 = gamma / 100.0;
        let g = gamma * r1;
        let b = d0 * r1;
        RegionParams {
            k,
            r1,
            r2,
            gamma,
            delta0: d0,
            delta,
            simple_threshold,
            core_radius: k.powf(r1),
            outer_radius: k.powf(r2),
            box_size: floor_pow(k, g) as i64,
            small_box: floor_pow(k, g / 2.0 + 2.0 * b) as i64,
            black_count: floor_pow(k, g / 2.0 + b) as usize,
            grey_count: floor_pow(k, g / 6.0 - b) as usize,
            simple_nbhd: floor_pow(k, r1 / 2.0),
            black_nbhd: floor_pow(k, g / 2.0 + b),
            grey_nbhd: floor_pow(k, g / 2.0 + 2.0 * b),
            white_nbhd: floor_pow(k, g / 6.0),
            nonres_nbhd: (k.powf(delta) / 3.0).floor().max(1.0),
            sep_simple: floor_pow(k, g),
            sep_black: floor_pow(k, g + b),
            sep_grey: floor_pow(k, g / 2.0 + 2.0 * b),
            sep_white: floor_pow(k, g / 6.0),
            sep_nonres: (k.powf(delta) / 3.0).floor().max(1.0),
            merge_nonres: floor_pow(k, delta),
        }
    }

    pub fn validate(&self) -> Result<(), MultiscaleError> {
        if !(self.outer_radius > self.core_radius) {
            return Err(MultiscaleError::BadParameter("outer radius must exceed the core radius".into()));
        }
        if self.box_size < 1 || self.small_box < 1 {
            return Err(MultiscaleError::BadParameter("box sizes must be at least 1".into()));
        }
        Ok(())
    }

    fn sep(&self, c: Color) -> f64 {
        match c {
            Color::Simple => self.sep_simple,
            Color::Black => self.sep_black,
            Color::Grey => self.sep_grey,
            Color::White => self.sep_white,
            Color::Nonres => self.sep_nonres,
            Color::Core | Color::Outside => f64::INFINITY,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ComponentReport {
    pub color: Color,
    pub id: usize,
    pub size: usize,
    pub m2_count: usize,
    pub bbox_min: [i64; 4],
    pub bbox_max: [i64; 4],
    /// |||·||| of the bounding-box diagonal, an upper bound on the diameter.
    pub diameter_bound: f64,
    /// Element-count and size bounds with c = 1, and the
    /// measured/bound ratios.
    pub m2_bound: Option<f64>,
    pub size_bound: Option<f64>,
    pub m2_ratio: Option<f64>,
    pub size_ratio: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RegionColoring {
    pub assignment: BTreeMap<LatticeIndex, Color>,
    pub components: BTreeMap<(Color, usize), Vec<LatticeIndex>>,
    pub params: RegionParams,
    pub merge_passes: usize,
    pub reports: Vec<ComponentReport>,
    /// Pairs of simple points closer than k^{r₁}.
    pub simple_isolation_violations: usize,
}

impl RegionColoring {
    pub fn color_of(&self, m: &LatticeIndex) -> Option<Color> {
        self.assignment.get(m).copied()
    }

    pub fn indices_of(&self, c: Color) -> Vec<LatticeIndex> {
        self.assignment.iter().filter(|(_, v)| **v == c).map(|(m, _)| *m).collect()
    }

    /// One projector per component, colored ones first, core last.
    pub fn block_projectors(&self) -> Vec<IndexProjector> {
        self.components
            .iter()
            .map(|((c, j), v)| IndexProjector::new(format!("{c}:{j}"), v.iter().copied()))
            .collect()
    }

    pub fn component_count(&self, c: Color) -> usize {
        self.components.keys().filter(|(col, _)| *col == c).count()
    }
}

const MERGE_ORDER: [Color; 3] = [Color::White, Color::Grey, Color::Black];
const MAX_MERGE_PASSES: usize = 32;

/// One boundary-adjustment pass; returns the number of recolored indices.
/// Areas are snapshotted at the start of each rule so the pass does not
/// depend on component order.
pub fn merge_pass(assignment: &mut BTreeMap<LatticeIndex, Color>, p: &RegionParams) -> usize {
    let of = |a: &BTreeMap<LatticeIndex, Color>, c: Color| -> Vec<LatticeIndex> {
        a.iter().filter(|(_, v)| **v == c).map(|(m, _)| *m).collect()
    };
    let mut changed = 0;
    // nonres clusters near any colored area go to the lightest one
    {
        let grids: Vec<(Color, Grid)> = MERGE_ORDER
            .iter()
            .map(|&c| (c, Grid::new(p.merge_nonres, &of(assignment, c))))
            .collect();
        for comp in linkage_components(&of(assignment, Color::Nonres), p.sep_nonres) {
            let target = grids
                .iter()
                .find(|(_, g)| comp.iter().any(|m| g.any_within(m, p.merge_nonres)))
                .map(|(c, _)| *c);
            if let Some(c) = target {
                for m in &comp {
                    assignment.insert(*m, c);
                }
                changed += comp.len();
            }
        }
    }
    // white clusters near grey or black go to the lighter of the two
    {
        let grids: Vec<(Color, Grid)> = [Color::Grey, Color::Black]
            .iter()
            .map(|&c| (c, Grid::new(p.sep_white, &of(assignment, c))))
            .collect();
        for comp in linkage_components(&of(assignment, Color::White), p.sep_white) {
            let target = grids
                .iter()
                .find(|(_, g)| comp.iter().any(|m| g.any_within(m, p.sep_white)))
                .map(|(c, _)| *c);
            if let Some(c) = target {
                for m in &comp {
                    assignment.insert(*m, c);
                }
                changed += comp.len();
            }
        }
    }
    // grey clusters near black become black
    {
        let black = Grid::new(p.sep_grey, &of(assignment, Color::Black));
        for comp in linkage_components(&of(assignment, Color::Grey), p.sep_grey) {
            if comp.iter().any(|m| black.any_within(m, p.sep_grey)) {
                for m in &comp {
                    assignment.insert(*m, Color::Black);
                }
                changed += comp.len();
            }
        }
    }
    changed
}

fn box_key(m: &LatticeIndex, side: i64) -> [i64; 4] {
    m.as_array().map(|x| x.div_euclid(side))
}

/// Count over the 3⁴ boxes around `key`.
fn count_around(counts: &HashMap<[i64; 4], usize>, key: [i64; 4]) -> usize {
    (0..81)
        .map(|code: i64| {
            let mut c = code;
            let mut k = key;
            for x in k.iter_mut() {
                *x += c % 3 - 1;
                c /= 3;
            }
            counts.get(&k).copied().unwrap_or(0)
        })
        .sum()
}

fn component_report(color: Color, id: usize, members: &[LatticeIndex], m2: &BTreeSet<LatticeIndex>, p: &RegionParams) -> ComponentReport {
    let mut lo = [i64::MAX; 4];
    let mut hi = [i64::MIN; 4];
    for m in members {
        for (i, x) in m.as_array().into_iter().enumerate() {
            lo[i] = lo[i].min(x);
            hi[i] = hi[i].max(x);
        }
    }
    let diag = LatticeIndex::from_array([hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2], hi[3] - lo[3]]);
    let m2_count = members.iter().filter(|m| m2.contains(m)).count();
    let (g, b, k) = (p.gamma * p.r1, p.delta0 * p.r1, p.k);
    let (m2_bound, size_bound) = match color {
        Color::Black => (Some(k.powf(g + 3.0)), Some(k.powf(1.5 * g + 3.0))),
        Color::Grey => (Some(k.powf(g / 2.0 + b)), Some(k.powf(5.0 * g / 6.0 + 4.0 * b))),
        Color::White => (Some(k.powf(g / 6.0 - b)), Some(k.powf(g / 3.0 - b))),
        _ => (None, None),
    };
    let diameter_bound = diag.norm_triple();
    ComponentReport {
        color,
        id,
        size: members.len(),
        m2_count,
        bbox_min: lo,
        bbox_max: hi,
        diameter_bound,
        m2_bound,
        size_bound,
        m2_ratio: m2_bound.map(|b| m2_count as f64 / b),
        size_ratio: size_bound.map(|b| diameter_bound / b),
    }
}

/// Colors Ω(r₂) from the next-level resonant set `m2` and the full resonant
/// set `m_all` = M(φ₀, r₂).
pub fn color_regions(
    lat: &QuasiLattice,
    m2: &BTreeSet<LatticeIndex>,
    m_all: &BTreeSet<LatticeIndex>,
    p: &RegionParams,
) -> Result<RegionColoring, MultiscaleError> {
    p.validate()?;
    let universe = enumerate_indices(p.outer_radius);
    let core_lim = p.core_radius * (1.0 + NORM_SLACK) + NORM_SLACK;
    let in_core = |m: &LatticeIndex| m.norm_triple() <= core_lim;
    let annulus: Vec<LatticeIndex> = universe.iter().copied().filter(|m| !in_core(m)).collect();

    // simple region
    let simple_pts: Vec<LatticeIndex> = annulus
        .iter()
        .copied()
        .filter(|m| {
            let pm = lat.p_norm(m);
            pm > 0.0 && pm <= p.simple_threshold
        })
        .collect();
    let simple = neighborhood(&universe, &simple_pts, p.simple_nbhd);
    let isolation = Grid::new(p.core_radius, &simple_pts);
    let simple_isolation_violations = simple_pts
        .iter()
        .map(|m| isolation.candidates(m).filter(|n| *n != m && dist(m, n) < p.core_radius).count())
        .sum::<usize>()
        / 2;

    // big boxes over the annulus outside the simple region
    let domain: Vec<LatticeIndex> = annulus.iter().copied().filter(|m| !simple.contains(m)).collect();
    let m2_dom: Vec<LatticeIndex> = domain.iter().copied().filter(|m| m2.contains(m)).collect();
    let mut big_counts: HashMap<[i64; 4], usize> = HashMap::new();
    for m in &m2_dom {
        *big_counts.entry(box_key(m, p.box_size)).or_default() += 1;
    }
    let is_black_box = |key: [i64; 4]| count_around(&big_counts, key) > p.black_count;
    let black_core: Vec<LatticeIndex> = domain
        .iter()
        .copied()
        .filter(|m| is_black_box(box_key(m, p.box_size)))
        .collect();
    let black = neighborhood(&universe, &black_core, p.black_nbhd);

    // small boxes inside white big boxes
    let white_dom: Vec<LatticeIndex> = domain
        .iter()
        .copied()
        .filter(|m| !is_black_box(box_key(m, p.box_size)))
        .collect();
    let mut small_counts: HashMap<[i64; 4], usize> = HashMap::new();
    for m in white_dom.iter().filter(|m| m2.contains(m)) {
        *small_counts.entry(box_key(m, p.small_box)).or_default() += 1;
    }
    let is_grey_box = |key: [i64; 4]| count_around(&small_counts, key) > p.grey_count;
    let grey_core: Vec<LatticeIndex> = white_dom
        .iter()
        .copied()
        .filter(|m| is_grey_box(box_key(m, p.small_box)))
        .collect();
    let grey = neighborhood(&universe, &grey_core, p.grey_nbhd);
    let white_pts: Vec<LatticeIndex> = white_dom
        .iter()
        .copied()
        .filter(|m| m2.contains(m) && !is_grey_box(box_key(m, p.small_box)))
        .collect();
    let white = neighborhood(&universe, &white_pts, p.white_nbhd);

    let nonres_pts: Vec<LatticeIndex> = m_all
        .iter()
        .copied()
        .filter(|m| !in_core(m) && !m2.contains(m) && !simple_pts.contains(m))
        .filter(|m| m.norm_triple() <= p.outer_radius * (1.0 + NORM_SLACK) + NORM_SLACK)
        .collect();
    let nonres = neighborhood(&universe, &nonres_pts, p.nonres_nbhd);

    let mut assignment: BTreeMap<LatticeIndex, Color> = BTreeMap::new();
    for m in &universe {
        let c = if simple.contains(m) {
            Color::Simple
        } else if black.contains(m) {
            Color::Black
        } else if grey.contains(m) {
            Color::Grey
        } else if white.contains(m) {
            Color::White
        } else if nonres.contains(m) {
            Color::Nonres
        } else if in_core(m) {
            Color::Core
        } else {
            Color::Outside
        };
        assignment.insert(*m, c);
    }

    let mut merge_passes = 0;
    while merge_passes < MAX_MERGE_PASSES {
        merge_passes += 1;
        if merge_pass(&mut assignment, p) == 0 {
            break;
        }
    }

    // the core gives up everything within a component's separation
    for c in [Color::Simple, Color::Black, Color::Grey, Color::White, Color::Nonres] {
        let pts: Vec<LatticeIndex> = assignment.iter().filter(|(_, v)| **v == c).map(|(m, _)| *m).collect();
        if pts.is_empty() {
            continue;
        }
        let grid = Grid::new(p.sep(c), &pts);
        let lost: Vec<LatticeIndex> = assignment
            .iter()
            .filter(|(m, v)| **v == Color::Core && grid.any_within(m, p.sep(c)))
            .map(|(m, _)| *m)
            .collect();
        for m in lost {
            assignment.insert(m, Color::Outside);
        }
    }

    let mut components: BTreeMap<(Color, usize), Vec<LatticeIndex>> = BTreeMap::new();
    for c in [Color::Simple, Color::Black, Color::Grey, Color::White, Color::Nonres] {
        let pts: Vec<LatticeIndex> = assignment.iter().filter(|(_, v)| **v == c).map(|(m, _)| *m).collect();
        for (j, comp) in linkage_components(&pts, p.sep(c)).into_iter().enumerate() {
            components.insert((c, j), comp);
        }
    }
    let core: Vec<LatticeIndex> = assignment
        .iter()
        .filter(|(_, v)| **v == Color::Core)
        .map(|(m, _)| *m)
        .collect();
    if !core.is_empty() {
        components.insert((Color::Core, 0), core);
    }
    let reports = components
        .iter()
        .map(|((c, j), v)| component_report(*c, *j, v, m2, p))
        .collect();
    Ok(RegionColoring {
        assignment,
        components,
        params: p.clone(),
        merge_passes,
        reports,
        simple_isolation_violations,
    })
}

/// Minimum |||·||| distance between two components of the same color,
/// computed pairwise.
pub fn min_component_separation(coloring: &RegionColoring, c: Color) -> Option<f64> {
    let comps: Vec<&Vec<LatticeIndex>> = coloring
        .components
        .iter()
        .filter(|((col, _), _)| *col == c)
        .map(|(_, v)| v)
        .collect();
    let mut best: Option<f64> = None;
    for i in 0..comps.len() {
        for j in (i + 1)..comps.len() {
            for a in comps[i] {
                for b in comps[j] {
                    let d = dist(a, b);
                    best = Some(best.map_or(d, |x: f64| x.min(d)));
                }
            }
        }
    }
    best
}

// ---------------------------------------------------------------------------
// counting near curves

pub enum CountMode<'a> {
    /// Radial distance |ρ − κ(θ)| ≤ ε₀ to the curve at the point's own angle,
    /// κ interpolated linearly in φ along each arc.
    CurveDistance { curve: &'a IsoCurve, l: u32 },
    /// ‖(H(z) − energy)⁻¹‖ > ε₀⁻¹ on the block |||m||| ≤ block_radius.
    ResolventThreshold {
        pot: &'a TrigPotential,
        l: u32,
        block_radius: f64,
        energy: f64,
    },
}

#[derive(Clone, Debug, Serialize)]
pub struct CountReport {
    pub count: usize,
    pub witnesses: Vec<LatticeIndex>,
    pub enumerated: usize,
    /// L^{2/3}·k with L the enumeration radius and c = 1.
    pub bound: f64,
    pub ratio: f64,
}

/// κ at angle θ from the curve samples of the arc containing θ.
pub fn curve_kappa(curve: &IsoCurve, theta: f64) -> Option<f64> {
    let theta = reduce_angle(theta);
    let &(a, b) = curve.arcs.arcs().iter().find(|(a, b)| *a <= theta && theta <= *b)?;
    let mut pts: Vec<(f64, f64)> = curve
        .points
        .iter()
        .filter(|p| p.phi >= a && p.phi <= b)
        .map(|p| (p.phi, p.kappa))
        .collect();
    pts.sort_by(|x, y| x.0.total_cmp(&y.0));
    let first = *pts.first()?;
    let last = *pts.last()?;
    if theta <= first.0 {
        return Some(first.1);
    }
    if theta >= last.0 {
        return Some(last.1);
    }
    let i = pts.partition_point(|p| p.0 <= theta);
    let (x0, y0) = pts[i - 1];
    let (x1, y1) = pts[i];
    Some(y0 + (y1 - y0) * (theta - x0) / (x1 - x0))
}

/// Counts z = center + p_n, |||n||| ≤ radius_triple, near the curve.
pub fn count_near_curve(
    lat: &QuasiLattice,
    center: [f64; 2],
    radius_triple: f64,
    eps0: f64,
    mode: &CountMode<'_>,
) -> Result<CountReport, MultiscaleError> {
    let ns = enumerate_indices(radius_triple);
    let k = match mode {
        CountMode::CurveDistance { curve, l } => curve.lambda.powf(1.0 / (2.0 * *l as f64)),
        CountMode::ResolventThreshold { l, energy, .. } => energy.powf(1.0 / (2.0 * *l as f64)),
    };
    let hits: Vec<Result<bool, MultiscaleError>> = ns
        .par_iter()
        .map(|n| {
            let p = lat.p_xy(n);
            let z = [center[0] + p[0], center[1] + p[1]];
            match mode {
                CountMode::CurveDistance { curve, .. } => {
                    let rho = z[0].hypot(z[1]);
                    let theta = z[1].atan2(z[0]);
                    Ok(curve_kappa(curve, theta).is_some_and(|kap| (rho - kap).abs() <= eps0))
                }
                CountMode::ResolventThreshold {
                    pot,
                    l,
                    block_radius,
                    energy,
                } => {
                    let proj = IndexProjector::ball("block", *block_radius);
                    let h = build_fiber(lat, pot, real_kappa(z), *l, &proj)?;
                    let norm = resolvent_norm(&h, Complex64::new(*energy, 0.0), &proj)?;
                    Ok(norm > 1.0 / eps0)
                }
            }
        })
        .collect();
    let mut witnesses = Vec::new();
    for (n, h) in ns.iter().zip(hits) {
        if h? {
            witnesses.push(*n);
        }
    }
    let bound = radius_triple.max(1.0).powf(2.0 / 3.0) * k;
    Ok(CountReport {
        count: witnesses.len(),
        witnesses,
        enumerated: ns.len(),
        bound,
        ratio: 0.0,
    }
    .with_ratio())
}

impl CountReport {
    fn with_ratio(mut self) -> Self {
        self.ratio = self.count as f64 / self.bound;
        self
    }
}

// ---------------------------------------------------------------------------
// parameter schedule

#[derive(Clone, Debug, Serialize)]
pub struct Feasibility {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Range and chosen value for one level's r_n and r′_n.
#[derive(Clone, Debug, Serialize)]
pub struct LevelSchedule {
    pub n: usize,
    pub r_range: (f64, f64),
    pub r: f64,
    pub rp_range: (f64, f64),
    pub rp: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamSchedule {
    pub k: f64,
    pub delta: f64,
    pub mu: f64,
    pub l: u32,
    pub q: f64,
    pub gamma: f64,
    pub delta0: f64,
    pub beta: f64,
    pub r1: f64,
    pub r1p: f64,
    pub levels: Vec<LevelSchedule>,
    pub checks: Vec<Feasibility>,
    pub warnings: Vec<String>,
}

impl ParamSchedule {
    pub fn all_hold(&self) -> bool {
        self.checks.iter().all(|c| c.holds)
    }
}

/// Geometric midpoint of a range, or its lower end when empty or unbounded.
fn pick(lo: f64, hi: f64) -> f64 {
    if lo.is_finite() && hi.is_finite() && lo > 0.0 && hi > lo {
        (lo * hi).sqrt()
    } else {
        lo
    }
}

/// Exponents and ranges of the recursion. `paper` rejects δ ≥ 1/(100μ); desk
/// mode records a warning instead.
#[allow(clippy::too_many_arguments)]
pub fn parameter_schedule(
    k: f64,
    delta: f64,
    mu: f64,
    l: u32,
    q: f64,
    n_levels: usize,
    r1: f64,
    gamma: f64,
    paper: bool,
) -> Result<ParamSchedule, MultiscaleError> {
    if !(k > 1.0 && delta > 0.0 && mu > 0.0 && l >= 1 && gamma > 0.0) {
        return Err(MultiscaleError::BadParameter(format!(
            "need k > 1, delta > 0, mu > 0, l >= 1, gamma > 0 (k={k}, delta={delta}, mu={mu}, l={l}, gamma={gamma})"
        )));
    }
    let mut warnings = Vec::new();
    let dmax = 1.0 / (100.0 * mu);
    if delta >= dmax {
        if paper {
            return Err(MultiscaleError::BadParameter(format!("delta = {delta} must be below 1/(100 mu) = {dmax}")));
        }
        warnings.push(format!("delta = {delta} is not below 1/(100 mu) = {dmax}"));
    }
    let lf = l as f64;
    let r1p = 40.0 * mu * r1 + 2.0 * lf;
    let beta = 2.0 * lf - 2.0 - 41.0 * mu * delta;
    let delta0 = gamma / 100.0;
    let kd = k.powf(delta);
    let mut checks = Vec::new();
    let mut check = |name: &str, lhs: f64, rhs: f64| {
        checks.push(Feasibility {
            name: name.to_string(),
            lhs,
            rhs,
            holds: lhs < rhs,
        })
    };
    check("2 < r1", 2.0, r1);
    check("r1 < k^(delta/8)", r1, k.powf(delta / 8.0));
    check("delta < 1/(100 mu)", delta, dmax);
    check("Q < k^delta/3", q, kd / 3.0);
    check("45 r1' + 2l < k^delta", 45.0 * r1p + 2.0 * lf, kd);
    check("100 < delta0 r1", 100.0, delta0 * r1);
    check("delta0 < gamma/24", delta0, gamma / 24.0);
    check("gamma < 1/3", gamma, 1.0 / 3.0);
    check("0 < beta", 0.0, beta);

    let mut levels = Vec::new();
    if n_levels >= 2 {
        let r_range = (kd, k.powf(gamma * 1e-7 * r1));
        let r2 = pick(r_range.0, r_range.1);
        let rp_range = (5.0 * mu * r2, beta / 128.0 * k.powf(delta0 * r1 - delta - 3.0));
        let r2p = pick(rp_range.0, rp_range.1);
        check("k^delta < r2", r_range.0, r2);
        check("r2 < k^(gamma 1e-7 r1)", r2, r_range.1);
        check("5 mu r2 < r2'", rp_range.0, r2p);
        check("r2' < beta/128 k^(delta0 r1 - delta - 3)", r2p, rp_range.1);
        levels.push(LevelSchedule {
            n: 2,
            r_range,
            r: r2,
            rp_range,
            rp: r2p,
        });
    }
    let mut r_prev2 = r1;
    for n in 3..=n_levels {
        let r_prev = levels.last().map(|x: &LevelSchedule| x.r).unwrap_or(r1);
        let r_range = (k.powf(r_prev2), k.powf(gamma * 1e-7 * r_prev));
        let r = pick(r_range.0, r_range.1);
        let rp_range = (k.powf(2.0 * gamma * 1e-4 * r_prev), k.powf(delta0 * r_prev / 2.0));
        let rp = pick(rp_range.0, rp_range.1);
        check(&format!("k^r{} < r{n}", n - 2), r_range.0, r);
        check(&format!("r{n} < k^(gamma 1e-7 r{})", n - 1), r, r_range.1);
        check(&format!("k^(2 gamma 1e-4 r{}) < r{n}'", n - 1), rp_range.0, rp);
        check(&format!("r{n}' < k^(delta0 r{} / 2)", n - 1), rp, rp_range.1);
        levels.push(LevelSchedule {
            n,
            r_range,
            r,
            rp_range,
            rp,
        });
        r_prev2 = r_prev;
    }
    Ok(ParamSchedule {
        k,
        delta,
        mu,
        l,
        q,
        gamma,
        delta0,
        beta,
        r1,
        r1p,
        levels,
        checks,
        warnings,
    })
}
