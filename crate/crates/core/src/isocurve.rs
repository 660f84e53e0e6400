//! Isoenergetic curves: κ⁽ⁿ⁾(λ, φ) solving λ⁽ⁿ⁾(κν(φ)) = λ on the
//! non-resonant arcs, and the level-by-level pipeline that produces them.

use std::collections::BTreeSet;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::lattice::{enumerate_indices, LatticeIndex, QuasiLattice};
use crate::operator::{build_fiber, free_energy, real_kappa, IndexProjector, TrigPotential};
use crate::resonance::{
    resonance_discs_level1, resonant_set_next, scan_windows, AngleSetLevel, ArcSet, FiberBlockFamily,
    PoleScanOptions, ResonanceError, ScanTask, ThresholdMode,
};
use crate::spectra::{eigenvalue_in_interval_value, SpectraError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IsoError {
    #[error("resonant angle {phi}: {source}")]
    Resonant { phi: f64, source: SpectraError },
    #[error("no root in the bracket at phi = {phi}")]
    NoRootInBracket { phi: f64 },
    #[error("eigenvalue map is not monotone on the bracket at phi = {phi}")]
    NotMonotone { phi: f64 },
    #[error("closure residual {residual:e} exceeds tolerance at phi = {phi}")]
    NotClosed { phi: f64, residual: f64 },
    #[error("level {0} is not configured")]
    BadLevel(u32),
    #[error("curves share no sample angles")]
    EmptyIntersection,
    #[error("at phi = {phi}: {source}")]
    Spectra { phi: f64, source: SpectraError },
    #[error(transparent)]
    Resonance(#[from] ResonanceError),
}

/// Operator data and per-level truncation used to evaluate λ⁽ⁿ⁾.
#[derive(Clone, Debug)]
pub struct IsoContext<'a> {
    pub lat: &'a QuasiLattice,
    pub pot: &'a TrigPotential,
    pub l: u32,
    /// Ball radius of the truncation at level n is `radii[n-1]`.
    pub radii: Vec<f64>,
    /// Half-width of the eigenvalue interval at level n.
    pub half_widths: Vec<f64>,
}

impl IsoContext<'_> {
    pub fn levels(&self) -> u32 {
        self.radii.len() as u32
    }

    fn level_index(&self, level: u32) -> Result<usize, IsoError> {
        if level == 0 || level > self.levels() {
            return Err(IsoError::BadLevel(level));
        }
        Ok(level as usize - 1)
    }

    /// λ⁽ⁿ⁾(κν(φ)): the unique eigenvalue of the level truncation near κ^{2l}.
    pub fn lambda_at(&self, level: u32, kappa: f64, phi: f64) -> Result<f64, IsoError> {
        let i = self.level_index(level)?;
        let proj = IndexProjector::ball(format!("P{level}"), self.radii[i]);
        let kv = [kappa * phi.cos(), kappa * phi.sin()];
        let h = build_fiber(self.lat, self.pot, real_kappa(kv), self.l, &proj)
            .map_err(|e| IsoError::Spectra { phi, source: e.into() })?;
        let center = free_energy(self.lat, kv, self.l, &LatticeIndex::ZERO);
        eigenvalue_in_interval_value(&h, center, self.half_widths[i]).map_err(|source| {
                if source.is_resonance() {
                    IsoError::Resonant { phi, source }
                } else {
                    IsoError::Spectra { phi, source }
                }
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IsoCurvePoint {
    pub phi: f64,
    pub kappa: f64,
    pub level: u32,
    pub closure_residual: f64,
    pub dkappa_dphi: Option<f64>,
}

impl IsoCurvePoint {
    pub fn xy(&self) -> [f64; 2] {
        [self.kappa * self.phi.cos(), self.kappa * self.phi.sin()]
    }
}

const MONOTONE_SAMPLES: usize = 32;

/// κ⁽ⁿ⁾(λ, φ). The bracket grows away from the seed (default λ^{1/2l}) on the
/// side the free slope points to, never leaving [0.5, 1.5]·λ^{1/2l}.
pub fn kappa_at(
    ctx: &IsoContext<'_>,
    level: u32,
    lambda: f64,
    phi: f64,
    seed: Option<f64>,
) -> Result<IsoCurvePoint, IsoError> {
    kappa_root(ctx, level, lambda, phi, seed, true)
}

fn kappa_root(
    ctx: &IsoContext<'_>,
    level: u32,
    lambda: f64,
    phi: f64,
    seed: Option<f64>,
    check_monotone: bool,
) -> Result<IsoCurvePoint, IsoError> {
    ctx.level_index(level)?;
    let base = lambda.powf(1.0 / (2.0 * ctx.l as f64));
    let (outer_lo, outer_hi) = (0.5 * base, 1.5 * base);
    let g = |kappa: f64| ctx.lambda_at(level, kappa, phi).map(|v| v - lambda);
    let tol = 1e-10 * lambda;
    let seed = seed.unwrap_or(base).clamp(outer_lo, outer_hi);
    let g0 = g(seed)?;
    if g0 == 0.0 {
        return Ok(IsoCurvePoint {
            phi,
            kappa: seed,
            level,
            closure_residual: 0.0,
            dkappa_dphi: None,
        });
    }
    // free-operator slope gives the side and scale of the first bracket
    let lf = ctx.l as f64;
    let guess = g0 / (2.0 * lf * seed.powi(2 * ctx.l as i32 - 1));
    let mut half = (2.0 * guess.abs()).max(1e-9 * seed);
    let (mut lo, mut hi, mut glo, mut ghi);
    loop {
        if g0 > 0.0 {
            lo = (seed - half).max(outer_lo);
            hi = seed;
        } else {
            lo = seed;
            hi = (seed + half).min(outer_hi);
        }
        glo = if lo == seed { g0 } else { g(lo)? };
        ghi = if hi == seed { g0 } else { g(hi)? };
        if glo < 0.0 && ghi > 0.0 {
            break;
        }
        if glo > 0.0 && ghi < 0.0 {
            return Err(IsoError::NotMonotone { phi });
        }
        if lo == outer_lo || hi == outer_hi {
            return Err(IsoError::NoRootInBracket { phi });
        }
        half *= 2.0;
    }
    let mut prev = glo;
    for j in (1..MONOTONE_SAMPLES).filter(|_| check_monotone) {
        let x = lo + (hi - lo) * j as f64 / MONOTONE_SAMPLES as f64;
        let v = g(x)?;
        if v <= prev {
            return Err(IsoError::NotMonotone { phi });
        }
        prev = v;
    }
    if check_monotone && ghi <= prev {
        return Err(IsoError::NotMonotone { phi });
    }
    // Illinois false position, bisecting when it stalls
    let mut side = 0i8;
    let mut best = (seed, g0.abs());
    for _ in 0..200 {
        let mut x = (lo * ghi - hi * glo) / (ghi - glo);
        if !(x > lo && x < hi) {
            x = 0.5 * (lo + hi);
        }
        let v = g(x)?;
        if v.abs() < best.1 {
            best = (x, v.abs());
        }
        if v == 0.0 {
            break;
        }
        if v < 0.0 {
            lo = x;
            glo = v;
            if side == -1 {
                ghi *= 0.5;
            }
            side = -1;
        } else {
            hi = x;
            ghi = v;
            if side == 1 {
                glo *= 0.5;
            }
            side = 1;
        }
        if hi - lo <= 4.0 * f64::EPSILON * hi {
            break;
        }
    }
    let (kappa, residual) = best;
    if residual > tol {
        return Err(IsoError::NotClosed { phi, residual });
    }
    Ok(IsoCurvePoint {
        phi,
        kappa,
        level,
        closure_residual: residual,
        dkappa_dphi: None,
    })
}

/// ∂κ/∂λ by a central difference with relative step `rel`.
pub fn dkappa_dlambda(ctx: &IsoContext<'_>, level: u32, lambda: f64, phi: f64, rel: f64) -> Result<f64, IsoError> {
    let center = kappa_at(ctx, level, lambda, phi, None)?.kappa;
    let dl = rel * lambda;
    let up = kappa_root(ctx, level, lambda + dl, phi, Some(center), false)?.kappa;
    let down = kappa_root(ctx, level, lambda - dl, phi, Some(center), false)?.kappa;
    Ok((up - down) / (2.0 * dl))
}

#[derive(Clone, Debug, Serialize)]
pub struct SampleFailure {
    pub phi: f64,
    pub reason: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct IsoCurve {
    pub lambda: f64,
    pub level: u32,
    pub points: Vec<IsoCurvePoint>,
    pub arcs: ArcSet,
    /// Samples inside the arcs where the root find failed.
    pub failures: Vec<SampleFailure>,
}

/// φ_i = a + (i + ½)(b − a)/n on every arc.
pub fn sample_angles(arcs: &ArcSet, samples_per_arc: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for &(a, b) in arcs.arcs() {
        let n = samples_per_arc as f64;
        let step = (b - a) / (10.0 * n);
        for i in 0..samples_per_arc {
            out.push((a + (i as f64 + 0.5) * (b - a) / n, step));
        }
    }
    out
}

/// Trace the level curve on `arcs`. Seeds come from `seeds` at equal φ when given.
pub fn trace_curve(
    ctx: &IsoContext<'_>,
    level: u32,
    lambda: f64,
    arcs: &ArcSet,
    samples_per_arc: usize,
    seeds: Option<&IsoCurve>,
) -> IsoCurve {
    let grid = sample_angles(arcs, samples_per_arc);
    let results: Vec<Result<IsoCurvePoint, IsoError>> = grid
        .par_iter()
        .map(|&(phi, step)| {
            let seed = seeds.and_then(|c| c.points.iter().find(|p| p.phi == phi)).map(|p| p.kappa);
            let mut pt = kappa_at(ctx, level, lambda, phi, seed)?;
            let up = kappa_root(ctx, level, lambda, phi + step, Some(pt.kappa), false);
            let down = kappa_root(ctx, level, lambda, phi - step, Some(pt.kappa), false);
            if let (Ok(u), Ok(d)) = (up, down) {
                pt.dkappa_dphi = Some((u.kappa - d.kappa) / (2.0 * step));
            }
            Ok(pt)
        })
        .collect();
    let mut points = Vec::new();
    let mut failures = Vec::new();
    for (&(phi, _), r) in grid.iter().zip(results) {
        match r {
            Ok(p) => points.push(p),
            Err(e) => failures.push(SampleFailure {
                phi,
                reason: e.to_string(),
            }),
        }
    }
    IsoCurve {
        lambda,
        level,
        points,
        arcs: arcs.clone(),
        failures,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CurveDiff {
    pub count: usize,
    pub max_abs: f64,
    pub mean_abs: f64,
    /// (φ, h = κ_B − κ_A, ∂h/∂φ when both derivatives exist)
    pub rows: Vec<(f64, f64, Option<f64>)>,
}

pub fn curve_diff(a: &IsoCurve, b: &IsoCurve) -> Result<CurveDiff, IsoError> {
    let mut rows = Vec::new();
    for pb in &b.points {
        if let Some(pa) = a.points.iter().find(|p| p.phi == pb.phi) {
            let dh = match (pa.dkappa_dphi, pb.dkappa_dphi) {
                (Some(x), Some(y)) => Some(y - x),
                _ => None,
            };
            rows.push((pb.phi, pb.kappa - pa.kappa, dh));
        }
    }
    if rows.is_empty() {
        return Err(IsoError::EmptyIntersection);
    }
    let abs: Vec<f64> = rows.iter().map(|r| r.1.abs()).collect();
    Ok(CurveDiff {
        count: rows.len(),
        max_abs: abs.iter().copied().fold(0.0, f64::max),
        mean_abs: abs.iter().sum::<f64>() / abs.len() as f64,
        rows,
    })
}

/// Settings for a multi-level run at energy λ.
#[derive(Clone, Debug, Serialize)]
pub struct PipelineConfig {
    pub lambda: f64,
    pub l: u32,
    pub mode: ThresholdMode,
    /// Truncation radius per level; level 1's also bounds the working range of O⁽¹⁾.
    pub radii: Vec<f64>,
    /// Disc radius around poles at levels 2, 3, ...
    pub pole_radii: Vec<f64>,
    pub window_half_width: f64,
    pub samples_per_arc: usize,
    /// Eigenvalue interval half-width; defaults to the level-1 ε₁.
    pub half_width: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct LevelResult {
    pub set: AngleSetLevel,
    pub curve: IsoCurve,
    /// κ⁽ⁿ⁾ − κ⁽ⁿ⁻¹⁾ on this level's sample angles.
    pub diff: Option<CurveDiff>,
    /// Number of determinant blocks scanned to build this level's set.
    pub scanned_blocks: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct PipelineResult {
    pub k: f64,
    pub levels: Vec<LevelResult>,
    /// First failure that stopped the run.
    pub error: Option<PipelineFailure>,
}

#[derive(Clone, Debug, Serialize)]
pub struct PipelineFailure {
    pub level: u32,
    pub message: String,
    /// A contour met a zero: the input angle or window is degenerate rather
    /// than the numerics failing.
    pub degenerate: bool,
}

/// Whether the diagonal entry of m can reach λ for some |φ − φ0| < reach,
/// with a factor 2 of slack for complex φ and the potential.
#[allow(clippy::too_many_arguments)]
pub fn near_resonant(
    lat: &QuasiLattice,
    pot: &TrigPotential,
    l: u32,
    kappa: f64,
    phi0: f64,
    lambda: f64,
    m: &LatticeIndex,
    reach: f64,
) -> bool {
    let kv = [kappa * phi0.cos(), kappa * phi0.sin()];
    let p = lat.p_norm(m);
    let slope = l as f64 * (kappa + p).powi(2 * l as i32 - 2) * 2.0 * kappa * p;
    (free_energy(lat, kv, l, m) - lambda).abs() <= 2.0 * (pot.l1_norm() + reach * slope)
}

/// Annulus indices whose diagonal can reach λ inside the window, grown by
/// one coupling layer and split into V-connected components.
pub fn window_blocks(
    lat: &QuasiLattice,
    pot: &TrigPotential,
    l: u32,
    kappa: f64,
    phi0: f64,
    lambda: f64,
    inner: f64,
    outer: f64,
    reach: f64,
) -> Vec<IndexProjector> {
    let annulus: Vec<LatticeIndex> = enumerate_indices(outer)
        .into_iter()
        .filter(|m| m.norm_triple() > inner * (1.0 + crate::lattice::NORM_SLACK))
        .collect();
    let near: Vec<LatticeIndex> = annulus
        .iter()
        .copied()
        .filter(|m| near_resonant(lat, pot, l, kappa, phi0, lambda, m, reach))
        .collect();
    if near.is_empty() {
        return Vec::new();
    }
    let annulus_set: BTreeSet<LatticeIndex> = annulus.iter().copied().collect();
    let mut members: BTreeSet<LatticeIndex> = near.iter().copied().collect();
    for m in &near {
        for (q, _) in pot.terms() {
            let n = *m + *q;
            if annulus_set.contains(&n) {
                members.insert(n);
            }
        }
    }
    let members: Vec<LatticeIndex> = members.into_iter().collect();
    // components under V-coupling
    let mut parent: Vec<usize> = (0..members.len()).collect();
    fn find(parent: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while parent[r] != r {
            r = parent[r];
        }
        let mut j = i;
        while parent[j] != r {
            let next = parent[j];
            parent[j] = r;
            j = next;
        }
        r
    }
    for i in 0..members.len() {
        for j in (i + 1)..members.len() {
            if pot.coeff(&(members[j] - members[i])) != Complex64::new(0.0, 0.0) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<LatticeIndex>> = Default::default();
    for i in 0..members.len() {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(members[i]);
    }
    groups
        .into_values()
        .enumerate()
        .map(|(i, g)| IndexProjector::new(format!("block{i}"), g))
        .collect()
}

/// ω⁽¹⁾…ω⁽ᴺ⁾ and D₁…D_N. A failing level stops the run and keeps what was built.
pub fn run_pipeline(lat: &QuasiLattice, pot: &TrigPotential, cfg: &PipelineConfig) -> PipelineResult {
    let k = cfg.lambda.powf(1.0 / (2.0 * cfg.l as f64));
    let n_levels = cfg.radii.len();
    let half = cfg
        .half_width
        .unwrap_or_else(|| cfg.mode.level1_half_width(lat.mu, k, cfg.l));
    let ctx = IsoContext {
        lat,
        pot,
        l: cfg.l,
        radii: cfg.radii.clone(),
        half_widths: vec![half; n_levels],
    };
    let mut out = PipelineResult {
        k,
        levels: Vec::new(),
        error: None,
    };
    let opts = PoleScanOptions::default();
    for level in 1..=n_levels as u32 {
        let (set, scanned) = if level == 1 {
            (resonance_discs_level1(lat, k, &cfg.mode, cfg.radii[0]), 0)
        } else {
            let prev = &out.levels.last().expect("previous level").set;
            let windows = scan_windows(&prev.real_arcs, cfg.window_half_width);
            let inner = cfg.radii[level as usize - 2];
            let outer = cfg.radii[level as usize - 1];
            let families: Vec<(usize, f64, f64, Vec<IndexProjector>)> = windows
                .par_iter()
                .enumerate()
                .map(|(w, &(c, hw))| {
                    let kappa0 = kappa_at(&ctx, level - 1, cfg.lambda, c, None).map_or(k, |p| p.kappa);
                    let blocks = window_blocks(lat, pot, cfg.l, kappa0, c, cfg.lambda, inner, outer, 1.1 * hw);
                    (w, c, kappa0, blocks)
                })
                .collect();
            let fams: Vec<(usize, usize, f64, f64, FiberBlockFamily)> = families
                .iter()
                .flat_map(|(w, c, kappa0, blocks)| {
                    let hw = windows[*w].1;
                    blocks.iter().enumerate().map(move |(b, proj)| {
                        (
                            *w,
                            b,
                            *c,
                            1.1 * hw,
                            FiberBlockFamily {
                                lat,
                                pot,
                                l: cfg.l,
                                kappa: *kappa0,
                                proj: proj.clone(),
                                energy: cfg.lambda,
                            },
                        )
                    })
                })
                .collect();
            let tasks: Vec<ScanTask> = fams
                .iter()
                .map(|(w, b, c, r, f)| ScanTask {
                    window: *w,
                    block: *b,
                    center: *c,
                    scan_radius: *r,
                    family: f,
                })
                .collect();
            let radius = cfg.pole_radii[level as usize - 2];
            match resonant_set_next(prev, &tasks, radius, &opts) {
                Ok(s) => (s, tasks.len()),
                Err(e) => {
                    out.error = Some(PipelineFailure {
                        level,
                        message: e.to_string(),
                        degenerate: e.is_degenerate(),
                    });
                    return out;
                }
            }
        };
        let curve = if level == 1 {
            trace_curve(&ctx, 1, cfg.lambda, &set.real_arcs, cfg.samples_per_arc, None)
        } else {
            let before = trace_curve(&ctx, level - 1, cfg.lambda, &set.real_arcs, cfg.samples_per_arc, None);
            let curve = trace_curve(&ctx, level, cfg.lambda, &set.real_arcs, cfg.samples_per_arc, Some(&before));
            let diff = curve_diff(&before, &curve).ok();
            out.levels.push(LevelResult {
                set,
                curve,
                diff,
                scanned_blocks: scanned,
            });
            continue;
        };
        out.levels.push(LevelResult {
            set,
            curve,
            diff: None,
            scanned_blocks: scanned,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resonance::ThresholdMode;
    use std::f64::consts::TAU;

    fn harmonic(amp: f64) -> TrigPotential {
        TrigPotential::single_harmonic(1.0, LatticeIndex::new([1, 0], [0, 0]), Complex64::new(amp, 0.0)).unwrap()
    }

    fn ctx<'a>(lat: &'a QuasiLattice, pot: &'a TrigPotential, radii: Vec<f64>, half: f64) -> IsoContext<'a> {
        let n = radii.len();
        IsoContext {
            lat,
            pot,
            l: 2,
            radii,
            half_widths: vec![half; n],
        }
    }

    #[test]
    fn free_circle() {
        let lat = QuasiLattice::golden();
        let pot = TrigPotential::zero(1.0);
        let c = ctx(&lat, &pot, vec![1.0], 2.0);
        let mut closed = 0;
        for j in 0..50 {
            let phi = TAU * j as f64 / 50.0 + 0.013;
            match kappa_at(&c, 1, 16.0, phi, None) {
                Ok(p) => {
                    assert!((p.kappa - 2.0).abs() < 1e-14);
                    assert!(p.closure_residual <= 1e-12);
                    closed += 1;
                }
                // shifted free levels crossing 16 near this angle
                Err(e) => assert!(matches!(e, IsoError::Resonant { .. }), "{e:?}"),
            }
        }
        assert!(closed >= 40, "{closed}");
        let c = ctx(&lat, &pot, vec![1.0], 50.0);
        let p = kappa_at(&c, 1, 1e4 + 7.0, 0.77, None).unwrap();
        assert!((p.kappa - (1e4f64 + 7.0).powf(0.25)).abs() < 1e-13);
    }

    #[test]
    fn closure_and_slope() {
        let lat = QuasiLattice::golden();
        let pot = harmonic(0.05);
        let set = resonance_discs_level1(&lat, 10.0, &ThresholdMode::Desk { t_res: 1.0 }, 2.0);
        let c = ctx(&lat, &pot, vec![2.0], 100.0);
        let curve = trace_curve(&c, 1, 1e4, &set.real_arcs, 3, None);
        assert!(!curve.points.is_empty());
        assert_eq!(curve.points.len() + curve.failures.len(), 3 * set.real_arcs.arcs().len());
        for p in curve.points.iter().take(10) {
            let lam = c.lambda_at(1, p.kappa, p.phi).unwrap();
            assert!((lam - 1e4).abs() <= 1e-10 * 1e4);
            assert!(set.real_arcs.contains(p.phi));
            let slope = dkappa_dlambda(&c, 1, 1e4, p.phi, 1e-6).unwrap();
            let expect = 1.0 / (4.0 * p.kappa.powi(3));
            assert!((slope / expect - 1.0).abs() < 0.01, "{slope} vs {expect}");
        }
    }

    #[test]
    fn diff_of_identical_and_free_curves() {
        let lat = QuasiLattice::golden();
        let pot = TrigPotential::zero(1.0);
        let set = resonance_discs_level1(&lat, 2.0, &ThresholdMode::Desk { t_res: 0.5 }, 1.0);
        let c = ctx(&lat, &pot, vec![1.0, 1.5], 2.0);
        let a = trace_curve(&c, 1, 16.0, &set.real_arcs, 4, None);
        let b = trace_curve(&c, 2, 16.0, &set.real_arcs, 4, Some(&a));
        assert!(a.points.iter().all(|p| p.kappa == 2.0));
        let d = curve_diff(&a, &a).unwrap();
        assert_eq!(d.max_abs, 0.0);
        let d = curve_diff(&a, &b).unwrap();
        assert_eq!(d.max_abs, 0.0);
        let empty = IsoCurve {
            lambda: 16.0,
            level: 1,
            points: Vec::new(),
            arcs: ArcSet::empty(),
            failures: Vec::new(),
        };
        assert_eq!(curve_diff(&a, &empty).unwrap_err(), IsoError::EmptyIntersection);
    }

    #[test]
    fn level_two_correction_is_quadratic() {
        let lat = QuasiLattice::golden();
        let set = resonance_discs_level1(&lat, 10.0, &ThresholdMode::Desk { t_res: 1.0 }, 2.0);
        let arcs = ArcSet::from_arcs(set.real_arcs.arcs().iter().take(3).copied().collect());
        let mut maxes = Vec::new();
        for amp in [0.1, 0.05] {
            let pot = harmonic(amp);
            let c = ctx(&lat, &pot, vec![0.5, 2.0], 100.0);
            let a = trace_curve(&c, 1, 1e4, &arcs, 3, None);
            let b = trace_curve(&c, 2, 1e4, &arcs, 3, Some(&a));
            let d = curve_diff(&a, &b).unwrap();
            // chain-rule bound
            let lam_gap = a
                .points
                .iter()
                .map(|p| (c.lambda_at(2, p.kappa, p.phi).unwrap() - 1e4).abs())
                .fold(0.0, f64::max);
            let slope_min = a.points.iter().map(|p| 4.0 * (0.999 * p.kappa).powi(3)).fold(f64::INFINITY, f64::min);
            assert!(d.max_abs <= lam_gap / slope_min * 1.01, "{} vs {}", d.max_abs, lam_gap / slope_min);
            maxes.push(d.max_abs);
        }
        let ratio = maxes[0] / maxes[1];
        assert!((3.0..=5.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn pipeline_levels_nest() {
        let lat = QuasiLattice::golden();
        let pot = harmonic(0.05);
        let cfg = PipelineConfig {
            lambda: 1e4,
            l: 2,
            mode: ThresholdMode::Desk { t_res: 1.0 },
            radii: vec![1.0, 1.5, 2.0],
            pole_radii: vec![0.01, 0.005],
            window_half_width: 0.1,
            samples_per_arc: 2,
            half_width: None,
        };
        let res = run_pipeline(&lat, &pot, &cfg);
        assert!(res.error.is_none(), "{:?}", res.error);
        assert_eq!(res.levels.len(), 3);
        for w in res.levels.windows(2) {
            assert!(w[1].set.real_arcs.is_subset_of(&w[0].set.real_arcs));
            assert!(w[1].curve.arcs.is_subset_of(&w[0].curve.arcs));
            for p in &w[1].curve.points {
                assert!(w[0].set.real_arcs.contains(p.phi));
            }
        }
        assert!(res.levels[1].diff.is_some());
    }
}
