use std::collections::BTreeSet;
use std::f64::consts::TAU;

use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use quasispec::lattice::{enumerate_indices, reduce_angle, LatticeIndex, QuasiLattice, NORM_SLACK};
use quasispec::multiscale::{
    build_resonant_sets, color_regions, linkage_components, merge_pass, verify_block_structure, Color, RegionParams,
};
use quasispec::operator::{build_fiber, real_kappa, IndexProjector, TrigPotential};
use quasispec::resonance::{ArcSet, ThresholdMode};

fn index() -> impl Strategy<Value = LatticeIndex> {
    prop::array::uniform4(-6i64..=6).prop_map(LatticeIndex::from_array)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn triple_norm_is_a_norm(a in index(), b in index()) {
        prop_assert!((a + b).norm_triple() <= a.norm_triple() + b.norm_triple() + 1e-12);
        prop_assert_eq!((-a).norm_triple(), a.norm_triple());
        prop_assert_eq!(a.norm_triple() == 0.0, a.is_zero());
    }

    #[test]
    fn reduced_angles_stay_in_range(x in -100.0f64..100.0) {
        let r = reduce_angle(x);
        prop_assert!((0.0..TAU).contains(&r));
        prop_assert!(((r - x) / TAU - ((r - x) / TAU).round()).abs() < 1e-9);
    }

    #[test]
    fn subtracting_arcs_shrinks(cuts in prop::collection::vec((0.0f64..TAU, 0.0f64..0.5), 0..8)) {
        let mut set = ArcSet::full();
        let mut prev = set.clone();
        for (lo, w) in cuts {
            set.subtract(lo, lo + w);
            prop_assert!(set.is_subset_of(&prev));
            prop_assert!(set.measure() <= prev.measure() + 1e-12);
            prop_assert!(!set.contains(reduce_angle(lo + 0.5 * w)) || w == 0.0);
            prev = set.clone();
        }
        let both = set.intersect(&ArcSet::full());
        prop_assert!((both.measure() - set.measure()).abs() < 1e-12);
    }

    #[test]
    fn fiber_is_hermitian_for_real_kappa(kx in -5.0f64..5.0, ky in -5.0f64..5.0, amp in 0.0f64..1.0, r in 0.5f64..2.0) {
        let lat = QuasiLattice::golden();
        let pot = TrigPotential::single_harmonic(2.0, LatticeIndex::new([1, 0], [0, 1]), Complex64::new(amp, 0.3 * amp)).unwrap();
        let proj = IndexProjector::ball("b", r);
        let h = build_fiber(&lat, &pot, real_kappa([kx, ky]), 2, &proj).unwrap();
        prop_assert_eq!(h.hermiticity_residual(), 0.0);
    }

    #[test]
    fn linkage_partitions_and_separates(pts in prop::collection::vec(index(), 1..40), link in 1.0f64..4.0) {
        let comps = linkage_components(&pts, link);
        let uniq: BTreeSet<LatticeIndex> = pts.iter().copied().collect();
        let covered: BTreeSet<LatticeIndex> = comps.iter().flatten().copied().collect();
        prop_assert_eq!(covered.len(), comps.iter().map(Vec::len).sum::<usize>());
        prop_assert_eq!(covered, uniq);
        for i in 0..comps.len() {
            for j in (i + 1)..comps.len() {
                for a in &comps[i] {
                    for b in &comps[j] {
                        prop_assert!((*a - *b).norm_triple() >= link);
                    }
                }
            }
        }
    }

    #[test]
    fn far_balls_have_block_structure(shift in 4i64..8, amp in 0.01f64..0.5, kx in 1.0f64..4.0) {
        let lat = QuasiLattice::golden();
        let pot = TrigPotential::single_harmonic(1.0, LatticeIndex::new([1, 0], [0, 0]), Complex64::new(amp, 0.0)).unwrap();
        let ball = |c: LatticeIndex| IndexProjector::new("b", enumerate_indices(1.0).into_iter().map(move |o| c + o));
        let blocks = [ball(LatticeIndex::ZERO), ball(LatticeIndex::new([shift, 0], [0, 0])), ball(LatticeIndex::new([0, 0], [0, shift]))];
        prop_assert!(verify_block_structure(&lat, &pot, [kx, 0.4], 2, &blocks, Some(1.5)).is_ok());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn resonant_sets_partition(phi0 in 0.0f64..TAU) {
        let lat = QuasiLattice::golden();
        let mode = ThresholdMode::Desk { t_res: 0.01 };
        if let Ok(s) = build_resonant_sets(&lat, phi0, 6.0, 1.2, 0.25, &mode) {
            prop_assert!(s.m.is_subset(&s.m_prime));
            prop_assert!(s.m1.is_disjoint(&s.m2));
            let union: BTreeSet<LatticeIndex> = s.m1.union(&s.m2).copied().collect();
            prop_assert_eq!(&union, &s.m);
            let mut seen = BTreeSet::new();
            for c in &s.classes {
                prop_assert!(c.len() >= 2);
                for m in c {
                    prop_assert!(seen.insert(*m));
                }
            }
            prop_assert!(s.m2.is_subset(&seen));
        }
    }

    #[test]
    fn coloring_is_total_and_merge_idempotent(seed in 0u64..1000, density in 0.005f64..0.05) {
        let lat = QuasiLattice::golden();
        let mut p = RegionParams::derived(4.0, 1.0, 1.5, 0.2, 0.5, 1e-9);
        p.box_size = 2;
        p.small_box = 1;
        let universe = enumerate_indices(p.outer_radius);
        let core_lim = p.core_radius * (1.0 + NORM_SLACK);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m2 = BTreeSet::new();
        let mut all = BTreeSet::new();
        for m in universe.iter().filter(|m| m.norm_triple() > core_lim) {
            let u: f64 = rng.gen();
            if u < density {
                m2.insert(*m);
                all.insert(*m);
            } else if u < 2.0 * density {
                all.insert(*m);
            }
        }
        let c = color_regions(&lat, &m2, &all, &p).unwrap();
        prop_assert_eq!(c.assignment.len(), universe.len());
        let mut again = c.assignment.clone();
        prop_assert_eq!(merge_pass(&mut again, &p), 0);
        for m in &m2 {
            let col = c.color_of(m).unwrap();
            prop_assert!(matches!(col, Color::Black | Color::Grey | Color::White | Color::Simple), "{} is {}", m, col);
        }
    }
}
