use irnlm::maps::{Geometry, MapKind, VoxelMap};
use irnlm::stats::{benjamini_hochberg, group_test_fdr, jaccard, peak_regions, specificity};
use proptest::prelude::*;

fn map(values: Vec<f64>, kind: MapKind) -> VoxelMap {
    let n = values.len();
    VoxelMap::new(values, Geometry::full_grid([n, 1, 1], [4.0; 3]), kind).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn bh_rejects_a_lower_set_that_grows_with_q(
        p in prop::collection::vec(0.0f64..1.0, 1..60),
        q1 in 0.01f64..0.5,
        dq in 0.0f64..0.4,
    ) {
        let r1 = benjamini_hochberg(&p, q1);
        let r2 = benjamini_hochberg(&p, q1 + dq);
        for i in 0..p.len() {
            prop_assert!(!r1[i] || r2[i]);
            if r1[i] {
                prop_assert!(p[i] <= q1);
                for j in 0..p.len() {
                    prop_assert!(p[j] > p[i] || r1[j]);
                }
            }
        }
        // Everything rejected passes its own step-up bound.
        let k = r1.iter().filter(|&&r| r).count();
        for i in 0..p.len() {
            if r1[i] {
                prop_assert!(p[i] <= q1 * k as f64 / p.len() as f64 + 1e-15);
            }
        }
    }

    #[test]
    fn jaccard_is_symmetric_and_bounded(
        pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..80),
    ) {
        let (a, b): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
        let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
        if union == 0 {
            prop_assert!(jaccard(&a, &b).is_err());
            return Ok(());
        }
        let ab = jaccard(&a, &b).unwrap();
        prop_assert_eq!(ab, jaccard(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, inter as f64 / union as f64);
    }

    #[test]
    fn specificity_flips_sign_when_the_roles_swap(
        pairs in prop::collection::vec((-0.5f64..0.9, -0.5f64..0.9), 1..40),
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let s_ab = specificity(&map(a.clone(), MapKind::R), &map(b.clone(), MapKind::R)).unwrap();
        let s_ba = specificity(&map(b.clone(), MapKind::R), &map(a.clone(), MapKind::R)).unwrap();
        for i in 0..a.len() {
            if a[i] > 0.0 && b[i] > 0.0 {
                prop_assert!((s_ab.values[i] + s_ba.values[i]).abs() < 1e-12);
                prop_assert!((s_ab.values[i] - (a[i] / b[i]).log10()).abs() < 1e-12);
            } else {
                prop_assert!(s_ab.values[i].is_nan() && s_ba.values[i].is_nan());
            }
        }
    }

    #[test]
    fn peaks_dominate_the_rest(
        values in prop::collection::vec(-3.0f64..3.0, 1..200),
        pct in 50.0f64..99.0,
    ) {
        let m = peak_regions(&map(values.clone(), MapKind::DeltaR), pct).unwrap().as_mask();
        let k = (values.len() as f64 * (100.0 - pct) / 100.0 - 1e-9).ceil().max(1.0) as usize;
        prop_assert!(m.iter().filter(|&&x| x).count() >= k);
        let lo_in = values.iter().zip(&m).filter(|(_, &x)| x).map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
        let hi_out = values.iter().zip(&m).filter(|(_, &x)| !x).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo_in > hi_out);
    }

    #[test]
    fn group_test_is_scale_free_and_reports_the_smallest_significant_z(
        seeds in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 12), 3..8),
        shift in 0.0f64..1.0,
        scale in 0.1f64..10.0,
    ) {
        let maps: Vec<VoxelMap> = seeds
            .iter()
            .map(|v| map(v.iter().map(|x| x + shift).collect(), MapKind::DeltaR))
            .collect();
        let scaled: Vec<VoxelMap> = maps
            .iter()
            .map(|m| map(m.values.iter().map(|x| x * scale).collect(), MapKind::DeltaR))
            .collect();
        let g = group_test_fdr(&maps, 0.05, 6.0).unwrap();
        let h = group_test_fdr(&scaled, 0.05, 6.0).unwrap();
        for v in 0..12 {
            let (a, b) = (g.t.values[v], h.t.values[v]);
            prop_assert!(a == b || (a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
        }
        let mask = g.mask.as_mask();
        let min_z = g.z.values.iter().zip(&mask).filter(|(_, &m)| m).map(|(z, _)| *z).fold(f64::INFINITY, f64::min);
        match g.z_fdr {
            Some(z) => prop_assert_eq!(z, min_z),
            None => prop_assert!(mask.iter().all(|&m| !m)),
        }
        for v in 0..12 {
            if mask[v] {
                prop_assert!(g.p.values[v] <= 0.05);
            }
        }
    }
}
