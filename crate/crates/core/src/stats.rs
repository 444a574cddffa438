//! Group-level maps and the comparison metrics computed on them.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::maps::{Geometry, Hemisphere, MapKind, VoxelMap};

/// `σ = FWHM / √(8 ln 2)`.
pub fn fwhm_to_sigma(fwhm: f64) -> f64 {
    fwhm / (8.0 * std::f64::consts::LN_2).sqrt()
}

fn kernel_1d(sigma_vox: f64) -> Vec<f64> {
    if sigma_vox <= 0.0 {
        return vec![1.0];
    }
    let radius = (4.0 * sigma_vox).ceil() as i64;
    let w: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma_vox * sigma_vox)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn convolve_axis(vol: &[f64], shape: [usize; 3], axis: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let stride = match axis {
        0 => 1,
        1 => shape[0],
        _ => shape[0] * shape[1],
    };
    let mut out = vec![0.0; vol.len()];
    for z in 0..shape[2] {
        for y in 0..shape[1] {
            for x in 0..shape[0] {
                let c = [x, y, z];
                let idx = x + shape[0] * (y + shape[1] * z);
                let mut acc = 0.0;
                for (ki, w) in kernel.iter().enumerate() {
                    let p = c[axis] as i64 + ki as i64 - r;
                    if p < 0 || p >= shape[axis] as i64 {
                        continue;
                    }
                    let nidx = (idx as i64 + (p - c[axis] as i64) * stride as i64) as usize;
                    acc += w * vol[nidx];
                }
                out[idx] = acc;
            }
        }
    }
    out
}

/// Separable Gaussian smoothing restricted to the map's voxels. Voxels with
/// NaN values and grid points outside the voxel set carry no weight, and
/// the kernel is renormalised over the weight that remains.
pub fn gaussian_smooth(map: &VoxelMap, fwhm_mm: f64) -> Result<VoxelMap> {
    if !(fwhm_mm >= 0.0) {
        return Err(Error::invalid("FWHM must be >= 0"));
    }
    let g = &map.geometry;
    let n_grid: usize = g.grid_shape.iter().product();
    let mut num = vec![0.0; n_grid];
    let mut den = vec![0.0; n_grid];
    for (v, &c) in g.voxel_coords.iter().enumerate() {
        let val = map.values[v];
        if val.is_finite() {
            let i = g.linear_index(c);
            num[i] = val;
            den[i] = 1.0;
        }
    }
    let sigma_mm = fwhm_to_sigma(fwhm_mm);
    for axis in 0..3 {
        let k = kernel_1d(sigma_mm / g.voxel_size_mm[axis]);
        num = convolve_axis(&num, g.grid_shape, axis, &k);
        den = convolve_axis(&den, g.grid_shape, axis, &k);
    }
    let values = g
        .voxel_coords
        .iter()
        .enumerate()
        .map(|(v, &c)| {
            let i = g.linear_index(c);
            if map.values[v].is_finite() && den[i] > 0.0 {
                num[i] / den[i]
            } else {
                f64::NAN
            }
        })
        .collect();
    let mut out = map.clone();
    out.values = values;
    Ok(out)
}

/// Standard-normal quantile score of a one-sided p-value.
pub fn p_to_z(p: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    -normal.inverse_cdf(p.clamp(f64::MIN_POSITIVE, 1.0))
}

/// Benjamini–Hochberg step-up. NaN p-values are never rejected and do not
/// count toward the number of tests.
pub fn benjamini_hochberg(p: &[f64], q: f64) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..p.len()).filter(|&i| !p[i].is_nan()).collect();
    let m = idx.len();
    idx.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let cutoff = (1..=m).rev().find(|&k| p[idx[k - 1]] <= q * k as f64 / m as f64);
    let mut mask = vec![false; p.len()];
    if let Some(k) = cutoff {
        let thr = p[idx[k - 1]];
        for &i in &idx {
            if p[i] <= thr {
                mask[i] = true;
            }
        }
    }
    mask
}

#[derive(Debug, Clone)]
pub struct GroupTest {
    pub t: VoxelMap,
    pub p: VoxelMap,
    pub z: VoxelMap,
    pub mask: VoxelMap,
    /// Smallest z among significant voxels.
    pub z_fdr: Option<f64>,
}

/// Smooths every subject map, runs a one-sided one-sample t-test per voxel
/// (H1: mean > 0), converts to z and thresholds with BH-FDR at level `q`.
pub fn group_test_fdr(maps: &[VoxelMap], q: f64, fwhm_mm: f64) -> Result<GroupTest> {
    if maps.len() < 2 {
        return Err(Error::invalid("a group test needs at least 2 subjects"));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::invalid("q must lie in (0, 1)"));
    }
    for m in &maps[1..] {
        maps[0].check_same_space(m)?;
    }
    let smoothed: Vec<VoxelMap> = maps
        .iter()
        .map(|m| gaussian_smooth(m, fwhm_mm))
        .collect::<Result<_>>()?;
    let n = maps.len() as f64;
    let tdist = StudentsT::new(0.0, 1.0, n - 1.0).expect("n >= 2");
    let nv = maps[0].len();
    let mut t = vec![f64::NAN; nv];
    let mut p = vec![f64::NAN; nv];
    for v in 0..nv {
        let vals: Vec<f64> = smoothed.iter().map(|m| m.values[v]).collect();
        if vals.iter().any(|x| !x.is_finite()) {
            continue;
        }
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let (tv, pv) = if var > 0.0 {
            let tv = mean / (var / n).sqrt();
            (tv, tdist.sf(tv))
        } else if mean > 0.0 {
            (f64::INFINITY, 0.0)
        } else if mean < 0.0 {
            (f64::NEG_INFINITY, 1.0)
        } else {
            (0.0, 0.5)
        };
        t[v] = tv;
        p[v] = pv;
    }
    let z: Vec<f64> = p
        .iter()
        .map(|&pv| if pv.is_nan() { f64::NAN } else { p_to_z(pv) })
        .collect();
    let mask = benjamini_hochberg(&p, q);
    let z_fdr = z
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(&zv, _)| zv)
        .min_by(f64::total_cmp);
    let geometry = maps[0].geometry.clone();
    let provenance = maps[0].provenance.clone();
    let make = |values: Vec<f64>, kind| -> Result<VoxelMap> {
        Ok(VoxelMap::new(values, geometry.clone(), kind)?.with_provenance(provenance.clone()))
    };
    let mut mask_map = VoxelMap::from_mask(&mask, geometry.clone())?.with_provenance(provenance.clone());
    mask_map.z_fdr = z_fdr;
    let mut z_map = make(z, MapKind::Z)?;
    z_map.z_fdr = z_fdr;
    Ok(GroupTest {
        t: make(t, MapKind::T)?,
        p: make(p, MapKind::P)?,
        z: z_map,
        mask: mask_map,
        z_fdr,
    })
}

/// `log10(r_sem / r_syn)` where both are positive, NaN elsewhere.
pub fn specificity(r_sem: &VoxelMap, r_syn: &VoxelMap) -> Result<VoxelMap> {
    r_sem.check_same_space(r_syn)?;
    let values = r_sem
        .values
        .iter()
        .zip(&r_syn.values)
        .map(|(&a, &b)| if a > 0.0 && b > 0.0 { (a / b).log10() } else { f64::NAN })
        .collect();
    Ok(VoxelMap::new(values, r_sem.geometry.clone(), MapKind::Specificity)?
        .with_provenance(vec![r_sem.provenance.join("+"), r_syn.provenance.join("+")]))
}

/// Voxel-wise mean of the subjects' valid specificity values; NaN where no
/// subject has a valid value.
pub fn group_specificity(per_subject: &[VoxelMap]) -> Result<VoxelMap> {
    let first = per_subject.first().ok_or_else(|| Error::invalid("no subject maps"))?;
    for m in &per_subject[1..] {
        first.check_same_space(m)?;
    }
    let values = (0..first.len())
        .map(|v| {
            let valid: Vec<f64> = per_subject
                .iter()
                .map(|m| m.values[v])
                .filter(|x| x.is_finite())
                .collect();
            if valid.is_empty() {
                f64::NAN
            } else {
                valid.iter().sum::<f64>() / valid.len() as f64
            }
        })
        .collect();
    Ok(VoxelMap::new(values, first.geometry.clone(), MapKind::Specificity)?.with_provenance(first.provenance.clone()))
}

/// Alternative group index: log ratio of the group-mean maps.
pub fn specificity_of_means(r_sem: &[VoxelMap], r_syn: &[VoxelMap]) -> Result<VoxelMap> {
    let mean = |maps: &[VoxelMap]| -> Result<VoxelMap> {
        let first = maps.first().ok_or_else(|| Error::invalid("no subject maps"))?;
        let values = (0..first.len())
            .map(|v| maps.iter().map(|m| m.values[v]).sum::<f64>() / maps.len() as f64)
            .collect();
        Ok(VoxelMap::new(values, first.geometry.clone(), MapKind::R)?.with_provenance(first.provenance.clone()))
    };
    specificity(&mean(r_sem)?, &mean(r_syn)?)
}

/// `|A ∩ B| / |A ∪ B|`.
pub fn jaccard(a: &[bool], b: &[bool]) -> Result<f64> {
    jaccard_within(a, b, None)
}

/// Jaccard index restricted to the voxels flagged in `within`.
pub fn jaccard_within(a: &[bool], b: &[bool], within: Option<&[bool]>) -> Result<f64> {
    if a.len() != b.len() || within.is_some_and(|w| w.len() != a.len()) {
        return Err(Error::shape("masks differ in length"));
    }
    let keep = |i: usize| within.is_none_or(|w| w[i]);
    let (mut inter, mut union) = (0usize, 0usize);
    for i in (0..a.len()).filter(|&i| keep(i)) {
        inter += usize::from(a[i] && b[i]);
        union += usize::from(a[i] || b[i]);
    }
    if union == 0 {
        return Err(Error::invalid("Jaccard index of two empty sets is undefined"));
    }
    Ok(inter as f64 / union as f64)
}

pub fn jaccard_hemisphere(a: &VoxelMap, b: &VoxelMap, hemi: Hemisphere) -> Result<f64> {
    a.check_same_space(b)?;
    let within = a.geometry.hemisphere_mask(hemi);
    jaccard_within(&a.as_mask(), &b.as_mask(), Some(&within))
}

/// Voxels whose value is at or above the `percentile`-th percentile: the
/// top `ceil(n · (100 − percentile) / 100)` values plus any ties with the
/// smallest of them. NaN voxels are never selected.
pub fn peak_regions(map: &VoxelMap, percentile: f64) -> Result<VoxelMap> {
    if !(0.0..100.0).contains(&percentile) {
        return Err(Error::invalid("percentile must lie in [0, 100)"));
    }
    let mut vals: Vec<f64> = map.values.iter().copied().filter(|v| !v.is_nan()).collect();
    if vals.is_empty() {
        return Err(Error::invalid("peak regions of an empty map"));
    }
    let n = vals.len();
    let k = ((n as f64 * (100.0 - percentile) / 100.0) - 1e-9).ceil().max(1.0) as usize;
    vals.sort_by(|a, b| b.total_cmp(a));
    let thr = vals[k.min(n) - 1];
    if vals[0] == vals[n - 1] {
        log::warn!("constant map: every voxel ties for the peak region");
    }
    let mask: Vec<bool> = map.values.iter().map(|&v| !v.is_nan() && v >= thr).collect();
    Ok(VoxelMap::from_mask(&mask, map.geometry.clone())?.with_provenance(map.provenance.clone()))
}

/// Element-wise `r_joint − r_single`.
pub fn unique_contribution(r_joint: &VoxelMap, r_single: &VoxelMap) -> Result<VoxelMap> {
    r_joint.check_same_space(r_single)?;
    let values = r_joint
        .values
        .iter()
        .zip(&r_single.values)
        .map(|(a, b)| a - b)
        .collect();
    Ok(VoxelMap::new(values, r_joint.geometry.clone(), MapKind::DeltaR)?
        .with_provenance(vec![r_joint.provenance.join("+"), r_single.provenance.join("+")]))
}

/// Fraction of the mask's voxels inside `region`.
pub fn proportion_in(mask: &[bool], region: &[bool]) -> f64 {
    let total = mask.iter().filter(|&&m| m).count();
    if total == 0 {
        return 0.0;
    }
    mask.iter().zip(region).filter(|(&m, &r)| m && r).count() as f64 / total as f64
}

/// Convenience for tests and the synthetic pipeline.
pub fn constant_map(value: f64, geometry: Geometry, kind: MapKind) -> VoxelMap {
    let n = geometry.n_voxels();
    VoxelMap::new(vec![value; n], geometry, kind).expect("length matches")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn grid(n: usize) -> Geometry {
        Geometry::full_grid([n, n, n], [4.0; 3])
    }

    #[test]
    fn sigma_relation() {
        assert!((fwhm_to_sigma(6.0) - 2.548).abs() < 1e-3);
    }

    #[test]
    fn smoothing_keeps_uniform_maps_and_mass() {
        let g = grid(9);
        let u = constant_map(0.3, g.clone(), MapKind::R);
        let s = gaussian_smooth(&u, 6.0).unwrap();
        assert!(s.values.iter().all(|v| (v - 0.3).abs() < 1e-10));
        let mut imp = constant_map(0.0, grid(21), MapKind::R);
        let centre = imp.geometry.linear_index([10, 10, 10]);
        imp.values[centre] = 1.0;
        let s = gaussian_smooth(&imp, 6.0).unwrap();
        assert!((s.values.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        // direct summation of the separable kernel at one neighbour
        let k = kernel_1d(fwhm_to_sigma(6.0) / 4.0);
        let r = k.len() / 2;
        let expected = k[r + 1] * k[r] * k[r];
        assert!((s.values[imp.geometry.linear_index([11, 10, 10])] - expected).abs() < 1e-12);
    }

    #[test]
    fn smoothing_ignores_missing_voxels() {
        let mut g = grid(5);
        g.voxel_coords.retain(|c| c[0] != 2);
        let mut m = VoxelMap::new(vec![1.0; g.n_voxels()], g, MapKind::R).unwrap();
        m.values[0] = f64::NAN;
        let s = gaussian_smooth(&m, 8.0).unwrap();
        assert!(s.values[0].is_nan());
        assert!(s.values[1..].iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    /// Definitional oracle: reject i iff some p_j >= p_i satisfies
    /// p_j <= q · #{l : p_l <= p_j} / m.
    fn bh_oracle(p: &[f64], q: f64) -> Vec<bool> {
        let m = p.len() as f64;
        p.iter()
            .map(|&pi| {
                p.iter()
                    .any(|&pj| pj >= pi && pj <= q * p.iter().filter(|&&pl| pl <= pj).count() as f64 / m)
            })
            .collect()
    }

    #[test]
    fn bh_matches_oracle_and_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for rep in 0..1000 {
            let n = 1 + rep % 40;
            let p: Vec<f64> = (0..n)
                .map(|_| {
                    let u: f64 = rng.random();
                    if rng.random::<f64>() < 0.3 {
                        u * 1e-3
                    } else {
                        u
                    }
                })
                .collect();
            let q = [0.005, 0.05, 0.2][rep % 3];
            let mask = benjamini_hochberg(&p, q);
            assert_eq!(mask, bh_oracle(&p, q));
            let lower = benjamini_hochberg(&p, q / 2.0);
            assert!(lower.iter().zip(&mask).all(|(&l, &h)| !l || h));
        }
    }

    #[test]
    fn group_test_cases() {
        let g = grid(4);
        let zeros: Vec<VoxelMap> = (0..5).map(|_| constant_map(0.0, g.clone(), MapKind::R)).collect();
        let res = group_test_fdr(&zeros, 0.005, 6.0).unwrap();
        assert!(res.mask.as_mask().iter().all(|&m| !m));
        assert!(res.z_fdr.is_none());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ones: Vec<VoxelMap> = (0..20)
            .map(|_| {
                let vals = (0..g.n_voxels())
                    .map(|_| 1.0 + 1e-3 * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                VoxelMap::new(vals, g.clone(), MapKind::R).unwrap()
            })
            .collect();
        let res = group_test_fdr(&ones, 0.005, 6.0).unwrap();
        assert!(res.mask.as_mask().iter().all(|&m| m));
        assert!(res.z_fdr.unwrap() > 5.0);
        assert!(group_test_fdr(&ones[..1], 0.005, 6.0).is_err());
    }

    #[test]
    fn null_maps_keep_false_positives_below_q() {
        let g = Geometry::full_grid([10, 10, 1], [4.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = 0.05;
        let fractions: Vec<f64> = (0..500)
            .map(|_| {
                let maps: Vec<VoxelMap> = (0..8)
                    .map(|_| {
                        let v = (0..100).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                        VoxelMap::new(v, g.clone(), MapKind::R).unwrap()
                    })
                    .collect();
                let res = group_test_fdr(&maps, q, 0.0).unwrap();
                res.mask.as_mask().iter().filter(|&&m| m).count() as f64 / 100.0
            })
            .collect();
        let mean = fractions.iter().sum::<f64>() / 500.0;
        let sd = (fractions.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / 499.0).sqrt();
        assert!(mean <= q + 2.0 * sd / 500f64.sqrt(), "mean {mean}");
    }

    #[test]
    fn specificity_cases() {
        let g = Geometry::full_grid([4, 1, 1], [4.0; 3]);
        let sem = VoxelMap::new(vec![0.2, 0.5, 0.3, -0.1], g.clone(), MapKind::R).unwrap();
        let syn = VoxelMap::new(vec![0.2, 0.05, -0.2, 0.1], g, MapKind::R).unwrap();
        let x = specificity(&sem, &syn).unwrap();
        assert_eq!(x.values[0], 0.0);
        assert_eq!(x.values[1], 1.0);
        assert!(x.values[2].is_nan() && x.values[3].is_nan());
        let y = specificity(&syn, &sem).unwrap();
        assert_eq!(y.values[1], -x.values[1]);
        let group = group_specificity(&[x.clone(), y]).unwrap();
        assert_eq!(group.values[1], 0.0);
        assert!(group.values[2].is_nan());
    }

    #[test]
    fn jaccard_cases() {
        let a = [true, true, false, false];
        let b = [false, true, true, false];
        assert!((jaccard(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        assert_eq!(jaccard(&a, &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(jaccard(&a, &b).unwrap(), jaccard(&b, &a).unwrap());
        assert!(jaccard(&[false; 3], &[false; 3]).is_err());
        let g = Geometry::full_grid([4, 1, 1], [4.0; 3]);
        let ma = VoxelMap::from_mask(&a, g.clone()).unwrap();
        let mb = VoxelMap::from_mask(&b, g).unwrap();
        assert_eq!(jaccard_hemisphere(&ma, &mb, Hemisphere::Left).unwrap(), 0.5);
        assert!(jaccard_hemisphere(&ma, &mb, Hemisphere::Right).unwrap() == 0.0);
    }

    #[test]
    fn peak_region_cases() {
        let g = Geometry::full_grid([10, 10, 1], [4.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vals: Vec<f64> = (0..100).map(|_| rng.random()).collect();
        let m = VoxelMap::new(vals.clone(), g.clone(), MapKind::R).unwrap();
        let peaks = peak_regions(&m, 90.0).unwrap().as_mask();
        assert_eq!(peaks.iter().filter(|&&p| p).count(), 10);
        let mut sorted = vals.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (v, &p) in vals.iter().zip(&peaks) {
            assert_eq!(p, *v >= sorted[9]);
        }
        let flat = constant_map(0.2, g.clone(), MapKind::R);
        assert!(peak_regions(&flat, 90.0).unwrap().as_mask().iter().all(|&p| p));
        let odd = VoxelMap::new(
            (0..7).map(f64::from).collect(),
            Geometry::full_grid([7, 1, 1], [4.0; 3]),
            MapKind::R,
        )
        .unwrap();
        assert_eq!(
            peak_regions(&odd, 90.0)
                .unwrap()
                .as_mask()
                .iter()
                .filter(|&&p| p)
                .count(),
            1
        );
    }

    #[test]
    fn unique_contribution_is_a_difference() {
        let g = Geometry::full_grid([3, 1, 1], [4.0; 3]);
        let a = VoxelMap::new(vec![0.3, 0.2, 0.1], g.clone(), MapKind::R).unwrap();
        let b = VoxelMap::new(vec![0.1, 0.2, 0.4], g, MapKind::R).unwrap();
        let u = unique_contribution(&a, &b).unwrap();
        assert!((u.values[0] - 0.2).abs() < 1e-15 && u.values[1] == 0.0);
        assert!(unique_contribution(&a, &a).unwrap().values.iter().all(|&v| v == 0.0));
    }
}
