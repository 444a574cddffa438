//! Synthetic BOLD with a known voxel layout, and scoring of how well a
//! group analysis recovers it.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::{build_design, standardize_columns, BoldRun, HrfKernel};
use crate::error::{Error, Result};
use crate::maps::{Geometry, VoxelMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VoxelClass {
    SyntaxDriven,
    SemanticsDriven,
    Mixed,
    Null,
}

impl VoxelClass {
    pub const ALL: [VoxelClass; 4] = [
        VoxelClass::SyntaxDriven,
        VoxelClass::SemanticsDriven,
        VoxelClass::Mixed,
        VoxelClass::Null,
    ];

    fn uses_sem(self) -> bool {
        matches!(self, VoxelClass::SemanticsDriven | VoxelClass::Mixed)
    }

    fn uses_syn(self) -> bool {
        matches!(self, VoxelClass::SyntaxDriven | VoxelClass::Mixed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelLayout {
    pub geometry: Geometry,
    pub classes: Vec<VoxelClass>,
    /// Per voxel, weights on the semantic feature columns.
    pub w_sem: Vec<Vec<f64>>,
    /// Per voxel, weights on the syntactic feature columns.
    pub w_syn: Vec<Vec<f64>>,
    pub snr: f64,
}

impl VoxelLayout {
    /// Slabs along y: the first fifth of the rows is syntax-driven, the
    /// second semantics-driven, the third mixed and the rest null. Weights
    /// are `N(0, 1/d)`.
    pub fn slabs(geometry: Geometry, d_sem: usize, d_syn: usize, snr: f64, seed: u64) -> Result<Self> {
        let ny = geometry.grid_shape[1];
        let classes: Vec<VoxelClass> = geometry
            .voxel_coords
            .iter()
            .map(|c| match 5 * c[1] / ny {
                0 => VoxelClass::SyntaxDriven,
                1 => VoxelClass::SemanticsDriven,
                2 => VoxelClass::Mixed,
                _ => VoxelClass::Null,
            })
            .collect();
        Self::random_weights(geometry, classes, d_sem, d_syn, snr, seed)
    }

    pub fn random_weights(
        geometry: Geometry,
        classes: Vec<VoxelClass>,
        d_sem: usize,
        d_syn: usize,
        snr: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |on: bool, d: usize| -> Vec<f64> {
            let s = 1.0 / (d.max(1) as f64).sqrt();
            (0..d)
                .map(|_| {
                    if on {
                        s * rng.sample::<f64, _>(StandardNormal)
                    } else {
                        0.0
                    }
                })
                .collect()
        };
        let mut w_sem = Vec::with_capacity(classes.len());
        let mut w_syn = Vec::with_capacity(classes.len());
        for c in &classes {
            w_sem.push(draw(c.uses_sem(), d_sem));
            w_syn.push(draw(c.uses_syn(), d_syn));
        }
        let layout = VoxelLayout {
            geometry,
            classes,
            w_sem,
            w_syn,
            snr,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let n = self.geometry.n_voxels();
        if self.classes.len() != n || self.w_sem.len() != n || self.w_syn.len() != n {
            return Err(Error::shape("layout lists do not match the voxel count"));
        }
        if !(self.snr > 0.0) {
            return Err(Error::invalid("SNR must be positive"));
        }
        for (v, c) in self.classes.iter().enumerate() {
            let zero = |w: &[f64]| w.iter().all(|&x| x == 0.0);
            if !c.uses_sem() && !zero(&self.w_sem[v]) || !c.uses_syn() && !zero(&self.w_syn[v]) {
                return Err(Error::invalid(format!(
                    "voxel {v} ({c:?}) has weights on a source it does not use"
                )));
            }
        }
        Ok(())
    }

    pub fn class_mask(&self, class: VoxelClass) -> Vec<bool> {
        self.classes.iter().map(|&c| c == class).collect()
    }
}

/// Unstandardized voxel time-courses `design(X · w_v)` per run, where `x`
/// holds one feature row per event and `weights` one row per voxel.
pub fn voxel_signal(
    x: &[DMatrix<f64>],
    times: &[Vec<f64>],
    weights: &[Vec<f64>],
    kernel: &HrfKernel,
    tr_s: f64,
    n_scans: usize,
) -> Result<Vec<DMatrix<f64>>> {
    if x.len() != times.len() {
        return Err(Error::shape("one event-time list per run is required"));
    }
    let d = x.first().map_or(0, |m| m.ncols());
    if weights.iter().any(|w| w.len() != d) {
        return Err(Error::shape(format!("voxel weights must have {d} entries")));
    }
    let w = DMatrix::from_fn(d, weights.len(), |i, v| weights[v][i]);
    x.par_iter()
        .zip(times)
        .map(|(xr, t)| {
            if xr.ncols() != d {
                return Err(Error::shape("runs differ in feature count"));
            }
            build_design(&(xr * &w), t, kernel, tr_s, n_scans, false)
        })
        .collect()
}

/// Gaussian noise of standard deviation `1/snr`, optionally AR(1) with
/// coefficient `ar1` (kept stationary at the same variance). Every
/// `(seed, subject, run)` draws from its own stream.
pub fn noise(
    n_scans: usize,
    n_voxels: usize,
    snr: f64,
    ar1: Option<f64>,
    seed: u64,
    subject: usize,
    run: usize,
) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((subject as u64) << 20) | run as u64);
    let sd = if snr.is_infinite() { 0.0 } else { 1.0 / snr };
    let phi = ar1.unwrap_or(0.0);
    let innov = (1.0 - phi * phi).sqrt();
    let mut m = DMatrix::zeros(n_scans, n_voxels);
    for v in 0..n_voxels {
        let mut prev = 0.0;
        for s in 0..n_scans {
            let e: f64 = rng.sample(StandardNormal);
            let val = if s == 0 { e } else { phi * prev + innov * e };
            prev = val;
            m[(s, v)] = sd * val;
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoldConfig {
    pub n_subjects: usize,
    pub n_scans: usize,
    pub tr_s: f64,
    pub snr: f64,
    pub ar1: Option<f64>,
    pub grid_shape: [usize; 3],
    pub voxel_size_mm: f64,
    pub seed: u64,
}

impl Default for BoldConfig {
    fn default() -> Self {
        BoldConfig {
            n_subjects: 20,
            n_scans: 200,
            tr_s: 2.0,
            snr: 1.0,
            ar1: None,
            grid_shape: [10, 10, 5],
            voxel_size_mm: 8.0,
            seed: 0,
        }
    }
}

impl BoldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.n_scans == 0 || !(self.tr_s > 0.0) || !(self.voxel_size_mm > 0.0) {
            return Err(Error::invalid("subjects, scans, TR and voxel size must be positive"));
        }
        if !(self.snr > 0.0) {
            return Err(Error::invalid("SNR must be positive"));
        }
        if self.ar1.is_some_and(|a| !(a.abs() < 1.0)) {
            return Err(Error::invalid("AR(1) coefficient must lie in (-1, 1)"));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::full_grid(self.grid_shape, [self.voxel_size_mm; 3])
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticBold {
    /// `subjects × runs`.
    pub subjects: Vec<Vec<BoldRun>>,
    /// Shared noiseless signal per run, unit variance per voxel.
    pub signal: Vec<DMatrix<f64>>,
}

/// Per voxel, `standardize(design(X_sem·w_sem) + design(X_syn·w_syn))` plus
/// subject-specific noise at the layout's SNR. `x_sem` and `x_syn` hold one
/// row per word event of each run and `times` the event onsets.
#[allow(clippy::too_many_arguments)]
pub fn gen_bold(
    x_sem: &[DMatrix<f64>],
    x_syn: &[DMatrix<f64>],
    times: &[Vec<f64>],
    layout: &VoxelLayout,
    kernel: &HrfKernel,
    cfg: &BoldConfig,
) -> Result<SyntheticBold> {
    cfg.validate()?;
    layout.validate()?;
    if x_sem.len() != x_syn.len() {
        return Err(Error::shape("semantic and syntactic features differ in run count"));
    }
    let sem = voxel_signal(x_sem, times, &layout.w_sem, kernel, cfg.tr_s, cfg.n_scans)?;
    let syn = voxel_signal(x_syn, times, &layout.w_syn, kernel, cfg.tr_s, cfg.n_scans)?;
    let signal: Vec<DMatrix<f64>> = sem
        .into_iter()
        .zip(syn)
        .map(|(a, b)| {
            let mut s = a + b;
            standardize_columns(&mut s);
            s
        })
        .collect();
    let subjects = subject_runs(&signal, &layout.geometry, layout.snr, cfg)?;
    Ok(SyntheticBold { subjects, signal })
}

/// Every subject's runs: the shared `signal` plus that subject's noise at
/// `snr`.
pub fn subject_runs(
    signal: &[DMatrix<f64>],
    geometry: &Geometry,
    snr: f64,
    cfg: &BoldConfig,
) -> Result<Vec<Vec<BoldRun>>> {
    (0..cfg.n_subjects)
        .into_par_iter()
        .map(|subj| {
            signal
                .iter()
                .enumerate()
                .map(|(r, s)| {
                    let data = s + noise(s.nrows(), s.ncols(), snr, cfg.ar1, cfg.seed, subj, r);
                    BoldRun::new(data, cfg.tr_s, geometry.clone(), r as u32 + 1)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

/// Row `t` is the mean of rows `t+1−span ..= t` (fewer at the start).
pub fn trailing_mean(x: &DMatrix<f64>, span: usize) -> DMatrix<f64> {
    let span = span.max(1);
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    for t in 0..x.nrows() {
        let lo = (t + 1).saturating_sub(span);
        let rows = x.rows(lo, t + 1 - lo);
        for j in 0..x.ncols() {
            out[(t, j)] = rows.column(j).sum() / (t + 1 - lo) as f64;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRecovery {
    pub class: VoxelClass,
    pub n_voxels: usize,
    /// Fraction flagged by the group test on the syntactic-design map.
    pub syn_detection: f64,
    /// Fraction flagged by the group test on the semantic-design map.
    pub sem_detection: f64,
    /// Mean of the finite specificity values; `None` when there are none.
    pub mean_specificity: Option<f64>,
    pub n_specificity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub value: f64,
    /// `">= 0.9"`-style description of the pass condition.
    pub condition: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoverySummary {
    pub classes: Vec<ClassRecovery>,
    pub verdicts: Vec<Verdict>,
}

impl RecoverySummary {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed)
    }

    pub fn class(&self, c: VoxelClass) -> Option<&ClassRecovery> {
        self.classes.iter().find(|r| r.class == c)
    }
}

/// Detection rates of two group masks and mean specificity, per voxel
/// class, plus the four recovery verdicts.
pub fn evaluate_recovery(
    syn_mask: &VoxelMap,
    sem_mask: &VoxelMap,
    specificity: &VoxelMap,
    layout: &VoxelLayout,
) -> Result<RecoverySummary> {
    for m in [syn_mask, sem_mask, specificity] {
        if !m.geometry.same_space(&layout.geometry) {
            return Err(Error::shape("map and layout geometries differ"));
        }
    }
    let (syn, sem) = (syn_mask.as_mask(), sem_mask.as_mask());
    let classes: Vec<ClassRecovery> = VoxelClass::ALL
        .iter()
        .map(|&class| {
            let idx: Vec<usize> = (0..layout.classes.len())
                .filter(|&v| layout.classes[v] == class)
                .collect();
            let n = idx.len();
            let rate = |m: &[bool]| {
                if n == 0 {
                    0.0
                } else {
                    idx.iter().filter(|&&v| m[v]).count() as f64 / n as f64
                }
            };
            let spec: Vec<f64> = idx
                .iter()
                .map(|&v| specificity.values[v])
                .filter(|x| x.is_finite())
                .collect();
            ClassRecovery {
                class,
                n_voxels: n,
                syn_detection: rate(&syn),
                sem_detection: rate(&sem),
                mean_specificity: (!spec.is_empty()).then(|| spec.iter().sum::<f64>() / spec.len() as f64),
                n_specificity: spec.len(),
            }
        })
        .collect();
    let get = |c: VoxelClass| classes.iter().find(|r| r.class == c).expect("all classes listed");
    let spec_or_nan = |c: VoxelClass| get(c).mean_specificity.unwrap_or(f64::NAN);
    let verdict = |name: &str, value: f64, condition: &str, passed: bool| Verdict {
        name: name.into(),
        value,
        condition: condition.into(),
        passed,
    };
    let syn_rate = get(VoxelClass::SyntaxDriven).syn_detection;
    let null_rate = get(VoxelClass::Null).syn_detection;
    let (s_sem, s_syn) = (
        spec_or_nan(VoxelClass::SemanticsDriven),
        spec_or_nan(VoxelClass::SyntaxDriven),
    );
    let verdicts = vec![
        verdict("syntax_voxels_detected", syn_rate, ">= 0.9", syn_rate >= 0.9),
        verdict("null_voxels_flagged", null_rate, "<= 0.01", null_rate <= 0.01),
        verdict("semantics_voxels_specificity", s_sem, "> 0", s_sem > 0.0),
        verdict("syntax_voxels_specificity", s_syn, "< 0", s_syn < 0.0),
    ];
    Ok(RecoverySummary { classes, verdicts })
}
