//! From embedding matrices to voxel time-courses: haemodynamic convolution,
//! scan sampling, BOLD preprocessing and cross-validated ridge encoding.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::io;
use crate::maps::{Geometry, MapKind, VoxelMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HrfParams {
    pub peak_s: f64,
    pub undershoot_s: f64,
    pub peak_dispersion: f64,
    pub undershoot_dispersion: f64,
    pub ratio: f64,
    pub duration_s: f64,
    pub dt_s: f64,
}

impl Default for HrfParams {
    fn default() -> Self {
        HrfParams {
            peak_s: 6.0,
            undershoot_s: 16.0,
            peak_dispersion: 1.0,
            undershoot_dispersion: 1.0,
            ratio: 1.0 / 6.0,
            duration_s: 32.0,
            dt_s: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HrfKernel {
    pub dt_s: f64,
    pub samples: Vec<f64>,
}

impl HrfKernel {
    pub fn duration_s(&self) -> f64 {
        (self.samples.len() - 1) as f64 * self.dt_s
    }
}

fn gamma_pdf(t: f64, shape: f64, scale: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    ((shape - 1.0) * t.ln() - t / scale - ln_gamma(shape) - shape * scale.ln()).exp()
}

/// Difference of two gamma densities (response minus scaled undershoot),
/// scaled so the largest sample is 1.
pub fn hrf_kernel(p: &HrfParams) -> Result<HrfKernel> {
    if !(p.dt_s > 0.0) || !(p.duration_s > 0.0) || !(p.peak_dispersion > 0.0) || !(p.undershoot_dispersion > 0.0) {
        return Err(Error::invalid("kernel step, duration and dispersions must be positive"));
    }
    let n = (p.duration_s / p.dt_s + 1e-9).floor() as usize + 1;
    let raw: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 * p.dt_s;
            gamma_pdf(t, p.peak_s / p.peak_dispersion, p.peak_dispersion)
                - p.ratio * gamma_pdf(t, p.undershoot_s / p.undershoot_dispersion, p.undershoot_dispersion)
        })
        .collect();
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(Error::invalid("kernel has no positive lobe"));
    }
    Ok(HrfKernel {
        dt_s: p.dt_s,
        samples: raw.into_iter().map(|v| v / max).collect(),
    })
}

/// Convolves `(time_s, amplitude)` events with the kernel on its `dt` grid
/// and samples the result at scan times `s · tr_s`. Not standardized.
pub fn convolve_events(events: &[(f64, f64)], kernel: &HrfKernel, tr_s: f64, n_scans: usize) -> Result<Vec<f64>> {
    let duration = n_scans as f64 * tr_s;
    let mut out = vec![0.0; n_scans];
    let k = &kernel.samples;
    for &(time, amp) in events {
        if !(0.0..=duration).contains(&time) {
            return Err(Error::invalid(format!(
                "event at {time} s lies outside the run (0..{duration} s)"
            )));
        }
        if amp == 0.0 {
            continue;
        }
        let ke = (time / kernel.dt_s).round() as i64;
        for (s, o) in out.iter_mut().enumerate() {
            let ks = (s as f64 * tr_s / kernel.dt_s).round() as i64;
            let lag = ks - ke;
            if lag >= 0 && (lag as usize) < k.len() {
                *o += amp * k[lag as usize];
            }
        }
    }
    Ok(out)
}

/// Mean 0, unit (population) variance per column; constant columns become 0.
pub fn standardize_columns(m: &mut DMatrix<f64>) {
    let n = m.nrows() as f64;
    for mut col in m.column_iter_mut() {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        if var <= 1e-24 * (1.0 + mean * mean) {
            col.fill(0.0);
        } else {
            let sd = var.sqrt();
            col.iter_mut().for_each(|v| *v = (*v - mean) / sd);
        }
    }
}

/// Design matrix of one run: column `j` convolves `X[t][j]` placed at
/// `times[t]`. Set `standardize` to get mean-0 unit-variance columns.
pub fn build_design(
    x: &DMatrix<f64>,
    times: &[f64],
    kernel: &HrfKernel,
    tr_s: f64,
    n_scans: usize,
    standardize: bool,
) -> Result<DMatrix<f64>> {
    if times.len() != x.nrows() {
        return Err(Error::shape(format!(
            "{} event times for {} rows",
            times.len(),
            x.nrows()
        )));
    }
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("event times must be sorted"));
    }
    let mut d = DMatrix::zeros(n_scans, x.ncols());
    for j in 0..x.ncols() {
        let events: Vec<(f64, f64)> = times.iter().enumerate().map(|(t, &time)| (time, x[(t, j)])).collect();
        let col = convolve_events(&events, kernel, tr_s, n_scans)?;
        d.set_column(j, &DVector::from_vec(col));
    }
    if standardize {
        standardize_columns(&mut d);
    }
    Ok(d)
}

/// `ln(count / total)` per word; words never seen get the rarest word's value.
pub fn log_frequencies(words: &[String], counts: &HashMap<String, usize>) -> Vec<f64> {
    let total: usize = counts.values().sum();
    let min_count = counts.values().copied().filter(|&c| c > 0).min().unwrap_or(1);
    let total = total.max(1) as f64;
    words
        .iter()
        .map(|w| {
            let c = counts.get(w).copied().filter(|&c| c > 0).unwrap_or(min_count);
            (c as f64 / total).ln()
        })
        .collect()
}

/// Acoustic energy, word rate and log lexical frequency, each convolved and
/// sampled like any other regressor. Columns are standardized.
pub fn baseline_regressors(
    audio_rms: &[(f64, f64)],
    word_times: &[f64],
    log_freqs: &[f64],
    kernel: &HrfKernel,
    tr_s: f64,
    n_scans: usize,
) -> Result<DMatrix<f64>> {
    if word_times.len() != log_freqs.len() {
        return Err(Error::shape("one log frequency per word is required"));
    }
    let cols = [
        convolve_events(audio_rms, kernel, tr_s, n_scans)?,
        convolve_events(
            &word_times.iter().map(|&t| (t, 1.0)).collect::<Vec<_>>(),
            kernel,
            tr_s,
            n_scans,
        )?,
        convolve_events(
            &word_times
                .iter()
                .zip(log_freqs)
                .map(|(&t, &f)| (t, f))
                .collect::<Vec<_>>(),
            kernel,
            tr_s,
            n_scans,
        )?,
    ];
    let mut d = DMatrix::from_fn(n_scans, 3, |s, j| cols[j][s]);
    standardize_columns(&mut d);
    Ok(d)
}

/// One fMRI run: `n_scans × n_voxels`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoldRun {
    pub data: DMatrix<f64>,
    pub tr_s: f64,
    pub geometry: Geometry,
    pub run_id: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct BoldSidecar {
    tr_s: f64,
    n_scans: usize,
    n_voxels: usize,
    grid_shape: [usize; 3],
    voxel_size_mm: [f64; 3],
    run_id: u32,
    voxel_coords: Vec<[usize; 3]>,
}

impl BoldRun {
    pub fn new(data: DMatrix<f64>, tr_s: f64, geometry: Geometry, run_id: u32) -> Result<Self> {
        if !(tr_s > 0.0) {
            return Err(Error::invalid("tr_s must be positive"));
        }
        if data.ncols() != geometry.n_voxels() {
            return Err(Error::shape(format!(
                "{} voxel columns for {} voxel coordinates",
                data.ncols(),
                geometry.n_voxels()
            )));
        }
        Ok(BoldRun {
            data,
            tr_s,
            geometry,
            run_id,
        })
    }

    pub fn n_scans(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_voxels(&self) -> usize {
        self.data.ncols()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (s, v) = self.data.shape();
        let row_major: Vec<f64> = (0..s)
            .flat_map(|i| self.data.row(i).iter().copied().collect::<Vec<_>>())
            .collect();
        io::write_f32_raw(path, &row_major)?;
        io::write_json(
            io::sidecar_path(path),
            &BoldSidecar {
                tr_s: self.tr_s,
                n_scans: s,
                n_voxels: v,
                grid_shape: self.geometry.grid_shape,
                voxel_size_mm: self.geometry.voxel_size_mm,
                run_id: self.run_id,
                voxel_coords: self.geometry.voxel_coords.clone(),
            },
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side: BoldSidecar = io::read_json(io::sidecar_path(path))?;
        let values = io::read_f32_raw(path, side.n_scans * side.n_voxels)?;
        let geometry = Geometry {
            grid_shape: side.grid_shape,
            voxel_size_mm: side.voxel_size_mm,
            voxel_coords: side.voxel_coords,
        };
        geometry.validate()?;
        BoldRun::new(
            DMatrix::from_row_slice(side.n_scans, side.n_voxels, &values),
            side.tr_s,
            geometry,
            side.run_id,
        )
    }
}

/// Removes each voxel's least-squares linear trend and z-scores it.
/// Returns the cleaned run and a flag per voxel whose detrended variance
/// vanished (those voxels are set to zero).
pub fn preprocess_bold(run: &BoldRun) -> Result<(BoldRun, Vec<bool>)> {
    let n = run.n_scans();
    if n < 3 {
        return Err(Error::invalid("preprocessing needs at least 3 scans"));
    }
    let nf = n as f64;
    let t_mean = (nf - 1.0) / 2.0;
    let t_ss: f64 = (0..n).map(|t| (t as f64 - t_mean).powi(2)).sum();
    let mut out = run.data.clone();
    let mut flags = vec![false; run.n_voxels()];
    for (v, mut col) in out.column_iter_mut().enumerate() {
        let mean = col.sum() / nf;
        let total_ss: f64 = col.iter().map(|y| (y - mean).powi(2)).sum();
        let slope = col
            .iter()
            .enumerate()
            .map(|(t, y)| (t as f64 - t_mean) * (y - mean))
            .sum::<f64>()
            / t_ss;
        for (t, y) in col.iter_mut().enumerate() {
            *y -= mean + slope * (t as f64 - t_mean);
        }
        let resid_ss: f64 = col.iter().map(|y| y * y).sum();
        if resid_ss <= 1e-20 * total_ss.max(f64::MIN_POSITIVE) || resid_ss == 0.0 {
            col.fill(0.0);
            flags[v] = true;
            continue;
        }
        let sd = (resid_ss / nf).sqrt();
        col.iter_mut().for_each(|y| *y /= sd);
    }
    let flagged = flags.iter().filter(|&&f| f).count();
    if flagged > 0 {
        log::warn!("run {}: {flagged} zero-variance voxel(s) set to zero", run.run_id);
    }
    Ok((
        BoldRun {
            data: out,
            ..run.clone()
        },
        flags,
    ))
}

/// `argmin ‖Y − Xβ‖² + λ‖β‖²` for every column of `y`, via a Cholesky
/// factorisation of `XᵀX + λI`.
pub fn ridge(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid("lambda must be >= 0"));
    }
    if x.nrows() != y.nrows() {
        return Err(Error::shape(format!(
            "{} design rows, {} target rows",
            x.nrows(),
            y.nrows()
        )));
    }
    let d = x.ncols();
    let gram = x.tr_mul(x) + DMatrix::identity(d, d) * lambda;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("XᵀX + {lambda}·I is not positive definite")))?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if lambda == 0.0 && d > 0 && lo <= 1e-7 * hi {
        return Err(Error::Singular(format!("XᵀX + {lambda}·I is numerically singular")));
    }
    Ok(chol.solve(&x.tr_mul(y)))
}

/// Pearson correlation; 0 when either side has no variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    if a.is_empty() || a.len() != b.len() {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Ten log-spaced values between `1e-3` and `1e4`.
pub fn default_lambda_grid() -> Vec<f64> {
    log_grid(1e-3, 1e4, 10)
}

pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Fitting coefficients on training runs.
    Fit,
    /// Scoring the λ grid on the validation run.
    Select,
    /// Scoring the chosen λ on the held-out run.
    Test,
}

/// Observer told about every run read during cross-validation, as
/// `(fold, run, phase)`.
pub type AccessObserver<'a> = &'a (dyn Fn(usize, usize, Phase) + Sync);

#[derive(Debug, Clone)]
pub struct CvResult {
    /// Mean held-out correlation per voxel.
    pub r: Vec<f64>,
    /// `folds × voxels` held-out correlations.
    pub fold_r: Vec<Vec<f64>>,
    /// `folds × voxels` selected λ.
    pub lambda_star: Vec<Vec<f64>>,
}

/// Validation run used when `test` is held out.
pub fn validation_run(test: usize, n_runs: usize) -> usize {
    (test + 1) % n_runs
}

fn stack(mats: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = mats.iter().map(|m| m.nrows()).sum();
    let cols = mats[0].ncols();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for m in mats {
        out.view_mut((r, 0), (m.nrows(), cols)).copy_from(m);
        r += m.nrows();
    }
    out
}

fn column_correlations(pred: &DMatrix<f64>, y: &DMatrix<f64>) -> Vec<f64> {
    (0..y.ncols())
        .map(|v| pearson(pred.column(v).as_slice(), y.column(v).as_slice()))
        .collect()
}

/// Leave-one-run-out encoding with an inner validation run.
///
/// For each held-out test run, the next run (cyclically) is the validation
/// run and the rest are training runs. Coefficients for every λ are fit on
/// the training runs only; each voxel keeps the λ with the best validation
/// correlation, and that same fit is scored on the test run.
pub fn nested_cv_encode(
    designs: &[DMatrix<f64>],
    bold: &[DMatrix<f64>],
    lambdas: &[f64],
    observer: Option<AccessObserver<'_>>,
) -> Result<CvResult> {
    let n_runs = designs.len();
    if n_runs != bold.len() {
        return Err(Error::shape(format!("{n_runs} design runs, {} BOLD runs", bold.len())));
    }
    if n_runs < 3 {
        return Err(Error::invalid("nested cross-validation needs at least 3 runs"));
    }
    if lambdas.is_empty() || lambdas.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::invalid("lambda grid must be non-empty and positive"));
    }
    let d = designs[0].ncols();
    let v = bold[0].ncols();
    for (i, (x, y)) in designs.iter().zip(bold).enumerate() {
        if x.ncols() != d || y.ncols() != v || x.nrows() != y.nrows() {
            return Err(Error::shape(format!("run {i} does not match the others in shape")));
        }
    }
    let note = |fold: usize, run: usize, phase: Phase| {
        if let Some(obs) = observer {
            obs(fold, run, phase);
        }
    };
    let mut fold_r = Vec::with_capacity(n_runs);
    let mut lambda_star = Vec::with_capacity(n_runs);
    for test in 0..n_runs {
        let val = validation_run(test, n_runs);
        let train: Vec<usize> = (0..n_runs).filter(|&r| r != test && r != val).collect();
        for &r in &train {
            note(test, r, Phase::Fit);
        }
        let x_tr = stack(&train.iter().map(|&r| &designs[r]).collect::<Vec<_>>());
        let y_tr = stack(&train.iter().map(|&r| &bold[r]).collect::<Vec<_>>());
        let svd = x_tr.svd(true, true);
        let u = svd
            .u
            .as_ref()
            .ok_or_else(|| Error::Singular("SVD returned no U".into()))?;
        let vt = svd
            .v_t
            .as_ref()
            .ok_or_else(|| Error::Singular("SVD returned no Vᵀ".into()))?;
        let s = &svd.singular_values;
        let uty = u.tr_mul(&y_tr);
        let coef = |lambda: f64| -> DMatrix<f64> {
            let mut scaled = uty.clone();
            for (i, mut row) in scaled.row_iter_mut().enumerate() {
                row *= s[i] / (s[i] * s[i] + lambda);
            }
            vt.tr_mul(&scaled)
        };
        note(test, val, Phase::Select);
        let mut best = vec![f64::NEG_INFINITY; v];
        let mut best_l = vec![lambdas[0]; v];
        let mut betas = DMatrix::zeros(d, v);
        for &lambda in lambdas {
            let b = coef(lambda);
            let r = column_correlations(&(&designs[val] * &b), &bold[val]);
            for vox in 0..v {
                if r[vox] > best[vox] {
                    best[vox] = r[vox];
                    best_l[vox] = lambda;
                    betas.set_column(vox, &b.column(vox));
                }
            }
        }
        note(test, test, Phase::Test);
        fold_r.push(column_correlations(&(&designs[test] * &betas), &bold[test]));
        lambda_star.push(best_l);
    }
    let r = (0..v)
        .map(|vox| fold_r.iter().map(|f| f[vox]).sum::<f64>() / n_runs as f64)
        .collect();
    Ok(CvResult { r, fold_r, lambda_star })
}

/// Per-run designs with the baseline columns appended to the model columns.
pub fn append_baseline(model: &[DMatrix<f64>], baseline: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>> {
    if model.len() != baseline.len() {
        return Err(Error::shape("one baseline design per run is required"));
    }
    model
        .iter()
        .zip(baseline)
        .map(|(m, b)| {
            if m.nrows() != b.nrows() {
                return Err(Error::shape("baseline and model designs differ in scan count"));
            }
            let mut out = DMatrix::zeros(m.nrows(), m.ncols() + b.ncols());
            out.view_mut((0, 0), m.shape()).copy_from(m);
            out.view_mut((0, m.ncols()), b.shape()).copy_from(b);
            Ok(out)
        })
        .collect()
}

/// Element-wise `with_model − baseline`.
pub fn delta_r(with_model: &VoxelMap, baseline: &VoxelMap) -> Result<VoxelMap> {
    with_model.check_same_space(baseline)?;
    let values = with_model
        .values
        .iter()
        .zip(&baseline.values)
        .map(|(a, b)| a - b)
        .collect();
    Ok(VoxelMap::new(values, with_model.geometry.clone(), MapKind::DeltaR)?
        .with_provenance(vec![with_model.provenance.join("+"), baseline.provenance.join("+")]))
}
