//! CSV summary tables and grayscale slice images of the default analyses.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use irnlm::maps::{MapKind, VoxelMap};
use serde_json::json;

use crate::config::config_hash;
use crate::error::{CliError, CliResult};
use crate::pipeline::{DecodeMode, Labels, Pipeline};
use crate::stage::StageSpec;

/// Binary PGM (P5) of every z-slice of `map`, tiled left to right. Masks
/// map to 0/255; signed maps to `128 ± 127·v/max|v|`. Grid points without
/// a voxel are black.
pub fn pgm_slices(map: &VoxelMap) -> Vec<u8> {
    let [nx, ny, nz] = map.geometry.grid_shape;
    let (w, h) = (nx * nz, ny);
    let mut pixels = vec![0u8; w * h];
    let is_mask = map.kind == MapKind::Mask;
    let scale = map
        .values
        .iter()
        .filter(|v| v.is_finite())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    for (v, &[x, y, z]) in map.values.iter().zip(&map.geometry.voxel_coords) {
        let level = if is_mask {
            if *v == 1.0 {
                255.0
            } else {
                0.0
            }
        } else if scale > 0.0 && v.is_finite() {
            128.0 + 127.0 * v / scale
        } else {
            128.0
        };
        // Image rows run top to bottom, so flip y.
        pixels[(ny - 1 - y) * w + z * nx + x] = level.round().clamp(0.0, 255.0) as u8;
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(pixels);
    out
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

impl Pipeline {
    pub fn report_spec(&self) -> CliResult<StageSpec> {
        let mut hashes = Vec::new();
        for f in &self.cfg.encode.features {
            hashes.push(self.group_spec(f)?.hash);
        }
        for f in &self.cfg.decode.features {
            let s = f
                .single()
                .ok_or_else(|| CliError::Config(format!("decode.features: `{f}` must name a single feature")))?;
            for l in [Labels::Triplet, Labels::Category] {
                hashes.push(self.decode_spec(DecodeMode::Cv, s, l)?.hash);
            }
        }
        let synthetic = self.cfg.paths.bold_dir.is_none();
        if synthetic {
            hashes.push(self.verdicts_spec()?.hash);
        }
        hashes.push(self.specificity_spec()?.hash);
        let dir = self.at("report");
        let mut outputs = vec![dir.join("group.csv"), dir.join("decode.csv")];
        if synthetic {
            outputs.push(dir.join("verdicts.csv"));
        }
        for f in &self.cfg.encode.features {
            outputs.push(dir.join(format!("group-{f}-z.pgm")));
            outputs.push(dir.join(format!("group-{f}-mask.pgm")));
        }
        outputs.push(dir.join("specificity.pgm"));
        Ok(StageSpec {
            key: "report".into(),
            hash: config_hash(&json!({"stage": "report", "upstream": hashes})),
            seed: None,
            inputs: vec!["stats".into(), "decode".into()],
            outputs,
        })
    }

    /// Runs the default group tests, specificity, decoding and (for
    /// synthetic data) recovery verdicts, then tabulates them.
    pub fn report(&self, force: bool) -> CliResult<()> {
        let spec = self.report_spec()?;
        self.run(&spec, force, || {
            let dir = self.at("report");
            let mut group = String::from("feature,n_subjects,n_voxels,n_significant,z_fdr,mean_delta_r\n");
            for f in &self.cfg.encode.features {
                let g = self.group(f, false)?;
                let z = g.z_fdr.map(|z| z.to_string()).unwrap_or_default();
                let _ = writeln!(
                    group,
                    "{f},{},{},{},{z},{}",
                    g.n_subjects, g.n_voxels, g.n_significant, g.mean_value
                );
                let zmap = VoxelMap::load(self.stats_path(&format!("group-{f}-z.map")))?;
                write_bytes(&dir.join(format!("group-{f}-z.pgm")), &pgm_slices(&zmap))?;
                let mask = self.group_mask(f)?;
                write_bytes(&dir.join(format!("group-{f}-mask.pgm")), &pgm_slices(&mask))?;
            }
            write_bytes(&dir.join("group.csv"), group.as_bytes())?;

            let mut decode = String::from("feature,labels,accuracy,chance,n_rows,n_classes\n");
            for f in &self.cfg.decode.features {
                let s = f.single().expect("checked in report_spec");
                for l in [Labels::Triplet, Labels::Category] {
                    let d = self.decode(DecodeMode::Cv, s, l, false)?;
                    let _ = writeln!(
                        decode,
                        "{s},{},{},{},{},{}",
                        l.name(),
                        d.accuracy,
                        d.chance.unwrap_or(f64::NAN),
                        d.n_rows,
                        d.n_classes
                    );
                }
            }
            write_bytes(&dir.join("decode.csv"), decode.as_bytes())?;

            if let Some(summary) = self.verdicts(false)? {
                let mut csv = String::from("verdict,value,condition,passed\n");
                for v in &summary.verdicts {
                    let _ = writeln!(csv, "{},{},{},{}", v.name, v.value, v.condition, v.passed);
                }
                write_bytes(&dir.join("verdicts.csv"), csv.as_bytes())?;
            }
            let spec_map = self.specificity(false)?;
            write_bytes(&dir.join("specificity.pgm"), &pgm_slices(&spec_map))
        })?;
        Ok(())
    }
}
