//! Stage bookkeeping: completion stamps and provenance sidecars.
//!
//! A stage is skipped when its stamp records the same configuration hash
//! and every listed output (with its sidecar) is present.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Written next to every artifact as `<file>.prov.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub artifact: String,
    pub stage: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub version: String,
    /// Stage keys or external files this artifact was computed from.
    pub inputs: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Stamp {
    stage: String,
    config_hash: String,
    outputs: Vec<PathBuf>,
}

pub fn sidecar_of(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".prov.json");
    PathBuf::from(s)
}

pub fn read_sidecar(path: &Path) -> CliResult<Sidecar> {
    let p = sidecar_of(path);
    let text = fs::read_to_string(&p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
}

pub struct StageSpec {
    pub key: String,
    pub hash: String,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<PathBuf>,
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("artifact values serialize");
    write_text(path, &(text + "\n"))
}

fn stamp_path(stamps: &Path, key: &str) -> PathBuf {
    stamps.join(format!("{key}.json"))
}

/// True when the stage's stamp matches `spec` and all outputs exist.
pub fn is_fresh(stamps: &Path, spec: &StageSpec) -> bool {
    let Ok(text) = fs::read_to_string(stamp_path(stamps, &spec.key)) else {
        return false;
    };
    let Ok(stamp) = serde_json::from_str::<Stamp>(&text) else {
        return false;
    };
    stamp.config_hash == spec.hash
        && stamp.outputs == spec.outputs
        && spec.outputs.iter().all(|o| o.exists() && sidecar_of(o).exists())
}

/// Runs `body` unless the stage is fresh (or `force` is set), then writes
/// the sidecars and the stamp. Returns whether the body ran.
pub fn run_stage(
    stamps: &Path,
    spec: &StageSpec,
    force: bool,
    body: impl FnOnce() -> CliResult<()>,
) -> CliResult<bool> {
    if !force && is_fresh(stamps, spec) {
        log::info!("{}: up to date", spec.key);
        return Ok(false);
    }
    log::info!("{}: running", spec.key);
    for o in &spec.outputs {
        if let Some(parent) = o.parent() {
            ensure_dir(parent)?;
        }
    }
    body()?;
    for o in &spec.outputs {
        if !o.exists() {
            return Err(CliError::Data(format!(
                "stage {} did not produce {}",
                spec.key,
                o.display()
            )));
        }
        let side = Sidecar {
            artifact: o
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            stage: spec.key.clone(),
            config_hash: spec.hash.clone(),
            seed: spec.seed,
            version: VERSION.to_string(),
            inputs: spec.inputs.clone(),
        };
        write_json(&sidecar_of(o), &side)?;
    }
    write_json(
        &stamp_path(stamps, &spec.key),
        &Stamp {
            stage: spec.key.clone(),
            config_hash: spec.hash.clone(),
            outputs: spec.outputs.clone(),
        },
    )?;
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(dir: &Path, hash: &str) -> StageSpec {
        StageSpec {
            key: "demo".into(),
            hash: hash.into(),
            seed: Some(3),
            inputs: vec!["upstream".into()],
            outputs: vec![dir.join("out/a.txt")],
        }
    }

    #[test]
    fn second_run_is_skipped_until_the_hash_changes() {
        let dir = tempfile::tempdir().unwrap();
        let stamps = dir.path().join(".stamps");
        let mut calls = 0;
        let s = spec(dir.path(), "h1");
        let mut body = || {
            calls += 1;
            write_text(&s.outputs[0], "x")
        };
        assert!(run_stage(&stamps, &s, false, &mut body).unwrap());
        assert!(!run_stage(&stamps, &s, false, &mut body).unwrap());
        assert!(run_stage(&stamps, &s, true, &mut body).unwrap());
        let s2 = spec(dir.path(), "h2");
        let body2 = || write_text(&s2.outputs[0], "y");
        assert!(run_stage(&stamps, &s2, false, body2).unwrap());
        assert_eq!(calls, 2);
        let side = read_sidecar(&s2.outputs[0]).unwrap();
        assert_eq!(side.config_hash, "h2");
        assert_eq!(side.seed, Some(3));
        assert_eq!(side.artifact, "a.txt");
    }

    #[test]
    fn missing_output_reruns_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let stamps = dir.path().join(".stamps");
        let s = spec(dir.path(), "h");
        run_stage(&stamps, &s, false, || write_text(&s.outputs[0], "x")).unwrap();
        fs::remove_file(&s.outputs[0]).unwrap();
        assert!(!is_fresh(&stamps, &s));
    }

    #[test]
    fn body_must_produce_its_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec(dir.path(), "h");
        let e = run_stage(&dir.path().join(".stamps"), &s, false, || Ok(())).unwrap_err();
        assert_eq!(e.exit_code(), 3);
    }
}
