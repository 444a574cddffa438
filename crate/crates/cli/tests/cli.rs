use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::SystemTime;

use irnlm_cli::config::PipelineConfig;
use irnlm_cli::feature::Feature;
use irnlm_cli::pipeline::{DecodeMode, Labels, Pipeline};
use irnlm_cli::stage::{read_sidecar, StageSpec};

const SMALL: &[&str] = &[
    "--set",
    "synth.train_corpus.n_tokens=20000",
    "--set",
    "synth.bold.n_subjects=4",
    "--set",
    "glove.epochs=5",
];

fn irnlm(work: &Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_irnlm"))
        .arg("--workdir")
        .arg(work)
        .args(SMALL)
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn small_config(work: &Path) -> PipelineConfig {
    let mut o: Vec<String> = SMALL.iter().filter(|a| **a != "--set").map(|s| s.to_string()).collect();
    o.push(format!("workdir={}", work.display()));
    PipelineConfig::load(None, &o).unwrap()
}

fn files(dir: &Path) -> BTreeMap<PathBuf, (SystemTime, Vec<u8>)> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let meta = fs::metadata(&p).unwrap();
                out.insert(p.clone(), (meta.modified().unwrap(), fs::read(&p).unwrap()));
            }
        }
    }
    out
}

#[test]
fn missing_input_path_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = irnlm(
        dir.path(),
        &["--set", "paths.stimulus=/nonexistent/stim.tsv", "corpus", "vocab"],
    );
    assert_eq!(code, 2);
    assert!(
        err.contains("paths.stimulus") && err.contains("/nonexistent/stim.tsv"),
        "{err}"
    );
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = irnlm(dir.path(), &["--set", "stats.fwhm=3", "synth", "corpus"]);
    assert_eq!(code, 2);
    assert!(err.contains("fwhm"), "{err}");
    let (code, err) = irnlm(dir.path(), &["--set", "stats.q=1.5", "synth", "corpus"]);
    assert_eq!(code, 2);
    assert!(err.contains("stats.q"), "{err}");
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, "{ not json").unwrap();
    let (code, err) = irnlm(dir.path(), &["--config", cfg.to_str().unwrap(), "synth", "corpus"]);
    assert_eq!(code, 2);
    assert!(err.contains("bad.json"), "{err}");
}

#[test]
fn malformed_corpus_exits_3_and_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("train.tsv");
    fs::write(&bad, "just one column\nand another\n").unwrap();
    let set = format!("paths.train_corpus={}", bad.display());
    let (code, err) = irnlm(&dir.path().join("w"), &["--set", &set, "corpus", "vocab"]);
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("train.tsv"), "{err}");
}

#[test]
fn diverging_glove_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = irnlm(
        dir.path(),
        &[
            "--set",
            "glove.learning_rate=1e12",
            "train",
            "glove",
            "--mode",
            "semantic",
        ],
    );
    assert_eq!(code, 4, "{err}");
}

#[test]
fn rerun_writes_nothing_and_force_reruns_only_the_named_stage() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path().join("w");
    let (code, err) = irnlm(&work, &["stats", "group", "--feature", "glove-semantic"]);
    assert_eq!(code, 0, "{err}");
    let before = files(&work);
    assert!(before.keys().any(|p| p.ends_with("stats/group-glove-semantic-z.map")));

    let (code, _) = irnlm(&work, &["stats", "group", "--feature", "glove-semantic"]);
    assert_eq!(code, 0);
    assert_eq!(files(&work), before);

    let (code, _) = irnlm(&work, &["--force", "encode", "delta", "--feature", "glove-semantic"]);
    assert_eq!(code, 0);
    let after = files(&work);
    let changed: Vec<&PathBuf> = after.keys().filter(|p| after[*p].0 != before[*p].0).collect();
    assert!(!changed.is_empty());
    for p in &changed {
        let s = p.to_string_lossy();
        assert!(
            s.contains("dr-glove-semantic") || s.contains(".stamps/delta-"),
            "{s} rewritten"
        );
    }
    // Same inputs, same bytes.
    for p in changed {
        assert_eq!(after[p].1, before[p].1, "{}", p.display());
    }
}

fn expected_spec(p: &Pipeline, stage: &str) -> StageSpec {
    let feature = |s: &str| s.parse::<Feature>().unwrap();
    let mode = |s: &str| irnlm_cli::feature::parse_mode(s).unwrap();
    if stage == "synth-corpus" {
        return p.synth_corpus_spec();
    }
    if stage == "synth-bold" {
        return p.synth_bold_spec().unwrap();
    }
    if stage == "encode-baseline" {
        return p.encode_spec(None).unwrap();
    }
    if stage == "specificity" {
        return p.specificity_spec().unwrap();
    }
    if stage == "verdicts" {
        return p.verdicts_spec().unwrap();
    }
    if stage == "report" {
        return p.report_spec().unwrap();
    }
    let (kind, rest) = stage.split_once('-').unwrap();
    match kind {
        "restrict" => {
            let (set, m) = rest.split_once('-').unwrap();
            p.stream_spec(set, mode(m)).unwrap()
        }
        "vocab" => p.vocab_spec(mode(rest)).unwrap(),
        "glove" => p.glove_spec(mode(rest)).unwrap(),
        "embed" => p.embed_spec(feature(rest).single().unwrap()).unwrap(),
        "encode" => p.encode_spec(Some(&feature(rest))).unwrap(),
        "delta" => p.delta_spec(&feature(rest)).unwrap(),
        "group" => p.group_spec(&feature(rest)).unwrap(),
        "decode" => {
            let (m, rest) = rest.split_once('-').unwrap();
            let (f, l) = rest.rsplit_once('-').unwrap();
            let m = if m == "cv" { DecodeMode::Cv } else { DecodeMode::Fit };
            let l = if l == "triplet" {
                Labels::Triplet
            } else {
                Labels::Category
            };
            p.decode_spec(m, feature(f).single().unwrap(), l).unwrap()
        }
        _ => panic!("no recomputation for stage {stage}"),
    }
}

#[test]
fn every_sidecar_hash_matches_a_recomputation() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path().join("w");
    let (code, err) = irnlm(&work, &["report"]);
    assert_eq!(code, 0, "{err}");
    let p = Pipeline::new(small_config(&work));
    let mut checked = 0;
    for path in files(&work).into_keys() {
        let name = path.to_string_lossy();
        if name.ends_with(".prov.json") || name.contains(".stamps") {
            continue;
        }
        let side = read_sidecar(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let spec = expected_spec(&p, &side.stage);
        assert_eq!(side.config_hash, spec.hash, "{}", path.display());
        assert!(
            spec.outputs.contains(&path),
            "{} not listed by {}",
            path.display(),
            side.stage
        );
        checked += 1;
    }
    assert!(checked > 100, "{checked}");
}

#[test]
fn restricted_streams_are_written_per_set() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path().join("w");
    let (code, err) = irnlm(
        &work,
        &["corpus", "restrict", "--corpus", "stimulus", "--mode", "syntactic"],
    );
    assert_eq!(code, 0, "{err}");
    let text = fs::read_to_string(work.join("streams/stimulus-syntactic.tsv")).unwrap();
    let first = text.lines().next().unwrap();
    let (src, feat) = first.split_once('\t').unwrap();
    assert_eq!(src, "0");
    // POS first, closing-node count last; the morphology between may hold `|` itself.
    let (head, ncn) = feat.rsplit_once('|').unwrap();
    assert!(ncn.parse::<u32>().is_ok(), "{feat}");
    assert!(head.contains('|'), "{feat}");
}

#[test]
fn event_flags_select_a_separate_encode_stage() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path().join("w");
    let args = ["encode", "fit", "--feature", "glove-semantic"];
    let (code, err) = irnlm(&work, &args);
    assert_eq!(code, 0, "{err}");
    let default_map = fs::read(work.join("encode/sub-01/r-glove-semantic.map")).unwrap();
    let flags = [
        "--set",
        "encode.event_time=onset",
        "--set",
        "encode.stream_rows=stream_events",
    ];
    let (code, err) = irnlm(&work, &[&flags[..], &args[..]].concat());
    assert_eq!(code, 0, "{err}");
    let onset_map = fs::read(work.join("encode/sub-01/r-glove-semantic.map")).unwrap();
    assert_ne!(default_map, onset_map);
    let (code, err) = irnlm(&work, &["--set", "encode.event_time=midpoint", "encode", "baseline"]);
    assert_eq!(code, 2, "{err}");
}
