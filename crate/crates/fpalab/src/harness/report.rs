//! Run artifacts: result tables as CSV, config and provenance as JSON.
//!
//! `report.csv`, `reps.csv`, and `grand.csv` are pure functions of the run
//! outcome (fixed row order, fixed `%.6f` formatting), so two runs with the
//! same config and inputs produce byte-identical files. Wall-clock data goes
//! to `timings.csv` and `meta.json`, which are expected to differ between
//! runs and are kept out of the deterministic set.

use crate::error::{Error, Result};
use crate::harness::transfer::{ExperimentConfig, RunOutcome};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Locations of everything a run writes.
#[derive(Debug, Clone)]
pub struct ArtifactPaths {
    pub report: PathBuf,
    pub reps: PathBuf,
    pub grand: PathBuf,
    pub timings: PathBuf,
    pub config: PathBuf,
    pub meta: PathBuf,
}

/// SHA-256 of the canonical JSON form of the config, as lowercase hex.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let json = serde_json::to_vec(cfg).map_err(|e| Error::config(format!("config serialization: {e}")))?;
    let digest = Sha256::digest(&json);
    Ok(digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

fn check_field(value: &str) -> Result<()> {
    if value.contains([',', '"', '\n', '\r']) {
        return Err(Error::config(format!("csv field '{value}' contains a delimiter")));
    }
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// One row of `report.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub variant: String,
    pub target: String,
    pub mean_asr: f64,
    pub std_asr: f64,
    pub n_eval: usize,
}

const REPORT_HEADER: &str = "variant,target,mean_asr,std_asr,n_eval";

/// Render the deterministic result table.
pub fn render_report_csv(outcome: &RunOutcome) -> Result<String> {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for cell in &outcome.cells {
        check_field(&cell.variant)?;
        check_field(&cell.target)?;
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{}",
            cell.variant, cell.target, cell.mean, cell.std, outcome.eval_count
        );
    }
    Ok(out)
}

fn render_reps_csv(outcome: &RunOutcome) -> Result<String> {
    let mut out = String::from("variant,target,rep,asr\n");
    for cell in &outcome.cells {
        for (rep, asr) in cell.per_rep.iter().enumerate() {
            let _ = writeln!(out, "{},{},{rep},{asr:.6}", cell.variant, cell.target);
        }
    }
    Ok(out)
}

fn render_grand_csv(outcome: &RunOutcome) -> Result<String> {
    let mut out = String::from("variant,mean_asr,std_asr\n");
    for g in &outcome.grand {
        let _ = writeln!(out, "{},{:.6},{:.6}", g.variant, g.mean, g.std);
    }
    Ok(out)
}

fn render_timings_csv(outcome: &RunOutcome) -> String {
    let mut out = String::from("variant,rep,chunk_index,images,iterations,seconds\n");
    for t in &outcome.timings {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6}",
            t.variant, t.rep, t.chunk_index, t.images, t.iterations, t.seconds
        );
    }
    out
}

/// Write every artifact for a finished run into `dir` (created if missing).
pub fn write_artifacts(
    dir: &Path,
    cfg: &ExperimentConfig,
    outcome: &RunOutcome,
    wall_seconds: f64,
) -> Result<ArtifactPaths> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = ArtifactPaths {
        report: dir.join("report.csv"),
        reps: dir.join("reps.csv"),
        grand: dir.join("grand.csv"),
        timings: dir.join("timings.csv"),
        config: dir.join("config.json"),
        meta: dir.join("meta.json"),
    };

    write_file(&paths.report, &render_report_csv(outcome)?)?;
    write_file(&paths.reps, &render_reps_csv(outcome)?)?;
    write_file(&paths.grand, &render_grand_csv(outcome)?)?;
    write_file(&paths.timings, &render_timings_csv(outcome))?;

    let config_json =
        serde_json::to_string_pretty(cfg).map_err(|e| Error::config(format!("config serialization: {e}")))?;
    write_file(&paths.config, &(config_json + "\n"))?;

    let meta = serde_json::json!({
        "config_sha256": config_hash(cfg)?,
        "crate_version": env!("CARGO_PKG_VERSION"),
        "eval_count": outcome.eval_count,
        "jobs": outcome.timings.len(),
        "wall_seconds": wall_seconds,
    });
    write_file(&paths.meta, &(serde_json::to_string_pretty(&meta).expect("json value") + "\n"))?;
    Ok(paths)
}

/// Parse `report.csv` back into rows. Errors carry the byte offset of the
/// offending line.
pub fn parse_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    let mut offset = 0u64;
    for (number, line) in text.lines().enumerate() {
        let fail = |detail: String| Error::format(path, offset, detail);
        if number == 0 {
            if line != REPORT_HEADER {
                return Err(fail(format!("header '{line}', expected '{REPORT_HEADER}'")));
            }
        } else if !line.is_empty() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(fail(format!("{} fields, expected 5", fields.len())));
            }
            rows.push(ReportRow {
                variant: fields[0].to_string(),
                target: fields[1].to_string(),
                mean_asr: fields[2]
                    .parse()
                    .map_err(|e| fail(format!("mean_asr '{}': {e}", fields[2])))?,
                std_asr: fields[3]
                    .parse()
                    .map_err(|e| fail(format!("std_asr '{}': {e}", fields[3])))?,
                n_eval: fields[4]
                    .parse()
                    .map_err(|e| fail(format!("n_eval '{}': {e}", fields[4])))?,
            });
        }
        offset += line.len() as u64 + 1;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::transfer::{CellStats, GrandStats, JobTiming};

    fn sample_outcome() -> RunOutcome {
        RunOutcome {
            eval_count: 24,
            cells: vec![
                CellStats {
                    variant: "ifgsm".into(),
                    target: "twin".into(),
                    per_rep: vec![0.25, 0.25],
                    mean: 0.25,
                    std: 0.0,
                },
                CellStats {
                    variant: "ifgsm+fpa-n".into(),
                    target: "twin".into(),
                    per_rep: vec![0.5, 0.25],
                    mean: 0.375,
                    std: 0.176_776_695_296_636_88,
                },
            ],
            grand: vec![GrandStats {
                variant: "ifgsm".into(),
                per_rep: vec![0.25, 0.25],
                mean: 0.25,
                std: 0.0,
            }],
            timings: vec![JobTiming {
                variant: "ifgsm".into(),
                rep: 0,
                chunk_index: 0,
                images: 24,
                iterations: 6,
                seconds: 0.125,
            }],
        }
    }

    #[test]
    fn artifacts_round_trip_and_stay_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        let outcome = sample_outcome();
        let paths = write_artifacts(dir.path(), &cfg, &outcome, 1.5).unwrap();

        let rows = parse_report_csv(&paths.report).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].variant, "ifgsm");
        assert_eq!(rows[0].n_eval, 24);
        assert!((rows[1].mean_asr - 0.375).abs() < 1e-9);
        assert!((rows[1].std_asr - 0.176_777).abs() < 1e-9, "six-digit rounding");

        // The deterministic artifacts are byte-stable across writes.
        let first = std::fs::read(&paths.report).unwrap();
        let reps_first = std::fs::read(&paths.reps).unwrap();
        write_artifacts(dir.path(), &cfg, &outcome, 9.9).unwrap();
        assert_eq!(std::fs::read(&paths.report).unwrap(), first);
        assert_eq!(std::fs::read(&paths.reps).unwrap(), reps_first);

        // Config snapshot parses back to the same config.
        let snap: ExperimentConfig =
            serde_json::from_str(&std::fs::read_to_string(&paths.config).unwrap()).unwrap();
        assert_eq!(snap, cfg);
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            master_seed: 2,
            ..ExperimentConfig::default()
        };
        let ha = config_hash(&a).unwrap();
        assert_eq!(ha.len(), 64);
        assert_eq!(ha, config_hash(&a.clone()).unwrap());
        assert_ne!(ha, config_hash(&b).unwrap());
    }

    #[test]
    fn malformed_report_lines_carry_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");

        std::fs::write(&path, "wrong,header\n").unwrap();
        let err = parse_report_csv(&path).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");

        let good_header = "variant,target,mean_asr,std_asr,n_eval\n";
        std::fs::write(&path, format!("{good_header}ifgsm,twin,oops,0.0,24\n")).unwrap();
        let err = parse_report_csv(&path).unwrap_err();
        match err {
            Error::Format { offset, detail, .. } => {
                assert_eq!(offset, good_header.len() as u64);
                assert!(detail.contains("mean_asr"), "{detail}");
            }
            other => panic!("expected a format error, got {other}"),
        }
    }

    #[test]
    fn delimiters_in_names_are_rejected() {
        let mut outcome = sample_outcome();
        outcome.cells[0].variant = "if,gsm".into();
        assert!(render_report_csv(&outcome).is_err());
    }
}
