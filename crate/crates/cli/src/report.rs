//! Plot-data reports: a CSV plus a JSON sidecar describing it.

use std::path::Path;

use e11_core::forecast::write_auc_csv;
use e11_core::profiles::{write_profiles_csv, write_ttest_csv};
use e11_core::trend::write_trajectory_csv;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::Loaded;
use crate::exit::{data_err, dependency_err, Context, Failure};
use crate::stages::{ForecastArtifact, ProfilesArtifact, TrendArtifact};
use crate::workspace::{sha256_file, Artifact, Run, FORECAST, PROFILES, REPORT_DIR, TREND};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportKind {
    ForumProfile,
    BannedCompare,
    AucCurve,
    Trajectory,
}

impl ReportKind {
    pub const ALL: [ReportKind; 4] =
        [ReportKind::ForumProfile, ReportKind::BannedCompare, ReportKind::AucCurve, ReportKind::Trajectory];

    pub fn name(self) -> &'static str {
        match self {
            ReportKind::ForumProfile => "forum-profile",
            ReportKind::BannedCompare => "banned-compare",
            ReportKind::AucCurve => "auc-curve",
            ReportKind::Trajectory => "trajectory",
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Sidecar {
    pub kind: String,
    pub csv: String,
    pub columns: Vec<String>,
    pub rows: usize,
    pub source: String,
    pub source_sha256: String,
    pub model_fingerprint: String,
    pub factor_names: Vec<String>,
    pub meta: serde_json::Value,
}

fn read_artifact<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| dependency_err(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| dependency_err(format!("malformed {}: {e}", path.display())))
}

/// Header and data-row count of a CSV produced here.
fn shape(csv: &[u8]) -> (Vec<String>, usize) {
    let text = std::str::from_utf8(csv).expect("utf-8 csv");
    let mut rdr = csv_lines(text);
    let header = rdr.next().map(|h| h.split(',').map(str::to_string).collect()).unwrap_or_default();
    (header, rdr.count())
}

fn csv_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines().filter(|l| !l.is_empty())
}

struct Built {
    csv: Vec<u8>,
    source: Artifact,
    model_fingerprint: String,
    factor_names: Vec<String>,
    meta: serde_json::Value,
}

fn build(kind: ReportKind, run: &mut Run) -> Result<Built, Failure> {
    let mut csv = Vec::new();
    match kind {
        ReportKind::ForumProfile | ReportKind::BannedCompare => {
            let art: ProfilesArtifact = read_artifact(&run.input(PROFILES)?)?;
            let meta = if kind == ReportKind::ForumProfile {
                if art.profiles.is_empty() {
                    return Err(data_err(format!("{} has no groups", PROFILES.file)));
                }
                write_profiles_csv(&mut csv, &art.profiles, &art.factor_names)?;
                serde_json::json!({ "group_by": art.group_by })
            } else {
                let cmp = art.compare.as_ref().ok_or_else(|| {
                    dependency_err("profile.compare is not configured; set it and run profile first")
                })?;
                if cmp.tests.is_empty() {
                    return Err(data_err("comparison has no factors"));
                }
                write_ttest_csv(&mut csv, &cmp.tests)?;
                serde_json::json!({
                    "a_label": cmp.a_label, "a_forums": cmp.a_forums, "n_a": cmp.n_a,
                    "b_label": cmp.b_label, "b_forums": cmp.b_forums, "n_b": cmp.n_b,
                    "variant": cmp.variant,
                })
            };
            Ok(Built { csv, source: PROFILES, model_fingerprint: art.model_fingerprint, factor_names: art.factor_names, meta })
        }
        ReportKind::AucCurve => {
            let art: ForecastArtifact = read_artifact(&run.input(FORECAST)?)?;
            if art.curve.points.is_empty() {
                return Err(data_err(format!("{} has no offsets", FORECAST.file)));
            }
            write_auc_csv(&mut csv, &art.curve)?;
            let missing: Vec<_> = art
                .curve
                .points
                .iter()
                .filter_map(|p| p.missing_reason.as_ref().map(|r| serde_json::json!({ "months_before": p.months_before, "reason": r })))
                .collect();
            let meta = serde_json::json!({
                "cv": art.cv,
                "spearman_offset_auc": art.spearman_offset_auc,
                "fold_aucs": art.curve.points.iter().map(|p| &p.fold_aucs).collect::<Vec<_>>(),
                "missing": missing,
            });
            Ok(Built { csv, source: FORECAST, model_fingerprint: art.model_fingerprint, factor_names: art.factor_names, meta })
        }
        ReportKind::Trajectory => {
            let art: TrendArtifact = read_artifact(&run.input(TREND)?)?;
            if art.series.iter().all(|s| s.smoothed.is_empty()) {
                return Err(data_err(format!("{} has no smoothed points", TREND.file)));
            }
            write_trajectory_csv(&mut csv, &art.series)?;
            let meta = serde_json::json!({
                "composite": art.composite.mode,
                "loess": art.loess,
                "pooling": art.pooling,
                "control_t0": art.control_t0,
                "points": art.series.iter().map(|s| (s.cohort.clone(), s.points.len())).collect::<Vec<_>>(),
                "fallbacks": art.series.iter().map(|s| (s.cohort.clone(), s.fallbacks)).collect::<Vec<_>>(),
            });
            Ok(Built { csv, source: TREND, model_fingerprint: art.model_fingerprint, factor_names: Vec::new(), meta })
        }
    }
}

pub fn emit_report(kind: ReportKind, loaded: &Loaded) -> Result<String, Failure> {
    let mut run = Run::start(loaded, format!("report:{}", kind.name()))?;
    let built = build(kind, &mut run).context(format!("report {}", kind.name()))?;
    let (columns, rows) = shape(&built.csv);
    let csv_rel = format!("{REPORT_DIR}/{}.csv", kind.name());
    run.write(&csv_rel, &built.csv)?;
    let sidecar = Sidecar {
        kind: kind.name().to_string(),
        csv: format!("{}.csv", kind.name()),
        columns,
        rows,
        source: built.source.file.to_string(),
        source_sha256: sha256_file(&run.path(built.source))?,
        model_fingerprint: built.model_fingerprint,
        factor_names: built.factor_names,
        meta: built.meta,
    };
    let path = run.write_json(&format!("{REPORT_DIR}/{}.json", kind.name()), &sidecar)?;
    run.finish()?;
    Ok(format!("{rows} rows -> {}", path.with_extension("csv").display()))
}
