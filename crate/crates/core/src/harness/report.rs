//! Report serialization: every experiment result renders to JSON (full
//! fidelity), CSV (flat summary rows), or a markdown table. Rendering is
//! pure string building over already-sorted data, so the same report always
//! produces the same bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::harness::{
    EpochReport, GeneralizationReport, HarnessError, SimilarityReport, SweepReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] =
        [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Markdown];

    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "md",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "markdown-table" | "md" => Ok(ReportFormat::Markdown),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

/// One emittable result. The variant name doubles as the output file stem.
#[derive(Debug, Clone, PartialEq)]
pub enum Report {
    Repetitive(Vec<EpochReport>),
    Generalization(GeneralizationReport),
    Sweep(SweepReport),
    Similarity(SimilarityReport),
}

impl Report {
    pub fn kind(&self) -> &'static str {
        match self {
            Report::Repetitive(_) => "repetitive",
            Report::Generalization(_) => "generalization",
            Report::Sweep(_) => "sweep",
            Report::Similarity(_) => "similarity",
        }
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Json => self.render_json(),
            ReportFormat::Csv => self.render_csv(),
            ReportFormat::Markdown => self.render_markdown(),
        }
    }

    fn render_json(&self) -> String {
        fn pretty<T: Serialize>(value: &T) -> String {
            let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
            s.push('\n');
            s
        }
        match self {
            Report::Repetitive(r) => pretty(r),
            Report::Generalization(r) => pretty(r),
            Report::Sweep(r) => pretty(r),
            Report::Similarity(r) => pretty(r),
        }
    }

    /// Flat summary: per-epoch, per-row, or per-bin lines. The JSON form
    /// keeps the detail (per-question maps) that a flat table cannot.
    fn render_csv(&self) -> String {
        let mut out = String::new();
        match self {
            Report::Repetitive(epochs) => {
                out.push_str(
                    "epoch,epoch_accuracy,mean_confidence_correct,mean_confidence_incorrect\n",
                );
                for e in epochs {
                    writeln!(
                        out,
                        "{},{},{},{}",
                        e.epoch,
                        e.epoch_accuracy,
                        e.mean_confidence_correct,
                        e.mean_confidence_incorrect
                    )
                    .unwrap();
                }
            }
            Report::Generalization(r) => {
                out.push_str(
                    "split_ratio,train_count,test_count,plain_accuracy,memory_accuracy,experience_accuracy\n",
                );
                writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    r.split_ratio,
                    r.train_count,
                    r.test_count,
                    r.plain_accuracy,
                    r.memory_accuracy,
                    r.experience_accuracy
                )
                .unwrap();
            }
            Report::Sweep(r) => {
                out.push_str("tau,accumulated_lead,database_size\n");
                for row in &r.rows {
                    writeln!(out, "{},{},{}", row.tau, row.accumulated_lead, row.database_size)
                        .unwrap();
                }
            }
            Report::Similarity(r) => {
                out.push_str("bin,count,percent\n");
                for bin in &r.bins {
                    writeln!(out, "{},{},{}", bin.label, bin.count, bin.percent).unwrap();
                }
            }
        }
        out
    }

    fn render_markdown(&self) -> String {
        let mut out = String::new();
        match self {
            Report::Repetitive(epochs) => {
                out.push_str("| epoch | accuracy | confidence (correct) | confidence (incorrect) |\n");
                out.push_str("|---|---|---|---|\n");
                for e in epochs {
                    writeln!(
                        out,
                        "| {} | {:.4} | {:.2} | {:.2} |",
                        e.epoch,
                        e.epoch_accuracy,
                        e.mean_confidence_correct,
                        e.mean_confidence_incorrect
                    )
                    .unwrap();
                }
            }
            Report::Generalization(r) => {
                out.push_str("| condition | accuracy |\n|---|---|\n");
                writeln!(out, "| plain | {:.4} |", r.plain_accuracy).unwrap();
                writeln!(out, "| memory | {:.4} |", r.memory_accuracy).unwrap();
                writeln!(out, "| experience | {:.4} |", r.experience_accuracy).unwrap();
            }
            Report::Sweep(r) => {
                out.push_str("| tau | accumulated lead | database size |\n|---|---|---|\n");
                for row in &r.rows {
                    writeln!(
                        out,
                        "| {} | {:.4} | {} |",
                        row.tau, row.accumulated_lead, row.database_size
                    )
                    .unwrap();
                }
            }
            // One header row of bins, one data row of percentages, the way
            // similarity distributions are usually tabulated.
            Report::Similarity(r) => {
                out.push('|');
                for bin in &r.bins {
                    write!(out, " {} |", bin.label).unwrap();
                }
                out.push('\n');
                out.push('|');
                for _ in &r.bins {
                    out.push_str("---|");
                }
                out.push('\n');
                out.push('|');
                for bin in &r.bins {
                    write!(out, " {:.2}% |", bin.percent).unwrap();
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Writes each report as `{kind}.{extension}` under `out_dir`, creating the
/// directory if needed. Returns the written paths in input order.
pub fn report_emit(
    reports: &[Report],
    format: ReportFormat,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|source| HarnessError::ReportIo { path: out_dir.to_path_buf(), source })?;
    let mut paths = Vec::with_capacity(reports.len());
    for report in reports {
        let path = out_dir.join(format!("{}.{}", report.kind(), format.extension()));
        std::fs::write(&path, report.render(format))
            .map_err(|source| HarnessError::ReportIo { path: path.clone(), source })?;
        paths.push(path);
    }
    Ok(paths)
}
