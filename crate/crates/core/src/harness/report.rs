use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use super::HarnessError;
use crate::expmetrics::{Aggregate, ExplanationRecord, FailureRecord, CSV_HEADER, FIDELITY_DEFINITION};
use crate::marl::LossRecord;

pub const LOSS_CSV_HEADER: &str = "iteration,ppo_loss,critic_loss,attn_entropy_mean,reward_mean";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportPaths {
    pub csv: PathBuf,
    pub json: PathBuf,
}

fn write(path: &Path, contents: &str) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| HarnessError::io(path, e))
}

/// Writes `<stem>.csv` (one row per explained timestep) and `<stem>.json`
/// (run manifest, aggregates, failures) under `dir`.
pub fn write_report(
    records: &[ExplanationRecord],
    aggregates: &[Aggregate],
    failures: &[FailureRecord],
    manifest: &str,
    dir: &Path,
    stem: &str,
) -> Result<ReportPaths, HarnessError> {
    let mut csv = String::with_capacity(64 * (records.len() + 1));
    csv.push_str(CSV_HEADER);
    csv.push('\n');
    for r in records {
        csv.push_str(&r.csv_line());
        csv.push('\n');
    }
    let doc = json!({
        "manifest": {
            "fidelity_definition": FIDELITY_DEFINITION,
            "csv_header": CSV_HEADER,
            "config": manifest,
        },
        "aggregates": aggregates,
        "failures": failures,
    });
    let paths = ReportPaths {
        csv: dir.join(format!("{stem}.csv")),
        json: dir.join(format!("{stem}.json")),
    };
    write(&paths.csv, &csv)?;
    let text = serde_json::to_string_pretty(&doc).map_err(|e| HarnessError::Format(e.to_string()))?;
    write(&paths.json, &(text + "\n"))?;
    Ok(paths)
}

pub fn write_loss_csv(losses: &[LossRecord], path: &Path) -> Result<(), HarnessError> {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for l in losses {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            l.iteration, l.ppo_loss, l.critic_loss, l.attn_entropy_mean, l.reward_mean
        );
    }
    write(path, &out)
}

/// Reads one metric column out of an explanation CSV.
pub fn read_metric_column(path: &Path, metric: &str) -> Result<Vec<f64>, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| HarnessError::Format(format!("{}: empty file", path.display())))?;
    if header != CSV_HEADER {
        return Err(HarnessError::Format(format!("{}: unexpected header", path.display())));
    }
    let col = header
        .split(',')
        .position(|c| c == metric)
        .filter(|&c| c >= 6)
        .ok_or_else(|| HarnessError::Config(format!("unknown metric '{metric}'")))?;
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            l.split(',')
                .nth(col)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| HarnessError::Format(format!("{}: bad row {}", path.display(), i + 2)))
        })
        .collect()
}
