//! CSV views of an [`EvalReport`].

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{HapError, Result};
use crate::eval::{EvalReport, GroupStats};

pub const CSV_HEADER: [&str; 5] = ["cluster_id", "count", "mean_y", "mean_yhat", "mape"];

fn write_table<'a>(
    path: &Path,
    rows: impl IntoIterator<Item = (String, &'a GroupStats)>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(CSV_HEADER).map_err(csv_error)?;
    for (id, g) in rows {
        w.write_record([
            id,
            g.count.to_string(),
            g.mean_y.to_string(),
            g.mean_yhat.to_string(),
            g.mape.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> HapError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => HapError::Io(io),
        other => HapError::Schema(format!("csv: {other:?}")),
    }
}

/// Write `total.csv`, `per_event.csv` and `per_cluster.csv` into `dir` and
/// return their paths.
pub fn write_report_csvs(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let total = dir.join("total.csv");
    let per_event = dir.join("per_event.csv");
    let per_cluster = dir.join("per_cluster.csv");
    write_table(&total, [("total".to_string(), &report.total)])?;
    write_table(
        &per_event,
        report.per_event.iter().map(|(e, g)| (e.to_string(), g)),
    )?;
    write_table(
        &per_cluster,
        report.per_cluster.iter().map(|(c, g)| (c.clone(), g)),
    )?;
    Ok(vec![total, per_event, per_cluster])
}
