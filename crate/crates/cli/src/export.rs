//! CSV export of a [`TrainingReport`]. Numbers use Rust's shortest
//! round-trip decimal formatting, so equal reports give equal bytes.

use std::path::{Path, PathBuf};

use unvp::report::TrainingReport;

use crate::CliError;

pub const ACCURACY_CSV: &str = "accuracy.csv";
pub const LOSSES_CSV: &str = "losses.csv";
pub const DISTANCES_CSV: &str = "distances.csv";
pub const HISTOGRAMS_CSV: &str = "histograms.csv";

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::config(format!("{}: {e}", path.display()))
}

fn render(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    Ok(w.into_inner().expect("in-memory writer"))
}

fn optional(v: Option<&f64>) -> String {
    v.map(f64::to_string).unwrap_or_default()
}

/// `(file name, contents)` for every CSV in a fixed order.
pub fn report_csvs(report: &TrainingReport) -> Result<Vec<(&'static str, Vec<u8>)>, csv::Error> {
    let accuracy = render(
        &["domain", "accuracy", "n"],
        report
            .accuracy
            .iter()
            .map(|r| vec![r.domain.clone(), r.accuracy.to_string(), r.n.to_string()]),
    )?;
    let epochs = report.clf_loss.len().max(report.flow_nll.len());
    let losses = render(
        &["epoch", "clf_loss", "flow_nll"],
        (0..epochs).map(|i| vec![i.to_string(), optional(report.clf_loss.get(i)), optional(report.flow_nll.get(i))]),
    )?;
    let distances = render(
        &["round", "w2_squared"],
        report.distances.iter().enumerate().map(|(i, d)| vec![i.to_string(), d.to_string()]),
    )?;
    let histograms = render(
        &["domain", "class", "bin_left", "bin_right", "count"],
        report.histograms.iter().flat_map(|h| {
            h.counts.iter().enumerate().map(move |(i, &count)| {
                let (left, right) = h.bin_edges(i);
                vec![h.domain.clone(), h.class.to_string(), left.to_string(), right.to_string(), count.to_string()]
            })
        }),
    )?;
    Ok(vec![
        (ACCURACY_CSV, accuracy),
        (LOSSES_CSV, losses),
        (DISTANCES_CSV, distances),
        (HISTOGRAMS_CSV, histograms),
    ])
}

pub fn write_report_csvs(report: &TrainingReport, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let files = report_csvs(report).map_err(|e| CliError::config(format!("csv: {e}")))?;
    files
        .into_iter()
        .map(|(name, bytes)| {
            let path = dir.join(name);
            std::fs::write(&path, bytes).map_err(|e| io_error(&path, e))?;
            Ok(path)
        })
        .collect()
}

/// The per-domain table written by `eval`.
pub fn accuracy_table_csv(rows: &[unvp::report::DomainAccuracy]) -> Vec<u8> {
    render(
        &["domain", "accuracy", "n"],
        rows.iter().map(|r| vec![r.domain.clone(), r.accuracy.to_string(), r.n.to_string()]),
    )
    .expect("in-memory csv")
}
