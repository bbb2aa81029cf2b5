//! CSV tables: training history, corruption sweeps and routing audits.

use csv::Writer;
use umq_core::dataio::Task;
use umq_core::pipeline::{EpochRecord, Evaluation, Metrics};

use crate::error::{Error, Result};

/// Metric columns reported for `task`.
pub fn metric_names(task: Task) -> &'static [&'static str] {
    match task {
        Task::Regression => &["Acc2", "Acc7", "F1", "MAE", "Corr"],
        Task::Binary => &["Acc", "F1"],
    }
}

pub fn metric(m: &Metrics, name: &str) -> Option<f64> {
    m.fields().into_iter().find(|(n, _)| *n == name).and_then(|(_, v)| v)
}

fn cell(v: Option<f64>) -> String {
    format!("{}", v.unwrap_or(f64::NAN))
}

fn finish(w: Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// One row per epoch: every training loss field, the validation loss and
/// the validation metrics.
pub fn history_csv(history: &[EpochRecord], task: Task) -> Result<String> {
    let mut w = Writer::from_writer(Vec::new());
    let names = metric_names(task);
    let mut header = vec!["epoch".to_string()];
    if let Some(first) = history.first() {
        header.extend(first.train.iter().map(|(n, _)| n.clone()));
    }
    header.push("val_loss".into());
    header.extend(names.iter().map(|n| format!("val_{n}")));
    w.write_record(&header)?;
    for r in history {
        let mut row = vec![r.epoch.to_string()];
        row.extend(r.train.iter().map(|(_, v)| cell(Some(*v))));
        row.push(cell(Some(r.val_loss)));
        row.extend(names.iter().map(|n| cell(metric(&r.val, n))));
        w.write_record(&row)?;
    }
    finish(w)
}

/// One grid point of a corruption sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub protocol: String,
    pub kind: String,
    pub rate: f64,
    pub metrics: Metrics,
    /// Fraction of masked slots actually drawn (missing protocol only).
    pub realized_mr: Option<f64>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v?;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Rows grouped by `(protocol, kind)` in input order, each group followed
/// by an `Avg` row of arithmetic means.
pub fn sweep_csv(rows: &[SweepRow], task: Task) -> Result<String> {
    let mut w = Writer::from_writer(Vec::new());
    let names = metric_names(task);
    let mut header = vec!["protocol".to_string(), "kind".into(), "rate".into()];
    header.extend(names.iter().map(|n| n.to_string()));
    header.push("realized_mr".into());
    w.write_record(&header)?;
    let mut groups: Vec<(&str, &str)> = Vec::new();
    for r in rows {
        if !groups.contains(&(&r.protocol, &r.kind)) {
            groups.push((&r.protocol, &r.kind));
        }
    }
    for (protocol, kind) in groups {
        let group: Vec<&SweepRow> = rows.iter().filter(|r| r.protocol == protocol && r.kind == kind).collect();
        for r in &group {
            let mut row = vec![protocol.to_string(), kind.to_string(), format!("{}", r.rate)];
            row.extend(names.iter().map(|n| cell(metric(&r.metrics, n))));
            row.push(r.realized_mr.map_or_else(String::new, |v| format!("{v}")));
            w.write_record(&row)?;
        }
        let mut row = vec![protocol.to_string(), kind.to_string(), "Avg".to_string()];
        row.extend(names.iter().map(|n| cell(mean(group.iter().map(|r| metric(&r.metrics, n))))));
        row.push(
            mean(group.iter().map(|r| r.realized_mr))
                .map_or_else(String::new, |v| format!("{v}")),
        );
        w.write_record(&row)?;
    }
    finish(w)
}

fn bits(row: &[bool]) -> String {
    row.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

fn joined<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

/// One row per evaluated sample: id, quality levels as a bit string, the
/// selected experts and their weights.
pub fn route_audit_csv(eval: &Evaluation) -> Result<String> {
    if eval.routes.len() != eval.ids.len() {
        return Err(Error::Format("routing is disabled in this model".into()));
    }
    let mut w = Writer::from_writer(Vec::new());
    w.write_record(["sample_id", "p", "experts", "weights"])?;
    for ((id, p), r) in eval.ids.iter().zip(&eval.levels).zip(&eval.routes) {
        w.write_record([id.to_string(), bits(p), joined(&r.selected), joined(&r.weights)])?;
    }
    finish(w)
}
