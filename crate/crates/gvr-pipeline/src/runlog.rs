//! Small append-style CSV training logs: an integer step column followed by
//! fixed numeric columns. Resumed runs re-read the file and drop rows beyond
//! the checkpointed step so a restart never leaves stale tail rows behind.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LogRow {
    pub step: u64,
    pub values: Vec<f64>,
}

/// Read an existing log, keeping only rows with step <= `max_step`.
/// A missing file is an empty log.
pub(crate) fn read_log(path: &Path, value_cols: usize, max_step: u64) -> Result<Vec<LogRow>> {
    let mut rows = Vec::new();
    if !path.exists() {
        return Ok(rows);
    }
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| PipelineError::format(path, format!("unreadable log: {e}")))?;
    for record in reader.records() {
        let record = record.map_err(|e| PipelineError::format(path, format!("bad log row: {e}")))?;
        if record.len() != value_cols + 1 {
            return Err(PipelineError::format(
                path,
                format!("expected {} columns, found {}", value_cols + 1, record.len()),
            ));
        }
        let step: u64 = record[0]
            .parse()
            .map_err(|e| PipelineError::format(path, format!("bad step field: {e}")))?;
        if step > max_step {
            continue;
        }
        let mut values = Vec::with_capacity(value_cols);
        for i in 0..value_cols {
            values.push(
                record[i + 1]
                    .parse()
                    .map_err(|e| PipelineError::format(path, format!("bad numeric field: {e}")))?,
            );
        }
        rows.push(LogRow { step, values });
    }
    Ok(rows)
}

/// Rewrite the whole log (header + rows) atomically enough for our purposes.
pub(crate) fn write_log(path: &Path, header: &str, rows: &[LogRow]) -> Result<()> {
    let mut buf = String::from(header);
    buf.push('\n');
    for r in rows {
        buf.push_str(&r.step.to_string());
        for v in &r.values {
            buf.push(',');
            buf.push_str(&v.to_string());
        }
        buf.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| PipelineError::io(path, e))?;
    f.write_all(buf.as_bytes())
        .map_err(|e| PipelineError::io(path, e))?;
    Ok(())
}
