//! Structured run logging: JSON-lines event streams and CSV curves.

use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::Path;

use crate::error::Result;

/// Collects JSON events in memory and optionally streams them to a
/// `.jsonl` file as they arrive.
pub struct JsonlLog {
    sink: Option<BufWriter<File>>,
    events: Vec<serde_json::Value>,
}

impl JsonlLog {
    pub fn in_memory() -> Self {
        Self {
            sink: None,
            events: Vec::new(),
        }
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        Ok(Self {
            sink: Some(BufWriter::new(File::create(path)?)),
            events: Vec::new(),
        })
    }

    pub fn log(&mut self, event: serde_json::Value) -> Result<()> {
        if let Some(sink) = &mut self.sink {
            serde_json::to_writer(&mut *sink, &event)?;
            sink.write_all(b"\n")?;
        }
        self.events.push(event);
        Ok(())
    }

    pub fn events(&self) -> &[serde_json::Value] {
        &self.events
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(sink) = &mut self.sink {
            sink.flush()?;
        }
        Ok(())
    }
}

/// Write a CSV file with a header row and float cells rendered with
/// full round-trip precision.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_appends_lines() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("log/run.jsonl");
        let mut log = JsonlLog::to_file(&path).unwrap();
        log.log(serde_json::json!({"step": 1, "loss": 0.5})).unwrap();
        log.log(serde_json::json!({"event": "warn"})).unwrap();
        log.flush().unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(log.events().len(), 2);
    }

    #[test]
    fn csv_round_trips_floats() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("curve.csv");
        write_csv(&path, &["step", "loss"], &[vec![1.0, 0.25], vec![2.0, 0.125]]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,loss\n"));
        assert!(text.contains("1,0.25"));
    }
}
