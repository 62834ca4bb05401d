//! Metric records and their CSV / JSONL files.
//!
//! Both formats carry the same seven fields. Values are written in shortest
//! round-trip form, so parsing a file gives back the exact `f64`s. JSON has
//! no non-finite numbers; those are stored as the strings `"NaN"`, `"inf"`
//! and `"-inf"`.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Format;
use crate::CliError;

pub const HEADER: [&str; 7] = ["run_id", "seed", "kind", "index", "metric", "value", "timestamp"];

/// Marks a run whose records are complete.
pub const COMPLETE: &str = "run_complete";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: String,
    pub seed: u64,
    pub kind: String,
    /// Epoch, task, scale or case number, depending on the kind.
    pub index: u64,
    pub metric: String,
    #[serde(with = "lossless")]
    pub value: f64,
    /// Seconds since the Unix epoch.
    pub timestamp: f64,
}

mod lossless {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("NaN")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

pub fn now() -> f64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Append-only record file. Every [`RecordSink::write`] is flushed to disk
/// before returning, so a crash loses nothing already reported.
pub struct RecordSink {
    path: PathBuf,
    format: Format,
    out: BufWriter<File>,
}

impl RecordSink {
    /// Opens `path` for appending, writing the CSV header if the file is new.
    pub fn append(path: &Path, format: Format) -> Result<Self, CliError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| io_err(path, e))?;
        let fresh = file.metadata().map_err(|e| io_err(path, e))?.len() == 0;
        let mut sink = RecordSink {
            path: path.to_path_buf(),
            format,
            out: BufWriter::new(file),
        };
        if fresh && format == Format::Csv {
            writeln!(sink.out, "{}", HEADER.join(",")).map_err(|e| io_err(path, e))?;
            sink.out.flush().map_err(|e| io_err(path, e))?;
        }
        Ok(sink)
    }

    pub fn write(&mut self, records: &[MetricRecord]) -> Result<(), CliError> {
        match self.format {
            Format::Csv => {
                let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(&mut self.out);
                for r in records {
                    w.serialize(r).map_err(|e| io_err(&self.path, e))?;
                }
                w.flush().map_err(|e| io_err(&self.path, e))?;
            }
            Format::Jsonl => {
                for r in records {
                    serde_json::to_writer(&mut self.out, r).map_err(|e| io_err(&self.path, e))?;
                    self.out.write_all(b"\n").map_err(|e| io_err(&self.path, e))?;
                }
            }
        }
        self.out.flush().map_err(|e| io_err(&self.path, e))
    }
}

/// Writes `records` to a new file, replacing any existing one.
pub fn emit_records(records: &[MetricRecord], format: Format, path: &Path) -> Result<(), CliError> {
    if records.is_empty() {
        return Err(CliError::Runtime("refusing to write an empty record set".into()));
    }
    if path.exists() {
        std::fs::remove_file(path).map_err(|e| io_err(path, e))?;
    }
    RecordSink::append(path, format)?.write(records)
}

pub fn read_records(path: &Path, format: Format) -> Result<Vec<MetricRecord>, CliError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    match format {
        Format::Csv => {
            let mut r = csv::Reader::from_reader(file);
            let header = r.headers().map_err(|e| io_err(path, e))?;
            if header.iter().ne(HEADER) {
                return Err(io_err(path, format!("unexpected header {:?}", header)));
            }
            r.deserialize().map(|row| row.map_err(|e| io_err(path, e))).collect()
        }
        Format::Jsonl => BufReader::new(file)
            .lines()
            .enumerate()
            .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
            .map(|(i, line)| {
                let line = line.map_err(|e| io_err(path, e))?;
                serde_json::from_str(&line).map_err(|e| io_err(path, format!("line {}: {e}", i + 1)))
            })
            .collect(),
    }
}
