//! Line-delimited JSON metrics stream.
//!
//! Every line is one object with a `record` tag: `"iteration"` for training
//! steps and `"eval"` for the final evaluation.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use dualalign::eval::EvalReport;
use dualalign::trainer::IterationReport;
use dualalign::{Error, Result};
use serde_json::{Map, Value};

pub const FILE_NAME: &str = "metrics.jsonl";

fn tagged<T: serde::Serialize>(tag: &str, value: &T) -> String {
    let mut object = Map::new();
    object.insert("record".into(), Value::from(tag));
    match serde_json::to_value(value).expect("metrics serialize") {
        Value::Object(fields) => object.extend(fields),
        _ => unreachable!("metrics records are structs"),
    }
    Value::Object(object).to_string()
}

pub fn iteration_line(report: &IterationReport) -> String {
    tagged("iteration", report)
}

pub fn eval_line(report: &EvalReport) -> String {
    tagged("eval", report)
}

pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    /// Keeps only iteration records with `iteration < keep_before`, then
    /// appends. Used on resume so the stream matches an uninterrupted run.
    pub fn resume(path: &Path, keep_before: u64) -> Result<Self> {
        let mut kept = Vec::new();
        if path.exists() {
            for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                let line = line?;
                let value: Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: n + 1,
                    message: format!("{}: {e}", path.display()),
                })?;
                let is_kept = value.get("record").and_then(Value::as_str) == Some("iteration")
                    && value.get("iteration").and_then(Value::as_u64).is_some_and(|t| t < keep_before);
                if is_kept {
                    kept.push(line);
                }
            }
        }
        if (kept.len() as u64) != keep_before {
            log::warn!(
                "metrics stream has {} records before iteration {keep_before}; earlier history is incomplete",
                kept.len()
            );
        }
        let mut writer = Self::create(path)?;
        for line in kept {
            writer.write_line(&line)?;
        }
        Ok(writer)
    }

    pub fn write_line(&mut self, line: &str) -> Result<()> {
        self.out.write_all(line.as_bytes())?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().append(true).create(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}
