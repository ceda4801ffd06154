use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::Sample;
use crate::error::{Error, Result};

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| Error::Json {
            context: format!("{}:{}", path.display(), n + 1),
            source,
        })?);
    }
    Ok(out)
}

pub fn write_samples(path: &Path, samples: &[Sample]) -> Result<()> {
    write_jsonl(path, samples)
}

/// Reads and validates every sample against `max_contexts`.
pub fn read_samples(path: &Path, max_contexts: usize) -> Result<Vec<Sample>> {
    let samples: Vec<Sample> = read_jsonl(path)?;
    for s in &samples {
        s.validate(max_contexts)?;
    }
    Ok(samples)
}
