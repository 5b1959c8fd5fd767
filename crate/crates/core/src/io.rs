//! File helpers shared by the model and record formats.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Short hex digest identifying a configuration value.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("configs serialize");
    let digest = Sha256::digest(&bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Header line of a JSON Lines record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordHeader {
    pub schema: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

/// Write a header line followed by one JSON object per record.
pub fn write_records<T: Serialize, W: Write>(mut w: W, header: &RecordHeader, records: &[T]) -> Result<()> {
    let io = |e| Error::io("<record writer>", e);
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n").map_err(io)?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn save_records<T: Serialize>(path: impl AsRef<Path>, header: &RecordHeader, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_records(BufWriter::new(f), header, records).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Incremental writer for a record file: header first, then one line per record.
pub struct RecordWriter<W: Write> {
    inner: W,
}

impl<W: Write> RecordWriter<W> {
    pub fn new(mut inner: W, header: &RecordHeader) -> Result<Self> {
        serde_json::to_writer(&mut inner, header)?;
        inner.write_all(b"\n").map_err(|e| Error::io("<record writer>", e))?;
        Ok(RecordWriter { inner })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.inner, record)?;
        self.inner.write_all(b"\n").map_err(|e| Error::io("<record writer>", e))
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush().map_err(|e| Error::io("<record writer>", e))?;
        Ok(self.inner)
    }
}

/// Parse a header line with the expected schema and then every record line.
pub fn read_records<T: DeserializeOwned, R: BufRead>(
    reader: R,
    source: &str,
    schema: &str,
) -> Result<(RecordHeader, Vec<T>)> {
    let mut header: Option<RecordHeader> = None;
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { path: source.to_string(), line: i + 1, msg };
        match &header {
            None => {
                let h: RecordHeader = serde_json::from_str(&line).map_err(|e| err(format!("bad header: {e}")))?;
                if h.schema != schema {
                    return Err(Error::Schema { expected: schema.into(), found: h.schema });
                }
                header = Some(h);
            }
            Some(_) => out.push(serde_json::from_str(&line).map_err(|e| err(e.to_string()))?),
        }
    }
    let header = header.ok_or_else(|| Error::Parse { path: source.to_string(), line: 1, msg: "missing header".into() })?;
    Ok((header, out))
}

pub fn load_records<T: DeserializeOwned>(path: impl AsRef<Path>, schema: &str) -> Result<(RecordHeader, Vec<T>)> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(BufReader::new(f), &path.display().to_string(), schema)
}
