//! CSV artifacts with a leading `#schema=<kind>/<version>` line.

use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidInput(format!("csv: {other:?}")),
    }
}

fn schema_line(kind: &str, version: u32) -> String {
    format!("#schema={kind}/{version}")
}

/// Write `rows` under `header`, preceded by the schema line.
pub fn write_rows<R: Serialize>(
    path: &Path,
    kind: &str,
    version: u32,
    header: &[&str],
    rows: &[R],
) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    std::io::Write::write_all(&mut file, format!("{}\n", schema_line(kind, version)).as_bytes())?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Read rows written by [`write_rows`], rejecting any other kind or version.
pub fn read_rows<R: DeserializeOwned>(path: &Path, kind: &str, version: u32) -> Result<Vec<R>> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let first = first.trim_end();
    let expected = schema_line(kind, version);
    if first != expected {
        let found = first
            .strip_prefix(&format!("#schema={kind}/"))
            .and_then(|v| v.parse().ok());
        return match found {
            Some(found) => Err(Error::SchemaVersion {
                what: "csv artifact",
                found,
                expected: version,
            }),
            None => Err(Error::InvalidInput(format!(
                "{}: expected `{expected}`, found `{first}`",
                path.display()
            ))),
        };
    }
    csv::Reader::from_reader(reader)
        .deserialize()
        .map(|r| r.map_err(csv_err))
        .collect()
}
