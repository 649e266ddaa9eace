//! Score matrix files: one JSON header line, then row-major little-endian
//! `f32` values (`post_count` rows of the header's column count).

use std::io::{BufRead, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

/// Header metadata of a score table.
pub trait TableHeader: Serialize + DeserializeOwned {
    fn row_count(&self) -> usize;
    fn column_count(&self) -> usize;
}

pub fn write_table<W: Write, H: TableHeader>(mut w: W, header: &H, values: &[f32]) -> Result<()> {
    let expected = header.row_count() * header.column_count();
    if values.len() != expected {
        return Err(Error::DimensionMismatch { expected, got: values.len() });
    }
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_table<R: BufRead, H: TableHeader>(mut r: R) -> Result<(H, Vec<f32>)> {
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    let header: H = serde_json::from_slice(&line)?;
    let n = header.row_count() * header.column_count();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::InvalidInput("trailing bytes after score table".into()));
    }
    let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((header, values))
}

pub fn save_table<H: TableHeader>(path: &Path, header: &H, values: &[f32]) -> Result<()> {
    let mut buf = Vec::new();
    write_table(&mut buf, header, values)?;
    write_atomic(path, &buf)
}

pub fn load_table<H: TableHeader>(path: &Path) -> Result<(H, Vec<f32>)> {
    let f = std::fs::File::open(path)?;
    read_table(std::io::BufReader::new(f)).map_err(|e| match e {
        Error::Io(_) | Error::Json(_) | Error::InvalidInput(_) => {
            Error::Artifact { path: path.to_path_buf(), message: e.to_string() }
        }
        e => e,
    })
}

/// CSV with an id column followed by one column per score.
pub fn write_csv<W: Write>(w: W, id_header: &str, ids: &[String], columns: &[String], values: &[f32]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut head = vec![id_header.to_string()];
    head.extend(columns.iter().cloned());
    wtr.write_record(&head)?;
    let k = columns.len();
    for (i, id) in ids.iter().enumerate() {
        let mut rec = Vec::with_capacity(k + 1);
        rec.push(id.clone());
        rec.extend(values[i * k..(i + 1) * k].iter().map(|v| v.to_string()));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}
