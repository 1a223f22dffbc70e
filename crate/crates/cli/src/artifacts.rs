//! 16-bit PGM images and CSV tables.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use tracernet_core::tensor::Tensor;

use crate::{CliError, Result};

pub const PGM_MAX: u16 = 65535;

/// Writes a 2-D slice in [0, 1] as binary PGM with 16-bit big-endian
/// samples, `round(v * 65535)`.
pub fn export_image(slice: &Tensor<f32>, path: &Path) -> Result<()> {
    let [h, w] = slice.shape() else {
        return Err(CliError::Image(format!("expected a 2-D slice, got shape {:?}", slice.shape())));
    };
    let mut bytes = format!("P5\n{w} {h}\n{PGM_MAX}\n").into_bytes();
    bytes.reserve(2 * h * w);
    for (i, &v) in slice.data().iter().enumerate() {
        if !(0.0..=1.0).contains(&v) {
            return Err(CliError::Image(format!("pixel {i} has value {v} outside [0, 1]")));
        }
        let p = (v as f64 * PGM_MAX as f64).round() as u16;
        bytes.extend_from_slice(&p.to_be_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a 16-bit binary PGM back as `(height, width, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| CliError::Image(format!("{}: {m}", path.display()));
    // Header: magic, width, height, maxval, each followed by one whitespace byte.
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            pos += 1;
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?.to_string());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("malformed header number"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != PGM_MAX as usize {
        return Err(bad("expected 16-bit samples"));
    }
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != 2 * w * h {
        return Err(bad("pixel data length does not match the header"));
    }
    Ok((h, w, body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()))
}

/// Shortest decimal text that parses back to the same value.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Writes rectangular rows with RFC 4180 quoting.
pub fn emit_csv(rows: &[Vec<String>], path: &Path) -> Result<()> {
    if let Some(first) = rows.first() {
        if let Some((i, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != first.len()) {
            return Err(CliError::Csv(format!(
                "row {i} has {} fields, the first row has {}",
                row.len(),
                first.len()
            )));
        }
    }
    let file = BufWriter::new(fs::File::create(path)?);
    let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(file);
    for row in rows {
        writer.write_record(row).map_err(|e| CliError::Csv(e.to_string()))?;
    }
    writer.into_inner().map_err(|e| CliError::Csv(e.to_string()))?.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<Vec<String>>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(path).map_err(|e| CliError::Csv(e.to_string()))?;
    reader
        .records()
        .map(|r| r.map(|rec| rec.iter().map(str::to_string).collect()).map_err(|e| CliError::Csv(e.to_string())))
        .collect()
}
