//! GLT1 binary tensor files: magic `GLT1`, version (u16), rank (u8), rank
//! extents (u32), then row-major IEEE-754 single-precision values. All
//! integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Real, Result, Tensor, TensorError};

pub const GLT_MAGIC: &[u8; 4] = b"GLT1";
pub const GLT_VERSION: u16 = 1;

pub fn write_glt_to<T: Real, W: Write>(out: &mut W, tensor: &Tensor<T>) -> Result<()> {
    let rank = u8::try_from(tensor.shape().len())
        .map_err(|_| TensorError::Format(format!("rank {} too large", tensor.shape().len())))?;
    out.write_all(GLT_MAGIC)?;
    out.write_all(&GLT_VERSION.to_le_bytes())?;
    out.write_all(&[rank])?;
    for &e in tensor.shape() {
        let e = u32::try_from(e).map_err(|_| TensorError::Format(format!("extent {e} exceeds u32")))?;
        out.write_all(&e.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(tensor.len() * 4);
    for v in tensor.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

fn read_exact_or_format<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TensorError::Format(format!("truncated {what}")),
        _ => TensorError::Io(e),
    })
}

pub fn read_glt_from<T: Real, R: Read>(input: &mut R) -> Result<Tensor<T>> {
    let mut magic = [0u8; 4];
    read_exact_or_format(input, &mut magic, "header")?;
    if &magic != GLT_MAGIC {
        return Err(TensorError::Format(format!("bad magic {magic:?}")));
    }
    let mut b2 = [0u8; 2];
    read_exact_or_format(input, &mut b2, "header")?;
    let version = u16::from_le_bytes(b2);
    if version != GLT_VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let mut rank = [0u8; 1];
    read_exact_or_format(input, &mut rank, "header")?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        let mut b4 = [0u8; 4];
        read_exact_or_format(input, &mut b4, "extents")?;
        shape.push(u32::from_le_bytes(b4) as usize);
    }
    let n: usize = shape.iter().product();
    let mut raw = vec![0u8; n * 4];
    read_exact_or_format(input, &mut raw, "values")?;
    let data = raw
        .chunks_exact(4)
        .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(shape, data).map_err(|e| TensorError::Format(e.to_string()))
}

pub fn write_glt<T: Real>(path: impl AsRef<Path>, tensor: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_glt_to(&mut w, tensor)?;
    w.flush()?;
    Ok(())
}

pub fn read_glt<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    read_glt_from(&mut BufReader::new(File::open(path)?))
}
