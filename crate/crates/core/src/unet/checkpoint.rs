//! Checkpoint layout: magic `GLCK`, version (u16), the architecture as four
//! u32 (in, out, base, depth), then one record per parameter until end of
//! file: name length (u16), UTF-8 name, tensor in GLT1 layout. Little-endian.
//! Values are stored in single precision, so the round trip is bit-exact for
//! `f32` networks.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Result, UNet, UNetConfig, UNetError};
use crate::tensor::{read_glt_from, write_glt_to, Real, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GLCK";
pub const CHECKPOINT_VERSION: u16 = 1;

fn arch(config: &UNetConfig) -> [usize; 4] {
    [config.in_channels, config.out_channels, config.base_features, config.depth]
}

pub fn write_checkpoint<T: Real, W: Write>(out: &mut W, net: &UNet<T>) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for v in arch(net.config()) {
        let v = u32::try_from(v).map_err(|_| UNetError::Config(format!("{v} does not fit a u32")))?;
        out.write_all(&v.to_le_bytes())?;
    }
    for p in net.store().params() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| UNetError::Config(format!("name too long: {}", p.name)))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(name)?;
        write_glt_to(out, &p.value)?;
    }
    Ok(())
}

fn corrupt(e: std::io::Error, what: &str) -> UNetError {
    match e.kind() {
        std::io::ErrorKind::UnexpectedEof => UNetError::Corrupt(format!("truncated {what}")),
        _ => UNetError::Io(e),
    }
}

/// Reads a checkpoint into a network built from `config`. The stored
/// architecture and every parameter shape must match it exactly.
pub fn read_checkpoint<T: Real, R: Read>(input: &mut R, config: UNetConfig) -> Result<UNet<T>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(|e| corrupt(e, "header"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(UNetError::BadMagic(magic));
    }
    let mut b2 = [0u8; 2];
    input.read_exact(&mut b2).map_err(|e| corrupt(e, "header"))?;
    let found = u16::from_le_bytes(b2);
    if found != CHECKPOINT_VERSION {
        return Err(UNetError::VersionMismatch { found, expected: CHECKPOINT_VERSION });
    }
    let mut stored = [0usize; 4];
    for v in &mut stored {
        let mut b4 = [0u8; 4];
        input.read_exact(&mut b4).map_err(|e| corrupt(e, "header"))?;
        *v = u32::from_le_bytes(b4) as usize;
    }
    if stored != arch(&config) {
        return Err(UNetError::ShapeMismatch(format!(
            "checkpoint holds (in, out, base, depth) = {stored:?}, network is {:?}",
            arch(&config)
        )));
    }

    let mut net = UNet::<T>::new(config)?;
    let mut seen = HashSet::new();
    loop {
        let mut len = [0u8; 2];
        match input.read(&mut len[..1])? {
            0 => break,
            _ => input.read_exact(&mut len[1..]).map_err(|e| corrupt(e, "record header"))?,
        }
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        input.read_exact(&mut name).map_err(|e| corrupt(e, "parameter name"))?;
        let name = String::from_utf8(name).map_err(|_| UNetError::Corrupt("parameter name is not UTF-8".into()))?;
        let tensor = read_glt_from::<T, _>(input).map_err(|e| match e {
            TensorError::Io(e) => UNetError::Io(e),
            other => UNetError::Corrupt(format!("parameter `{name}`: {other}")),
        })?;
        let slot = net
            .store_mut()
            .params_mut()
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| UNetError::ShapeMismatch(format!("unknown parameter `{name}`")))?;
        if slot.value.shape() != tensor.shape() {
            return Err(UNetError::ShapeMismatch(format!(
                "`{name}` is {:?} in the checkpoint, {:?} in the network",
                tensor.shape(),
                slot.value.shape()
            )));
        }
        slot.value = tensor;
        if !seen.insert(name.clone()) {
            return Err(UNetError::Corrupt(format!("parameter `{name}` appears twice")));
        }
    }
    if let Some(missing) = net.store().params().iter().find(|p| !seen.contains(&p.name)) {
        return Err(UNetError::ShapeMismatch(format!("checkpoint lacks `{}`", missing.name)));
    }
    Ok(net)
}

pub fn save_checkpoint<T: Real>(net: &UNet<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, net)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>, config: UNetConfig) -> Result<UNet<T>> {
    read_checkpoint(&mut BufReader::new(File::open(path)?), config)
}
