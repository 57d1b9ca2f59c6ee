//! Shared framing for table snapshots: `DKTB`, version byte, table kind byte.

use std::io::{self, Read, Write};

use super::AnonError;

pub const MAGIC: &[u8; 4] = b"DKTB";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum SnapshotKind {
    Clients = 0,
    Files = 1,
}

pub fn write_header<W: Write>(w: &mut W, kind: SnapshotKind) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, kind as u8])
}

pub fn read_header<R: Read>(r: &mut R, kind: SnapshotKind) -> Result<(), AnonError> {
    let mut h = [0u8; 6];
    r.read_exact(&mut h)?;
    if &h[..4] != MAGIC {
        return Err(AnonError::Snapshot("missing DKTB magic".into()));
    }
    if h[4] != VERSION {
        return Err(AnonError::Snapshot(format!("unsupported version {}", h[4])));
    }
    if h[5] != kind as u8 {
        return Err(AnonError::Snapshot(format!("expected a {kind:?} snapshot")));
    }
    Ok(())
}

pub fn read_u8<R: Read>(r: &mut R) -> io::Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

pub fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
