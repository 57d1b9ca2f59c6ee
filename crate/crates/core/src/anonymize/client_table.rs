use std::collections::HashMap;
use std::io::{self, Read, Write};

use super::snapshot::{self, SnapshotKind};
use super::AnonError;
use crate::wire::ClientId;

pub const DEFAULT_CLIENT_BITS: u8 = 24;

/// Order-of-appearance encoder for client IDs.
///
/// Keys below `2^bits` live in a dense array indexed by the key itself, so
/// both lookup and insertion are a single memory access. A cell holds 0 for
/// "unseen" and `index + 1` otherwise, which makes a zeroed allocation a
/// valid empty table. Keys outside the dense range go to `overflow`.
pub struct ClientTable {
    bits: u8,
    cells: Vec<u32>,
    overflow: HashMap<u32, u32>,
    next: u32,
}

impl ClientTable {
    pub fn new(bits: u8) -> Result<Self, AnonError> {
        if !(1..=32).contains(&bits) {
            return Err(AnonError::ClientBits(bits));
        }
        Ok(Self {
            bits,
            cells: vec![0; 1usize << bits],
            overflow: HashMap::new(),
            next: 0,
        })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    /// Distinct clients seen so far.
    pub fn len(&self) -> u32 {
        self.next
    }

    pub fn is_empty(&self) -> bool {
        self.next == 0
    }

    /// Keys that did not fit the dense range.
    pub fn overflow_len(&self) -> usize {
        self.overflow.len()
    }

    /// Bytes held by the dense array; fixed at construction.
    pub fn dense_bytes(&self) -> usize {
        self.cells.len() * std::mem::size_of::<u32>()
    }

    #[inline]
    pub fn anon(&mut self, client: ClientId) -> u32 {
        let key = client.0;
        if let Some(cell) = self.cells.get_mut(key as usize) {
            if *cell == 0 {
                self.next += 1;
                *cell = self.next;
            }
            return *cell - 1;
        }
        let next = &mut self.next;
        *self.overflow.entry(key).or_insert_with(|| {
            *next += 1;
            *next - 1
        })
    }

    pub fn get(&self, client: ClientId) -> Option<u32> {
        match self.cells.get(client.0 as usize) {
            Some(0) => None,
            Some(&c) => Some(c - 1),
            None => self.overflow.get(&client.0).copied(),
        }
    }

    /// All `(client, index)` pairs in index order.
    pub fn assignments(&self) -> Vec<(ClientId, u32)> {
        let mut out: Vec<(ClientId, u32)> = self
            .cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != 0)
            .map(|(k, &c)| (ClientId(k as u32), c - 1))
            .chain(self.overflow.iter().map(|(&k, &v)| (ClientId(k), v)))
            .collect();
        out.sort_unstable_by_key(|&(_, i)| i);
        out
    }

    pub fn write_snapshot<W: Write>(&self, mut w: W) -> io::Result<()> {
        snapshot::write_header(&mut w, SnapshotKind::Clients)?;
        w.write_all(&[self.bits])?;
        w.write_all(&(self.next as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(1 << 16);
        for chunk in self.cells.chunks(1 << 14) {
            buf.clear();
            for c in chunk {
                buf.extend_from_slice(&c.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        let mut extra: Vec<_> = self.overflow.iter().collect();
        extra.sort_unstable();
        w.write_all(&(extra.len() as u64).to_le_bytes())?;
        for (k, v) in extra {
            w.write_all(&k.to_le_bytes())?;
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self, AnonError> {
        snapshot::read_header(&mut r, SnapshotKind::Clients)?;
        let bits = snapshot::read_u8(&mut r)?;
        let mut table = Self::new(bits)?;
        let next = snapshot::read_u64(&mut r)?;
        table.next = u32::try_from(next).map_err(|_| AnonError::Snapshot("index overflow".into()))?;
        let mut buf = vec![0u8; 4 << 14];
        for chunk in table.cells.chunks_mut(1 << 14) {
            let bytes = &mut buf[..chunk.len() * 4];
            r.read_exact(bytes)?;
            for (c, b) in chunk.iter_mut().zip(bytes.chunks_exact(4)) {
                *c = u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            }
        }
        let extra = snapshot::read_u64(&mut r)?;
        for _ in 0..extra {
            let k = snapshot::read_u32(&mut r)?;
            let v = snapshot::read_u32(&mut r)?;
            table.overflow.insert(k, v);
        }
        let assigned = table.cells.iter().filter(|&&c| c != 0).count() + table.overflow.len();
        if assigned as u64 != next {
            return Err(AnonError::Snapshot(format!(
                "{assigned} assigned cells but next index is {next}"
            )));
        }
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_client_gets_zero() {
        let mut t = ClientTable::new(DEFAULT_CLIENT_BITS).unwrap();
        assert_eq!(t.anon(ClientId(0x0102_0304)), 0);
        assert_eq!(t.overflow_len(), 1);
        assert_eq!(t.anon(ClientId(0x0002_0304)), 1);
        assert_eq!(t.anon(ClientId(0x0102_0304)), 0);
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn repeated_lookups_are_stable() {
        let mut t = ClientTable::new(8).unwrap();
        let a = t.anon(ClientId(7));
        assert_eq!(t.anon(ClientId(7)), a);
        assert_eq!(t.get(ClientId(7)), Some(a));
        assert_eq!(t.get(ClientId(8)), None);
        assert_eq!(t.get(ClientId(1 << 20)), None);
    }

    #[test]
    fn dense_memory_is_fixed_by_width() {
        let mut t = ClientTable::new(12).unwrap();
        let before = t.dense_bytes();
        for k in 0..10_000u32 {
            t.anon(ClientId(k));
        }
        assert_eq!(t.dense_bytes(), before);
        assert_eq!(before, 4 << 12);
    }

    #[test]
    fn rejects_bad_width() {
        assert!(ClientTable::new(0).is_err());
        assert!(ClientTable::new(33).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let mut t = ClientTable::new(10).unwrap();
        for k in [5u32, 900, 5, 70_000, 3, 70_000] {
            t.anon(ClientId(k));
        }
        let mut bytes = Vec::new();
        t.write_snapshot(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"DKTB");
        let back = ClientTable::read_snapshot(&bytes[..]).unwrap();
        assert_eq!(back.assignments(), t.assignments());
        assert_eq!(back.len(), 4);

        let mut corrupt = bytes.clone();
        corrupt[6] = 9;
        assert!(ClientTable::read_snapshot(&corrupt[..]).is_err());
    }
}
