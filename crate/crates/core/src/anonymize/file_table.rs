use std::io::{self, Read, Write};

use super::snapshot::{self, SnapshotKind};
use super::AnonError;
use crate::wire::FileId;

pub const BUCKETS: usize = 1 << 16;
pub const DEFAULT_INDEX_BYTES: (usize, usize) = (2, 3);

/// Order-of-appearance encoder for 128-bit file IDs.
///
/// File IDs are spread over 65,536 sorted arrays; the array is chosen by two
/// fixed byte positions of the ID. Lookups binary-search one array, misses
/// insert in place.
pub struct FileTable {
    buckets: Vec<Vec<(FileId, u32)>>,
    index_bytes: (usize, usize),
    next: u32,
}

impl FileTable {
    pub fn new(index_bytes: (usize, usize)) -> Result<Self, AnonError> {
        let (i, j) = index_bytes;
        if i >= j || j > 15 {
            return Err(AnonError::IndexBytes(i, j));
        }
        Ok(Self {
            buckets: vec![Vec::new(); BUCKETS],
            index_bytes,
            next: 0,
        })
    }

    pub fn index_bytes(&self) -> (usize, usize) {
        self.index_bytes
    }

    pub fn len(&self) -> u32 {
        self.next
    }

    pub fn is_empty(&self) -> bool {
        self.next == 0
    }

    #[inline]
    pub fn bucket_of(&self, f: &FileId) -> usize {
        ((f.0[self.index_bytes.0] as usize) << 8) | f.0[self.index_bytes.1] as usize
    }

    #[inline]
    pub fn anon(&mut self, f: FileId) -> u32 {
        let b = self.bucket_of(&f);
        let bucket = &mut self.buckets[b];
        match bucket.binary_search_by(|(k, _)| k.cmp(&f)) {
            Ok(pos) => bucket[pos].1,
            Err(pos) => {
                let idx = self.next;
                bucket.insert(pos, (f, idx));
                self.next += 1;
                idx
            }
        }
    }

    pub fn get(&self, f: &FileId) -> Option<u32> {
        let bucket = &self.buckets[self.bucket_of(f)];
        bucket
            .binary_search_by(|(k, _)| k.cmp(f))
            .ok()
            .map(|pos| bucket[pos].1)
    }

    pub fn bucket_sizes(&self) -> impl Iterator<Item = usize> + '_ {
        self.buckets.iter().map(Vec::len)
    }

    /// Histogram of bucket occupancy: `(size, number of buckets with that size)`,
    /// sorted by size. The bucket counts always sum to 65,536.
    pub fn bucket_size_distribution(&self) -> Vec<(usize, usize)> {
        let mut counts = std::collections::BTreeMap::new();
        for s in self.bucket_sizes() {
            *counts.entry(s).or_insert(0usize) += 1;
        }
        counts.into_iter().collect()
    }

    /// Largest bucket over the mean bucket size (total / 65,536).
    pub fn skew_ratio(&self) -> f64 {
        if self.next == 0 {
            return 0.0;
        }
        let max = self.bucket_sizes().max().unwrap_or(0) as f64;
        max / (self.next as f64 / BUCKETS as f64)
    }

    /// All `(file, index)` pairs in index order.
    pub fn assignments(&self) -> Vec<(FileId, u32)> {
        let mut out: Vec<(FileId, u32)> = self.buckets.iter().flatten().copied().collect();
        out.sort_unstable_by_key(|&(_, i)| i);
        out
    }

    pub fn write_snapshot<W: Write>(&self, mut w: W) -> io::Result<()> {
        snapshot::write_header(&mut w, SnapshotKind::Files)?;
        w.write_all(&[self.index_bytes.0 as u8, self.index_bytes.1 as u8])?;
        w.write_all(&(self.next as u64).to_le_bytes())?;
        let mut buf = Vec::new();
        for bucket in &self.buckets {
            buf.clear();
            buf.extend_from_slice(&(bucket.len() as u32).to_le_bytes());
            for (f, idx) in bucket {
                buf.extend_from_slice(&f.0);
                buf.extend_from_slice(&idx.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self, AnonError> {
        snapshot::read_header(&mut r, SnapshotKind::Files)?;
        let i = snapshot::read_u8(&mut r)? as usize;
        let j = snapshot::read_u8(&mut r)? as usize;
        let mut table = Self::new((i, j))?;
        let next = snapshot::read_u64(&mut r)?;
        let mut total = 0u64;
        for b in 0..BUCKETS {
            let len = snapshot::read_u32(&mut r)? as usize;
            let mut bucket = Vec::with_capacity(len);
            for _ in 0..len {
                let mut id = [0u8; 16];
                r.read_exact(&mut id)?;
                let idx = snapshot::read_u32(&mut r)?;
                bucket.push((FileId(id), idx));
            }
            let sorted = bucket.windows(2).all(|w| w[0].0 < w[1].0);
            let placed = bucket.iter().all(|(f, _)| table.bucket_of(f) == b);
            if !(sorted && placed) {
                return Err(AnonError::Snapshot(format!("bucket {b} is unsorted or misplaced")));
            }
            total += len as u64;
            table.buckets[b] = bucket;
        }
        if total != next {
            return Err(AnonError::Snapshot(format!(
                "{total} stored file IDs but next index is {next}"
            )));
        }
        table.next = next as u32;
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(first: [u8; 2], last: u8) -> FileId {
        let mut b = [0x5Au8; 16];
        b[0] = first[0];
        b[1] = first[1];
        b[15] = last;
        FileId(b)
    }

    #[test]
    fn first_file_gets_zero() {
        let mut t = FileTable::new(DEFAULT_INDEX_BYTES).unwrap();
        assert_eq!(t.anon(FileId([9; 16])), 0);
        assert_eq!(t.anon(FileId([9; 16])), 0);
        assert_eq!(t.anon(FileId([8; 16])), 1);
    }

    #[test]
    fn last_byte_difference_shares_a_bucket() {
        let mut t = FileTable::new((0, 1)).unwrap();
        let (a, b) = (id([1, 0], 1), id([1, 0], 2));
        assert_eq!(t.bucket_of(&a), 256);
        assert_eq!(t.bucket_of(&a), t.bucket_of(&b));
        assert_ne!(t.anon(a), t.anon(b));
        assert_eq!(t.bucket_sizes().nth(256), Some(2));
    }

    #[test]
    fn buckets_stay_sorted() {
        let mut t = FileTable::new((0, 1)).unwrap();
        for last in [9u8, 3, 200, 0, 77, 3] {
            t.anon(id([0, 0], last));
        }
        let b0: Vec<FileId> = t.buckets[0].iter().map(|e| e.0).collect();
        let mut sorted = b0.clone();
        sorted.sort();
        assert_eq!(b0, sorted);
        assert_eq!(t.len(), 5);
    }

    #[test]
    fn empty_distribution() {
        let t = FileTable::new(DEFAULT_INDEX_BYTES).unwrap();
        assert_eq!(t.bucket_size_distribution(), vec![(0, BUCKETS)]);
        assert_eq!(t.skew_ratio(), 0.0);
    }

    #[test]
    fn invalid_index_bytes() {
        assert!(FileTable::new((3, 3)).is_err());
        assert!(FileTable::new((4, 2)).is_err());
        assert!(FileTable::new((0, 16)).is_err());
        assert!(FileTable::new((14, 15)).is_ok());
    }

    #[test]
    fn snapshot_round_trip() {
        let mut t = FileTable::new((0, 1)).unwrap();
        for k in 0..50u8 {
            t.anon(id([k % 3, 0], k));
        }
        let mut bytes = Vec::new();
        t.write_snapshot(&mut bytes).unwrap();
        let back = FileTable::read_snapshot(&bytes[..]).unwrap();
        assert_eq!(back.assignments(), t.assignments());
        assert_eq!(back.index_bytes(), (0, 1));
        // A client snapshot is not a file snapshot.
        let clients = super::super::ClientTable::new(4).unwrap();
        let mut other = Vec::new();
        clients.write_snapshot(&mut other).unwrap();
        assert!(FileTable::read_snapshot(&other[..]).is_err());
    }
}
