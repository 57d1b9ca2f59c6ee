//! Classic libpcap file format, microsecond resolution.

use std::io::{self, Read, Write};

use super::{IngestError, Timestamp};

pub const PCAP_MAGIC: u32 = 0xA1B2_C3D4;
pub const LINKTYPE_ETHERNET: u32 = 1;
pub const DEFAULT_SNAPLEN: u32 = 65_535;

/// Records larger than this are treated as corruption regardless of snaplen.
const MAX_RECORD: u32 = 256 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PcapHeader {
    pub swapped: bool,
    pub snaplen: u32,
    pub linktype: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PcapRecord {
    pub timestamp: Timestamp,
    pub orig_len: u32,
    pub data: Vec<u8>,
}

#[derive(Debug, PartialEq, Eq)]
pub enum RecordRead {
    Record(PcapRecord),
    /// File ended inside a record.
    Truncated,
    /// Record header declares an impossible length; the stream cannot be resynchronised.
    Corrupt,
    End,
}

pub struct PcapReader<R> {
    inner: R,
    header: PcapHeader,
    done: bool,
}

/// Fills `buf` completely, or returns how many bytes were available before EOF.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

impl<R: Read> PcapReader<R> {
    pub fn new(mut inner: R) -> Result<Self, IngestError> {
        let mut raw = [0u8; 24];
        let got = read_full(&mut inner, &mut raw)?;
        if got < 24 {
            return Err(IngestError::BadHeader(format!(
                "global header is {got} bytes, expected 24"
            )));
        }
        let magic = u32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]);
        let swapped = if magic == PCAP_MAGIC {
            false
        } else if magic.swap_bytes() == PCAP_MAGIC {
            true
        } else {
            return Err(IngestError::BadHeader(format!("bad magic 0x{magic:08x}")));
        };
        let field = |at: usize| {
            let v = u32::from_le_bytes([raw[at], raw[at + 1], raw[at + 2], raw[at + 3]]);
            if swapped {
                v.swap_bytes()
            } else {
                v
            }
        };
        let header = PcapHeader {
            swapped,
            snaplen: field(16),
            linktype: field(20),
        };
        if header.linktype != LINKTYPE_ETHERNET {
            return Err(IngestError::UnsupportedLinkType(header.linktype));
        }
        Ok(Self {
            inner,
            header,
            done: false,
        })
    }

    pub fn header(&self) -> PcapHeader {
        self.header
    }

    fn field(&self, b: &[u8]) -> u32 {
        let v = u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        if self.header.swapped {
            v.swap_bytes()
        } else {
            v
        }
    }

    pub fn next_record(&mut self) -> Result<RecordRead, IngestError> {
        if self.done {
            return Ok(RecordRead::End);
        }
        let mut hdr = [0u8; 16];
        match read_full(&mut self.inner, &mut hdr)? {
            0 => {
                self.done = true;
                return Ok(RecordRead::End);
            }
            16 => {}
            _ => {
                self.done = true;
                return Ok(RecordRead::Truncated);
            }
        }
        let secs = self.field(&hdr[0..4]);
        let micros = self.field(&hdr[4..8]);
        let incl_len = self.field(&hdr[8..12]);
        let orig_len = self.field(&hdr[12..16]);
        if incl_len > MAX_RECORD.max(self.header.snaplen) || micros >= 1_000_000 {
            self.done = true;
            return Ok(RecordRead::Corrupt);
        }
        let mut data = vec![0u8; incl_len as usize];
        if read_full(&mut self.inner, &mut data)? < data.len() {
            self.done = true;
            return Ok(RecordRead::Truncated);
        }
        Ok(RecordRead::Record(PcapRecord {
            timestamp: Timestamp::from_parts(secs as u64, micros),
            orig_len,
            data,
        }))
    }
}

pub struct PcapWriter<W: Write> {
    inner: W,
    snaplen: u32,
}

impl<W: Write> PcapWriter<W> {
    pub fn new(mut inner: W, snaplen: u32) -> io::Result<Self> {
        let mut h = Vec::with_capacity(24);
        h.extend_from_slice(&PCAP_MAGIC.to_le_bytes());
        h.extend_from_slice(&2u16.to_le_bytes());
        h.extend_from_slice(&4u16.to_le_bytes());
        h.extend_from_slice(&0i32.to_le_bytes());
        h.extend_from_slice(&0u32.to_le_bytes());
        h.extend_from_slice(&snaplen.to_le_bytes());
        h.extend_from_slice(&LINKTYPE_ETHERNET.to_le_bytes());
        inner.write_all(&h)?;
        Ok(Self { inner, snaplen })
    }

    pub fn write_record(&mut self, ts: Timestamp, frame: &[u8]) -> io::Result<()> {
        let incl = (frame.len() as u32).min(self.snaplen);
        let mut h = [0u8; 16];
        h[0..4].copy_from_slice(&(ts.secs() as u32).to_le_bytes());
        h[4..8].copy_from_slice(&ts.subsec_micros().to_le_bytes());
        h[8..12].copy_from_slice(&incl.to_le_bytes());
        h[12..16].copy_from_slice(&(frame.len() as u32).to_le_bytes());
        self.inner.write_all(&h)?;
        self.inner.write_all(&frame[..incl as usize])
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_record_file() -> Vec<u8> {
        let mut w = PcapWriter::new(Vec::new(), DEFAULT_SNAPLEN).unwrap();
        w.write_record(Timestamp::from_parts(100, 5), &[1, 2, 3]).unwrap();
        w.into_inner()
    }

    #[test]
    fn write_then_read() {
        let bytes = one_record_file();
        let mut r = PcapReader::new(&bytes[..]).unwrap();
        assert!(!r.header().swapped);
        match r.next_record().unwrap() {
            RecordRead::Record(rec) => {
                assert_eq!(rec.timestamp, Timestamp::from_parts(100, 5));
                assert_eq!(rec.data, vec![1, 2, 3]);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(r.next_record().unwrap(), RecordRead::End);
    }

    #[test]
    fn byte_swapped_file() {
        let le = one_record_file();
        let mut be = Vec::new();
        be.extend_from_slice(&PCAP_MAGIC.to_be_bytes());
        be.extend_from_slice(&2u16.to_be_bytes());
        be.extend_from_slice(&4u16.to_be_bytes());
        be.extend_from_slice(&[0; 8]);
        be.extend_from_slice(&DEFAULT_SNAPLEN.to_be_bytes());
        be.extend_from_slice(&LINKTYPE_ETHERNET.to_be_bytes());
        for f in le[24..40].chunks(4) {
            let v = u32::from_le_bytes([f[0], f[1], f[2], f[3]]);
            be.extend_from_slice(&v.to_be_bytes());
        }
        be.extend_from_slice(&le[40..]);
        let mut r = PcapReader::new(&be[..]).unwrap();
        assert!(r.header().swapped);
        match r.next_record().unwrap() {
            RecordRead::Record(rec) => assert_eq!(rec.timestamp, Timestamp::from_parts(100, 5)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_bad_magic_and_short_header() {
        assert!(matches!(
            PcapReader::new(&[0u8; 24][..]),
            Err(IngestError::BadHeader(_))
        ));
        assert!(matches!(
            PcapReader::new(&[0xD4, 0xC3][..]),
            Err(IngestError::BadHeader(_))
        ));
    }

    #[test]
    fn truncated_and_corrupt_records() {
        let bytes = one_record_file();
        let mut r = PcapReader::new(&bytes[..bytes.len() - 1]).unwrap();
        assert_eq!(r.next_record().unwrap(), RecordRead::Truncated);
        assert_eq!(r.next_record().unwrap(), RecordRead::End);

        let mut bad = bytes.clone();
        bad[32..36].copy_from_slice(&u32::MAX.to_le_bytes());
        let mut r = PcapReader::new(&bad[..]).unwrap();
        assert_eq!(r.next_record().unwrap(), RecordRead::Corrupt);
    }
}
