//! Pcap ingestion: extracts the eDonkey server's UDP datagrams, reassembles
//! IPv4 fragments and keeps the packet accounting (fragments, malformed
//! packets, capture losses).

pub mod packet;
pub mod pcap;
pub mod reassembly;

use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use packet::{parse_frame, parse_udp, Frame, IPPROTO_UDP};
use pcap::{PcapReader, RecordRead};
use reassembly::{FragmentOutcome, Reassembler, DEFAULT_HORIZON_SECS};

pub const DEFAULT_SERVER_PORT: u16 = 4661;

/// Capture time in microseconds since the Unix epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct Timestamp(u64);

impl Timestamp {
    pub fn from_parts(secs: u64, micros: u32) -> Self {
        Self(secs * 1_000_000 + micros as u64)
    }

    pub fn from_micros(micros: u64) -> Self {
        Self(micros)
    }

    pub fn as_micros(self) -> u64 {
        self.0
    }

    pub fn secs(self) -> u64 {
        self.0 / 1_000_000
    }

    pub fn subsec_micros(self) -> u32 {
        (self.0 % 1_000_000) as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Client to server: the client is the datagram source.
    ToServer,
    /// Server to client: the client is the destination.
    FromServer,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Datagram {
    pub timestamp: Timestamp,
    pub src_ip: u32,
    pub src_port: u16,
    pub dst_ip: u32,
    pub dst_port: u16,
    pub direction: Direction,
    pub payload: Vec<u8>,
}

impl Datagram {
    /// The client side of the exchange.
    pub fn peer(&self) -> (u32, u16) {
        match self.direction {
            Direction::ToServer => (self.src_ip, self.src_port),
            Direction::FromServer => (self.dst_ip, self.dst_port),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropRecord {
    pub secs: u64,
    pub drops: u64,
}

/// Counters for one ingestion run. Every record ends up in exactly one of
/// `emitted`, `filtered`, `malformed`, or (for fragments) a group that is
/// either reassembled or counted in `bad_fragment_groups`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub packets_seen: u64,
    pub fragments: u64,
    pub fragment_groups: u64,
    pub reassembled: u64,
    /// Unusable records and non-fragment packets with broken headers.
    pub malformed: u64,
    /// Fragment groups that timed out, conflicted, or reassembled into garbage.
    pub bad_fragment_groups: u64,
    /// Well-formed traffic that does not involve the server port.
    pub filtered: u64,
    pub emitted: u64,
    pub first_timestamp: Option<Timestamp>,
    pub last_timestamp: Option<Timestamp>,
    pub drops_reported: Vec<DropRecord>,
}

impl IngestStats {
    /// Packets that could not be turned into a datagram.
    pub fn not_well_formed(&self) -> u64 {
        self.malformed + self.bad_fragment_groups
    }

    pub fn total_drops(&self) -> u64 {
        self.drops_reported.iter().map(|d| d.drops).sum()
    }

    /// Conservation check, valid once the reader is exhausted: each
    /// non-fragment packet and each fragment group is accounted exactly once.
    pub fn balanced(&self) -> bool {
        self.emitted + self.filtered + self.malformed + self.bad_fragment_groups
            == self.packets_seen - self.fragments + self.fragment_groups
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt pcap header: {0}")]
    BadHeader(String),
    #[error("unsupported pcap link type {0} (only Ethernet is supported)")]
    UnsupportedLinkType(u32),
    #[error("drop sidecar line {line}: {msg}")]
    Sidecar { line: usize, msg: String },
    #[error("loss bucket width must be positive")]
    ZeroBucket,
}

/// Streams the server's UDP datagrams out of a pcap file.
pub struct DatagramReader<R> {
    pcap: PcapReader<R>,
    port: u16,
    reassembler: Reassembler,
    stats: IngestStats,
    finished: bool,
}

pub fn read_pcap(path: &Path, server_port: u16) -> Result<DatagramReader<BufReader<File>>, IngestError> {
    let file = File::open(path)?;
    DatagramReader::new(BufReader::with_capacity(1 << 20, file), server_port)
}

impl<R: Read> DatagramReader<R> {
    pub fn new(inner: R, server_port: u16) -> Result<Self, IngestError> {
        Self::with_horizon(inner, server_port, DEFAULT_HORIZON_SECS)
    }

    pub fn with_horizon(inner: R, server_port: u16, horizon_secs: u64) -> Result<Self, IngestError> {
        Ok(Self {
            pcap: PcapReader::new(inner)?,
            port: server_port,
            reassembler: Reassembler::new(horizon_secs),
            stats: IngestStats::default(),
            finished: false,
        })
    }

    pub fn stats(&self) -> &IngestStats {
        &self.stats
    }

    pub fn into_stats(self) -> IngestStats {
        self.stats
    }

    fn udp_datagram(&self, ts: Timestamp, src: u32, dst: u32, segment: &[u8]) -> Result<Option<Datagram>, ()> {
        let (h, payload) = parse_udp(segment).map_err(|_| ())?;
        let direction = if h.dst_port == self.port {
            Direction::ToServer
        } else if h.src_port == self.port {
            Direction::FromServer
        } else {
            return Ok(None);
        };
        Ok(Some(Datagram {
            timestamp: ts,
            src_ip: src,
            src_port: h.src_port,
            dst_ip: dst,
            dst_port: h.dst_port,
            direction,
            payload: payload.to_vec(),
        }))
    }

    fn process(&mut self, ts: Timestamp, data: &[u8]) -> Option<Datagram> {
        let ip = match parse_frame(data) {
            Ok(Frame::Ipv4(ip)) => ip,
            Ok(Frame::Other) => {
                self.stats.filtered += 1;
                return None;
            }
            Err(_) => {
                self.stats.malformed += 1;
                return None;
            }
        };
        if ip.protocol != IPPROTO_UDP {
            self.stats.filtered += 1;
            return None;
        }
        if !ip.is_fragment() {
            return match self.udp_datagram(ts, ip.src, ip.dst, ip.payload) {
                Ok(Some(d)) => Some(d),
                Ok(None) => {
                    self.stats.filtered += 1;
                    None
                }
                Err(()) => {
                    self.stats.malformed += 1;
                    None
                }
            };
        }
        self.stats.fragments += 1;
        let outcome = self.reassembler.push(ts, &ip);
        self.stats.fragment_groups = self.reassembler.groups_started();
        match outcome {
            FragmentOutcome::Pending => None,
            FragmentOutcome::Poisoned => {
                self.stats.bad_fragment_groups += 1;
                None
            }
            FragmentOutcome::Complete {
                key,
                first_seen,
                payload,
            } => {
                self.stats.reassembled += 1;
                match self.udp_datagram(first_seen, key.src, key.dst, &payload) {
                    Ok(Some(d)) => Some(d),
                    Ok(None) => {
                        self.stats.filtered += 1;
                        None
                    }
                    Err(()) => {
                        self.stats.bad_fragment_groups += 1;
                        None
                    }
                }
            }
        }
    }

    pub fn next_datagram(&mut self) -> Result<Option<Datagram>, IngestError> {
        while !self.finished {
            let record = match self.pcap.next_record()? {
                RecordRead::Record(r) => r,
                RecordRead::Truncated | RecordRead::Corrupt => {
                    self.stats.packets_seen += 1;
                    self.stats.malformed += 1;
                    continue;
                }
                RecordRead::End => {
                    self.stats.bad_fragment_groups += self.reassembler.drain();
                    self.finished = true;
                    break;
                }
            };
            let ts = record.timestamp;
            self.stats.packets_seen += 1;
            self.stats.first_timestamp.get_or_insert(ts);
            self.stats.last_timestamp = Some(self.stats.last_timestamp.map_or(ts, |l| l.max(ts)));
            self.stats.bad_fragment_groups += self.reassembler.expire(ts);
            if let Some(d) = self.process(ts, &record.data) {
                self.stats.emitted += 1;
                return Ok(Some(d));
            }
        }
        Ok(None)
    }
}

impl<R: Read> Iterator for DatagramReader<R> {
    type Item = Result<Datagram, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_datagram().transpose()
    }
}

// ---------------------------------------------------------------------------
// Drop sidecar and loss time series
// ---------------------------------------------------------------------------

/// Parses `<epoch_seconds> <drops>` lines. Blank lines and `#` comments are skipped.
pub fn parse_drop_sidecar<R: BufRead>(input: R) -> Result<Vec<DropRecord>, IngestError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: &str| IngestError::Sidecar {
            line: i + 1,
            msg: msg.to_string(),
        };
        let mut it = line.split_whitespace();
        let secs = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad timestamp"))?;
        let drops = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad drop count"))?;
        if it.next().is_some() {
            return Err(bad("trailing fields"));
        }
        out.push(DropRecord { secs, drops });
    }
    Ok(out)
}

pub fn read_drop_sidecar(path: &Path) -> Result<Vec<DropRecord>, IngestError> {
    parse_drop_sidecar(BufReader::new(File::open(path)?))
}

pub fn write_drop_sidecar<W: Write>(mut out: W, drops: &[DropRecord]) -> io::Result<()> {
    for d in drops {
        writeln!(out, "{} {}", d.secs, d.drops)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LossBucket {
    /// Seconds since the start of the capture.
    pub start: u64,
    pub losses: u64,
}

/// Buckets the reported drops over the capture span. The span runs from the
/// earliest of the first packet and the first drop record to the latest of
/// either; every bucket is listed, including empty ones.
pub fn loss_timeseries(stats: &IngestStats, bucket_secs: u64) -> Result<Vec<LossBucket>, IngestError> {
    if bucket_secs == 0 {
        return Err(IngestError::ZeroBucket);
    }
    let times = stats
        .first_timestamp
        .iter()
        .chain(stats.last_timestamp.iter())
        .map(|t| t.secs())
        .chain(stats.drops_reported.iter().map(|d| d.secs));
    let (origin, end) = match times.fold(None, |acc: Option<(u64, u64)>, t| {
        Some(acc.map_or((t, t), |(lo, hi)| (lo.min(t), hi.max(t))))
    }) {
        Some(span) => span,
        None => return Ok(Vec::new()),
    };
    let n = ((end - origin) / bucket_secs + 1) as usize;
    let mut buckets: Vec<LossBucket> = (0..n)
        .map(|i| LossBucket {
            start: i as u64 * bucket_secs,
            losses: 0,
        })
        .collect();
    for d in &stats.drops_reported {
        buckets[((d.secs - origin) / bucket_secs) as usize].losses += d.drops;
    }
    Ok(buckets)
}

/// Running total of losses, one entry per bucket.
pub fn cumulative_losses(buckets: &[LossBucket]) -> Vec<(u64, u64)> {
    buckets
        .iter()
        .scan(0u64, |acc, b| {
            *acc += b.losses;
            Some((b.start, *acc))
        })
        .collect()
}
