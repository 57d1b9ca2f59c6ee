//! Synthetic eDonkey workloads with known ground truth.
//!
//! A workload is a client population, a file catalogue and a plan saying
//! which client announces and asks for which files. The plan is encoded as
//! UDP datagrams to and from one server, padded with filler traffic,
//! interleaved by arrival time and written as a pcap capture. The ground
//! truth sidecar records what the pipeline should report for it.
//!
//! Corrupted datagrams are extra filler datagrams; planned announces and
//! source searches always decode, so the expected distributions hold
//! whatever the corruption rate.

mod truth;

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Exp, Zipf};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use truth::{parse_truth, read_truth, Expected, GroundTruth, Secret};

use crate::analyze::{DistributionReport, ReportKind};
use crate::anonymize::anon_size;
use crate::ingest::packet::{build_fragments, build_ipv4_frame, build_udp, IpFields, IPPROTO_UDP};
use crate::ingest::pcap::{PcapWriter, DEFAULT_SNAPLEN};
use crate::ingest::{write_drop_sidecar, DropRecord, Timestamp};
use crate::wire::{
    encode_message, ClientId, DecodeError, EdonkeyMessage, EncodeError, FileEntry, FileId, MessageKind, MetaTag,
    ServerAddr, Source,
};

/// Number of distinct files asked by every member of the injected cohort.
pub const COHORT_ASKS: usize = 52;
/// Largest size the 32-bit Size tag can carry, in KB.
pub const MAX_SIZE_KB: u64 = (u32::MAX as u64) / 1024 - 1;

/// Relative weights of the four corruption kinds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionMix {
    /// Cut the payload short; always structurally invalid.
    pub truncate: f64,
    pub bad_magic: f64,
    pub unknown_opcode: f64,
    /// Append junk after a valid message.
    pub trailing: f64,
}

impl Default for CorruptionMix {
    fn default() -> Self {
        Self {
            truncate: 0.80,
            bad_magic: 0.07,
            unknown_opcode: 0.07,
            trailing: 0.06,
        }
    }
}

impl CorruptionMix {
    fn weights(&self) -> [f64; 4] {
        [self.truncate, self.bad_magic, self.unknown_opcode, self.trailing]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub seed: u64,
    pub num_clients: u32,
    pub num_files: u32,
    /// Zipf exponent of the number of files each provider announces.
    pub provide_exponent: f64,
    /// Zipf exponent of the number of files each asker searches sources for.
    pub ask_exponent: f64,
    /// Zipf exponent over file ranks when picking which files a client holds.
    pub popularity_exponent: f64,
    pub provider_fraction: f64,
    pub asker_fraction: f64,
    pub min_files_per_client: u32,
    pub max_files_per_client: u32,
    pub forged_fraction: f64,
    pub forged_prefixes: Vec<u16>,
    pub malformed_rate: f64,
    pub corruption: CorruptionMix,
    pub fragment_rate: f64,
    /// `(seconds after start, drops)` pairs for the drop sidecar.
    pub drop_schedule: Vec<(u64, u64)>,
    pub duration: u64,
    /// Extra clients that each ask for exactly 52 files.
    pub cohort_52: u32,
    /// `(KB, weight)`: fraction of the catalogue pinned to that size.
    pub size_peaks: Vec<(u64, f64)>,
    /// Datagrams in the capture; filler pads the plan up to this number.
    /// Zero means the plan alone.
    pub total_messages: u64,
    pub announce_chunk: u32,
    pub ask_chunk: u32,
    pub server_ip: u32,
    pub server_port: u16,
    pub start_epoch: u64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            num_clients: 2_000,
            num_files: 5_000,
            provide_exponent: 2.0,
            ask_exponent: 2.0,
            popularity_exponent: 1.0,
            provider_fraction: 0.5,
            asker_fraction: 0.8,
            min_files_per_client: 1,
            max_files_per_client: 200,
            forged_fraction: 0.3,
            forged_prefixes: vec![0x0000, 0x0100],
            malformed_rate: 0.0068,
            corruption: CorruptionMix::default(),
            fragment_rate: 0.01,
            drop_schedule: vec![(600, 120), (1_800, 40), (3_000, 7)],
            duration: 3_600,
            cohort_52: 40,
            size_peaks: vec![(716_800, 0.05)],
            total_messages: 50_000,
            announce_chunk: 20,
            ask_chunk: 8,
            server_ip: 0xC633_6401,
            server_port: 4661,
            start_epoch: 1_190_000_000,
        }
    }
}

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("invalid workload config: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("encoding failed: {0}")]
    Encode(#[from] EncodeError),
    #[error("bad ground-truth sidecar line {line}: {msg}")]
    Truth { line: usize, msg: String },
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<(), GenerateError> {
        let bad = |m: String| Err(GenerateError::Config(m));
        for (name, v) in [
            ("provider_fraction", self.provider_fraction),
            ("asker_fraction", self.asker_fraction),
            ("forged_fraction", self.forged_fraction),
            ("malformed_rate", self.malformed_rate),
            ("fragment_rate", self.fragment_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        for (name, v) in [
            ("provide_exponent", self.provide_exponent),
            ("ask_exponent", self.ask_exponent),
            ("popularity_exponent", self.popularity_exponent),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        let clients = self.num_clients as u64 + self.cohort_52 as u64;
        if clients > 1 << 23 {
            return bad(format!("at most 2^23 clients supported, got {clients}"));
        }
        if self.min_files_per_client == 0 || self.min_files_per_client > self.max_files_per_client {
            return bad("need 1 <= min_files_per_client <= max_files_per_client".into());
        }
        if self.max_files_per_client > self.num_files {
            return bad("max_files_per_client exceeds num_files".into());
        }
        if self.cohort_52 > 0 && (self.num_files as usize) < COHORT_ASKS {
            return bad(format!("the 52-ask cohort needs at least {COHORT_ASKS} files"));
        }
        if self.forged_fraction > 0.0 && self.forged_prefixes.is_empty() {
            return bad("forged_fraction > 0 needs forged_prefixes".into());
        }
        let w = self.corruption.weights();
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (self.malformed_rate > 0.0 && w.iter().sum::<f64>() <= 0.0)
        {
            return bad("corruption weights must be non-negative with a positive sum".into());
        }
        let peak_mass: f64 = self.size_peaks.iter().map(|p| p.1).sum();
        if self.size_peaks.iter().any(|&(kb, w)| kb > MAX_SIZE_KB || !(w >= 0.0)) || peak_mass > 1.0 {
            return bad("size peaks need KB <= 4194302 and weights summing to at most 1".into());
        }
        if !(1..=1_000).contains(&self.announce_chunk) || !(1..=255).contains(&self.ask_chunk) {
            return bad("announce_chunk must be 1..=1000 and ask_chunk 1..=255".into());
        }
        if self.duration == 0 || self.start_epoch + self.duration + 1 > u32::MAX as u64 {
            return bad("duration must be positive and the capture must end before 2106".into());
        }
        if self.server_port == 0 || self.server_ip < 1 << 24 {
            return bad("server needs a non-zero port and an address outside 0.0.0.0/8".into());
        }
        if self.drop_schedule.iter().any(|&(t, _)| t > self.duration) {
            return bad("drop schedule entries must fall within the duration".into());
        }
        Ok(())
    }
}

/// One catalogue file as clients describe it on the wire.
#[derive(Clone, Debug)]
pub struct CatalogFile {
    pub id: FileId,
    pub name: Vec<u8>,
    pub size: u32,
    pub file_type: Option<&'static [u8]>,
}

impl CatalogFile {
    fn entry(&self) -> FileEntry {
        let mut tags = vec![MetaTag::Name(self.name.clone()), MetaTag::Size(self.size)];
        if let Some(t) = self.file_type {
            tags.push(MetaTag::Type(t.to_vec()));
        }
        FileEntry { file: self.id, tags }
    }
}

const TYPES: [&[u8]; 5] = [b"Audio", b"Video", b"Image", b"Pro", b"Doc"];
const EXTS: [&str; 5] = ["avi", "mp3", "iso", "zip", "ogm"];
const NAME_CHARS: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZghijklmnopqrstuvwxyz_";

fn token(rng: &mut ChaCha8Rng, len: usize) -> String {
    (0..len)
        .map(|_| NAME_CHARS[rng.random_range(0..NAME_CHARS.len())] as char)
        .collect()
}

/// The file catalogue, in popularity-rank order.
///
/// A `forged_fraction` share of IDs start with one of the forged 2-byte
/// prefixes; the rest are uniform. Names start with `Qz` and use letters
/// outside the hex alphabet so they cannot occur by chance in a trace.
pub fn catalog(cfg: &WorkloadConfig, rng: &mut ChaCha8Rng) -> Vec<CatalogFile> {
    let mut seen = HashSet::with_capacity(cfg.num_files as usize);
    let mut files = Vec::with_capacity(cfg.num_files as usize);
    while files.len() < cfg.num_files as usize {
        let mut id = [0u8; 16];
        rng.fill(&mut id[..]);
        if rng.random_bool(cfg.forged_fraction) {
            let p = cfg.forged_prefixes[rng.random_range(0..cfg.forged_prefixes.len())];
            id[..2].copy_from_slice(&p.to_be_bytes());
        }
        if !seen.insert(id) {
            continue;
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let kb = cfg
            .size_peaks
            .iter()
            .find(|p| {
                acc += p.1;
                u < acc
            })
            .map(|p| p.0)
            .unwrap_or_else(|| (10f64 * 200_000f64.powf(rng.random::<f64>())) as u64);
        let size = (kb * 1024 + rng.random_range(0..1024)) as u32;
        let name = format!("Qz{}.{}", token(rng, 12), EXTS[rng.random_range(0..EXTS.len())]);
        let file_type = rng.random_bool(0.5).then(|| TYPES[rng.random_range(0..TYPES.len())]);
        files.push(CatalogFile {
            id: FileId(id),
            name: name.into_bytes(),
            size,
            file_type,
        });
    }
    files
}

#[derive(Clone, Copy, Debug)]
pub struct Client {
    pub ip: u32,
    pub port: u16,
}

/// Distinct client addresses drawn from [2^23, 2^24), so that every address
/// lands in the default 24-bit dense client table.
fn population(cfg: &WorkloadConfig, rng: &mut ChaCha8Rng) -> Vec<Client> {
    let n = (cfg.num_clients + cfg.cohort_52) as usize;
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let ip = rng.random_range(1u32 << 23..1 << 24);
        if !seen.insert(ip) {
            continue;
        }
        let port = loop {
            let p = rng.random_range(1024u16..=u16::MAX);
            if p != cfg.server_port {
                break p;
            }
        };
        out.push(Client { ip, port });
    }
    out
}

/// Draws `count` distinct catalogue indices with Zipf popularity, falling
/// back to uniform sampling of the remainder once collisions dominate.
fn pick_files(count: usize, popularity: &Zipf<f64>, n: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut chosen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count && attempts < 8 * count + 64 {
        attempts += 1;
        let f = popularity.sample(rng) as u32 - 1;
        if chosen.insert(f) {
            out.push(f);
        }
    }
    if out.len() < count {
        let mut rest: Vec<u32> = (0..n as u32).filter(|f| !chosen.contains(f)).collect();
        rest.shuffle(rng);
        out.extend(rest.into_iter().take(count - out.len()));
    }
    out
}

/// Which files each client announces and asks for (catalogue indices).
#[derive(Clone, Debug, Default)]
pub struct Plan {
    pub provides: Vec<Vec<u32>>,
    pub asks: Vec<Vec<u32>>,
}

fn sample_count(zipf: &Zipf<f64>, min: u32, rng: &mut ChaCha8Rng) -> usize {
    (min as f64 - 1.0 + zipf.sample(rng)) as usize
}

fn plan(cfg: &WorkloadConfig, rng: &mut ChaCha8Rng) -> Plan {
    let span = (cfg.max_files_per_client - cfg.min_files_per_client + 1) as f64;
    let provide = Zipf::new(span, cfg.provide_exponent).expect("validated");
    let ask = Zipf::new(span, cfg.ask_exponent).expect("validated");
    let n = cfg.num_files as usize;
    let popularity = Zipf::new(n.max(1) as f64, cfg.popularity_exponent).expect("validated");
    let total = (cfg.num_clients + cfg.cohort_52) as usize;
    let mut p = Plan {
        provides: vec![Vec::new(); total],
        asks: vec![Vec::new(); total],
    };
    for c in 0..cfg.num_clients as usize {
        if rng.random_bool(cfg.provider_fraction) {
            let k = sample_count(&provide, cfg.min_files_per_client, rng);
            p.provides[c] = pick_files(k, &popularity, n, rng);
        }
        if rng.random_bool(cfg.asker_fraction) {
            let k = sample_count(&ask, cfg.min_files_per_client, rng);
            p.asks[c] = pick_files(k, &popularity, n, rng);
        }
    }
    for c in cfg.num_clients as usize..total {
        p.asks[c] = pick_files(COHORT_ASKS, &popularity, n, rng);
    }
    p
}

#[derive(Clone, Copy, Debug)]
enum Item {
    Announce { client: u32, start: u32, len: u32 },
    Ask { client: u32, start: u32, len: u32 },
    Filler(MessageKind),
    Corrupt(MessageKind),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Corruption {
    Truncate,
    BadMagic,
    UnknownOpcode,
    Trailing,
}

impl Corruption {
    const ALL: [Corruption; 4] = [
        Corruption::Truncate,
        Corruption::BadMagic,
        Corruption::UnknownOpcode,
        Corruption::Trailing,
    ];

    fn expected_error(self) -> DecodeError {
        match self {
            Corruption::Truncate => DecodeError::StructurallyInvalid,
            Corruption::BadMagic => DecodeError::BadMagic,
            Corruption::UnknownOpcode => DecodeError::UnknownOpcode,
            Corruption::Trailing => DecodeError::TrailingBytes,
        }
    }

    fn pick(mix: &CorruptionMix, rng: &mut ChaCha8Rng) -> Self {
        let w = mix.weights();
        let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
        for (c, w) in Self::ALL.into_iter().zip(w) {
            if u < w {
                return c;
            }
            u -= w;
        }
        Corruption::Truncate
    }

    fn apply(self, payload: &mut Vec<u8>, rng: &mut ChaCha8Rng) {
        match self {
            Corruption::Truncate => {
                let len = payload.len();
                let cut = if len > 2 { rng.random_range(2..len) } else { rng.random_range(0..len) };
                payload.truncate(cut);
            }
            Corruption::BadMagic => {
                payload[0] = loop {
                    let b: u8 = rng.random();
                    if b != payload[0] {
                        break b;
                    }
                };
            }
            Corruption::UnknownOpcode => {
                payload[1] = loop {
                    let b: u8 = rng.random();
                    if MessageKind::from_opcode(b).is_none() {
                        break b;
                    }
                };
            }
            Corruption::Trailing => {
                let extra = rng.random_range(1..=8);
                payload.extend((0..extra).map(|_| rng.random::<u8>()));
            }
        }
    }
}

/// Direction of a message kind in the generated traffic.
fn to_server(kind: MessageKind) -> bool {
    matches!(
        kind,
        MessageKind::ServerListQuery
            | MessageKind::FileSearchQuery
            | MessageKind::SourceSearchQuery
            | MessageKind::Announce
    )
}

const FILLER_KINDS: [MessageKind; 6] = [
    MessageKind::ServerListQuery,
    MessageKind::ServerListAnswer,
    MessageKind::ServerStatus,
    MessageKind::FileSearchQuery,
    MessageKind::FileSearchAnswer,
    MessageKind::SourceSearchAnswer,
];

/// Random message bodies drawn from the population and catalogue.
struct Builder<'a> {
    cfg: &'a WorkloadConfig,
    files: &'a [CatalogFile],
    clients: &'a [Client],
    popularity: Zipf<f64>,
    searches: Vec<Vec<u8>>,
}

impl<'a> Builder<'a> {
    fn new(cfg: &'a WorkloadConfig, files: &'a [CatalogFile], clients: &'a [Client], rng: &mut ChaCha8Rng) -> Self {
        let searches = (0..256)
            .map(|_| format!("Find {} {}", token(rng, 6), token(rng, 5)).into_bytes())
            .collect();
        Self {
            cfg,
            files,
            clients,
            popularity: Zipf::new(files.len().max(1) as f64, cfg.popularity_exponent).expect("validated"),
            searches,
        }
    }

    fn file(&self, rng: &mut ChaCha8Rng) -> &'a CatalogFile {
        &self.files[self.popularity.sample(rng) as usize - 1]
    }

    fn client(&self, rng: &mut ChaCha8Rng) -> Client {
        self.clients[rng.random_range(0..self.clients.len())]
    }

    fn server(rng: &mut ChaCha8Rng) -> ServerAddr {
        let net = if rng.random_bool(0.5) { 0xC633_6400 } else { 0xCB00_7100 };
        ServerAddr {
            ip: net | rng.random_range(1..255),
            port: 4661 + rng.random_range(0..4),
        }
    }

    fn random(&self, kind: MessageKind, rng: &mut ChaCha8Rng) -> EdonkeyMessage {
        let have_files = !self.files.is_empty();
        match kind {
            MessageKind::ServerListQuery => EdonkeyMessage::ServerListQuery,
            MessageKind::ServerListAnswer => EdonkeyMessage::ServerListAnswer {
                servers: (0..rng.random_range(1..=5)).map(|_| Self::server(rng)).collect(),
            },
            MessageKind::ServerStatus => EdonkeyMessage::ServerStatus {
                users: rng.random_range(0..1_000_000),
                files: rng.random_range(0..1_000_000),
                description: format!("Srv {}", token(rng, 8)).into_bytes(),
            },
            MessageKind::FileSearchQuery => {
                let mut filters = Vec::new();
                if rng.random_bool(0.3) {
                    filters.push(MetaTag::Type(TYPES[rng.random_range(0..TYPES.len())].to_vec()));
                }
                if rng.random_bool(0.2) {
                    filters.push(MetaTag::Size(rng.random_range(0..1 << 30)));
                }
                if rng.random_bool(0.1) {
                    filters.push(MetaTag::Other(0xD3, rng.random_range(32u32..320).to_string().into_bytes()));
                }
                EdonkeyMessage::FileSearchQuery {
                    pattern: self.searches[rng.random_range(0..self.searches.len())].clone(),
                    filters,
                }
            }
            MessageKind::FileSearchAnswer if have_files => EdonkeyMessage::FileSearchAnswer {
                results: (0..rng.random_range(0..=6)).map(|_| self.file(rng).entry()).collect(),
            },
            MessageKind::SourceSearchAnswer if have_files => EdonkeyMessage::SourceSearchAnswer {
                file: self.file(rng).id,
                sources: (0..rng.random_range(0..=4))
                    .map(|_| {
                        let c = self.client(rng);
                        Source {
                            client: ClientId(c.ip),
                            port: c.port,
                        }
                    })
                    .collect(),
            },
            MessageKind::SourceSearchQuery if have_files => EdonkeyMessage::SourceSearchQuery {
                files: (0..rng.random_range(1..=4)).map(|_| self.file(rng).id).collect(),
            },
            MessageKind::Announce if have_files => {
                let c = self.client(rng);
                EdonkeyMessage::Announce {
                    client: ClientId(c.ip),
                    port: c.port,
                    files: (0..rng.random_range(1..=self.cfg.announce_chunk.min(8)))
                        .map(|_| self.file(rng).entry())
                        .collect(),
                }
            }
            _ => EdonkeyMessage::ServerListQuery,
        }
    }
}

/// Writes datagrams as Ethernet/IPv4/UDP frames, fragmenting some.
struct FrameSink<W: Write> {
    pcap: PcapWriter<W>,
    server: Client,
    ip_id: u16,
    frames: u64,
    fragment_frames: u64,
    fragmented: u64,
}

impl<W: Write> FrameSink<W> {
    fn datagram(
        &mut self,
        ts: Timestamp,
        client: Client,
        to_server: bool,
        payload: &[u8],
        fragment: bool,
        rng: &mut ChaCha8Rng,
    ) -> io::Result<()> {
        let (src, dst) = if to_server { (client, self.server) } else { (self.server, client) };
        let seg = build_udp(src.port, dst.port, payload);
        let ip = IpFields {
            src: src.ip,
            dst: dst.ip,
            id: self.ip_id,
            protocol: IPPROTO_UDP,
        };
        self.ip_id = self.ip_id.wrapping_add(1);
        if fragment && seg.len() > 8 {
            let cuts: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(8..seg.len())).collect();
            let mut frames = build_fragments(ip, &seg, &cuts);
            frames.shuffle(rng);
            for f in &frames {
                self.pcap.write_record(ts, f)?;
            }
            self.frames += frames.len() as u64;
            self.fragment_frames += frames.len() as u64;
            self.fragmented += 1;
        } else {
            self.pcap.write_record(ts, &build_ipv4_frame(ip, false, 0, &seg))?;
            self.frames += 1;
        }
        Ok(())
    }
}

/// Replays the anonymiser's order-of-appearance rule with ordinary maps to
/// predict the tables and the trace summary.
#[derive(Default)]
struct Shadow {
    clients: HashMap<u32, u32>,
    client_order: Vec<u32>,
    files: HashMap<FileId, u32>,
    file_order: Vec<FileId>,
    sizes: HashMap<u32, u64>,
    first: Option<u64>,
    last: u64,
    by_type: [u64; 8],
    file_search_queries: u64,
}

impl Shadow {
    fn client(&mut self, ip: u32) -> u32 {
        let next = self.clients.len() as u32;
        *self.clients.entry(ip).or_insert_with(|| {
            self.client_order.push(ip);
            next
        })
    }

    fn file(&mut self, f: FileId) -> u32 {
        let next = self.files.len() as u32;
        *self.files.entry(f).or_insert_with(|| {
            self.file_order.push(f);
            next
        })
    }

    fn entries(&mut self, entries: &[FileEntry]) {
        for e in entries {
            let fid = self.file(e.file);
            if let Some(bytes) = e.tags.iter().find_map(|t| match t {
                MetaTag::Size(s) => Some(*s),
                _ => None,
            }) {
                self.sizes.entry(fid).or_insert(anon_size(bytes as u64));
            }
        }
    }

    fn observe(&mut self, t: u64, peer: u32, msg: &EdonkeyMessage) {
        self.first.get_or_insert(t);
        self.last = self.last.max(t);
        self.by_type[msg.kind().index()] += 1;
        self.client(peer);
        match msg {
            EdonkeyMessage::ServerListQuery | EdonkeyMessage::ServerListAnswer { .. } | EdonkeyMessage::ServerStatus { .. } => {}
            EdonkeyMessage::FileSearchQuery { .. } => self.file_search_queries += 1,
            EdonkeyMessage::FileSearchAnswer { results } => self.entries(results),
            EdonkeyMessage::SourceSearchQuery { files } => {
                for f in files {
                    self.file(*f);
                }
            }
            EdonkeyMessage::SourceSearchAnswer { file, sources } => {
                self.file(*file);
                for s in sources {
                    self.client(s.client.0);
                }
            }
            EdonkeyMessage::Announce { client, files, .. } => {
                self.client(client.0);
                self.entries(files);
            }
        }
    }
}

fn pair_reports(kind_per_file: ReportKind, kind_per_client: ReportKind, sets: &[(u32, Vec<u32>)]) -> [DistributionReport; 2] {
    let mut per_file: HashMap<u32, u64> = HashMap::new();
    for (_, files) in sets {
        for f in files {
            *per_file.entry(*f).or_default() += 1;
        }
    }
    [
        DistributionReport::from_values(kind_per_file, per_file.into_values()),
        DistributionReport::from_values(kind_per_client, sets.iter().map(|(_, f)| f.len() as u64)),
    ]
}

fn timestamp(cfg: &WorkloadConfig, offset_micros: u64) -> Timestamp {
    Timestamp::from_micros(cfg.start_epoch * 1_000_000 + offset_micros)
}

/// Generates the capture into `out` and returns its ground truth and drop records.
pub fn generate_workload<W: Write>(cfg: &WorkloadConfig, out: W) -> Result<(GroundTruth, Vec<DropRecord>), GenerateError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let files = catalog(cfg, &mut rng);
    let clients = population(cfg, &mut rng);
    let plan = plan(cfg, &mut rng);
    let builder = Builder::new(cfg, &files, &clients, &mut rng);

    let mut items: Vec<Item> = Vec::new();
    for (c, provided) in plan.provides.iter().enumerate() {
        for start in (0..provided.len()).step_by(cfg.announce_chunk as usize) {
            let len = (provided.len() - start).min(cfg.announce_chunk as usize);
            items.push(Item::Announce {
                client: c as u32,
                start: start as u32,
                len: len as u32,
            });
        }
    }
    for (c, asked) in plan.asks.iter().enumerate() {
        for start in (0..asked.len()).step_by(cfg.ask_chunk as usize) {
            let len = (asked.len() - start).min(cfg.ask_chunk as usize);
            items.push(Item::Ask {
                client: c as u32,
                start: start as u32,
                len: len as u32,
            });
        }
    }
    let planned = items.len() as u64;
    let total = if cfg.total_messages == 0 { planned } else { cfg.total_messages };
    if planned > total {
        return Err(GenerateError::Config(format!(
            "the plan needs {planned} messages but total_messages is {total}"
        )));
    }
    let corrupt = if cfg.malformed_rate > 0.0 {
        Binomial::new(total, cfg.malformed_rate).expect("validated").sample(&mut rng)
    } else {
        0
    };
    if planned + corrupt > total {
        return Err(GenerateError::Config(format!(
            "{corrupt} corrupted datagrams do not fit next to {planned} planned messages in {total}"
        )));
    }
    let all_kinds = MessageKind::ALL;
    for i in 0..total - planned - corrupt {
        // Cycle through every filler kind first so each variant appears.
        let kind = if (i as usize) < FILLER_KINDS.len() {
            FILLER_KINDS[i as usize]
        } else {
            FILLER_KINDS[rng.random_range(0..FILLER_KINDS.len())]
        };
        items.push(Item::Filler(kind));
    }
    for _ in 0..corrupt {
        items.push(Item::Corrupt(all_kinds[rng.random_range(0..all_kinds.len())]));
    }

    // Conditioned on their number, Poisson arrivals are uniform order statistics.
    let span = cfg.duration * 1_000_000;
    let mut timed: Vec<(u64, Item)> = items.into_iter().map(|it| (rng.random_range(0..span), it)).collect();
    timed.sort_by_key(|&(t, _)| t);

    let server = Client {
        ip: cfg.server_ip,
        port: cfg.server_port,
    };
    let mut sink = FrameSink {
        pcap: PcapWriter::new(BufWriter::with_capacity(1 << 20, out), DEFAULT_SNAPLEN)?,
        server,
        ip_id: 0,
        frames: 0,
        fragment_frames: 0,
        fragmented: 0,
    };
    let mut shadow = Shadow::default();
    let origin = timed.first().map_or(0, |t| t.0);
    let mut undecoded_by_error = [0u64; 4];
    for (t, item) in timed {
        let ts = timestamp(cfg, t);
        let (client, msg, corruption) = match item {
            Item::Announce { client, start, len } => {
                let c = clients[client as usize];
                let list = &plan.provides[client as usize][start as usize..(start + len) as usize];
                let msg = EdonkeyMessage::Announce {
                    client: ClientId(c.ip),
                    port: c.port,
                    files: list.iter().map(|&f| files[f as usize].entry()).collect(),
                };
                (c, msg, None)
            }
            Item::Ask { client, start, len } => {
                let c = clients[client as usize];
                let list = &plan.asks[client as usize][start as usize..(start + len) as usize];
                let msg = EdonkeyMessage::SourceSearchQuery {
                    files: list.iter().map(|&f| files[f as usize].id).collect(),
                };
                (c, msg, None)
            }
            Item::Filler(kind) => (builder.client(&mut rng), builder.random(kind, &mut rng), None),
            Item::Corrupt(kind) => {
                let how = Corruption::pick(&cfg.corruption, &mut rng);
                (builder.client(&mut rng), builder.random(kind, &mut rng), Some(how))
            }
        };
        let mut payload = encode_message(&msg)?;
        match corruption {
            Some(how) => {
                how.apply(&mut payload, &mut rng);
                undecoded_by_error[how.expected_error().index()] += 1;
            }
            None => shadow.observe(t - origin, client.ip, &msg),
        }
        let fragment = cfg.fragment_rate > 0.0 && rng.random_bool(cfg.fragment_rate);
        sink.datagram(ts, client, to_server(msg.kind()), &payload, fragment, &mut rng)?;
    }
    sink.pcap.flush()?;

    let cid = |ip: u32| shadow.clients[&ip];
    let fid = |f: u32| shadow.files[&files[f as usize].id];
    let sets = |lists: &[Vec<u32>]| -> Vec<(u32, Vec<u32>)> {
        let mut v: Vec<(u32, Vec<u32>)> = lists
            .iter()
            .enumerate()
            .filter(|(_, l)| !l.is_empty())
            .map(|(c, l)| {
                let mut f: Vec<u32> = l.iter().map(|&f| fid(f)).collect();
                f.sort_unstable();
                (cid(clients[c].ip), f)
            })
            .collect();
        v.sort_unstable();
        v
    };
    let provides = sets(&plan.provides);
    let asks = sets(&plan.asks);
    let [ppf, fpp] = pair_reports(ReportKind::ProvidersPerFile, ReportKind::FilesPerProvider, &provides);
    let [apf, fac] = pair_reports(ReportKind::AskersPerFile, ReportKind::FilesAskedPerClient, &asks);
    let sizes = DistributionReport::from_values(ReportKind::FileSizeKB, shadow.sizes.values().copied());

    let drops: Vec<DropRecord> = cfg
        .drop_schedule
        .iter()
        .map(|&(t, n)| DropRecord {
            secs: cfg.start_epoch + t,
            drops: n,
        })
        .collect();

    let mut secrets = Vec::new();
    for c in &clients {
        let [_, a, b, d] = c.ip.to_be_bytes();
        secrets.push(Secret::new("ip", format!("0.{a}.{b}.{d}").into_bytes()));
        secrets.push(Secret::new("ip-decimal", c.ip.to_string().into_bytes()));
    }
    for f in &files {
        secrets.push(Secret::new("fileid", f.id.0.to_vec()));
        secrets.push(Secret::new("fileid-hex", f.id.to_hex().into_bytes()));
        secrets.push(Secret::new("filename", f.name.clone()));
    }
    for s in &builder.searches {
        secrets.push(Secret::new("search", s.clone()));
    }

    let messages = total - corrupt;
    let expected = Expected {
        frames: sink.frames,
        fragment_frames: sink.fragment_frames,
        fragmented: sink.fragmented,
        datagrams: total,
        messages,
        undecoded: corrupt,
        undecoded_by_error,
        drops_total: drops.iter().map(|d| d.drops).sum(),
        distinct_clients: shadow.clients.len() as u64,
        distinct_files: shadow.files.len() as u64,
        span_micros: shadow.first.map_or(0, |f| shadow.last - f),
        file_search_queries: shadow.file_search_queries,
        by_type: shadow.by_type,
        distributions: vec![ppf, apf, fpp, fac, sizes],
    };
    let truth = GroundTruth {
        clients: shadow.client_order.iter().map(|&ip| (ip, shadow.clients[&ip])).collect(),
        files: shadow.file_order.iter().map(|f| (*f, shadow.files[f])).collect(),
        provides,
        asks,
        secrets,
        expected,
    };
    Ok((truth, drops))
}

/// `capture.pcap` → `capture.pcap.truth`.
pub fn truth_path(pcap: &Path) -> PathBuf {
    sidecar(pcap, "truth")
}

/// `capture.pcap` → `capture.pcap.drops`.
pub fn drops_path(pcap: &Path) -> PathBuf {
    sidecar(pcap, "drops")
}

fn sidecar(pcap: &Path, ext: &str) -> PathBuf {
    let mut s = pcap.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Writes the capture and both sidecars next to it.
pub fn generate_to_files(cfg: &WorkloadConfig, pcap: &Path) -> Result<GroundTruth, GenerateError> {
    let (truth, drops) = generate_workload(cfg, File::create(pcap)?)?;
    let mut t = BufWriter::new(File::create(truth_path(pcap))?);
    truth.write(&mut t)?;
    t.flush()?;
    let mut d = BufWriter::new(File::create(drops_path(pcap))?);
    write_drop_sidecar(&mut d, &drops)?;
    d.flush()?;
    Ok(truth)
}

/// Endless-style traffic for throughput runs: `count` datagrams of every
/// kind with exponential inter-arrival times, generated on the fly in
/// constant memory. No ground truth is kept.
pub fn stream_workload<W: Write>(cfg: &WorkloadConfig, count: u64, out: W) -> Result<u64, GenerateError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let files = catalog(cfg, &mut rng);
    let clients = population(cfg, &mut rng);
    let builder = Builder::new(cfg, &files, &clients, &mut rng);
    let rate = count.max(1) as f64 / (cfg.duration as f64 * 1e6);
    let gap = Exp::new(rate).expect("positive rate");
    let mut sink = FrameSink {
        pcap: PcapWriter::new(out, DEFAULT_SNAPLEN)?,
        server: Client {
            ip: cfg.server_ip,
            port: cfg.server_port,
        },
        ip_id: 0,
        frames: 0,
        fragment_frames: 0,
        fragmented: 0,
    };
    let mut t = 0f64;
    for _ in 0..count {
        t += gap.sample(&mut rng);
        let kind = MessageKind::ALL[rng.random_range(0..8)];
        let client = builder.client(&mut rng);
        let msg = builder.random(kind, &mut rng);
        let mut payload = encode_message(&msg)?;
        if cfg.malformed_rate > 0.0 && rng.random_bool(cfg.malformed_rate) {
            Corruption::pick(&cfg.corruption, &mut rng).apply(&mut payload, &mut rng);
        }
        let fragment = cfg.fragment_rate > 0.0 && rng.random_bool(cfg.fragment_rate);
        sink.datagram(timestamp(cfg, t as u64), client, to_server(kind), &payload, fragment, &mut rng)?;
    }
    sink.pcap.flush()?;
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> WorkloadConfig {
        WorkloadConfig {
            num_clients: 1,
            num_files: 2,
            provider_fraction: 1.0,
            asker_fraction: 0.0,
            min_files_per_client: 2,
            max_files_per_client: 2,
            forged_fraction: 0.0,
            malformed_rate: 0.0,
            fragment_rate: 0.0,
            drop_schedule: vec![],
            cohort_52: 0,
            size_peaks: vec![],
            total_messages: 0,
            ..WorkloadConfig::default()
        }
    }

    #[test]
    fn single_announce() {
        let mut pcap = Vec::new();
        let (truth, drops) = generate_workload(&tiny(), &mut pcap).unwrap();
        assert_eq!(truth.expected.datagrams, 1);
        assert_eq!(truth.expected.frames, 1);
        assert!(drops.is_empty());
        assert_eq!(truth.expected.distributions[2].points, vec![(2, 1)]);
        assert_eq!(truth.expected.distributions[0].points, vec![(1, 2)]);
        assert_eq!(truth.provides, vec![(0, vec![0, 1])]);
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = WorkloadConfig {
            total_messages: 3_000,
            num_clients: 200,
            num_files: 500,
            ..WorkloadConfig::default()
        };
        let run = |cfg: &WorkloadConfig| {
            let mut pcap = Vec::new();
            let (truth, _) = generate_workload(cfg, &mut pcap).unwrap();
            let mut t = Vec::new();
            truth.write(&mut t).unwrap();
            (pcap, t)
        };
        let a = run(&cfg);
        assert_eq!(a, run(&cfg));
        assert_ne!(a.0, run(&WorkloadConfig { seed: 2, ..cfg }).0);
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            WorkloadConfig { malformed_rate: 1.5, ..WorkloadConfig::default() },
            WorkloadConfig { provide_exponent: 0.0, ..WorkloadConfig::default() },
            WorkloadConfig { max_files_per_client: 10_000, ..WorkloadConfig::default() },
            WorkloadConfig { ask_chunk: 256, ..WorkloadConfig::default() },
            WorkloadConfig { total_messages: 10, ..WorkloadConfig::default() },
        ] {
            assert!(matches!(generate_workload(&cfg, io::sink()), Err(GenerateError::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn forged_prefixes_land_in_their_buckets() {
        let cfg = WorkloadConfig {
            num_files: 20_000,
            forged_fraction: 0.3,
            ..WorkloadConfig::default()
        };
        let files = catalog(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let forged = files.iter().filter(|f| f.id.0[..2] == [0, 0] || f.id.0[..2] == [1, 0]).count();
        let share = forged as f64 / files.len() as f64;
        assert!((share - 0.3).abs() < 0.02, "{share}");
    }

    #[test]
    fn truncation_is_always_structural() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = WorkloadConfig::default();
        let files = catalog(&WorkloadConfig { num_files: 50, ..cfg.clone() }, &mut rng);
        let clients = population(&WorkloadConfig { num_clients: 10, cohort_52: 0, ..cfg.clone() }, &mut rng);
        let b = Builder::new(&cfg, &files, &clients, &mut rng);
        for i in 0..2_000 {
            let kind = MessageKind::ALL[i % 8];
            let mut p = encode_message(&b.random(kind, &mut rng)).unwrap();
            let how = Corruption::ALL[i % 4];
            how.apply(&mut p, &mut rng);
            assert_eq!(crate::wire::decode_message(&p), Err(how.expected_error()), "{kind:?} {how:?}");
        }
    }
}
