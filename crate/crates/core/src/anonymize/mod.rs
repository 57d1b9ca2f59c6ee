//! Real-time anonymisation of decoded messages.
//!
//! Client and file IDs become their order of first appearance (0, 1, 2, ...),
//! byte-strings become their MD5 digest, sizes are truncated to kilobytes and
//! timestamps are rebased to the start of the capture. The tables make the
//! output depend on processing order, so one [`Anonymizer`] must see the
//! messages in capture order.

mod client_table;
mod file_table;
mod snapshot;

use std::fmt;
use std::io;

use md5::{Digest as _, Md5};
use thiserror::Error;

pub use client_table::{ClientTable, DEFAULT_CLIENT_BITS};
pub use file_table::{FileTable, BUCKETS, DEFAULT_INDEX_BYTES};

use crate::ingest::{Datagram, Direction, Timestamp};
use crate::wire::{ClientId, EdonkeyMessage, FileEntry, MetaTag, ServerAddr};

#[derive(Debug, Error)]
pub enum AnonError {
    #[error("client key-space width must be 1..=32 bits, got {0}")]
    ClientBits(u8),
    #[error("index bytes ({0}, {1}) must satisfy 0 <= i < j <= 15")]
    IndexBytes(usize, usize),
    #[error("bad table snapshot: {0}")]
    Snapshot(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// MD5 of an anonymised byte-string; displays as 32 lowercase hex digits.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StringDigest(pub [u8; 16]);

impl StringDigest {
    pub fn from_hex(s: &str) -> Option<Self> {
        crate::wire::FileId::from_hex(s).map(|f| Self(f.0))
    }
}

impl fmt::Display for StringDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for StringDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "StringDigest({self})")
    }
}

pub fn anon_string(s: &[u8]) -> StringDigest {
    StringDigest(Md5::digest(s).into())
}

pub fn anon_size(bytes: u64) -> u64 {
    bytes / 1024
}

/// Elapsed microseconds since `t0`, clamped at zero. The flag reports a clamp.
pub fn rebase_timestamp(t: Timestamp, t0: Timestamp) -> (u64, bool) {
    match t.as_micros().checked_sub(t0.as_micros()) {
        Some(d) => (d, false),
        None => (0, true),
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AnonTag {
    Name(StringDigest),
    /// Kilobytes.
    Size(u64),
    Type(StringDigest),
    Other(u8, StringDigest),
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct AnonEntry {
    pub file: u32,
    pub tags: Vec<AnonTag>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct AnonEndpoint {
    pub client: u32,
    pub port: u16,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum AnonBody {
    ServerListQuery,
    ServerListAnswer { servers: Vec<ServerAddr> },
    ServerStatus { users: u32, files: u32, description: StringDigest },
    FileSearchQuery { pattern: StringDigest, filters: Vec<AnonTag> },
    FileSearchAnswer { results: Vec<AnonEntry> },
    SourceSearchQuery { files: Vec<u32> },
    SourceSearchAnswer { file: u32, sources: Vec<AnonEndpoint> },
    Announce { client: AnonEndpoint, files: Vec<AnonEntry> },
}

impl AnonBody {
    pub fn kind(&self) -> crate::wire::MessageKind {
        use crate::wire::MessageKind as K;
        match self {
            AnonBody::ServerListQuery => K::ServerListQuery,
            AnonBody::ServerListAnswer { .. } => K::ServerListAnswer,
            AnonBody::ServerStatus { .. } => K::ServerStatus,
            AnonBody::FileSearchQuery { .. } => K::FileSearchQuery,
            AnonBody::FileSearchAnswer { .. } => K::FileSearchAnswer,
            AnonBody::SourceSearchQuery { .. } => K::SourceSearchQuery,
            AnonBody::SourceSearchAnswer { .. } => K::SourceSearchAnswer,
            AnonBody::Announce { .. } => K::Announce,
        }
    }
}

/// One anonymised message. `time` is microseconds since capture start.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct AnonMessage {
    pub time: u64,
    pub direction: Direction,
    /// Client side of the datagram, when the message came off the wire.
    pub peer: Option<AnonEndpoint>,
    pub body: AnonBody,
}

/// Owns both tables and the capture origin.
pub struct Anonymizer {
    pub clients: ClientTable,
    pub files: FileTable,
    origin: Option<Timestamp>,
    clamped: u64,
}

impl Anonymizer {
    pub fn new(clients: ClientTable, files: FileTable) -> Self {
        Self {
            clients,
            files,
            origin: None,
            clamped: 0,
        }
    }

    pub fn with_defaults() -> Result<Self, AnonError> {
        Ok(Self::new(
            ClientTable::new(DEFAULT_CLIENT_BITS)?,
            FileTable::new(DEFAULT_INDEX_BYTES)?,
        ))
    }

    pub fn origin(&self) -> Option<Timestamp> {
        self.origin
    }

    /// Sets the capture start. Only the first call has an effect.
    pub fn set_origin(&mut self, t0: Timestamp) {
        self.origin.get_or_insert(t0);
    }

    /// Timestamps that fell before the origin and were clamped to 0.
    pub fn clamped(&self) -> u64 {
        self.clamped
    }

    fn rebase(&mut self, t: Timestamp) -> u64 {
        let t0 = *self.origin.get_or_insert(t);
        let (d, clamped) = rebase_timestamp(t, t0);
        self.clamped += clamped as u64;
        d
    }

    fn tag(tag: &MetaTag) -> AnonTag {
        match tag {
            MetaTag::Name(s) => AnonTag::Name(anon_string(s)),
            MetaTag::Size(n) => AnonTag::Size(anon_size(*n as u64)),
            MetaTag::Type(s) => AnonTag::Type(anon_string(s)),
            MetaTag::Other(code, s) => AnonTag::Other(*code, anon_string(s)),
        }
    }

    fn entries(&mut self, entries: &[FileEntry]) -> Vec<AnonEntry> {
        entries
            .iter()
            .map(|e| AnonEntry {
                file: self.files.anon(e.file),
                tags: e.tags.iter().map(Self::tag).collect(),
            })
            .collect()
    }

    /// Anonymises the body. IDs are assigned in field order.
    pub fn anonymize_body(&mut self, msg: &EdonkeyMessage) -> AnonBody {
        match msg {
            EdonkeyMessage::ServerListQuery => AnonBody::ServerListQuery,
            EdonkeyMessage::ServerListAnswer { servers } => AnonBody::ServerListAnswer {
                servers: servers.clone(),
            },
            EdonkeyMessage::ServerStatus {
                users,
                files,
                description,
            } => AnonBody::ServerStatus {
                users: *users,
                files: *files,
                description: anon_string(description),
            },
            EdonkeyMessage::FileSearchQuery { pattern, filters } => AnonBody::FileSearchQuery {
                pattern: anon_string(pattern),
                filters: filters.iter().map(Self::tag).collect(),
            },
            EdonkeyMessage::FileSearchAnswer { results } => AnonBody::FileSearchAnswer {
                results: self.entries(results),
            },
            EdonkeyMessage::SourceSearchQuery { files } => AnonBody::SourceSearchQuery {
                files: files.iter().map(|f| self.files.anon(*f)).collect(),
            },
            EdonkeyMessage::SourceSearchAnswer { file, sources } => {
                let file = self.files.anon(*file);
                let sources = sources
                    .iter()
                    .map(|s| AnonEndpoint {
                        client: self.clients.anon(s.client),
                        port: s.port,
                    })
                    .collect();
                AnonBody::SourceSearchAnswer { file, sources }
            }
            EdonkeyMessage::Announce {
                client,
                port,
                files,
            } => {
                let client = AnonEndpoint {
                    client: self.clients.anon(*client),
                    port: *port,
                };
                AnonBody::Announce {
                    client,
                    files: self.entries(files),
                }
            }
        }
    }

    /// Anonymises a message without datagram context.
    pub fn anonymize_message(&mut self, msg: &EdonkeyMessage, t: Timestamp, direction: Direction) -> AnonMessage {
        let time = self.rebase(t);
        AnonMessage {
            time,
            direction,
            peer: None,
            body: self.anonymize_body(msg),
        }
    }

    /// Anonymises a decoded datagram: the client endpoint first, then the body.
    pub fn anonymize_datagram(&mut self, d: &Datagram, msg: &EdonkeyMessage) -> AnonMessage {
        let time = self.rebase(d.timestamp);
        let (ip, port) = d.peer();
        let peer = AnonEndpoint {
            client: self.clients.anon(ClientId(ip)),
            port,
        };
        AnonMessage {
            time,
            direction: d.direction,
            peer: Some(peer),
            body: self.anonymize_body(msg),
        }
    }
}
