//! eDonkey application-level messages and their UDP wire codec.
//!
//! One message per datagram. Layout: magic byte `0xE3`, one opcode byte,
//! then an opcode-specific body. Integers are little-endian, lists carry a
//! 16-bit count (the source-search query uses a single count byte), strings
//! carry a 16-bit length, and file IDs are 16 raw bytes.
//!
//! Decoding runs in two steps: [`validate_structure`] walks the declared
//! lengths without allocating, and only payloads that pass it are turned
//! into an [`EdonkeyMessage`].

use std::fmt;

use thiserror::Error;

pub const MAGIC: u8 = 0xE3;

pub const OP_SERVER_LIST_QUERY: u8 = 0x14;
pub const OP_SERVER_LIST_ANSWER: u8 = 0x15;
pub const OP_SERVER_STATUS: u8 = 0x16;
pub const OP_FILE_SEARCH_QUERY: u8 = 0x98;
pub const OP_FILE_SEARCH_ANSWER: u8 = 0x99;
pub const OP_SOURCE_SEARCH_QUERY: u8 = 0x9A;
pub const OP_SOURCE_SEARCH_ANSWER: u8 = 0x9B;
pub const OP_ANNOUNCE: u8 = 0x9C;

pub const TAG_NAME: u8 = 0x01;
pub const TAG_SIZE: u8 = 0x02;
pub const TAG_TYPE: u8 = 0x03;
pub const TAG_OTHER: u8 = 0xFF;

/// Upper bound on every 16-bit counted list and string.
pub const MAX_LIST: usize = u16::MAX as usize;
/// The source-search query counts its file IDs in a single byte.
pub const MAX_SOURCE_QUERY_FILES: usize = u8::MAX as usize;

/// 128-bit file hash. Content is opaque: forged values are as valid as real ones.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct FileId(pub [u8; 16]);

impl FileId {
    pub fn to_hex(&self) -> String {
        let mut s = String::with_capacity(32);
        for b in self.0 {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() != 32 || !s.is_ascii() {
            return None;
        }
        let mut out = [0u8; 16];
        for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
            let pair = std::str::from_utf8(chunk).ok()?;
            out[i] = u8::from_str_radix(pair, 16).ok()?;
        }
        Some(Self(out))
    }
}

impl fmt::Debug for FileId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FileId({})", self.to_hex())
    }
}

/// 32-bit client identifier: an IPv4 address for directly reachable
/// clients, a 24-bit number ("low ID") otherwise.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Default)]
pub struct ClientId(pub u32);

impl ClientId {
    pub const LOW_ID_LIMIT: u32 = 1 << 24;

    pub fn is_low_id(self) -> bool {
        self.0 < Self::LOW_ID_LIMIT
    }
}

/// File metadata attached to search results, announces and search filters.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum MetaTag {
    Name(Vec<u8>),
    /// Size in bytes.
    Size(u32),
    Type(Vec<u8>),
    Other(u8, Vec<u8>),
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ServerAddr {
    pub ip: u32,
    pub port: u16,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct FileEntry {
    pub file: FileId,
    pub tags: Vec<MetaTag>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Source {
    pub client: ClientId,
    pub port: u16,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum EdonkeyMessage {
    ServerListQuery,
    ServerListAnswer { servers: Vec<ServerAddr> },
    ServerStatus { users: u32, files: u32, description: Vec<u8> },
    FileSearchQuery { pattern: Vec<u8>, filters: Vec<MetaTag> },
    FileSearchAnswer { results: Vec<FileEntry> },
    SourceSearchQuery { files: Vec<FileId> },
    SourceSearchAnswer { file: FileId, sources: Vec<Source> },
    Announce { client: ClientId, port: u16, files: Vec<FileEntry> },
}

/// The four protocol families.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum Family {
    Management,
    FileSearch,
    SourceSearch,
    Announce,
}

/// Discriminant of [`EdonkeyMessage`], usable as a counter key.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash, PartialOrd, Ord)]
pub enum MessageKind {
    ServerListQuery,
    ServerListAnswer,
    ServerStatus,
    FileSearchQuery,
    FileSearchAnswer,
    SourceSearchQuery,
    SourceSearchAnswer,
    Announce,
}

impl MessageKind {
    pub const ALL: [MessageKind; 8] = [
        MessageKind::ServerListQuery,
        MessageKind::ServerListAnswer,
        MessageKind::ServerStatus,
        MessageKind::FileSearchQuery,
        MessageKind::FileSearchAnswer,
        MessageKind::SourceSearchQuery,
        MessageKind::SourceSearchAnswer,
        MessageKind::Announce,
    ];

    pub fn opcode(self) -> u8 {
        match self {
            MessageKind::ServerListQuery => OP_SERVER_LIST_QUERY,
            MessageKind::ServerListAnswer => OP_SERVER_LIST_ANSWER,
            MessageKind::ServerStatus => OP_SERVER_STATUS,
            MessageKind::FileSearchQuery => OP_FILE_SEARCH_QUERY,
            MessageKind::FileSearchAnswer => OP_FILE_SEARCH_ANSWER,
            MessageKind::SourceSearchQuery => OP_SOURCE_SEARCH_QUERY,
            MessageKind::SourceSearchAnswer => OP_SOURCE_SEARCH_ANSWER,
            MessageKind::Announce => OP_ANNOUNCE,
        }
    }

    pub fn from_opcode(op: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.opcode() == op)
    }

    pub fn family(self) -> Family {
        match self {
            MessageKind::ServerListQuery
            | MessageKind::ServerListAnswer
            | MessageKind::ServerStatus => Family::Management,
            MessageKind::FileSearchQuery | MessageKind::FileSearchAnswer => Family::FileSearch,
            MessageKind::SourceSearchQuery | MessageKind::SourceSearchAnswer => {
                Family::SourceSearch
            }
            MessageKind::Announce => Family::Announce,
        }
    }

    /// Stable lowercase name, used as the XML `type` attribute.
    pub fn name(self) -> &'static str {
        match self {
            MessageKind::ServerListQuery => "server-list-query",
            MessageKind::ServerListAnswer => "server-list-answer",
            MessageKind::ServerStatus => "server-status",
            MessageKind::FileSearchQuery => "file-search-query",
            MessageKind::FileSearchAnswer => "file-search-answer",
            MessageKind::SourceSearchQuery => "source-search-query",
            MessageKind::SourceSearchAnswer => "source-search-answer",
            MessageKind::Announce => "announce",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl EdonkeyMessage {
    pub fn kind(&self) -> MessageKind {
        match self {
            EdonkeyMessage::ServerListQuery => MessageKind::ServerListQuery,
            EdonkeyMessage::ServerListAnswer { .. } => MessageKind::ServerListAnswer,
            EdonkeyMessage::ServerStatus { .. } => MessageKind::ServerStatus,
            EdonkeyMessage::FileSearchQuery { .. } => MessageKind::FileSearchQuery,
            EdonkeyMessage::FileSearchAnswer { .. } => MessageKind::FileSearchAnswer,
            EdonkeyMessage::SourceSearchQuery { .. } => MessageKind::SourceSearchQuery,
            EdonkeyMessage::SourceSearchAnswer { .. } => MessageKind::SourceSearchAnswer,
            EdonkeyMessage::Announce { .. } => MessageKind::Announce,
        }
    }

    pub fn opcode(&self) -> u8 {
        self.kind().opcode()
    }
}

/// Why a payload could not be decoded. Exactly one kind per failure.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash, Error)]
pub enum DecodeError {
    #[error("first byte is not the eDonkey magic 0xE3")]
    BadMagic,
    #[error("unknown opcode")]
    UnknownOpcode,
    #[error("declared lengths do not match the payload")]
    StructurallyInvalid,
    #[error("well-formed message followed by unconsumed bytes")]
    TrailingBytes,
}

impl DecodeError {
    pub const ALL: [DecodeError; 4] = [
        DecodeError::BadMagic,
        DecodeError::UnknownOpcode,
        DecodeError::StructurallyInvalid,
        DecodeError::TrailingBytes,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            DecodeError::BadMagic => "bad_magic",
            DecodeError::UnknownOpcode => "unknown_opcode",
            DecodeError::StructurallyInvalid => "structurally_invalid",
            DecodeError::TrailingBytes => "trailing_bytes",
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Error)]
pub enum EncodeError {
    #[error("{what} has {len} entries, limit is {max}")]
    ListTooLong {
        what: &'static str,
        len: usize,
        max: usize,
    },
    #[error("string of {0} bytes exceeds the 16-bit length prefix")]
    StringTooLong(usize),
    #[error("announced file {0:?} lacks a name or size tag")]
    MissingAnnounceTag(FileId),
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8], pos: usize) -> Self {
        Self { buf, pos }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(DecodeError::StructurallyInvalid)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn file_id(&mut self) -> Result<FileId, DecodeError> {
        let mut id = [0u8; 16];
        id.copy_from_slice(self.take(16)?);
        Ok(FileId(id))
    }

    fn string(&mut self) -> Result<&'a [u8], DecodeError> {
        let len = self.u16()? as usize;
        self.take(len)
    }

    fn finish(&self) -> Result<(), DecodeError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(DecodeError::TrailingBytes)
        }
    }
}

// ---------------------------------------------------------------------------
// Step one: structural validation
// ---------------------------------------------------------------------------

/// Returns `(has_name, has_size)` for the skipped tag list.
fn skip_tags(c: &mut Cursor<'_>) -> Result<(bool, bool), DecodeError> {
    let count = c.u16()?;
    let (mut name, mut size) = (false, false);
    for _ in 0..count {
        match c.u8()? {
            TAG_NAME => {
                c.string()?;
                name = true;
            }
            TAG_SIZE => {
                c.take(4)?;
                size = true;
            }
            TAG_TYPE => {
                c.string()?;
            }
            TAG_OTHER => {
                c.take(1)?;
                c.string()?;
            }
            _ => return Err(DecodeError::StructurallyInvalid),
        }
    }
    Ok((name, size))
}

/// Checks magic, opcode and every declared length against the payload.
///
/// Tag kind bytes count as structure: they decide how many bytes follow,
/// and an announced file without both a name and a size tag does not have
/// the announce layout.
pub fn validate_structure(payload: &[u8]) -> Result<u8, DecodeError> {
    match payload.first() {
        None => return Err(DecodeError::StructurallyInvalid),
        Some(&b) if b != MAGIC => return Err(DecodeError::BadMagic),
        _ => {}
    }
    let opcode = *payload.get(1).ok_or(DecodeError::StructurallyInvalid)?;
    let kind = MessageKind::from_opcode(opcode).ok_or(DecodeError::UnknownOpcode)?;
    let mut c = Cursor::new(payload, 2);
    match kind {
        MessageKind::ServerListQuery => {}
        MessageKind::ServerListAnswer => {
            let n = c.u16()? as usize;
            c.take(n * 6)?;
        }
        MessageKind::ServerStatus => {
            c.take(8)?;
            c.string()?;
        }
        MessageKind::FileSearchQuery => {
            c.string()?;
            skip_tags(&mut c)?;
        }
        MessageKind::FileSearchAnswer => {
            for _ in 0..c.u16()? {
                c.take(16)?;
                skip_tags(&mut c)?;
            }
        }
        MessageKind::SourceSearchQuery => {
            let n = c.u8()? as usize;
            c.take(n * 16)?;
        }
        MessageKind::SourceSearchAnswer => {
            c.take(16)?;
            let n = c.u16()? as usize;
            c.take(n * 6)?;
        }
        MessageKind::Announce => {
            c.take(6)?;
            for _ in 0..c.u16()? {
                c.take(16)?;
                if skip_tags(&mut c)? != (true, true) {
                    return Err(DecodeError::StructurallyInvalid);
                }
            }
        }
    }
    c.finish()?;
    Ok(opcode)
}

// ---------------------------------------------------------------------------
// Step two: effective decoding
// ---------------------------------------------------------------------------

fn read_tags(c: &mut Cursor<'_>) -> Result<Vec<MetaTag>, DecodeError> {
    let count = c.u16()? as usize;
    let mut tags = Vec::with_capacity(count);
    for _ in 0..count {
        let tag = match c.u8()? {
            TAG_NAME => MetaTag::Name(c.string()?.to_vec()),
            TAG_SIZE => MetaTag::Size(c.u32()?),
            TAG_TYPE => MetaTag::Type(c.string()?.to_vec()),
            TAG_OTHER => {
                let code = c.u8()?;
                MetaTag::Other(code, c.string()?.to_vec())
            }
            _ => return Err(DecodeError::StructurallyInvalid),
        };
        tags.push(tag);
    }
    Ok(tags)
}

fn read_entries(c: &mut Cursor<'_>) -> Result<Vec<FileEntry>, DecodeError> {
    let count = c.u16()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let file = c.file_id()?;
        let tags = read_tags(c)?;
        entries.push(FileEntry { file, tags });
    }
    Ok(entries)
}

fn read_endpoint(c: &mut Cursor<'_>) -> Result<(u32, u16), DecodeError> {
    Ok((c.u32()?, c.u16()?))
}

/// Validates, then decodes one datagram payload.
pub fn decode_message(payload: &[u8]) -> Result<EdonkeyMessage, DecodeError> {
    let opcode = validate_structure(payload)?;
    let kind = MessageKind::from_opcode(opcode).ok_or(DecodeError::UnknownOpcode)?;
    let mut c = Cursor::new(payload, 2);
    let msg = match kind {
        MessageKind::ServerListQuery => EdonkeyMessage::ServerListQuery,
        MessageKind::ServerListAnswer => {
            let n = c.u16()? as usize;
            let mut servers = Vec::with_capacity(n);
            for _ in 0..n {
                let (ip, port) = read_endpoint(&mut c)?;
                servers.push(ServerAddr { ip, port });
            }
            EdonkeyMessage::ServerListAnswer { servers }
        }
        MessageKind::ServerStatus => EdonkeyMessage::ServerStatus {
            users: c.u32()?,
            files: c.u32()?,
            description: c.string()?.to_vec(),
        },
        MessageKind::FileSearchQuery => EdonkeyMessage::FileSearchQuery {
            pattern: c.string()?.to_vec(),
            filters: read_tags(&mut c)?,
        },
        MessageKind::FileSearchAnswer => EdonkeyMessage::FileSearchAnswer {
            results: read_entries(&mut c)?,
        },
        MessageKind::SourceSearchQuery => {
            let n = c.u8()? as usize;
            let files = (0..n).map(|_| c.file_id()).collect::<Result<_, _>>()?;
            EdonkeyMessage::SourceSearchQuery { files }
        }
        MessageKind::SourceSearchAnswer => {
            let file = c.file_id()?;
            let n = c.u16()? as usize;
            let mut sources = Vec::with_capacity(n);
            for _ in 0..n {
                let (ip, port) = read_endpoint(&mut c)?;
                sources.push(Source {
                    client: ClientId(ip),
                    port,
                });
            }
            EdonkeyMessage::SourceSearchAnswer { file, sources }
        }
        MessageKind::Announce => {
            let (client, port) = read_endpoint(&mut c)?;
            EdonkeyMessage::Announce {
                client: ClientId(client),
                port,
                files: read_entries(&mut c)?,
            }
        }
    };
    c.finish()?;
    Ok(msg)
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

fn check_len(what: &'static str, len: usize, max: usize) -> Result<(), EncodeError> {
    if len > max {
        Err(EncodeError::ListTooLong { what, len, max })
    } else {
        Ok(())
    }
}

fn put_string(out: &mut Vec<u8>, s: &[u8]) -> Result<(), EncodeError> {
    if s.len() > MAX_LIST {
        return Err(EncodeError::StringTooLong(s.len()));
    }
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s);
    Ok(())
}

fn put_tags(out: &mut Vec<u8>, tags: &[MetaTag]) -> Result<(), EncodeError> {
    check_len("tag list", tags.len(), MAX_LIST)?;
    out.extend_from_slice(&(tags.len() as u16).to_le_bytes());
    for tag in tags {
        match tag {
            MetaTag::Name(s) => {
                out.push(TAG_NAME);
                put_string(out, s)?;
            }
            MetaTag::Size(n) => {
                out.push(TAG_SIZE);
                out.extend_from_slice(&n.to_le_bytes());
            }
            MetaTag::Type(s) => {
                out.push(TAG_TYPE);
                put_string(out, s)?;
            }
            MetaTag::Other(code, s) => {
                out.push(TAG_OTHER);
                out.push(*code);
                put_string(out, s)?;
            }
        }
    }
    Ok(())
}

fn put_entries(out: &mut Vec<u8>, entries: &[FileEntry], announce: bool) -> Result<(), EncodeError> {
    check_len("file list", entries.len(), MAX_LIST)?;
    out.extend_from_slice(&(entries.len() as u16).to_le_bytes());
    for e in entries {
        if announce {
            let name = e.tags.iter().any(|t| matches!(t, MetaTag::Name(_)));
            let size = e.tags.iter().any(|t| matches!(t, MetaTag::Size(_)));
            if !(name && size) {
                return Err(EncodeError::MissingAnnounceTag(e.file));
            }
        }
        out.extend_from_slice(&e.file.0);
        put_tags(out, &e.tags)?;
    }
    Ok(())
}

fn put_endpoint(out: &mut Vec<u8>, ip: u32, port: u16) {
    out.extend_from_slice(&ip.to_le_bytes());
    out.extend_from_slice(&port.to_le_bytes());
}

pub fn encode_message(msg: &EdonkeyMessage) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::with_capacity(64);
    out.push(MAGIC);
    out.push(msg.opcode());
    match msg {
        EdonkeyMessage::ServerListQuery => {}
        EdonkeyMessage::ServerListAnswer { servers } => {
            check_len("server list", servers.len(), MAX_LIST)?;
            out.extend_from_slice(&(servers.len() as u16).to_le_bytes());
            for s in servers {
                put_endpoint(&mut out, s.ip, s.port);
            }
        }
        EdonkeyMessage::ServerStatus {
            users,
            files,
            description,
        } => {
            out.extend_from_slice(&users.to_le_bytes());
            out.extend_from_slice(&files.to_le_bytes());
            put_string(&mut out, description)?;
        }
        EdonkeyMessage::FileSearchQuery { pattern, filters } => {
            put_string(&mut out, pattern)?;
            put_tags(&mut out, filters)?;
        }
        EdonkeyMessage::FileSearchAnswer { results } => {
            put_entries(&mut out, results, false)?;
        }
        EdonkeyMessage::SourceSearchQuery { files } => {
            check_len("source query", files.len(), MAX_SOURCE_QUERY_FILES)?;
            out.push(files.len() as u8);
            for f in files {
                out.extend_from_slice(&f.0);
            }
        }
        EdonkeyMessage::SourceSearchAnswer { file, sources } => {
            out.extend_from_slice(&file.0);
            check_len("source list", sources.len(), MAX_LIST)?;
            out.extend_from_slice(&(sources.len() as u16).to_le_bytes());
            for s in sources {
                put_endpoint(&mut out, s.client.0, s.port);
            }
        }
        EdonkeyMessage::Announce {
            client,
            port,
            files,
        } => {
            put_endpoint(&mut out, client.0, *port);
            put_entries(&mut out, files, true)?;
        }
    }
    Ok(out)
}
