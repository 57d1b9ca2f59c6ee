//! Line-oriented XML trace of anonymised messages.
//!
//! ```text
//! <?xml version="1.0" encoding="UTF-8"?>
//! <trace version="1">
//! <msg seq="0" t="0.000000" type="announce" dir="in"><peer cid="0" port="4662"/><client cid="0" port="4662"/><file fid="0"><tag kind="name" value="…"/><tag kind="size" value="3906"/></file></msg>
//! </trace>
//! ```
//!
//! One `<msg>` per line. `cid`/`fid` are anonymised integers, string tag
//! values are MD5 hex digests and size tags are kilobytes. A file without
//! the closing `</trace>` is truncated.
//!
//! Children by message type:
//!
//! | type                   | children                                             |
//! |------------------------|------------------------------------------------------|
//! | `server-list-query`    | none                                                 |
//! | `server-list-answer`   | `<server ip port/>`*                                 |
//! | `server-status`        | `<status users files desc/>`                         |
//! | `file-search-query`    | `<pattern value/>` then `<tag/>`*                    |
//! | `file-search-answer`   | `<result fid>` with `<tag/>`* children               |
//! | `source-search-query`  | `<file fid/>`*                                       |
//! | `source-search-answer` | `<file fid/>` then `<src cid port/>`*                |
//! | `announce`             | `<client cid port/>` then `<file fid>` with `<tag/>`* |
//!
//! Every type may start with a `<peer cid port/>` child naming the client
//! side of the datagram.

use std::fmt::Write as _;
use std::io::{self, BufRead, Write};
use std::net::Ipv4Addr;

use quick_xml::errors::{Error as XmlError, SyntaxError};
use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use thiserror::Error;

use crate::anonymize::{AnonBody, AnonEndpoint, AnonEntry, AnonMessage, AnonTag, StringDigest};
use crate::ingest::Direction;
use crate::wire::{MessageKind, ServerAddr};

pub const TRACE_VERSION: &str = "1";
const HEADER: &str = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<trace version=\"1\">\n";
const FOOTER: &str = "</trace>\n";

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct TraceEvent {
    pub seq: u64,
    pub message: AnonMessage,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed trace at byte {position}: {msg}")]
    Parse { position: u64, msg: String },
    #[error("trace is truncated; {recovered} complete events recovered")]
    Truncated { recovered: u64 },
    #[error("event seq {seq} does not follow {previous}")]
    OutOfOrder { seq: u64, previous: u64 },
}

// ---------------------------------------------------------------------------
// Writing
// ---------------------------------------------------------------------------

fn push_hex(buf: &mut String, bytes: &[u8]) {
    const HEX: &[u8; 16] = b"0123456789abcdef";
    for &b in bytes {
        buf.push(HEX[(b >> 4) as usize] as char);
        buf.push(HEX[(b & 0xF) as usize] as char);
    }
}

fn push_tag(buf: &mut String, tag: &AnonTag) {
    let (kind, digest) = match tag {
        AnonTag::Name(d) => ("name", d),
        AnonTag::Type(d) => ("type", d),
        AnonTag::Size(kb) => {
            let _ = write!(buf, "<tag kind=\"size\" value=\"{kb}\"/>");
            return;
        }
        AnonTag::Other(code, d) => {
            let _ = write!(buf, "<tag kind=\"other\" code=\"{code}\" value=\"");
            push_hex(buf, &d.0);
            buf.push_str("\"/>");
            return;
        }
    };
    let _ = write!(buf, "<tag kind=\"{kind}\" value=\"");
    push_hex(buf, &digest.0);
    buf.push_str("\"/>");
}

fn push_entries(buf: &mut String, element: &str, entries: &[AnonEntry]) {
    for e in entries {
        if e.tags.is_empty() {
            let _ = write!(buf, "<{element} fid=\"{}\"/>", e.file);
        } else {
            let _ = write!(buf, "<{element} fid=\"{}\">", e.file);
            for t in &e.tags {
                push_tag(buf, t);
            }
            let _ = write!(buf, "</{element}>");
        }
    }
}

fn push_endpoint(buf: &mut String, element: &str, e: &AnonEndpoint) {
    let _ = write!(buf, "<{element} cid=\"{}\" port=\"{}\"/>", e.client, e.port);
}

fn dir_name(d: Direction) -> &'static str {
    match d {
        Direction::ToServer => "in",
        Direction::FromServer => "out",
    }
}

/// Renders one event as a single line (without the newline).
pub fn format_event(buf: &mut String, ev: &TraceEvent) {
    let m = &ev.message;
    let _ = write!(
        buf,
        "<msg seq=\"{}\" t=\"{}.{:06}\" type=\"{}\" dir=\"{}\">",
        ev.seq,
        m.time / 1_000_000,
        m.time % 1_000_000,
        m.body.kind().name(),
        dir_name(m.direction)
    );
    if let Some(p) = &m.peer {
        push_endpoint(buf, "peer", p);
    }
    match &m.body {
        AnonBody::ServerListQuery => {}
        AnonBody::ServerListAnswer { servers } => {
            for s in servers {
                let _ = write!(buf, "<server ip=\"{}\" port=\"{}\"/>", Ipv4Addr::from(s.ip), s.port);
            }
        }
        AnonBody::ServerStatus {
            users,
            files,
            description,
        } => {
            let _ = write!(buf, "<status users=\"{users}\" files=\"{files}\" desc=\"");
            push_hex(buf, &description.0);
            buf.push_str("\"/>");
        }
        AnonBody::FileSearchQuery { pattern, filters } => {
            buf.push_str("<pattern value=\"");
            push_hex(buf, &pattern.0);
            buf.push_str("\"/>");
            for t in filters {
                push_tag(buf, t);
            }
        }
        AnonBody::FileSearchAnswer { results } => push_entries(buf, "result", results),
        AnonBody::SourceSearchQuery { files } => {
            for f in files {
                let _ = write!(buf, "<file fid=\"{f}\"/>");
            }
        }
        AnonBody::SourceSearchAnswer { file, sources } => {
            let _ = write!(buf, "<file fid=\"{file}\"/>");
            for s in sources {
                push_endpoint(buf, "src", s);
            }
        }
        AnonBody::Announce { client, files } => {
            push_endpoint(buf, "client", client);
            push_entries(buf, "file", files);
        }
    }
    buf.push_str("</msg>");
}

/// Streams events to a sink. Call [`TraceWriter::finish`] to close the root
/// element; a trace whose writer was dropped early stays recognisably truncated.
pub struct TraceWriter<W: Write> {
    out: W,
    line: String,
    written: u64,
    last_seq: Option<u64>,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W) -> io::Result<Self> {
        out.write_all(HEADER.as_bytes())?;
        Ok(Self {
            out,
            line: String::with_capacity(512),
            written: 0,
            last_seq: None,
        })
    }

    pub fn write_event(&mut self, ev: &TraceEvent) -> Result<(), TraceError> {
        if let Some(prev) = self.last_seq {
            if ev.seq <= prev {
                return Err(TraceError::OutOfOrder {
                    seq: ev.seq,
                    previous: prev,
                });
            }
        }
        self.line.clear();
        format_event(&mut self.line, ev);
        self.line.push('\n');
        self.out.write_all(self.line.as_bytes())?;
        self.last_seq = Some(ev.seq);
        self.written += 1;
        Ok(())
    }

    pub fn written(&self) -> u64 {
        self.written
    }

    pub fn finish(mut self) -> io::Result<W> {
        self.out.write_all(FOOTER.as_bytes())?;
        self.out.flush()?;
        Ok(self.out)
    }
}

pub fn write_trace<W, I>(events: I, out: W) -> Result<u64, TraceError>
where
    W: Write,
    I: IntoIterator<Item = TraceEvent>,
{
    let mut w = TraceWriter::new(out)?;
    for ev in events {
        w.write_event(&ev)?;
    }
    let n = w.written();
    w.finish()?;
    Ok(n)
}

// ---------------------------------------------------------------------------
// Reading
// ---------------------------------------------------------------------------

/// A child element of `<msg>`, with nested tags for `<file>`/`<result>`.
struct Child {
    name: Vec<u8>,
    attrs: Vec<(Vec<u8>, Vec<u8>)>,
    tags: Vec<AnonTag>,
    position: u64,
}

impl Child {
    fn attr(&self, key: &str) -> Result<&[u8], TraceError> {
        self.attrs
            .iter()
            .find(|(k, _)| k == key.as_bytes())
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| self.error(format!("<{}> lacks attribute {key}", self.name())))
    }

    fn name(&self) -> String {
        String::from_utf8_lossy(&self.name).into_owned()
    }

    fn error(&self, msg: String) -> TraceError {
        TraceError::Parse {
            position: self.position,
            msg,
        }
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T, TraceError> {
        let raw = self.attr(key)?;
        parse_decimal(raw).ok_or_else(|| self.error(format!("bad number in {key}")))
    }

    fn digest(&self, key: &str) -> Result<StringDigest, TraceError> {
        let raw = self.attr(key)?;
        std::str::from_utf8(raw)
            .ok()
            .and_then(StringDigest::from_hex)
            .filter(|_| raw.iter().all(|b| !b.is_ascii_uppercase()))
            .ok_or_else(|| self.error(format!("bad digest in {key}")))
    }

    fn endpoint(&self) -> Result<AnonEndpoint, TraceError> {
        Ok(AnonEndpoint {
            client: self.num("cid")?,
            port: self.num("port")?,
        })
    }

    fn entry(&self) -> Result<AnonEntry, TraceError> {
        Ok(AnonEntry {
            file: self.num("fid")?,
            tags: self.tags.clone(),
        })
    }

    fn is(&self, name: &str) -> bool {
        self.name == name.as_bytes()
    }
}

/// Canonical decimal: digits only, no leading zeros.
fn parse_decimal<T: std::str::FromStr>(raw: &[u8]) -> Option<T> {
    let canonical = !raw.is_empty()
        && raw.iter().all(u8::is_ascii_digit)
        && (raw.len() == 1 || raw[0] != b'0');
    if !canonical {
        return None;
    }
    std::str::from_utf8(raw).ok()?.parse().ok()
}

fn parse_time(raw: &[u8]) -> Option<u64> {
    let dot = raw.iter().position(|&b| b == b'.')?;
    let (secs, frac) = (&raw[..dot], &raw[dot + 1..]);
    if frac.len() != 6 || !frac.iter().all(u8::is_ascii_digit) {
        return None;
    }
    let secs: u64 = parse_decimal(secs)?;
    let micros: u64 = std::str::from_utf8(frac).ok()?.parse().ok()?;
    secs.checked_mul(1_000_000)?.checked_add(micros)
}

fn collect_attrs(e: &BytesStart<'_>, position: u64) -> Result<Vec<(Vec<u8>, Vec<u8>)>, TraceError> {
    e.attributes()
        .map(|a| {
            a.map(|a| (a.key.0.as_bytes().to_vec(), a.value.into_owned().into_bytes()))
                .map_err(|err| TraceError::Parse {
                    position,
                    msg: err.to_string(),
                })
        })
        .collect()
}

fn parse_tag(c: &Child) -> Result<AnonTag, TraceError> {
    let kind = c.attr("kind")?;
    Ok(match kind {
        b"name" => AnonTag::Name(c.digest("value")?),
        b"type" => AnonTag::Type(c.digest("value")?),
        b"size" => AnonTag::Size(c.num("value")?),
        b"other" => AnonTag::Other(c.num("code")?, c.digest("value")?),
        _ => return Err(c.error("unknown tag kind".into())),
    })
}

fn build_body(kind: MessageKind, children: &[Child], position: u64) -> Result<AnonBody, TraceError> {
    let err = |msg: &str| TraceError::Parse {
        position,
        msg: format!("{}: {msg}", kind.name()),
    };
    let only = |name: &str| -> Result<(), TraceError> {
        match children.iter().find(|c| !c.is(name)) {
            Some(c) => Err(c.error(format!("unexpected <{}> in {}", c.name(), kind.name()))),
            None => Ok(()),
        }
    };
    let body = match kind {
        MessageKind::ServerListQuery => {
            only("")?;
            AnonBody::ServerListQuery
        }
        MessageKind::ServerListAnswer => {
            only("server")?;
            let servers = children
                .iter()
                .map(|c| {
                    let ip: Ipv4Addr = std::str::from_utf8(c.attr("ip")?)
                        .ok()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| c.error("bad server ip".into()))?;
                    Ok(ServerAddr {
                        ip: ip.into(),
                        port: c.num("port")?,
                    })
                })
                .collect::<Result<_, TraceError>>()?;
            AnonBody::ServerListAnswer { servers }
        }
        MessageKind::ServerStatus => {
            only("status")?;
            let [c] = children else {
                return Err(err("expected exactly one <status>"));
            };
            AnonBody::ServerStatus {
                users: c.num("users")?,
                files: c.num("files")?,
                description: c.digest("desc")?,
            }
        }
        MessageKind::FileSearchQuery => {
            let (first, rest) = children.split_first().ok_or_else(|| err("missing <pattern>"))?;
            if !first.is("pattern") {
                return Err(first.error("expected <pattern> first".into()));
            }
            let filters = rest
                .iter()
                .map(|c| if c.is("tag") { parse_tag(c) } else { Err(c.error("expected <tag>".into())) })
                .collect::<Result<_, _>>()?;
            AnonBody::FileSearchQuery {
                pattern: first.digest("value")?,
                filters,
            }
        }
        MessageKind::FileSearchAnswer => {
            only("result")?;
            AnonBody::FileSearchAnswer {
                results: children.iter().map(Child::entry).collect::<Result<_, _>>()?,
            }
        }
        MessageKind::SourceSearchQuery => {
            only("file")?;
            AnonBody::SourceSearchQuery {
                files: children.iter().map(|c| c.num("fid")).collect::<Result<_, _>>()?,
            }
        }
        MessageKind::SourceSearchAnswer => {
            let (first, rest) = children.split_first().ok_or_else(|| err("missing <file>"))?;
            if !first.is("file") {
                return Err(first.error("expected <file> first".into()));
            }
            let sources = rest
                .iter()
                .map(|c| if c.is("src") { c.endpoint() } else { Err(c.error("expected <src>".into())) })
                .collect::<Result<_, _>>()?;
            AnonBody::SourceSearchAnswer {
                file: first.num("fid")?,
                sources,
            }
        }
        MessageKind::Announce => {
            let (first, rest) = children.split_first().ok_or_else(|| err("missing <client>"))?;
            if !first.is("client") {
                return Err(first.error("expected <client> first".into()));
            }
            let files = rest
                .iter()
                .map(|c| if c.is("file") { c.entry() } else { Err(c.error("expected <file>".into())) })
                .collect::<Result<_, _>>()?;
            AnonBody::Announce {
                client: first.endpoint()?,
                files,
            }
        }
    };
    Ok(body)
}

#[derive(PartialEq, Eq)]
enum State {
    Prolog,
    Body,
    Closed,
    Done,
}

/// Streaming trace parser; yields events until `</trace>` or the first error.
pub struct TraceReader<R: BufRead> {
    xml: Reader<R>,
    buf: Vec<u8>,
    state: State,
    recovered: u64,
    last_seq: Option<u64>,
}

pub fn read_trace<R: BufRead>(input: R) -> TraceReader<R> {
    TraceReader::new(input)
}

impl<R: BufRead> TraceReader<R> {
    pub fn new(input: R) -> Self {
        let mut xml = Reader::from_reader(input);
        let cfg = xml.config_mut();
        cfg.trim_text(true);
        cfg.check_end_names = true;
        Self {
            xml,
            buf: Vec::with_capacity(1024),
            state: State::Prolog,
            recovered: 0,
            last_seq: None,
        }
    }

    /// Events successfully returned so far.
    pub fn recovered(&self) -> u64 {
        self.recovered
    }

    fn parse_error(&self, msg: impl Into<String>) -> TraceError {
        TraceError::Parse {
            position: self.xml.buffer_position(),
            msg: msg.into(),
        }
    }

    fn map_xml(&self, e: XmlError) -> TraceError {
        match e {
            XmlError::Io(io) => TraceError::Io(io::Error::new(io.kind(), io.to_string())),
            XmlError::Syntax(
                SyntaxError::UnclosedTag
                | SyntaxError::UnclosedSingleQuotedAttributeValue
                | SyntaxError::UnclosedDoubleQuotedAttributeValue
                | SyntaxError::UnclosedComment
                | SyntaxError::UnclosedCData
                | SyntaxError::UnclosedPI
                | SyntaxError::UnclosedXmlDecl
                | SyntaxError::UnclosedDoctype
                | SyntaxError::InvalidBangMarkup,
            ) => TraceError::Truncated {
                recovered: self.recovered,
            },
            other => TraceError::Parse {
                position: self.xml.error_position(),
                msg: other.to_string(),
            },
        }
    }

    /// Next non-text event, converted into an owned start/end/eof marker.
    fn next_token(&mut self) -> Result<Token, TraceError> {
        loop {
            self.buf.clear();
            let position = self.xml.buffer_position();
            let ev = match self.xml.read_event_into(&mut self.buf) {
                Ok(ev) => ev,
                Err(e) => return Err(self.map_xml(e)),
            };
            return Ok(match ev {
                Event::Start(e) => Token::Start {
                    name: e.name().0.as_bytes().to_vec(),
                    attrs: collect_attrs(&e, position)?,
                    empty: false,
                    position,
                },
                Event::Empty(e) => Token::Start {
                    name: e.name().0.as_bytes().to_vec(),
                    attrs: collect_attrs(&e, position)?,
                    empty: true,
                    position,
                },
                Event::End(e) => Token::End(e.name().0.as_bytes().to_vec()),
                Event::Eof => Token::Eof,
                Event::Decl(_) | Event::Comment(_) => continue,
                Event::Text(t) if t.trim().is_empty() => continue,
                _ => return Err(self.parse_error("unexpected content")),
            });
        }
    }

    fn read_msg(
        &mut self,
        attrs: Vec<(Vec<u8>, Vec<u8>)>,
        empty: bool,
        position: u64,
    ) -> Result<TraceEvent, TraceError> {
        let head = Child {
            name: b"msg".to_vec(),
            attrs,
            tags: Vec::new(),
            position,
        };
        let seq: u64 = head.num("seq")?;
        let time = parse_time(head.attr("t")?).ok_or_else(|| head.error("bad time".into()))?;
        let kind = std::str::from_utf8(head.attr("type")?)
            .ok()
            .and_then(MessageKind::from_name)
            .ok_or_else(|| head.error("unknown message type".into()))?;
        let direction = match head.attr("dir")? {
            b"in" => Direction::ToServer,
            b"out" => Direction::FromServer,
            _ => return Err(head.error("bad dir".into())),
        };

        let mut children: Vec<Child> = Vec::new();
        let mut open_child = false;
        if !empty {
            loop {
                match self.next_token()? {
                    Token::Start {
                        name,
                        attrs,
                        empty,
                        position,
                    } => {
                        if name == b"tag" && open_child {
                            let tag = parse_tag(&Child {
                                name,
                                attrs,
                                tags: Vec::new(),
                                position,
                            })?;
                            children.last_mut().expect("open child").tags.push(tag);
                            continue;
                        }
                        if open_child {
                            return Err(TraceError::Parse {
                                position,
                                msg: "only <tag> may nest inside <file>/<result>".into(),
                            });
                        }
                        if !empty && name != b"file" && name != b"result" {
                            return Err(TraceError::Parse {
                                position,
                                msg: "unexpected nested content".into(),
                            });
                        }
                        open_child = !empty;
                        children.push(Child {
                            name,
                            attrs,
                            tags: Vec::new(),
                            position,
                        });
                    }
                    Token::End(name) if name == b"msg" => break,
                    Token::End(_) => open_child = false,
                    Token::Eof => {
                        return Err(TraceError::Truncated {
                            recovered: self.recovered,
                        })
                    }
                }
            }
        }

        let peer = match children.first() {
            Some(c) if c.is("peer") => Some(children.remove(0).endpoint()?),
            _ => None,
        };
        let body = build_body(kind, &children, position)?;
        if let Some(prev) = self.last_seq {
            if seq <= prev {
                return Err(TraceError::OutOfOrder { seq, previous: prev });
            }
        }
        self.last_seq = Some(seq);
        Ok(TraceEvent {
            seq,
            message: AnonMessage {
                time,
                direction,
                peer,
                body,
            },
        })
    }

    pub fn next_event(&mut self) -> Result<Option<TraceEvent>, TraceError> {
        loop {
            match self.state {
                State::Done => return Ok(None),
                State::Prolog => match self.next_token()? {
                    Token::Start {
                        name,
                        attrs,
                        empty,
                        position,
                    } if name == b"trace" => {
                        let root = Child {
                            name,
                            attrs,
                            tags: Vec::new(),
                            position,
                        };
                        if root.attr("version")? != TRACE_VERSION.as_bytes() {
                            return Err(root.error("unsupported trace version".into()));
                        }
                        self.state = if empty { State::Closed } else { State::Body };
                    }
                    Token::Eof => {
                        return Err(TraceError::Truncated {
                            recovered: self.recovered,
                        })
                    }
                    _ => return Err(self.parse_error("expected <trace>")),
                },
                State::Body => match self.next_token()? {
                    Token::Start {
                        name,
                        attrs,
                        empty,
                        position,
                    } if name == b"msg" => {
                        let ev = self.read_msg(attrs, empty, position)?;
                        self.recovered += 1;
                        return Ok(Some(ev));
                    }
                    Token::End(name) if name == b"trace" => self.state = State::Closed,
                    Token::Eof => {
                        return Err(TraceError::Truncated {
                            recovered: self.recovered,
                        })
                    }
                    _ => return Err(self.parse_error("expected <msg> or </trace>")),
                },
                State::Closed => match self.next_token()? {
                    Token::Eof => self.state = State::Done,
                    _ => return Err(self.parse_error("content after </trace>")),
                },
            }
        }
    }
}

enum Token {
    Start {
        name: Vec<u8>,
        attrs: Vec<(Vec<u8>, Vec<u8>)>,
        empty: bool,
        position: u64,
    },
    End(Vec<u8>),
    Eof,
}

impl<R: BufRead> Iterator for TraceReader<R> {
    type Item = Result<TraceEvent, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.next_event() {
            Ok(Some(ev)) => Some(Ok(ev)),
            Ok(None) => None,
            Err(e) => {
                self.state = State::Done;
                Some(Err(e))
            }
        }
    }
}
