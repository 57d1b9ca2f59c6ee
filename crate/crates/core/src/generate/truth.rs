//! Ground-truth sidecar: a line-oriented text file with `[section]` headers.
//!
//! ```text
//! [clients]     <dotted raw address> <anonymised id>
//! [files]       <raw fileID hex> <anonymised id>
//! [provides]    <cid> <fid> <fid> ...
//! [asks]        <cid> <fid> <fid> ...
//! [secrets]     <label> <hex of the raw byte pattern>
//! [expected]    <key> <value>  |  dist <report> <x>:<y> ...
//! ```

use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::net::Ipv4Addr;
use std::path::Path;

use super::GenerateError;
use crate::analyze::{DistributionReport, ReportKind};
use crate::wire::FileId;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Secret {
    pub label: String,
    pub bytes: Vec<u8>,
}

impl Secret {
    pub fn new(label: &str, bytes: Vec<u8>) -> Self {
        Self {
            label: label.to_string(),
            bytes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Expected {
    /// pcap records, fragments included.
    pub frames: u64,
    pub fragment_frames: u64,
    /// Datagrams sent as more than one fragment.
    pub fragmented: u64,
    pub datagrams: u64,
    /// Datagrams that decode.
    pub messages: u64,
    pub undecoded: u64,
    /// Indexed by `DecodeError::index`.
    pub undecoded_by_error: [u64; 4],
    pub drops_total: u64,
    pub distinct_clients: u64,
    pub distinct_files: u64,
    pub span_micros: u64,
    pub file_search_queries: u64,
    /// Indexed by `MessageKind::index`.
    pub by_type: [u64; 8],
    /// In `ReportKind::ALL` order.
    pub distributions: Vec<DistributionReport>,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct GroundTruth {
    /// `(raw address, anonymised id)` in id order.
    pub clients: Vec<(u32, u32)>,
    pub files: Vec<(FileId, u32)>,
    pub provides: Vec<(u32, Vec<u32>)>,
    pub asks: Vec<(u32, Vec<u32>)>,
    pub secrets: Vec<Secret>,
    pub expected: Expected,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}

fn write_sets<W: Write>(w: &mut W, sets: &[(u32, Vec<u32>)]) -> io::Result<()> {
    for (c, files) in sets {
        write!(w, "{c}")?;
        for f in files {
            write!(w, " {f}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn join(v: &[u64]) -> String {
    v.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
}

impl GroundTruth {
    pub fn write<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# edtrace ground truth v1")?;
        writeln!(w, "[clients]")?;
        for (ip, cid) in &self.clients {
            writeln!(w, "{} {cid}", Ipv4Addr::from(*ip))?;
        }
        writeln!(w, "[files]")?;
        for (f, fid) in &self.files {
            writeln!(w, "{} {fid}", f.to_hex())?;
        }
        writeln!(w, "[provides]")?;
        write_sets(&mut w, &self.provides)?;
        writeln!(w, "[asks]")?;
        write_sets(&mut w, &self.asks)?;
        writeln!(w, "[secrets]")?;
        for s in &self.secrets {
            writeln!(w, "{} {}", s.label, hex(&s.bytes))?;
        }
        let e = &self.expected;
        writeln!(w, "[expected]")?;
        for (k, v) in [
            ("frames", e.frames),
            ("fragment_frames", e.fragment_frames),
            ("fragmented", e.fragmented),
            ("datagrams", e.datagrams),
            ("messages", e.messages),
            ("undecoded", e.undecoded),
            ("drops_total", e.drops_total),
            ("distinct_clients", e.distinct_clients),
            ("distinct_files", e.distinct_files),
            ("span_micros", e.span_micros),
            ("file_search_queries", e.file_search_queries),
        ] {
            writeln!(w, "{k} {v}")?;
        }
        writeln!(w, "undecoded_by_error {}", join(&e.undecoded_by_error))?;
        writeln!(w, "by_type {}", join(&e.by_type))?;
        for d in &e.distributions {
            write!(w, "dist {}", d.kind.name())?;
            for (x, y) in &d.points {
                write!(w, " {x}:{y}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn parse_array<const N: usize>(s: &str) -> Option<[u64; N]> {
    let v: Vec<u64> = s.split(',').map(|x| x.parse().ok()).collect::<Option<_>>()?;
    v.try_into().ok()
}

pub fn parse_truth<R: BufRead>(input: R) -> Result<GroundTruth, GenerateError> {
    let mut t = GroundTruth::default();
    let mut section = String::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let bad = |msg: &str| GenerateError::Truth {
            line: i + 1,
            msg: msg.to_string(),
        };
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.to_string();
            continue;
        }
        let mut f = line.split(' ');
        let first = f.next().unwrap_or_default();
        let num = |s: Option<&str>| -> Result<u64, GenerateError> {
            s.and_then(|s| s.parse().ok()).ok_or_else(|| bad("expected a number"))
        };
        match section.as_str() {
            "clients" => {
                let ip: Ipv4Addr = first.parse().map_err(|_| bad("bad address"))?;
                t.clients.push((ip.into(), num(f.next())? as u32));
            }
            "files" => {
                let id = FileId::from_hex(first).ok_or_else(|| bad("bad fileID"))?;
                t.files.push((id, num(f.next())? as u32));
            }
            "provides" | "asks" => {
                let c = num(Some(first))? as u32;
                let files = f
                    .map(|x| x.parse::<u32>().map_err(|_| bad("bad file id")))
                    .collect::<Result<_, _>>()?;
                let target = if section == "provides" { &mut t.provides } else { &mut t.asks };
                target.push((c, files));
            }
            "secrets" => {
                let bytes = f.next().and_then(unhex).ok_or_else(|| bad("bad secret hex"))?;
                t.secrets.push(Secret::new(first, bytes));
            }
            "expected" => {
                let e = &mut t.expected;
                match first {
                    "dist" => {
                        let kind = f.next().and_then(ReportKind::from_name).ok_or_else(|| bad("bad report kind"))?;
                        let points = f
                            .map(|p| {
                                let (x, y) = p.split_once(':').ok_or_else(|| bad("bad point"))?;
                                Ok((num(Some(x))?, num(Some(y))?))
                            })
                            .collect::<Result<Vec<_>, GenerateError>>()?;
                        let total_entities = points.iter().map(|p| p.1).sum();
                        e.distributions.push(DistributionReport {
                            kind,
                            points,
                            total_entities,
                        });
                    }
                    "undecoded_by_error" => {
                        e.undecoded_by_error = f.next().and_then(parse_array).ok_or_else(|| bad("bad list"))?
                    }
                    "by_type" => e.by_type = f.next().and_then(parse_array).ok_or_else(|| bad("bad list"))?,
                    key => {
                        let v = num(f.next())?;
                        *match key {
                            "frames" => &mut e.frames,
                            "fragment_frames" => &mut e.fragment_frames,
                            "fragmented" => &mut e.fragmented,
                            "datagrams" => &mut e.datagrams,
                            "messages" => &mut e.messages,
                            "undecoded" => &mut e.undecoded,
                            "drops_total" => &mut e.drops_total,
                            "distinct_clients" => &mut e.distinct_clients,
                            "distinct_files" => &mut e.distinct_files,
                            "span_micros" => &mut e.span_micros,
                            "file_search_queries" => &mut e.file_search_queries,
                            _ => return Err(bad("unknown key")),
                        } = v;
                    }
                }
            }
            _ => return Err(bad("line outside a known section")),
        }
    }
    Ok(t)
}

pub fn read_truth(path: &Path) -> Result<GroundTruth, GenerateError> {
    parse_truth(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::{generate_workload, WorkloadConfig};

    #[test]
    fn sidecar_round_trip() {
        let cfg = WorkloadConfig {
            num_clients: 100,
            num_files: 300,
            total_messages: 2_000,
            ..WorkloadConfig::default()
        };
        let (truth, _) = generate_workload(&cfg, io::sink()).unwrap();
        let mut text = Vec::new();
        truth.write(&mut text).unwrap();
        assert_eq!(parse_truth(&text[..]).unwrap(), truth);
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_truth(&b"[clients]\nnot-an-ip 3\n"[..]).is_err());
        assert!(parse_truth(&b"stray line\n"[..]).is_err());
    }
}
