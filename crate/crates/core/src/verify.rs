//! Checks a pipeline run against the generator's ground truth.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use aho_corasick::AhoCorasick;
use serde::Serialize;

use crate::anonymize::{ClientTable, FileTable};
use crate::generate::{drops_path, read_truth, truth_path, GroundTruth, Secret};
use crate::ingest::read_drop_sidecar;
use crate::pipeline::{analyze_stream, open_input, RunReport, CLIENT_SNAPSHOT, FILE_SNAPSHOT, LOSSES, RUN_REPORT};
use crate::wire::{ClientId, DecodeError, MessageKind};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum Status {
    Pass,
    Fail(String),
    /// An artifact the check needs is absent or unreadable.
    Missing(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub status: Status,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Verdict {
    pub checks: Vec<Check>,
}

impl Verdict {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status == Status::Pass)
    }

    pub fn status(&self, name: &str) -> Option<&Status> {
        self.checks.iter().find(|c| c.name == name).map(|c| &c.status)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            match &c.status {
                Status::Pass => writeln!(f, "PASS    {}", c.name)?,
                Status::Fail(why) => writeln!(f, "FAIL    {}: {why}", c.name)?,
                Status::Missing(what) => writeln!(f, "MISSING {}: {what}", c.name)?,
            }
        }
        Ok(())
    }
}

/// Where a run left its artifacts. The sidecars sit next to the capture.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub pcap: PathBuf,
    pub trace: PathBuf,
    pub reports: PathBuf,
}

pub const CHECKS: [&str; 5] = ["decode-counts", "tables", "distributions", "leaks", "losses"];

type CheckResult = Result<(), Status>;

fn fail(msg: String) -> Status {
    Status::Fail(msg)
}

fn need(path: &Path) -> Result<PathBuf, Status> {
    if path.is_file() {
        Ok(path.to_path_buf())
    } else {
        Err(Status::Missing(path.display().to_string()))
    }
}

fn expect_eq<T: PartialEq + fmt::Debug>(what: &str, got: T, want: T) -> CheckResult {
    if got == want {
        Ok(())
    } else {
        Err(fail(format!("{what}: got {got:?}, expected {want:?}")))
    }
}

fn read_run(reports: &Path) -> Result<RunReport, Status> {
    let path = need(&reports.join(RUN_REPORT))?;
    let text = fs::read_to_string(&path).map_err(|e| Status::Missing(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| fail(format!("{}: {e}", path.display())))
}

fn check_decode(run: &RunReport, t: &GroundTruth) -> CheckResult {
    let e = &t.expected;
    expect_eq("decoded messages", run.decoded, e.messages)?;
    expect_eq("undecoded datagrams", run.undecoded, e.undecoded)?;
    for err in DecodeError::ALL {
        expect_eq(err.name(), run.undecoded_of(err), e.undecoded_by_error[err.index()])?;
    }
    expect_eq("datagrams", run.ingest.emitted, e.datagrams)?;
    expect_eq("pcap records", run.ingest.packets_seen, e.frames)?;
    expect_eq("fragments", run.ingest.fragments, e.fragment_frames)?;
    expect_eq("reassembled datagrams", run.ingest.reassembled, e.fragmented)?;
    expect_eq("malformed packets", run.ingest.not_well_formed(), 0)?;
    expect_eq("accounting balance", run.ingest.balanced(), true)
}

fn check_tables(reports: &Path, t: &GroundTruth) -> CheckResult {
    let open = |name: &str| -> Result<BufReader<File>, Status> {
        let p = need(&reports.join(name))?;
        File::open(&p)
            .map(BufReader::new)
            .map_err(|e| Status::Missing(format!("{}: {e}", p.display())))
    };
    let clients = ClientTable::read_snapshot(open(CLIENT_SNAPSHOT)?).map_err(|e| fail(e.to_string()))?;
    let files = FileTable::read_snapshot(open(FILE_SNAPSHOT)?).map_err(|e| fail(e.to_string()))?;
    let want: Vec<(ClientId, u32)> = t.clients.iter().map(|&(ip, c)| (ClientId(ip), c)).collect();
    let got = clients.assignments();
    if got != want {
        let first = got.iter().zip(&want).position(|(a, b)| a != b).unwrap_or(got.len().min(want.len()));
        return Err(fail(format!(
            "client table differs at index {first} ({} assigned, {} expected)",
            got.len(),
            want.len()
        )));
    }
    let got = files.assignments();
    if got != t.files {
        let first = got.iter().zip(&t.files).position(|(a, b)| a != b).unwrap_or(got.len().min(t.files.len()));
        return Err(fail(format!(
            "file table differs at index {first} ({} assigned, {} expected)",
            got.len(),
            t.files.len()
        )));
    }
    expect_eq("clients outside the dense table", clients.overflow_len(), 0)
}

fn check_distributions(trace: &Path, t: &GroundTruth) -> CheckResult {
    let input = open_input(&need(trace)?).map_err(|e| Status::Missing(e.to_string()))?;
    let (a, err) = analyze_stream(input);
    if let Some(e) = err {
        return Err(fail(format!("trace unreadable: {e}")));
    }
    let e = &t.expected;
    for (got, want) in a.reports().iter().zip(&e.distributions) {
        if got != want {
            return Err(fail(format!(
                "{} differs: {} points vs {} expected",
                want.kind.name(),
                got.points.len(),
                want.points.len()
            )));
        }
    }
    expect_eq("report count", a.reports().len(), e.distributions.len())?;
    let s = a.summary();
    expect_eq("messages", s.messages, e.messages)?;
    expect_eq("distinct clients", s.distinct_clients, e.distinct_clients)?;
    expect_eq("distinct files", s.distinct_files, e.distinct_files)?;
    expect_eq("span (µs)", s.span_micros, e.span_micros)?;
    expect_eq("file searches", s.file_search_queries, e.file_search_queries)?;
    for k in MessageKind::ALL {
        expect_eq(k.name(), s.by_type[k.index()], e.by_type[k.index()])?;
    }
    Ok(())
}

/// Byte offsets and labels of every secret found in a trace.
///
/// Secrets made only of ASCII letters and digits (decimal addresses, hex
/// fileIDs) count only as whole tokens: a 7-digit address is bound to turn
/// up somewhere inside the MD5 digests of a large trace. The scan is per
/// line; no secret contains a newline.
pub fn scan_for_secrets<R: Read>(input: R, secrets: &[Secret]) -> std::io::Result<Vec<(u64, String)>> {
    let live: Vec<&Secret> = secrets.iter().filter(|s| !s.bytes.is_empty()).collect();
    if live.is_empty() {
        return Ok(Vec::new());
    }
    let ac = AhoCorasick::new(live.iter().map(|s| &s.bytes)).map_err(std::io::Error::other)?;
    let token: Vec<bool> = live.iter().map(|s| s.bytes.iter().all(u8::is_ascii_alphanumeric)).collect();
    let mut input = BufReader::with_capacity(1 << 20, input);
    let mut line = Vec::with_capacity(1024);
    let mut offset = 0u64;
    let mut hits = Vec::new();
    loop {
        line.clear();
        if input.read_until(b'\n', &mut line)? == 0 {
            return Ok(hits);
        }
        for m in ac.find_overlapping_iter(&line[..]) {
            let p = m.pattern().as_usize();
            let glued = |i: Option<usize>| i.and_then(|i| line.get(i)).is_some_and(u8::is_ascii_alphanumeric);
            if token[p] && (glued(m.start().checked_sub(1)) || glued(Some(m.end()))) {
                continue;
            }
            hits.push((offset + m.start() as u64, live[p].label.clone()));
        }
        offset += line.len() as u64;
    }
}

fn check_leaks(trace: &Path, t: &GroundTruth) -> CheckResult {
    if t.secrets.is_empty() {
        return Err(fail("ground truth lists no secrets to scan for".into()));
    }
    let input = open_input(&need(trace)?).map_err(|e| Status::Missing(e.to_string()))?;
    let hits = scan_for_secrets(input, &t.secrets).map_err(|e| fail(format!("scan failed: {e}")))?;
    match hits.first() {
        None => Ok(()),
        Some((at, label)) => Err(fail(format!("{} secret patterns found; first a {label} at byte {at}", hits.len()))),
    }
}

fn check_losses(a: &Artifacts, run: &RunReport, t: &GroundTruth) -> CheckResult {
    let drops = need(&drops_path(&a.pcap))?;
    let records = read_drop_sidecar(&drops).map_err(|e| fail(e.to_string()))?;
    let sidecar_total: u64 = records.iter().map(|d| d.drops).sum();
    expect_eq("drop sidecar total", sidecar_total, t.expected.drops_total)?;
    expect_eq("run loss total", run.losses_total, t.expected.drops_total)?;
    let curve = need(&a.reports.join(LOSSES))?;
    let text = fs::read_to_string(&curve).map_err(|e| Status::Missing(e.to_string()))?;
    let last = text
        .lines()
        .skip(1)
        .last()
        .map(|l| l.rsplit('\t').next().and_then(|c| c.parse::<u64>().ok()))
        .unwrap_or(Some(0))
        .ok_or_else(|| fail("unparseable loss curve".into()))?;
    expect_eq("cumulative loss at end of curve", last, t.expected.drops_total)
}

pub fn verify_pipeline(a: &Artifacts) -> Verdict {
    let truth = need(&truth_path(&a.pcap)).and_then(|p| read_truth(&p).map_err(|e| fail(e.to_string())));
    let truth = match truth {
        Ok(t) => t,
        Err(status) => {
            return Verdict {
                checks: CHECKS.iter().map(|&name| Check { name, status: status.clone() }).collect(),
            }
        }
    };
    let run = read_run(&a.reports);
    let results: [CheckResult; 5] = [
        run.as_ref().map_err(Clone::clone).and_then(|r| check_decode(r, &truth)),
        check_tables(&a.reports, &truth),
        check_distributions(&a.trace, &truth),
        check_leaks(&a.trace, &truth),
        run.as_ref().map_err(Clone::clone).and_then(|r| check_losses(a, r, &truth)),
    ];
    Verdict {
        checks: CHECKS
            .iter()
            .zip(results)
            .map(|(&name, r)| Check {
                name,
                status: r.err().unwrap_or(Status::Pass),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::{generate_to_files, WorkloadConfig};
    use crate::pipeline::{cmd_run, RunConfig};

    fn setup(dir: &Path, seed: u64) -> Artifacts {
        let pcap = dir.join("w.pcap");
        let cfg = WorkloadConfig {
            seed,
            num_clients: 120,
            num_files: 300,
            total_messages: 3_000,
            ..WorkloadConfig::default()
        };
        generate_to_files(&cfg, &pcap).unwrap();
        let a = Artifacts {
            pcap: pcap.clone(),
            trace: dir.join("t.xml"),
            reports: dir.join("r"),
        };
        cmd_run(&RunConfig {
            input: pcap,
            trace_out: a.trace.clone(),
            reports: Some(a.reports.clone()),
            ..RunConfig::default()
        })
        .unwrap();
        a
    }

    #[test]
    fn clean_workload_passes() {
        let dir = tempfile::tempdir().unwrap();
        let v = verify_pipeline(&setup(dir.path(), 4));
        assert!(v.passed(), "{v}");
    }

    #[test]
    fn raw_content_in_the_trace_is_a_leak() {
        let dir = tempfile::tempdir().unwrap();
        let a = setup(dir.path(), 5);
        let truth = read_truth(&truth_path(&a.pcap)).unwrap();
        let name = truth.secrets.iter().find(|s| s.label == "filename").unwrap();
        let mut xml = fs::read(&a.trace).unwrap();
        let at = xml.len() - "</trace>\n".len();
        xml.splice(at..at, name.bytes.iter().copied());
        fs::write(&a.trace, xml).unwrap();
        let v = verify_pipeline(&a);
        assert!(matches!(v.status("leaks"), Some(Status::Fail(_))), "{v}");
    }

    #[test]
    fn numeric_secrets_only_match_whole_tokens() {
        let secrets = [Secret::new("ip-decimal", b"9397897".to_vec()), Secret::new("filename", b"Qz_ab".to_vec())];
        let trace = b"<tag value=\"7c9bcb4b3e18f68c452e7a7679397897\"/>\n<peer cid=\"9397897\"/>xQz_abx\n";
        let hits = scan_for_secrets(&trace[..], &secrets).unwrap();
        assert_eq!(hits, vec![(59, "ip-decimal".to_string()), (70, "filename".to_string())]);
    }

    #[test]
    fn missing_artifacts_are_reported_as_such() {
        let dir = tempfile::tempdir().unwrap();
        let a = setup(dir.path(), 6);
        fs::remove_file(a.reports.join(FILE_SNAPSHOT)).unwrap();
        fs::remove_file(&a.trace).unwrap();
        let v = verify_pipeline(&a);
        assert_eq!(v.status("decode-counts"), Some(&Status::Pass));
        assert!(matches!(v.status("tables"), Some(Status::Missing(_))));
        assert!(matches!(v.status("leaks"), Some(Status::Missing(_))));
        fs::remove_file(truth_path(&a.pcap)).unwrap();
        let v = verify_pipeline(&a);
        assert!(v.checks.iter().all(|c| matches!(c.status, Status::Missing(_))));
    }
}
