//! End-to-end runs: pcap → datagrams → messages → anonymised trace, and
//! trace → reports.
//!
//! Everything is streamed in capture order through one [`Anonymizer`].
//! Output files ending in `.gz` are gzip-compressed; compressed traces are
//! recognised on input by their magic bytes.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analyze::{
    find_peaks, fit_power_law, Analyzer, DistributionReport, PowerLawFit, ReportKind, Summary, DEFAULT_PEAK_WINDOW,
    DEFAULT_PROMINENCE,
};
use crate::anonymize::{AnonError, Anonymizer, ClientTable, FileTable, DEFAULT_CLIENT_BITS, DEFAULT_INDEX_BYTES};
use crate::generate::drops_path;
use crate::ingest::{
    cumulative_losses, loss_timeseries, read_drop_sidecar, DatagramReader, IngestError, IngestStats,
    DEFAULT_SERVER_PORT,
};
use crate::trace::{read_trace, TraceError, TraceEvent, TraceWriter};
use crate::wire::{decode_message, DecodeError, MessageKind};

pub const RUN_REPORT: &str = "run.json";
pub const LOSSES: &str = "losses.tsv";
pub const CLIENT_SNAPSHOT: &str = "clients.dktb";
pub const FILE_SNAPSHOT: &str = "files.dktb";
pub const SUMMARY: &str = "summary.json";
pub const FITS: &str = "fits.json";
pub const PEAKS: &str = "peaks.tsv";
pub const DEFAULT_LOSS_BUCKET_SECS: u64 = 60;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Open { path: PathBuf, source: io::Error },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Anon(#[from] AnonError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

impl PipelineError {
    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Anon(AnonError::ClientBits(_) | AnonError::IndexBytes(..)) => 2,
            _ => 1,
        }
    }
}

fn open(path: &Path) -> Result<File, PipelineError> {
    File::open(path).map_err(|source| PipelineError::Open {
        path: path.to_path_buf(),
        source,
    })
}

fn create(path: &Path) -> Result<File, PipelineError> {
    File::create(path).map_err(|source| PipelineError::Open {
        path: path.to_path_buf(),
        source,
    })
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

/// A buffered sink, gzip-compressed when the path ends in `.gz`.
pub fn create_output(path: &Path) -> Result<Box<dyn Write>, PipelineError> {
    let file = BufWriter::with_capacity(1 << 20, create(path)?);
    Ok(if is_gz(path) {
        Box::new(GzEncoder::new(file, Compression::default()))
    } else {
        Box::new(file)
    })
}

/// A buffered source, transparently gunzipped when it starts with the gzip magic.
pub fn open_input(path: &Path) -> Result<Box<dyn BufRead>, PipelineError> {
    let mut file = BufReader::with_capacity(1 << 20, open(path)?);
    let gz = file.fill_buf()?.starts_with(&[0x1F, 0x8B]);
    Ok(if gz {
        Box::new(BufReader::with_capacity(1 << 20, MultiGzDecoder::new(file)))
    } else {
        Box::new(file)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: PathBuf,
    pub server_port: u16,
    pub trace_out: PathBuf,
    pub index_bytes: (usize, usize),
    pub client_bits: u8,
    /// Defaults to `clients.dktb` in the report directory.
    pub client_snapshot: Option<PathBuf>,
    /// Defaults to `files.dktb` in the report directory.
    pub file_snapshot: Option<PathBuf>,
    /// Load the snapshots before the run instead of starting empty.
    pub resume: bool,
    pub reports: Option<PathBuf>,
    /// Defaults to `<input>.drops` when that file exists.
    pub drops: Option<PathBuf>,
    pub loss_bucket_secs: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: PathBuf::new(),
            server_port: DEFAULT_SERVER_PORT,
            trace_out: PathBuf::new(),
            index_bytes: DEFAULT_INDEX_BYTES,
            client_bits: DEFAULT_CLIENT_BITS,
            client_snapshot: None,
            file_snapshot: None,
            resume: false,
            reports: None,
            drops: None,
            loss_bucket_secs: DEFAULT_LOSS_BUCKET_SECS,
        }
    }
}

impl RunConfig {
    fn snapshot_paths(&self) -> (Option<PathBuf>, Option<PathBuf>) {
        let in_reports = |name: &str| self.reports.as_ref().map(|r| r.join(name));
        (
            self.client_snapshot.clone().or_else(|| in_reports(CLIENT_SNAPSHOT)),
            self.file_snapshot.clone().or_else(|| in_reports(FILE_SNAPSHOT)),
        )
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.input.as_os_str().is_empty() || self.trace_out.as_os_str().is_empty() {
            return Err(PipelineError::Config("both an input and an output path are required".into()));
        }
        if self.loss_bucket_secs == 0 {
            return Err(PipelineError::Config("loss bucket width must be positive".into()));
        }
        FileTable::new(self.index_bytes)?;
        if !(1..=32).contains(&self.client_bits) {
            return Err(AnonError::ClientBits(self.client_bits).into());
        }
        let (cs, fs) = self.snapshot_paths();
        let mut paths = vec![self.input.clone(), self.trace_out.clone()];
        paths.extend(cs);
        paths.extend(fs);
        if let Some(r) = &self.reports {
            paths.push(r.join(RUN_REPORT));
            paths.push(r.join(LOSSES));
        }
        for (i, a) in paths.iter().enumerate() {
            if paths[..i].contains(a) {
                return Err(PipelineError::Config(format!("path {} is used twice", a.display())));
            }
        }
        Ok(())
    }
}

/// What a run saw. Serialised as `run.json`; deterministic for a given input.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub ingest: IngestStats,
    pub decoded: u64,
    pub undecoded: u64,
    pub undecoded_percent: f64,
    pub undecoded_by_error: BTreeMap<String, u64>,
    pub by_type: BTreeMap<String, u64>,
    pub distinct_clients: u64,
    pub distinct_files: u64,
    /// Client IDs that did not fit the dense table.
    pub overflow_clients: u64,
    pub clamped_timestamps: u64,
    pub losses_total: u64,
}

impl RunReport {
    pub fn undecoded_of(&self, e: DecodeError) -> u64 {
        self.undecoded_by_error.get(e.name()).copied().unwrap_or(0)
    }
}

/// Streams one capture through decoding and anonymisation into a trace.
/// The anonymiser's origin is the first pcap record.
pub fn run_stream<R: Read, W: Write>(
    input: R,
    server_port: u16,
    anon: &mut Anonymizer,
    out: W,
) -> Result<(RunReport, W), PipelineError> {
    let mut reader = DatagramReader::new(input, server_port)?;
    let mut writer = TraceWriter::new(out)?;
    let mut undecoded = [0u64; 4];
    let mut by_type = [0u64; 8];
    let mut seq = 0u64;
    while let Some(d) = reader.next_datagram()? {
        if let Some(t0) = reader.stats().first_timestamp {
            anon.set_origin(t0);
        }
        match decode_message(&d.payload) {
            Ok(msg) => {
                by_type[msg.kind().index()] += 1;
                let message = anon.anonymize_datagram(&d, &msg);
                writer.write_event(&TraceEvent { seq, message })?;
                seq += 1;
            }
            Err(e) => undecoded[e.index()] += 1,
        }
    }
    let out = writer.finish()?;
    let ingest = reader.into_stats();
    let failed: u64 = undecoded.iter().sum();
    let attempted = seq + failed;
    let report = RunReport {
        ingest,
        decoded: seq,
        undecoded: failed,
        undecoded_percent: if attempted == 0 { 0.0 } else { 100.0 * failed as f64 / attempted as f64 },
        undecoded_by_error: DecodeError::ALL
            .iter()
            .map(|e| (e.name().to_string(), undecoded[e.index()]))
            .collect(),
        by_type: MessageKind::ALL
            .iter()
            .map(|k| (k.name().to_string(), by_type[k.index()]))
            .collect(),
        distinct_clients: anon.clients.len() as u64,
        distinct_files: anon.files.len() as u64,
        overflow_clients: anon.clients.overflow_len() as u64,
        clamped_timestamps: anon.clamped(),
        losses_total: 0,
    };
    Ok((report, out))
}

/// Runs the whole pcap-to-trace flow described by `cfg` and writes the
/// snapshots, `run.json` and `losses.tsv`.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunReport, PipelineError> {
    cfg.validate()?;
    let (client_snap, file_snap) = cfg.snapshot_paths();
    let mut anon = match (&client_snap, &file_snap) {
        (Some(c), Some(f)) if cfg.resume => {
            let clients = ClientTable::read_snapshot(BufReader::new(open(c)?))?;
            let files = FileTable::read_snapshot(BufReader::new(open(f)?))?;
            if files.index_bytes() != cfg.index_bytes || clients.bits() != cfg.client_bits {
                return Err(PipelineError::Config("snapshots were taken with different table settings".into()));
            }
            Anonymizer::new(clients, files)
        }
        _ if cfg.resume => return Err(PipelineError::Config("resume needs both snapshot paths".into())),
        _ => Anonymizer::new(ClientTable::new(cfg.client_bits)?, FileTable::new(cfg.index_bytes)?),
    };
    let input = BufReader::with_capacity(1 << 20, open(&cfg.input)?);
    if let Some(r) = &cfg.reports {
        fs::create_dir_all(r)?;
    }
    let out = create_output(&cfg.trace_out)?;
    let (mut report, mut out) = run_stream(input, cfg.server_port, &mut anon, out)?;
    out.flush()?;
    drop(out);

    let drops = match &cfg.drops {
        Some(p) => Some(p.clone()),
        None => Some(drops_path(&cfg.input)).filter(|p| p.exists()),
    };
    if let Some(p) = drops {
        report.ingest.drops_reported = read_drop_sidecar(&p)?;
    }
    report.losses_total = report.ingest.total_drops();

    if let Some(p) = &client_snap {
        let mut w = BufWriter::new(create(p)?);
        anon.clients.write_snapshot(&mut w)?;
    }
    if let Some(p) = &file_snap {
        let mut w = BufWriter::new(create(p)?);
        anon.files.write_snapshot(&mut w)?;
    }
    if let Some(dir) = &cfg.reports {
        let buckets = loss_timeseries(&report.ingest, cfg.loss_bucket_secs)?;
        let mut w = BufWriter::new(create(&dir.join(LOSSES))?);
        writeln!(w, "start_secs\tlosses\tcumulative")?;
        for (b, (_, cum)) in buckets.iter().zip(cumulative_losses(&buckets)) {
            writeln!(w, "{}\t{}\t{}", b.start, b.losses, cum)?;
        }
        w.flush()?;
        write_json(&dir.join(RUN_REPORT), &report)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeOptions {
    /// Inclusive x range for the power-law fits.
    pub fit_range: (u64, u64),
    pub peak_window: usize,
    pub prominence: f64,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            fit_range: (1, 100),
            peak_window: DEFAULT_PEAK_WINDOW,
            prominence: DEFAULT_PROMINENCE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitOutcome {
    pub kind: ReportKind,
    pub fit: Option<PowerLawFit>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnalyzeOutput {
    pub reports: Vec<DistributionReport>,
    pub summary: Summary,
    pub fits: Vec<FitOutcome>,
    pub peaks: Vec<(ReportKind, u64, u64)>,
}

/// Streams a trace into an [`Analyzer`]. On a read error the analyser holds
/// everything before it.
pub fn analyze_stream<R: BufRead>(input: R) -> (Analyzer, Option<TraceError>) {
    let mut a = Analyzer::new();
    for ev in read_trace(input) {
        match ev {
            Ok(ev) => a.push(&ev),
            Err(e) => return (a, Some(e)),
        }
    }
    (a, None)
}

pub fn analysis(a: &Analyzer, opts: &AnalyzeOptions) -> AnalyzeOutput {
    let reports = a.reports();
    let fits = reports
        .iter()
        .filter(|r| r.kind != ReportKind::FileSizeKB)
        .map(|r| match fit_power_law(r, opts.fit_range) {
            Ok(fit) => FitOutcome {
                kind: r.kind,
                fit: Some(fit),
                error: None,
            },
            Err(e) => FitOutcome {
                kind: r.kind,
                fit: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let peaks = reports
        .iter()
        .flat_map(|r| {
            find_peaks(r, opts.peak_window, opts.prominence)
                .into_iter()
                .map(move |(x, y)| (r.kind, x, y))
        })
        .collect();
    AnalyzeOutput {
        reports,
        summary: a.summary(),
        fits,
        peaks,
    }
}

pub fn write_analysis(out: &AnalyzeOutput, dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir)?;
    for r in &out.reports {
        let mut w = BufWriter::new(create(&dir.join(format!("{}.tsv", r.kind.name())))?);
        r.write_tsv(&mut w)?;
        w.flush()?;
    }
    write_json(&dir.join(SUMMARY), &out.summary)?;
    write_json(&dir.join(FITS), &out.fits)?;
    let mut w = BufWriter::new(create(&dir.join(PEAKS))?);
    writeln!(w, "report\tx\ty")?;
    for (k, x, y) in &out.peaks {
        writeln!(w, "{}\t{x}\t{y}", k.name())?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), PipelineError> {
    let mut w = BufWriter::new(create(path)?);
    serde_json::to_writer_pretty(&mut w, v).map_err(io::Error::from)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Analyses a trace file into `dir`. A truncated or malformed trace still
/// gets reports for the events before the damage, and the error is returned.
pub fn cmd_analyze(trace: &Path, dir: &Path, opts: &AnalyzeOptions) -> Result<AnalyzeOutput, PipelineError> {
    let (a, err) = analyze_stream(open_input(trace)?);
    let out = analysis(&a, opts);
    write_analysis(&out, dir)?;
    match err {
        Some(e) => Err(e.into()),
        None => Ok(out),
    }
}

/// Bucket occupancy for a file table: loaded from a `DKTB` snapshot, or
/// built by anonymising a capture with the given index bytes.
pub fn bucket_stats(input: &Path, server_port: u16, index_bytes: (usize, usize)) -> Result<FileTable, PipelineError> {
    let mut r = BufReader::new(open(input)?);
    if r.fill_buf()?.starts_with(b"DKTB") {
        return Ok(FileTable::read_snapshot(r)?);
    }
    let mut anon = Anonymizer::new(ClientTable::new(DEFAULT_CLIENT_BITS)?, FileTable::new(index_bytes)?);
    run_stream(r, server_port, &mut anon, io::sink())?;
    Ok(anon.files)
}
