//! Client and file distributions computed from a trace.
//!
//! Anonymised IDs are dense (0..N), so per-entity counters are plain
//! vectors indexed by ID. Distinct (client, file) pairs are kept in hash
//! sets keyed by the packed pair.

use std::collections::BTreeMap;
use std::io::{self, Write};

use rustc_hash::FxHashSet;
use serde::Serialize;
use thiserror::Error;

use crate::anonymize::{AnonBody, AnonEntry, AnonTag};
use crate::trace::TraceEvent;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord, Serialize)]
pub enum ReportKind {
    ProvidersPerFile,
    AskersPerFile,
    FilesPerProvider,
    FilesAskedPerClient,
    FileSizeKB,
}

impl ReportKind {
    pub const ALL: [ReportKind; 5] = [
        ReportKind::ProvidersPerFile,
        ReportKind::AskersPerFile,
        ReportKind::FilesPerProvider,
        ReportKind::FilesAskedPerClient,
        ReportKind::FileSizeKB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReportKind::ProvidersPerFile => "providers_per_file",
            ReportKind::AskersPerFile => "askers_per_file",
            ReportKind::FilesPerProvider => "files_per_provider",
            ReportKind::FilesAskedPerClient => "files_asked_per_client",
            ReportKind::FileSizeKB => "file_size_kb",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Histogram: `y` entities have value `x`. Points are sorted by `x` and
/// every listed `y` is positive.
#[derive(Clone, PartialEq, Eq, Debug, Serialize)]
pub struct DistributionReport {
    pub kind: ReportKind,
    pub points: Vec<(u64, u64)>,
    pub total_entities: u64,
}

impl DistributionReport {
    pub fn empty(kind: ReportKind) -> Self {
        Self {
            kind,
            points: Vec::new(),
            total_entities: 0,
        }
    }

    /// Histogram of per-entity values.
    pub fn from_values(kind: ReportKind, values: impl IntoIterator<Item = u64>) -> Self {
        let mut hist = BTreeMap::new();
        for v in values {
            *hist.entry(v).or_insert(0u64) += 1;
        }
        Self::from_histogram(kind, hist)
    }

    fn from_histogram(kind: ReportKind, hist: BTreeMap<u64, u64>) -> Self {
        let points: Vec<(u64, u64)> = hist.into_iter().filter(|&(_, y)| y > 0).collect();
        let total_entities = points.iter().map(|&(_, y)| y).sum();
        Self {
            kind,
            points,
            total_entities,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Sum of x·y. For the pair-counting reports this is the number of
    /// distinct (client, file) pairs.
    pub fn mass(&self) -> u128 {
        self.points.iter().map(|&(x, y)| x as u128 * y as u128).sum()
    }

    pub fn y_at(&self, x: u64) -> u64 {
        self.points
            .binary_search_by_key(&x, |&(px, _)| px)
            .map_or(0, |i| self.points[i].1)
    }

    /// Pointwise addition, for reports computed on disjoint shards.
    pub fn merge(&mut self, other: &DistributionReport) {
        let mut hist: BTreeMap<u64, u64> = self.points.iter().copied().collect();
        for &(x, y) in &other.points {
            *hist.entry(x).or_insert(0) += y;
        }
        *self = Self::from_histogram(self.kind, hist);
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> io::Result<()> {
        for (x, y) in &self.points {
            writeln!(w, "{x}\t{y}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize)]
pub struct PowerLawFit {
    pub exponent: f64,
    pub prefactor: f64,
    pub fit_range: (u64, u64),
    /// RMS of the residuals in natural-log space.
    pub residual: f64,
    pub points_used: usize,
}

impl PowerLawFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.prefactor * x.powf(self.exponent)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AnalyzeError {
    #[error("power-law fit needs at least 2 distinct x in [{0}, {1}], found {2}")]
    TooFewPoints(u64, u64, usize),
}

/// Least squares on (ln x, ln y) over points with `x` in the inclusive range.
/// Points with x = 0 have no logarithm and are skipped.
pub fn fit_power_law(report: &DistributionReport, range: (u64, u64)) -> Result<PowerLawFit, AnalyzeError> {
    let pts: Vec<(f64, f64)> = report
        .points
        .iter()
        .filter(|&&(x, y)| x >= range.0 && x <= range.1 && x > 0 && y > 0)
        .map(|&(x, y)| (x as f64, y as f64))
        .collect();
    fit_points(&pts, range)
}

/// The same fit over real-valued points, which must be positive.
pub fn fit_points(pts: &[(f64, f64)], range: (u64, u64)) -> Result<PowerLawFit, AnalyzeError> {
    let logs: Vec<(f64, f64)> = pts
        .iter()
        .filter(|p| p.0 >= range.0 as f64 && p.0 <= range.1 as f64 && p.0 > 0.0 && p.1 > 0.0)
        .map(|p| (p.0.ln(), p.1.ln()))
        .collect();
    if logs.len() < 2 {
        return Err(AnalyzeError::TooFewPoints(range.0, range.1, logs.len()));
    }
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(AnalyzeError::TooFewPoints(range.0, range.1, 1));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = logs.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    Ok(PowerLawFit {
        exponent: slope,
        prefactor: intercept.exp(),
        fit_range: range,
        residual: (rss / n).sqrt(),
        points_used: logs.len(),
    })
}

pub const DEFAULT_PEAK_WINDOW: usize = 10;
pub const DEFAULT_PROMINENCE: f64 = 3.0;

/// Points higher than every listed neighbour within `window` positions on
/// either side and more than `prominence` times the neighbours' median.
/// A point needs neighbours on both sides, so the ends of a report are never
/// peaks.
pub fn find_peaks(report: &DistributionReport, window: usize, prominence: f64) -> Vec<(u64, u64)> {
    let p = &report.points;
    let mut peaks = Vec::new();
    let mut neigh: Vec<u64> = Vec::with_capacity(2 * window);
    for i in 0..p.len() {
        let lo = i.saturating_sub(window);
        let hi = (i + window).min(p.len() - 1);
        if window == 0 || lo == i || hi == i {
            continue;
        }
        neigh.clear();
        neigh.extend(p[lo..i].iter().chain(&p[i + 1..=hi]).map(|&(_, y)| y));
        let y = p[i].1;
        if neigh.iter().any(|&n| n >= y) {
            continue;
        }
        neigh.sort_unstable();
        let m = neigh.len();
        let median = if m % 2 == 1 {
            neigh[m / 2] as f64
        } else {
            (neigh[m / 2 - 1] + neigh[m / 2]) as f64 / 2.0
        };
        if y as f64 > prominence * median {
            peaks.push(p[i]);
        }
    }
    peaks
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize)]
pub struct Summary {
    pub messages: u64,
    pub distinct_clients: u64,
    pub distinct_files: u64,
    /// Microseconds between the earliest and latest message.
    pub span_micros: u64,
    /// File-search (metadata) queries, reported apart from source searches.
    pub file_search_queries: u64,
    pub by_type: [u64; 8],
}

impl Summary {
    pub fn span_secs(&self) -> f64 {
        self.span_micros as f64 / 1e6
    }
}

/// Growable bitmap over dense anonymised IDs.
#[derive(Default, Clone)]
struct Seen {
    bits: Vec<u64>,
    count: u64,
}

impl Seen {
    fn insert(&mut self, id: u32) {
        let (w, b) = (id as usize / 64, id % 64);
        if w >= self.bits.len() {
            self.bits.resize(w + 1, 0);
        }
        if self.bits[w] & (1 << b) == 0 {
            self.bits[w] |= 1 << b;
            self.count += 1;
        }
    }
}

fn bump(v: &mut Vec<u64>, id: u32) {
    let i = id as usize;
    if i >= v.len() {
        v.resize(i + 1, 0);
    }
    v[i] += 1;
}

fn pair(client: u32, file: u32) -> u64 {
    (client as u64) << 32 | file as u64
}

/// Single-pass accumulator over trace events.
#[derive(Default)]
pub struct Analyzer {
    provides: FxHashSet<u64>,
    asks: FxHashSet<u64>,
    providers_per_file: Vec<u64>,
    askers_per_file: Vec<u64>,
    files_per_provider: Vec<u64>,
    files_per_asker: Vec<u64>,
    sizes: BTreeMap<u32, u64>,
    clients: Seen,
    files: Seen,
    first: Option<u64>,
    last: u64,
    summary: Summary,
}

impl Analyzer {
    pub fn new() -> Self {
        Self::default()
    }

    fn entries(&mut self, entries: &[AnonEntry]) {
        for e in entries {
            self.files.insert(e.file);
            if let Some(kb) = e.tags.iter().find_map(|t| match t {
                AnonTag::Size(kb) => Some(*kb),
                _ => None,
            }) {
                self.sizes.entry(e.file).or_insert(kb);
            }
        }
    }

    pub fn push(&mut self, ev: &TraceEvent) {
        let m = &ev.message;
        let s = &mut self.summary;
        s.messages += 1;
        s.by_type[m.body.kind().index()] += 1;
        self.first = Some(self.first.map_or(m.time, |f| f.min(m.time)));
        self.last = self.last.max(m.time);
        if let Some(p) = &m.peer {
            self.clients.insert(p.client);
        }
        match &m.body {
            AnonBody::ServerListQuery | AnonBody::ServerListAnswer { .. } | AnonBody::ServerStatus { .. } => {}
            AnonBody::FileSearchQuery { .. } => self.summary.file_search_queries += 1,
            AnonBody::FileSearchAnswer { results } => self.entries(results),
            AnonBody::SourceSearchQuery { files } => {
                for &f in files {
                    self.files.insert(f);
                    if let Some(p) = &m.peer {
                        if self.asks.insert(pair(p.client, f)) {
                            bump(&mut self.askers_per_file, f);
                            bump(&mut self.files_per_asker, p.client);
                        }
                    }
                }
            }
            AnonBody::SourceSearchAnswer { file, sources } => {
                self.files.insert(*file);
                for s in sources {
                    self.clients.insert(s.client);
                }
            }
            AnonBody::Announce { client, files } => {
                self.clients.insert(client.client);
                self.entries(files);
                for e in files {
                    if self.provides.insert(pair(client.client, e.file)) {
                        bump(&mut self.providers_per_file, e.file);
                        bump(&mut self.files_per_provider, client.client);
                    }
                }
            }
        }
    }

    fn counts(kind: ReportKind, v: &[u64]) -> DistributionReport {
        DistributionReport::from_values(kind, v.iter().copied().filter(|&c| c > 0))
    }

    /// The five reports, in [`ReportKind::ALL`] order.
    pub fn reports(&self) -> Vec<DistributionReport> {
        vec![
            Self::counts(ReportKind::ProvidersPerFile, &self.providers_per_file),
            Self::counts(ReportKind::AskersPerFile, &self.askers_per_file),
            Self::counts(ReportKind::FilesPerProvider, &self.files_per_provider),
            Self::counts(ReportKind::FilesAskedPerClient, &self.files_per_asker),
            DistributionReport::from_values(ReportKind::FileSizeKB, self.sizes.values().copied()),
        ]
    }

    pub fn summary(&self) -> Summary {
        Summary {
            distinct_clients: self.clients.count,
            distinct_files: self.files.count,
            span_micros: self.first.map_or(0, |f| self.last - f),
            ..self.summary
        }
    }
}

pub fn build_distributions<'a>(events: impl IntoIterator<Item = &'a TraceEvent>) -> Vec<DistributionReport> {
    let mut a = Analyzer::new();
    events.into_iter().for_each(|e| a.push(e));
    a.reports()
}

pub fn summary<'a>(events: impl IntoIterator<Item = &'a TraceEvent>) -> Summary {
    let mut a = Analyzer::new();
    events.into_iter().for_each(|e| a.push(e));
    a.summary()
}
