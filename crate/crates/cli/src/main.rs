use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use edtrace::generate::{generate_to_files, GenerateError, WorkloadConfig};
use edtrace::pipeline::{bucket_stats, cmd_analyze, cmd_run, AnalyzeOptions, PipelineError, RunConfig};
use edtrace::verify::{verify_pipeline, Artifacts};

const EXIT_IO: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(name = "edtrace", version, about = "Decode, anonymise and analyse eDonkey server UDP captures")]
struct Cli {
    /// TOML file with optional [workload], [run] and [analyze] tables. Flags win.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesise a capture plus ground-truth and drop sidecars
    Generate(GenerateArgs),
    /// pcap -> anonymised XML trace, table snapshots and run report
    Run(RunArgs),
    /// Trace -> distribution reports, fits, peaks and summary
    Analyze(AnalyzeArgs),
    /// Check a run's artifacts against the generator's sidecars
    Verify(VerifyArgs),
    /// Bucket-size histogram of the fileID table
    BucketStats(BucketArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Capture to write; sidecars go next to it
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Total datagrams, filler included
    #[arg(long)]
    messages: Option<u64>,
    #[arg(long)]
    clients: Option<u32>,
    #[arg(long)]
    files: Option<u32>,
    #[arg(long)]
    port: Option<u16>,
}

#[derive(Args)]
struct RunArgs {
    /// Capture to decode
    #[arg(long)]
    input: Option<PathBuf>,
    /// Trace output; a .gz suffix compresses it
    #[arg(long)]
    out: Option<PathBuf>,
    /// Server UDP port [default: 4661]
    #[arg(long)]
    port: Option<u16>,
    /// fileID byte positions that pick the table bucket [default: 2,3]
    #[arg(long, value_name = "I,J", value_parser = parse_index_bytes)]
    index_bytes: Option<(usize, usize)>,
    /// Width of the dense client table in bits [default: 24]
    #[arg(long, value_name = "N")]
    client_bits: Option<u8>,
    /// Directory for run.json, losses.tsv and the snapshots
    #[arg(long, value_name = "DIR")]
    reports: Option<PathBuf>,
    #[arg(long)]
    client_snapshot: Option<PathBuf>,
    #[arg(long)]
    file_snapshot: Option<PathBuf>,
    /// Start from the snapshots instead of empty tables
    #[arg(long)]
    resume: bool,
    /// Drop sidecar (defaults to <input>.drops when present)
    #[arg(long)]
    drops: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Trace to read
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_name = "DIR")]
    reports: PathBuf,
    /// Inclusive fit range
    #[arg(long, value_name = "LO,HI", value_parser = parse_pair::<u64>)]
    fit_range: Option<(u64, u64)>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Generated capture; its .truth and .drops sidecars are read too
    #[arg(long)]
    input: PathBuf,
    /// Trace produced by `run`
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, value_name = "DIR")]
    reports: PathBuf,
}

#[derive(Args)]
struct BucketArgs {
    /// A pcap, or a DKTB file-table snapshot
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    port: Option<u16>,
    #[arg(long, value_name = "I,J", value_parser = parse_index_bytes)]
    index_bytes: Option<(usize, usize)>,
    /// Write the TSV here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    workload: Option<WorkloadConfig>,
    run: Option<RunConfig>,
    analyze: Option<AnalyzeOptions>,
}

fn parse_pair<T: std::str::FromStr>(s: &str) -> Result<(T, T), String> {
    let (a, b) = s.split_once(',').ok_or("expected two comma-separated values")?;
    match (a.trim().parse(), b.trim().parse()) {
        (Ok(a), Ok(b)) => Ok((a, b)),
        _ => Err(format!("cannot parse {s:?}")),
    }
}

// Range checks are left to the file table so the error text lives in one place.
fn parse_index_bytes(s: &str) -> Result<(usize, usize), String> {
    parse_pair::<usize>(s)
}

struct Failure {
    code: u8,
    msg: String,
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure {
            code: e.exit_code() as u8,
            msg: e.to_string(),
        }
    }
}

impl From<GenerateError> for Failure {
    fn from(e: GenerateError) -> Self {
        let code = if matches!(e, GenerateError::Config(_)) { EXIT_CONFIG } else { EXIT_IO };
        Failure { code, msg: e.to_string() }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure {
            code: EXIT_IO,
            msg: e.to_string(),
        }
    }
}

fn config_error(msg: String) -> Failure {
    Failure { code: EXIT_CONFIG, msg }
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile, Failure> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

fn generate(args: GenerateArgs, file: ConfigFile) -> Result<(), Failure> {
    let mut cfg = file.workload.unwrap_or_default();
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.messages {
        cfg.total_messages = n;
    }
    if let Some(n) = args.clients {
        cfg.num_clients = n;
    }
    if let Some(n) = args.files {
        cfg.num_files = n;
    }
    if let Some(p) = args.port {
        cfg.server_port = p;
    }
    let truth = generate_to_files(&cfg, &args.out)?;
    let e = &truth.expected;
    eprintln!(
        "{}: {} frames, {} datagrams ({} undecodable), {} clients, {} files",
        args.out.display(),
        e.frames,
        e.datagrams,
        e.undecoded,
        e.distinct_clients,
        e.distinct_files
    );
    Ok(())
}

fn run(args: RunArgs, file: ConfigFile) -> Result<(), Failure> {
    let mut cfg = file.run.unwrap_or_default();
    macro_rules! set {
        ($($field:ident = $val:expr),*) => {$(
            if let Some(v) = $val {
                cfg.$field = v;
            }
        )*};
    }
    set!(
        input = args.input,
        trace_out = args.out,
        server_port = args.port,
        index_bytes = args.index_bytes,
        client_bits = args.client_bits
    );
    cfg.reports = args.reports.or(cfg.reports);
    cfg.client_snapshot = args.client_snapshot.or(cfg.client_snapshot);
    cfg.file_snapshot = args.file_snapshot.or(cfg.file_snapshot);
    cfg.drops = args.drops.or(cfg.drops);
    cfg.resume |= args.resume;

    let r = cmd_run(&cfg)?;
    eprintln!(
        "{} datagrams: {} decoded, {} undecoded ({:.4}%); {} clients, {} files; {} losses",
        r.ingest.emitted,
        r.decoded,
        r.undecoded,
        r.undecoded_percent,
        r.distinct_clients,
        r.distinct_files,
        r.losses_total
    );
    Ok(())
}

fn analyze(args: AnalyzeArgs, file: ConfigFile) -> Result<(), Failure> {
    let mut opts = file.analyze.unwrap_or_default();
    if let Some(r) = args.fit_range {
        opts.fit_range = r;
    }
    let out = cmd_analyze(&args.input, &args.reports, &opts)?;
    let s = &out.summary;
    eprintln!(
        "{} messages, {} clients, {} files over {:.3} s; {} peaks",
        s.messages,
        s.distinct_clients,
        s.distinct_files,
        s.span_secs(),
        out.peaks.len()
    );
    Ok(())
}

fn verify(args: VerifyArgs) -> Result<(), Failure> {
    let v = verify_pipeline(&Artifacts {
        pcap: args.input,
        trace: args.trace,
        reports: args.reports,
    });
    print!("{v}");
    if v.passed() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_VERIFY,
            msg: "verification failed".into(),
        })
    }
}

fn buckets(args: BucketArgs, file: ConfigFile) -> Result<(), Failure> {
    let run = file.run.unwrap_or_default();
    let table = bucket_stats(
        &args.input,
        args.port.unwrap_or(run.server_port),
        args.index_bytes.unwrap_or(run.index_bytes),
    )?;
    let mut text = String::from("bucket_size\tbuckets\n");
    for (size, n) in table.bucket_size_distribution() {
        text.push_str(&format!("{size}\t{n}\n"));
    }
    match args.out {
        Some(p) => fs::write(&p, text)?,
        None => io::stdout().lock().write_all(text.as_bytes())?,
    }
    let (i, j) = table.index_bytes();
    eprintln!(
        "{} fileIDs, index bytes ({i},{j}), max/mean bucket = {:.2}",
        table.len(),
        table.skew_ratio()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = load_config(cli.config.as_deref()).and_then(|file| match cli.cmd {
        Cmd::Generate(a) => generate(a, file),
        Cmd::Run(a) => run(a, file),
        Cmd::Analyze(a) => analyze(a, file),
        Cmd::Verify(a) => verify(a),
        Cmd::BucketStats(a) => buckets(a, file),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("edtrace: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
