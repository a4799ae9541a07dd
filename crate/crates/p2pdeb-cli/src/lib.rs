//! Command-line front end for the evidence bag toolchain.
//!
//! Every subcommand is a thin binding over the library: argument
//! parsing, exit-code mapping and text rendering live here, evidence
//! handling lives in `p2pdeb`. The one piece of policy owned by this
//! crate is custody bookkeeping: any command that opens a sealed bag
//! appends what it did to the bag's sidecar audit log — including
//! verifications that fail.
//!
//! Exit codes: 0 success, 1 an integrity or verification failure,
//! 2 bad usage, 3 an I/O or format problem, 4 a partial capture run
//! (the source died but the bag was sealed with what arrived).

use std::fmt::Display;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use p2pdeb::bag::{
    merge_parts, plan_split, BagConfig, BagError, BagReader, CaseMetadata, VerificationReport,
};
use p2pdeb::classify::{frequency_report, CategoryStats, Cidr, SignatureSet};
use p2pdeb::custody::{
    append_sidecar, now_micros, read_sidecar, AuditAction, AuditError, AuditLog, AuditRecord,
};
use p2pdeb::hexstr;
use p2pdeb::kv;
use p2pdeb::pipeline::{
    run, FileReplaySource, PipelineConfig, PipelineError, RunSummary, StopHandle,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_PARTIAL: i32 = 4;

/// Environment variable consulted for the operator name when
/// `--operator` is not given.
pub const OPERATOR_ENV: &str = "P2PDEB_OPERATOR";

/// The largest part file `split` emits unless told otherwise: one byte
/// under 2^32, so parts stay copyable onto media with a 32-bit file
/// size field.
pub const DEFAULT_MAX_PART_SIZE: u64 = 4_294_967_295;

#[derive(Parser)]
#[command(
    name = "p2pdeb",
    version,
    about = "Tamper-evident evidence bags for packet captures"
)]
struct Cli {
    /// Operator name recorded on audit entries (default: $P2PDEB_OPERATOR,
    /// then $USER).
    #[arg(long, global = true, value_name = "NAME")]
    operator: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay a capture file into a new sealed evidence bag.
    // Boxed: the capture flag set dwarfs every other variant.
    Capture(Box<CaptureArgs>),
    /// Check every stored digest and hash chain of a bag or part set.
    Verify(VerifyArgs),
    /// Cut a sealed bag into parts below a size limit.
    Split(SplitArgs),
    /// Reassemble split parts into the original bag.
    Merge(MergeArgs),
    /// Write the stored packets back out as a standard capture file.
    Export(ExportArgs),
    /// Print per-category traffic statistics of a sealed bag.
    Report(ReportArgs),
    /// Print header, case metadata and totals of a sealed bag.
    Inspect(InspectArgs),
    /// Print the embedded and sidecar audit logs and check their chains.
    Audit(AuditArgs),
    /// Print the signature rules this build classifies with.
    Signatures(SignaturesArgs),
}

#[derive(Args)]
struct CaptureArgs {
    /// Capture file to replay. (`live:<adapter>` is reserved for builds
    /// with live capture support; this build replays files only.)
    #[arg(long = "in", value_name = "PCAP")]
    input: PathBuf,
    /// Bag file to create.
    #[arg(long = "out", value_name = "BAG")]
    output: PathBuf,
    /// Signature rules file (default: the built-in set; see `signatures --dump`).
    #[arg(long, value_name = "FILE")]
    signatures: Option<PathBuf>,
    /// Case metadata as key=value lines. Individual flags below override
    /// the file, and each override is noted on stderr.
    #[arg(long, value_name = "FILE")]
    metadata: Option<PathBuf>,

    /// Investigating agency.
    #[arg(long, value_name = "TEXT")]
    agency: Option<String>,
    /// Exhibit reference.
    #[arg(long, value_name = "TEXT")]
    exhibit: Option<String>,
    /// Property reference.
    #[arg(long, value_name = "TEXT")]
    property: Option<String>,
    /// Case/suspect name.
    #[arg(long, value_name = "TEXT")]
    suspect: Option<String>,
    /// Free-form description of the capture.
    #[arg(long, value_name = "TEXT")]
    description: Option<String>,
    /// Date and time of seizure.
    #[arg(long = "seized-at", value_name = "TEXT")]
    seized_at: Option<String>,
    /// Location of seizure.
    #[arg(long = "seized-location", value_name = "TEXT")]
    seized_location: Option<String>,
    /// Name of the person producing the bag.
    #[arg(long, value_name = "TEXT")]
    producer: Option<String>,
    /// Signature (sign-off) of the producer.
    #[arg(long = "producer-signature", value_name = "TEXT")]
    producer_signature: Option<String>,
    /// Incident reference.
    #[arg(long, value_name = "TEXT")]
    incident: Option<String>,
    /// Laboratory reference.
    #[arg(long, value_name = "TEXT")]
    laboratory: Option<String>,

    /// Close the open segment after this many packets (default 10000).
    #[arg(long = "rotate-packets", value_name = "N")]
    rotate_packets: Option<u64>,
    /// Close the open segment before its payload exceeds this many bytes
    /// (default 67108864).
    #[arg(long = "rotate-bytes", value_name = "BYTES")]
    rotate_bytes: Option<u64>,
    /// Close the open segment before it spans this many seconds of
    /// packet time (default 60).
    #[arg(long = "rotate-seconds", value_name = "SECS")]
    rotate_seconds: Option<u64>,
    /// Queue slots between the reader and the writer (default 65536).
    #[arg(long = "queue-capacity", value_name = "N")]
    queue_capacity: Option<usize>,
    /// Network considered "ours" when picking the remote endpoint of an
    /// unknown flow; may repeat.
    #[arg(long = "home", value_name = "CIDR")]
    home: Vec<Cidr>,
    /// Seconds between status lines on stderr; 0 disables (default 5).
    #[arg(long = "status-interval", value_name = "SECS")]
    status_interval: Option<u64>,
    /// Occurrences before an unknown payload prefix is reported as a
    /// candidate signature (default 20).
    #[arg(long = "min-support", value_name = "N")]
    min_support: Option<u64>,
    /// Distinct remote endpoints before an unknown payload prefix is
    /// reported (default 5).
    #[arg(long = "min-endpoints", value_name = "N")]
    min_endpoints: Option<u64>,
}

#[derive(Args)]
struct VerifyArgs {
    /// A bag file, or every part of a split set.
    #[arg(value_name = "BAG|PART", required = true)]
    paths: Vec<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(value_name = "BAG")]
    bag: PathBuf,
    /// Upper bound on any part file, in bytes.
    #[arg(long = "max-size", value_name = "BYTES", default_value_t = DEFAULT_MAX_PART_SIZE)]
    max_size: u64,
    /// Parts are written as <PREFIX>.partNNNN (default: the bag path).
    #[arg(long = "out-prefix", value_name = "PREFIX")]
    out_prefix: Option<PathBuf>,
}

#[derive(Args)]
struct MergeArgs {
    /// Bag file to reassemble.
    #[arg(long = "out", value_name = "BAG")]
    output: PathBuf,
    /// Part files, in any order.
    #[arg(value_name = "PART", required = true)]
    parts: Vec<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(value_name = "BAG")]
    bag: PathBuf,
    /// Capture file to write.
    #[arg(long = "out", value_name = "PCAP")]
    output: PathBuf,
    /// Export even when verification fails; the override is logged.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(value_name = "BAG")]
    bag: PathBuf,
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    format: ReportFormat,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    /// Aligned columns for reading.
    Text,
    /// `category,packets,bytes,percent` rows for machines.
    Csv,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(value_name = "BAG")]
    bag: PathBuf,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(value_name = "BAG")]
    bag: PathBuf,
}

#[derive(Args)]
struct SignaturesArgs {
    /// Print the raw rule text, reloadable via `capture --signatures`.
    #[arg(long)]
    dump: bool,
}

/// Parses and runs one command line. `args` includes the program name.
/// All normal output goes to `out`, diagnostics and status lines to
/// `err`; nothing is written to the process's own stdio, so callers
/// (and tests) see every byte.
pub fn run_cli<I, T>(args: I, stop: &StopHandle, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let rendered = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{rendered}");
                EXIT_USAGE
            } else {
                // --help and --version land here; they are successes.
                let _ = write!(out, "{rendered}");
                EXIT_OK
            };
        }
    };
    let operator = resolve_operator(cli.operator);
    match cli.command {
        Command::Capture(args) => cmd_capture(*args, &operator, stop, out, err),
        Command::Verify(args) => cmd_verify(args, &operator, out, err),
        Command::Split(args) => cmd_split(args, &operator, out, err),
        Command::Merge(args) => cmd_merge(args, &operator, out, err),
        Command::Export(args) => cmd_export(args, &operator, out, err),
        Command::Report(args) => cmd_report(args, &operator, out, err),
        Command::Inspect(args) => cmd_inspect(args, &operator, out, err),
        Command::Audit(args) => cmd_audit(args, &operator, out, err),
        Command::Signatures(args) => cmd_signatures(args, out),
    }
}

/// `--operator`, then the dedicated environment variable, then the
/// login name, then a value that is at least honest about itself.
fn resolve_operator(flag: Option<String>) -> String {
    flag.into_iter()
        .chain(std::env::var(OPERATOR_ENV).ok())
        .chain(std::env::var("USER").ok())
        .chain(std::env::var("LOGNAME").ok())
        .find(|name| !name.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

fn complain(err: &mut dyn Write, code: i32, message: impl Display) -> i32 {
    let _ = writeln!(err, "p2pdeb: {message}");
    code
}

/// Containers that cannot be read are I/O problems; containers that can
/// be read but do not hold together are verification failures.
fn bag_error_exit(error: &BagError) -> i32 {
    match error {
        BagError::Io(_)
        | BagError::MalformedContainer { .. }
        | BagError::SealedBag
        | BagError::EmptySegment => EXIT_IO,
        BagError::PartSizeTooSmall { .. } => EXIT_USAGE,
        BagError::MissingPart { .. }
        | BagError::ContinuityMismatch { .. }
        | BagError::HeaderMismatch { .. }
        | BagError::PartCorrupt { .. }
        | BagError::VerificationFailed { .. } => EXIT_VERIFY,
    }
}

fn audit_error_exit(error: &AuditError) -> i32 {
    match error {
        AuditError::Io(_) | AuditError::Malformed { .. } => EXIT_IO,
        AuditError::ChainBroken { .. } | AuditError::SeedMismatch => EXIT_VERIFY,
    }
}

/// The sidecar audit file lives next to the bag: `<bag>.audit`.
pub fn sidecar_path(bag: &Path) -> PathBuf {
    let mut name = bag.as_os_str().to_os_string();
    name.push(".audit");
    PathBuf::from(name)
}

/// Appends one custody record to the bag's sidecar, creating the file
/// (seeded with the bag's final chain hash) on first touch.
fn record_custody(
    bag: &Path,
    final_chain_hash: [u8; 32],
    operator: &str,
    action: AuditAction,
    note: String,
    err: &mut dyn Write,
) -> Result<(), i32> {
    let record = AuditRecord {
        timestamp_micros: now_micros(),
        actor: operator.to_string(),
        action,
        object_digest: final_chain_hash,
        note,
    };
    append_sidecar(&sidecar_path(bag), final_chain_hash, record).map_err(|e| {
        complain(
            err,
            audit_error_exit(&e),
            format!("sidecar audit log for {}: {e}", bag.display()),
        )
    })
}

fn open_bag(path: &Path, err: &mut dyn Write) -> Result<BagReader<File>, i32> {
    let file = File::open(path)
        .map_err(|e| complain(err, EXIT_IO, format!("cannot open {}: {e}", path.display())))?;
    BagReader::open(file)
        .map_err(|e| complain(err, bag_error_exit(&e), format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------- capture

fn cmd_capture(
    args: CaptureArgs,
    operator: &str,
    stop: &StopHandle,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    if let Some(spec) = args.input.to_str() {
        if spec.starts_with("live:") {
            return complain(
                err,
                EXIT_USAGE,
                "live capture sources are not supported by this build; replay a capture file",
            );
        }
    }
    let signatures = match &args.signatures {
        None => SignatureSet::default_set(),
        Some(path) => {
            let text = match fs::read_to_string(path) {
                Ok(text) => text,
                Err(e) => {
                    return complain(
                        err,
                        EXIT_IO,
                        format!("signature file {}: {e}", path.display()),
                    )
                }
            };
            match SignatureSet::parse(&text) {
                Ok(set) => set,
                Err(e) => {
                    return complain(
                        err,
                        EXIT_IO,
                        format!("signature file {}: {e}", path.display()),
                    )
                }
            }
        }
    };
    let metadata = match build_metadata(&args, err) {
        Ok(metadata) => metadata,
        Err(code) => return code,
    };
    let source = match FileReplaySource::open(&args.input) {
        Ok(source) => source,
        Err(e) => return complain(err, EXIT_IO, format!("{}: {e}", args.input.display())),
    };

    let mut bag_config = BagConfig::new(
        source.header().snap_length,
        source.header().link_type,
        signatures.digest(),
    );
    bag_config.operator = operator.to_string();

    let mut pipeline_config = PipelineConfig::default();
    if let Some(n) = args.rotate_packets {
        pipeline_config.rotation.max_packets = n;
    }
    if let Some(n) = args.rotate_bytes {
        pipeline_config.rotation.max_bytes = n;
    }
    if let Some(n) = args.rotate_seconds {
        pipeline_config.rotation.max_seconds = n;
    }
    if let Some(n) = args.queue_capacity {
        pipeline_config.queue_capacity = n;
    }
    if let Some(n) = args.status_interval {
        pipeline_config.status_interval_secs = n;
    }
    if let Some(n) = args.min_support {
        pipeline_config.candidate_min_support = n;
    }
    if let Some(n) = args.min_endpoints {
        pipeline_config.candidate_min_endpoints = n;
    }
    pipeline_config.home_networks = args.home.clone();

    let out_file = match File::create(&args.output) {
        Ok(file) => file,
        Err(e) => {
            return complain(
                err,
                EXIT_IO,
                format!("cannot create {}: {e}", args.output.display()),
            )
        }
    };
    let mut writer = match p2pdeb::bag::BagWriter::create(
        BufWriter::new(out_file),
        &metadata,
        &bag_config,
    ) {
        Ok(writer) => writer,
        Err(e) => return complain(err, EXIT_IO, format!("{}: {e}", args.output.display())),
    };

    match run(source, &signatures, &mut writer, &pipeline_config, stop, err) {
        Ok(summary) => {
            if let Err(message) = finish_bag_file(writer) {
                return complain(err, EXIT_IO, message);
            }
            write_summary(out, &summary);
            write_frequency(out, &summary.stats, ReportFormat::Text);
            EXIT_OK
        }
        Err(PipelineError::Source { message, summary }) => {
            if let Err(message) = finish_bag_file(writer) {
                return complain(err, EXIT_IO, message);
            }
            write_summary(out, &summary);
            write_frequency(out, &summary.stats, ReportFormat::Text);
            complain(
                err,
                EXIT_PARTIAL,
                format!("source failed: {message}; bag sealed with the partial capture"),
            )
        }
        Err(PipelineError::Writer(e)) => {
            drop(writer);
            let _ = fs::remove_file(&args.output);
            complain(
                err,
                EXIT_IO,
                format!(
                    "writing {}: {e}; incomplete output removed",
                    args.output.display()
                ),
            )
        }
    }
}

fn finish_bag_file(writer: p2pdeb::bag::BagWriter<BufWriter<File>>) -> Result<(), String> {
    writer
        .into_inner()
        .into_inner()
        .map(|_| ())
        .map_err(|e| format!("flushing output: {e}"))
}

/// Assembles case metadata from the optional key=value file plus the
/// per-field flags; flags win, and each win over a file value is noted.
fn build_metadata(args: &CaptureArgs, err: &mut dyn Write) -> Result<CaseMetadata, i32> {
    let mut metadata = CaseMetadata::default();
    let mut file_keys: Vec<String> = Vec::new();
    if let Some(path) = &args.metadata {
        let bytes = fs::read(path).map_err(|e| {
            complain(err, EXIT_IO, format!("metadata file {}: {e}", path.display()))
        })?;
        let pairs = kv::from_block(&bytes).map_err(|e| {
            complain(err, EXIT_IO, format!("metadata file {}: {e}", path.display()))
        })?;
        for (key, value) in pairs {
            match metadata.field_mut(&key) {
                Some(slot) => *slot = value,
                None => {
                    return Err(complain(
                        err,
                        EXIT_IO,
                        format!("metadata file {}: unknown field {key:?}", path.display()),
                    ))
                }
            }
            file_keys.push(key);
        }
    }
    let flags: [(&str, &str, &Option<String>); 11] = [
        ("agency", "investigating_agency", &args.agency),
        ("exhibit", "exhibit_reference", &args.exhibit),
        ("property", "property_reference", &args.property),
        ("suspect", "case_suspect_name", &args.suspect),
        ("description", "description", &args.description),
        ("seized-at", "seized_datetime", &args.seized_at),
        ("seized-location", "seized_location", &args.seized_location),
        ("producer", "producer_name", &args.producer),
        ("producer-signature", "producer_signature", &args.producer_signature),
        ("incident", "incident_reference", &args.incident),
        ("laboratory", "laboratory_reference", &args.laboratory),
    ];
    for (flag, field, value) in flags {
        if let Some(value) = value {
            let slot = metadata.field_mut(field).expect("metadata field names are fixed");
            if file_keys.iter().any(|k| k == field) && slot != value {
                let _ = writeln!(
                    err,
                    "p2pdeb: note: --{flag} overrides the metadata file's {field}"
                );
            }
            *slot = value.clone();
        }
    }
    Ok(metadata)
}

fn write_summary(out: &mut dyn Write, summary: &RunSummary) {
    let _ = writeln!(out, "packets in:      {}", summary.packets_in);
    let _ = writeln!(out, "packets stored:  {}", summary.packets_stored);
    let _ = writeln!(out, "packets dropped: {}", summary.packets_dropped);
    let _ = writeln!(out, "segments:        {}", summary.segments);
    let _ = writeln!(out, "duration:        {:.2}s", summary.duration_secs);
    if !summary.candidates.is_empty() {
        let _ = writeln!(out, "candidate signatures:");
        for candidate in &summary.candidates {
            let _ = writeln!(
                out,
                "  prefix={} support={} endpoints={} transport={}",
                hexstr::encode(&candidate.prefix),
                candidate.support,
                candidate.endpoint_count,
                candidate.transport.label()
            );
        }
    }
}

fn write_frequency(out: &mut dyn Write, stats: &CategoryStats, format: ReportFormat) {
    let rows = frequency_report(stats);
    match format {
        ReportFormat::Text => {
            let _ = writeln!(
                out,
                "{:<24} {:>10} {:>14} {:>8}",
                "category", "packets", "bytes", "percent"
            );
            for row in rows {
                let _ = writeln!(
                    out,
                    "{:<24} {:>10} {:>14} {:>7.2}%",
                    row.category, row.packets, row.bytes, row.percent
                );
            }
        }
        ReportFormat::Csv => {
            let _ = writeln!(out, "category,packets,bytes,percent");
            for row in rows {
                let _ = writeln!(
                    out,
                    "{},{},{},{:.2}",
                    row.category, row.packets, row.bytes, row.percent
                );
            }
        }
    }
}

// ----------------------------------------------------------------- verify

fn cmd_verify(args: VerifyArgs, operator: &str, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    if args.paths.len() > 1 {
        return verify_part_set(&args.paths, out, err);
    }
    let bag = &args.paths[0];
    let mut reader = match open_bag(bag, err) {
        Ok(reader) => reader,
        Err(code) => return code,
    };
    let report = match reader.verify() {
        Ok(report) => report,
        Err(e) => return complain(err, bag_error_exit(&e), format!("{}: {e}", bag.display())),
    };
    write_verify_report(out, &report);
    let note = verify_note(&report);
    let final_chain = reader.footer().final_chain_hash;
    if let Err(code) = record_custody(bag, final_chain, operator, AuditAction::Verified, note, err)
    {
        return code;
    }
    if report.all_ok() {
        EXIT_OK
    } else {
        EXIT_VERIFY
    }
}

/// Merges the parts into a scratch file and verifies that. Nothing is
/// logged: the set's bag does not exist as a file here, and parts carry
/// no sidecar of their own.
fn verify_part_set(paths: &[PathBuf], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let mut sources = Vec::with_capacity(paths.len());
    for path in paths {
        match File::open(path) {
            Ok(file) => sources.push(file),
            Err(e) => return complain(err, EXIT_IO, format!("cannot open {}: {e}", path.display())),
        }
    }
    let scratch = ScratchFile::new(&paths[0]);
    let merge_result = (|| -> Result<(), BagError> {
        let mut sink = BufWriter::new(File::create(&scratch.path)?);
        merge_parts(sources, &mut sink)?;
        sink.into_inner().map_err(|e| BagError::Io(e.into_error()))?;
        Ok(())
    })();
    if let Err(e) = merge_result {
        return complain(err, bag_error_exit(&e), format!("part set: {e}"));
    }
    let _ = writeln!(out, "part set: {} parts merge cleanly", paths.len());
    let file = match File::open(&scratch.path) {
        Ok(file) => file,
        Err(e) => return complain(err, EXIT_IO, format!("scratch file: {e}")),
    };
    let report = match BagReader::open(file).and_then(|mut reader| reader.verify()) {
        Ok(report) => report,
        Err(e) => return complain(err, bag_error_exit(&e), format!("merged image: {e}")),
    };
    write_verify_report(out, &report);
    if report.all_ok() {
        EXIT_OK
    } else {
        EXIT_VERIFY
    }
}

/// A temp file next to `anchor`, removed on drop.
struct ScratchFile {
    path: PathBuf,
}

impl ScratchFile {
    fn new(anchor: &Path) -> ScratchFile {
        let mut name = anchor.as_os_str().to_os_string();
        name.push(".merge-scratch");
        ScratchFile {
            path: PathBuf::from(name),
        }
    }
}

impl Drop for ScratchFile {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_verify_report(out: &mut dyn Write, report: &VerificationReport) {
    let word = |ok: bool| if ok { "ok" } else { "FAILED" };
    for segment in &report.segments {
        let _ = writeln!(
            out,
            "segment {}: payload {}, chain {}",
            segment.index,
            word(segment.payload_ok),
            word(segment.chain_ok)
        );
    }
    let _ = writeln!(out, "footer: {}", word(report.footer_ok));
    let _ = writeln!(out, "final chain: {}", word(report.final_ok));
    let _ = writeln!(out, "verdict: {}", verify_note(report));
}

fn verify_note(report: &VerificationReport) -> String {
    if report.all_ok() {
        "ok".to_string()
    } else if let Some(index) = report.first_failed_segment() {
        format!("FAILED (segment {index})")
    } else if !report.footer_ok {
        "FAILED (footer)".to_string()
    } else {
        "FAILED (final chain)".to_string()
    }
}

// ------------------------------------------------------------ split/merge

fn cmd_split(args: SplitArgs, operator: &str, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let mut reader = match open_bag(&args.bag, err) {
        Ok(reader) => reader,
        Err(code) => return code,
    };
    if args.max_size > DEFAULT_MAX_PART_SIZE {
        let _ = writeln!(
            err,
            "p2pdeb: warning: --max-size {} exceeds {DEFAULT_MAX_PART_SIZE}; parts may not fit \
             media with a 32-bit file size limit",
            args.max_size
        );
    }
    let plan = match plan_split(&mut reader, args.max_size) {
        Ok(plan) => plan,
        Err(e) => return complain(err, bag_error_exit(&e), format!("{}: {e}", args.bag.display())),
    };
    let prefix = args.out_prefix.as_ref().unwrap_or(&args.bag);
    let mut total_bytes = 0u64;
    for part in &plan.parts {
        let path = part_path(prefix, part.part_index);
        let write_result = (|| -> Result<(), BagError> {
            let mut sink = BufWriter::new(File::create(&path)?);
            plan.write_part(&mut reader, part.part_index, &mut sink)?;
            sink.into_inner().map_err(|e| BagError::Io(e.into_error()))?;
            Ok(())
        })();
        if let Err(e) = write_result {
            let _ = fs::remove_file(&path);
            return complain(err, bag_error_exit(&e), format!("{}: {e}", path.display()));
        }
        total_bytes += part.file_size;
        let _ = writeln!(
            out,
            "part {}: {} ({} bytes)",
            part.part_index,
            path.display(),
            part.file_size
        );
    }
    let _ = writeln!(
        out,
        "split into {} parts, {} bytes total",
        plan.part_count(),
        total_bytes
    );
    let note = format!("{} parts, max {} bytes", plan.part_count(), args.max_size);
    let final_chain = reader.footer().final_chain_hash;
    match record_custody(&args.bag, final_chain, operator, AuditAction::Split, note, err) {
        Ok(()) => EXIT_OK,
        Err(code) => code,
    }
}

/// `<prefix>.partNNNN`, zero-padded so shell globs sort in order.
pub fn part_path(prefix: &Path, index: u32) -> PathBuf {
    let mut name = prefix.as_os_str().to_os_string();
    name.push(format!(".part{index:04}"));
    PathBuf::from(name)
}

fn cmd_merge(args: MergeArgs, operator: &str, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let mut sources = Vec::with_capacity(args.parts.len());
    for path in &args.parts {
        match File::open(path) {
            Ok(file) => sources.push(file),
            Err(e) => return complain(err, EXIT_IO, format!("cannot open {}: {e}", path.display())),
        }
    }
    let merge_result = (|| -> Result<(), BagError> {
        let mut sink = BufWriter::new(File::create(&args.output)?);
        merge_parts(sources, &mut sink)?;
        sink.into_inner().map_err(|e| BagError::Io(e.into_error()))?;
        Ok(())
    })();
    if let Err(e) = merge_result {
        let _ = fs::remove_file(&args.output);
        return complain(err, bag_error_exit(&e), format!("merge: {e}"));
    }
    // The merged bag is a bag like any other; its sidecar records where
    // it came from.
    let reader = match open_bag(&args.output, err) {
        Ok(reader) => reader,
        Err(code) => return code,
    };
    let final_chain = reader.footer().final_chain_hash;
    let size = reader.file_len();
    let _ = writeln!(
        out,
        "merged {} parts into {} ({} bytes)",
        args.parts.len(),
        args.output.display(),
        size
    );
    let note = format!("merged from {} parts", args.parts.len());
    match record_custody(&args.output, final_chain, operator, AuditAction::Merged, note, err) {
        Ok(()) => EXIT_OK,
        Err(code) => code,
    }
}

// ----------------------------------------------------------------- export

/// Counts and fingerprints what passes through on the way to the file,
/// so the audit note can pin down exactly which bytes left the bag.
struct HashingWriter<W: Write> {
    inner: W,
    hasher: Sha256,
    bytes: u64,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        self.bytes += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

fn cmd_export(args: ExportArgs, operator: &str, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let mut reader = match open_bag(&args.bag, err) {
        Ok(reader) => reader,
        Err(code) => return code,
    };
    let report = match reader.verify() {
        Ok(report) => report,
        Err(e) => return complain(err, bag_error_exit(&e), format!("{}: {e}", args.bag.display())),
    };
    let final_chain = reader.footer().final_chain_hash;
    if !report.all_ok() && !args.force {
        let note = format!("export refused: {}", verify_note(&report));
        if let Err(code) =
            record_custody(&args.bag, final_chain, operator, AuditAction::Verified, note, err)
        {
            return code;
        }
        return complain(
            err,
            EXIT_VERIFY,
            format!(
                "{}: verification {}; export refused (--force overrides, and is logged)",
                args.bag.display(),
                verify_note(&report)
            ),
        );
    }
    let out_file = match File::create(&args.output) {
        Ok(file) => file,
        Err(e) => {
            return complain(
                err,
                EXIT_IO,
                format!("cannot create {}: {e}", args.output.display()),
            )
        }
    };
    let mut sink = HashingWriter {
        inner: BufWriter::new(out_file),
        hasher: Sha256::new(),
        bytes: 0,
    };
    if let Err(e) = reader.export_raw(&mut sink, args.force) {
        let _ = fs::remove_file(&args.output);
        return complain(err, bag_error_exit(&e), format!("{}: {e}", args.bag.display()));
    }
    let digest: [u8; 32] = sink.hasher.finalize().into();
    let bytes = sink.bytes;
    if let Err(e) = sink.inner.into_inner() {
        let _ = fs::remove_file(&args.output);
        return complain(err, EXIT_IO, format!("flushing {}: {e}", args.output.display()));
    }
    if !report.all_ok() {
        let note = format!("export --force with verification {}", verify_note(&report));
        if let Err(code) =
            record_custody(&args.bag, final_chain, operator, AuditAction::OverrideUsed, note, err)
        {
            return code;
        }
    }
    let packets = reader.footer().total_packets;
    let note = format!("{} packets, {} bytes, sha256 {}", packets, bytes, hexstr::encode(&digest));
    if let Err(code) =
        record_custody(&args.bag, final_chain, operator, AuditAction::Exported, note, err)
    {
        return code;
    }
    let _ = writeln!(
        out,
        "exported {} packets to {} ({} bytes, sha256 {})",
        packets,
        args.output.display(),
        bytes,
        hexstr::encode(&digest)
    );
    EXIT_OK
}

// --------------------------------------------------- report/inspect/audit

fn cmd_report(args: ReportArgs, operator: &str, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let reader = match open_bag(&args.bag, err) {
        Ok(reader) => reader,
        Err(code) => return code,
    };
    write_frequency(out, &reader.footer().stats, args.format);
    let final_chain = reader.footer().final_chain_hash;
    match record_custody(
        &args.bag,
        final_chain,
        operator,
        AuditAction::Inspected,
        "report".to_string(),
        err,
    ) {
        Ok(()) => EXIT_OK,
        Err(code) => code,
    }
}

fn cmd_inspect(args: InspectArgs, operator: &str, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let reader = match open_bag(&args.bag, err) {
        Ok(reader) => reader,
        Err(code) => return code,
    };
    let header = reader.header();
    let footer = reader.footer();
    let _ = writeln!(out, "container:        {}", args.bag.display());
    let _ = writeln!(out, "format version:   {}", header.format_version);
    let _ = writeln!(out, "hash algorithm:   {}", header.hash_algorithm.label());
    let _ = writeln!(out, "created (us):     {}", header.created_at_micros);
    let _ = writeln!(out, "snap length:      {}", header.snap_length);
    let _ = writeln!(out, "link type:        {}", header.link_type);
    let _ = writeln!(
        out,
        "signature digest: {}",
        hexstr::encode(&header.signature_set_digest)
    );
    let _ = writeln!(out, "metadata:");
    for (name, value) in header.metadata.fields() {
        let _ = writeln!(out, "  {name:<22} {value}");
    }
    let _ = writeln!(out, "segments:         {}", footer.segment_count);
    let _ = writeln!(out, "packets:          {}", footer.total_packets);
    let _ = writeln!(out, "payload bytes:    {}", footer.total_payload_bytes);
    let _ = writeln!(out, "candidates:       {}", footer.candidates.len());
    let _ = writeln!(out, "audit records:    {}", footer.audit_log.len());
    let _ = writeln!(
        out,
        "final chain:      {}",
        hexstr::encode(&footer.final_chain_hash)
    );
    let final_chain = footer.final_chain_hash;
    match record_custody(
        &args.bag,
        final_chain,
        operator,
        AuditAction::Inspected,
        "inspect".to_string(),
        err,
    ) {
        Ok(()) => EXIT_OK,
        Err(code) => code,
    }
}

fn write_audit_records(out: &mut dyn Write, log: &AuditLog) {
    for (index, record) in log.records().iter().enumerate() {
        let _ = writeln!(
            out,
            "  {index} t={} actor={} action={} obj={} note={}",
            record.timestamp_micros,
            record.actor,
            record.action.label(),
            &hexstr::encode(&record.object_digest)[..16],
            record.note
        );
    }
}

fn cmd_audit(args: AuditArgs, operator: &str, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let reader = match open_bag(&args.bag, err) {
        Ok(reader) => reader,
        Err(code) => return code,
    };
    let header_digest = reader.header_digest();
    let final_chain = reader.footer().final_chain_hash;
    let embedded = &reader.footer().audit_log;
    let _ = writeln!(out, "embedded audit log ({} records):", embedded.len());
    write_audit_records(out, embedded);
    let embedded_ok = *embedded.seed() == header_digest && embedded.verify(&header_digest).is_ok();
    let _ = writeln!(
        out,
        "embedded chain: {}",
        if embedded_ok { "ok" } else { "FAILED" }
    );

    let sidecar = sidecar_path(&args.bag);
    let mut sidecar_ok = true;
    if sidecar.exists() {
        match read_sidecar(&sidecar) {
            Ok(log) => {
                let _ = writeln!(
                    out,
                    "sidecar audit log ({} records): {}",
                    log.len(),
                    sidecar.display()
                );
                write_audit_records(out, &log);
                sidecar_ok = *log.seed() == final_chain && log.verify(&final_chain).is_ok();
                let _ = writeln!(
                    out,
                    "sidecar chain: {}",
                    if sidecar_ok { "ok" } else { "FAILED" }
                );
            }
            Err(e) => {
                return complain(err, audit_error_exit(&e), format!("{}: {e}", sidecar.display()))
            }
        }
    } else {
        let _ = writeln!(out, "sidecar audit log: none");
    }

    if sidecar_ok {
        // Viewing the custody trail is itself a custody event. A broken
        // sidecar is left as found: extending it would launder the break.
        if let Err(code) = record_custody(
            &args.bag,
            final_chain,
            operator,
            AuditAction::Inspected,
            "audit".to_string(),
            err,
        ) {
            return code;
        }
    }
    if embedded_ok && sidecar_ok {
        EXIT_OK
    } else {
        EXIT_VERIFY
    }
}

fn cmd_signatures(args: SignaturesArgs, out: &mut dyn Write) -> i32 {
    let set = SignatureSet::default_set();
    if args.dump {
        let _ = write!(out, "{}", set.source());
        return EXIT_OK;
    }
    let _ = writeln!(
        out,
        "{:<18} {:<12} {:<10} {:<9} {:>6} {:>7}  pattern",
        "id", "protocol", "category", "transport", "anchor", "min-len"
    );
    for signature in set.signatures() {
        let _ = writeln!(
            out,
            "{:<18} {:<12} {:<10} {:<9} {:>6} {:>7}  {}",
            signature.id,
            signature.protocol,
            signature.category,
            signature.transport.label(),
            signature.anchor_offset,
            signature.min_payload_length,
            hexstr::encode(&signature.pattern)
        );
    }
    let _ = writeln!(out, "set digest: sha256 {}", hexstr::encode(&set.digest()));
    EXIT_OK
}
