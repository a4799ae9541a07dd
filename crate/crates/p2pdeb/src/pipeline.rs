//! The streaming capture path: packet source → classification →
//! segment rotation → bag writing.
//!
//! Exactly two activities run concurrently. A producer thread owns the
//! packet source and feeds a bounded queue; the calling thread
//! consumes, classifies, tallies, and writes segments. All bag and
//! statistics mutation happens on the consuming side, so the result is
//! identical to a single-threaded pass over the same packets. The
//! bounded queue makes any loss explicit: under [`DropPolicy::Block`]
//! the producer waits and nothing is ever dropped; under
//! [`DropPolicy::CountDrops`] (for sources that cannot be paused)
//! every discarded packet is counted.

use std::fs::File;
use std::io::{self, BufReader, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, TrySendError};
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::bag::{BagError, BagWriter};
use crate::classify::{
    classify_packet, CandidateSignature, CategoryStats, Cidr, SignatureSet, UnknownPatternTable,
    UnknownTableConfig, UNKNOWN_CATEGORY,
};
use crate::pcap::{
    decode_flow, PacketRecord, PcapError, PcapHeader, PcapReader, TimestampUnit,
    RECORD_HEADER_LEN,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    /// The source failed mid-run. The bag was still sealed with
    /// everything received up to the failure, and the failure is noted
    /// in its audit log; the summary covers the partial run.
    #[error("packet source failed: {message}")]
    Source {
        message: String,
        summary: Box<RunSummary>,
    },
    /// The bag writer failed; the bag is incomplete and unsealed.
    #[error(transparent)]
    Writer(#[from] BagError),
}

/// Anything that can hand over packets one at a time. `Ok(None)` means
/// the source is exhausted; an error ends the run but not the bag.
pub trait PacketSource {
    /// Link-layer type of the frames this source yields (1 = Ethernet).
    fn link_type(&self) -> u32;
    fn next_packet(&mut self) -> io::Result<Option<PacketRecord>>;
}

/// Replays a capture file as a packet source. Nanosecond timestamps
/// are truncated to the microsecond grid everything downstream uses.
pub struct FileReplaySource<R: Read> {
    reader: PcapReader<R>,
}

impl FileReplaySource<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self, PcapError> {
        FileReplaySource::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read> FileReplaySource<R> {
    pub fn new(source: R) -> Result<Self, PcapError> {
        Ok(FileReplaySource {
            reader: PcapReader::new(source)?,
        })
    }

    pub fn header(&self) -> &PcapHeader {
        self.reader.header()
    }
}

impl<R: Read> PacketSource for FileReplaySource<R> {
    fn link_type(&self) -> u32 {
        self.reader.header().link_type
    }

    fn next_packet(&mut self) -> io::Result<Option<PacketRecord>> {
        match self.reader.next_record() {
            Ok(Some(mut record)) => {
                if self.reader.header().timestamp_unit == TimestampUnit::Nanosecond {
                    record.ts_fraction /= 1_000;
                }
                Ok(Some(record))
            }
            Ok(None) => Ok(None),
            Err(PcapError::Io(e)) => Err(e),
            Err(other) => Err(io::Error::new(io::ErrorKind::InvalidData, other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropPolicy {
    /// Back-pressure the source when the queue is full; no loss.
    Block,
    /// Discard when the queue is full and count every discard.
    CountDrops,
}

/// When to close the open segment and start the next one. Any limit
/// reached rotates; time is measured on packet timestamps, not the
/// wall clock.
#[derive(Debug, Clone, Copy)]
pub struct RotationPolicy {
    pub max_packets: u64,
    pub max_bytes: u64,
    pub max_seconds: u64,
}

impl Default for RotationPolicy {
    fn default() -> RotationPolicy {
        RotationPolicy {
            max_packets: 10_000,
            max_bytes: 64 * 1024 * 1024,
            max_seconds: 60,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub rotation: RotationPolicy,
    /// Packets the queue between producer and consumer can hold.
    pub queue_capacity: usize,
    /// Networks considered "ours" when picking the remote endpoint of
    /// an unknown flow.
    pub home_networks: Vec<Cidr>,
    pub drop_policy: DropPolicy,
    /// Seconds between status lines; 0 disables them.
    pub status_interval_secs: u64,
    pub unknown_table: UnknownTableConfig,
    /// Occurrence threshold for reporting an unknown prefix.
    pub candidate_min_support: u64,
    /// Distinct-remote-endpoint threshold for reporting.
    pub candidate_min_endpoints: u64,
}

impl Default for PipelineConfig {
    fn default() -> PipelineConfig {
        PipelineConfig {
            rotation: RotationPolicy::default(),
            queue_capacity: 65_536,
            home_networks: Vec::new(),
            drop_policy: DropPolicy::Block,
            status_interval_secs: 5,
            unknown_table: UnknownTableConfig::default(),
            candidate_min_support: 20,
            candidate_min_endpoints: 5,
        }
    }
}

/// Cooperative stop signal for a running pipeline. Cloneable; any
/// clone stops the run. Requesting a stop twice is a no-op.
#[derive(Debug, Clone, Default)]
pub struct StopHandle {
    flag: Arc<AtomicBool>,
}

impl StopHandle {
    pub fn new() -> StopHandle {
        StopHandle::default()
    }

    pub fn request_stop(&self) {
        self.flag.store(true, Ordering::SeqCst);
    }

    pub fn is_stop_requested(&self) -> bool {
        self.flag.load(Ordering::SeqCst)
    }
}

/// What a finished (or stopped, or source-failed) run did. Always
/// `packets_in == packets_stored + packets_dropped`.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub packets_in: u64,
    pub packets_stored: u64,
    pub packets_dropped: u64,
    pub segments: u32,
    pub duration_secs: f64,
    pub stats: CategoryStats,
    pub candidates: Vec<CandidateSignature>,
}

/// Drains `source` into `writer`: every packet is classified and
/// counted, unknown payload prefixes are tabulated, segments rotate
/// per `config`, and the bag is sealed when the source ends, the stop
/// handle fires, or the source fails (noted in the audit log). Status
/// lines go to `status_out` every `status_interval_secs`.
pub fn run<S, W>(
    source: S,
    signatures: &SignatureSet,
    writer: &mut BagWriter<W>,
    config: &PipelineConfig,
    stop: &StopHandle,
    status_out: &mut dyn Write,
) -> Result<RunSummary, PipelineError>
where
    S: PacketSource + Send,
    W: Write,
{
    if writer.is_sealed() {
        return Err(BagError::SealedBag.into());
    }
    let started = Instant::now();
    let link_type = source.link_type();
    let max_packets = config.rotation.max_packets.max(1);
    let max_bytes = config.rotation.max_bytes.max(1);
    let max_span_micros = config.rotation.max_seconds.max(1).saturating_mul(1_000_000);
    let policy = config.drop_policy;

    let packets_in = AtomicU64::new(0);
    let packets_dropped = AtomicU64::new(0);
    let mut stored: u64 = 0;
    let mut live_stats = CategoryStats::new();
    let mut segment_stats = CategoryStats::new();
    let mut table = UnknownPatternTable::new(config.unknown_table);
    let mut pending: Vec<PacketRecord> = Vec::new();
    let mut pending_bytes: u64 = 0;
    let mut first_pending_ts: u64 = 0;
    let mut writer_error: Option<BagError> = None;

    let (tx, rx) = mpsc::sync_channel::<PacketRecord>(config.queue_capacity.max(1));

    let source_error: Option<String> = std::thread::scope(|scope| {
        let producer = scope.spawn({
            let packets_in = &packets_in;
            let packets_dropped = &packets_dropped;
            let mut source = source;
            move || -> Option<String> {
                loop {
                    if stop.is_stop_requested() {
                        return None;
                    }
                    match source.next_packet() {
                        Ok(Some(record)) => {
                            packets_in.fetch_add(1, Ordering::Relaxed);
                            match policy {
                                DropPolicy::Block => {
                                    if tx.send(record).is_err() {
                                        // Consumer gone: writer failure.
                                        return None;
                                    }
                                }
                                DropPolicy::CountDrops => match tx.try_send(record) {
                                    Ok(()) => {}
                                    Err(TrySendError::Full(_)) => {
                                        packets_dropped.fetch_add(1, Ordering::Relaxed);
                                    }
                                    Err(TrySendError::Disconnected(_)) => return None,
                                },
                            }
                        }
                        Ok(None) => return None,
                        Err(e) => return Some(e.to_string()),
                    }
                }
            }
        });

        let status_enabled = config.status_interval_secs > 0;
        let interval = Duration::from_secs(config.status_interval_secs.max(1));
        let mut next_status = Instant::now() + interval;
        let emit_status = |stored: u64,
                               live_stats: &CategoryStats,
                               table: &UnknownPatternTable,
                               status_out: &mut dyn Write| {
            let candidates = table
                .detect_candidates(config.candidate_min_support, config.candidate_min_endpoints)
                .len();
            write_status(
                status_out,
                started.elapsed().as_secs(),
                packets_in.load(Ordering::Relaxed),
                stored,
                packets_dropped.load(Ordering::Relaxed),
                live_stats,
                candidates,
            );
        };

        loop {
            let timeout = if status_enabled {
                next_status.saturating_duration_since(Instant::now())
            } else {
                Duration::from_secs(3_600)
            };
            match rx.recv_timeout(timeout) {
                Ok(record) => {
                    let ts = record.timestamp_micros(TimestampUnit::Microsecond);
                    let bytes = record.captured_length() as u64;
                    // Rotate first if this record would overflow the
                    // open segment's byte or time budget (a single
                    // over-budget record still gets a segment).
                    if !pending.is_empty()
                        && (pending_bytes + RECORD_HEADER_LEN as u64 + bytes > max_bytes
                            || ts.saturating_sub(first_pending_ts) >= max_span_micros)
                    {
                        if let Err(e) =
                            flush_pending(writer, &mut pending, &mut pending_bytes, &mut segment_stats)
                        {
                            writer_error = Some(e);
                            break;
                        }
                    }
                    {
                        let frame = record.payload();
                        let (flow, app_offset) = decode_flow(frame, link_type);
                        let app = &frame[app_offset..];
                        let verdict = classify_packet(app, &flow, signatures);
                        live_stats.record(verdict.category, bytes, ts);
                        segment_stats.record(verdict.category, bytes, ts);
                        if verdict.category == UNKNOWN_CATEGORY && !app.is_empty() {
                            table.observe(app, &flow, &config.home_networks, stored);
                        }
                    }
                    if pending.is_empty() {
                        first_pending_ts = ts;
                    }
                    pending_bytes += RECORD_HEADER_LEN as u64 + bytes;
                    pending.push(record);
                    stored += 1;
                    if pending.len() as u64 >= max_packets {
                        if let Err(e) =
                            flush_pending(writer, &mut pending, &mut pending_bytes, &mut segment_stats)
                        {
                            writer_error = Some(e);
                            break;
                        }
                    }
                    if status_enabled && Instant::now() >= next_status {
                        emit_status(stored, &live_stats, &table, status_out);
                        next_status = Instant::now() + interval;
                    }
                }
                Err(RecvTimeoutError::Timeout) => {
                    if status_enabled {
                        emit_status(stored, &live_stats, &table, status_out);
                        next_status = Instant::now() + interval;
                    }
                }
                Err(RecvTimeoutError::Disconnected) => break,
            }
        }
        drop(rx);
        match producer.join() {
            Ok(result) => result,
            Err(panic) => std::panic::resume_unwind(panic),
        }
    });

    if let Some(error) = writer_error {
        return Err(error.into());
    }
    flush_pending(writer, &mut pending, &mut pending_bytes, &mut segment_stats)?;
    let candidates =
        table.detect_candidates(config.candidate_min_support, config.candidate_min_endpoints);
    let closing_note = if let Some(message) = &source_error {
        Some(format!("source failed: {message}"))
    } else if stop.is_stop_requested() {
        Some("stopped by operator request".to_string())
    } else {
        None
    };
    writer.seal_with_note(&candidates, closing_note.as_deref())?;

    let summary = RunSummary {
        packets_in: packets_in.load(Ordering::Relaxed),
        packets_stored: stored,
        packets_dropped: packets_dropped.load(Ordering::Relaxed),
        segments: writer.segment_count(),
        duration_secs: started.elapsed().as_secs_f64(),
        stats: live_stats,
        candidates,
    };
    match source_error {
        Some(message) => Err(PipelineError::Source {
            message,
            summary: Box::new(summary),
        }),
        None => Ok(summary),
    }
}

/// Closes the open segment, if any, resetting its running totals.
fn flush_pending<W: Write>(
    writer: &mut BagWriter<W>,
    pending: &mut Vec<PacketRecord>,
    pending_bytes: &mut u64,
    segment_stats: &mut CategoryStats,
) -> Result<(), BagError> {
    if pending.is_empty() {
        return Ok(());
    }
    writer.append_segment(pending, segment_stats)?;
    pending.clear();
    *pending_bytes = 0;
    *segment_stats = CategoryStats::new();
    Ok(())
}

/// One machine-parseable progress line:
/// `status t=<sec> in=<n> stored=<n> dropped=<n> top=<cat:count,...> candidates=<n>`.
/// `top` lists up to three categories by packet count (`-` when none).
fn write_status(
    out: &mut dyn Write,
    elapsed_secs: u64,
    packets_in: u64,
    stored: u64,
    dropped: u64,
    stats: &CategoryStats,
    candidate_count: usize,
) {
    let mut top: Vec<(&str, u64)> = stats.entries().map(|(c, e)| (c, e.packets)).collect();
    top.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    top.truncate(3);
    let top_field = if top.is_empty() {
        "-".to_string()
    } else {
        top.iter()
            .map(|(category, n)| format!("{category}:{n}"))
            .collect::<Vec<String>>()
            .join(",")
    };
    // A failed status write must not abort a capture.
    let _ = writeln!(
        out,
        "status t={elapsed_secs} in={packets_in} stored={stored} dropped={dropped} top={top_field} candidates={candidate_count}"
    );
}
