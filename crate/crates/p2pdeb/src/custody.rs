//! Hash-chained chain-of-custody audit log.
//!
//! Every action taken on evidence is recorded as an [`AuditRecord`];
//! each record carries a link hash `H(previous link || record bytes)`,
//! seeded from a digest of the object the log describes. Rewriting,
//! reordering or dropping any record breaks every link after it, so the
//! log is append-only in effect as well as by API.
//!
//! Actions before a bag is sealed live inside the bag itself. A sealed
//! bag is immutable, so later actions (verification, export, splitting)
//! go to a sidecar file next to the bag, using the same wire format and
//! seeded by the bag's final chain hash.

use std::fs::OpenOptions;
use std::io::{self, Read, Write};
use std::os::unix::io::AsRawFd;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Magic opening both the sidecar audit file and the in-bag audit
/// region.
pub const AUDIT_MAGIC: &[u8; 8] = b"P2PDEBAU";

/// Hard ceiling on one serialized record, to keep a corrupt length
/// field from forcing a huge allocation.
const MAX_RECORD_LEN: u32 = 16 * 1024 * 1024;

/// Current wall-clock time in microseconds since the epoch.
pub fn now_micros() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_micros() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuditAction {
    Created,
    SegmentAppended,
    Sealed,
    Verified,
    Split,
    Merged,
    Exported,
    Inspected,
    OverrideUsed,
}

impl AuditAction {
    pub fn label(&self) -> &'static str {
        match self {
            AuditAction::Created => "created",
            AuditAction::SegmentAppended => "segment_appended",
            AuditAction::Sealed => "sealed",
            AuditAction::Verified => "verified",
            AuditAction::Split => "split",
            AuditAction::Merged => "merged",
            AuditAction::Exported => "exported",
            AuditAction::Inspected => "inspected",
            AuditAction::OverrideUsed => "override_used",
        }
    }

    fn code(&self) -> u8 {
        match self {
            AuditAction::Created => 0,
            AuditAction::SegmentAppended => 1,
            AuditAction::Sealed => 2,
            AuditAction::Verified => 3,
            AuditAction::Split => 4,
            AuditAction::Merged => 5,
            AuditAction::Exported => 6,
            AuditAction::Inspected => 7,
            AuditAction::OverrideUsed => 8,
        }
    }

    fn from_code(code: u8) -> Option<AuditAction> {
        Some(match code {
            0 => AuditAction::Created,
            1 => AuditAction::SegmentAppended,
            2 => AuditAction::Sealed,
            3 => AuditAction::Verified,
            4 => AuditAction::Split,
            5 => AuditAction::Merged,
            6 => AuditAction::Exported,
            7 => AuditAction::Inspected,
            8 => AuditAction::OverrideUsed,
            _ => return None,
        })
    }
}

/// One custody event: who did what, when, to an object in which state.
/// `object_digest` is the bag's chain state at the time of the action
/// (the final chain hash once sealed).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditRecord {
    pub timestamp_micros: u64,
    pub actor: String,
    pub action: AuditAction,
    pub object_digest: [u8; 32],
    pub note: String,
}

impl AuditRecord {
    /// Byte form used both on the wire and as hash-chain input:
    /// u64 timestamp, u8 action, length-prefixed actor, 32-byte object
    /// digest, length-prefixed note. All integers little-endian.
    fn serialize(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.timestamp_micros.to_le_bytes());
        out.push(self.action.code());
        out.extend_from_slice(&(self.actor.len() as u32).to_le_bytes());
        out.extend_from_slice(self.actor.as_bytes());
        out.extend_from_slice(&self.object_digest);
        out.extend_from_slice(&(self.note.len() as u32).to_le_bytes());
        out.extend_from_slice(self.note.as_bytes());
    }

    fn parse(bytes: &[u8]) -> Result<AuditRecord, AuditError> {
        let bad = |message: &'static str| AuditError::Malformed { message };
        let mut at = 0usize;
        let take = |at: &mut usize, n: usize| -> Result<&[u8], AuditError> {
            let slice = bytes
                .get(*at..*at + n)
                .ok_or(bad("record shorter than its fields"))?;
            *at += n;
            Ok(slice)
        };
        let timestamp_micros = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap());
        let action = AuditAction::from_code(take(&mut at, 1)?[0]).ok_or(bad("unknown action"))?;
        let actor_len = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
        let actor = std::str::from_utf8(take(&mut at, actor_len)?)
            .map_err(|_| bad("actor is not UTF-8"))?
            .to_string();
        let object_digest: [u8; 32] = take(&mut at, 32)?.try_into().unwrap();
        let note_len = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
        let note = std::str::from_utf8(take(&mut at, note_len)?)
            .map_err(|_| bad("note is not UTF-8"))?
            .to_string();
        if at != bytes.len() {
            return Err(bad("record has trailing bytes"));
        }
        Ok(AuditRecord {
            timestamp_micros,
            actor,
            action,
            object_digest,
            note,
        })
    }
}

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed audit log: {message}")]
    Malformed { message: &'static str },
    #[error("audit chain broken at record {first_bad_index}")]
    ChainBroken { first_bad_index: usize },
    #[error("audit log seed does not match the object it describes")]
    SeedMismatch,
}

/// Result of chain verification: the index of the first record whose
/// link (or ordering) does not hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuditFault {
    pub first_bad_index: usize,
}

/// An ordered sequence of [`AuditRecord`]s with their link hashes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditLog {
    seed: [u8; 32],
    records: Vec<AuditRecord>,
    links: Vec<[u8; 32]>,
}

fn link_hash(prev: &[u8; 32], record_bytes: &[u8]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(prev);
    hasher.update(record_bytes);
    hasher.finalize().into()
}

impl AuditLog {
    pub fn new(seed: [u8; 32]) -> AuditLog {
        AuditLog {
            seed,
            records: Vec::new(),
            links: Vec::new(),
        }
    }

    pub fn seed(&self) -> &[u8; 32] {
        &self.seed
    }

    pub fn records(&self) -> &[AuditRecord] {
        &self.records
    }

    pub fn links(&self) -> &[[u8; 32]] {
        &self.links
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// The chain tail: the last link, or the seed for an empty log.
    pub fn last_link(&self) -> [u8; 32] {
        *self.links.last().unwrap_or(&self.seed)
    }

    /// Appends a record, computing its link. A timestamp behind the
    /// previous record is clamped to it and the note annotated
    /// "clock-regression", so the stored order is always monotonic.
    pub fn append(&mut self, mut record: AuditRecord) {
        if let Some(last) = self.records.last() {
            if record.timestamp_micros < last.timestamp_micros {
                record.timestamp_micros = last.timestamp_micros;
                if record.note.is_empty() {
                    record.note = "clock-regression".to_string();
                } else {
                    record.note.push_str("; clock-regression");
                }
            }
        }
        let mut bytes = Vec::new();
        record.serialize(&mut bytes);
        self.links.push(link_hash(&self.last_link(), &bytes));
        self.records.push(record);
    }

    /// Recomputes every link from the given seed and checks monotonic
    /// timestamps; reports the first record that does not hold.
    pub fn verify(&self, seed: &[u8; 32]) -> Result<(), AuditFault> {
        let mut prev = *seed;
        let mut last_ts = 0u64;
        let mut bytes = Vec::new();
        for (index, (record, stored_link)) in self.records.iter().zip(&self.links).enumerate() {
            bytes.clear();
            record.serialize(&mut bytes);
            let expect = link_hash(&prev, &bytes);
            if expect != *stored_link || record.timestamp_micros < last_ts {
                return Err(AuditFault {
                    first_bad_index: index,
                });
            }
            prev = expect;
            last_ts = record.timestamp_micros;
        }
        Ok(())
    }

    /// Serializes magic, seed, then each record length-prefixed and
    /// followed by its link. The stream is delimited by its container
    /// (file end for sidecars, region end inside a bag).
    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(AUDIT_MAGIC);
        out.extend_from_slice(&self.seed);
        let mut bytes = Vec::new();
        for (record, link) in self.records.iter().zip(&self.links) {
            bytes.clear();
            record.serialize(&mut bytes);
            out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
            out.extend_from_slice(&bytes);
            out.extend_from_slice(link);
        }
        out
    }

    /// Parses a complete wire image. Links are taken as stored; call
    /// [`AuditLog::verify`] to check them.
    pub fn from_wire(bytes: &[u8]) -> Result<AuditLog, AuditError> {
        let bad = |message: &'static str| AuditError::Malformed { message };
        if bytes.len() < AUDIT_MAGIC.len() + 32 {
            return Err(bad("shorter than magic plus seed"));
        }
        if &bytes[0..8] != AUDIT_MAGIC {
            return Err(bad("bad audit magic"));
        }
        let seed: [u8; 32] = bytes[8..40].try_into().unwrap();
        let mut log = AuditLog::new(seed);
        let mut at = 40usize;
        while at < bytes.len() {
            let len_raw = bytes
                .get(at..at + 4)
                .ok_or(bad("truncated record length"))?;
            let record_len = u32::from_le_bytes(len_raw.try_into().unwrap());
            if record_len > MAX_RECORD_LEN {
                return Err(bad("record length implausibly large"));
            }
            at += 4;
            let record_bytes = bytes
                .get(at..at + record_len as usize)
                .ok_or(bad("truncated record"))?;
            at += record_len as usize;
            let link: [u8; 32] = bytes
                .get(at..at + 32)
                .ok_or(bad("truncated link hash"))?
                .try_into()
                .unwrap();
            at += 32;
            log.records.push(AuditRecord::parse(record_bytes)?);
            log.links.push(link);
        }
        Ok(log)
    }
}

/// Exclusive advisory lock held for the lifetime of the wrapped file.
struct LockedFile {
    file: std::fs::File,
}

impl LockedFile {
    fn lock_exclusive(file: std::fs::File) -> io::Result<LockedFile> {
        if unsafe { libc::flock(file.as_raw_fd(), libc::LOCK_EX) } != 0 {
            return Err(io::Error::last_os_error());
        }
        Ok(LockedFile { file })
    }
}

impl Drop for LockedFile {
    fn drop(&mut self) {
        unsafe { libc::flock(self.file.as_raw_fd(), libc::LOCK_UN) };
    }
}

/// Reads and parses a sidecar audit file. The chain is not verified
/// here; callers decide how to treat a broken one.
pub fn read_sidecar(path: &Path) -> Result<AuditLog, AuditError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    AuditLog::from_wire(&bytes)
}

/// Appends one record to the sidecar audit file next to a sealed bag,
/// creating the file (with the given seed) if it does not exist yet.
///
/// The whole operation runs under an exclusive advisory lock. An
/// existing file must carry the same seed and an intact chain;
/// extending a broken chain would only launder it.
pub fn append_sidecar(path: &Path, seed: [u8; 32], record: AuditRecord) -> Result<(), AuditError> {
    let file = OpenOptions::new()
        .read(true)
        .append(true)
        .create(true)
        .open(path)?;
    let mut locked = LockedFile::lock_exclusive(file)?;
    let mut bytes = Vec::new();
    locked.file.read_to_end(&mut bytes)?;
    let mut log = if bytes.is_empty() {
        locked.file.write_all(AUDIT_MAGIC)?;
        locked.file.write_all(&seed)?;
        AuditLog::new(seed)
    } else {
        let log = AuditLog::from_wire(&bytes)?;
        if *log.seed() != seed {
            return Err(AuditError::SeedMismatch);
        }
        if let Err(fault) = log.verify(&seed) {
            return Err(AuditError::ChainBroken {
                first_bad_index: fault.first_bad_index,
            });
        }
        log
    };
    let before = log.len();
    log.append(record);
    // Re-serialize only the record just appended.
    let tail = &log.to_wire()[wire_len_of(&log, before)..];
    locked.file.write_all(tail)?;
    Ok(())
}

/// Byte length of the wire image covering magic, seed and the first
/// `records` records.
fn wire_len_of(log: &AuditLog, records: usize) -> usize {
    let mut len = 8 + 32;
    let mut bytes = Vec::new();
    for record in &log.records()[..records] {
        bytes.clear();
        record.serialize(&mut bytes);
        len += 4 + bytes.len() + 32;
    }
    len
}
