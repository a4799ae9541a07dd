//! The evidence bag container.
//!
//! A bag is a single file: a header carrying case metadata, a run of
//! hash-chained segments each holding verbatim pcap records plus a
//! classification sidecar, and a footer with cumulative statistics,
//! candidate patterns, the audit log and the final chain hash. Every
//! multi-byte integer is little-endian.
//!
//! The chain construction is `chain(i) = H(chain(i-1) || payload_hash(i))`
//! seeded with `H(serialized header)`, so tampering with either the
//! case metadata or any payload byte breaks every later link. Payloads
//! are stored uncompressed: export back to pcap is a straight copy, and
//! an examiner can locate packet bytes in a hex dump. (Compressing
//! segments was considered and rejected for exactly that reason.)
//!
//! Analysis metadata — sidecars, footer statistics, candidates — is
//! deliberately outside the hash chain. It annotates the evidence but is
//! not the evidence; export output is unaffected by any of it.

mod reader;
mod split;
mod writer;

pub use reader::{
    read_metadata, verify_bag, BagFooter, BagReader, SegmentInfo, SegmentVerification,
    VerificationReport,
};
pub use split::{merge_parts, plan_split, PartPlan, SplitPlan, PART_PREFIX_LEN};
pub use writer::BagWriter;

use std::io::{self, Read};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kv::{self, BlockError};

pub const BAG_MAGIC: &[u8; 8] = b"P2PDEB01";
pub const FOOTER_MARKER: &[u8; 8] = b"P2PDEBFT";
pub const PART_MAGIC: &[u8; 8] = b"P2PDEBSP";

pub const FORMAT_VERSION: u16 = 1;

/// Ceiling on any length-prefixed block read from a container, so a
/// corrupt length field cannot force a giant allocation.
pub(crate) const MAX_BLOCK_LEN: u32 = 64 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum BagError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed container at offset {offset}: {message}")]
    MalformedContainer { offset: u64, message: String },
    #[error("bag is already sealed")]
    SealedBag,
    #[error("segment must contain at least one record")]
    EmptySegment,
    #[error("part size {max_part_size} too small: {detail} requires {required} bytes")]
    PartSizeTooSmall {
        max_part_size: u64,
        required: u64,
        detail: String,
    },
    #[error("part {index} of the set is missing")]
    MissingPart { index: u32 },
    #[error("chain continuity broken at part {part_index}")]
    ContinuityMismatch { part_index: u32 },
    #[error("part {part_index} belongs to a different bag")]
    HeaderMismatch { part_index: u32 },
    #[error("part {part_index} does not match its own digest")]
    PartCorrupt { part_index: u32 },
    #[error("bag failed verification")]
    VerificationFailed { report: VerificationReport },
}

pub(crate) fn malformed(offset: u64, message: impl Into<String>) -> BagError {
    BagError::MalformedContainer {
        offset,
        message: message.into(),
    }
}

/// Hash algorithm used for payload digests and the chain. One value for
/// now; the on-disk field keeps the format open to successors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HashAlgorithm {
    #[default]
    Sha256,
}

impl HashAlgorithm {
    pub fn code(&self) -> u16 {
        match self {
            HashAlgorithm::Sha256 => 1,
        }
    }

    pub fn from_code(code: u16) -> Option<HashAlgorithm> {
        match code {
            1 => Some(HashAlgorithm::Sha256),
            _ => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            HashAlgorithm::Sha256 => "sha256",
        }
    }
}

/// The case description fields carried in every bag header. All eleven
/// are always serialized, empty or not: a court-facing container should
/// show its blanks rather than omit them.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CaseMetadata {
    pub investigating_agency: String,
    pub exhibit_reference: String,
    pub property_reference: String,
    pub case_suspect_name: String,
    pub description: String,
    pub seized_datetime: String,
    pub seized_location: String,
    pub producer_name: String,
    pub producer_signature: String,
    pub incident_reference: String,
    pub laboratory_reference: String,
}

impl CaseMetadata {
    /// Field names in serialization (sorted) order.
    pub const FIELD_NAMES: [&'static str; 11] = [
        "case_suspect_name",
        "description",
        "exhibit_reference",
        "incident_reference",
        "investigating_agency",
        "laboratory_reference",
        "producer_name",
        "producer_signature",
        "property_reference",
        "seized_datetime",
        "seized_location",
    ];

    /// (name, value) pairs in serialization order.
    pub fn fields(&self) -> [(&'static str, &str); 11] {
        [
            ("case_suspect_name", &self.case_suspect_name),
            ("description", &self.description),
            ("exhibit_reference", &self.exhibit_reference),
            ("incident_reference", &self.incident_reference),
            ("investigating_agency", &self.investigating_agency),
            ("laboratory_reference", &self.laboratory_reference),
            ("producer_name", &self.producer_name),
            ("producer_signature", &self.producer_signature),
            ("property_reference", &self.property_reference),
            ("seized_datetime", &self.seized_datetime),
            ("seized_location", &self.seized_location),
        ]
    }

    pub fn field_mut(&mut self, name: &str) -> Option<&mut String> {
        Some(match name {
            "case_suspect_name" => &mut self.case_suspect_name,
            "description" => &mut self.description,
            "exhibit_reference" => &mut self.exhibit_reference,
            "incident_reference" => &mut self.incident_reference,
            "investigating_agency" => &mut self.investigating_agency,
            "laboratory_reference" => &mut self.laboratory_reference,
            "producer_name" => &mut self.producer_name,
            "producer_signature" => &mut self.producer_signature,
            "property_reference" => &mut self.property_reference,
            "seized_datetime" => &mut self.seized_datetime,
            "seized_location" => &mut self.seized_location,
            _ => return None,
        })
    }

    pub fn to_block(&self) -> Vec<u8> {
        kv::to_block(self.fields())
    }

    /// Strict parse: exactly the eleven known keys, no more, no fewer.
    pub fn from_block(bytes: &[u8]) -> Result<CaseMetadata, BlockError> {
        let mut metadata = CaseMetadata::default();
        let mut seen = 0usize;
        for (key, value) in kv::from_block(bytes)? {
            let slot = metadata
                .field_mut(&key)
                .ok_or_else(|| BlockError::UnknownKey(key.clone()))?;
            *slot = value;
            seen += 1;
        }
        if seen != Self::FIELD_NAMES.len() {
            for name in Self::FIELD_NAMES {
                // Duplicates are caught by the kv parser, so a short
                // count means a key is absent entirely.
                if !kv::from_block(bytes)?.iter().any(|(k, _)| k == name) {
                    return Err(BlockError::Missing(name.to_string()));
                }
            }
        }
        Ok(metadata)
    }
}

/// Capture parameters fixed at bag creation.
#[derive(Debug, Clone)]
pub struct BagConfig {
    pub snap_length: u32,
    pub link_type: u32,
    pub hash_algorithm: HashAlgorithm,
    /// Digest of the signature set text in force during capture.
    pub signature_set_digest: [u8; 32],
    pub created_at_micros: u64,
    /// Operator identity recorded on audit entries.
    pub operator: String,
}

impl BagConfig {
    pub fn new(snap_length: u32, link_type: u32, signature_set_digest: [u8; 32]) -> BagConfig {
        BagConfig {
            snap_length,
            link_type,
            hash_algorithm: HashAlgorithm::Sha256,
            signature_set_digest,
            created_at_micros: crate::custody::now_micros(),
            operator: "unknown".to_string(),
        }
    }
}

/// Parsed bag header. The serialized form seeds the hash chain, which
/// is what makes the metadata tamper-evident.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BagHeader {
    pub format_version: u16,
    pub hash_algorithm: HashAlgorithm,
    pub snap_length: u32,
    pub link_type: u32,
    pub created_at_micros: u64,
    pub metadata: CaseMetadata,
    pub signature_set_digest: [u8; 32],
}

impl BagHeader {
    pub fn to_bytes(&self) -> Vec<u8> {
        let metadata_block = self.metadata.to_block();
        let mut out = Vec::with_capacity(32 + metadata_block.len() + 32);
        out.extend_from_slice(BAG_MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&self.hash_algorithm.code().to_le_bytes());
        out.extend_from_slice(&self.snap_length.to_le_bytes());
        out.extend_from_slice(&self.link_type.to_le_bytes());
        out.extend_from_slice(&self.created_at_micros.to_le_bytes());
        out.extend_from_slice(&(metadata_block.len() as u32).to_le_bytes());
        out.extend_from_slice(&metadata_block);
        out.extend_from_slice(&self.signature_set_digest);
        out
    }

    /// Reads and validates a header, returning it together with its
    /// exact serialized bytes (the chain seed input).
    pub fn read_from(source: &mut impl Read) -> Result<(BagHeader, Vec<u8>), BagError> {
        let mut fixed = [0u8; 32];
        source
            .read_exact(&mut fixed)
            .map_err(|e| malformed(0, format!("header truncated: {e}")))?;
        if &fixed[0..8] != BAG_MAGIC {
            return Err(malformed(0, "bad bag magic"));
        }
        let format_version = u16::from_le_bytes(fixed[8..10].try_into().unwrap());
        if format_version != FORMAT_VERSION {
            return Err(malformed(
                8,
                format!("unsupported format version {format_version}"),
            ));
        }
        let algorithm_code = u16::from_le_bytes(fixed[10..12].try_into().unwrap());
        let hash_algorithm = HashAlgorithm::from_code(algorithm_code)
            .ok_or_else(|| malformed(10, format!("unknown hash algorithm {algorithm_code}")))?;
        let snap_length = u32::from_le_bytes(fixed[12..16].try_into().unwrap());
        let link_type = u32::from_le_bytes(fixed[16..20].try_into().unwrap());
        let created_at_micros = u64::from_le_bytes(fixed[20..28].try_into().unwrap());
        let metadata_length = u32::from_le_bytes(fixed[28..32].try_into().unwrap());
        if metadata_length > MAX_BLOCK_LEN {
            return Err(malformed(28, "metadata block implausibly large"));
        }
        let mut metadata_block = vec![0u8; metadata_length as usize];
        source
            .read_exact(&mut metadata_block)
            .map_err(|e| malformed(32, format!("metadata block truncated: {e}")))?;
        let metadata = CaseMetadata::from_block(&metadata_block)
            .map_err(|e| malformed(32, format!("metadata block invalid: {e}")))?;
        let mut signature_set_digest = [0u8; 32];
        source
            .read_exact(&mut signature_set_digest)
            .map_err(|e| malformed(32 + metadata_length as u64, format!("header truncated: {e}")))?;

        let mut raw = Vec::with_capacity(64 + metadata_block.len());
        raw.extend_from_slice(&fixed);
        raw.extend_from_slice(&metadata_block);
        raw.extend_from_slice(&signature_set_digest);
        Ok((
            BagHeader {
                format_version,
                hash_algorithm,
                snap_length,
                link_type,
                created_at_micros,
                metadata,
                signature_set_digest,
            },
            raw,
        ))
    }

    /// The chain seed: digest of the serialized header.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }
}

/// Opens a writer over an in-memory buffer; retrieve the finished bytes
/// with [`BagWriter::into_inner`] after sealing.
pub fn create_bag(metadata: &CaseMetadata, config: &BagConfig) -> BagWriter<Vec<u8>> {
    BagWriter::create(Vec::new(), metadata, config).expect("memory sink cannot fail")
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::CaseMetadata;

    pub(crate) fn sample_metadata() -> CaseMetadata {
        CaseMetadata {
            investigating_agency: "Example Agency".into(),
            exhibit_reference: "EXH-001".into(),
            property_reference: "PROP-7".into(),
            case_suspect_name: "J. Doe".into(),
            description: "P2P capture test".into(),
            seized_datetime: "2026-01-15T10:30:00Z".into(),
            seized_location: "Lab 4".into(),
            producer_name: "operator-a".into(),
            producer_signature: "".into(),
            incident_reference: "INC-2026-0042".into(),
            laboratory_reference: "LAB-99".into(),
        }
    }
}
