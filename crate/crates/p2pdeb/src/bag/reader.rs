//! Reading, verification and export of sealed bags.

use std::io::{Read, Seek, SeekFrom, Write};

use sha2::{Digest, Sha256};

use super::{malformed, BagError, BagHeader, CaseMetadata, FOOTER_MARKER, MAX_BLOCK_LEN};
use crate::classify::{candidates_from_block, CandidateSignature, CategoryStats};
use crate::custody::AuditLog;
use crate::pcap::PcapHeader;

/// Ceiling on the whole footer region (statistics, candidates, audit
/// log). Far beyond anything a real capture produces; present so a
/// corrupt offset cannot demand the file's worth of memory.
const MAX_FOOTER_LEN: u64 = 1024 * 1024 * 1024;

const COPY_CHUNK: usize = 256 * 1024;

/// Everything the footer stores about a sealed bag.
#[derive(Debug, Clone)]
pub struct BagFooter {
    pub segment_count: u32,
    pub total_packets: u64,
    pub total_payload_bytes: u64,
    pub final_chain_hash: [u8; 32],
    pub stats: CategoryStats,
    pub candidates: Vec<CandidateSignature>,
    pub audit_log_offset: u64,
    pub audit_log: AuditLog,
}

/// A segment's header fields plus where its payload lives in the file.
#[derive(Debug, Clone)]
pub struct SegmentInfo {
    pub index: u32,
    pub packet_count: u32,
    pub payload_length: u64,
    pub first_ts: u64,
    pub last_ts: u64,
    pub payload_hash: [u8; 32],
    pub chain_hash: [u8; 32],
    pub sidecar: CategoryStats,
    pub header_offset: u64,
    pub payload_offset: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentVerification {
    pub index: u32,
    /// Stored payload hash matches the payload bytes.
    pub payload_ok: bool,
    /// Stored chain hash matches the chain recomputed from actual
    /// payload bytes; a tampered segment fails every link after it.
    pub chain_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerificationReport {
    pub segments: Vec<SegmentVerification>,
    /// Footer totals match the segment walk and the audit chain holds.
    pub footer_ok: bool,
    /// Stored final chain hash equals the recomputed chain tail.
    pub final_ok: bool,
}

impl VerificationReport {
    pub fn all_ok(&self) -> bool {
        self.footer_ok
            && self.final_ok
            && self.segments.iter().all(|s| s.payload_ok && s.chain_ok)
    }

    /// Index of the first segment that fails either check.
    pub fn first_failed_segment(&self) -> Option<u32> {
        self.segments
            .iter()
            .find(|s| !(s.payload_ok && s.chain_ok))
            .map(|s| s.index)
    }
}

/// Random-access reader over a sealed bag. Opening parses header and
/// footer only; segment payloads are touched exclusively by the
/// operations that need them, so metadata inspection of a huge bag
/// stays cheap.
pub struct BagReader<R: Read + Seek> {
    source: R,
    header: BagHeader,
    header_len: u64,
    header_digest: [u8; 32],
    footer: BagFooter,
    footer_offset: u64,
    file_len: u64,
    segment_cache: Option<Vec<SegmentInfo>>,
}

impl<R: Read + Seek> BagReader<R> {
    pub fn open(mut source: R) -> Result<BagReader<R>, BagError> {
        let file_len = source.seek(SeekFrom::End(0))?;
        if file_len < 8 {
            return Err(malformed(0, "file too short for a bag"));
        }
        source.seek(SeekFrom::Start(0))?;
        let (header, raw_header) = BagHeader::read_from(&mut source)?;
        let header_len = raw_header.len() as u64;
        let header_digest: [u8; 32] = Sha256::digest(&raw_header).into();

        source.seek(SeekFrom::Start(file_len - 8))?;
        let mut trailer = [0u8; 8];
        source.read_exact(&mut trailer)?;
        let footer_offset = u64::from_le_bytes(trailer);
        if footer_offset < header_len || footer_offset > file_len - 8 {
            return Err(malformed(file_len - 8, "footer offset out of range"));
        }
        let region_len = file_len - footer_offset;
        if region_len > MAX_FOOTER_LEN {
            return Err(malformed(footer_offset, "footer region implausibly large"));
        }
        source.seek(SeekFrom::Start(footer_offset))?;
        let mut region = vec![0u8; region_len as usize];
        source.read_exact(&mut region)?;
        let footer = parse_footer(&region, footer_offset)?;

        Ok(BagReader {
            source,
            header,
            header_len,
            header_digest,
            footer,
            footer_offset,
            file_len,
            segment_cache: None,
        })
    }

    pub fn header(&self) -> &BagHeader {
        &self.header
    }

    pub fn metadata(&self) -> &CaseMetadata {
        &self.header.metadata
    }

    pub fn footer(&self) -> &BagFooter {
        &self.footer
    }

    /// Digest of the serialized header: the chain seed and the audit
    /// seed of the in-bag log.
    pub fn header_digest(&self) -> [u8; 32] {
        self.header_digest
    }

    pub fn header_len(&self) -> u64 {
        self.header_len
    }

    pub fn footer_offset(&self) -> u64 {
        self.footer_offset
    }

    pub fn file_len(&self) -> u64 {
        self.file_len
    }

    /// Walks the segment headers (skipping payload bytes) and returns
    /// their descriptions. Cached after the first walk.
    pub fn segments(&mut self) -> Result<Vec<SegmentInfo>, BagError> {
        if let Some(cached) = &self.segment_cache {
            return Ok(cached.clone());
        }
        let mut infos = Vec::with_capacity(self.footer.segment_count as usize);
        let mut pos = self.header_len;
        for expected_index in 0..self.footer.segment_count {
            if pos + 100 > self.footer_offset {
                return Err(malformed(pos, "segment header runs into footer"));
            }
            self.source.seek(SeekFrom::Start(pos))?;
            let mut head = [0u8; 100];
            self.source.read_exact(&mut head)?;
            let index = u32::from_le_bytes(head[0..4].try_into().unwrap());
            if index != expected_index {
                return Err(malformed(
                    pos,
                    format!("segment index {index} where {expected_index} expected"),
                ));
            }
            let packet_count = u32::from_le_bytes(head[4..8].try_into().unwrap());
            let payload_length = u64::from_le_bytes(head[8..16].try_into().unwrap());
            let first_ts = u64::from_le_bytes(head[16..24].try_into().unwrap());
            let last_ts = u64::from_le_bytes(head[24..32].try_into().unwrap());
            let payload_hash: [u8; 32] = head[32..64].try_into().unwrap();
            let chain_hash: [u8; 32] = head[64..96].try_into().unwrap();
            let sidecar_length = u32::from_le_bytes(head[96..100].try_into().unwrap());
            if sidecar_length > MAX_BLOCK_LEN
                || pos + 100 + sidecar_length as u64 > self.footer_offset
            {
                return Err(malformed(pos + 96, "sidecar block out of bounds"));
            }
            let mut sidecar_block = vec![0u8; sidecar_length as usize];
            self.source.read_exact(&mut sidecar_block)?;
            let sidecar = CategoryStats::from_block(&sidecar_block)
                .map_err(|e| malformed(pos + 100, format!("sidecar block invalid: {e}")))?;
            let payload_offset = pos + 100 + sidecar_length as u64;
            if payload_offset + payload_length > self.footer_offset {
                return Err(malformed(payload_offset, "payload runs past footer"));
            }
            infos.push(SegmentInfo {
                index,
                packet_count,
                payload_length,
                first_ts,
                last_ts,
                payload_hash,
                chain_hash,
                sidecar,
                header_offset: pos,
                payload_offset,
            });
            pos = payload_offset + payload_length;
        }
        if pos != self.footer_offset {
            return Err(malformed(pos, "gap between segments and footer"));
        }
        self.segment_cache = Some(infos.clone());
        Ok(infos)
    }

    /// Copies raw bag bytes `[start, end)` into `sink`.
    pub fn copy_range(
        &mut self,
        start: u64,
        end: u64,
        sink: &mut dyn Write,
    ) -> Result<(), BagError> {
        debug_assert!(start <= end && end <= self.file_len);
        self.source.seek(SeekFrom::Start(start))?;
        let mut remaining = end - start;
        let mut buf = vec![0u8; COPY_CHUNK.min(remaining as usize).max(1)];
        while remaining > 0 {
            let take = COPY_CHUNK.min(remaining as usize);
            self.source.read_exact(&mut buf[..take])?;
            sink.write_all(&buf[..take])?;
            remaining -= take as u64;
        }
        Ok(())
    }

    fn hash_payload(&mut self, info: &SegmentInfo) -> Result<[u8; 32], BagError> {
        self.source.seek(SeekFrom::Start(info.payload_offset))?;
        let mut hasher = Sha256::new();
        let mut remaining = info.payload_length;
        let mut buf = vec![0u8; COPY_CHUNK];
        while remaining > 0 {
            let take = COPY_CHUNK.min(remaining as usize);
            self.source.read_exact(&mut buf[..take])?;
            hasher.update(&buf[..take]);
            remaining -= take as u64;
        }
        Ok(hasher.finalize().into())
    }

    /// Recomputes every payload hash and the full chain from the actual
    /// bytes, then checks footer totals, the in-bag audit chain and the
    /// final chain hash. Read-only; the input is never altered.
    pub fn verify(&mut self) -> Result<VerificationReport, BagError> {
        let infos = self.segments()?;
        let mut chain = self.header_digest;
        let mut segments = Vec::with_capacity(infos.len());
        let mut packets: u64 = 0;
        let mut payload_bytes: u64 = 0;
        for info in &infos {
            let recomputed = self.hash_payload(info)?;
            let mut chain_input = [0u8; 64];
            chain_input[..32].copy_from_slice(&chain);
            chain_input[32..].copy_from_slice(&recomputed);
            chain = Sha256::digest(chain_input).into();
            segments.push(SegmentVerification {
                index: info.index,
                payload_ok: recomputed == info.payload_hash,
                chain_ok: chain == info.chain_hash,
            });
            packets += info.packet_count as u64;
            payload_bytes += info.payload_length;
        }
        let totals_ok = self.footer.total_packets == packets
            && self.footer.total_payload_bytes == payload_bytes;
        let audit_ok = self.footer.audit_log.verify(&self.header_digest).is_ok();
        Ok(VerificationReport {
            segments,
            footer_ok: totals_ok && audit_ok,
            final_ok: self.footer.final_chain_hash == chain,
        })
    }

    /// Verifies, then writes a standard pcap file: global header from
    /// the bag header's capture parameters, segment payloads verbatim.
    /// A bag that fails verification is only exported when
    /// `allow_tampered` is set; the caller is expected to record that
    /// override in the audit log.
    pub fn export_raw(
        &mut self,
        sink: &mut dyn Write,
        allow_tampered: bool,
    ) -> Result<VerificationReport, BagError> {
        let report = self.verify()?;
        if !report.all_ok() && !allow_tampered {
            return Err(BagError::VerificationFailed { report });
        }
        let pcap_header = PcapHeader::canonical(self.header.snap_length, self.header.link_type);
        sink.write_all(&pcap_header.to_bytes())?;
        for info in self.segments()? {
            self.copy_range(info.payload_offset, info.payload_offset + info.payload_length, sink)?;
        }
        sink.flush()?;
        Ok(report)
    }
}

fn parse_footer(region: &[u8], footer_offset: u64) -> Result<BagFooter, BagError> {
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize, what: &str| -> Result<&[u8], BagError> {
        let slice = region
            .get(*at..*at + n)
            .ok_or_else(|| malformed(footer_offset + *at as u64, format!("truncated {what}")))?;
        *at += n;
        Ok(slice)
    };
    if take(&mut at, 8, "footer marker")? != FOOTER_MARKER {
        return Err(malformed(footer_offset, "bad footer marker"));
    }
    let segment_count = u32::from_le_bytes(take(&mut at, 4, "segment count")?.try_into().unwrap());
    let total_packets = u64::from_le_bytes(take(&mut at, 8, "packet total")?.try_into().unwrap());
    let total_payload_bytes =
        u64::from_le_bytes(take(&mut at, 8, "payload total")?.try_into().unwrap());
    let final_chain_hash: [u8; 32] = take(&mut at, 32, "final chain hash")?.try_into().unwrap();

    let stats_len = u32::from_le_bytes(take(&mut at, 4, "stats length")?.try_into().unwrap());
    if stats_len > MAX_BLOCK_LEN {
        return Err(malformed(footer_offset + at as u64, "stats block implausibly large"));
    }
    let stats_at = at;
    let stats = CategoryStats::from_block(take(&mut at, stats_len as usize, "stats block")?)
        .map_err(|e| malformed(footer_offset + stats_at as u64, format!("stats block invalid: {e}")))?;

    let cand_len = u32::from_le_bytes(take(&mut at, 4, "candidates length")?.try_into().unwrap());
    if cand_len > MAX_BLOCK_LEN {
        return Err(malformed(footer_offset + at as u64, "candidates block implausibly large"));
    }
    let cand_at = at;
    let candidates = candidates_from_block(take(&mut at, cand_len as usize, "candidates block")?)
        .map_err(|e| {
            malformed(footer_offset + cand_at as u64, format!("candidates block invalid: {e}"))
        })?;

    let audit_log_offset =
        u64::from_le_bytes(take(&mut at, 8, "audit log offset")?.try_into().unwrap());
    if audit_log_offset != footer_offset + at as u64 {
        return Err(malformed(footer_offset + at as u64 - 8, "audit log offset inconsistent"));
    }
    if region.len() < at + 8 {
        return Err(malformed(footer_offset + at as u64, "truncated audit region"));
    }
    let audit_region = &region[at..region.len() - 8];
    let audit_log = AuditLog::from_wire(audit_region)
        .map_err(|e| malformed(audit_log_offset, format!("audit log invalid: {e}")))?;

    Ok(BagFooter {
        segment_count,
        total_packets,
        total_payload_bytes,
        final_chain_hash,
        stats,
        candidates,
        audit_log_offset,
        audit_log,
    })
}

/// Verifies a complete in-memory bag.
pub fn verify_bag(bytes: &[u8]) -> Result<VerificationReport, BagError> {
    BagReader::open(std::io::Cursor::new(bytes))?.verify()
}

/// Returns the case metadata and footer summary without touching any
/// segment payload; I/O is bounded by header and footer size alone.
pub fn read_metadata<R: Read + Seek>(source: R) -> Result<(CaseMetadata, BagFooter), BagError> {
    let reader = BagReader::open(source)?;
    Ok((reader.header.metadata.clone(), reader.footer))
}
