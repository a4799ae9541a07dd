//! Splitting a sealed bag into bounded-size parts and merging them back.
//!
//! Parts carry whole segments only — every part stays independently
//! hash-verifiable — plus a copy of the bag header and a continuity
//! hash tying it to the chain state where the previous part ended. The
//! final part also carries the original footer region, so merging is a
//! pure concatenation: header copy, then every part body in index
//! order, reproducing the source bag byte for byte.

use std::io::{Read, Seek, SeekFrom, Write};

use sha2::{Digest, Sha256};

use super::{malformed, BagError, BagHeader, BagReader, MAX_BLOCK_LEN, PART_MAGIC};

/// Fixed bytes before the embedded header copy: magic, part index,
/// part count, continuity digest.
pub const PART_PREFIX_LEN: u64 = 8 + 4 + 4 + 32;

/// Trailing digest over everything before it in the part file.
const PART_HASH_LEN: u64 = 32;

#[derive(Debug, Clone)]
pub struct PartPlan {
    pub part_index: u32,
    pub first_segment: u32,
    pub segment_count: u32,
    /// Absolute byte range of the source bag carried as this part's
    /// body. The last part's range extends through the footer.
    pub body_start: u64,
    pub body_end: u64,
    pub continuity: [u8; 32],
    /// Size of the part file this plan will produce.
    pub file_size: u64,
}

#[derive(Debug, Clone)]
pub struct SplitPlan {
    pub parts: Vec<PartPlan>,
}

impl SplitPlan {
    pub fn part_count(&self) -> u32 {
        self.parts.len() as u32
    }
}

/// Greedy packing of whole segments, in order, into parts of at most
/// `max_part_size` bytes. The footer region rides with the final part
/// when it fits, otherwise in one more part of its own.
pub fn plan_split<R: Read + Seek>(
    reader: &mut BagReader<R>,
    max_part_size: u64,
) -> Result<SplitPlan, BagError> {
    let header_len = reader.header_len();
    let overhead = PART_PREFIX_LEN + header_len + PART_HASH_LEN;
    let too_small = |required: u64, detail: &str| BagError::PartSizeTooSmall {
        max_part_size,
        required,
        detail: detail.to_string(),
    };
    if max_part_size <= overhead {
        return Err(too_small(overhead + 1, "fixed part overhead alone"));
    }
    let available = max_part_size - overhead;

    let infos = reader.segments()?;
    let footer_offset = reader.footer_offset();
    let file_len = reader.file_len();
    let footer_size = file_len - footer_offset;

    let mut parts: Vec<PartPlan> = Vec::new();
    let mut continuity = reader.header_digest();
    let mut current: Option<PartPlan> = None;
    for info in &infos {
        let seg_start = info.header_offset;
        let seg_end = info.payload_offset + info.payload_length;
        let seg_size = seg_end - seg_start;
        if seg_size > available {
            return Err(too_small(
                seg_size + overhead,
                &format!("segment {}", info.index),
            ));
        }
        match current.as_mut() {
            Some(part) if seg_end - part.body_start <= available => {
                part.body_end = seg_end;
                part.segment_count += 1;
            }
            _ => {
                if let Some(done) = current.take() {
                    continuity = infos[(done.first_segment + done.segment_count - 1) as usize]
                        .chain_hash;
                    parts.push(done);
                }
                current = Some(PartPlan {
                    part_index: parts.len() as u32,
                    first_segment: info.index,
                    segment_count: 1,
                    body_start: seg_start,
                    body_end: seg_end,
                    continuity,
                    file_size: 0,
                });
            }
        }
    }
    if let Some(done) = current.take() {
        continuity = infos[(done.first_segment + done.segment_count - 1) as usize].chain_hash;
        parts.push(done);
    }

    // Attach the footer region to the last part, or give it a part of
    // its own when it does not fit.
    match parts.last_mut() {
        Some(last) if (last.body_end - last.body_start) + footer_size <= available => {
            last.body_end = file_len;
        }
        _ => {
            if footer_size > available {
                return Err(too_small(footer_size + overhead, "footer region"));
            }
            parts.push(PartPlan {
                part_index: parts.len() as u32,
                first_segment: infos.len() as u32,
                segment_count: 0,
                body_start: footer_offset,
                body_end: file_len,
                continuity,
                file_size: 0,
            });
        }
    }

    for part in &mut parts {
        part.file_size = overhead + (part.body_end - part.body_start);
    }
    Ok(SplitPlan { parts })
}

/// `Write` fan-out into a sink and a running digest.
struct HashingTee<'a> {
    sink: &'a mut dyn Write,
    hasher: &'a mut Sha256,
}

impl Write for HashingTee<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.hasher.update(buf);
        self.sink.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.sink.flush()
    }
}

impl SplitPlan {
    /// Streams one planned part into `sink`: prefix, header copy, body
    /// range, trailing digest over all of it.
    pub fn write_part<R: Read + Seek>(
        &self,
        reader: &mut BagReader<R>,
        index: u32,
        sink: &mut dyn Write,
    ) -> Result<(), BagError> {
        let part = self
            .parts
            .get(index as usize)
            .unwrap_or_else(|| panic!("part {index} not in plan"));
        let mut hasher = Sha256::new();
        let mut prefix = Vec::with_capacity(PART_PREFIX_LEN as usize);
        prefix.extend_from_slice(PART_MAGIC);
        prefix.extend_from_slice(&part.part_index.to_le_bytes());
        prefix.extend_from_slice(&self.part_count().to_le_bytes());
        prefix.extend_from_slice(&part.continuity);
        {
            let mut tee = HashingTee {
                sink,
                hasher: &mut hasher,
            };
            tee.write_all(&prefix)?;
            reader.copy_range(0, reader.header_len(), &mut tee)?;
            reader.copy_range(part.body_start, part.body_end, &mut tee)?;
        }
        let digest: [u8; 32] = hasher.finalize().into();
        sink.write_all(&digest)?;
        sink.flush()?;
        Ok(())
    }
}

struct PartSource<R> {
    source: R,
    index: u32,
    count: u32,
    continuity: [u8; 32],
    header_raw: Vec<u8>,
    /// Offset of the body within the part file.
    body_file_start: u64,
    body_len: u64,
}

fn read_at<R: Read + Seek>(source: &mut R, pos: u64, buf: &mut [u8]) -> Result<(), BagError> {
    source.seek(SeekFrom::Start(pos))?;
    source.read_exact(buf)?;
    Ok(())
}

fn open_part<R: Read + Seek>(mut source: R, ordinal: usize) -> Result<PartSource<R>, BagError> {
    let file_len = source.seek(SeekFrom::End(0))?;
    source.seek(SeekFrom::Start(0))?;
    let mut prefix = [0u8; PART_PREFIX_LEN as usize];
    source
        .read_exact(&mut prefix)
        .map_err(|e| malformed(0, format!("part file {ordinal} truncated: {e}")))?;
    if &prefix[0..8] != PART_MAGIC {
        return Err(malformed(0, format!("part file {ordinal}: bad part magic")));
    }
    let index = u32::from_le_bytes(prefix[8..12].try_into().unwrap());
    let count = u32::from_le_bytes(prefix[12..16].try_into().unwrap());
    let continuity: [u8; 32] = prefix[16..48].try_into().unwrap();
    let (_, header_raw) = BagHeader::read_from(&mut source)?;
    let body_file_start = PART_PREFIX_LEN + header_raw.len() as u64;
    if file_len < body_file_start + PART_HASH_LEN {
        return Err(malformed(file_len, format!("part file {ordinal} truncated")));
    }
    let body_len = file_len - body_file_start - PART_HASH_LEN;

    // The trailing digest covers every byte before it.
    let mut stored_hash = [0u8; 32];
    read_at(&mut source, file_len - PART_HASH_LEN, &mut stored_hash)?;
    let mut hasher = Sha256::new();
    source.seek(SeekFrom::Start(0))?;
    let mut remaining = file_len - PART_HASH_LEN;
    let mut buf = vec![0u8; 256 * 1024];
    while remaining > 0 {
        let take = buf.len().min(remaining as usize);
        source.read_exact(&mut buf[..take])?;
        hasher.update(&buf[..take]);
        remaining -= take as u64;
    }
    if <[u8; 32]>::from(hasher.finalize()) != stored_hash {
        return Err(BagError::PartCorrupt { part_index: index });
    }

    Ok(PartSource {
        source,
        index,
        count,
        continuity,
        header_raw,
        body_file_start,
        body_len,
    })
}

/// Reassembles a complete part set into the original bag, verifying
/// part digests, header identity, index completeness and chain
/// continuity across part boundaries along the way. Parts may be given
/// in any order.
pub fn merge_parts<R: Read + Seek>(
    sources: Vec<R>,
    sink: &mut dyn Write,
) -> Result<(), BagError> {
    if sources.is_empty() {
        return Err(BagError::MissingPart { index: 0 });
    }
    let mut parts = Vec::with_capacity(sources.len());
    for (ordinal, source) in sources.into_iter().enumerate() {
        parts.push(open_part(source, ordinal)?);
    }

    let expected_count = parts[0].count;
    let reference_header = parts[0].header_raw.clone();
    for part in &parts {
        if part.header_raw != reference_header || part.count != expected_count {
            return Err(BagError::HeaderMismatch {
                part_index: part.index,
            });
        }
    }
    parts.sort_by_key(|p| p.index);
    for (expected, part) in parts.iter().enumerate() {
        let expected = expected as u32;
        if part.index != expected {
            if part.index > expected {
                return Err(BagError::MissingPart { index: expected });
            }
            return Err(malformed(0, format!("duplicate part index {}", part.index)));
        }
    }
    if parts.len() as u32 != expected_count {
        return Err(BagError::MissingPart {
            index: parts.len() as u32,
        });
    }

    let header_len = reference_header.len() as u64;
    let header_digest: [u8; 32] = Sha256::digest(&reference_header).into();

    // Reconstruct where each body sits in the merged bag, and find the
    // footer offset from the merged file's trailing eight bytes, which
    // end the last part's body.
    let mut body_abs_starts = Vec::with_capacity(parts.len());
    let mut abs = header_len;
    for part in &parts {
        body_abs_starts.push(abs);
        abs += part.body_len;
    }
    let total_len = abs;
    let last = parts.last_mut().unwrap();
    if last.body_len < 8 {
        return Err(malformed(total_len, "last part too short for a footer"));
    }
    let mut trailer = [0u8; 8];
    let trailer_pos = last.body_file_start + last.body_len - 8;
    read_at(&mut last.source, trailer_pos, &mut trailer)?;
    let footer_offset = u64::from_le_bytes(trailer);
    if footer_offset < header_len || footer_offset > total_len - 8 {
        return Err(malformed(total_len - 8, "footer offset out of range"));
    }

    // Continuity: walk segment headers (never payloads) across parts,
    // checking that indices keep counting and each part's continuity
    // digest equals the chain state where the previous part ended.
    let mut expected_chain = header_digest;
    let mut next_segment: u32 = 0;
    for (ordinal, part) in parts.iter_mut().enumerate() {
        if part.continuity != expected_chain {
            return Err(BagError::ContinuityMismatch {
                part_index: part.index,
            });
        }
        let abs_start = body_abs_starts[ordinal];
        let abs_end = abs_start + part.body_len;
        let boundary = abs_end.min(footer_offset);
        let mut pos = abs_start;
        while pos < boundary {
            if pos + 100 > boundary {
                return Err(malformed(pos, "segment straddles a part boundary"));
            }
            let mut head = [0u8; 100];
            read_at(&mut part.source, part.body_file_start + (pos - abs_start), &mut head)?;
            let index = u32::from_le_bytes(head[0..4].try_into().unwrap());
            if index != next_segment {
                return Err(malformed(
                    pos,
                    format!("segment index {index} where {next_segment} expected"),
                ));
            }
            let payload_length = u64::from_le_bytes(head[8..16].try_into().unwrap());
            let sidecar_length = u32::from_le_bytes(head[96..100].try_into().unwrap());
            if sidecar_length > MAX_BLOCK_LEN {
                return Err(malformed(pos + 96, "sidecar block implausibly large"));
            }
            let seg_end = pos
                .checked_add(100 + sidecar_length as u64)
                .and_then(|v| v.checked_add(payload_length))
                .ok_or_else(|| malformed(pos, "segment length overflow"))?;
            if seg_end > boundary {
                return Err(malformed(pos, "segment straddles a part boundary"));
            }
            expected_chain = head[64..96].try_into().unwrap();
            next_segment += 1;
            pos = seg_end;
        }
    }

    // Emit: the shared header once, then every body in order.
    sink.write_all(&reference_header)?;
    let mut buf = vec![0u8; 256 * 1024];
    for part in &mut parts {
        part.source.seek(SeekFrom::Start(part.body_file_start))?;
        let mut remaining = part.body_len;
        while remaining > 0 {
            let take = buf.len().min(remaining as usize);
            part.source.read_exact(&mut buf[..take])?;
            sink.write_all(&buf[..take])?;
            remaining -= take as u64;
        }
    }
    sink.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bag::testutil::sample_metadata;
    use crate::bag::{create_bag, BagConfig};
    use crate::classify::CategoryStats;
    use crate::pcap::PacketRecord;
    use std::io::Cursor;

    fn config() -> BagConfig {
        let mut config = BagConfig::new(65535, 1, [0x22; 32]);
        config.created_at_micros = 1_700_000_000_000_000;
        config.operator = "tester".to_string();
        config
    }

    /// Bag with three segments of payload sizes 4096, 4096, 2064.
    fn three_segment_bag() -> Vec<u8> {
        let mut writer = create_bag(&sample_metadata(), &config());
        for (i, payload_len) in [4080usize, 4080, 2048].into_iter().enumerate() {
            let record =
                PacketRecord::new(100 + i as u32, 0, payload_len as u32, vec![i as u8; payload_len])
                    .unwrap();
            writer.append_segment(&[record], &CategoryStats::new()).unwrap();
        }
        writer.seal(&[]).unwrap();
        writer.into_inner()
    }

    fn split_bytes(bag: &[u8], max_part_size: u64) -> Result<Vec<Vec<u8>>, BagError> {
        let mut reader = BagReader::open(Cursor::new(bag))?;
        let plan = plan_split(&mut reader, max_part_size)?;
        let mut out = Vec::new();
        for index in 0..plan.part_count() {
            let mut part = Vec::new();
            plan.write_part(&mut reader, index, &mut part)?;
            assert_eq!(
                part.len() as u64,
                plan.parts[index as usize].file_size,
                "planned size must match the bytes written"
            );
            assert!(part.len() as u64 <= max_part_size);
            out.push(part);
        }
        Ok(out)
    }

    fn merge_bytes(parts: &[Vec<u8>]) -> Result<Vec<u8>, BagError> {
        let sources: Vec<Cursor<&[u8]>> = parts.iter().map(|p| Cursor::new(p.as_slice())).collect();
        let mut out = Vec::new();
        merge_parts(sources, &mut out)?;
        Ok(out)
    }

    #[test]
    fn greedy_packing_matches_arithmetic() {
        let bag = three_segment_bag();
        let mut reader = BagReader::open(Cursor::new(&bag)).unwrap();
        let header_len = reader.header_len();
        // Room for exactly one full-size segment per part.
        let max = PART_PREFIX_LEN + header_len + 32 + (100 + 4096);
        let plan = plan_split(&mut reader, max).unwrap();
        assert_eq!(plan.part_count(), 3);
        assert_eq!(plan.parts[0].segment_count, 1);
        assert_eq!(plan.parts[1].segment_count, 1);
        assert_eq!(plan.parts[2].segment_count, 1);
        // The small third segment shares its part with the footer.
        assert_eq!(plan.parts[2].body_end, reader.file_len());

        let parts = split_bytes(&bag, max).unwrap();
        assert_eq!(merge_bytes(&parts).unwrap(), bag);
    }

    #[test]
    fn single_part_when_limit_covers_everything() {
        let bag = three_segment_bag();
        let parts = split_bytes(&bag, bag.len() as u64 + 1024).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(merge_bytes(&parts).unwrap(), bag);
    }

    #[test]
    fn limit_below_first_segment_is_rejected() {
        let bag = three_segment_bag();
        let mut reader = BagReader::open(Cursor::new(&bag)).unwrap();
        let header_len = reader.header_len();
        let max = PART_PREFIX_LEN + header_len + 32 + 100; // payload alone will not fit
        match plan_split(&mut reader, max) {
            Err(BagError::PartSizeTooSmall { detail, .. }) => {
                assert!(detail.contains("segment 0"), "got detail {detail:?}")
            }
            other => panic!("expected PartSizeTooSmall, got {other:?}"),
        }
        assert!(matches!(
            plan_split(&mut reader, 10),
            Err(BagError::PartSizeTooSmall { .. })
        ));
    }

    #[test]
    fn footer_gets_own_part_when_it_does_not_fit() {
        // Segments sized so each nearly fills a part, leaving no room
        // for the footer anywhere.
        let mut writer = create_bag(&sample_metadata(), &config());
        for (i, payload_len) in [4080usize, 4080, 4000].into_iter().enumerate() {
            let record =
                PacketRecord::new(100 + i as u32, 0, payload_len as u32, vec![i as u8; payload_len])
                    .unwrap();
            writer.append_segment(&[record], &CategoryStats::new()).unwrap();
        }
        writer.seal(&[]).unwrap();
        let bag = writer.into_inner();

        let mut reader = BagReader::open(Cursor::new(&bag)).unwrap();
        let header_len = reader.header_len();
        let footer_size = reader.file_len() - reader.footer_offset();
        let max = PART_PREFIX_LEN + header_len + 32 + (100 + 4096);
        assert!(100 + 4016 + footer_size > 100 + 4096);
        let plan = plan_split(&mut reader, max).unwrap();
        assert_eq!(plan.part_count(), 4);
        let tail = &plan.parts[3];
        assert_eq!(tail.segment_count, 0);
        assert_eq!(tail.body_start, reader.footer_offset());
        assert_eq!(tail.body_end, reader.file_len());

        let parts = split_bytes(&bag, max).unwrap();
        assert_eq!(merge_bytes(&parts).unwrap(), bag);
    }

    #[test]
    fn empty_bag_splits_and_merges() {
        let mut writer = create_bag(&sample_metadata(), &config());
        writer.seal(&[]).unwrap();
        let bag = writer.into_inner();
        let parts = split_bytes(&bag, bag.len() as u64 + 1024).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(merge_bytes(&parts).unwrap(), bag);
    }

    #[test]
    fn parts_merge_in_any_order()  {
        let bag = three_segment_bag();
        let reader = BagReader::open(Cursor::new(&bag)).unwrap();
        let header_len = reader.header_len();
        let max = PART_PREFIX_LEN + header_len + 32 + (100 + 4096);
        drop(reader);
        let mut parts = split_bytes(&bag, max).unwrap();
        parts.reverse();
        assert_eq!(merge_bytes(&parts).unwrap(), bag);
    }

    #[test]
    fn missing_part_is_reported() {
        let bag = three_segment_bag();
        let reader = BagReader::open(Cursor::new(&bag)).unwrap();
        let max = PART_PREFIX_LEN + reader.header_len() + 32 + (100 + 4096);
        drop(reader);
        let mut parts = split_bytes(&bag, max).unwrap();
        parts.remove(1);
        match merge_bytes(&parts) {
            Err(BagError::MissingPart { index: 1 }) => {}
            other => panic!("expected MissingPart 1, got {other:?}"),
        }
    }

    #[test]
    fn corrupted_part_body_is_reported() {
        let bag = three_segment_bag();
        let mut parts = split_bytes(&bag, bag.len() as u64 + 1024).unwrap();
        let mid = parts[0].len() / 2;
        parts[0][mid] ^= 0x01;
        match merge_bytes(&parts) {
            Err(BagError::PartCorrupt { part_index: 0 }) => {}
            other => panic!("expected PartCorrupt 0, got {other:?}"),
        }
    }

    #[test]
    fn continuity_mismatch_is_reported() {
        // A part whose digest is valid but whose continuity field lies:
        // write from a doctored plan.
        let bag = three_segment_bag();
        let mut reader = BagReader::open(Cursor::new(&bag)).unwrap();
        let max = PART_PREFIX_LEN + reader.header_len() + 32 + (100 + 4096);
        let mut plan = plan_split(&mut reader, max).unwrap();
        plan.parts[1].continuity = [0xde; 32];
        let mut parts = Vec::new();
        for index in 0..plan.part_count() {
            let mut part = Vec::new();
            plan.write_part(&mut reader, index, &mut part).unwrap();
            parts.push(part);
        }
        match merge_bytes(&parts) {
            Err(BagError::ContinuityMismatch { part_index: 1 }) => {}
            other => panic!("expected ContinuityMismatch 1, got {other:?}"),
        }
    }

    #[test]
    fn parts_from_different_bags_are_rejected() {
        let bag_a = three_segment_bag();
        let mut other_metadata = sample_metadata();
        other_metadata.exhibit_reference = "EXH-002".into();
        let mut writer = create_bag(&other_metadata, &config());
        let record = PacketRecord::new(100, 0, 4080, vec![1; 4080]).unwrap();
        writer.append_segment(&[record], &CategoryStats::new()).unwrap();
        writer.seal(&[]).unwrap();
        let bag_b = writer.into_inner();

        let reader = BagReader::open(Cursor::new(&bag_a)).unwrap();
        let max = PART_PREFIX_LEN + reader.header_len() + 32 + (100 + 4096);
        drop(reader);
        let parts_a = split_bytes(&bag_a, max).unwrap();
        let parts_b = split_bytes(&bag_b, max).unwrap();
        assert_eq!(parts_a.len(), 3);
        // Bag B's lone segment fills its part exactly, pushing the
        // footer into a part of its own.
        assert_eq!(parts_b.len(), 2);

        // Mixing bag B's part 0 with bag A's parts must fail: the
        // header copies disagree.
        let mixed = vec![parts_b[0].clone(), parts_a[1].clone(), parts_a[2].clone()];
        assert!(matches!(
            merge_bytes(&mixed),
            Err(BagError::HeaderMismatch { .. })
        ));
    }

    #[test]
    fn empty_input_and_garbage_are_rejected() {
        assert!(matches!(
            merge_parts(Vec::<Cursor<&[u8]>>::new(), &mut Vec::new()),
            Err(BagError::MissingPart { index: 0 })
        ));
        let garbage = vec![0u8; 100];
        assert!(matches!(
            merge_bytes(&[garbage]),
            Err(BagError::MalformedContainer { .. })
        ));
    }
}
