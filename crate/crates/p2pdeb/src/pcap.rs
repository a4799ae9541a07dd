//! Classic pcap reading and writing.
//!
//! Both byte orders and both timestamp resolutions (microsecond and
//! nanosecond magics) are accepted on input. Output is always produced
//! in the requested order; the writer emits a version 2.4 header with
//! zeroed timezone/accuracy fields, which is what every fresh capture
//! tool writes in practice.
//!
//! Parsing is total: any malformed or truncated input yields a typed
//! error, never a panic, and the reader keeps allocation bounded by the
//! bytes actually present in the stream.

use std::io::{self, Read, Write};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};

use thiserror::Error;

/// File-level magic for microsecond timestamps, as it appears on disk in
/// big-endian files.
const MAGIC_MICROS: u32 = 0xa1b2_c3d4;
/// File-level magic for nanosecond timestamps.
const MAGIC_NANOS: u32 = 0xa1b2_3c4d;

pub const GLOBAL_HEADER_LEN: usize = 24;
pub const RECORD_HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum PcapError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("unrecognized pcap magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("pcap header truncated: got {got} of {GLOBAL_HEADER_LEN} bytes")]
    TruncatedHeader { got: usize },
    #[error("record at offset {offset} truncated: expected {expected} more bytes, got {got}")]
    TruncatedRecord {
        offset: u64,
        expected: usize,
        got: usize,
    },
    #[error(
        "record at offset {offset} claims {captured_length} captured bytes, over snap length {snap_length}"
    )]
    OversizedRecord {
        offset: u64,
        captured_length: u32,
        snap_length: u32,
    },
    #[error(
        "record at offset {offset} claims {captured_length} captured of {original_length} original bytes"
    )]
    BadRecordLength {
        offset: u64,
        captured_length: u32,
        original_length: u32,
    },
    #[error("record invariant violated: {0}")]
    InvariantViolation(&'static str),
}

/// Field byte order of a pcap file. `Native` is the order in which the
/// magic reads back as `a1 b2 c3 d4` on disk, i.e. big-endian fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ByteOrder {
    Native,
    Swapped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimestampUnit {
    Microsecond,
    Nanosecond,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PcapHeader {
    pub byte_order: ByteOrder,
    pub timestamp_unit: TimestampUnit,
    pub version_major: u16,
    pub version_minor: u16,
    pub snap_length: u32,
    pub link_type: u32,
}

impl PcapHeader {
    /// Header for a fresh capture in canonical form: native order,
    /// microsecond timestamps, version 2.4.
    pub fn canonical(snap_length: u32, link_type: u32) -> Self {
        PcapHeader {
            byte_order: ByteOrder::Native,
            timestamp_unit: TimestampUnit::Microsecond,
            version_major: 2,
            version_minor: 4,
            snap_length,
            link_type,
        }
    }

    pub fn parse(bytes: &[u8]) -> Result<PcapHeader, PcapError> {
        if bytes.len() < GLOBAL_HEADER_LEN {
            return Err(PcapError::TruncatedHeader { got: bytes.len() });
        }
        let magic_be = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
        let (byte_order, timestamp_unit) = match magic_be {
            MAGIC_MICROS => (ByteOrder::Native, TimestampUnit::Microsecond),
            MAGIC_NANOS => (ByteOrder::Native, TimestampUnit::Nanosecond),
            m if m.swap_bytes() == MAGIC_MICROS => (ByteOrder::Swapped, TimestampUnit::Microsecond),
            m if m.swap_bytes() == MAGIC_NANOS => (ByteOrder::Swapped, TimestampUnit::Nanosecond),
            _ => return Err(PcapError::BadMagic(bytes[0..4].try_into().unwrap())),
        };
        let u16_at = |off: usize| -> u16 {
            let raw: [u8; 2] = bytes[off..off + 2].try_into().unwrap();
            match byte_order {
                ByteOrder::Native => u16::from_be_bytes(raw),
                ByteOrder::Swapped => u16::from_le_bytes(raw),
            }
        };
        let u32_at = |off: usize| -> u32 {
            let raw: [u8; 4] = bytes[off..off + 4].try_into().unwrap();
            match byte_order {
                ByteOrder::Native => u32::from_be_bytes(raw),
                ByteOrder::Swapped => u32::from_le_bytes(raw),
            }
        };
        Ok(PcapHeader {
            byte_order,
            timestamp_unit,
            version_major: u16_at(4),
            version_minor: u16_at(6),
            snap_length: u32_at(16),
            link_type: u32_at(20),
        })
    }

    /// Serializes the header in its own byte order. Timezone offset and
    /// timestamp accuracy are written as zero.
    pub fn to_bytes(&self) -> [u8; GLOBAL_HEADER_LEN] {
        let magic = match self.timestamp_unit {
            TimestampUnit::Microsecond => MAGIC_MICROS,
            TimestampUnit::Nanosecond => MAGIC_NANOS,
        };
        let mut out = [0u8; GLOBAL_HEADER_LEN];
        match self.byte_order {
            ByteOrder::Native => {
                out[0..4].copy_from_slice(&magic.to_be_bytes());
                out[4..6].copy_from_slice(&self.version_major.to_be_bytes());
                out[6..8].copy_from_slice(&self.version_minor.to_be_bytes());
                out[16..20].copy_from_slice(&self.snap_length.to_be_bytes());
                out[20..24].copy_from_slice(&self.link_type.to_be_bytes());
            }
            ByteOrder::Swapped => {
                out[0..4].copy_from_slice(&magic.to_le_bytes());
                out[4..6].copy_from_slice(&self.version_major.to_le_bytes());
                out[6..8].copy_from_slice(&self.version_minor.to_le_bytes());
                out[16..20].copy_from_slice(&self.snap_length.to_le_bytes());
                out[20..24].copy_from_slice(&self.link_type.to_le_bytes());
            }
        }
        out
    }
}

/// One captured packet. The captured length is always `payload.len()`;
/// the constructor rejects records whose captured length would exceed
/// the original wire length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketRecord {
    pub ts_seconds: u32,
    /// Sub-second part of the timestamp, in the unit of the enclosing
    /// stream (microseconds for everything this tool writes).
    pub ts_fraction: u32,
    pub original_length: u32,
    payload: Vec<u8>,
}

impl PacketRecord {
    pub fn new(
        ts_seconds: u32,
        ts_fraction: u32,
        original_length: u32,
        payload: Vec<u8>,
    ) -> Result<PacketRecord, PcapError> {
        if payload.len() > u32::MAX as usize {
            return Err(PcapError::InvariantViolation("payload exceeds u32 range"));
        }
        if payload.len() as u32 > original_length {
            return Err(PcapError::InvariantViolation(
                "captured length exceeds original length",
            ));
        }
        Ok(PacketRecord {
            ts_seconds,
            ts_fraction,
            original_length,
            payload,
        })
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn captured_length(&self) -> u32 {
        self.payload.len() as u32
    }

    /// Timestamp as microseconds since the epoch. Nanosecond fractions
    /// are truncated toward zero.
    pub fn timestamp_micros(&self, unit: TimestampUnit) -> u64 {
        let frac = match unit {
            TimestampUnit::Microsecond => self.ts_fraction as u64,
            TimestampUnit::Nanosecond => self.ts_fraction as u64 / 1_000,
        };
        self.ts_seconds as u64 * 1_000_000 + frac
    }
}

/// Appends the 16-byte record header plus payload in the given order.
pub fn encode_record(record: &PacketRecord, order: ByteOrder, out: &mut Vec<u8>) {
    let fields = [
        record.ts_seconds,
        record.ts_fraction,
        record.captured_length(),
        record.original_length,
    ];
    for field in fields {
        match order {
            ByteOrder::Native => out.extend_from_slice(&field.to_be_bytes()),
            ByteOrder::Swapped => out.extend_from_slice(&field.to_le_bytes()),
        }
    }
    out.extend_from_slice(&record.payload);
}

/// Streaming pcap reader over any byte source.
pub struct PcapReader<R: Read> {
    inner: R,
    header: PcapHeader,
    /// Byte offset of the next unread record header, for error reporting.
    offset: u64,
}

impl<R: Read> PcapReader<R> {
    pub fn new(mut inner: R) -> Result<PcapReader<R>, PcapError> {
        let mut raw = [0u8; GLOBAL_HEADER_LEN];
        let got = read_up_to(&mut inner, &mut raw)?;
        if got < GLOBAL_HEADER_LEN {
            return Err(PcapError::TruncatedHeader { got });
        }
        let header = PcapHeader::parse(&raw)?;
        Ok(PcapReader {
            inner,
            header,
            offset: GLOBAL_HEADER_LEN as u64,
        })
    }

    pub fn header(&self) -> &PcapHeader {
        &self.header
    }

    /// Reads the next record, or `None` at a clean end of stream. A
    /// stream that ends partway through a record is an error, reported
    /// with the offset where the record began.
    pub fn next_record(&mut self) -> Result<Option<PacketRecord>, PcapError> {
        let record_offset = self.offset;
        let mut head = [0u8; RECORD_HEADER_LEN];
        let got = read_up_to(&mut self.inner, &mut head)?;
        if got == 0 {
            return Ok(None);
        }
        if got < RECORD_HEADER_LEN {
            return Err(PcapError::TruncatedRecord {
                offset: record_offset,
                expected: RECORD_HEADER_LEN,
                got,
            });
        }
        let u32_at = |off: usize| -> u32 {
            let raw: [u8; 4] = head[off..off + 4].try_into().unwrap();
            match self.header.byte_order {
                ByteOrder::Native => u32::from_be_bytes(raw),
                ByteOrder::Swapped => u32::from_le_bytes(raw),
            }
        };
        let ts_seconds = u32_at(0);
        let ts_fraction = u32_at(4);
        let captured_length = u32_at(8);
        let original_length = u32_at(12);
        if captured_length > self.header.snap_length {
            return Err(PcapError::OversizedRecord {
                offset: record_offset,
                captured_length,
                snap_length: self.header.snap_length,
            });
        }
        if captured_length > original_length {
            return Err(PcapError::BadRecordLength {
                offset: record_offset,
                captured_length,
                original_length,
            });
        }
        // Grow the buffer only as bytes arrive, so a lying length field
        // in a truncated file cannot force a huge allocation.
        let mut payload = Vec::new();
        self.inner
            .by_ref()
            .take(captured_length as u64)
            .read_to_end(&mut payload)?;
        if payload.len() < captured_length as usize {
            return Err(PcapError::TruncatedRecord {
                offset: record_offset,
                expected: RECORD_HEADER_LEN + captured_length as usize,
                got: RECORD_HEADER_LEN + payload.len(),
            });
        }
        self.offset += (RECORD_HEADER_LEN + captured_length as usize) as u64;
        Ok(Some(PacketRecord {
            ts_seconds,
            ts_fraction,
            original_length,
            payload,
        }))
    }
}

/// Reads until the buffer is full or the stream ends; returns bytes read.
fn read_up_to<R: Read>(reader: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Parses a complete pcap byte sequence into header and records.
pub fn read_pcap(bytes: &[u8]) -> Result<(PcapHeader, Vec<PacketRecord>), PcapError> {
    let mut reader = PcapReader::new(bytes)?;
    let mut records = Vec::new();
    while let Some(record) = reader.next_record()? {
        records.push(record);
    }
    Ok((reader.header.clone(), records))
}

/// Serializes header plus records. Records over the header's snap
/// length are rejected so the output is always readable back.
pub fn write_pcap(header: &PcapHeader, records: &[PacketRecord]) -> Result<Vec<u8>, PcapError> {
    let body: usize = records
        .iter()
        .map(|r| RECORD_HEADER_LEN + r.payload.len())
        .sum();
    let mut out = Vec::with_capacity(GLOBAL_HEADER_LEN + body);
    out.extend_from_slice(&header.to_bytes());
    for record in records {
        if record.captured_length() > header.snap_length {
            return Err(PcapError::OversizedRecord {
                offset: out.len() as u64,
                captured_length: record.captured_length(),
                snap_length: header.snap_length,
            });
        }
        encode_record(record, header.byte_order, &mut out);
    }
    Ok(out)
}

/// Streaming pcap writer.
pub struct PcapWriter<W: Write> {
    inner: W,
    header: PcapHeader,
    scratch: Vec<u8>,
}

impl<W: Write> PcapWriter<W> {
    pub fn create(mut inner: W, header: PcapHeader) -> Result<PcapWriter<W>, PcapError> {
        inner.write_all(&header.to_bytes())?;
        Ok(PcapWriter {
            inner,
            header,
            scratch: Vec::new(),
        })
    }

    pub fn write_record(&mut self, record: &PacketRecord) -> Result<(), PcapError> {
        if record.captured_length() > self.header.snap_length {
            return Err(PcapError::OversizedRecord {
                offset: 0,
                captured_length: record.captured_length(),
                snap_length: self.header.snap_length,
            });
        }
        self.scratch.clear();
        encode_record(record, self.header.byte_order, &mut self.scratch);
        self.inner.write_all(&self.scratch)?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Transport {
    Tcp,
    Udp,
    Other,
}

impl Transport {
    pub fn label(&self) -> &'static str {
        match self {
            Transport::Tcp => "tcp",
            Transport::Udp => "udp",
            Transport::Other => "other",
        }
    }
}

/// Endpoint pair of a decoded packet. For anything that is not TCP or
/// UDP over IP the addresses are unspecified and the ports zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FlowKey {
    pub src_addr: IpAddr,
    pub dst_addr: IpAddr,
    pub src_port: u16,
    pub dst_port: u16,
    pub transport: Transport,
}

impl FlowKey {
    fn opaque() -> FlowKey {
        FlowKey {
            src_addr: IpAddr::V4(Ipv4Addr::UNSPECIFIED),
            dst_addr: IpAddr::V4(Ipv4Addr::UNSPECIFIED),
            src_port: 0,
            dst_port: 0,
            transport: Transport::Other,
        }
    }
}

/// Decodes Ethernet/IP/transport framing and locates the application
/// payload. Never fails: frames that cannot be decoded (non-Ethernet
/// link types, non-IP frames, IP fragments, truncated headers, IPv6
/// extension headers) come back as `Transport::Other` with the offset
/// at the end of the frame, i.e. an empty application payload. Pattern
/// matching downstream therefore only ever sees real TCP/UDP payload
/// bytes.
pub fn decode_flow(frame: &[u8], link_type: u32) -> (FlowKey, usize) {
    let opaque = (FlowKey::opaque(), frame.len());
    // Link type 1 is Ethernet, the only framing this tool captures.
    if link_type != 1 || frame.len() < 14 {
        return opaque;
    }
    let ethertype = u16::from_be_bytes([frame[12], frame[13]]);
    match ethertype {
        0x0800 => decode_ipv4(frame).unwrap_or(opaque),
        0x86dd => decode_ipv6(frame).unwrap_or(opaque),
        _ => opaque,
    }
}

fn decode_ipv4(frame: &[u8]) -> Option<(FlowKey, usize)> {
    let ip = frame.get(14..)?;
    if ip.len() < 20 || ip[0] >> 4 != 4 {
        return None;
    }
    let header_len = (ip[0] & 0x0f) as usize * 4;
    if header_len < 20 || ip.len() < header_len {
        return None;
    }
    // A nonzero fragment offset means the transport header is in some
    // other packet entirely.
    let frag = u16::from_be_bytes([ip[6], ip[7]]) & 0x1fff;
    if frag != 0 {
        return None;
    }
    let src = IpAddr::V4(Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]));
    let dst = IpAddr::V4(Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]));
    decode_transport(frame, 14 + header_len, ip[9], src, dst)
}

fn decode_ipv6(frame: &[u8]) -> Option<(FlowKey, usize)> {
    let ip = frame.get(14..)?;
    if ip.len() < 40 || ip[0] >> 4 != 6 {
        return None;
    }
    let src = IpAddr::V6(Ipv6Addr::from(<[u8; 16]>::try_from(&ip[8..24]).unwrap()));
    let dst = IpAddr::V6(Ipv6Addr::from(<[u8; 16]>::try_from(&ip[24..40]).unwrap()));
    // Extension headers are not walked; anything but plain TCP/UDP next
    // headers is treated as opaque.
    decode_transport(frame, 14 + 40, ip[6], src, dst)
}

fn decode_transport(
    frame: &[u8],
    l4_offset: usize,
    protocol: u8,
    src_addr: IpAddr,
    dst_addr: IpAddr,
) -> Option<(FlowKey, usize)> {
    let l4 = frame.get(l4_offset..)?;
    match protocol {
        6 => {
            if l4.len() < 20 {
                return None;
            }
            let data_offset = (l4[12] >> 4) as usize * 4;
            if data_offset < 20 || l4.len() < data_offset {
                return None;
            }
            Some((
                FlowKey {
                    src_addr,
                    dst_addr,
                    src_port: u16::from_be_bytes([l4[0], l4[1]]),
                    dst_port: u16::from_be_bytes([l4[2], l4[3]]),
                    transport: Transport::Tcp,
                },
                l4_offset + data_offset,
            ))
        }
        17 => {
            if l4.len() < 8 {
                return None;
            }
            Some((
                FlowKey {
                    src_addr,
                    dst_addr,
                    src_port: u16::from_be_bytes([l4[0], l4[1]]),
                    dst_port: u16::from_be_bytes([l4[2], l4[3]]),
                    transport: Transport::Udp,
                },
                l4_offset + 8,
            ))
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micros_header() -> PcapHeader {
        PcapHeader::canonical(65535, 1)
    }

    #[test]
    fn header_round_trip_all_variants() {
        for order in [ByteOrder::Native, ByteOrder::Swapped] {
            for unit in [TimestampUnit::Microsecond, TimestampUnit::Nanosecond] {
                let header = PcapHeader {
                    byte_order: order,
                    timestamp_unit: unit,
                    version_major: 2,
                    version_minor: 4,
                    snap_length: 262144,
                    link_type: 1,
                };
                let parsed = PcapHeader::parse(&header.to_bytes()).unwrap();
                assert_eq!(parsed, header);
            }
        }
    }

    #[test]
    fn native_magic_bytes_on_disk() {
        let bytes = micros_header().to_bytes();
        assert_eq!(&bytes[0..4], &[0xa1, 0xb2, 0xc3, 0xd4]);
        let swapped = PcapHeader {
            byte_order: ByteOrder::Swapped,
            ..micros_header()
        };
        assert_eq!(&swapped.to_bytes()[0..4], &[0xd4, 0xc3, 0xb2, 0xa1]);
    }

    #[test]
    fn bad_magic_is_reported() {
        let mut bytes = micros_header().to_bytes();
        bytes[0] = 0x00;
        match PcapHeader::parse(&bytes) {
            Err(PcapError::BadMagic(m)) => assert_eq!(m, [0x00, 0xb2, 0xc3, 0xd4]),
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncated_header_is_reported() {
        match read_pcap(&[0xa1, 0xb2]) {
            Err(PcapError::TruncatedHeader { got: 2 }) => {}
            other => panic!("expected TruncatedHeader, got {other:?}"),
        }
    }

    #[test]
    fn record_round_trip_both_orders() {
        let records = vec![
            PacketRecord::new(100, 999999, 128, vec![0xab; 60]).unwrap(),
            PacketRecord::new(101, 0, 40, vec![]).unwrap(),
        ];
        for order in [ByteOrder::Native, ByteOrder::Swapped] {
            let header = PcapHeader {
                byte_order: order,
                ..micros_header()
            };
            let bytes = write_pcap(&header, &records).unwrap();
            let (parsed_header, parsed) = read_pcap(&bytes).unwrap();
            assert_eq!(parsed_header, header);
            assert_eq!(parsed, records);
        }
    }

    #[test]
    fn truncated_record_reports_offset() {
        let records = vec![PacketRecord::new(1, 2, 64, vec![0x55; 64]).unwrap()];
        let bytes = write_pcap(&micros_header(), &records).unwrap();
        // Cut the payload short by one byte.
        match read_pcap(&bytes[..bytes.len() - 1]) {
            Err(PcapError::TruncatedRecord { offset: 24, expected, got }) => {
                assert_eq!(expected, 16 + 64);
                assert_eq!(got, 16 + 63);
            }
            other => panic!("expected TruncatedRecord, got {other:?}"),
        }
    }

    #[test]
    fn oversized_and_inconsistent_records_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(
            &PcapHeader {
                snap_length: 32,
                ..micros_header()
            }
            .to_bytes(),
        );
        for field in [1u32, 0, 33, 64] {
            bytes.extend_from_slice(&field.to_be_bytes());
        }
        bytes.extend_from_slice(&[0; 33]);
        assert!(matches!(
            read_pcap(&bytes),
            Err(PcapError::OversizedRecord {
                captured_length: 33,
                snap_length: 32,
                ..
            })
        ));

        let mut bytes = Vec::new();
        bytes.extend_from_slice(&micros_header().to_bytes());
        for field in [1u32, 0, 10, 4] {
            bytes.extend_from_slice(&field.to_be_bytes());
        }
        bytes.extend_from_slice(&[0; 10]);
        assert!(matches!(
            read_pcap(&bytes),
            Err(PcapError::BadRecordLength {
                captured_length: 10,
                original_length: 4,
                ..
            })
        ));

        assert!(PacketRecord::new(0, 0, 4, vec![0; 10]).is_err());
    }

    #[test]
    fn lying_length_in_truncated_file_does_not_allocate() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(
            &PcapHeader {
                snap_length: u32::MAX,
                ..micros_header()
            }
            .to_bytes(),
        );
        for field in [1u32, 0, 0xfff0_0000, 0xfff0_0000] {
            bytes.extend_from_slice(&field.to_be_bytes());
        }
        bytes.extend_from_slice(&[0; 8]);
        assert!(matches!(
            read_pcap(&bytes),
            Err(PcapError::TruncatedRecord { offset: 24, .. })
        ));
    }

    #[test]
    fn nanosecond_timestamps_convert_to_micros() {
        let record = PacketRecord::new(2, 1500, 60, vec![0; 60]).unwrap();
        assert_eq!(record.timestamp_micros(TimestampUnit::Nanosecond), 2_000_001);
        assert_eq!(record.timestamp_micros(TimestampUnit::Microsecond), 2_001_500);
    }

    #[test]
    fn empty_capture_round_trips() {
        let bytes = write_pcap(&micros_header(), &[]).unwrap();
        assert_eq!(bytes.len(), GLOBAL_HEADER_LEN);
        let (_, records) = read_pcap(&bytes).unwrap();
        assert!(records.is_empty());
    }
}
