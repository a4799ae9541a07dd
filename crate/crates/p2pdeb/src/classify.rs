//! Packet classification against a declarative signature registry, with
//! per-category statistics and detection of recurring unknown payload
//! patterns.
//!
//! Signatures are anchored exact-byte matches, evaluated first-match in
//! declaration order — deliberately simple semantics that an examiner
//! can re-run by hand. Packets no signature claims are tallied in a
//! prefix table; a prefix recurring across many distinct remote
//! endpoints is reported as a candidate for a protocol the registry
//! does not know yet.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::IpAddr;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::hexstr;
use crate::kv::{self, BlockError};
use crate::pcap::{FlowKey, Transport};

// ---------------------------------------------------------------------------
// Home networks

/// An address block in CIDR notation, used to tell which side of a flow
/// is "ours" so the other side can be recorded as the remote endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cidr {
    addr: IpAddr,
    prefix_len: u8,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid CIDR block {0:?}")]
pub struct CidrError(pub String);

impl FromStr for Cidr {
    type Err = CidrError;

    fn from_str(text: &str) -> Result<Cidr, CidrError> {
        let err = || CidrError(text.to_string());
        let (addr_text, len_text) = text.split_once('/').ok_or_else(err)?;
        let addr: IpAddr = addr_text.parse().map_err(|_| err())?;
        let prefix_len: u8 = len_text.parse().map_err(|_| err())?;
        let max = match addr {
            IpAddr::V4(_) => 32,
            IpAddr::V6(_) => 128,
        };
        if prefix_len > max {
            return Err(err());
        }
        Ok(Cidr { addr, prefix_len })
    }
}

impl fmt::Display for Cidr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.addr, self.prefix_len)
    }
}

impl Cidr {
    pub fn contains(&self, addr: IpAddr) -> bool {
        match (self.addr, addr) {
            (IpAddr::V4(net), IpAddr::V4(a)) => {
                let keep = u32::MAX
                    .checked_shl(32 - self.prefix_len as u32)
                    .unwrap_or(0);
                u32::from(net) & keep == u32::from(a) & keep
            }
            (IpAddr::V6(net), IpAddr::V6(a)) => {
                let keep = u128::MAX
                    .checked_shl(128 - self.prefix_len as u32)
                    .unwrap_or(0);
                u128::from(net) & keep == u128::from(a) & keep
            }
            _ => false,
        }
    }
}

fn is_home(addr: IpAddr, home: &[Cidr]) -> bool {
    home.iter().any(|c| c.contains(addr))
}

/// The endpoint on the far side of a flow: the non-home side, or, when
/// both or neither side is home, the higher (address, port) pair so the
/// choice is deterministic.
pub fn remote_endpoint(flow: &FlowKey, home: &[Cidr]) -> (IpAddr, u16) {
    let src = (flow.src_addr, flow.src_port);
    let dst = (flow.dst_addr, flow.dst_port);
    match (is_home(flow.src_addr, home), is_home(flow.dst_addr, home)) {
        (true, false) => dst,
        (false, true) => src,
        _ => src.max(dst),
    }
}

// ---------------------------------------------------------------------------
// Signatures

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SigTransport {
    Tcp,
    Udp,
    Any,
}

impl SigTransport {
    pub fn label(&self) -> &'static str {
        match self {
            SigTransport::Tcp => "tcp",
            SigTransport::Udp => "udp",
            SigTransport::Any => "any",
        }
    }

    fn parse(token: &str) -> Option<SigTransport> {
        match token {
            "tcp" => Some(SigTransport::Tcp),
            "udp" => Some(SigTransport::Udp),
            "any" => Some(SigTransport::Any),
            _ => None,
        }
    }

    fn matches(&self, transport: Transport) -> bool {
        match self {
            SigTransport::Tcp => transport == Transport::Tcp,
            SigTransport::Udp => transport == Transport::Udp,
            SigTransport::Any => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Signature {
    pub id: String,
    pub protocol: String,
    pub category: String,
    pub transport: SigTransport,
    pub anchor_offset: usize,
    pub pattern: Vec<u8>,
    pub min_payload_length: usize,
}

impl Signature {
    fn matches(&self, payload: &[u8], transport: Transport) -> bool {
        if !self.transport.matches(transport) || payload.len() < self.min_payload_length {
            return false;
        }
        payload
            .get(self.anchor_offset..self.anchor_offset + self.pattern.len())
            .is_some_and(|window| window == self.pattern)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SignatureError {
    #[error("signature file line {line}: {message}")]
    SyntaxError { line: usize, message: String },
    #[error("duplicate signature id {0:?}")]
    DuplicateId(String),
}

/// The label given to packets no signature matches. Reserved: signature
/// files may not define a category of this name.
pub const UNKNOWN_CATEGORY: &str = "unknown";

/// Signature rules shipped with the tool, in the loadable file format.
const DEFAULT_SIGNATURES: &str = "\
# Built-in peer-to-peer signature set.
# Fields: id protocol category transport anchor_offset pattern_hex min_payload_length
bt-handshake bittorrent handshake tcp 0 13426974546f7272656e742070726f746f636f6c 20
bt-dht-query bittorrent-dht query udp 0 64313a6164323a696432303a 32
ed2k-hello edonkey hello tcp 0 e3 6
gnutella-connect gnutella connect tcp 0 474e5554454c4c4120434f4e4e4543542f 22
";

/// An ordered, immutable set of signatures plus the exact text it was
/// loaded from (the text is what gets digested into evidence bags).
#[derive(Debug, Clone)]
pub struct SignatureSet {
    signatures: Vec<Signature>,
    source: String,
}

fn token_is_clean(token: &str) -> bool {
    !token.is_empty()
        && token
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b':' | b'-'))
}

impl SignatureSet {
    /// Parses the one-rule-per-line format described in the module docs.
    /// `#` starts a comment; blank lines are ignored.
    pub fn parse(text: &str) -> Result<SignatureSet, SignatureError> {
        let syntax = |line: usize, message: &str| SignatureError::SyntaxError {
            line,
            message: message.to_string(),
        };
        let mut signatures: Vec<Signature> = Vec::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line = idx + 1;
            let body = raw_line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let tokens: Vec<&str> = body.split_whitespace().collect();
            if tokens.len() != 7 {
                return Err(syntax(line, "expected 7 fields"));
            }
            for token in &tokens[0..3] {
                if !token_is_clean(token) {
                    return Err(syntax(line, "identifier contains forbidden characters"));
                }
            }
            let (id, protocol, category) = (tokens[0], tokens[1], tokens[2]);
            if category == UNKNOWN_CATEGORY {
                return Err(syntax(line, "category \"unknown\" is reserved"));
            }
            let transport = SigTransport::parse(tokens[3])
                .ok_or_else(|| syntax(line, "transport must be tcp, udp or any"))?;
            let anchor_offset: usize = tokens[4]
                .parse()
                .map_err(|_| syntax(line, "anchor offset is not a number"))?;
            let pattern = hexstr::decode(tokens[5])
                .ok_or_else(|| syntax(line, "pattern is not valid hex"))?;
            if pattern.is_empty() {
                return Err(syntax(line, "pattern must be at least one byte"));
            }
            let min_payload_length: usize = tokens[6]
                .parse()
                .map_err(|_| syntax(line, "minimum payload length is not a number"))?;
            if min_payload_length < anchor_offset + pattern.len() {
                return Err(syntax(
                    line,
                    "minimum payload length shorter than anchored pattern",
                ));
            }
            if signatures.iter().any(|s| s.id == id) {
                return Err(SignatureError::DuplicateId(id.to_string()));
            }
            signatures.push(Signature {
                id: id.to_string(),
                protocol: protocol.to_string(),
                category: category.to_string(),
                transport,
                anchor_offset,
                pattern,
                min_payload_length,
            });
        }
        Ok(SignatureSet {
            signatures,
            source: text.to_string(),
        })
    }

    /// The built-in defaults: BitTorrent handshake, BitTorrent DHT
    /// query, eDonkey hello, Gnutella connect.
    pub fn default_set() -> SignatureSet {
        SignatureSet::parse(DEFAULT_SIGNATURES).expect("built-in signature set must parse")
    }

    /// The exact text this set was loaded from, re-emittable as a file.
    pub fn source(&self) -> &str {
        &self.source
    }

    /// SHA-256 over the source text; stored in bag headers so a bag
    /// records which rules classified its traffic.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.source.as_bytes()).into()
    }

    pub fn signatures(&self) -> &[Signature] {
        &self.signatures
    }

    pub fn len(&self) -> usize {
        self.signatures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signatures.is_empty()
    }
}

/// Outcome of classifying one packet. `signature_id` is present exactly
/// when some signature matched, i.e. when the category is not
/// [`UNKNOWN_CATEGORY`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassificationResult<'a> {
    pub category: &'a str,
    pub signature_id: Option<&'a str>,
}

/// Matches an application payload against the set, first match in
/// declaration order winning.
pub fn classify_packet<'a>(
    payload: &[u8],
    flow: &FlowKey,
    set: &'a SignatureSet,
) -> ClassificationResult<'a> {
    for signature in &set.signatures {
        if signature.matches(payload, flow.transport) {
            return ClassificationResult {
                category: &signature.category,
                signature_id: Some(&signature.id),
            };
        }
    }
    ClassificationResult {
        category: UNKNOWN_CATEGORY,
        signature_id: None,
    }
}

// ---------------------------------------------------------------------------
// Category statistics

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CategoryEntry {
    pub packets: u64,
    pub bytes: u64,
    pub first_micros: u64,
    pub last_micros: u64,
}

/// Per-category packet and byte tallies with first/last-seen times.
/// Deterministically ordered by category name.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CategoryStats {
    entries: BTreeMap<String, CategoryEntry>,
}

impl CategoryStats {
    pub fn new() -> CategoryStats {
        CategoryStats::default()
    }

    /// Tallies one packet: `bytes` is the captured length of the whole
    /// record, `ts_micros` its timestamp.
    pub fn record(&mut self, category: &str, bytes: u64, ts_micros: u64) {
        match self.entries.entry(category.to_string()) {
            Entry::Vacant(slot) => {
                slot.insert(CategoryEntry {
                    packets: 1,
                    bytes,
                    first_micros: ts_micros,
                    last_micros: ts_micros,
                });
            }
            Entry::Occupied(mut slot) => {
                let entry = slot.get_mut();
                entry.packets += 1;
                entry.bytes += bytes;
                entry.first_micros = entry.first_micros.min(ts_micros);
                entry.last_micros = entry.last_micros.max(ts_micros);
            }
        }
    }

    /// Folds another tally into this one (used to accumulate per-segment
    /// sidecars into bag-level totals).
    pub fn merge(&mut self, other: &CategoryStats) {
        for (category, add) in &other.entries {
            match self.entries.entry(category.clone()) {
                Entry::Vacant(slot) => {
                    slot.insert(*add);
                }
                Entry::Occupied(mut slot) => {
                    let entry = slot.get_mut();
                    entry.packets += add.packets;
                    entry.bytes += add.bytes;
                    entry.first_micros = entry.first_micros.min(add.first_micros);
                    entry.last_micros = entry.last_micros.max(add.last_micros);
                }
            }
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &CategoryEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, category: &str) -> Option<&CategoryEntry> {
        self.entries.get(category)
    }

    pub fn total_packets(&self) -> u64 {
        self.entries.values().map(|e| e.packets).sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.entries.values().map(|e| e.bytes).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Serializes as a canonical kv block with keys
    /// `cat.<category>.{packets,bytes,first_micros,last_micros}`.
    pub fn to_block(&self) -> Vec<u8> {
        let mut pairs: Vec<(String, String)> = Vec::with_capacity(self.entries.len() * 4);
        for (category, entry) in &self.entries {
            pairs.push((format!("cat.{category}.packets"), entry.packets.to_string()));
            pairs.push((format!("cat.{category}.bytes"), entry.bytes.to_string()));
            pairs.push((
                format!("cat.{category}.first_micros"),
                entry.first_micros.to_string(),
            ));
            pairs.push((
                format!("cat.{category}.last_micros"),
                entry.last_micros.to_string(),
            ));
        }
        kv::to_block(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    pub fn from_block(bytes: &[u8]) -> Result<CategoryStats, BlockError> {
        let mut partial: BTreeMap<String, [Option<u64>; 4]> = BTreeMap::new();
        for (key, value) in kv::from_block(bytes)? {
            let rest = key
                .strip_prefix("cat.")
                .ok_or_else(|| BlockError::UnknownKey(key.clone()))?;
            let (category, field) = rest
                .rsplit_once('.')
                .ok_or_else(|| BlockError::UnknownKey(key.clone()))?;
            let slot = match field {
                "packets" => 0,
                "bytes" => 1,
                "first_micros" => 2,
                "last_micros" => 3,
                _ => return Err(BlockError::UnknownKey(key.clone())),
            };
            let number: u64 = value
                .parse()
                .map_err(|_| BlockError::BadValue(key.clone()))?;
            partial.entry(category.to_string()).or_default()[slot] = Some(number);
        }
        let mut stats = CategoryStats::new();
        for (category, fields) in partial {
            let [packets, bytes, first, last] = fields;
            let missing = |name: &str| BlockError::Missing(format!("cat.{category}.{name}"));
            stats.entries.insert(
                category.clone(),
                CategoryEntry {
                    packets: packets.ok_or_else(|| missing("packets"))?,
                    bytes: bytes.ok_or_else(|| missing("bytes"))?,
                    first_micros: first.ok_or_else(|| missing("first_micros"))?,
                    last_micros: last.ok_or_else(|| missing("last_micros"))?,
                },
            );
        }
        Ok(stats)
    }
}

// ---------------------------------------------------------------------------
// Unknown-pattern table

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnknownTableConfig {
    /// Prefix length N tabulated from each unknown payload.
    pub prefix_length: usize,
    /// Sample record indices retained per prefix.
    pub sample_cap: usize,
    /// Distinct endpoints stored exactly per prefix before the entry is
    /// frozen with its endpoint count saturated.
    pub endpoint_cap: usize,
}

impl Default for UnknownTableConfig {
    fn default() -> UnknownTableConfig {
        UnknownTableConfig {
            prefix_length: 8,
            sample_cap: 16,
            endpoint_cap: 4096,
        }
    }
}

#[derive(Debug, Clone)]
struct PatternEntry {
    occurrences: u64,
    endpoints: BTreeSet<(IpAddr, u16)>,
    endpoints_frozen: bool,
    sample_indices: Vec<u64>,
    seen_tcp: bool,
    seen_udp: bool,
}

/// Tally of payload prefixes from packets no signature matched. A prefix
/// recurring across many distinct remote endpoints is the fingerprint of
/// a protocol the signature set does not know.
#[derive(Debug, Clone)]
pub struct UnknownPatternTable {
    config: UnknownTableConfig,
    entries: BTreeMap<Vec<u8>, PatternEntry>,
}

impl UnknownPatternTable {
    pub fn new(config: UnknownTableConfig) -> UnknownPatternTable {
        UnknownPatternTable {
            config,
            entries: BTreeMap::new(),
        }
    }

    /// Records one unknown packet. The key is the first
    /// `min(prefix_length, payload length)` bytes; empty payloads are
    /// ignored. The remote endpoint is taken from the non-home side of
    /// the flow.
    pub fn observe(&mut self, payload: &[u8], flow: &FlowKey, home: &[Cidr], record_index: u64) {
        if payload.is_empty() {
            return;
        }
        let key = payload[..payload.len().min(self.config.prefix_length)].to_vec();
        let entry = self.entries.entry(key).or_insert_with(|| PatternEntry {
            occurrences: 0,
            endpoints: BTreeSet::new(),
            endpoints_frozen: false,
            sample_indices: Vec::new(),
            seen_tcp: false,
            seen_udp: false,
        });
        entry.occurrences += 1;
        match flow.transport {
            Transport::Tcp => entry.seen_tcp = true,
            Transport::Udp => entry.seen_udp = true,
            Transport::Other => {}
        }
        if !entry.endpoints_frozen {
            entry.endpoints.insert(remote_endpoint(flow, home));
            if entry.endpoints.len() >= self.config.endpoint_cap {
                entry.endpoints_frozen = true;
            }
        }
        if entry.sample_indices.len() < self.config.sample_cap {
            entry.sample_indices.push(record_index);
        }
    }

    /// Entries meeting both thresholds, sorted by support descending
    /// then prefix ascending.
    pub fn detect_candidates(
        &self,
        min_support: u64,
        min_endpoints: u64,
    ) -> Vec<CandidateSignature> {
        let mut out: Vec<CandidateSignature> = self
            .entries
            .iter()
            .filter(|(_, e)| e.occurrences >= min_support && e.endpoints.len() as u64 >= min_endpoints)
            .map(|(prefix, e)| CandidateSignature {
                prefix: prefix.clone(),
                support: e.occurrences,
                endpoint_count: e.endpoints.len() as u64,
                transport: match (e.seen_tcp, e.seen_udp) {
                    (true, false) => SigTransport::Tcp,
                    (false, true) => SigTransport::Udp,
                    _ => SigTransport::Any,
                },
            })
            .collect();
        out.sort_by(|a, b| b.support.cmp(&a.support).then(a.prefix.cmp(&b.prefix)));
        out
    }

    /// Sample record indices stored for a prefix, if it has been seen.
    pub fn samples(&self, prefix: &[u8]) -> Option<&[u64]> {
        self.entries.get(prefix).map(|e| e.sample_indices.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A recurring unknown prefix worth an analyst's attention: `support`
/// occurrences across `endpoint_count` distinct remote endpoints. The
/// transport is the one the prefix was seen on, or `any` if mixed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSignature {
    pub prefix: Vec<u8>,
    pub support: u64,
    pub endpoint_count: u64,
    pub transport: SigTransport,
}

/// Serializes a candidate list as a canonical kv block, one group of
/// `candidate.<index>.{prefix,support,endpoints,transport}` keys per
/// entry in list order.
pub fn candidates_to_block(candidates: &[CandidateSignature]) -> Vec<u8> {
    let mut pairs: Vec<(String, String)> = Vec::with_capacity(candidates.len() * 4);
    for (index, c) in candidates.iter().enumerate() {
        let base = format!("candidate.{index:08}");
        pairs.push((format!("{base}.prefix"), hexstr::encode(&c.prefix)));
        pairs.push((format!("{base}.support"), c.support.to_string()));
        pairs.push((format!("{base}.endpoints"), c.endpoint_count.to_string()));
        pairs.push((format!("{base}.transport"), c.transport.label().to_string()));
    }
    kv::to_block(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
}

pub fn candidates_from_block(bytes: &[u8]) -> Result<Vec<CandidateSignature>, BlockError> {
    #[derive(Default)]
    struct Partial {
        prefix: Option<Vec<u8>>,
        support: Option<u64>,
        endpoints: Option<u64>,
        transport: Option<SigTransport>,
    }
    let mut partial: BTreeMap<u64, Partial> = BTreeMap::new();
    for (key, value) in kv::from_block(bytes)? {
        let rest = key
            .strip_prefix("candidate.")
            .ok_or_else(|| BlockError::UnknownKey(key.clone()))?;
        let (index_text, field) = rest
            .split_once('.')
            .ok_or_else(|| BlockError::UnknownKey(key.clone()))?;
        let index: u64 = index_text
            .parse()
            .map_err(|_| BlockError::BadValue(key.clone()))?;
        let slot = partial.entry(index).or_default();
        let bad = || BlockError::BadValue(key.clone());
        match field {
            "prefix" => slot.prefix = Some(hexstr::decode(&value).ok_or_else(bad)?),
            "support" => slot.support = Some(value.parse().map_err(|_| bad())?),
            "endpoints" => slot.endpoints = Some(value.parse().map_err(|_| bad())?),
            "transport" => slot.transport = Some(SigTransport::parse(&value).ok_or_else(bad)?),
            _ => return Err(BlockError::UnknownKey(key.clone())),
        }
    }
    let mut out = Vec::with_capacity(partial.len());
    for (expected, (index, slot)) in partial.into_iter().enumerate() {
        if index != expected as u64 {
            return Err(BlockError::Missing(format!("candidate.{expected:08}")));
        }
        let missing = |name: &str| BlockError::Missing(format!("candidate.{index:08}.{name}"));
        out.push(CandidateSignature {
            prefix: slot.prefix.ok_or_else(|| missing("prefix"))?,
            support: slot.support.ok_or_else(|| missing("support"))?,
            endpoint_count: slot.endpoints.ok_or_else(|| missing("endpoints"))?,
            transport: slot.transport.ok_or_else(|| missing("transport"))?,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Frequency report

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub category: String,
    pub packets: u64,
    pub bytes: u64,
    /// Share of total packets, in percent.
    pub percent: f64,
}

/// Rows sorted by packet count descending, then category ascending.
/// Percentages are taken over total packets and sum to 100 within
/// rounding when any packets were seen.
pub fn frequency_report(stats: &CategoryStats) -> Vec<ReportRow> {
    let total = stats.total_packets();
    let mut rows: Vec<ReportRow> = stats
        .entries()
        .map(|(category, entry)| ReportRow {
            category: category.to_string(),
            packets: entry.packets,
            bytes: entry.bytes,
            percent: if total == 0 {
                0.0
            } else {
                entry.packets as f64 * 100.0 / total as f64
            },
        })
        .collect();
    rows.sort_by(|a, b| {
        b.packets
            .cmp(&a.packets)
            .then_with(|| a.category.cmp(&b.category))
    });
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::Ipv4Addr;

    fn tcp_flow(src: [u8; 4], sport: u16, dst: [u8; 4], dport: u16) -> FlowKey {
        FlowKey {
            src_addr: IpAddr::V4(Ipv4Addr::from(src)),
            dst_addr: IpAddr::V4(Ipv4Addr::from(dst)),
            src_port: sport,
            dst_port: dport,
            transport: Transport::Tcp,
        }
    }

    fn udp_flow(src: [u8; 4], sport: u16, dst: [u8; 4], dport: u16) -> FlowKey {
        FlowKey {
            transport: Transport::Udp,
            ..tcp_flow(src, sport, dst, dport)
        }
    }

    #[test]
    fn default_set_parses_and_dumps_loadably() {
        let set = SignatureSet::default_set();
        assert_eq!(set.len(), 4);
        let ids: Vec<&str> = set.signatures().iter().map(|s| s.id.as_str()).collect();
        assert_eq!(
            ids,
            ["bt-handshake", "bt-dht-query", "ed2k-hello", "gnutella-connect"]
        );
        // The emitted source must load back to the same rules.
        let reloaded = SignatureSet::parse(set.source()).unwrap();
        assert_eq!(reloaded.signatures(), set.signatures());
        assert_eq!(reloaded.digest(), set.digest());
    }

    #[test]
    fn parse_rejects_malformed_lines() {
        let cases: &[(&str, usize)] = &[
            ("only three fields here\n", 1),
            ("\n\nid proto cat tcp 0 zz 4\n", 3),
            ("id proto cat tcp 0 abc 4\n", 1),
            ("id proto cat quic 0 ab 4\n", 1),
            ("id proto cat tcp x ab 4\n", 1),
            ("id proto cat tcp 0 abcd 1\n", 1),
            ("id proto unknown tcp 0 ab 4\n", 1),
            ("id proto cat tcp 0  4\n", 1),
            ("bad/id proto cat tcp 0 ab 4\n", 1),
        ];
        for (text, want_line) in cases {
            match SignatureSet::parse(text) {
                Err(SignatureError::SyntaxError { line, .. }) => {
                    assert_eq!(line, *want_line, "for input {text:?}")
                }
                other => panic!("expected SyntaxError for {text:?}, got {other:?}"),
            }
        }
    }

    #[test]
    fn parse_rejects_duplicate_ids() {
        let text = "x p c tcp 0 ab 4\nx p c2 udp 0 cd 4\n";
        match SignatureSet::parse(text) {
            Err(SignatureError::DuplicateId(id)) => assert_eq!(id, "x"),
            other => panic!("expected DuplicateId, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_empty_set() {
        let set = SignatureSet::parse("# nothing here\n\n").unwrap();
        assert!(set.is_empty());
        let result = classify_packet(b"anything", &tcp_flow([10, 0, 0, 1], 1, [10, 0, 0, 2], 2), &set);
        assert_eq!(result.category, UNKNOWN_CATEGORY);
        assert_eq!(result.signature_id, None);
    }

    #[test]
    fn classify_matches_bittorrent_handshake() {
        let set = SignatureSet::default_set();
        let mut payload = vec![0x13];
        payload.extend_from_slice(b"BitTorrent protocol");
        payload.extend_from_slice(&[0u8; 48]);
        let flow = tcp_flow([10, 0, 0, 1], 49152, [192, 0, 2, 7], 6881);
        let result = classify_packet(&payload, &flow, &set);
        assert_eq!(result.category, "handshake");
        assert_eq!(result.signature_id, Some("bt-handshake"));

        // Same bytes over UDP must not match a TCP-only rule.
        let udp = udp_flow([10, 0, 0, 1], 49152, [192, 0, 2, 7], 6881);
        assert_eq!(classify_packet(&payload, &udp, &set).category, UNKNOWN_CATEGORY);
    }

    #[test]
    fn classify_honors_min_length_and_anchor() {
        let set = SignatureSet::parse("sig p c tcp 2 beef 8\n").unwrap();
        let flow = tcp_flow([10, 0, 0, 1], 1, [10, 0, 0, 2], 2);
        // Pattern at the right offset but payload below the minimum.
        assert_eq!(
            classify_packet(&[0, 0, 0xbe, 0xef, 0], &flow, &set).category,
            UNKNOWN_CATEGORY
        );
        assert_eq!(
            classify_packet(&[0, 0, 0xbe, 0xef, 0, 0, 0, 0], &flow, &set).category,
            "c"
        );
        // Pattern at the wrong offset.
        assert_eq!(
            classify_packet(&[0xbe, 0xef, 0, 0, 0, 0, 0, 0], &flow, &set).category,
            UNKNOWN_CATEGORY
        );
        // Empty payload never matches anything.
        assert_eq!(classify_packet(&[], &flow, &set).category, UNKNOWN_CATEGORY);
    }

    #[test]
    fn classify_first_match_is_declaration_order() {
        let text = "first p one tcp 0 aa 1\nsecond p two tcp 0 aa 1\n";
        let set = SignatureSet::parse(text).unwrap();
        let flow = tcp_flow([10, 0, 0, 1], 1, [10, 0, 0, 2], 2);
        let result = classify_packet(&[0xaa, 0xbb], &flow, &set);
        assert_eq!(result.signature_id, Some("first"));
    }

    #[test]
    fn stats_conserve_totals() {
        let mut stats = CategoryStats::new();
        stats.record("handshake", 60, 1_000);
        stats.record("handshake", 40, 500);
        stats.record(UNKNOWN_CATEGORY, 100, 2_000);
        assert_eq!(stats.total_packets(), 3);
        assert_eq!(stats.total_bytes(), 200);
        let entry = stats.get("handshake").unwrap();
        assert_eq!(entry.packets, 2);
        assert_eq!(entry.bytes, 100);
        assert_eq!(entry.first_micros, 500);
        assert_eq!(entry.last_micros, 1_000);
    }

    #[test]
    fn stats_merge_matches_sequential_recording() {
        let mut left = CategoryStats::new();
        left.record("a", 10, 100);
        left.record("b", 20, 200);
        let mut right = CategoryStats::new();
        right.record("b", 30, 50);
        right.record("c", 40, 400);
        let mut merged = left.clone();
        merged.merge(&right);

        let mut sequential = CategoryStats::new();
        sequential.record("a", 10, 100);
        sequential.record("b", 20, 200);
        sequential.record("b", 30, 50);
        sequential.record("c", 40, 400);
        assert_eq!(merged, sequential);
    }

    #[test]
    fn stats_block_round_trip() {
        let mut stats = CategoryStats::new();
        stats.record("handshake", 60, 1_000);
        stats.record("query.deep", 99, 7);
        let block = stats.to_block();
        assert_eq!(CategoryStats::from_block(&block).unwrap(), stats);
        assert_eq!(CategoryStats::from_block(b"").unwrap(), CategoryStats::new());
        assert!(CategoryStats::from_block(b"cat.x.packets=1\n").is_err());
        assert!(CategoryStats::from_block(b"other=1\n").is_err());
    }

    #[test]
    fn cidr_membership() {
        let net: Cidr = "10.0.0.0/8".parse().unwrap();
        assert!(net.contains("10.200.3.4".parse().unwrap()));
        assert!(!net.contains("11.0.0.1".parse().unwrap()));
        assert!(!net.contains("2001:db8::1".parse().unwrap()));
        let all: Cidr = "0.0.0.0/0".parse().unwrap();
        assert!(all.contains("255.255.255.255".parse().unwrap()));
        let v6: Cidr = "2001:db8::/32".parse().unwrap();
        assert!(v6.contains("2001:db8::99".parse().unwrap()));
        assert!(!v6.contains("2001:db9::1".parse().unwrap()));
        assert!("10.0.0.0/33".parse::<Cidr>().is_err());
        assert!("10.0.0.0".parse::<Cidr>().is_err());
        assert!("banana/8".parse::<Cidr>().is_err());
    }

    #[test]
    fn remote_endpoint_prefers_non_home_side() {
        let home: Vec<Cidr> = vec!["10.0.0.0/8".parse().unwrap()];
        let outbound = tcp_flow([10, 0, 0, 1], 49152, [192, 0, 2, 7], 6881);
        assert_eq!(
            remote_endpoint(&outbound, &home),
            ("192.0.2.7".parse().unwrap(), 6881)
        );
        let inbound = tcp_flow([192, 0, 2, 7], 6881, [10, 0, 0, 1], 49152);
        assert_eq!(
            remote_endpoint(&inbound, &home),
            ("192.0.2.7".parse().unwrap(), 6881)
        );
        // Both home: deterministic higher pair.
        let internal = tcp_flow([10, 0, 0, 1], 1000, [10, 0, 0, 2], 2000);
        assert_eq!(
            remote_endpoint(&internal, &home),
            ("10.0.0.2".parse().unwrap(), 2000)
        );
        // Neither home: same rule.
        let external = tcp_flow([198, 51, 100, 9], 4, [192, 0, 2, 7], 5);
        assert_eq!(
            remote_endpoint(&external, &home),
            ("198.51.100.9".parse().unwrap(), 4)
        );
    }

    #[test]
    fn unknown_table_counts_and_thresholds() {
        let home: Vec<Cidr> = vec!["10.0.0.0/8".parse().unwrap()];
        let mut table = UnknownPatternTable::new(UnknownTableConfig::default());
        let payload = b"\xaa\xbb\xcc\xdd\xee\xff\x01\x02trailing";
        for i in 0..3u16 {
            let flow = udp_flow([10, 0, 0, 1], 5000, [192, 0, 2, 10 + i as u8], 6000 + i);
            table.observe(payload, &flow, &home, i as u64);
        }
        // Same endpoint again: support grows, endpoint count does not.
        let flow = udp_flow([10, 0, 0, 1], 5000, [192, 0, 2, 10], 6000);
        table.observe(payload, &flow, &home, 3);
        assert_eq!(table.len(), 1);
        assert_eq!(table.samples(&payload[..8]).unwrap(), &[0, 1, 2, 3]);

        let found = table.detect_candidates(4, 3);
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].prefix, payload[..8].to_vec());
        assert_eq!(found[0].support, 4);
        assert_eq!(found[0].endpoint_count, 3);
        assert_eq!(found[0].transport, SigTransport::Udp);

        assert!(table.detect_candidates(5, 3).is_empty());
        assert!(table.detect_candidates(4, 4).is_empty());
    }

    #[test]
    fn unknown_table_short_and_empty_payloads() {
        let mut table = UnknownPatternTable::new(UnknownTableConfig::default());
        let flow = udp_flow([10, 0, 0, 1], 1, [192, 0, 2, 1], 2);
        table.observe(b"", &flow, &[], 0);
        assert!(table.is_empty());
        // Shorter than the prefix length: keyed by the whole payload.
        table.observe(b"abc", &flow, &[], 1);
        assert_eq!(table.len(), 1);
        assert!(table.samples(b"abc").is_some());
    }

    #[test]
    fn unknown_table_freezes_endpoint_set_at_cap() {
        let config = UnknownTableConfig {
            endpoint_cap: 3,
            ..UnknownTableConfig::default()
        };
        let mut table = UnknownPatternTable::new(config);
        let payload = b"\x01\x02\x03\x04\x05\x06\x07\x08";
        for i in 0..10u16 {
            let flow = udp_flow([10, 0, 0, 1], 5000, [192, 0, 2, 100 + (i % 10) as u8], 7000 + i);
            table.observe(payload, &flow, &[], i as u64);
        }
        let found = table.detect_candidates(1, 1);
        assert_eq!(found[0].support, 10);
        // Ten distinct endpoints arrived but the set froze at the cap.
        assert_eq!(found[0].endpoint_count, 3);
    }

    #[test]
    fn unknown_table_sample_cap_is_respected() {
        let config = UnknownTableConfig {
            sample_cap: 2,
            ..UnknownTableConfig::default()
        };
        let mut table = UnknownPatternTable::new(config);
        let flow = udp_flow([10, 0, 0, 1], 1, [192, 0, 2, 1], 2);
        for i in 0..5 {
            table.observe(b"\x01\x02\x03\x04\x05\x06\x07\x08", &flow, &[], i);
        }
        assert_eq!(table.samples(b"\x01\x02\x03\x04\x05\x06\x07\x08").unwrap(), &[0, 1]);
    }

    #[test]
    fn candidate_ordering_is_support_then_prefix() {
        let mut table = UnknownPatternTable::new(UnknownTableConfig::default());
        let flow_a = udp_flow([10, 0, 0, 1], 1, [192, 0, 2, 1], 2);
        let flow_b = udp_flow([10, 0, 0, 1], 1, [192, 0, 2, 2], 3);
        for _ in 0..2 {
            table.observe(b"BBBBBBBB", &flow_a, &[], 0);
            table.observe(b"BBBBBBBB", &flow_b, &[], 0);
            table.observe(b"AAAAAAAA", &flow_a, &[], 0);
            table.observe(b"AAAAAAAA", &flow_b, &[], 0);
        }
        table.observe(b"CCCCCCCC", &flow_a, &[], 0);
        table.observe(b"CCCCCCCC", &flow_b, &[], 0);
        let found = table.detect_candidates(1, 1);
        let prefixes: Vec<&[u8]> = found.iter().map(|c| c.prefix.as_slice()).collect();
        // Equal support sorts by prefix; lower support sorts last.
        assert_eq!(prefixes, [b"AAAAAAAA", b"BBBBBBBB", b"CCCCCCCC"]);
    }

    #[test]
    fn mixed_transport_candidate_reports_any() {
        let mut table = UnknownPatternTable::new(UnknownTableConfig::default());
        let tcp = tcp_flow([10, 0, 0, 1], 1, [192, 0, 2, 1], 2);
        let udp = udp_flow([10, 0, 0, 1], 1, [192, 0, 2, 2], 3);
        table.observe(b"\x09\x08\x07\x06\x05\x04\x03\x02", &tcp, &[], 0);
        table.observe(b"\x09\x08\x07\x06\x05\x04\x03\x02", &udp, &[], 1);
        let found = table.detect_candidates(1, 1);
        assert_eq!(found[0].transport, SigTransport::Any);
    }

    #[test]
    fn candidates_block_round_trip() {
        let candidates = vec![
            CandidateSignature {
                prefix: vec![0xaa, 0xbb],
                support: 50,
                endpoint_count: 12,
                transport: SigTransport::Udp,
            },
            CandidateSignature {
                prefix: vec![0x01],
                support: 20,
                endpoint_count: 5,
                transport: SigTransport::Any,
            },
        ];
        let block = candidates_to_block(&candidates);
        assert_eq!(candidates_from_block(&block).unwrap(), candidates);
        assert!(candidates_from_block(b"").unwrap().is_empty());
        assert!(candidates_from_block(b"candidate.00000001.support=1\n").is_err());
        assert!(candidates_from_block(b"bogus=1\n").is_err());
    }

    #[test]
    fn frequency_report_rows_and_percentages() {
        let mut stats = CategoryStats::new();
        for _ in 0..30 {
            stats.record("a", 10, 0);
        }
        for _ in 0..70 {
            stats.record("b", 10, 0);
        }
        let rows = frequency_report(&stats);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].category, "b");
        assert!((rows[0].percent - 70.0).abs() < 1e-9);
        assert_eq!(rows[1].category, "a");
        assert!((rows[1].percent - 30.0).abs() < 1e-9);
        let sum: f64 = rows.iter().map(|r| r.percent).sum();
        assert!((sum - 100.0).abs() < 0.01);

        assert!(frequency_report(&CategoryStats::new()).is_empty());

        let mut one = CategoryStats::new();
        one.record("only", 1, 0);
        let rows = frequency_report(&one);
        assert!((rows[0].percent - 100.0).abs() < 1e-9);
    }
}
