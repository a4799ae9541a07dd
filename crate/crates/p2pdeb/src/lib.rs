//! Evidence-grade capture and containment for peer-to-peer network
//! investigations.
//!
//! The crate covers the path from a packet source to a sealed,
//! court-presentable container and back:
//!
//! - [`pcap`] reads and writes classic capture files and decodes
//!   frames far enough to find transport endpoints and payloads.
//! - [`classify`] matches payloads against an exact-byte signature
//!   set, keeps per-category traffic statistics, and mines recurring
//!   prefixes in unclassified traffic for candidate signatures.
//! - [`bag`] is the container itself: case metadata, hash-chained
//!   packet segments, a statistics footer, and split/merge into
//!   bounded-size parts without breaking verifiability.
//! - [`custody`] provides the append-only, hash-linked audit log
//!   embedded in every bag and continued in a sidecar file after
//!   sealing.
//! - [`pipeline`] wires a packet source through classification into a
//!   bag writer with bounded memory and live progress reporting.
//!
//! Every stored artifact is designed so that any byte-level change is
//! detectable afterwards: segment payloads are hash-chained starting
//! from a digest of the header (so metadata edits break the chain
//! too), and every handling step lands in the audit log.

pub mod bag;
pub mod classify;
pub mod custody;
pub mod hexstr;
pub mod kv;
pub mod pcap;
pub mod pipeline;
