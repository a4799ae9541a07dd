#!/usr/bin/env python3
"""Generates the checked-in pcap fixtures and frozen oracle values.

Frames are assembled field-by-field from the protocol layouts (Ethernet,
IPv4/IPv6, TCP/UDP) so offsets can be audited by hand. Run from this
directory; prints the constants that are frozen into the Rust tests.
"""

import hashlib
import struct

LINKTYPE_ETHERNET = 1
SNAPLEN = 65535


def ipv4_checksum(header: bytes) -> int:
    total = 0
    for i in range(0, len(header), 2):
        total += (header[i] << 8) | header[i + 1]
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def eth(src, dst, ethertype, payload):
    return dst + src + struct.pack(">H", ethertype) + payload


def ipv4(src, dst, proto, payload, options=b""):
    ihl = 5 + len(options) // 4
    header = struct.pack(
        ">BBHHHBBH4s4s",
        (4 << 4) | ihl,
        0,
        20 + len(options) + len(payload),
        0x1234,
        0,
        64,
        proto,
        0,
        src,
        dst,
    ) + options
    csum = ipv4_checksum(header)
    header = header[:10] + struct.pack(">H", csum) + header[12:]
    return header + payload


def ipv6(src, dst, next_header, payload):
    return struct.pack(">IHBB", 6 << 28, len(payload), next_header, 64) + src + dst + payload


def tcp(sport, dport, payload):
    # data offset 5, no options
    return struct.pack(">HHIIBBHHH", sport, dport, 1, 0, 5 << 4, 0x18, 8192, 0, 0) + payload


def udp(sport, dport, payload):
    return struct.pack(">HHHH", sport, dport, 8 + len(payload), 0) + payload


MAC_A = bytes.fromhex("020000000001")
MAC_B = bytes.fromhex("020000000002")
IP_A = bytes([10, 0, 0, 1])
IP_B = bytes([192, 0, 2, 7])
IP6_A = bytes.fromhex("20010db8000000000000000000000001")
IP6_B = bytes.fromhex("20010db8000000000000000000000002")

frames = []

# 1: Ethernet+IPv4+TCP, no options -> app payload at offset 54
frames.append((100, 1000, eth(MAC_A, MAC_B, 0x0800, ipv4(IP_A, IP_B, 6, tcp(49152, 6881, b"hello\n"))), None))
# 2: Ethernet+IPv4+UDP -> app payload at offset 42
frames.append((100, 2000, eth(MAC_A, MAC_B, 0x0800, ipv4(IP_A, IP_B, 17, udp(49153, 6881, b"ping"))), None))
# 3: non-IP ethertype (ARP) -> transport other
arp = struct.pack(">HHBBH", 1, 0x0800, 6, 4, 1) + MAC_A + IP_A + MAC_B + IP_B
frames.append((101, 0, eth(MAC_A, MAC_B, 0x0806, arp), None))
# 4: truncated inside the IPv4 header (captured 22 of 60 bytes)
full4 = eth(MAC_A, MAC_B, 0x0800, ipv4(IP_A, IP_B, 6, tcp(49154, 80, b"x" * 6)))
frames.append((101, 500000, full4[:22], len(full4)))
# 5: Ethernet+IPv6+TCP -> app payload at offset 74
frames.append((102, 999999, eth(MAC_A, MAC_B, 0x86DD, ipv6(IP6_A, IP6_B, 6, tcp(49155, 6881, b"abc"))), None))
# 6: Ethernet+IPv4+TCP with 4 bytes of IP options -> app payload at offset 58
frames.append((103, 250000, eth(MAC_A, MAC_B, 0x0800, ipv4(IP_A, IP_B, 6, tcp(49156, 4662, b"opt!"), options=bytes([1, 1, 1, 1]))), None))


def write_pcap(path, big_endian):
    e = ">" if big_endian else "<"
    magic = 0xA1B2C3D4
    out = struct.pack(e + "IHHiIII", magic, 2, 4, 0, 0, SNAPLEN, LINKTYPE_ETHERNET)
    for sec, frac, data, orig in frames:
        orig_len = orig if orig is not None else len(data)
        out += struct.pack(e + "IIII", sec, frac, len(data), orig_len) + data
    with open(path, "wb") as f:
        f.write(out)
    return out


native = write_pcap("reference.pcap", big_endian=True)
swapped = write_pcap("reference_swapped.pcap", big_endian=False)

payload_cat = b"".join(data for _, _, data, _ in frames)
print("packet_count:", len(frames))
print("captured_lengths:", [len(d) for _, _, d, _ in frames])
print("payload_sha256:", hashlib.sha256(payload_cat).hexdigest())
print("native_file_sha256:", hashlib.sha256(native).hexdigest())
print("swapped_file_sha256:", hashlib.sha256(swapped).hexdigest())
print("bt_handshake_prefix_hex:", (bytes([0x13]) + b"BitTorrent protocol").hex())

# --- evidence bag header oracle -------------------------------------------
# Canonical metadata block: sorted keys, key=value lines, backslash escaping.
META = {
    "case_suspect_name": "J. Doe",
    "description": "P2P capture test",
    "exhibit_reference": "EXH-001",
    "incident_reference": "INC-2026-0042",
    "investigating_agency": "Example Agency",
    "laboratory_reference": "LAB-99",
    "producer_name": "operator-a",
    "producer_signature": "",
    "property_reference": "PROP-7",
    "seized_datetime": "2026-01-15T10:30:00Z",
    "seized_location": "Lab 4",
}


def esc(v):
    return v.replace("\\", "\\\\").replace("\n", "\\n")


meta_block = "".join(f"{k}={esc(META[k])}\n" for k in sorted(META)).encode()

CREATED_AT = 1767225600000000  # 2026-01-01T00:00:00Z in microseconds
SIG_DIGEST = bytes([0x11]) * 32

header = b"P2PDEB01"
header += struct.pack("<HHIIQI", 1, 1, SNAPLEN, LINKTYPE_ETHERNET, CREATED_AT, len(meta_block))
header += meta_block
header += SIG_DIGEST
print("fixture_header_len:", len(header))
print("fixture_header_sha256:", hashlib.sha256(header).hexdigest())

# Chain value after one segment whose payload is the single canonical
# (big-endian, microsecond) record encoding of frame 1.
sec, frac, data, _ = frames[0]
record = struct.pack(">IIII", sec, frac, len(data), len(data)) + data
payload_hash = hashlib.sha256(record).digest()
seed = hashlib.sha256(header).digest()
chain1 = hashlib.sha256(seed + payload_hash).digest()
print("fixture_segment0_payload_sha256:", payload_hash.hex())
print("fixture_chain1_sha256:", chain1.hex())
