"""Flow reassembly and tensorization of raw packet traffic.

Packets are grouped into bidirectional flows, truncated or zero padded
to a fixed grid of 100 packets x 200 bytes, and scaled to [0, 1] so a
network can consume them directly.  Address and checksum bytes can be
zeroed beforehand so models cannot key on endpoint identity.
"""

from __future__ import annotations

import base64
import json
import socket
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .errors import DataError

FLOW_PACKETS = 100
PACKET_BYTES = 200
IDLE_TIMEOUT = 60.0

SOURCE_PCAP = "PCAP"
SOURCE_SYNTHETIC = "SYNTHETIC"


@dataclass(frozen=True, order=True)
class FlowKey:
    """Canonical bidirectional flow identity.

    The lower (address, port) endpoint is always stored first, so both
    directions of a conversation map to the same key.
    """

    addr_a: str
    port_a: int
    addr_b: str
    port_b: int
    protocol: int

    @classmethod
    def canonical(cls, src_addr: str, src_port: int, dst_addr: str,
                  dst_port: int, protocol: int) -> "FlowKey":
        a = (src_addr, src_port)
        b = (dst_addr, dst_port)
        if b < a:
            a, b = b, a
        return cls(a[0], a[1], b[0], b[1], protocol)

    def as_tuple(self) -> tuple:
        return (self.addr_a, self.port_a, self.addr_b, self.port_b,
                self.protocol)


@dataclass
class FlowTensor:
    """Fixed-size numeric image of one flow.

    data is (100, 200) float32 with entries byte/255; rows past the
    last real packet and bytes past each packet's length stay exactly 0.
    """

    data: np.ndarray
    packet_count: int

    def __post_init__(self):
        if self.data.shape != (FLOW_PACKETS, PACKET_BYTES):
            raise DataError(
                f"flow tensor must be {FLOW_PACKETS}x{PACKET_BYTES}, "
                f"got {self.data.shape}")
        if self.data.dtype != np.float32:
            self.data = self.data.astype(np.float32)

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)


@dataclass(frozen=True)
class MaskPolicy:
    """Which bytes of each packet are forced to zero before scaling.

    mode "headers" zeroes IP source/destination addresses plus the IP,
    TCP, or UDP checksum fields; "none" leaves packets untouched.
    extra_positions adds absolute byte offsets to zero in every packet.
    """

    mode: str = "headers"
    extra_positions: tuple = ()

    def __post_init__(self):
        if self.mode not in ("headers", "none"):
            raise DataError(f"unknown mask mode {self.mode!r}")

    def apply(self, packet: bytes) -> bytes:
        buf = bytearray(packet)
        if self.mode == "headers":
            _zero_header_fields(buf)
        for pos in self.extra_positions:
            if 0 <= pos < len(buf):
                buf[pos] = 0
        return bytes(buf)


def _zero_header_fields(buf: bytearray) -> None:
    """Zero address and checksum bytes in place.

    Expects the packet to start at the IP header (link layer already
    stripped).  Truncated or non-IP packets are left as they are past
    the point where parsing stops.
    """
    if not buf:
        return
    version = buf[0] >> 4
    if version == 4:
        if len(buf) < 20:
            return
        ihl = (buf[0] & 0x0F) * 4
        _zero_range(buf, 10, 12)   # header checksum
        _zero_range(buf, 12, 20)   # src + dst address
        if ihl < 20 or len(buf) <= ihl + 9:
            return
        proto = buf[9]
        if proto == 6:             # TCP checksum
            _zero_range(buf, ihl + 16, ihl + 18)
        elif proto == 17:          # UDP checksum
            _zero_range(buf, ihl + 6, ihl + 8)
    elif version == 6:
        if len(buf) < 40:
            return
        _zero_range(buf, 8, 40)    # src + dst address
        nxt = buf[6]
        if nxt == 6:
            _zero_range(buf, 40 + 16, 40 + 18)
        elif nxt == 17:
            _zero_range(buf, 40 + 6, 40 + 8)


def _zero_range(buf: bytearray, start: int, end: int) -> None:
    end = min(end, len(buf))
    for i in range(start, end):
        buf[i] = 0


def tensorize(payloads: Sequence[bytes],
              mask: Optional[MaskPolicy] = None) -> FlowTensor:
    """Turn a list of raw packets into one FlowTensor.

    Keeps at most the first 100 packets and the first 200 bytes of
    each; masking happens before the /255 scaling so masked bytes are
    exactly 0 in the tensor.
    """
    if not payloads:
        raise DataError("cannot tensorize an empty flow")
    data = np.zeros((FLOW_PACKETS, PACKET_BYTES), dtype=np.float32)
    kept = payloads[:FLOW_PACKETS]
    for i, pkt in enumerate(kept):
        if mask is not None:
            pkt = mask.apply(pkt)
        row = np.frombuffer(pkt[:PACKET_BYTES], dtype=np.uint8)
        if row.size:
            data[i, :row.size] = row.astype(np.float32) / 255.0
    return FlowTensor(data=data, packet_count=len(kept))


@dataclass
class LabeledFlow:
    """One flow sample: tensor plus label and provenance."""

    tensor: FlowTensor
    label: str
    source: str = SOURCE_SYNTHETIC
    key: Optional[FlowKey] = None


@dataclass
class PacketRecord:
    """One parsed packet: capture timestamp, flow identity, bytes."""

    timestamp: float
    key: FlowKey
    data: bytes


@dataclass
class ReassemblyStats:
    """Counters filled in by reassemble_flows."""

    packets: int = 0
    malformed: int = 0
    flows: int = 0
    capped: int = 0


def reassemble_flows(records: Iterable[PacketRecord],
                     idle_timeout: float = IDLE_TIMEOUT,
                     stats: Optional[ReassemblyStats] = None,
                     ) -> list[tuple[FlowKey, list[bytes]]]:
    """Group packets into flows in first-seen order.

    A flow is cut when it reaches 100 packets (the remainder starts a
    new flow under the same key) or when more than idle_timeout seconds
    pass between consecutive packets of the key.  Records that are not
    PacketRecord-shaped are skipped and counted as malformed.
    """
    if stats is None:
        stats = ReassemblyStats()
    open_flows: dict[FlowKey, dict] = {}
    done: list[tuple[FlowKey, list[bytes]]] = []

    def close(key: FlowKey) -> None:
        entry = open_flows.pop(key)
        done.append((key, entry["payloads"]))
        stats.flows += 1

    for rec in records:
        try:
            ts = float(rec.timestamp)
            key = rec.key
            data = rec.data
            if not isinstance(key, FlowKey) or not isinstance(data, (bytes, bytearray)):
                raise TypeError
        except (AttributeError, TypeError, ValueError):
            stats.malformed += 1
            continue
        stats.packets += 1
        entry = open_flows.get(key)
        if entry is not None and ts - entry["last"] > idle_timeout:
            close(key)
            entry = None
        if entry is None:
            entry = {"payloads": [], "last": ts}
            open_flows[key] = entry
        entry["payloads"].append(bytes(data))
        entry["last"] = ts
        if len(entry["payloads"]) >= FLOW_PACKETS:
            # cap reached: later packets for this key start a fresh flow
            close(key)
            stats.capped += 1
    for key in list(open_flows):
        close(key)
    return done


# ---------------------------------------------------------------------------
# pcap reading

_PCAP_MAGICS = {
    0xA1B2C3D4: ("<", 1e-6),   # little endian, microseconds
    0xD4C3B2A1: (">", 1e-6),
    0xA1B23C4D: ("<", 1e-9),   # nanosecond variant
    0x4D3CB2A1: (">", 1e-9),
}

_LINKTYPE_ETHERNET = 1
_LINKTYPE_RAW = 101
_LINKTYPE_NULL = 0
_LINKTYPE_LINUX_SLL = 113


def read_pcap(path: str | Path,
              stats: Optional[ReassemblyStats] = None) -> Iterator[PacketRecord]:
    """Yield parsed IP packets from a classic pcap file.

    Handles ethernet, raw-IP, null, and linux cooked link layers and
    strips them, so downstream masking sees the IP header at offset 0.
    Non-IP or truncated records are counted as malformed and skipped.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"pcap file not found: {path}")
    if stats is None:
        stats = ReassemblyStats()
    with path.open("rb") as fh:
        head = fh.read(24)
        if len(head) < 24:
            raise DataError(f"{path}: truncated pcap global header")
        magic = struct.unpack("<I", head[:4])[0]
        if magic in _PCAP_MAGICS:
            endian, tick = _PCAP_MAGICS[magic]
        else:
            raise DataError(f"{path}: not a pcap file (magic {magic:#x})")
        linktype = struct.unpack(endian + "I", head[20:24])[0]
        while True:
            rec_hdr = fh.read(16)
            if len(rec_hdr) == 0:
                break
            if len(rec_hdr) < 16:
                stats.malformed += 1
                break
            ts_sec, ts_frac, incl_len, orig_len = struct.unpack(
                endian + "IIII", rec_hdr)
            data = fh.read(incl_len)
            if len(data) < incl_len:
                stats.malformed += 1
                break
            ip = _strip_link_layer(data, linktype)
            if ip is None:
                stats.malformed += 1
                continue
            key = _flow_key_from_ip(ip)
            if key is None:
                stats.malformed += 1
                continue
            yield PacketRecord(timestamp=ts_sec + ts_frac * tick,
                               key=key, data=ip)


def _strip_link_layer(data: bytes, linktype: int) -> Optional[bytes]:
    if linktype == _LINKTYPE_RAW:
        return data
    if linktype == _LINKTYPE_ETHERNET:
        if len(data) < 14:
            return None
        ethertype = struct.unpack("!H", data[12:14])[0]
        offset = 14
        while ethertype == 0x8100 and len(data) >= offset + 4:  # VLAN tag
            ethertype = struct.unpack("!H", data[offset + 2:offset + 4])[0]
            offset += 4
        if ethertype in (0x0800, 0x86DD):
            return data[offset:]
        return None
    if linktype == _LINKTYPE_NULL:
        if len(data) < 4:
            return None
        return data[4:]
    if linktype == _LINKTYPE_LINUX_SLL:
        if len(data) < 16:
            return None
        ethertype = struct.unpack("!H", data[14:16])[0]
        if ethertype in (0x0800, 0x86DD):
            return data[16:]
        return None
    return None


def _flow_key_from_ip(ip: bytes) -> Optional[FlowKey]:
    if not ip:
        return None
    version = ip[0] >> 4
    if version == 4:
        if len(ip) < 20:
            return None
        ihl = (ip[0] & 0x0F) * 4
        proto = ip[9]
        src = socket.inet_ntop(socket.AF_INET, ip[12:16])
        dst = socket.inet_ntop(socket.AF_INET, ip[16:20])
        l4 = ip[ihl:]
    elif version == 6:
        if len(ip) < 40:
            return None
        proto = ip[6]
        src = socket.inet_ntop(socket.AF_INET6, ip[8:24])
        dst = socket.inet_ntop(socket.AF_INET6, ip[24:40])
        l4 = ip[40:]
    else:
        return None
    sport = dport = 0
    if proto in (6, 17) and len(l4) >= 4:
        sport, dport = struct.unpack("!HH", l4[:4])
    return FlowKey.canonical(src, sport, dst, dport, proto)


def pcap_to_flows(path: str | Path, label: str,
                  mask: Optional[MaskPolicy] = None,
                  idle_timeout: float = IDLE_TIMEOUT,
                  stats: Optional[ReassemblyStats] = None) -> list[LabeledFlow]:
    """Read a capture and return labeled flow tensors."""
    if mask is None:
        mask = MaskPolicy()
    if stats is None:
        stats = ReassemblyStats()
    flows = reassemble_flows(read_pcap(path, stats=stats),
                             idle_timeout=idle_timeout, stats=stats)
    out = []
    for key, payloads in flows:
        out.append(LabeledFlow(tensor=tensorize(payloads, mask=mask),
                               label=label, source=SOURCE_PCAP, key=key))
    return out


# ---------------------------------------------------------------------------
# manifest files: one JSON object per line

_MANIFEST_VERSION = 1


def write_manifest(flows: Sequence[LabeledFlow], path: str | Path) -> None:
    """Write flows as line-delimited JSON with inline tensors.

    Tensors are stored as base64 of the original bytes (tensor * 255
    cast back to uint8), which is lossless for data produced by
    tensorize.
    """
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        header = {"kind": "flow-manifest", "version": _MANIFEST_VERSION,
                  "count": len(flows)}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for flow in flows:
            raw = np.rint(flow.tensor.data * 255.0).astype(np.uint8)
            rec = {
                "label": flow.label,
                "source": flow.source,
                "packet_count": flow.tensor.packet_count,
                "tensor_b64": base64.b64encode(raw.tobytes()).decode("ascii"),
            }
            if flow.key is not None:
                rec["key"] = list(flow.key.as_tuple())
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_manifest(path: str | Path,
                  label_pool: Optional[Sequence[str]] = None) -> list[LabeledFlow]:
    """Load a manifest, validating shape and optionally the label pool.

    Unknown labels are reported all at once so an analyst can fix the
    file in one pass.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    flows: list[LabeledFlow] = []
    bad_labels: dict[str, int] = {}
    with path.open("r", encoding="utf-8") as fh:
        first = fh.readline()
        try:
            header = json.loads(first)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:1: not a manifest header: {exc}") from None
        if not isinstance(header, dict) or header.get("kind") != "flow-manifest":
            raise DataError(f"{path}: missing flow-manifest header line")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                label = rec["label"]
                raw = base64.b64decode(rec["tensor_b64"])
                packet_count = int(rec["packet_count"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record: {exc}") from None
            arr = np.frombuffer(raw, dtype=np.uint8)
            if arr.size != FLOW_PACKETS * PACKET_BYTES:
                raise DataError(
                    f"{path}:{lineno}: tensor has {arr.size} bytes, "
                    f"expected {FLOW_PACKETS * PACKET_BYTES}")
            data = (arr.astype(np.float32) / 255.0).reshape(
                FLOW_PACKETS, PACKET_BYTES)
            key = None
            if "key" in rec:
                key = FlowKey(*rec["key"])
            if label_pool is not None and label not in label_pool:
                bad_labels[label] = bad_labels.get(label, 0) + 1
            flows.append(LabeledFlow(
                tensor=FlowTensor(data=data, packet_count=packet_count),
                label=label, source=rec.get("source", SOURCE_PCAP), key=key))
    if bad_labels:
        listing = ", ".join(f"{k!r} x{v}" for k, v in sorted(bad_labels.items()))
        raise DataError(f"{path}: labels outside the allowed pool: {listing}")
    return flows


def batch_matrix(flows: Sequence[LabeledFlow]) -> np.ndarray:
    """Stack flow tensors into an (n, 20000) float32 matrix."""
    if not flows:
        raise DataError("empty flow batch")
    return np.stack([f.tensor.flat() for f in flows]).astype(np.float32)
