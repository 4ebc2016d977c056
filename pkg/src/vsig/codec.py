"""Canonical byte encodings and the `.vsig` archive format.

Every multi-byte integer is big-endian. An archive is

    magic "VSIG" | version (2B) | record*
    record = type (1B) | body length (4B) | body

Record bodies that carry a signature start with a 4-byte length followed by
the canonical bytes that were signed, so a verifier can slice the signed
message out without re-serializing it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Optional, Sequence

from vsig.crypto import DIGEST_SIZE, TimestampToken
from vsig.model import (
    META_FORMAT_VERSION,
    DeltaReport,
    Interval,
    IntervalId,
    MetaKind,
    RtpPacket,
    SecurityValue,
    SessionMeta,
    Termination,
    seq_order,
)

MAGIC = b"VSIG"
FORMAT_VERSION = 1
HEADER_SIZE = 6
FRAME_SIZE = 5
RTP_HEADER_SIZE = 12
INTERVAL_PREFIX_SIZE = 29

_FLAG_CONFERENCE = 0x01


class RecordType(IntEnum):
    INIT = 0x01
    INTERVAL = 0x02
    FINAL = 0x03
    TSA = 0x04
    QUARANTINE = 0x05


class DecodeError(Exception):
    def __init__(self, kind: str, offset: int, message: str, ordinal: Optional[int] = None):
        super().__init__(f"{message} at offset {offset}")
        self.kind = kind
        self.offset = offset
        self.ordinal = ordinal


@dataclass(frozen=True)
class ArchiveRecord:
    record_type: RecordType
    body: bytes

    def encode(self) -> bytes:
        return struct.pack(">BI", self.record_type, len(self.body)) + self.body


@dataclass
class ArchiveFile:
    records: list[ArchiveRecord] = field(default_factory=list)
    version: int = FORMAT_VERSION
    offsets: list[int] = field(default_factory=list, compare=False, repr=False)


@dataclass(frozen=True)
class Container:
    signer: int
    algorithm_id: int
    signature: bytes
    chain: tuple[tuple[int, bytes], ...] = ()

    def certificates(self) -> dict[int, tuple[bytes, ...]]:
        out: dict[int, list[bytes]] = {}
        for pid, der in self.chain:
            out.setdefault(pid, []).append(der)
        return {pid: tuple(ders) for pid, ders in out.items()}


class _Reader:
    def __init__(self, buf: bytes, offset: int = 0, end: Optional[int] = None):
        self.buf = buf
        self.pos = offset
        self.end = len(buf) if end is None else end

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > self.end:
            raise DecodeError("truncated", self.pos, f"truncated field ({n} bytes wanted)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > self.end:
            raise DecodeError("truncated", self.pos, f"truncated field ({size} bytes wanted)")
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return out

    def done(self) -> None:
        if self.pos != self.end:
            raise DecodeError("trailing", self.pos, f"{self.end - self.pos} trailing bytes")


# -- small pieces -----------------------------------------------------------


def encode_cert_list(chain: Iterable[tuple[int, bytes]]) -> bytes:
    chain = list(chain)
    out = [struct.pack(">B", len(chain))]
    for pid, der in chain:
        out.append(struct.pack(">HH", pid, len(der)) + der)
    return b"".join(out)


def decode_cert_list(raw: bytes) -> tuple[tuple[int, bytes], ...]:
    if not raw:
        return ()
    r = _Reader(raw)
    (count,) = r.unpack(">B")
    out = []
    for _ in range(count):
        pid, n = r.unpack(">HH")
        out.append((pid, r.take(n)))
    r.done()
    return tuple(out)


def encode_container(signer: int, algorithm_id: int, signature: bytes, chain: Sequence[tuple[int, bytes]] = ()) -> bytes:
    chain_bytes = encode_cert_list(chain) if chain else b""
    return (
        struct.pack(">HBH", signer, algorithm_id, len(signature))
        + signature
        + struct.pack(">I", len(chain_bytes))
        + chain_bytes
    )


def _read_container(r: _Reader) -> Container:
    signer, algorithm_id, n = r.unpack(">HBH")
    signature = r.take(n)
    (chain_len,) = r.unpack(">I")
    chain = decode_cert_list(r.take(chain_len))
    return Container(signer, algorithm_id, signature, chain)


def _packet_entry(p: RtpPacket) -> bytes:
    return p.header() + struct.pack(">H", len(p.payload)) + p.payload


def _read_packet(r: _Reader) -> RtpPacket:
    header = r.take(RTP_HEADER_SIZE)
    (n,) = r.unpack(">H")
    payload = r.take(n)
    try:
        return RtpPacket.from_header(header, payload)
    except ValueError as exc:
        raise DecodeError("malformed", r.pos, f"bad packet: {exc}") from None


# -- canonical bytes --------------------------------------------------------


def canonical_interval_bytes(interval: Interval) -> bytes:
    """Deterministic encoding of an interval: only packets named by delta count."""
    packets = interval.reduced_packets()
    seqs = [p.sequence_number for p in packets]
    out = [
        struct.pack(">QBQQI", interval.id.index, interval.id.owner, interval.start_ms, interval.end_ms, len(packets)),
    ]
    out.extend(_packet_entry(p) for p in packets)
    out.append(struct.pack(">I", len(seqs)))
    out.append(struct.pack(f">{len(seqs)}H", *seqs))
    return b"".join(out)


def chain_message(interval_bytes: bytes, previous: SecurityValue) -> bytes:
    return interval_bytes + previous.signature + previous.covered_digest


def canonical_meta_bytes(meta: SessionMeta) -> bytes:
    flags = _FLAG_CONFERENCE if meta.conference else 0
    out = [
        struct.pack(">BBBI", META_FORMAT_VERSION, meta.kind, flags, meta.interval_duration_ms),
        meta.nonce,
        struct.pack(">BH", meta.termination, len(meta.sip_data)),
    ]
    for key in sorted(meta.sip_data):
        k = str(key).encode()
        v = str(meta.sip_data[key]).encode()
        out.append(struct.pack(">H", len(k)) + k + struct.pack(">H", len(v)) + v)
    out.append(struct.pack(">I", len(meta.auth_data)) + meta.auth_data)
    return b"".join(out)


def decode_meta_bytes(raw: bytes) -> SessionMeta:
    r = _Reader(raw)
    version, kind, flags, d_ms = r.unpack(">BBBI")
    if version != META_FORMAT_VERSION:
        raise DecodeError("malformed", 0, f"unknown meta version {version}")
    nonce = r.take(16)
    term, count = r.unpack(">BH")
    sip = {}
    for _ in range(count):
        (kn,) = r.unpack(">H")
        key = r.take(kn)
        (vn,) = r.unpack(">H")
        sip[key.decode("utf-8", "replace")] = r.take(vn).decode("utf-8", "replace")
    (an,) = r.unpack(">I")
    auth = r.take(an)
    r.done()
    try:
        return SessionMeta(MetaKind(kind), d_ms, nonce, sip, auth, Termination(term), bool(flags & _FLAG_CONFERENCE))
    except ValueError as exc:
        raise DecodeError("malformed", 0, f"bad meta: {exc}") from None


# -- record bodies ----------------------------------------------------------


@dataclass(frozen=True)
class MetaRecord:
    meta: SessionMeta
    canonical: bytes
    container: Container


@dataclass(frozen=True)
class IntervalRecord:
    interval: Interval
    canonical: bytes
    extras: tuple[RtpPacket, ...]
    container: Container


@dataclass(frozen=True)
class LinkEntry:
    """One interval k of a conference step: per-receiver delta lists and the
    hash manifest over every packet some receiver got."""

    index: int
    owner: int
    start_ms: int
    end_ms: int
    deltas: tuple[tuple[int, tuple[int, ...]], ...]
    manifest: tuple[tuple[int, bytes], ...]

    @property
    def theta(self) -> tuple[int, ...]:
        return tuple(s for s, _ in self.manifest)


@dataclass(frozen=True)
class LinkRecord:
    step: int
    round: int
    holder: int
    finalizing: bool
    entries: tuple[LinkEntry, ...]
    canonical: bytes
    packets: tuple[tuple[RtpPacket, ...], ...]
    container: Container


def _with_canonical(canonical: bytes, rest: bytes) -> bytes:
    return struct.pack(">I", len(canonical)) + canonical + rest


def _split_canonical(body: bytes) -> tuple[bytes, _Reader]:
    r = _Reader(body)
    (n,) = r.unpack(">I")
    canonical = r.take(n)
    return canonical, r


def encode_meta_body(meta: SessionMeta, container: bytes) -> bytes:
    return _with_canonical(canonical_meta_bytes(meta), container)


def decode_meta_body(body: bytes) -> MetaRecord:
    canonical, r = _split_canonical(body)
    container = _read_container(r)
    r.done()
    return MetaRecord(decode_meta_bytes(canonical), canonical, container)


def encode_interval_body(interval: Interval, container: bytes) -> bytes:
    extras = interval.unreceived_packets()
    rest = [struct.pack(">I", len(extras))]
    rest.extend(b"\x00" + _packet_entry(p) for p in extras)
    rest.append(container)
    return _with_canonical(canonical_interval_bytes(interval), b"".join(rest))


def decode_interval_body(body: bytes) -> IntervalRecord:
    canonical, r = _split_canonical(body)
    c = _Reader(canonical)
    index, owner, start, end, count = c.unpack(">QBQQI")
    packets = [_read_packet(c) for _ in range(count)]
    (dn,) = c.unpack(">I")
    seqs = c.unpack(f">{dn}H") if dn else ()
    c.done()
    if list(seqs) != [p.sequence_number for p in packets] or list(seqs) != seq_order(seqs) or len(set(seqs)) != len(seqs):
        raise DecodeError("malformed", 0, "delta list does not match signed packets")
    (en,) = r.unpack(">I")
    extras = []
    for _ in range(en):
        (flag,) = r.unpack(">B")
        if flag != 0:
            raise DecodeError("malformed", r.pos - 1, "bad unreceived-packet flag")
        extras.append(_read_packet(r))
    container = _read_container(r)
    r.done()
    try:
        interval = Interval(
            IntervalId(index, owner),
            start,
            end,
            tuple(packets) + tuple(extras),
            DeltaReport(index, -1, tuple(seqs)),
        )
    except ValueError as exc:
        raise DecodeError("malformed", 0, f"bad interval: {exc}") from None
    return IntervalRecord(interval, canonical, tuple(extras), container)


def canonical_link_bytes(step: int, round_: int, holder: int, finalizing: bool, entries: Sequence[LinkEntry]) -> bytes:
    out = [struct.pack(">QIBBB", step, round_, holder, int(finalizing), len(entries))]
    for e in entries:
        out.append(struct.pack(">QBQQB", e.index, e.owner, e.start_ms, e.end_ms, len(e.deltas)))
        for sigma, seqs in e.deltas:
            out.append(struct.pack(f">BI{len(seqs)}H", sigma, len(seqs), *seqs))
        out.append(struct.pack(">I", len(e.manifest)))
        for seq, h in e.manifest:
            out.append(struct.pack(">H", seq) + h)
    return b"".join(out)


def encode_link_body(canonical: bytes, packets: Sequence[Sequence[RtpPacket]], container: bytes) -> bytes:
    rest = []
    for group in packets:
        rest.append(struct.pack(">H", len(group)))
        rest.extend(_packet_entry(p) for p in group)
    rest.append(container)
    return _with_canonical(canonical, b"".join(rest))


def decode_link_body(body: bytes) -> LinkRecord:
    canonical, r = _split_canonical(body)
    c = _Reader(canonical)
    step, round_, holder, finalizing, count = c.unpack(">QIBBB")
    entries = []
    for _ in range(count):
        index, owner, start, end, nd = c.unpack(">QBQQB")
        deltas = []
        for _ in range(nd):
            sigma, n = c.unpack(">BI")
            deltas.append((sigma, tuple(c.unpack(f">{n}H")) if n else ()))
        (nm,) = c.unpack(">I")
        manifest = []
        for _ in range(nm):
            (seq,) = c.unpack(">H")
            manifest.append((seq, c.take(DIGEST_SIZE)))
        entries.append(LinkEntry(index, owner, start, end, tuple(deltas), tuple(manifest)))
    c.done()
    groups = []
    for _ in range(count):
        (n,) = r.unpack(">H")
        groups.append(tuple(_read_packet(r) for _ in range(n)))
    container = _read_container(r)
    r.done()
    return LinkRecord(step, round_, holder, bool(finalizing), tuple(entries), canonical, tuple(groups), container)


def encode_token_body(token: TimestampToken) -> bytes:
    return token.signed_bytes() + encode_container(token.authority, token.algorithm_id, token.signature)


def decode_token_body(body: bytes) -> TimestampToken:
    r = _Reader(body)
    authority, asserted = r.unpack(">BQ")
    covered = r.take(DIGEST_SIZE)
    container = _read_container(r)
    r.done()
    if container.signer != authority or container.chain:
        raise DecodeError("malformed", 0, "token container does not match its authority")
    return TimestampToken(authority, asserted, covered, container.signature, container.algorithm_id)


def encode_quarantine_body(location: int, reason: str) -> bytes:
    return struct.pack(">Q", location) + reason.encode()


def decode_quarantine_body(body: bytes) -> tuple[int, str]:
    r = _Reader(body)
    (location,) = r.unpack(">Q")
    return location, r.take(r.end - r.pos).decode("utf-8", "replace")


def record_index(record: ArchiveRecord) -> int:
    """Interval (or conference step) index of an interval record."""
    if len(record.body) < 12:
        raise DecodeError("truncated", 0, "interval record too short")
    return struct.unpack_from(">Q", record.body, 4)[0]


# -- archive files ----------------------------------------------------------


def encode_archive(records: Iterable[ArchiveRecord] | ArchiveFile) -> bytes:
    if isinstance(records, ArchiveFile):
        version, records = records.version, records.records
    else:
        version = FORMAT_VERSION
    return MAGIC + struct.pack(">H", version) + b"".join(r.encode() for r in records)


def archive_header() -> bytes:
    return MAGIC + struct.pack(">H", FORMAT_VERSION)


def iter_frames(data: bytes):
    """Yield (offset, record) pairs; raise DecodeError where framing breaks."""
    if len(data) < HEADER_SIZE:
        raise DecodeError("truncated", 0, "truncated header")
    if data[:4] != MAGIC:
        raise DecodeError("bad-magic", 0, f"bad magic {data[:4]!r}")
    (version,) = struct.unpack_from(">H", data, 4)
    if version != FORMAT_VERSION:
        raise DecodeError("bad-version", 4, f"unsupported format version {version}")
    pos = HEADER_SIZE
    ordinal = 0
    while pos < len(data):
        if pos + FRAME_SIZE > len(data):
            raise DecodeError("truncated", pos, "truncated record", ordinal)
        rtype, length = struct.unpack_from(">BI", data, pos)
        try:
            rtype = RecordType(rtype)
        except ValueError:
            raise DecodeError("unknown-type", pos, f"unknown record type 0x{rtype:02x}", ordinal) from None
        if pos + FRAME_SIZE + length > len(data):
            raise DecodeError("truncated", pos, "truncated record", ordinal)
        yield pos, ArchiveRecord(rtype, data[pos + FRAME_SIZE:pos + FRAME_SIZE + length])
        pos += FRAME_SIZE + length
        ordinal += 1


def decode_archive(data: bytes, validate: bool = True) -> ArchiveFile:
    """Parse framing; with `validate`, also enforce record ordering."""
    records: list[ArchiveRecord] = []
    offsets: list[int] = []
    for offset, record in iter_frames(data):
        records.append(record)
        offsets.append(offset)
    archive = ArchiveFile(records, FORMAT_VERSION, offsets)
    if validate:
        validate_order(archive)
    return archive


def validate_order(archive: ArchiveFile) -> None:
    """Check the structural invariants: init + token first, intervals in
    strictly increasing order, final + token last. A conference archive may
    hold several segments, each opened by its own init record."""
    recs = archive.records
    offs = archive.offsets or [0] * len(recs)

    def fail(i: int, message: str):
        raise DecodeError("order", offs[i] if i < len(offs) else 0, message, i)

    if not recs:
        raise DecodeError("order", HEADER_SIZE, "archive has no records")
    last_index = 0
    state = "start"
    for i, rec in enumerate(recs):
        t = rec.record_type
        if t is RecordType.QUARANTINE:
            return
        if state in ("start", "closed"):
            if t is not RecordType.INIT:
                fail(i, "expected init record")
            state, last_index = "init", -1
        elif state == "init":
            if t is not RecordType.TSA:
                fail(i, "init record must be followed by its timestamp token")
            state = "open"
        elif state == "open":
            if t is RecordType.INTERVAL:
                idx = record_index(rec)
                if idx <= last_index:
                    fail(i, f"out-of-order interval {idx} after {last_index}")
                last_index = idx
            elif t is RecordType.FINAL:
                state = "final"
            else:
                fail(i, f"unexpected {t.name.lower()} record")
        elif state == "final":
            if t is not RecordType.TSA:
                fail(i, "final record must be followed by its timestamp token")
            state = "closed"
    if state == "init":
        fail(len(recs) - 1, "init record without timestamp token")
    if state == "final":
        fail(len(recs) - 1, "final record without timestamp token")


def signed_spans(data: bytes) -> list[tuple[int, int, int]]:
    """Byte ranges of a bilateral archive whose content is protected by a
    signature, as (start, end, chain position). Chain position is 0 for the
    init record and its token, l for interval l and last + 1 for the final
    record and its token. Length prefixes and unreceived packets are stored
    but not signed."""
    archive = decode_archive(data)
    spans = []
    position = 0
    for rec, off in zip(archive.records, archive.offsets):
        body_start = off + FRAME_SIZE
        t = rec.record_type
        if t is RecordType.INIT:
            position = 0
        elif t is RecordType.INTERVAL:
            position = record_index(rec)
        elif t is RecordType.FINAL:
            position += 1
        if t is RecordType.INTERVAL:
            parsed = decode_interval_body(rec.body)
            canon_end = 4 + len(parsed.canonical)
            spans.append((body_start + 4, body_start + canon_end, position))
            pos = canon_end + 4
            for p in parsed.extras:
                pos += 1 + RTP_HEADER_SIZE + 2 + len(p.payload)
            spans.append((body_start + pos, body_start + len(rec.body), position))
        elif t in (RecordType.INIT, RecordType.FINAL):
            spans.append((body_start + 4, body_start + len(rec.body), position))
        else:
            spans.append((body_start, body_start + len(rec.body), position))
    return sorted(spans)
