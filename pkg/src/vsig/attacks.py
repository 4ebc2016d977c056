"""Deterministic manipulations of stored archives.

Each attack returns the mutated bytes together with the chain position the
auditor is expected to blame (None when the result should still verify as
a prefix, as after truncation).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

from vsig import codec
from vsig.codec import ArchiveRecord, RecordType
from vsig.model import Interval
from vsig.netsim import substream

ATTACKS = ("bit-flip", "packet-delete", "interval-delete", "interval-reorder", "truncate", "replay-splice")


class UnknownAttack(ValueError):
    pass


@dataclass(frozen=True)
class AttackResult:
    data: bytes
    location: Optional[int]
    description: str


def positions(records: list[ArchiveRecord]) -> list[int]:
    """Chain position of every record: init 0, one more per link and for the
    final record, tokens sharing the position of the record they stamp."""
    out, pos, started = [], 0, False
    for rec in records:
        t = rec.record_type
        if t is RecordType.INIT:
            pos = pos + 1 if started else 0
            started = True
        elif t in (RecordType.INTERVAL, RecordType.FINAL):
            pos += 1
        out.append(pos)
    return out


def _links(records: list[ArchiveRecord]) -> list[int]:
    return [i for i, r in enumerate(records) if r.record_type is RecordType.INTERVAL]


def _pick(rng, items: list, choice: Optional[int]):
    if not items:
        raise ValueError("archive has nothing to attack")
    if choice is None:
        return items[int(rng.integers(len(items)))]
    return items[choice]


def _is_conference(records: list[ArchiveRecord]) -> bool:
    return codec.decode_meta_body(records[0].body).meta.conference


def _container_bytes(container) -> bytes:
    return codec.encode_container(container.signer, container.algorithm_id, container.signature, container.chain)


def bit_flip(data: bytes, seed: int, offset: Optional[int] = None, bit: Optional[int] = None) -> AttackResult:
    """Flip one bit of signed content (a random one unless `offset` given)."""
    rng = substream(seed, "attack-bit-flip")
    archive = codec.decode_archive(data)
    pos = positions(archive.records)
    if offset is None:
        spans = _signed_spans(archive)
        weights = [b - a for a, b, _ in spans]
        k = int(rng.integers(sum(weights)))
        for a, b, _ in spans:
            if k < b - a:
                offset = a + k
                break
            k -= b - a
    bit = int(rng.integers(8)) if bit is None else bit
    out = bytearray(data)
    out[offset] ^= 1 << bit
    frame = max(i for i, off in enumerate(archive.offsets) if off <= offset)
    return AttackResult(bytes(out), pos[frame], f"flipped bit {bit} of byte {offset}")


def _signed_spans(archive: codec.ArchiveFile) -> list[tuple[int, int, int]]:
    if not _is_conference(archive.records):
        return codec.signed_spans(codec.encode_archive(archive))
    # Conference links: the canonical part is signed, stored packets are bound
    # by their manifest hashes.
    spans = []
    for rec, off, p in zip(archive.records, archive.offsets, positions(archive.records)):
        start = off + codec.FRAME_SIZE
        skip = 4 if rec.record_type is not RecordType.TSA else 0
        spans.append((start + skip, start + len(rec.body), p))
    return spans


def packet_delete(data: bytes, seed: int, link: Optional[int] = None) -> AttackResult:
    """Remove one signed packet from an interval, keeping the signature."""
    rng = substream(seed, "attack-packet-delete")
    records = codec.decode_archive(data).records
    pos = positions(records)
    candidates = []
    conference = _is_conference(records)
    for i in _links(records):
        if conference:
            parsed = codec.decode_link_body(records[i].body)
            if any(parsed.packets):
                candidates.append(i)
        elif codec.decode_interval_body(records[i].body).interval.received:
            candidates.append(i)
    i = _pick(rng, candidates, link)
    if conference:
        parsed = codec.decode_link_body(records[i].body)
        groups = [list(g) for g in parsed.packets]
        g = _pick(rng, [n for n, grp in enumerate(groups) if grp], None)
        seq = groups[g].pop(int(rng.integers(len(groups[g])))).sequence_number
        body = codec.encode_link_body(parsed.canonical, groups, _container_bytes(parsed.container))
    else:
        parsed = codec.decode_interval_body(records[i].body)
        iv = parsed.interval
        seq = _pick(rng, list(iv.received), None)
        delta = dataclasses.replace(iv.delta, received=tuple(s for s in iv.received if s != seq))
        shrunk = Interval(iv.id, iv.start_ms, iv.end_ms, tuple(p for p in iv.packets if p.sequence_number != seq), delta)
        body = codec.encode_interval_body(shrunk, _container_bytes(parsed.container))
    records[i] = ArchiveRecord(RecordType.INTERVAL, body)
    return AttackResult(codec.encode_archive(records), pos[i], f"deleted packet {seq} at position {pos[i]}")


def interval_delete(data: bytes, seed: int, link: Optional[int] = None) -> AttackResult:
    rng = substream(seed, "attack-interval-delete")
    records = codec.decode_archive(data).records
    pos = positions(records)
    i = _pick(rng, _links(records), link)
    del records[i]
    return AttackResult(codec.encode_archive(records), pos[i], f"deleted the link at position {pos[i]}")


def interval_reorder(data: bytes, seed: int, link: Optional[int] = None) -> AttackResult:
    """Swap a link with its successor."""
    rng = substream(seed, "attack-interval-reorder")
    records = codec.decode_archive(data).records
    pos = positions(records)
    links = _links(records)
    pairs = [i for i in links if i + 1 in links]
    i = _pick(rng, pairs, link)
    records[i], records[i + 1] = records[i + 1], records[i]
    return AttackResult(codec.encode_archive(records), pos[i], f"swapped the links at positions {pos[i]} and {pos[i + 1]}")


def truncate(data: bytes, seed: int, count: Optional[int] = None) -> AttackResult:
    """Drop the closing pair and `count` trailing links."""
    rng = substream(seed, "attack-truncate")
    records = codec.decode_archive(data).records
    while records and records[-1].record_type in (RecordType.FINAL, RecordType.TSA) and len(records) > 2:
        records.pop()
    links = len(_links(records))
    count = int(rng.integers(links + 1)) if count is None else min(count, links)
    for _ in range(count):
        records.pop()
    return AttackResult(codec.encode_archive(records), None, f"dropped the closing records and {count} trailing links")


def replay_splice(data: bytes, seed: int, donor: Optional[bytes] = None, link: Optional[int] = None) -> AttackResult:
    """Without a donor: resubmit the whole recorded session unchanged.
    With a donor archive: keep the head of `data` and continue with the
    donor's links from the same position on."""
    if donor is None:
        return AttackResult(data, 0, "resubmitted the recorded session")
    rng = substream(seed, "attack-replay-splice")
    records = codec.decode_archive(data).records
    theirs = codec.decode_archive(donor).records
    pos = positions(records)
    mine = _links(records)
    i = _pick(rng, mine, link)
    cut = pos[i]
    tail = [r for r, p in zip(theirs, positions(theirs)) if p >= cut and r.record_type is not RecordType.INIT]
    spliced = records[:i] + tail
    return AttackResult(codec.encode_archive(spliced), cut, f"spliced the donor session in from position {cut}")


def apply(name: str, data: bytes, seed: int, **options) -> AttackResult:
    table = {
        "bit-flip": bit_flip,
        "packet-delete": packet_delete,
        "interval-delete": interval_delete,
        "interval-reorder": interval_reorder,
        "truncate": truncate,
        "replay-splice": replay_splice,
    }
    if name not in table:
        raise UnknownAttack(f"unknown attack {name!r}; choose from {', '.join(ATTACKS)}")
    return table[name](data, seed, **options)
