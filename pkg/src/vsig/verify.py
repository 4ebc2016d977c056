"""Incremental verification of an archive record stream.

`ChainVerifier` is fed records in archive order and raises `ChainError` at
the first record that does not extend the chain. The archive service uses
it live; the auditor uses it offline. Every accepted record is assigned a
chain position: 0 for an init record, then one more for each link, with
the final record last. For a bilateral archive the position of S_l is l.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Optional, Union

from cryptography.hazmat.primitives import serialization

from vsig import codec
from vsig.codec import ArchiveRecord, DecodeError, IntervalRecord, LinkRecord, MetaRecord, RecordType
from vsig.crypto import (
    CertificateError,
    SCHEMES,
    T1,
    T2,
    TimestampToken,
    TrustStore,
    digest,
    scheme_for_key,
)
from vsig.model import Check, Direction, MetaKind, NonceRegistry, NonceReuse, seq_order
from vsig.multilateral import interval_set, slice_of


class ChainError(Exception):
    def __init__(self, check: Check, location: int, reason: str):
        super().__init__(f"{check.value} at {location}: {reason}")
        self.check = check
        self.location = location
        self.reason = reason


_KEYS: dict[bytes, object] = {}


def _key_id(key) -> bytes:
    raw = key.public_bytes(serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo)
    _KEYS.setdefault(raw, key)
    return raw


@functools.lru_cache(maxsize=4096)
def _signature_ok(key_id: bytes, algorithm_id: int, message: bytes, signature: bytes) -> bool:
    key = _KEYS[key_id]
    scheme = SCHEMES.get(algorithm_id)
    if scheme is None or scheme is not scheme_for_key(key):
        return False
    try:
        scheme.verify(key, message, signature)
    except Exception:
        return False
    return True


@functools.lru_cache(maxsize=4096)
def _parse(record_type: RecordType, body: bytes):
    if record_type in (RecordType.INIT, RecordType.FINAL):
        return codec.decode_meta_body(body)
    if record_type is RecordType.TSA:
        return codec.decode_token_body(body)
    if record_type is RecordType.QUARANTINE:
        return codec.decode_quarantine_body(body)
    raise ValueError(record_type)


@functools.lru_cache(maxsize=4096)
def _parse_interval(body: bytes, conference: bool):
    return codec.decode_link_body(body) if conference else codec.decode_interval_body(body)


@dataclass
class Segment:
    init: MetaRecord
    signer: int
    keys: dict[int, bytes]
    participants: tuple[int, ...]
    position: int
    base_ms: int = 0
    t1: Optional[TimestampToken] = None
    links: list = field(default_factory=list)
    final: Optional[MetaRecord] = None
    t2: Optional[TimestampToken] = None
    finalizing_from: Optional[int] = None

    @property
    def meta(self):
        return self.init.meta

    @property
    def conference(self) -> bool:
        return self.init.meta.conference

    @property
    def M(self) -> int:
        return len(self.participants)

    @property
    def last_index(self) -> int:
        if not self.links:
            return -1 if self.conference else 0
        last = self.links[-1]
        return last.step if self.conference else last.interval.index


Accepted = Union[MetaRecord, IntervalRecord, LinkRecord, TimestampToken]


class ChainVerifier:
    def __init__(self, trust: TrustStore, nonces: Optional[NonceRegistry] = None):
        self.trust = trust
        self.nonces = nonces
        self.segments: list[Segment] = []
        self.state = "start"
        self.position = 0
        self.prev: Optional[tuple[bytes, bytes]] = None
        self.quarantine: Optional[tuple[int, str]] = None

    @property
    def segment(self) -> Optional[Segment]:
        return self.segments[-1] if self.segments else None

    @property
    def terminated(self) -> bool:
        return self.state == "closed"

    def expected_position(self) -> int:
        if self.state in ("start", "closed"):
            return self.position + (1 if self.segments else 0)
        if self.state == "init":
            return self.position
        if self.state == "final":
            return self.position
        return self.position + 1

    def feed(self, record: ArchiveRecord) -> Accepted:
        where = self.expected_position()
        t = record.record_type
        if t is RecordType.QUARANTINE:
            location, reason = _parse(t, record.body)
            self.quarantine = (location, reason)
            self.state = "quarantined"
            raise ChainError(Check.INTERVAL_CHAINING, location, f"quarantined by the archive: {reason}")
        if self.state == "quarantined":
            raise ChainError(Check.INTERVAL_CHAINING, where, "record after quarantine marker")
        try:
            if self.state in ("start", "closed"):
                if t is not RecordType.INIT:
                    check = Check.INITIAL_SIGNATURE if self.state == "start" else Check.INTERVAL_CHAINING
                    raise ChainError(check, where, f"expected init record, found {t.name.lower()}")
                return self._init(record, where)
            if self.state == "init":
                if t is not RecordType.TSA:
                    raise ChainError(Check.INITIAL_TIMESTAMP, where, "init record is not followed by its timestamp token")
                return self._token(record, T1, where)
            if self.state == "open":
                if t is RecordType.INTERVAL:
                    return self._link(record, where)
                if t is RecordType.FINAL:
                    return self._final(record, where)
                raise ChainError(Check.INTERVAL_CHAINING, where, f"unexpected {t.name.lower()} record")
            if self.state == "final":
                if t is not RecordType.TSA:
                    raise ChainError(Check.FINAL_TIMESTAMP, where, "final record is not followed by its timestamp token")
                return self._token(record, T2, where)
        except DecodeError as exc:
            check = {
                "init": Check.INITIAL_TIMESTAMP,
                "final": Check.FINAL_TIMESTAMP,
                "start": Check.INITIAL_SIGNATURE,
            }.get(self.state, Check.INTERVAL_CHAINING)
            raise ChainError(check, where, f"undecodable record: {exc}") from None
        raise ChainError(Check.INTERVAL_CHAINING, where, "unexpected record")

    # -- record kinds

    def _init(self, record: ArchiveRecord, where: int) -> MetaRecord:
        parsed: MetaRecord = _parse(record.record_type, record.body)
        meta = parsed.meta
        fail = lambda why: ChainError(Check.INITIAL_SIGNATURE, where, why)
        if meta.kind is not MetaKind.INITIAL:
            raise fail("init record holds a final meta")
        if not parsed.container.chain:
            raise fail("init record carries no certificate chain")
        if meta.auth_data != digest(codec.encode_cert_list(parsed.container.chain)):
            raise fail("authentication data does not match the certificate chain")
        keys = {}
        for pid, ders in parsed.container.certificates().items():
            try:
                keys[pid] = _key_id(self.trust.validate_chain(ders))
            except CertificateError as exc:
                raise fail(f"certificate of participant {pid}: {exc}") from None
        signer = parsed.container.signer
        if signer not in keys:
            raise fail(f"no certificate for signer {signer}")
        if meta.conference:
            try:
                participants = tuple(int(x) for x in meta.sip_data["participants"].split(","))
                base = int(meta.sip_data.get("base_ms", "0"))
            except (KeyError, ValueError):
                raise fail("conference init lacks a participant list") from None
            if len(participants) < 2 or len(set(participants)) != len(participants) or set(participants) - set(keys):
                raise fail("participant list does not match the certificates")
            if signer != participants[0]:
                raise fail("conference init must be signed by the first participant")
        else:
            participants, base = (signer,), 0
        if self.segments and not self.segments[-1].conference:
            raise ChainError(Check.INTERVAL_CHAINING, where, "bilateral archive continues after its final record")
        message = parsed.canonical if self.prev is None else parsed.canonical + self.prev[0] + self.prev[1]
        if not _signature_ok(keys[signer], parsed.container.algorithm_id, message, parsed.container.signature):
            raise fail("initial signature does not verify")
        if self.nonces is not None:
            try:
                self.nonces.claim(signer, meta.nonce)
            except NonceReuse as exc:
                raise ChainError(Check.REPLAY_WINDOW, where, str(exc)) from None
        self.segments.append(Segment(parsed, signer, keys, participants, where, base))
        self.position = where
        self.state = "init"
        self.prev = (parsed.container.signature, digest(message))
        return parsed

    def _token(self, record: ArchiveRecord, authority: int, where: int) -> TimestampToken:
        check = Check.INITIAL_TIMESTAMP if authority == T1 else Check.FINAL_TIMESTAMP
        token: TimestampToken = _parse(record.record_type, record.body)
        if token.authority != authority:
            raise ChainError(check, where, f"token issued by authority {token.authority}, expected {authority}")
        key = self.trust.tsa_keys.get(authority)
        if key is None or not _signature_ok(_key_id(key), token.algorithm_id, token.signed_bytes(), token.signature):
            raise ChainError(check, where, "timestamp token does not verify")
        if token.covered_digest != digest(self.prev[0]):
            raise ChainError(check, where, "timestamp token covers a different signature")
        seg = self.segment
        if authority == T1:
            seg.t1 = token
            self.state = "open"
        else:
            seg.t2 = token
            self.state = "closed"
        return token

    def _verify_link(self, seg: Segment, canonical: bytes, container, signer: int, where: int) -> None:
        if container.signer != signer:
            raise ChainError(Check.INTERVAL_CHAINING, where, f"signed by {container.signer}, expected {signer}")
        if container.chain:
            raise ChainError(Check.INTERVAL_CHAINING, where, "unexpected certificate chain")
        message = canonical + self.prev[0] + self.prev[1]
        if not _signature_ok(seg.keys[signer], container.algorithm_id, message, container.signature):
            raise ChainError(Check.INTERVAL_CHAINING, where, "chain signature does not verify")
        self.prev = (container.signature, digest(message))

    def _link(self, record: ArchiveRecord, where: int):
        seg = self.segment
        parsed = _parse_interval(record.body, seg.conference)
        if seg.conference:
            self._check_conference_link(seg, parsed, where)
            self._verify_link(seg, parsed.canonical, parsed.container, seg.participants[parsed.holder], where)
        else:
            iv = parsed.interval
            expected = seg.last_index + 1
            if iv.index != expected:
                raise ChainError(Check.INTERVAL_CHAINING, where, f"found interval {iv.index}, expected {expected}")
            want = Direction.A_TO_B if iv.index % 2 else Direction.B_TO_A
            if iv.id.owner != want:
                raise ChainError(Check.INTERVAL_CHAINING, where, f"interval {iv.index} has the wrong direction")
            self._verify_link(seg, parsed.canonical, parsed.container, seg.signer, where)
        seg.links.append(parsed)
        self.position = where
        return parsed

    def _check_conference_link(self, seg: Segment, link: LinkRecord, where: int) -> None:
        fail = lambda why: ChainError(Check.INTERVAL_CHAINING, where, why)
        M = seg.M
        if link.step <= seg.last_index:
            raise fail(f"step {link.step} does not follow step {seg.last_index}")
        if (link.round, link.holder) != divmod(link.step, M):
            raise fail(f"step {link.step} is not held by ({link.round},{link.holder})")
        if seg.finalizing_from is not None and not link.finalizing:
            raise fail("audio step after the closing rounds began")
        if link.finalizing and seg.finalizing_from is None:
            seg.finalizing_from = link.step
        indices = interval_set(link.round, link.holder, M)
        if tuple(e.index for e in link.entries) != indices:
            raise fail(f"step covers {[e.index for e in link.entries]}, expected {list(indices)}")
        d = seg.meta.interval_duration_ms
        for entry, group in zip(link.entries, link.packets):
            t = slice_of(entry.index, M)
            if entry.owner != link.holder or (entry.start_ms, entry.end_ms) != (seg.base_ms + t * d, seg.base_ms + (t + 1) * d):
                raise fail(f"interval {entry.index} has a foreign owner or window")
            sigmas = [s for s, _ in entry.deltas]
            if sigmas != sorted(set(sigmas)) or link.holder in sigmas or any(not 0 <= s < M for s in sigmas):
                raise fail(f"interval {entry.index} has malformed receiver reports")
            theta = set()
            for _, seqs in entry.deltas:
                if list(seqs) != seq_order(seqs):
                    raise fail(f"interval {entry.index} has an unsorted delta list")
                theta.update(seqs)
            manifest = entry.theta
            if list(manifest) != seq_order(theta):
                raise fail(f"manifest of interval {entry.index} does not match the reported deliveries")
            stored = {p.sequence_number: p for p in group}
            if len(stored) != len(group) or set(stored) != set(manifest):
                raise fail(f"stored packets of interval {entry.index} do not match the manifest")
            for seq, h in entry.manifest:
                if digest(stored[seq].wire_bytes()) != h:
                    raise fail(f"packet {seq} of interval {entry.index} does not match its manifest hash")

    def _final(self, record: ArchiveRecord, where: int) -> MetaRecord:
        seg = self.segment
        parsed: MetaRecord = _parse(record.record_type, record.body)
        meta = parsed.meta
        fail = lambda why: ChainError(Check.INTERVAL_CHAINING, where, why)
        if meta.kind is not MetaKind.FINAL:
            raise fail("final record holds an initial meta")
        if meta.nonce != seg.meta.nonce or meta.interval_duration_ms != seg.meta.interval_duration_ms:
            raise fail("final meta does not belong to this session")
        if meta.conference != seg.conference:
            raise fail("final meta changes the session kind")
        if seg.conference:
            if not seg.links:
                raise fail("conference closed without any step")
            signer = seg.participants[seg.links[-1].holder]
        else:
            signer = seg.signer
        self._verify_link(seg, parsed.canonical, parsed.container, signer, where)
        seg.final = parsed
        self.position = where
        self.state = "final"
        return parsed
