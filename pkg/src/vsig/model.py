"""Domain types shared by the signing engines, the archive and the auditor.

All times are integer milliseconds of virtual (simulation) time unless a
field says otherwise. Interval indices are 1-based.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Iterable, Optional, Sequence

RTP_VERSION = 2
MAX_PAYLOAD = 1400
SEQ_MOD = 1 << 16
TS_MOD = 1 << 32
DEFAULT_INTERVAL_MS = 1000
MIN_INTERVAL_MS = 100
META_FORMAT_VERSION = 1


class Direction(IntEnum):
    """Direction of a bilateral interval, as seen from the signer A."""

    A_TO_B = 0
    B_TO_A = 1


class MetaKind(IntEnum):
    INITIAL = 1
    FINAL = 2


class Termination(IntEnum):
    NONE = 0
    INTENTIONAL = 1
    TIMEOUT = 2
    POLICY_ABORT = 3
    CHANNEL_LOSS = 4


class PolicyAction(Enum):
    IGNORE = "ignore"
    NOTIFY = "notify"
    ABORT_SIGNING = "abort-signing"
    TERMINATE_CALL = "terminate-call"


class Check(Enum):
    """Rows of the audit battery."""

    INITIAL_TIMESTAMP = "InitialTimestamp"
    INITIAL_SIGNATURE = "InitialSignature"
    INTERVAL_CHAINING = "IntervalChaining"
    PACKET_LOSS = "PacketLoss"
    SEQ_MONOTONIC = "SeqMonotonic"
    DRIFT_VS_SYSTEM = "DriftVsSystem"
    DRIFT_VS_GRID = "DriftVsGrid"
    BOUNDARY_OVERLAP = "BoundaryOverlap"
    REPLAY_WINDOW = "ReplayWindow"
    FINAL_TIMESTAMP = "FinalTimestamp"
    MULTILATERAL_COMPLETENESS = "MultilateralCompleteness"
    FORENSIC_ANALYSIS = "ForensicAnalysis"


class Verdict(Enum):
    PASS = "pass"
    FAIL = "fail"
    INAPPLICABLE = "inapplicable"


@dataclass(frozen=True)
class RtpPacket:
    sequence_number: int
    media_timestamp: int
    ssrc: int
    payload: bytes = b""
    marker: bool = False
    payload_type: int = 0
    version: int = RTP_VERSION

    def __post_init__(self):
        if not 0 <= self.sequence_number < SEQ_MOD:
            raise ValueError(f"sequence number out of range: {self.sequence_number}")
        if not 0 <= self.media_timestamp < TS_MOD:
            raise ValueError(f"media timestamp out of range: {self.media_timestamp}")
        if not 0 <= self.ssrc < TS_MOD:
            raise ValueError(f"ssrc out of range: {self.ssrc}")
        if not 0 <= self.payload_type < 128:
            raise ValueError(f"payload type out of range: {self.payload_type}")
        if len(self.payload) > MAX_PAYLOAD:
            raise ValueError(f"payload too long: {len(self.payload)} > {MAX_PAYLOAD}")

    def header(self) -> bytes:
        """The fixed 12-byte RTP header as it appears on the wire (no CSRCs)."""
        b0 = (self.version & 0x3) << 6
        b1 = (0x80 if self.marker else 0) | self.payload_type
        return struct.pack(">BBHII", b0, b1, self.sequence_number, self.media_timestamp, self.ssrc)

    def wire_bytes(self) -> bytes:
        return self.header() + self.payload

    @classmethod
    def from_header(cls, header: bytes, payload: bytes) -> "RtpPacket":
        b0, b1, seq, ts, ssrc = struct.unpack(">BBHII", header)
        return cls(
            sequence_number=seq,
            media_timestamp=ts,
            ssrc=ssrc,
            payload=payload,
            marker=bool(b1 & 0x80),
            payload_type=b1 & 0x7F,
            version=b0 >> 6,
        )


def seq_order(seqs: Iterable[int]) -> list[int]:
    """Sort sequence numbers ascending, treating a set that straddles the
    16-bit wrap as continuous (65534, 65535, 0, 1, ...)."""
    items = sorted(set(seqs))
    if items and items[-1] - items[0] > SEQ_MOD // 2:
        items.sort(key=lambda s: (s + SEQ_MOD // 2) % SEQ_MOD)
    return items


@dataclass(frozen=True)
class IntervalId:
    """`owner` is a Direction for bilateral sessions or the participant
    position m for conferences."""

    index: int
    owner: int

    def __post_init__(self):
        if self.index < 1:
            raise ValueError("interval indices are 1-based")


def bilateral_direction(index: int) -> Direction:
    return Direction.A_TO_B if index % 2 == 1 else Direction.B_TO_A


@dataclass(frozen=True)
class DeltaReport:
    interval_index: int
    receiver: int
    received: tuple[int, ...]

    @classmethod
    def of(cls, interval_index: int, receiver: int, seqs: Iterable[int]) -> "DeltaReport":
        return cls(interval_index, receiver, tuple(seq_order(seqs)))


@dataclass(frozen=True)
class Interval:
    id: IntervalId
    start_ms: int
    end_ms: int
    packets: tuple[RtpPacket, ...] = ()
    delta: Optional[DeltaReport] = None

    def __post_init__(self):
        if self.end_ms < self.start_ms:
            raise ValueError("interval window ends before it starts")
        if self.delta is not None:
            present = {p.sequence_number for p in self.packets}
            missing = set(self.delta.received) - present
            if missing:
                raise ValueError(f"delta names packets not in interval: {sorted(missing)}")

    @property
    def index(self) -> int:
        return self.id.index

    @property
    def received(self) -> tuple[int, ...]:
        if self.delta is None:
            return tuple(seq_order(p.sequence_number for p in self.packets))
        return self.delta.received

    def reduced_packets(self) -> list[RtpPacket]:
        """The packets named by delta, in canonical sequence order."""
        by_seq = {p.sequence_number: p for p in self.packets}
        return [by_seq[s] for s in self.received]

    def unreceived_packets(self) -> list[RtpPacket]:
        keep = set(self.received)
        by_seq = {p.sequence_number: p for p in self.packets if p.sequence_number not in keep}
        return [by_seq[s] for s in seq_order(by_seq)]


@dataclass(frozen=True)
class SessionMeta:
    kind: MetaKind
    interval_duration_ms: int
    nonce: bytes
    sip_data: dict = field(default_factory=dict)
    auth_data: bytes = b""
    termination: Termination = Termination.NONE
    conference: bool = False

    def __post_init__(self):
        if len(self.nonce) != 16:
            raise ValueError("nonce must be 16 bytes")
        if not any(self.nonce):
            raise ValueError("nonce must be non-zero")
        if self.interval_duration_ms < MIN_INTERVAL_MS:
            raise ValueError(f"interval duration below {MIN_INTERVAL_MS} ms")
        if self.kind is MetaKind.INITIAL and self.termination is not Termination.NONE:
            raise ValueError("initial meta cannot carry a termination condition")


@dataclass(frozen=True)
class SecurityValue:
    """One chain link. `chain_index` is 0 for the initial link, l for the
    link over interval l, and "F" for the final link; conference links use a (round, holder) pair."""

    chain_index: object
    signer: int
    signature: bytes
    covered_digest: bytes
    tsa_token: Optional[object] = None


@dataclass(frozen=True)
class LossPolicy:
    threshold: float = 0.3
    window_ms: int = DEFAULT_INTERVAL_MS
    action: PolicyAction = PolicyAction.NOTIFY

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("loss threshold must lie in [0, 1]")


@dataclass(frozen=True)
class AuditFinding:
    check: Check
    verdict: Verdict
    detail: str = ""
    location: Optional[int] = None

    def __post_init__(self):
        if self.verdict is Verdict.FAIL and self.location is None and not self.detail:
            raise ValueError("a failing finding needs a location or a reason")


def interval_count(total_duration_ms: int, d_ms: int) -> int:
    """Number of interval pairs N = ceil(T / D)."""
    if d_ms <= 0:
        raise ValueError("interval duration must be positive")
    if total_duration_ms < 0:
        raise ValueError("duration must be non-negative")
    return -(-total_duration_ms // d_ms)


def loss_ratio(window: Sequence[Interval]) -> float:
    """Packet-wise loss over a window: 1 - sum|delta| / sum K."""
    sent = sum(len(iv.packets) for iv in window)
    if sent == 0:
        return 0.0
    got = sum(len(iv.received) for iv in window)
    return 1.0 - got / sent


def window_intervals(intervals: Sequence[Interval], window_ms: int, d_ms: int) -> list[Interval]:
    """The trailing intervals that fit into `window_ms`."""
    count = max(1, math.floor(window_ms / d_ms))
    return list(intervals[-count:])


class NonceReuse(Exception):
    pass


class NonceRegistry:
    """Nonces already used, per signer identity."""

    def __init__(self):
        self._seen: set[tuple[int, bytes]] = set()

    def __contains__(self, key: tuple[int, bytes]) -> bool:
        return key in self._seen

    def claim(self, signer: int, nonce: bytes) -> None:
        key = (signer, bytes(nonce))
        if key in self._seen:
            raise NonceReuse(f"nonce {nonce.hex()} already used by participant {signer}")
        self._seen.add(key)
