"""Two-party interval chaining.

`Signer` holds A's chain state and produces the security values and archive
records. `run_bilateral` drives a Signer and the dual receiver B through a
simulated call, including the delta-report round trips and retries used
when the media or the signalling channel loses data.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from vsig import codec
from vsig.codec import ArchiveRecord, RecordType
from vsig.crypto import (
    KeyRing,
    SignatureScheme,
    SignerIdentity,
    TimestampAuthority,
    TimestampUnavailable,
    TrustStore,
    CertificateError,
    T1,
    T2,
    DEFAULT_EPOCH_MS,
    digest,
    scheme_for_key,
    sign,
    verify,
    verify_token,
)
from vsig.model import (
    DEFAULT_INTERVAL_MS,
    DeltaReport,
    Direction,
    Interval,
    IntervalId,
    LossPolicy,
    MetaKind,
    NonceRegistry,
    PolicyAction,
    RtpPacket,
    SecurityValue,
    SessionMeta,
    Termination,
    interval_count,
    loss_ratio,
    window_intervals,
)
from vsig.netsim import DEFAULT_CHANNEL, ChannelSpec, Delivery, MessageLink, Simulator, StreamSpec, generate_stream, substream, transmit

log = logging.getLogger(__name__)

RETRY_ATTEMPTS = 5
FINAL = "F"


class Phase(Enum):
    INIT = "init"
    RUNNING = "running"
    FINALIZING = "finalizing"
    DONE = "done"
    ABORTED = "aborted"


class ProtocolAbort(Exception):
    pass


@dataclass(frozen=True)
class Event:
    time: int
    kind: str
    detail: str = ""


def chain_fingerprint(chain: tuple[tuple[int, bytes], ...]) -> bytes:
    return digest(codec.encode_cert_list(chain))


def initial_meta(identity: SignerIdentity, d_ms: int, nonce: bytes, sip_data: Optional[dict] = None) -> SessionMeta:
    chain = tuple((identity.participant_id, der) for der in identity.cert_chain)
    return SessionMeta(MetaKind.INITIAL, d_ms, nonce, dict(sip_data or {}), chain_fingerprint(chain))


def verify_link(public_key, scheme: SignatureScheme, signed_bytes: bytes, previous: SecurityValue, signature: bytes):
    return verify(public_key, codec.chain_message(signed_bytes, previous), signature, scheme)


class Signer:
    """A's side of the chain: initial link, one link per interval, final link."""

    def __init__(
        self,
        identity: SignerIdentity,
        t1: TimestampAuthority,
        t2: TimestampAuthority,
        d_ms: int = DEFAULT_INTERVAL_MS,
        policy: Optional[LossPolicy] = None,
        nonces: Optional[NonceRegistry] = None,
        sink: Optional[Callable[[ArchiveRecord], None]] = None,
        clock: Callable[[], int] = lambda: 0,
    ):
        self.identity = identity
        self.t1 = t1
        self.t2 = t2
        self.d_ms = d_ms
        self.policy = policy or LossPolicy(window_ms=d_ms)
        if self.policy.window_ms < d_ms:
            raise ValueError("policy window must span at least one interval")
        self.nonces = nonces if nonces is not None else NonceRegistry()
        self.sink = sink or (lambda record: None)
        self.clock = clock
        self.phase = Phase.INIT
        self.meta: Optional[SessionMeta] = None
        self.last: Optional[SecurityValue] = None
        self.next_index = 1
        self.links: list[SecurityValue] = []
        self.link_times: dict = {}
        self.intervals: list[Interval] = []
        self.events: list[Event] = []
        self.final: Optional[SecurityValue] = None

    def _event(self, kind: str, detail: str = "") -> None:
        self.events.append(Event(self.clock(), kind, detail))

    def _container(self, sv: SecurityValue, with_chain: bool = False) -> bytes:
        chain = tuple((self.identity.participant_id, der) for der in self.identity.cert_chain) if with_chain else ()
        return codec.encode_container(sv.signer, self.identity.scheme.algorithm_id, sv.signature, chain)

    def sec_init(self, meta: SessionMeta) -> SecurityValue:
        if self.phase is not Phase.INIT:
            raise ProtocolAbort(f"sec_init in phase {self.phase.value}")
        if meta.kind is not MetaKind.INITIAL:
            raise ValueError("sec_init needs an initial meta")
        self.nonces.claim(self.identity.participant_id, meta.nonce)
        canonical = codec.canonical_meta_bytes(meta)
        sv = sign(self.identity, canonical, 0)
        try:
            token = self.t1.timestamp(digest(sv.signature))
        except TimestampUnavailable as exc:
            self.phase = Phase.ABORTED
            self._event("timestamp-unavailable", str(exc))
            raise ProtocolAbort(f"initial timestamp failed: {exc}") from exc
        s0 = SecurityValue(0, sv.signer, sv.signature, sv.covered_digest, token)
        self.meta = meta
        self.last = s0
        self.links.append(s0)
        self.link_times[0] = self.clock()
        self.phase = Phase.RUNNING
        self.sink(ArchiveRecord(RecordType.INIT, codec.encode_meta_body(meta, self._container(s0, with_chain=True))))
        self.sink(ArchiveRecord(RecordType.TSA, codec.encode_token_body(token)))
        return s0

    def sign_interval(self, interval: Interval) -> SecurityValue:
        """Sign interval l chained to the previous link. The interval's delta
        decides which packets are covered."""
        if self.phase is not Phase.RUNNING:
            raise ProtocolAbort(f"cannot sign in phase {self.phase.value}")
        if interval.index != self.next_index:
            raise ProtocolAbort(f"expected interval {self.next_index}, got {interval.index}")
        expected = Direction.A_TO_B if interval.index % 2 else Direction.B_TO_A
        if interval.id.owner != expected:
            raise ProtocolAbort(f"interval {interval.index} has the wrong direction")
        canonical = codec.canonical_interval_bytes(interval)
        try:
            sv = sign(self.identity, codec.chain_message(canonical, self.last), interval.index)
        except Exception as exc:
            self.phase = Phase.ABORTED
            self._event("chain-broken", str(exc))
            raise ProtocolAbort(f"signing interval {interval.index} failed") from exc
        self.last = sv
        self.links.append(sv)
        self.link_times[interval.index] = self.clock()
        self.intervals.append(interval)
        self.next_index += 1
        self.sink(ArchiveRecord(RecordType.INTERVAL, codec.encode_interval_body(interval, self._container(sv))))
        return sv

    def sec_interval(self, outbound: Interval, inbound: Interval) -> tuple[SecurityValue, SecurityValue]:
        """Both links for one elapsed duration: A->B first, then B->A."""
        return self.sign_interval(outbound), self.sign_interval(inbound)

    def sec_final(self, condition: Termination = Termination.INTENTIONAL, sip_data: Optional[dict] = None) -> Optional[SecurityValue]:
        if self.phase not in (Phase.RUNNING, Phase.FINALIZING):
            raise ProtocolAbort(f"sec_final in phase {self.phase.value}")
        self.phase = Phase.FINALIZING
        meta = SessionMeta(
            MetaKind.FINAL,
            self.meta.interval_duration_ms,
            self.meta.nonce,
            dict(sip_data or {}),
            b"",
            condition,
            self.meta.conference,
        )
        canonical = codec.canonical_meta_bytes(meta)
        sv = sign(self.identity, codec.chain_message(canonical, self.last), FINAL)
        try:
            token = self.t2.timestamp(digest(sv.signature))
        except TimestampUnavailable as exc:
            self.phase = Phase.ABORTED
            self._event("unterminated", f"final timestamp failed: {exc}")
            return None
        sf = SecurityValue(FINAL, sv.signer, sv.signature, sv.covered_digest, token)
        self.final = sf
        self.links.append(sf)
        self.link_times[FINAL] = self.clock()
        self.final_meta = meta
        self.phase = Phase.DONE
        self.sink(ArchiveRecord(RecordType.FINAL, codec.encode_meta_body(meta, self._container(sf))))
        self.sink(ArchiveRecord(RecordType.TSA, codec.encode_token_body(token)))
        return sf

    def enforce_policy(self, window: Optional[list[Interval]] = None) -> Optional[PolicyAction]:
        """Evaluate the loss ratio of the latest window per direction and
        return the configured action when it exceeds the threshold."""
        if self.phase is not Phase.RUNNING:
            return None
        if window is None:
            ratios = []
            for direction in Direction:
                own = [iv for iv in self.intervals if iv.id.owner == direction]
                if own:
                    ratios.append(loss_ratio(window_intervals(own, self.policy.window_ms, self.d_ms)))
            ratio = max(ratios, default=0.0)
        else:
            ratio = loss_ratio(window)
        if ratio <= self.policy.threshold:
            return None
        action = self.policy.action
        self._event("policy", f"loss {ratio:.3f} > {self.policy.threshold} -> {action.value}")
        if action is PolicyAction.IGNORE:
            return None
        if action is PolicyAction.ABORT_SIGNING:
            self.phase = Phase.ABORTED
            self._event("signing-aborted", "loss threshold exceeded")
        return action


# -- simulated sessions -----------------------------------------------------


@dataclass(frozen=True)
class InitMsg:
    meta: SessionMeta
    link: SecurityValue
    chain: tuple


@dataclass(frozen=True)
class TerminationMsg:
    index: int
    start_ms: int
    end_ms: int
    seqs: tuple[int, ...]


@dataclass(frozen=True)
class DeltaMsg:
    index: int
    received: tuple[int, ...]
    last_verified: int


@dataclass(frozen=True)
class SecurityMsg:
    link: SecurityValue
    start_ms: int
    end_ms: int
    delta: Optional[tuple[int, ...]] = None


@dataclass(frozen=True)
class FinalMsg:
    meta: SessionMeta
    link: SecurityValue


@dataclass(frozen=True)
class AckMsg:
    last_verified: object


@dataclass
class BilateralConfig:
    duration_ms: int = 60_000
    interval_ms: int = DEFAULT_INTERVAL_MS
    packets_per_second: int = 50
    payload_bytes: int = 160
    silence_a: tuple = ()
    silence_b: tuple = ()
    clock_skew_ppm_a: float = 0.0
    media_ab: ChannelSpec = DEFAULT_CHANNEL
    media_ba: ChannelSpec = DEFAULT_CHANNEL
    signaling: ChannelSpec = DEFAULT_CHANNEL
    policy: Optional[LossPolicy] = None
    seed: int = 0
    sip_data: dict = field(default_factory=lambda: {"caller": "sip:a@example.org", "callee": "sip:b@example.org", "codec": "PCMU/8000"})
    epoch_ms: int = DEFAULT_EPOCH_MS
    t2_skew_ms: int = 0
    tsa1_available: bool = True
    tsa2_available: bool = True
    nonce: Optional[bytes] = None

    def stream(self, which: str) -> StreamSpec:
        return StreamSpec(
            duration_ms=self.duration_ms,
            packets_per_second=self.packets_per_second,
            payload_bytes=self.payload_bytes,
            silence=self.silence_a if which == "a" else self.silence_b,
            clock_skew_ppm=self.clock_skew_ppm_a if which == "a" else 0.0,
        )

    def session_nonce(self) -> bytes:
        if self.nonce is not None:
            return self.nonce
        raw = substream(self.seed, "nonce").bytes(16)
        return raw if any(raw) else b"\x01" + raw[1:]


class Receiver:
    """B: reports deltas, verifies every arriving link and signals status."""

    def __init__(self, sim: Simulator, trust: TrustStore, sent: list[tuple[int, RtpPacket]], inbound: Delivery, reply: Callable):
        self.sim = sim
        self.trust = trust
        self.sent = {p.sequence_number: p for _, p in sent}
        self.arrivals: dict[int, tuple[int, RtpPacket]] = {}
        for t, p in inbound.schedule:
            self.arrivals.setdefault(p.sequence_number, (t, p))
        self.reply = reply
        self.key = None
        self.scheme = None
        self.meta: Optional[SessionMeta] = None
        self.prev: Optional[SecurityValue] = None
        self.last_verified = -1
        self.own_deltas: dict[int, tuple[int, tuple[int, ...]]] = {}
        self.pending: dict[int, SecurityMsg] = {}
        self.status: list[Event] = []
        self.finalized = False

    def _signal(self, kind: str, detail: str = "") -> None:
        self.status.append(Event(self.sim.now, kind, detail))

    def handle(self, msg) -> None:
        if isinstance(msg, InitMsg):
            self._on_init(msg)
        elif isinstance(msg, TerminationMsg):
            got = tuple(s for s in msg.seqs if s in self.arrivals and self.arrivals[s][0] <= self.sim.now)
            if msg.index not in self.own_deltas:
                self.own_deltas[msg.index] = (self.sim.now, DeltaReport.of(msg.index, 1, got).received)
            self.reply(DeltaMsg(msg.index, self.own_deltas[msg.index][1], self.last_verified))
        elif isinstance(msg, SecurityMsg):
            if msg.link.chain_index > self.last_verified:
                self.pending[msg.link.chain_index] = msg
            self._drain()
            if msg.link.chain_index % 2 == 0:
                self.reply(AckMsg(self.last_verified))
        elif isinstance(msg, FinalMsg):
            self._on_final(msg)

    def _on_init(self, msg: InitMsg) -> None:
        if self.meta is None:
            try:
                key = self.trust.validate_chain(tuple(der for _, der in msg.chain))
            except CertificateError as exc:
                self._signal("verify-failed", f"initial link certificate: {exc}")
                return
            canonical = codec.canonical_meta_bytes(msg.meta)
            ok = verify(key, canonical, msg.link.signature, scheme_for_key(key))
            token_ok = verify_token(msg.link.tsa_token, self.trust.tsa_keys[T1])
            if not (ok and token_ok and msg.link.tsa_token.covered_digest == digest(msg.link.signature)):
                self._signal("verify-failed", "initial link")
                return
            self.key, self.meta, self.prev, self.last_verified = key, msg.meta, msg.link, 0
            self.scheme = scheme_for_key(key)
            self._signal("verified", "0")
        self.reply(AckMsg(self.last_verified))

    def _interval_for(self, msg: SecurityMsg) -> Optional[Interval]:
        index = msg.link.chain_index
        if index % 2:
            if index not in self.own_deltas:
                return None
            seqs = self.own_deltas[index][1]
            packets = tuple(self.arrivals[s][1] for s in seqs)
            return Interval(IntervalId(index, Direction.A_TO_B), msg.start_ms, msg.end_ms, packets, DeltaReport(index, 1, seqs))
        if msg.delta is None or any(s not in self.sent for s in msg.delta):
            return None
        packets = tuple(self.sent[s] for s in msg.delta)
        return Interval(IntervalId(index, Direction.B_TO_A), msg.start_ms, msg.end_ms, packets, DeltaReport(index, 0, msg.delta))

    def _drain(self) -> None:
        while self.key is not None and self.last_verified + 1 in self.pending:
            msg = self.pending.pop(self.last_verified + 1)
            interval = self._interval_for(msg)
            if interval is None:
                self._signal("verify-failed", f"link {msg.link.chain_index}: interval unknown")
                return
            ok = verify_link(self.key, self.scheme, codec.canonical_interval_bytes(interval), self.prev, msg.link.signature)
            if not ok:
                self._signal("verify-failed", f"link {msg.link.chain_index}: {ok.reason}")
                return
            self.prev = msg.link
            self.last_verified = msg.link.chain_index
            self._signal("verified", str(self.last_verified))

    def _on_final(self, msg: FinalMsg) -> None:
        if not self.finalized and self.prev is not None:
            canonical = codec.canonical_meta_bytes(msg.meta)
            if verify_link(self.key, self.scheme, canonical, self.prev, msg.link.signature):
                self.finalized = True
                self._signal("verified", FINAL)
            else:
                self._signal("verify-failed", "final link")
        self.reply(AckMsg(FINAL if self.finalized else self.last_verified))


@dataclass
class _Step:
    kind: str
    interval: Optional[Interval] = None
    attempts: int = 0
    done: bool = False
    link: Optional[SecurityValue] = None


@dataclass
class SessionResult:
    records: list[ArchiveRecord]
    signer: Signer
    receiver: Receiver
    deliveries: dict[str, Delivery]
    reported_deltas: dict[int, tuple[int, ...]]
    streams: dict[str, list[tuple[int, RtpPacket]]]
    final_time: Optional[int]
    events: list[Event]
    trace: list[tuple[int, str]]

    def archive_bytes(self) -> bytes:
        return codec.encode_archive(self.records)

    @property
    def phase(self) -> Phase:
        return self.signer.phase


class _SessionDriver:
    def __init__(self, config: BilateralConfig, keys: KeyRing, sink, nonces):
        self.cfg = config
        self.sim = Simulator()
        d = config.interval_ms
        self.d = d
        self.retry_gap = max(1, d // RETRY_ATTEMPTS)
        self.n = interval_count(config.duration_ms, d)
        self.records: list[ArchiveRecord] = []

        def emit(record: ArchiveRecord) -> None:
            self.records.append(record)
            if sink is not None:
                sink(record)

        epoch = config.epoch_ms
        t1 = keys.authority(T1, lambda: epoch + self.sim.now)
        t2 = keys.authority(T2, lambda: epoch + self.sim.now + config.t2_skew_ms)
        t1.available, t2.available = config.tsa1_available, config.tsa2_available
        self.identity = keys.identities[0]
        self.signer = Signer(self.identity, t1, t2, d, config.policy, nonces, emit, lambda: self.sim.now)

        seed = config.seed
        self.sent_a = generate_stream(config.stream("a"), seed, "stream-a")
        self.sent_b = generate_stream(config.stream("b"), seed, "stream-b")
        self.ab = transmit(config.media_ab, self.sent_a, seed, "media-ab")
        self.ba = transmit(config.media_ba, self.sent_b, seed, "media-ba")
        self.a_arrivals: dict[int, tuple[int, RtpPacket]] = {}
        for t, p in self.ba.schedule:
            self.a_arrivals.setdefault(p.sequence_number, (t, p))

        self.to_b = MessageLink(self.sim, config.signaling, seed, "signal-ab", self._deliver_to_b)
        self.to_a = MessageLink(self.sim, config.signaling, seed, "signal-ba", self._on_message)
        self.receiver = Receiver(self.sim, keys.trust_store(), self.sent_b, self.ab, self.to_a.send)

        self.queue: list[_Step] = []
        self.current: Optional[_Step] = None
        self.acked: object = -1
        self.unacked: list[tuple[SecurityValue, SecurityMsg]] = []
        self.timers_done = False
        self.call_over = False
        self.final_time: Optional[int] = None
        self.reported: dict[int, tuple[int, ...]] = {}

    # -- plumbing

    def _deliver_to_b(self, msg) -> None:
        self.receiver.handle(msg)

    def _send(self, msg) -> None:
        self.to_b.send(msg)

    def run(self) -> SessionResult:
        meta = initial_meta(self.identity, self.d, self.cfg.session_nonce(), self.cfg.sip_data)
        jitter = max(self.cfg.media_ab.delay_max_ms, self.cfg.media_ba.delay_max_ms)
        sip = {**meta.sip_data, "clock_rate": "8000", "max_jitter_ms": str(jitter)}
        meta = SessionMeta(meta.kind, meta.interval_duration_ms, meta.nonce, sip, meta.auth_data)
        try:
            s0 = self.signer.sec_init(meta)
        except ProtocolAbort:
            return self._result()
        chain = tuple((self.identity.participant_id, der) for der in self.identity.cert_chain)
        self._init_msg = InitMsg(meta, s0, chain)
        self._begin(_Step("init", link=s0))
        for k in range(1, self.n + 1):
            self.sim.schedule(k * self.d, self._timer, k)
        self.sim.run()
        return self._result()

    def _result(self) -> SessionResult:
        return SessionResult(
            self.records,
            self.signer,
            self.receiver,
            {"ab": self.ab, "ba": self.ba},
            self.reported,
            {"a": self.sent_a, "b": self.sent_b},
            self.final_time,
            self.signer.events + self.receiver.status,
            self.sim.trace,
        )

    # -- interval formation

    def _timer(self, k: int) -> None:
        if k == self.n:
            self.timers_done = True
        if self.call_over or self.signer.phase is not Phase.RUNNING:
            return
        start = (k - 1) * self.d
        end = min(k * self.d, self.cfg.duration_ms)
        sent = tuple(p for t, p in self.sent_a if start <= t < k * self.d)
        got = tuple(p for t, p in self.a_arrivals.values() if start <= t < k * self.d)
        out = Interval(IntervalId(2 * k - 1, Direction.A_TO_B), start, end, sent)
        inbound = Interval(IntervalId(2 * k, Direction.B_TO_A), start, end, got, DeltaReport.of(2 * k, 0, (p.sequence_number for p in got)))
        self.queue.append(_Step("out", out))
        self.queue.append(_Step("in", inbound))
        self.sim.log(f"interval-close {2 * k - 1},{2 * k}")
        self._kick()

    def _kick(self) -> None:
        while self.current is None or self.current.done:
            if self.signer.phase is not Phase.RUNNING:
                return
            if self.queue:
                self._begin(self.queue.pop(0))
            elif self.timers_done or self.call_over:
                self._finalize(Termination.INTENTIONAL)
                return
            else:
                return

    def _begin(self, step: _Step) -> None:
        self.current = step
        if step.kind == "in":
            self._sign(step, step.interval)
        self._attempt(step)

    # -- retry loop shared by every step

    def _attempt(self, step: _Step) -> None:
        step.attempts += 1
        if step.attempts > RETRY_ATTEMPTS:
            self._broken(step)
            return
        if step.kind == "init":
            self._send(self._init_msg)
        elif step.kind == "out":
            iv = step.interval
            self._send(TerminationMsg(iv.index, iv.start_ms, iv.end_ms, tuple(p.sequence_number for p in iv.packets)))
        elif step.kind in ("in", "final"):
            for sv, msg in self.unacked:
                if self._is_unacked(sv.chain_index):
                    self._send(msg)
            if step.kind == "final":
                self._send(FinalMsg(self.signer.final_meta, step.link))
        attempt = step.attempts
        self.sim.after(self.retry_gap, self._retry, step, attempt)

    def _retry(self, step: _Step, attempt: int) -> None:
        if step is self.current and not step.done and step.attempts == attempt and self.signer.phase in (Phase.RUNNING, Phase.DONE):
            self._attempt(step)

    def _broken(self, step: _Step) -> None:
        step.done = True
        self.sim.log(f"channel-broken at {step.kind}")
        if step.kind == "final":
            self.signer.events.append(Event(self.sim.now, "final-unacknowledged"))
            return
        self.signer.phase = Phase.ABORTED
        self.signer.events.append(Event(self.sim.now, "channel-broken", f"{step.kind} step exhausted {RETRY_ATTEMPTS} attempts"))

    def _is_unacked(self, index) -> bool:
        if self.acked == FINAL:
            return False
        return index == FINAL or index > self.acked

    # -- incoming signalling at A

    def _on_message(self, msg) -> None:
        if isinstance(msg, AckMsg) or isinstance(msg, DeltaMsg):
            verified = msg.last_verified
            if verified == FINAL or (self.acked != FINAL and verified > self.acked):
                self.acked = verified
        step = self.current
        if step is None or step.done:
            return
        if isinstance(msg, DeltaMsg) and step.kind == "out" and msg.index == step.interval.index:
            iv = step.interval
            self.reported[iv.index] = msg.received
            reduced = Interval(iv.id, iv.start_ms, iv.end_ms, iv.packets, DeltaReport(iv.index, 1, msg.received))
            self._sign(step, reduced)
            step.done = True
            self._after_policy()
            self._kick()
        elif isinstance(msg, AckMsg):
            if step.kind == "init" and not self._is_unacked(0):
                step.done = True
                self._kick()
            elif step.kind == "in" and not self._is_unacked(step.interval.index):
                step.done = True
                self._kick()
            elif step.kind == "final" and self.acked == FINAL:
                step.done = True

    def _sign(self, step: _Step, interval: Interval) -> None:
        sv = self.signer.sign_interval(interval)
        step.link = sv
        self.sim.log(f"signed {interval.index}")
        delta = interval.received if interval.id.owner == Direction.B_TO_A else None
        if delta is not None:
            self.reported[interval.index] = delta
        msg = SecurityMsg(sv, interval.start_ms, interval.end_ms, delta)
        self.unacked = [(s, m) for s, m in self.unacked if self._is_unacked(s.chain_index)]
        self.unacked.append((sv, msg))
        if step.kind == "out":
            self._send(msg)

    def _after_policy(self) -> None:
        action = self.signer.enforce_policy()
        if action is PolicyAction.TERMINATE_CALL:
            self.call_over = True
            self.queue.clear()
            self._finalize(Termination.POLICY_ABORT)

    def _finalize(self, condition: Termination) -> None:
        if self.signer.phase is not Phase.RUNNING:
            return
        sf = self.signer.sec_final(condition)
        self.final_time = self.sim.now
        self.sim.log(f"final {condition.name}")
        if sf is not None:
            self._begin(_Step("final", link=sf))


def run_bilateral(
    config: BilateralConfig,
    keys: KeyRing,
    sink: Optional[Callable[[ArchiveRecord], None]] = None,
    nonces: Optional[NonceRegistry] = None,
) -> SessionResult:
    """Simulate one call end to end and return the produced archive records
    together with the ground truth of the simulated channels."""
    return _SessionDriver(config, keys, sink, nonces).run()
