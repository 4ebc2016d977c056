"""Conference signing for M participants.

The signer role travels round robin. Step s = r*M + m belongs to the
participant at position m in round r; it is signed at (s + 1) * D and covers
up to M intervals, all sent by that participant and all fully elapsed.
Intervals are numbered from 1 with owner(k) = (k - 1) mod M, so the packets
position m sends during [t*D, (t+1)*D) form interval k = t*M + m + 1.

Instead of packets, each step signs per-receiver delta lists plus a hash
manifest over every packet that reached at least one receiver, so every
participant can check the signature despite its own losses.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from vsig import codec
from vsig.codec import ArchiveRecord, LinkEntry, RecordType
from vsig.crypto import (
    DEFAULT_EPOCH_MS,
    KeyRing,
    SignerIdentity,
    T1,
    T2,
    TimestampUnavailable,
    digest,
    scheme_for_key,
    sign,
    verify,
)
from vsig.model import (
    DEFAULT_INTERVAL_MS,
    MetaKind,
    NonceRegistry,
    RtpPacket,
    SecurityValue,
    SessionMeta,
    Termination,
    seq_order,
)
from vsig.netsim import DEFAULT_CHANNEL, ChannelSpec, MessageLink, Simulator, StreamSpec, generate_stream, substream, transmit

log = logging.getLogger(__name__)

INITIAL = "initial"
RETRY_ATTEMPTS = 5


# -- index arithmetic -------------------------------------------------------


def khat(r: int, m: int, M: int) -> int:
    """Index of the newest interval position m secures in round r."""
    _check(r, m, M)
    return r * M * M + (M + 1) * m + 1


def interval_set(r: int, m: int, M: int) -> tuple[int, ...]:
    """The intervals secured by step (r, m), ascending."""
    top = khat(r, m, M)
    return tuple(sorted(k for k in (top - j * M for j in range(M)) if k >= 1))


def pred(r: int, m: int, M: int):
    _check(r, m, M)
    if m >= 1:
        return (r, m - 1)
    if r >= 1:
        return (r - 1, M - 1)
    return INITIAL


def owner(k: int, M: int) -> int:
    return (k - 1) % M


def slice_of(k: int, M: int) -> int:
    return (k - 1) // M


def interval_index(t: int, m: int, M: int) -> int:
    return t * M + m + 1


def step_of(r: int, m: int, M: int) -> int:
    return r * M + m


def _check(r: int, m: int, M: int) -> None:
    if M < 2 or r < 0 or not 0 <= m < M:
        raise ValueError(f"invalid position r={r} m={m} M={M}")


@dataclass(frozen=True)
class TokenState:
    round: int
    holder: int
    start_ms: int
    end_ms: int


def token_state(step: int, M: int, d_ms: int, base_ms: int = 0) -> TokenState:
    r, m = divmod(step, M)
    return TokenState(r, m, base_ms + step * d_ms, base_ms + (step + 1) * d_ms)


@dataclass(frozen=True)
class Completeness:
    complete: bool
    completed_at: Optional[int]
    missing: tuple[int, ...]


def multilateral_completeness(links: Sequence[tuple[int, int]], t: int, M: int) -> Completeness:
    """Whether time slice t has multilateral coverage in a chain given as
    (step, holder) pairs in chain order: from the first link covering slice
    t onwards, every participant must have signed at least twice.
    `missing` lists the participants still short of two links."""
    counts = [0] * M
    started = False
    for step, holder in links:
        if not started and step < t:
            continue
        started = True
        counts[holder] += 1
        if min(counts) >= 2:
            return Completeness(True, step, ())
    return Completeness(False, None, tuple(m for m in range(M) if counts[m] < 2))


def completion_step(t: int, M: int) -> int:
    """Step at which slice t completes in an unbroken chain."""
    return t + 2 * M - 1


def hash_manifest(packets: Sequence[RtpPacket], theta: Sequence[int]) -> tuple[tuple[int, bytes], ...]:
    by_seq = {p.sequence_number: p for p in packets}
    return tuple((s, digest(by_seq[s].wire_bytes())) for s in seq_order(theta))


def round_payload(
    r: int,
    m: int,
    M: int,
    windows: Callable[[int], tuple[int, int]],
    deltas: dict[int, dict[int, tuple[int, ...]]],
    sent: dict[int, Sequence[RtpPacket]],
) -> tuple[LinkEntry, ...]:
    """Signed payload of step (r, m): delta lists and manifest per interval.
    `deltas[k][sigma]` is what receiver sigma reported for interval k."""
    entries = []
    for k in interval_set(r, m, M):
        per_sigma = deltas.get(k, {})
        reported = tuple((sigma, tuple(seq_order(per_sigma[sigma]))) for sigma in sorted(per_sigma))
        theta = set()
        for _, seqs in reported:
            theta.update(seqs)
        start, end = windows(k)
        entries.append(LinkEntry(k, m, start, end, reported, hash_manifest(sent.get(k, ()), theta)))
    return tuple(entries)


# -- configuration ----------------------------------------------------------


@dataclass(frozen=True)
class ConferenceConfig:
    participants: tuple[SignerIdentity, ...]
    interval_ms: int = DEFAULT_INTERVAL_MS

    def __post_init__(self):
        if len(self.participants) < 2:
            raise ValueError("a conference needs at least two participants")
        pids = [p.participant_id for p in self.participants]
        if len(set(pids)) != len(pids):
            raise ValueError("participant identities must be distinct")

    @property
    def M(self) -> int:
        return len(self.participants)

    @property
    def pids(self) -> tuple[int, ...]:
        return tuple(p.participant_id for p in self.participants)

    def others(self, m: int) -> tuple[int, ...]:
        return tuple(s for s in range(self.M) if s != m)

    def position(self, pid: int) -> int:
        return self.pids.index(pid)

    def without(self, pid: int) -> "ConferenceConfig":
        return ConferenceConfig(tuple(p for p in self.participants if p.participant_id != pid), self.interval_ms)

    def with_joined(self, identity: SignerIdentity, after: int) -> "ConferenceConfig":
        parts = list(self.participants)
        parts.insert(after + 1, identity)
        return ConferenceConfig(tuple(parts), self.interval_ms)


def leave(config: ConferenceConfig, m: int) -> ConferenceConfig:
    """Membership after participant m leaves."""
    return config.without(config.participants[m].participant_id)


def join(config: ConferenceConfig, identity: SignerIdentity, holder: int) -> ConferenceConfig:
    """Membership after `identity` joins while A_holder holds the token."""
    return config.with_joined(identity, holder)


@dataclass(frozen=True)
class MembershipChange:
    time_ms: int
    kind: str
    participant: int

    def __post_init__(self):
        if self.kind not in ("join", "leave"):
            raise ValueError(f"unknown membership change {self.kind!r}")


@dataclass
class ConferenceScenario:
    participants: int = 4
    duration_ms: int = 10_000
    interval_ms: int = DEFAULT_INTERVAL_MS
    packets_per_second: int = 50
    payload_bytes: int = 160
    media: ChannelSpec = DEFAULT_CHANNEL
    signaling: ChannelSpec = DEFAULT_CHANNEL
    seed: int = 0
    changes: tuple[MembershipChange, ...] = ()
    epoch_ms: int = DEFAULT_EPOCH_MS
    sip_data: dict = field(default_factory=lambda: {"conference": "sip:room@example.org", "codec": "PCMU/8000"})


# -- simulation -------------------------------------------------------------


@dataclass(frozen=True)
class ConferenceLink:
    segment: int
    step: int
    round: int
    holder: int
    signer: int
    time_ms: int
    finalizing: bool
    link: SecurityValue


@dataclass
class SegmentInfo:
    index: int
    participants: tuple[int, ...]
    base_ms: int
    termination_step: int
    terminating_holder: int
    cause: Termination
    change: Optional[MembershipChange] = None
    final_time: Optional[int] = None
    final_signer: Optional[int] = None
    unreachable: set = field(default_factory=set)

    @property
    def M(self) -> int:
        return len(self.participants)

    @property
    def last_step(self) -> int:
        return self.termination_step + 2 * self.M


@dataclass
class ConferenceResult:
    records: list[ArchiveRecord]
    links: list[ConferenceLink]
    segments: list[SegmentInfo]
    events: list[tuple[int, str]]
    reported: dict[tuple[int, int], dict[int, tuple[int, ...]]]
    ground_truth: dict[tuple[int, int], dict[int, tuple[int, ...]]]

    def archive_bytes(self) -> bytes:
        return codec.encode_archive(self.records)

    def segment_links(self, segment: int) -> list[ConferenceLink]:
        return [l for l in self.links if l.segment == segment]

    def payload_free_steps(self, segment: int) -> int:
        return sum(1 for l in self.segment_links(segment) if l.finalizing)

    def completion(self, segment: int, t: int) -> Completeness:
        seg = self.segments[segment]
        return multilateral_completeness([(l.step, l.holder) for l in self.segment_links(segment)], t, seg.M)


@dataclass(frozen=True)
class _DeltaRequest:
    segment: int
    step: int
    holder: int
    indices: tuple[int, ...]


@dataclass(frozen=True)
class _DeltaReply:
    segment: int
    step: int
    sigma: int
    deltas: tuple[tuple[int, tuple[int, ...]], ...]


@dataclass(frozen=True)
class _LinkMsg:
    segment: int
    step: int
    canonical: bytes
    entries: tuple[LinkEntry, ...]
    link: SecurityValue


@dataclass(frozen=True)
class _MetaMsg:
    segment: int
    canonical: bytes
    link: SecurityValue
    final: bool


@dataclass(frozen=True)
class _Ack:
    segment: int
    step: object
    sender: int


class _Member:
    """One participant's private view: received media, verified chain."""

    def __init__(self, identity: SignerIdentity):
        self.identity = identity
        self.pid = identity.participant_id
        self.prev: Optional[SecurityValue] = None
        self.known_step: object = None
        self.pending: dict[int, "_LinkMsg"] = {}
        self.arrivals: dict[int, dict[int, tuple[int, RtpPacket]]] = {}
        self.failures: list[str] = []


class _Retry:
    """Resend `send` every D/5 until `done` is set, at most RETRY_ATTEMPTS times."""

    def __init__(self, sim: Simulator, gap: int, send: Callable[[], None], exhausted: Callable[[], None]):
        self.sim, self.gap, self.send, self.exhausted = sim, gap, send, exhausted
        self.attempts = 0
        self.done = False

    def start(self) -> "_Retry":
        self._fire()
        return self

    def _fire(self) -> None:
        if self.done:
            return
        if self.attempts >= RETRY_ATTEMPTS:
            self.done = True
            self.exhausted()
            return
        self.attempts += 1
        self.send()
        self.sim.after(self.gap, self._fire)


class _ConferenceDriver:
    def __init__(self, scenario: ConferenceScenario, keys: KeyRing, sink, nonces):
        self.sc = scenario
        self.keys = keys
        self.sim = Simulator()
        self.d = scenario.interval_ms
        self.gap = max(1, self.d // RETRY_ATTEMPTS)
        self.nonces = nonces if nonces is not None else NonceRegistry()
        self.sink = sink
        self.records: list[ArchiveRecord] = []
        self.links: list[ConferenceLink] = []
        self.segments: list[SegmentInfo] = []
        self.events: list[tuple[int, str]] = []
        self.reported: dict = {}
        self.truth: dict = {}
        epoch = scenario.epoch_ms
        self.t1 = keys.authority(T1, lambda: epoch + self.sim.now)
        self.t2 = keys.authority(T2, lambda: epoch + self.sim.now)
        for pid in range(scenario.participants):
            if pid not in keys.identities:
                raise ValueError(f"no key material for participant {pid}")
        self.members = {pid: _Member(keys.identities[pid]) for pid in keys.identities}
        self.signal: dict[tuple[int, int], MessageLink] = {}
        self.changes = sorted(scenario.changes, key=lambda c: c.time_ms)
        self.prev_final: Optional[SecurityValue] = None
        self.acks: dict = {}
        self.collecting = None
        self.waiting: Optional[int] = None
        self.previous_step: dict[int, int] = {}
        self.config = ConferenceConfig(tuple(keys.identities[p] for p in range(scenario.participants)), self.d)

    # -- plumbing

    def _emit(self, record: ArchiveRecord) -> None:
        self.records.append(record)
        if self.sink is not None:
            self.sink(record)

    def _note(self, what: str) -> None:
        self.events.append((self.sim.now, what))
        self.sim.log(what)

    def _send(self, src: int, dst: int, msg) -> None:
        link = self.signal.get((src, dst))
        if link is None:
            link = MessageLink(self.sim, self.sc.signaling, self.sc.seed, f"signal-{src}-{dst}", lambda m, d=dst: self._deliver(d, m))
            self.signal[(src, dst)] = link
        link.send(msg)

    # -- segment set-up

    def run(self) -> ConferenceResult:
        self.sim.schedule(0, self._start_segment, self.config, 0, None)
        self.sim.run()
        return ConferenceResult(self.records, self.links, self.segments, self.events, self.reported, self.truth)

    def _planned_end(self, cfg: ConferenceConfig, base: int):
        """Termination step, terminating holder, cause and change for a segment."""
        M = cfg.M
        change = self.changes[0] if self.changes else None
        if change is not None and change.time_ms < self.sc.duration_ms:
            s0 = max(0, math.ceil((change.time_ms - base) / self.d))
            if change.kind == "leave":
                pos = cfg.position(change.participant)
                while s0 % M != pos:
                    s0 += 1
            return s0, s0 % M, Termination.INTENTIONAL, change
        s0 = max(0, math.ceil((self.sc.duration_ms - base) / self.d))
        return s0, s0 % M, Termination.INTENTIONAL, None

    def _start_segment(self, cfg: ConferenceConfig, base: int, prev_final: Optional[SecurityValue]) -> None:
        n = len(self.segments)
        s0, holder, cause, change = self._planned_end(cfg, base)
        seg = SegmentInfo(n, cfg.pids, base, s0, holder, cause, change)
        self.segments.append(seg)
        self.cfg = cfg
        self.seg = seg
        self._note(f"segment {n} starts with participants {','.join(map(str, cfg.pids))}")
        audio_end = base + s0 * self.d
        self.sent: dict[int, list[tuple[int, RtpPacket]]] = {}
        self.send_time: dict[tuple[int, int], int] = {}
        self.previous_step = {}
        self.prev_final = prev_final
        for pid in cfg.pids:
            spec = StreamSpec(
                duration_ms=max(0, audio_end - base),
                packets_per_second=self.sc.packets_per_second,
                payload_bytes=self.sc.payload_bytes,
                start_ms=base,
            )
            self.sent[pid] = generate_stream(spec, self.sc.seed, f"stream-{pid}-seg{n}")
            for t, p in self.sent[pid]:
                self.send_time[(pid, p.sequence_number)] = t
        for a in cfg.pids:
            for b in cfg.pids:
                if a == b:
                    continue
                delivery = transmit(self.sc.media, self.sent[a], self.sc.seed, f"media-{a}-{b}-seg{n}")
                table: dict[int, tuple[int, RtpPacket]] = {}
                for t, p in delivery.schedule:
                    table.setdefault(p.sequence_number, (t, p))
                self.members[b].arrivals[a] = table

        signer = self.members[cfg.pids[0]]
        chain = tuple((pid, der) for pid in cfg.pids for der in self.keys.identities[pid].cert_chain)
        nonce = substream(self.sc.seed, f"nonce-seg{n}").bytes(16)
        nonce = nonce if any(nonce) else b"\x01" + nonce[1:]
        meta = SessionMeta(
            MetaKind.INITIAL,
            self.d,
            nonce,
            {
                **self.sc.sip_data,
                "participants": ",".join(map(str, cfg.pids)),
                "base_ms": str(base),
                "segment": str(n),
                "clock_rate": "8000",
                "max_jitter_ms": str(self.sc.media.delay_max_ms),
            },
            digest(codec.encode_cert_list(chain)),
            conference=True,
        )
        self.nonces.claim(signer.pid, nonce)
        canonical = codec.canonical_meta_bytes(meta)
        message = canonical if prev_final is None else codec.chain_message(canonical, prev_final)
        sv = sign(signer.identity, message, 0)
        try:
            token = self.t1.timestamp(digest(sv.signature))
        except TimestampUnavailable as exc:
            self._note(f"conference aborted: {exc}")
            return
        s_init = SecurityValue(0, sv.signer, sv.signature, sv.covered_digest, token)
        container = codec.encode_container(signer.pid, signer.identity.scheme.algorithm_id, sv.signature, chain)
        self._emit(ArchiveRecord(RecordType.INIT, codec.encode_meta_body(meta, container)))
        self._emit(ArchiveRecord(RecordType.TSA, codec.encode_token_body(token)))
        self.last_link = s_init
        self.last_step = -1
        for pid in cfg.pids:
            self.members[pid].prev = None
            self.members[pid].known_step = None
            self.members[pid].pending = {}
        signer.prev, signer.known_step = s_init, -1
        msg = _MetaMsg(n, canonical, s_init, False)
        self._broadcast(signer.pid, msg, -1)
        self.waiting = None
        self.sim.schedule(base + self.d, self._due, n, 0)

    # -- token steps

    def _holder_pid(self, step: int) -> int:
        return self.cfg.pids[step % self.cfg.M]

    def _due(self, n: int, step: int) -> None:
        if n != self.seg.index or step > self.seg.last_step:
            return
        holder = self._holder_pid(step)
        if holder in self.seg.unreachable:
            self._note(f"step {step} skipped, participant {holder} unreachable")
            if step == self.seg.last_step:
                self._final(self.links[-1].signer)
            else:
                self._schedule_next(step)
            return
        if self.members[holder].known_step != self.last_step:
            self.waiting = step
            return
        self.waiting = None
        self._collect(step)

    def _schedule_next(self, step: int) -> None:
        nxt = step + 1
        if nxt > self.seg.last_step:
            return
        due = self.seg.base_ms + (nxt + 1) * self.d
        self.sim.schedule(max(self.sim.now, due), self._due, self.seg.index, nxt)

    def _window(self, k: int) -> tuple[int, int]:
        t = slice_of(k, self.cfg.M)
        return self.seg.base_ms + t * self.d, self.seg.base_ms + (t + 1) * self.d

    def _audio_packets(self, pid: int, k: int) -> list[RtpPacket]:
        start, end = self._window(k)
        stop = self.seg.base_ms + self.seg.termination_step * self.d
        return [p for t, p in self.sent[pid] if start <= t < end and t < stop]

    def _collect(self, step: int) -> None:
        M = self.cfg.M
        r, m = divmod(step, M)
        holder = self.cfg.pids[m]
        indices = interval_set(r, m, M)
        audio = tuple(k for k in indices if slice_of(k, M) < self.seg.termination_step)
        sigmas = [s for s in self.cfg.others(m) if self.cfg.pids[s] not in self.seg.unreachable]
        state = {"deltas": {k: {} for k in indices}, "pending": set(sigmas), "retries": {}}
        self.collecting = (self.seg.index, step, state)
        if not audio:
            for k in indices:
                for s in sigmas:
                    state["deltas"][k][s] = ()
            self._sign(step, state)
            return
        for s in sigmas:
            pid = self.cfg.pids[s]
            req = _DeltaRequest(self.seg.index, step, m, audio)
            retry = _Retry(
                self.sim,
                self.gap,
                lambda pid=pid, req=req: self._send(holder, pid, req),
                lambda pid=pid, n=self.seg.index: self._unreachable(pid, f"no delta report for step {step}", n),
            )
            state["retries"][s] = retry
        for retry in list(state["retries"].values()):
            retry.start()

    def _on_delta_reply(self, msg: _DeltaReply) -> None:
        current = self.collecting
        if current is None or current[:2] != (msg.segment, msg.step):
            return
        state = current[2]
        if msg.sigma not in state["pending"]:
            return
        state["pending"].discard(msg.sigma)
        state["retries"][msg.sigma].done = True
        for k, seqs in msg.deltas:
            state["deltas"][k][msg.sigma] = seqs
        self._maybe_sign(msg.step, state)

    def _maybe_sign(self, step: int, state) -> None:
        if state["pending"] or state.get("signed"):
            return
        M = self.cfg.M
        for k in state["deltas"]:
            for s in self.cfg.others(owner(k, M)):
                if self.cfg.pids[s] not in self.seg.unreachable:
                    state["deltas"][k].setdefault(s, ())
        self._sign(step, state)

    def _sign(self, step: int, state) -> None:
        state["signed"] = True
        M = self.cfg.M
        r, m = divmod(step, M)
        pid = self.cfg.pids[m]
        member = self.members[pid]
        sent = {k: self._audio_packets(pid, k) for k in state["deltas"]}
        for k, per_sigma in state["deltas"].items():
            self.reported[(self.seg.index, k)] = dict(per_sigma)
            truth = {}
            for s in per_sigma:
                arrivals = self.members[self.cfg.pids[s]].arrivals.get(pid, {})
                truth[s] = tuple(seq_order(p.sequence_number for p in sent[k] if p.sequence_number in arrivals))
            self.truth[(self.seg.index, k)] = truth
        entries = round_payload(r, m, M, self._window, state["deltas"], sent)
        finalizing = step >= self.seg.termination_step
        canonical = codec.canonical_link_bytes(step, r, m, finalizing, entries)
        sv = sign(member.identity, codec.chain_message(canonical, member.prev), (r, m))
        groups = []
        for e in entries:
            by_seq = {p.sequence_number: p for p in sent[e.index]}
            groups.append(tuple(by_seq[s] for s in e.theta))
        container = codec.encode_container(pid, member.identity.scheme.algorithm_id, sv.signature)
        self._emit(ArchiveRecord(RecordType.INTERVAL, codec.encode_link_body(canonical, groups, container)))
        self.links.append(ConferenceLink(self.seg.index, step, r, m, pid, self.sim.now, finalizing, sv))
        self.sim.log(f"link {step} ({r},{m}) by {pid}")
        self.previous_step[step] = self.last_step
        member.prev, member.known_step = sv, step
        self.last_link, self.last_step = sv, step
        self.collecting = None
        self._broadcast(pid, _LinkMsg(self.seg.index, step, canonical, entries, sv), step)
        if step == self.seg.last_step:
            self._final(pid)
        else:
            self._schedule_next(step)

    def _broadcast(self, src: int, msg, step) -> None:
        for pid in self.cfg.pids:
            if pid == src or pid in self.seg.unreachable:
                continue
            retry = _Retry(
                self.sim,
                self.gap,
                lambda pid=pid: self._send(src, pid, msg),
                lambda pid=pid, n=self.seg.index: self._unreachable(pid, f"no acknowledgement for {step}", n),
            )
            self.acks[(self.seg.index, step, pid)] = retry
            retry.start()

    def _unreachable(self, pid: int, why: str, segment: int) -> None:
        seg = self.seg
        if segment != seg.index or pid in seg.unreachable or pid not in self.cfg.pids:
            return
        seg.unreachable.add(pid)
        self._note(f"participant {pid} unreachable: {why}")
        current = self.collecting
        if current is not None and current[0] == seg.index:
            state = current[2]
            s = self.cfg.position(pid)
            if s in state["pending"]:
                state["pending"].discard(s)
                state["retries"][s].done = True
                self._maybe_sign(current[1], state)
        if seg.final_time is None:
            now_step = max(self.last_step + 1, math.ceil((self.sim.now - seg.base_ms) / self.d))
            if now_step < seg.termination_step:
                seg.termination_step = now_step
                seg.terminating_holder = now_step % seg.M
                seg.cause = Termination.CHANNEL_LOSS
                seg.change = None
                self._note(f"termination moved to step {now_step}")
            elif seg.cause is not Termination.CHANNEL_LOSS:
                seg.cause = Termination.CHANNEL_LOSS
                seg.change = None

    def _final(self, pid: int) -> None:
        seg = self.seg
        member = self.members[pid]
        sip = {}
        if seg.change is not None:
            sip[seg.change.kind] = str(seg.change.participant)
            if seg.change.kind == "join":
                sip["position"] = str(seg.terminating_holder + 1)
        meta = SessionMeta(
            MetaKind.FINAL,
            self.d,
            self._init_nonce(),
            sip,
            b"",
            seg.cause,
            True,
        )
        canonical = codec.canonical_meta_bytes(meta)
        sv = sign(member.identity, codec.chain_message(canonical, member.prev), "F")
        try:
            token = self.t2.timestamp(digest(sv.signature))
        except TimestampUnavailable as exc:
            self._note(f"conference unterminated: {exc}")
            return
        sf = SecurityValue("F", sv.signer, sv.signature, sv.covered_digest, token)
        container = codec.encode_container(pid, member.identity.scheme.algorithm_id, sv.signature)
        self._emit(ArchiveRecord(RecordType.FINAL, codec.encode_meta_body(meta, container)))
        self._emit(ArchiveRecord(RecordType.TSA, codec.encode_token_body(token)))
        seg.final_time = self.sim.now
        seg.final_signer = pid
        self._note(f"segment {seg.index} final by {pid} ({seg.cause.name})")
        self._broadcast(pid, _MetaMsg(seg.index, canonical, sf, True), "F")
        change = seg.change
        if change is None:
            return
        self.changes.pop(0)
        if change.kind == "join":
            identity = self.keys.identities.get(change.participant)
            if identity is None:
                raise ValueError(f"no key material for joining participant {change.participant}")
            cfg = self.cfg.with_joined(identity, seg.terminating_holder)
        else:
            cfg = self.cfg.without(change.participant)
        elapsed = self.sim.now - seg.base_ms
        base = seg.base_ms + -(-elapsed // self.d) * self.d
        if base >= self.sc.duration_ms:
            return
        self.sim.schedule(base, self._start_segment, cfg, base, sf)

    def _init_nonce(self) -> bytes:
        init = next(r for r in reversed(self.records) if r.record_type is RecordType.INIT)
        return codec.decode_meta_body(init.body).meta.nonce

    # -- receivers

    def _deliver(self, dst: int, msg) -> None:
        if msg.segment != self.seg.index:
            # late traffic of a closed segment: settle acknowledgements only
            if isinstance(msg, _Ack):
                retry = self.acks.get((msg.segment, msg.step, msg.sender))
                if retry is not None:
                    retry.done = True
            elif isinstance(msg, (_LinkMsg, _MetaMsg)):
                self._send(dst, msg.link.signer, _Ack(msg.segment, "F" if getattr(msg, "final", False) else getattr(msg, "step", -1), dst))
            return
        member = self.members[dst]
        if isinstance(msg, _DeltaRequest):
            holder = self.cfg.pids[msg.holder]
            arrivals = member.arrivals.get(holder, {})
            stop = self.seg.base_ms + self.seg.termination_step * self.d
            deltas = []
            for k in msg.indices:
                start, end = self._window(k)
                got = []
                for seq, (t, _) in arrivals.items():
                    sent_at = self.send_time[(holder, seq)]
                    if t <= self.sim.now and start <= sent_at < end and sent_at < stop:
                        got.append(seq)
                deltas.append((k, tuple(seq_order(got))))
            self._send(dst, holder, _DeltaReply(msg.segment, msg.step, self.cfg.position(dst), tuple(deltas)))
        elif isinstance(msg, _DeltaReply):
            self._on_delta_reply(msg)
        elif isinstance(msg, _LinkMsg):
            member.pending.setdefault(msg.step, msg)
            self._drain(dst, member)
        elif isinstance(msg, _MetaMsg):
            self._on_meta(dst, member, msg)
        elif isinstance(msg, _Ack):
            retry = self.acks.get((msg.segment, msg.step, msg.sender))
            if retry is not None:
                retry.done = True

    def _ack(self, dst: int, to: int, step) -> None:
        self._send(dst, to, _Ack(self.seg.index, step, dst))

    def _on_meta(self, dst: int, member: _Member, msg: _MetaMsg) -> None:
        if msg.final:
            self._ack(dst, msg.link.signer, "F")
            return
        if member.prev is None:
            key = self.keys.identities[msg.link.signer].public_key
            message = msg.canonical if self.prev_final is None else codec.chain_message(msg.canonical, self.prev_final)
            if not verify(key, message, msg.link.signature, scheme_for_key(key)):
                member.failures.append("initial link failed verification")
                self._note(f"participant {dst} rejects the initial link")
                return
            member.prev, member.known_step = msg.link, -1
        self._ack(dst, msg.link.signer, -1)
        self._drain(dst, member)

    def _drain(self, dst: int, member: _Member) -> None:
        for step in sorted(member.pending):
            msg = member.pending[step]
            if member.known_step is not None and step <= member.known_step:
                del member.pending[step]
                self._ack(dst, msg.link.signer, step)
                continue
            if member.prev is None or self.previous_step.get(step) != member.known_step:
                return
            del member.pending[step]
            if not self._accept_link(dst, member, msg):
                return
            self._ack(dst, msg.link.signer, step)
            if self.waiting is not None and self._holder_pid(self.waiting) == dst and member.known_step == self.last_step:
                due = self.seg.base_ms + (self.waiting + 1) * self.d
                self.sim.schedule(max(self.sim.now, due), self._due, self.seg.index, self.waiting)
                self.waiting = None

    def _accept_link(self, dst: int, member: _Member, msg: _LinkMsg) -> bool:
        holder_pid = msg.link.signer
        key = self.keys.identities[holder_pid].public_key
        ok = bool(verify(key, codec.chain_message(msg.canonical, member.prev), msg.link.signature, scheme_for_key(key)))
        own = member.arrivals.get(holder_pid, {})
        me = self.cfg.position(dst)
        for e in msg.entries:
            hashes = dict(e.manifest)
            for seq in dict(e.deltas).get(me, ()):
                if seq not in hashes or seq not in own or digest(own[seq][1].wire_bytes()) != hashes[seq]:
                    ok = False
        if not ok:
            member.failures.append(f"link {msg.step} failed verification")
            self._note(f"participant {dst} rejects link {msg.step}")
            return False
        member.prev, member.known_step = msg.link, msg.step
        return True


def run_conference(
    scenario: ConferenceScenario,
    keys: KeyRing,
    sink: Optional[Callable[[ArchiveRecord], None]] = None,
    nonces: Optional[NonceRegistry] = None,
) -> ConferenceResult:
    """Simulate a conference including membership changes and the closing
    rounds of every segment."""
    return _ConferenceDriver(scenario, keys, sink, nonces).run()
