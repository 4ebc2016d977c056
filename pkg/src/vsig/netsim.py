"""Deterministic network simulation: seeded RTP streams, lossy media
channels, lossy signalling links and a discrete-event clock.

Randomness comes from numpy's PCG64. Each channel or stream draws from its
own substream, derived with SeedSequence(seed, spawn_key=(crc32(name),)),
so adding a channel never perturbs the draws of another.
"""

from __future__ import annotations

import heapq
import itertools
import zlib
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np

from vsig.model import SEQ_MOD, TS_MOD, RtpPacket


def substream(seed: int, name: str) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed & ((1 << 64) - 1), spawn_key=(zlib.crc32(name.encode()),))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class ChannelSpec:
    """`bursts` are (start_ms, end_ms, ratio) windows in which exactly the
    given share of packets is dropped, evenly spread. `drop_script` lists
    zero-based ordinals of messages that are always dropped. Everything
    sent at or after `cut_at_ms` is lost."""

    loss_probability: float = 0.0
    delay_min_ms: int = 0
    delay_max_ms: int = 0
    duplicate_probability: float = 0.0
    bursts: tuple[tuple[int, int, float], ...] = ()
    drop_script: frozenset = frozenset()
    cut_at_ms: Optional[int] = None

    def __post_init__(self):
        for name in ("loss_probability", "duplicate_probability"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0 <= self.delay_min_ms <= self.delay_max_ms:
            raise ValueError("delay bounds must satisfy 0 <= min <= max")
        for start, end, ratio in self.bursts:
            if end < start or not 0.0 <= ratio <= 1.0:
                raise ValueError(f"bad burst {(start, end, ratio)}")

    @property
    def reorders(self) -> bool:
        return self.delay_max_ms > self.delay_min_ms


LOSSLESS = ChannelSpec()
# Mildly lossy, jittery default used when a scenario names no channel.
DEFAULT_CHANNEL = ChannelSpec(loss_probability=0.01, delay_min_ms=10, delay_max_ms=40)


@dataclass(frozen=True)
class StreamSpec:
    duration_ms: int
    packets_per_second: int = 50
    payload_bytes: int = 160
    silence: tuple[tuple[int, int], ...] = ()
    ssrc: int = 0
    clock_rate: int = 8000
    clock_skew_ppm: float = 0.0
    start_ms: int = 0

    def __post_init__(self):
        if self.packets_per_second <= 0:
            raise ValueError("packet rate must be positive")
        for start, end in self.silence:
            if not 0 <= start <= end <= self.duration_ms:
                raise ValueError(f"silence window {(start, end)} outside the call")

    @property
    def period_ms(self) -> float:
        return 1000.0 / self.packets_per_second


def generate_stream(spec: StreamSpec, seed: int, name: str = "stream") -> list[tuple[int, RtpPacket]]:
    """(send time, packet) pairs. Sequence numbers are consecutive from a
    seeded start and keep counting through silence; the media clock keeps
    running, so the first packet after silence jumps in timestamp and
    carries the marker bit."""
    rng = substream(seed, name)
    seq0 = int(rng.integers(0, SEQ_MOD))
    ts0 = int(rng.integers(0, TS_MOD))
    ssrc = spec.ssrc or int(rng.integers(1, TS_MOD))
    rate = spec.clock_rate * (1.0 + spec.clock_skew_ppm * 1e-6)
    out = []
    n = 0
    silent_before = True
    i = 0
    while True:
        t_rel = i * spec.period_ms
        if t_rel >= spec.duration_ms:
            break
        i += 1
        if any(s <= t_rel < e for s, e in spec.silence):
            silent_before = True
            continue
        ts = (ts0 + int(round(t_rel * rate / 1000.0))) % TS_MOD
        packet = RtpPacket(
            sequence_number=(seq0 + n) % SEQ_MOD,
            media_timestamp=ts,
            ssrc=ssrc,
            payload=rng.bytes(spec.payload_bytes),
            marker=silent_before,
        )
        out.append((spec.start_ms + int(round(t_rel)), packet))
        silent_before = False
        n += 1
    return out


@dataclass
class Delivery:
    schedule: list[tuple[int, RtpPacket]]
    lost: list[int]
    duplicated: list[int] = field(default_factory=list)

    def delivered_seqs(self) -> set[int]:
        return {p.sequence_number for _, p in self.schedule}


def _burst_drop(spec: ChannelSpec, t: int, counters: dict) -> Optional[bool]:
    for n, (start, end, ratio) in enumerate(spec.bursts):
        if start <= t < end:
            k = counters.get(n, 0)
            counters[n] = k + 1
            return int((k + 1) * ratio) > int(k * ratio)
    return None


def transmit(spec: ChannelSpec, packets: list[tuple[int, RtpPacket]], seed: int, name: str = "channel") -> Delivery:
    """Push packets through a channel. Every packet consumes the same number
    of draws whatever happens to it, so the schedule is a pure function of
    (spec, packets, seed, name)."""
    rng = substream(seed, name)
    counters: dict = {}
    schedule = []
    lost = []
    dups = []
    for t, packet in packets:
        u_loss, u_dup = rng.random(2)
        d1, d2 = rng.integers(spec.delay_min_ms, spec.delay_max_ms + 1, size=2)
        if spec.cut_at_ms is not None and t >= spec.cut_at_ms:
            lost.append(packet.sequence_number)
            continue
        drop = _burst_drop(spec, t, counters)
        if drop is None:
            drop = u_loss < spec.loss_probability
        if drop:
            lost.append(packet.sequence_number)
            continue
        schedule.append((t + int(d1), packet))
        if u_dup < spec.duplicate_probability:
            schedule.append((t + int(d2), packet))
            dups.append(packet.sequence_number)
    schedule.sort(key=lambda item: item[0])
    return Delivery(schedule, lost, dups)


class Simulator:
    """A discrete-event loop over integer virtual milliseconds. Events at the
    same instant run in scheduling order."""

    def __init__(self):
        self.now = 0
        self._queue: list = []
        self._counter = itertools.count()
        self.trace: list[tuple[int, str]] = []

    def schedule(self, at: int, fn: Callable, *args: Any) -> None:
        if at < self.now:
            raise ValueError(f"cannot schedule in the past ({at} < {self.now})")
        heapq.heappush(self._queue, (at, next(self._counter), fn, args))

    def after(self, delay: int, fn: Callable, *args: Any) -> None:
        self.schedule(self.now + delay, fn, *args)

    def log(self, what: str) -> None:
        self.trace.append((self.now, what))

    def run(self, until: Optional[int] = None) -> None:
        while self._queue:
            at = self._queue[0][0]
            if until is not None and at > until:
                break
            at, _, fn, args = heapq.heappop(self._queue)
            self.now = at
            fn(*args)


class MessageLink:
    """One direction of the signalling channel between two parties."""

    def __init__(self, sim: Simulator, spec: ChannelSpec, seed: int, name: str, deliver: Callable[[Any], None]):
        self.sim = sim
        self.spec = spec
        self.rng = substream(seed, name)
        self.name = name
        self.deliver = deliver
        self.sent = 0
        self.dropped = 0

    def send(self, message: Any) -> bool:
        ordinal = self.sent
        self.sent += 1
        u_loss, u_dup = self.rng.random(2)
        d1, d2 = self.rng.integers(self.spec.delay_min_ms, self.spec.delay_max_ms + 1, size=2)
        now = self.sim.now
        lost = (
            ordinal in self.spec.drop_script
            or (self.spec.cut_at_ms is not None and now >= self.spec.cut_at_ms)
            or u_loss < self.spec.loss_probability
        )
        if lost:
            self.dropped += 1
            return False
        self.sim.after(int(d1), self.deliver, message)
        if u_dup < self.spec.duplicate_probability:
            self.sim.after(int(d2), self.deliver, message)
        return True
