"""Offline audit of `.vsig` archives.

`audit` replays the chain with `ChainVerifier` and then runs the plausibility
checks over the verified prefix only. Chaining, signatures, timestamps and
replay protection are mandatory: a failure there makes the whole archive
Failed. Loss, sequence, drift and overlap rows are advisory by default.
"""

from __future__ import annotations

import datetime
import functools
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from vsig import codec
from vsig.codec import DecodeError
from vsig.crypto import TrustStore
from vsig.model import SEQ_MOD, TS_MOD, AuditFinding, Check, Direction, NonceRegistry, Verdict
from vsig.multilateral import multilateral_completeness
from vsig.verify import ChainError, ChainVerifier

MANDATORY = frozenset(
    {Check.INITIAL_TIMESTAMP, Check.INITIAL_SIGNATURE, Check.INTERVAL_CHAINING, Check.REPLAY_WINDOW, Check.FINAL_TIMESTAMP}
)
ROWS = tuple(Check)


class Overall(Enum):
    VERIFIED = "Verified"
    UNTERMINATED = "VerifiedUnterminated"
    FAILED = "Failed"


EXIT_CODES = {Overall.VERIFIED: 0, Overall.FAILED: 1, Overall.UNTERMINATED: 2}


@dataclass(frozen=True)
class AuditOptions:
    loss_threshold: float = 0.3
    jitter_ms: Optional[int] = None
    final_tolerance_ms: Optional[int] = None
    mandatory: frozenset = MANDATORY
    nonces: Optional[NonceRegistry] = None


@dataclass
class AuditReport:
    archive_id: str
    findings: list[AuditFinding]
    overall: Overall
    statistics: dict = field(default_factory=dict)
    validated: int = 0

    def finding(self, check: Check) -> AuditFinding:
        return next(f for f in self.findings if f.check is check)

    def verdict(self, check: Check) -> Verdict:
        return self.finding(check).verdict

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.overall]

    @property
    def failure_location(self) -> Optional[int]:
        failed = [f for f in self.findings if f.verdict is Verdict.FAIL and f.check in MANDATORY]
        return failed[0].location if failed else None


def iso_time(ms: int) -> str:
    stamp = datetime.datetime.fromtimestamp(ms / 1000, tz=datetime.timezone.utc)
    return stamp.strftime("%Y-%m-%dT%H:%M:%S.") + f"{ms % 1000:03d}Z"


def _unwrap(prev: int, value: int, modulus: int) -> int:
    delta = (value - prev) % modulus
    if delta >= modulus // 2:
        delta -= modulus
    return prev + delta


@dataclass(frozen=True)
class _Facts:
    """Per-interval figures used by the cross-interval checks. Offsets are
    relative to the interval's first packet, in sequence order."""

    count: int
    first_seq: int
    seq_span: int
    first_ts: int
    ts_min: int
    ts_max: int
    ts_last: int
    ssrcs: tuple[int, ...]


@functools.lru_cache(maxsize=8192)
def _facts(packets: tuple) -> Optional[_Facts]:
    if not packets:
        return None
    first = packets[0]
    rel = [((p.media_timestamp - first.media_timestamp + TS_MOD // 2) % TS_MOD) - TS_MOD // 2 for p in packets]
    span = (packets[-1].sequence_number - first.sequence_number) % SEQ_MOD
    return _Facts(len(packets), first.sequence_number, span, first.media_timestamp, min(rel), max(rel), rel[-1], tuple(sorted({p.ssrc for p in packets})))


@dataclass
class _Unit:
    """One interval of one media stream, in chain order."""

    stream: str
    index: int
    start_ms: int
    end_ms: int
    packets: tuple
    sent: int


class _StreamState:
    def __init__(self):
        self.last_ext: Optional[int] = None
        self.last_ts: Optional[int] = None
        self.ref_ts: Optional[int] = None
        self.first_media: Optional[float] = None
        self.first_mid: Optional[float] = None
        self.last_media: Optional[float] = None
        self.last_mid: Optional[float] = None
        self.low = float("-inf")
        self.high = float("inf")
        self.seen: set = set()
        self.ranges: list = []


class _Auditor:
    def __init__(self, trust: TrustStore, options: AuditOptions):
        self.trust = trust
        self.opts = options
        self.findings: dict[Check, AuditFinding] = {}
        self.stats: dict = {}

    def set(self, check: Check, verdict: Verdict, detail: str = "", location: Optional[int] = None) -> None:
        if check in self.findings and self.findings[check].verdict is Verdict.FAIL:
            return
        self.findings[check] = AuditFinding(check, verdict, detail, location)

    def run(self, data: bytes, archive_id: str) -> AuditReport:
        verifier = ChainVerifier(self.trust, self.opts.nonces)
        error: Optional[ChainError] = None
        try:
            for _, record in codec.iter_frames(data):
                try:
                    verifier.feed(record)
                except ChainError as exc:
                    error = exc
                    break
        except DecodeError as exc:
            check = Check.INITIAL_SIGNATURE if not verifier.segments else Check.INTERVAL_CHAINING
            if verifier.state == "final":
                check = Check.FINAL_TIMESTAMP
            elif verifier.state == "init":
                check = Check.INITIAL_TIMESTAMP
            error = ChainError(check, verifier.expected_position(), f"undecodable archive: {exc}")
        if error is None and verifier.state in ("init", "final"):
            check = Check.INITIAL_TIMESTAMP if verifier.state == "init" else Check.FINAL_TIMESTAMP
            error = ChainError(check, verifier.expected_position(), "timestamp token missing")
        if error is None and not verifier.segments:
            error = ChainError(Check.INITIAL_SIGNATURE, 0, "archive holds no records")

        self._chain_rows(verifier, error)
        segments = verifier.segments
        if segments:
            if segments[0].conference:
                self._conference_rows(segments)
            else:
                self._bilateral_rows(segments[0])
        self.set(Check.FORENSIC_ANALYSIS, Verdict.INAPPLICABLE, "speaker and content analysis is not automated")
        for check in ROWS:
            if check not in self.findings:
                self.set(check, Verdict.INAPPLICABLE, "not reached")

        findings = [self.findings[c] for c in ROWS]
        failed = any(f.verdict is Verdict.FAIL and f.check in self.opts.mandatory for f in findings)
        if failed:
            overall = Overall.FAILED
        elif verifier.terminated and not _continues(segments[-1]):
            overall = Overall.VERIFIED
        else:
            overall = Overall.UNTERMINATED
        validated = sum(len(s.links) for s in segments)
        self.stats["links_verified"] = validated
        self.stats["segments"] = len(segments)
        return AuditReport(archive_id, findings, overall, dict(sorted(self.stats.items())), validated)

    # -- mandatory rows

    def _chain_rows(self, verifier: ChainVerifier, error: Optional[ChainError]) -> None:
        if error is not None:
            self.set(error.check, Verdict.FAIL, error.reason, error.location)
        segments = verifier.segments
        if segments:
            first = segments[0]
            self.set(Check.INITIAL_SIGNATURE, Verdict.PASS, f"signer {first.signer}, certificate chain valid")
            if first.t1 is not None:
                self.stats["t1_ms"] = first.t1.asserted_time
                self.set(Check.INITIAL_TIMESTAMP, Verdict.PASS, f"T1 {iso_time(first.t1.asserted_time)}")
            if self.opts.nonces is not None:
                self.set(Check.REPLAY_WINDOW, Verdict.PASS, "nonce unused")
        if error is None or error.check is not Check.INTERVAL_CHAINING:
            links = sum(len(s.links) for s in segments)
            if error is None or error.check is Check.FINAL_TIMESTAMP:
                self.set(Check.INTERVAL_CHAINING, Verdict.PASS, f"{links} links verified")
        closed = [s for s in segments if s.t2 is not None]
        if error is None and not verifier.terminated:
            self.set(Check.FINAL_TIMESTAMP, Verdict.INAPPLICABLE, "archive is unterminated")
        origin = segments[0].t1.asserted_time - segments[0].base_ms if segments and segments[0].t1 else 0
        for seg in closed:
            d = seg.meta.interval_duration_ms
            tolerance = self.opts.final_tolerance_ms if self.opts.final_tolerance_ms is not None else 2 * d
            if seg.conference:
                expected = seg.base_ms + (seg.links[-1].step + 1) * d
            else:
                last = seg.links[-1].interval.index if seg.links else 0
                expected = -(-last // 2) * d
            measured = seg.t2.asserted_time - origin
            drift = measured - expected
            self.stats["t2_ms"] = seg.t2.asserted_time
            self.stats["termination"] = seg.final.meta.termination.name.lower()
            self.stats["t1_t2_drift_ms"] = drift
            if abs(drift) > tolerance:
                self.set(Check.FINAL_TIMESTAMP, Verdict.FAIL, f"T2 lies {drift} ms off the end of the last interval", seg.position)
            else:
                self.set(Check.FINAL_TIMESTAMP, Verdict.PASS, f"T2 {iso_time(seg.t2.asserted_time)}, {measured} ms after session start")

    # -- bilateral plausibility rows

    def _bilateral_rows(self, seg) -> None:
        d = seg.meta.interval_duration_ms
        rate = int(seg.meta.sip_data.get("clock_rate", "8000"))
        jitter = self.opts.jitter_ms if self.opts.jitter_ms is not None else int(seg.meta.sip_data.get("max_jitter_ms", "0"))
        units = []
        grid_error = None
        for rec in seg.links:
            iv = rec.interval
            pair = -(-iv.index // 2)
            if iv.start_ms != (pair - 1) * d or not iv.start_ms <= iv.end_ms <= pair * d:
                grid_error = grid_error or (iv.index, f"window [{iv.start_ms}, {iv.end_ms}) is off the grid")
            signed = tuple(iv.reduced_packets())
            units.append(_Unit("ab" if iv.id.owner == Direction.A_TO_B else "ba", iv.index, iv.start_ms, iv.end_ms, signed, len(iv.packets)))
        self._stream_rows(units, d, rate, jitter, grid_error, estimate_gaps={"ba"})
        self.set(Check.MULTILATERAL_COMPLETENESS, Verdict.INAPPLICABLE, "two-party session")

    def _conference_rows(self, segments) -> None:
        d = segments[0].meta.interval_duration_ms
        rate = int(segments[0].meta.sip_data.get("clock_rate", "8000"))
        jitter = self.opts.jitter_ms if self.opts.jitter_ms is not None else int(segments[0].meta.sip_data.get("max_jitter_ms", "0"))
        units = []
        worst = (0.0, None)
        incomplete = []
        checked = 0
        for n, seg in enumerate(segments):
            for link in seg.links:
                pid = seg.participants[link.holder]
                for entry, group in zip(link.entries, link.packets):
                    units.append(_Unit(f"seg{n}.p{pid}", entry.index, entry.start_ms, entry.end_ms, group, len(group)))
                    theta = len(entry.manifest)
                    for _, seqs in entry.deltas:
                        if theta:
                            ratio = 1 - len(seqs) / theta
                            if ratio > worst[0]:
                                worst = (ratio, entry.index)
            chain = [(l.step, l.holder) for l in seg.links]
            if not chain:
                continue
            audio_until = seg.finalizing_from if seg.finalizing_from is not None else chain[-1][0] + 1
            for t in range(audio_until):
                checked += 1
                result = multilateral_completeness(chain, t, seg.M)
                if not result.complete:
                    names = ",".join(str(seg.participants[m]) for m in result.missing)
                    incomplete.append((n, t, names))
                elif n == 0 and t == 0:
                    self.stats["slice0_complete_step"] = result.completed_at
        self.stats["loss_max"] = round(worst[0], 4)
        if worst[0] > self.opts.loss_threshold:
            self.set(Check.PACKET_LOSS, Verdict.FAIL, f"receiver loss {worst[0]:.3f} above {self.opts.loss_threshold}", worst[1])
        else:
            self.set(Check.PACKET_LOSS, Verdict.PASS, f"max receiver loss {worst[0]:.3f}")
        self._stream_rows(units, d, rate, jitter, None, estimate_gaps=set(), loss_row=False)
        if incomplete:
            n, t, names = incomplete[0]
            self.set(
                Check.MULTILATERAL_COMPLETENESS,
                Verdict.FAIL,
                f"{len(incomplete)} of {checked} slices lack coverage; segment {n} slice {t} misses second links from {names}",
                t * segments[n].M + 1,
            )
        else:
            self.set(Check.MULTILATERAL_COMPLETENESS, Verdict.PASS, f"{checked} slices covered twice by every participant")

    def _stream_rows(self, units, d, rate, jitter, grid_error, estimate_gaps, loss_row=True) -> None:
        states: dict[str, _StreamState] = {}
        seq_fail = overlap_fail = drift_fail = replay_fail = loss_fail = None
        losses = []
        for u in units:
            facts = _facts(u.packets)
            st = states.setdefault(u.stream, _StreamState())
            missing = 0
            if facts is None:
                if loss_row:
                    losses.append(0.0)
                continue
            first_ext = facts.first_seq if st.last_ext is None else _unwrap(st.last_ext, facts.first_seq, SEQ_MOD)
            last_ext = first_ext + facts.seq_span
            if st.last_ext is not None:
                if first_ext <= st.last_ext:
                    seq_fail = seq_fail or (u.index, f"sequence {facts.first_seq} does not advance past the previous interval")
                    overlap = {p.sequence_number for p in u.packets} & st.seen
                    if overlap and replay_fail is None:
                        replay_fail = (u.index, f"sequence number {min(overlap)} recorded twice")
                else:
                    missing = first_ext - st.last_ext - 1
            missing += facts.seq_span + 1 - facts.count
            st.seen.update(p.sequence_number for p in u.packets)
            st.last_ext = max(last_ext, st.last_ext if st.last_ext is not None else last_ext)

            first_ts = facts.first_ts if st.last_ts is None else _unwrap(st.last_ts, facts.first_ts, TS_MOD)
            if st.ref_ts is None:
                st.ref_ts = first_ts
            if st.last_ts is not None and first_ts + facts.ts_min <= st.last_ts:
                overlap_fail = overlap_fail or (u.index, "media time overlaps the previous interval")
            st.last_ts = max(first_ts + facts.ts_max, st.last_ts if st.last_ts is not None else first_ts)
            media_lo = (first_ts + facts.ts_min - st.ref_ts) * 1000 / rate
            media_hi = (first_ts + facts.ts_max - st.ref_ts) * 1000 / rate
            period = 0.0 if facts.count < 2 else (facts.ts_max - facts.ts_min) * 1000 / rate / max(1, facts.count - 1)
            tol = max(period, 20.0) + jitter
            st.low = max(st.low, u.start_ms - media_lo - tol)
            st.high = min(st.high, u.end_ms - media_hi + tol)
            if st.low > st.high and drift_fail is None:
                drift_fail = (u.index, f"media clock leaves the interval grid by {st.low - st.high:.1f} ms")
            if st.first_media is None:
                st.first_media, st.first_mid = media_lo, u.start_ms
            st.last_media, st.last_mid = media_lo, u.start_ms

            if loss_row:
                if u.stream in estimate_gaps:
                    ratio = missing / (missing + facts.count) if missing > 0 else 0.0
                else:
                    ratio = 1 - facts.count / u.sent if u.sent else 0.0
                losses.append(ratio)
                if ratio > self.opts.loss_threshold and loss_fail is None:
                    loss_fail = (u.index, f"loss {ratio:.3f} above {self.opts.loss_threshold}")

        if loss_row:
            self.stats["loss_max"] = round(max(losses, default=0.0), 4)
            self.stats["loss_mean"] = round(sum(losses) / len(losses), 4) if losses else 0.0
            self.stats["loss_per_interval"] = ",".join(f"{x:.3f}" for x in losses)
            if loss_fail:
                self.set(Check.PACKET_LOSS, Verdict.FAIL, loss_fail[1], loss_fail[0])
            else:
                self.set(Check.PACKET_LOSS, Verdict.PASS, f"max interval loss {max(losses, default=0.0):.3f}")
        self._row(Check.SEQ_MONOTONIC, seq_fail, "sequence numbers increase in every stream")
        self._row(Check.BOUNDARY_OVERLAP, overlap_fail, "no media time overlaps at interval boundaries")
        self._row(Check.DRIFT_VS_GRID, grid_error or drift_fail, "media clocks stay on the interval grid")
        if replay_fail is not None:
            self.set(Check.REPLAY_WINDOW, Verdict.FAIL, replay_fail[1], replay_fail[0])
        else:
            self.set(Check.REPLAY_WINDOW, Verdict.PASS, "no repeated nonce or packet")

        worst = 0.0
        for key, st in sorted(states.items()):
            if st.first_media is None:
                continue
            drift = (st.last_media - st.first_media) - (st.last_mid - st.first_mid)
            self.stats[f"media_drift_ms.{key}"] = round(drift, 1)
            worst = max(worst, abs(drift))
        if worst > d:
            self.set(Check.DRIFT_VS_SYSTEM, Verdict.FAIL, f"media clock drifts {worst:.1f} ms against interval time")
        else:
            self.set(Check.DRIFT_VS_SYSTEM, Verdict.PASS, f"max media drift {worst:.1f} ms")

    def _row(self, check: Check, failure, ok: str) -> None:
        if failure:
            self.set(check, Verdict.FAIL, failure[1], failure[0])
        else:
            self.set(check, Verdict.PASS, ok)


def _continues(segment) -> bool:
    # A segment closed by a membership change promises a follow-up segment.
    sip = segment.final.meta.sip_data if segment.final is not None else {}
    return "join" in sip or "leave" in sip


def audit(data: bytes, trust: TrustStore, options: Optional[AuditOptions] = None, archive_id: str = "") -> AuditReport:
    return _Auditor(trust, options or AuditOptions()).run(data, archive_id)


def render_report(report: AuditReport, fmt: str = "text") -> str:
    if fmt in ("kv", "keyvalue"):
        lines = [f"archive={report.archive_id}", f"overall={report.overall.value}", f"exit_code={report.exit_code}"]
        for f in report.findings:
            lines.append(f"check.{f.check.value}={f.verdict.value}")
            if f.location is not None:
                lines.append(f"check.{f.check.value}.location={f.location}")
            if f.detail:
                lines.append(f"check.{f.check.value}.detail={f.detail}")
        for key, value in report.statistics.items():
            lines.append(f"stat.{key}={value}")
        return "\n".join(lines) + "\n"
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    lines = [f"archive  {report.archive_id}", f"verdict  {report.overall.value}", ""]
    for f in report.findings:
        where = f" @{f.location}" if f.location is not None else ""
        mark = "mandatory" if f.check in MANDATORY else "advisory"
        lines.append(f"  {f.check.value:<26} {f.verdict.value:<13} {mark:<9} {f.detail}{where}")
    lines.append("")
    for key, value in report.statistics.items():
        if key == "loss_per_interval":
            continue
        lines.append(f"  {key:<26} {value}")
    return "\n".join(lines) + "\n"
