"""Archive service: verifies records as they arrive and persists them.

Every accepted record is written and flushed before the caller gets an
acknowledgement, so a crash leaves a decodable prefix. A record that does not
extend the chain is stored behind a quarantine marker instead of being
dropped; everything after the marker is kept for forensics only.

`serve` and `SocketSink` carry the same record stream over a local TCP
socket, one base64 line per request, each answered by ACK or NAK.
"""

from __future__ import annotations

import base64
import os
import socket
import socketserver
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from vsig import codec
from vsig.audit import audit, iso_time
from vsig.codec import ArchiveRecord, DecodeError, RecordType
from vsig.crypto import TrustStore
from vsig.model import Check, NonceRegistry
from vsig.verify import ChainError, ChainVerifier

IDLE_INTERVALS = 3
INDEX_NAME = "index.txt"


class RecordRejected(Exception):
    def __init__(self, check: Check, location: int, reason: str):
        super().__init__(f"{check.value} at {location}: {reason}")
        self.check = check
        self.location = location
        self.reason = reason

    @classmethod
    def wrap(cls, exc: ChainError) -> "RecordRejected":
        return cls(exc.check, exc.location, exc.reason)


class SessionRefused(RecordRejected):
    pass


def _wall_clock() -> int:
    return int(time.monotonic() * 1000)


@dataclass
class _Session:
    sid: str
    path: Path
    handle: object
    verifier: ChainVerifier
    d_ms: int
    last_activity: int
    lock: threading.Lock = field(default_factory=threading.Lock)
    quarantined: bool = False
    quarantine: Optional[tuple[int, str]] = None
    closed: bool = False
    live_drift_ms: float = 0.0
    offsets: dict = field(default_factory=dict)


class ArchiveService:
    def __init__(
        self,
        storage_dir: os.PathLike,
        trust: TrustStore,
        nonces: Optional[NonceRegistry] = None,
        clock: Optional[Callable[[], int]] = None,
        on_close: Optional[Callable[[str, Path], None]] = None,
    ):
        self.dir = Path(storage_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.trust = trust
        self.nonces = nonces if nonces is not None else NonceRegistry()
        self.clock = clock or _wall_clock
        self.on_close = on_close
        self.sessions: dict[str, _Session] = {}
        self._lock = threading.Lock()

    # -- session lifecycle

    def open_session(self, init: ArchiveRecord, token: ArchiveRecord) -> str:
        verifier = ChainVerifier(self.trust)
        try:
            parsed = verifier.feed(init)
            seg = verifier.segment
            sid = f"{seg.signer}-{parsed.meta.nonce.hex()}"
            with self._lock:
                if (seg.signer, parsed.meta.nonce) in self.nonces or sid in self.sessions:
                    raise SessionRefused(Check.REPLAY_WINDOW, 0, f"nonce {parsed.meta.nonce.hex()} already used by {seg.signer}")
                verifier.feed(token)
                self.nonces.claim(seg.signer, parsed.meta.nonce)
                path = self.dir / f"{sid}.vsig"
                handle = open(path, "wb")
                session = _Session(sid, path, handle, verifier, parsed.meta.interval_duration_ms, self.clock())
                self.sessions[sid] = session
        except ChainError as exc:
            raise SessionRefused.wrap(exc) from None
        handle.write(codec.archive_header() + init.encode() + token.encode())
        handle.flush()
        return sid

    def append(self, sid: str, record: ArchiveRecord) -> bool:
        """Verify and store one record. Returns False when the record was
        quarantined rather than accepted."""
        session = self.sessions[sid]
        with session.lock:
            if session.closed:
                raise RecordRejected(Check.INTERVAL_CHAINING, session.verifier.expected_position(), "session already closed")
            session.last_activity = self.clock()
            if session.quarantined:
                self._write(session, record)
                return False
            try:
                parsed = session.verifier.feed(record)
            except ChainError as exc:
                session.quarantined = True
                session.quarantine = (exc.location, exc.reason)
                marker = ArchiveRecord(RecordType.QUARANTINE, codec.encode_quarantine_body(exc.location, exc.reason))
                self._write(session, marker)
                self._write(session, record)
                return False
            if record.record_type is RecordType.INTERVAL:
                self._live_drift(session, parsed)
            self._write(session, record)
            return True

    def append_interval(self, sid: str, record: ArchiveRecord) -> bool:
        if record.record_type is not RecordType.INTERVAL:
            raise ValueError("append_interval takes interval records")
        return self.append(sid, record)

    def close_session(self, sid: str, final: Optional[ArchiveRecord] = None, token: Optional[ArchiveRecord] = None) -> Path:
        """Append the closing pair (if given) and close the file. Without a
        closing pair the archive is left unterminated."""
        session = self.sessions[sid]
        for record in (final, token):
            if record is not None and not self.append(sid, record):
                self._finish(session)
                loc, reason = session.quarantine
                raise RecordRejected(Check.FINAL_TIMESTAMP, loc, reason)
        return self._finish(session)

    def expire_idle(self, now: Optional[int] = None) -> list[str]:
        """Close every session silent for three interval durations."""
        now = self.clock() if now is None else now
        expired = []
        for sid, session in list(self.sessions.items()):
            if not session.closed and now - session.last_activity >= IDLE_INTERVALS * session.d_ms:
                self._finish(session)
                expired.append(sid)
        return expired

    def close_all(self) -> None:
        for session in list(self.sessions.values()):
            if not session.closed:
                self._finish(session)

    # -- internals

    def _write(self, session: _Session, record: ArchiveRecord) -> None:
        session.handle.write(record.encode())
        session.handle.flush()

    def _live_drift(self, session: _Session, parsed) -> None:
        # Media clock of each stream against the signer's interval grid,
        # relative to the stream's first signed packet.
        rate = int(session.verifier.segment.meta.sip_data.get("clock_rate", "8000"))
        if hasattr(parsed, "interval"):
            groups = [(parsed.interval.id.owner, parsed.interval.start_ms, parsed.interval.reduced_packets())]
        else:
            groups = [(e.owner, e.start_ms, g) for e, g in zip(parsed.entries, parsed.packets)]
        for owner, start, packets in groups:
            if not packets:
                continue
            key = (len(session.verifier.segments), owner)
            ts = packets[0].media_timestamp
            if key not in session.offsets:
                session.offsets[key] = (start, ts)
                continue
            start0, ts0 = session.offsets[key]
            elapsed_media = ((ts - ts0) % (1 << 32)) * 1000 / rate
            drift = elapsed_media - (start - start0)
            if abs(drift) > abs(session.live_drift_ms):
                session.live_drift_ms = drift

    def _finish(self, session: _Session) -> Path:
        with session.lock:
            if session.closed:
                return session.path
            session.closed = True
            session.handle.close()
        report = audit(session.path.read_bytes(), self.trust, archive_id=session.sid)
        stats = report.statistics
        fields = {
            "session": session.sid,
            "start": _iso_or_dash(stats.get("t1_ms")),
            "t1_ms": stats.get("t1_ms", "-"),
            "t2_ms": stats.get("t2_ms", "-"),
            "t1_t2_drift_ms": stats.get("t1_t2_drift_ms", "-"),
            "live_drift_ms": f"{session.live_drift_ms:g}",
            "quarantined": "yes" if session.quarantined else "no",
            "verdict": report.overall.value,
        }
        with self._lock:
            with open(self.dir / INDEX_NAME, "a", encoding="utf-8") as index:
                index.write("\t".join(f"{k}={v}" for k, v in fields.items()) + "\n")
        if self.on_close is not None:
            self.on_close(session.sid, session.path)
        return session.path


def _iso_or_dash(ms) -> str:
    return "-" if ms is None else iso_time(ms)


def read_index(storage_dir: os.PathLike) -> list[dict]:
    path = Path(storage_dir) / INDEX_NAME
    if not path.exists():
        return []
    rows = []
    for line in path.read_text(encoding="utf-8").splitlines():
        rows.append(dict(part.split("=", 1) for part in line.split("\t")))
    return rows


class SessionSink:
    """Adapts an engine's record stream to the service: the first init and
    its token open the session, everything else is appended."""

    def __init__(self, service: ArchiveService):
        self.service = service
        self.sid: Optional[str] = None
        self._pending: Optional[ArchiveRecord] = None
        self.rejected: list[int] = []

    def __call__(self, record: ArchiveRecord) -> None:
        if self.sid is None:
            if self._pending is None:
                self._pending = record
                return
            self.sid = self.service.open_session(self._pending, record)
            return
        if not self.service.append(self.sid, record):
            self.rejected.append(self.service.sessions[self.sid].verifier.expected_position())

    def close(self) -> Optional[Path]:
        if self.sid is None:
            return None
        return self.service.close_session(self.sid)


# -- socket transport


def _b64(record: ArchiveRecord) -> str:
    return base64.b64encode(record.encode()).decode("ascii")


def _unb64(text: str) -> ArchiveRecord:
    raw = base64.b64decode(text, validate=True)
    frames = list(codec.iter_frames(codec.archive_header() + raw))
    if len(frames) != 1:
        raise DecodeError("expected exactly one record")
    return frames[0][1]


class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        service: ArchiveService = self.server.service
        sid = None
        for raw in self.rfile:
            parts = raw.decode("ascii", "replace").split()
            if not parts:
                continue
            try:
                if parts[0] == "OPEN" and len(parts) == 3:
                    sid = service.open_session(_unb64(parts[1]), _unb64(parts[2]))
                    reply = f"ACK {sid}"
                elif parts[0] == "REC" and len(parts) == 2 and sid is not None:
                    ok = service.append(sid, _unb64(parts[1]))
                    reply = "ACK" if ok else "NAK quarantined"
                elif parts[0] == "CLOSE" and sid is not None:
                    path = service.close_session(sid)
                    reply = f"ACK {path.name}"
                    sid = None
                else:
                    reply = "NAK bad-request"
            except RecordRejected as exc:
                reply = f"NAK {exc.check.value}"
            except (DecodeError, ValueError):
                reply = "NAK undecodable"
            self.wfile.write((reply + "\n").encode("ascii"))
            self.wfile.flush()
        if sid is not None:
            service.close_session(sid)


class ArchiveServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], service: ArchiveService):
        super().__init__(address, _Handler)
        self.service = service


def serve(address: tuple[str, int], service: ArchiveService) -> ArchiveServer:
    """Bind and return the server; the caller runs `serve_forever`."""
    return ArchiveServer(address, service)


class ChannelBroken(Exception):
    pass


class SocketSink:
    """Client side of the line protocol. After a connection failure the
    sink stops sending and reports the channel as broken."""

    def __init__(self, address: tuple[str, int], timeout: float = 10.0):
        self.sock = socket.create_connection(address, timeout=timeout)
        self.reader = self.sock.makefile("r", encoding="ascii")
        self._pending: Optional[ArchiveRecord] = None
        self.opened = False
        self.broken: Optional[str] = None
        self.naks: list[str] = []
        self.archive_name: Optional[str] = None

    def _request(self, line: str) -> str:
        try:
            self.sock.sendall((line + "\n").encode("ascii"))
            reply = self.reader.readline()
        except OSError as exc:
            reply, why = "", str(exc)
        else:
            why = "connection closed by the archive"
        if not reply:
            self.broken = why
            raise ChannelBroken(why)
        return reply.strip()

    def __call__(self, record: ArchiveRecord) -> None:
        if self.broken:
            return
        try:
            if not self.opened:
                if self._pending is None:
                    self._pending = record
                    return
                reply = self._request(f"OPEN {_b64(self._pending)} {_b64(record)}")
                self.opened = reply.startswith("ACK")
                if not self.opened:
                    self.naks.append(reply)
                    self.broken = reply
                return
            reply = self._request(f"REC {_b64(record)}")
            if not reply.startswith("ACK"):
                self.naks.append(reply)
        except ChannelBroken:
            pass

    def close(self) -> None:
        try:
            if self.opened and not self.broken:
                reply = self._request("CLOSE")
                if reply.startswith("ACK "):
                    self.archive_name = reply[4:]
        except ChannelBroken:
            pass
        finally:
            self.reader.close()
            self.sock.close()
