import dataclasses
import threading

import pytest

from conftest import small
from vsig import codec
from vsig.archive import (
    ArchiveService,
    RecordRejected,
    SessionRefused,
    SessionSink,
    SocketSink,
    read_index,
    serve,
)
from vsig.audit import Overall, audit
from vsig.bilateral import run_bilateral
from vsig.codec import ArchiveRecord, RecordType
from vsig.crypto import digest, sign
from vsig.model import Check


class Clock:
    def __init__(self):
        self.now = 0

    def __call__(self):
        return self.now


@pytest.fixture
def service(tmp_path, trust):
    return ArchiveService(tmp_path / "store", trust, clock=Clock())


def _open(service, records):
    return service.open_session(records[0], records[1])


def _container(c, **changes):
    c = dataclasses.replace(c, **changes)
    return codec.encode_container(c.signer, c.algorithm_id, c.signature, c.chain)


def _feed_all(service, records):
    sid = _open(service, records)
    acks = [service.append(sid, r) for r in records[2:-2]]
    return sid, acks


def test_open_writes_two_records(service, small_run):
    sid = _open(service, small_run.records)
    path = service.sessions[sid].path
    assert [r.record_type for r in codec.decode_archive(path.read_bytes()).records] == [RecordType.INIT, RecordType.TSA]


def test_init_with_altered_interval_duration_refused(service, small_run):
    parsed = codec.decode_meta_body(small_run.records[0].body)
    meta = dataclasses.replace(parsed.meta, interval_duration_ms=500)
    forged = ArchiveRecord(RecordType.INIT, codec.encode_meta_body(meta, _container(parsed.container)))
    with pytest.raises(SessionRefused) as info:
        service.open_session(forged, small_run.records[1])
    assert info.value.check is Check.INITIAL_SIGNATURE


def test_init_with_foreign_token_refused(service, small_run, keys):
    other = run_bilateral(small(seed=99), keys)
    with pytest.raises(SessionRefused) as info:
        service.open_session(small_run.records[0], other.records[1])
    assert info.value.check is Check.INITIAL_TIMESTAMP


def test_replayed_nonce_refused(service, small_run):
    _open(service, small_run.records)
    with pytest.raises(SessionRefused) as info:
        _open(service, small_run.records)
    assert info.value.check is Check.REPLAY_WINDOW


def test_in_order_records_acknowledged_and_close_verifies(service, small_run, trust):
    sid, acks = _feed_all(service, small_run.records)
    assert all(acks) and len(acks) == 10
    path = service.close_session(sid, small_run.records[-2], small_run.records[-1])
    assert path.read_bytes() == small_run.archive_bytes()
    assert audit(path.read_bytes(), trust).overall is Overall.VERIFIED
    row = read_index(service.dir)[0]
    assert row["session"] == sid and row["verdict"] == "Verified"
    assert row["quarantined"] == "no"
    # Five intervals of 1 s between the tokens, so no drift against the grid.
    assert int(row["t2_ms"]) - int(row["t1_ms"]) == 5000
    assert int(row["t1_t2_drift_ms"]) == 0
    assert row["start"].startswith("2026-01-01T")


def test_index_gap_quarantines(service, small_run, trust):
    records = small_run.records
    sid = _open(service, records)
    assert service.append(sid, records[2])
    assert not service.append(sid, records[4])  # position 2 skipped
    assert not service.append(sid, records[5])
    path = service.close_session(sid)
    stored = codec.decode_archive(path.read_bytes(), validate=False).records
    marker = stored[3]
    assert marker.record_type is RecordType.QUARANTINE
    assert codec.decode_quarantine_body(marker.body)[0] == 2
    # Nothing dropped: both rejected records follow the marker.
    assert [r.body for r in stored[4:]] == [records[4].body, records[5].body]
    report = audit(path.read_bytes(), trust)
    assert report.overall is Overall.FAILED and report.failure_location == 2
    assert read_index(service.dir)[0]["quarantined"] == "yes"


def _resigned_link(records, position, identity):
    """Re-sign link `position` over the true chain message with `identity`."""
    init = codec.decode_meta_body(records[0].body)
    sig, cov = init.container.signature, digest(init.canonical)
    for rec in records[2 : 1 + position]:
        parsed = codec.decode_interval_body(rec.body)
        message = codec.chain_message(parsed.canonical, _sv(sig, cov))
        sig, cov = parsed.container.signature, digest(message)
    parsed = codec.decode_interval_body(records[1 + position].body)
    forged = sign(identity, codec.chain_message(parsed.canonical, _sv(sig, cov)))
    body = codec.encode_interval_body(parsed.interval, _container(parsed.container, signer=identity.participant_id, signature=forged.signature))
    return ArchiveRecord(RecordType.INTERVAL, body)


def _sv(signature, covered):
    from vsig.model import SecurityValue

    return SecurityValue(None, 0, signature, covered)


@pytest.mark.parametrize("claim_owner", [True, False])
def test_link_signed_by_other_key_rejected(service, small_run, keys, claim_owner):
    records = small_run.records
    forged = _resigned_link(records, 4, keys.identities[1])
    if claim_owner:
        parsed = codec.decode_interval_body(forged.body)
        forged = ArchiveRecord(RecordType.INTERVAL, codec.encode_interval_body(parsed.interval, _container(parsed.container, signer=0)))
    sid = _open(service, records)
    assert all(service.append(sid, r) for r in records[2:5])
    assert not service.append(sid, forged)
    assert service.sessions[sid].quarantine[0] == 4


def test_resigned_link_with_own_key_accepted(service, small_run, keys):
    # Sanity check on the forging helper: the owner's key reproduces the link.
    records = small_run.records
    honest = _resigned_link(records, 4, keys.identities[0])
    assert honest.body == records[5].body


def test_close_with_foreign_final_rejected(service, small_run, keys):
    other = run_bilateral(small(seed=42), keys)
    sid, _ = _feed_all(service, small_run.records)
    with pytest.raises(RecordRejected):
        service.close_session(sid, other.records[-2], other.records[-1])


def test_abandoned_session_expires_unterminated(service, small_run, trust):
    sid = _open(service, small_run.records)
    service.append(sid, small_run.records[2])
    service.clock.now = 2999
    assert service.expire_idle() == []
    service.clock.now = 3000
    assert service.expire_idle() == [sid]
    row = read_index(service.dir)[0]
    assert row["verdict"] == "VerifiedUnterminated" and row["t2_ms"] == "-"
    assert audit(service.sessions[sid].path.read_bytes(), trust).overall is Overall.UNTERMINATED


def test_append_after_close_rejected(service, small_run):
    sid, _ = _feed_all(service, small_run.records)
    service.close_session(sid)
    with pytest.raises(RecordRejected):
        service.append(sid, small_run.records[-2])


def test_append_interval_type_checked(service, small_run):
    sid = _open(service, small_run.records)
    with pytest.raises(ValueError):
        service.append_interval(sid, small_run.records[-2])


def test_every_acknowledged_prefix_decodes(service, small_run, trust):
    records = small_run.records
    sid = _open(service, records)
    path = service.sessions[sid].path
    for n, rec in enumerate(records[2:], start=3):
        assert service.append(sid, rec)
        # Read while the session is open, as after a crash.
        on_disk = path.read_bytes()
        assert len(codec.decode_archive(on_disk, validate=False).records) == n
        report = audit(on_disk, trust)
        assert report.validated == min(n - 2, 10)
        if rec.record_type is RecordType.FINAL:
            # Crash between the final record and its token.
            assert report.failure_location == 11
            assert report.verdict(Check.FINAL_TIMESTAMP).value == "fail"
        else:
            assert report.overall is not Overall.FAILED


def test_concurrent_sessions(tmp_path, trust, keys):
    runs = [run_bilateral(small(seed=s), keys) for s in range(6)]
    service = ArchiveService(tmp_path, trust)
    errors = []

    def push(run):
        try:
            sink = SessionSink(service)
            for rec in run.records:
                sink(rec)
            sink.close()
        except Exception as exc:  # pragma: no cover - surfaced below
            errors.append(exc)

    threads = [threading.Thread(target=push, args=(r,)) for r in runs]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert errors == []
    rows = read_index(tmp_path)
    assert len(rows) == 6 and {r["verdict"] for r in rows} == {"Verified"}
    stored = sorted(p.read_bytes() for p in tmp_path.glob("*.vsig"))
    assert stored == sorted(r.archive_bytes() for r in runs)


def test_same_nonce_concurrently_only_once(tmp_path, trust, small_run):
    service = ArchiveService(tmp_path, trust)
    outcomes = []

    def attempt():
        try:
            _open(service, small_run.records)
            outcomes.append("open")
        except SessionRefused:
            outcomes.append("refused")

    threads = [threading.Thread(target=attempt) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(outcomes) == ["open"] + ["refused"] * 7


def test_engine_sink_records_live_drift(tmp_path, trust, keys):
    service = ArchiveService(tmp_path, trust)
    sink = SessionSink(service)
    run_bilateral(small(), keys, sink=sink)
    path = sink.close()
    assert audit(path.read_bytes(), trust).overall is Overall.VERIFIED
    assert float(read_index(tmp_path)[0]["live_drift_ms"]) == 0.0


def test_socket_transport_matches_in_process(tmp_path, trust, small_run):
    service = ArchiveService(tmp_path, trust)
    server = serve(("127.0.0.1", 0), service)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        sink = SocketSink(server.server_address)
        for rec in small_run.records:
            sink(rec)
        sink.close()
    finally:
        server.shutdown()
        server.server_close()
    assert sink.broken is None and sink.naks == []
    assert (tmp_path / sink.archive_name).read_bytes() == small_run.archive_bytes()


def test_socket_replay_gets_nak(tmp_path, trust, small_run):
    service = ArchiveService(tmp_path, trust)
    server = serve(("127.0.0.1", 0), service)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    try:
        for _ in range(2):
            sink = SocketSink(server.server_address)
            for rec in small_run.records:
                sink(rec)
            sink.close()
    finally:
        server.shutdown()
        server.server_close()
    assert sink.naks == ["NAK ReplayWindow"]


def test_socket_sink_reports_dead_server(tmp_path, trust, small_run):
    service = ArchiveService(tmp_path, trust)
    server = serve(("127.0.0.1", 0), service)
    address = server.server_address
    threading.Thread(target=server.serve_forever, daemon=True).start()
    sink = SocketSink(address)
    for rec in small_run.records[:4]:
        sink(rec)
    server.shutdown()
    server.server_close()
    sink.sock.shutdown(2)
    sink(small_run.records[4])
    assert sink.broken
