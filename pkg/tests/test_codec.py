import struct

import pytest
from hypothesis import given, settings, strategies as st

from vsig import codec
from vsig.codec import ArchiveRecord, DecodeError, RecordType
from vsig.crypto import digest
from vsig.model import DeltaReport, Interval, IntervalId, RtpPacket, SecurityValue

FIXED_WIDTHS = {"index": 8, "owner": 1, "start": 8, "end": 8, "packet_count": 4}


def make_interval(index, seqs, received=None, payload=b"pp", start=0, end=1000):
    pk = tuple(RtpPacket(s, 1000 + s, 77, payload) for s in seqs)
    delta = DeltaReport.of(index, 1, seqs if received is None else received)
    return Interval(IntervalId(index, (index + 1) % 2), start, end, pk, delta)


def test_empty_interval_prefix_is_fixed_width():
    raw = codec.canonical_interval_bytes(make_interval(1, []))
    prefix = sum(FIXED_WIDTHS.values())
    assert prefix == 29
    assert raw[:prefix] == struct.pack(">QBQQI", 1, 0, 0, 1000, 0)
    # The empty delta list adds its own zero count.
    assert raw[prefix:] == b"\x00\x00\x00\x00"


def test_packet_order_does_not_matter():
    a = make_interval(3, [5, 6, 7])
    b = Interval(a.id, a.start_ms, a.end_ms, tuple(reversed(a.packets)), a.delta)
    assert codec.canonical_interval_bytes(a) == codec.canonical_interval_bytes(b)


def test_delta_restricts_signed_bytes():
    full = make_interval(3, [5, 6, 7])
    reduced = make_interval(3, [5, 6, 7], [5, 7])
    assert codec.canonical_interval_bytes(full) != codec.canonical_interval_bytes(reduced)
    assert codec.canonical_interval_bytes(reduced) == codec.canonical_interval_bytes(make_interval(3, [5, 7]))


def test_canonical_layout_is_big_endian_rtp():
    iv = make_interval(2, [258])
    raw = codec.canonical_interval_bytes(iv)
    header = iv.packets[0].header()
    assert raw[29:41] == header
    assert raw[31:33] == b"\x01\x02"
    assert raw[41:43] == b"\x00\x02"


def test_chain_message_construction():
    prev = SecurityValue(1, 0, b"sig-one", digest(b"m1"))
    other = SecurityValue(1, 0, b"sig-two", digest(b"m1"))
    body = b"interval"
    msg = codec.chain_message(body, prev)
    assert msg == codec.chain_message(body, prev)
    assert msg != codec.chain_message(body, other)
    assert len(msg) == len(body) + len(prev.signature) + 32


intervals = st.builds(
    lambda idx, seqs, keep, payload: make_interval(idx, sorted(seqs), sorted(seqs)[: keep], payload),
    st.integers(1, 1000),
    st.sets(st.integers(0, 65535), max_size=6),
    st.integers(0, 6),
    st.binary(max_size=8),
)


def _content(iv: Interval):
    return (iv.index, iv.id.owner, iv.start_ms, iv.end_ms, tuple((p.wire_bytes()) for p in iv.reduced_packets()), iv.received)


@settings(max_examples=300)
@given(intervals, intervals)
def test_canonical_encoding_injective(a, b):
    same_bytes = digest(codec.canonical_interval_bytes(a)) == digest(codec.canonical_interval_bytes(b))
    assert same_bytes == (_content(a) == _content(b))


@given(intervals)
def test_interval_body_round_trip(iv):
    body = codec.encode_interval_body(iv, codec.encode_container(0, 1, b"s" * 4))
    parsed = codec.decode_interval_body(body)
    assert parsed.canonical == codec.canonical_interval_bytes(iv)
    assert parsed.interval.received == iv.received
    assert {p.sequence_number for p in parsed.interval.packets} == {p.sequence_number for p in iv.packets}
    assert parsed.container.signature == b"s" * 4


def test_container_layout():
    raw = codec.encode_container(3, 1, b"abc")
    assert raw == b"\x00\x03" + b"\x01" + b"\x00\x03" + b"abc" + b"\x00\x00\x00\x00"
    with_chain = codec.encode_container(3, 1, b"abc", ((3, b"DER"),))
    assert struct.unpack_from(">I", with_chain, 8)[0] == len(codec.encode_cert_list(((3, b"DER"),)))


def _three_records():
    return [
        ArchiveRecord(RecordType.INIT, b"init"),
        ArchiveRecord(RecordType.TSA, b"token"),
        ArchiveRecord(RecordType.INTERVAL, b"\x00" * 4 + struct.pack(">Q", 1)),
    ]


def test_archive_round_trip():
    recs = _three_records()
    data = codec.encode_archive(recs)
    assert data[:6] == b"VSIG\x00\x01"
    assert codec.decode_archive(data).records == recs


def test_truncated_archive_names_offset():
    data = codec.encode_archive(_three_records())
    with pytest.raises(DecodeError) as err:
        codec.decode_archive(data[:-5])
    assert err.value.kind == "truncated"
    assert "truncated record at offset" in str(err.value)
    assert err.value.offset == len(codec.encode_archive(_three_records()[:2]))


def test_bad_magic():
    data = codec.encode_archive(_three_records())
    with pytest.raises(DecodeError) as err:
        codec.decode_archive(b"XSIG" + data[4:])
    assert err.value.kind == "bad-magic"


def test_bad_version_and_unknown_type():
    data = codec.encode_archive(_three_records())
    with pytest.raises(DecodeError) as err:
        codec.decode_archive(data[:4] + b"\x00\x02" + data[6:])
    assert err.value.kind == "bad-version"
    with pytest.raises(DecodeError) as err:
        codec.decode_archive(data[:6] + b"\x09" + data[7:])
    assert err.value.kind == "unknown-type"


def test_out_of_order_intervals_rejected():
    recs = _three_records()
    recs.append(ArchiveRecord(RecordType.INTERVAL, b"\x00" * 4 + struct.pack(">Q", 1)))
    with pytest.raises(DecodeError) as err:
        codec.decode_archive(codec.encode_archive(recs))
    assert err.value.kind == "order"


def test_quarantine_body_round_trip():
    body = codec.encode_quarantine_body(17, "chain signature does not verify")
    assert codec.decode_quarantine_body(body) == (17, "chain signature does not verify")


@settings(max_examples=500)
@given(st.binary(max_size=300))
def test_decode_never_crashes(data):
    for candidate in (data, b"VSIG\x00\x01" + data):
        try:
            archive = codec.decode_archive(candidate)
        except DecodeError:
            continue
        assert codec.encode_archive(archive) == candidate


@settings(max_examples=200)
@given(st.binary(max_size=200))
def test_body_decoders_raise_structured_errors(body):
    for decoder in (codec.decode_interval_body, codec.decode_meta_body, codec.decode_link_body, codec.decode_token_body):
        try:
            decoder(body)
        except DecodeError:
            pass


def test_real_archive_round_trip(small_archive):
    archive = codec.decode_archive(small_archive)
    assert codec.encode_archive(archive) == small_archive
    assert [r.record_type for r in archive.records[:2]] == [RecordType.INIT, RecordType.TSA]
    assert [r.record_type for r in archive.records[-2:]] == [RecordType.FINAL, RecordType.TSA]


def test_only_init_carries_certificates(small_archive):
    archive = codec.decode_archive(small_archive)
    init = codec.decode_meta_body(archive.records[0].body)
    assert init.container.chain
    for rec in archive.records[2:-2]:
        assert not codec.decode_interval_body(rec.body).container.chain


def test_link_body_round_trip():
    entry = codec.LinkEntry(6, 1, 1000, 2000, ((0, (3, 4)), (2, (4,))), ((3, digest(b"a")), (4, digest(b"b"))))
    canonical = codec.canonical_link_bytes(5, 1, 1, False, (entry,))
    pk = (RtpPacket(3, 0, 1), RtpPacket(4, 0, 1))
    parsed = codec.decode_link_body(codec.encode_link_body(canonical, (pk,), codec.encode_container(1, 1, b"s")))
    assert (parsed.step, parsed.round, parsed.holder, parsed.finalizing) == (5, 1, 1, False)
    assert parsed.entries == (entry,)
    assert parsed.packets == (pk,)
    assert entry.theta == (3, 4)
