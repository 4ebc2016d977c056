import math
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from vsig.model import (
    AuditFinding,
    Check,
    DeltaReport,
    Direction,
    Interval,
    IntervalId,
    LossPolicy,
    MetaKind,
    NonceRegistry,
    NonceReuse,
    RtpPacket,
    SessionMeta,
    Termination,
    Verdict,
    bilateral_direction,
    interval_count,
    loss_ratio,
    seq_order,
    window_intervals,
)

NONCE = bytes(range(1, 17))


def packets(seqs, ssrc=9):
    return tuple(RtpPacket(s, s * 160 % (1 << 32), ssrc, b"x") for s in seqs)


def interval(index, seqs, received=None):
    pk = packets(seqs)
    delta = None if received is None else DeltaReport.of(index, 1, received)
    return Interval(IntervalId(index, int(bilateral_direction(index))), 0, 1000, pk, delta)


@pytest.mark.parametrize("total,d,expected", [(60000, 1000, 60), (60500, 1000, 61), (999, 1000, 1)])
def test_interval_count_examples(total, d, expected):
    assert interval_count(total, d) == expected


def test_interval_count_rejects_zero_duration():
    with pytest.raises(ValueError):
        interval_count(1000, 0)


@given(st.integers(0, 10**7), st.integers(1, 10**5))
def test_interval_count_matches_exact_ceiling(total, d):
    assert interval_count(total, d) == math.ceil(Fraction(total, d))


@given(st.integers(0, 10**6), st.integers(0, 10**6), st.integers(1, 5000), st.integers(1, 5000))
def test_interval_count_monotone(t1, t2, d1, d2):
    lo_t, hi_t = sorted((t1, t2))
    lo_d, hi_d = sorted((d1, d2))
    assert interval_count(lo_t, lo_d) <= interval_count(hi_t, lo_d)
    assert interval_count(lo_t, hi_d) <= interval_count(lo_t, lo_d)


def test_loss_ratio_all_received():
    assert loss_ratio([interval(1, range(10))]) == 0.0


def test_loss_ratio_empty_window():
    assert loss_ratio([]) == 0.0
    assert loss_ratio([interval(1, [])]) == 0.0


def test_loss_ratio_95_of_100():
    window = [interval(1, range(50), range(48)), interval(3, range(100, 150), range(103, 150))]
    sent = sum(len(iv.packets) for iv in window)
    got = sum(len(iv.received) for iv in window)
    assert (sent, got) == (100, 95)
    assert loss_ratio(window) == pytest.approx(float(1 - Fraction(got, sent)))


@given(st.lists(st.tuples(st.integers(0, 40), st.integers(0, 40)), max_size=6))
def test_loss_ratio_bounded(shapes):
    window = []
    base = 0
    for n, keep in shapes:
        seqs = list(range(base, base + n))
        window.append(interval(1, seqs, seqs[: min(keep, n)]))
        base += n
    assert 0.0 <= loss_ratio(window) <= 1.0


def test_window_takes_trailing_intervals():
    ivs = [interval(i, []) for i in (1, 3, 5, 7)]
    assert window_intervals(ivs, 2000, 1000) == ivs[-2:]
    assert window_intervals(ivs, 500, 1000) == ivs[-1:]


@given(st.integers(1, 10**6))
def test_direction_parity(index):
    assert bilateral_direction(index) is (Direction.A_TO_B if index % 2 else Direction.B_TO_A)


def test_rtp_header_round_trip():
    p = RtpPacket(65535, 0xFFFFFFFF, 0xDEADBEEF, b"abc", marker=True, payload_type=8)
    assert len(p.header()) == 12
    assert RtpPacket.from_header(p.header(), p.payload) == p
    assert p.version == 2


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(sequence_number=1 << 16, media_timestamp=0, ssrc=0),
        dict(sequence_number=0, media_timestamp=1 << 32, ssrc=0),
        dict(sequence_number=0, media_timestamp=0, ssrc=0, payload=b"x" * 1401),
        dict(sequence_number=0, media_timestamp=0, ssrc=0, payload_type=128),
    ],
)
def test_rtp_field_ranges(kwargs):
    with pytest.raises(ValueError):
        RtpPacket(**kwargs)


def test_seq_order_handles_wrap():
    assert seq_order([1, 65535, 0, 65534]) == [65534, 65535, 0, 1]
    assert seq_order([5, 3, 4]) == [3, 4, 5]


@given(st.integers(0, 65535), st.integers(1, 200), st.randoms())
def test_seq_order_restores_consecutive_runs(start, n, rnd):
    run = [(start + i) % 65536 for i in range(n)]
    shuffled = run[:]
    rnd.shuffle(shuffled)
    assert seq_order(shuffled) == run


def test_delta_must_name_existing_packets():
    with pytest.raises(ValueError):
        interval(1, [1, 2], [1, 3])


def test_reduced_packets_follow_delta():
    iv = interval(1, [4, 2, 3], [4, 2])
    assert [p.sequence_number for p in iv.reduced_packets()] == [2, 4]
    assert [p.sequence_number for p in iv.unreceived_packets()] == [3]


def test_interval_ids_are_one_based():
    with pytest.raises(ValueError):
        IntervalId(0, 0)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(nonce=bytes(16)),
        dict(nonce=b"short"),
        dict(interval_duration_ms=99),
        dict(termination=Termination.INTENTIONAL),
    ],
)
def test_session_meta_invariants(kwargs):
    values = dict(kind=MetaKind.INITIAL, interval_duration_ms=1000, nonce=NONCE)
    values.update(kwargs)
    with pytest.raises(ValueError):
        SessionMeta(**values)


def test_final_meta_carries_termination():
    meta = SessionMeta(MetaKind.FINAL, 1000, NONCE, termination=Termination.POLICY_ABORT)
    assert meta.termination is Termination.POLICY_ABORT


def test_loss_policy_threshold_range():
    with pytest.raises(ValueError):
        LossPolicy(threshold=1.5)


def test_failing_finding_needs_location_or_reason():
    with pytest.raises(ValueError):
        AuditFinding(Check.INTERVAL_CHAINING, Verdict.FAIL)
    assert AuditFinding(Check.INTERVAL_CHAINING, Verdict.FAIL, location=3).location == 3


def test_nonce_registry_refuses_reuse_per_signer():
    reg = NonceRegistry()
    reg.claim(0, NONCE)
    reg.claim(1, NONCE)
    with pytest.raises(NonceReuse):
        reg.claim(0, NONCE)
