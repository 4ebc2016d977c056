import pytest
from hypothesis import given, settings, strategies as st

from conftest import small
from vsig import attacks, codec
from vsig.audit import AuditOptions, Overall, audit
from vsig.bilateral import run_bilateral
from vsig.codec import RecordType
from vsig.model import Check, NonceRegistry, Verdict
from vsig.multilateral import ConferenceScenario, run_conference
from vsig.netsim import LOSSLESS

LOCALIZED = ("bit-flip", "packet-delete", "interval-delete", "interval-reorder")


@pytest.fixture(scope="module")
def conference_archive(keys):
    sc = ConferenceScenario(participants=3, duration_ms=4000, media=LOSSLESS, signaling=LOSSLESS, seed=3)
    return run_conference(sc, keys).archive_bytes()


@pytest.fixture(scope="module", params=["bilateral", "conference"])
def archive(request, small_archive, conference_archive):
    return small_archive if request.param == "bilateral" else conference_archive


def test_positions_follow_chain():
    R = RecordType
    recs = [codec.ArchiveRecord(t, b"") for t in (R.INIT, R.TSA, R.INTERVAL, R.INTERVAL, R.FINAL, R.TSA, R.INIT, R.TSA, R.INTERVAL)]
    assert attacks.positions(recs) == [0, 0, 1, 2, 3, 3, 4, 4, 5]


@pytest.mark.parametrize("name", LOCALIZED)
@pytest.mark.parametrize("seed", range(4))
def test_attack_detected_at_location(archive, trust, name, seed):
    result = attacks.apply(name, archive, seed)
    assert result.data != archive
    report = audit(result.data, trust)
    assert report.overall is Overall.FAILED
    assert report.failure_location == result.location, result.description


def test_attacks_deterministic(small_archive):
    for name in attacks.ATTACKS:
        assert attacks.apply(name, small_archive, 5) == attacks.apply(name, small_archive, 5)


@pytest.mark.parametrize("count", [0, 1, 4, 10])
def test_truncation_verifies_as_prefix(small_archive, trust, count):
    result = attacks.truncate(small_archive, 0, count=count)
    report = audit(result.data, trust)
    assert report.overall is Overall.UNTERMINATED
    assert report.validated == 10 - count


def test_truncated_conference_unterminated(conference_archive, trust):
    report = audit(attacks.truncate(conference_archive, 1).data, trust)
    assert report.overall is Overall.UNTERMINATED


def test_resubmission_caught_by_replay_window(small_archive, trust):
    nonces = NonceRegistry()
    assert audit(small_archive, trust, AuditOptions(nonces=nonces)).overall is Overall.VERIFIED
    result = attacks.replay_splice(small_archive, 0)
    report = audit(result.data, trust, AuditOptions(nonces=nonces))
    assert report.verdict(Check.REPLAY_WINDOW) is Verdict.FAIL
    assert report.failure_location == result.location == 0


def test_splice_from_other_session(small_archive, keys, trust):
    donor = run_bilateral(small(seed=77), keys).archive_bytes()
    result = attacks.replay_splice(small_archive, 0, donor=donor, link=3)
    assert result.location == 4
    report = audit(result.data, trust)
    assert report.overall is Overall.FAILED and report.failure_location == 4
    assert report.validated == 3


def test_unknown_attack(small_archive):
    with pytest.raises(attacks.UnknownAttack):
        attacks.apply("shuffle", small_archive, 0)


@settings(max_examples=150, deadline=None)
@given(st.data())
def test_random_signed_bit_never_verifies(small_archive, trust, data):
    spans = codec.signed_spans(small_archive)
    start, end, position = data.draw(st.sampled_from(spans))
    offset = data.draw(st.integers(start, end - 1))
    bit = data.draw(st.integers(0, 7))
    result = attacks.bit_flip(small_archive, 0, offset=offset, bit=bit)
    report = audit(result.data, trust)
    assert report.overall is Overall.FAILED
    assert report.failure_location == position == result.location
