import dataclasses
import hashlib

import pytest
from hypothesis import given, settings, strategies as st

from vsig.crypto import (
    SCHEME_BY_NAME,
    T1,
    T2,
    CertificateError,
    KeyRing,
    SigningUnavailable,
    TimestampUnavailable,
    digest,
    load_trust_store,
    sign,
    verify,
    verify_token,
)

ED25519 = SCHEME_BY_NAME["ed25519"]


def test_digest_empty_vector_matches_hashlib():
    assert digest(b"") == hashlib.sha256(b"").digest()
    assert digest(b"").hex() == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"


def test_digest_deterministic_and_bit_sensitive():
    assert digest(b"interval") == digest(b"interval")
    assert digest(b"interval") != digest(b"intervam")
    assert len(digest(b"x")) == 32


def test_sign_verify_round_trip(keys):
    a = keys.identities[0]
    sv = sign(a, b"hello", 1)
    assert sv.covered_digest == digest(b"hello")
    assert verify(a.public_key, b"hello", sv.signature)


def test_verify_with_other_key_rejects(keys):
    sv = sign(keys.identities[0], b"hello")
    result = verify(keys.identities[1].public_key, b"hello", sv.signature)
    assert not result and result.reason


def test_verify_tampered_message_rejects(keys):
    sv = sign(keys.identities[0], b"hello")
    assert not verify(keys.identities[0].public_key, b"hellp", sv.signature)


def test_verify_malformed_signature_rejects_with_reason(keys):
    result = verify(keys.identities[0].public_key, b"hello", b"\x00" * 3)
    assert not result.ok and result.reason


def test_signing_without_private_key(keys):
    with pytest.raises(SigningUnavailable):
        sign(keys.identities[0].public_only(), b"x")


def test_default_signatures_are_deterministic(keys):
    a = keys.identities[0]
    assert sign(a, b"m").signature == sign(a, b"m").signature


@settings(max_examples=25, deadline=None)
@given(st.binary(max_size=256), st.binary(max_size=256))
def test_signature_binds_message(keys, m1, m2):
    a = keys.identities[0]
    sv = sign(a, m1)
    assert verify(a.public_key, m1, sv.signature)
    if m1 != m2:
        assert not verify(a.public_key, m2, sv.signature)


@settings(max_examples=25, deadline=None)
@given(st.binary(max_size=128), st.binary(max_size=128))
def test_ed25519_scheme_binds_message(m1, m2):
    ring = KeyRing.generate(3, 1, ED25519)
    a = ring.identities[0]
    sv = sign(a, m1)
    assert verify(a.public_key, m1, sv.signature, ED25519)
    if m1 != m2:
        assert not verify(a.public_key, m2, sv.signature, ED25519)


def test_timestamp_token_verifies(keys):
    tsa = keys.authority(T1, lambda: 1234)
    token = tsa.timestamp(digest(b"sig"))
    assert token.asserted_time == 1234
    assert verify_token(token, keys.tsa_identities[T1].public_key)
    assert not verify_token(token, keys.tsa_identities[T2].public_key)


def test_tokens_at_different_times_differ(keys):
    now = [1000]
    tsa = keys.authority(T1, lambda: now[0])
    first = tsa.timestamp(digest(b"s"))
    now[0] = 2000
    second = tsa.timestamp(digest(b"s"))
    assert first != second and first.signature != second.signature


def test_altered_asserted_time_rejected(keys):
    token = keys.authority(T1, lambda: 1000).timestamp(digest(b"s"))
    forged = dataclasses.replace(token, asserted_time=999)
    assert not verify_token(forged, keys.tsa_identities[T1].public_key)


@settings(max_examples=15, deadline=None)
@given(st.binary(min_size=1, max_size=64), st.binary(min_size=1, max_size=64))
def test_tokens_over_distinct_digests_not_interchangeable(keys, a, b):
    tsa = keys.authority(T2, lambda: 5)
    ta, tb = tsa.timestamp(digest(a)), tsa.timestamp(digest(b))
    if a != b:
        swapped = dataclasses.replace(ta, covered_digest=tb.covered_digest)
        assert not verify_token(swapped, keys.tsa_identities[T2].public_key)


def test_offline_authority_raises(keys):
    tsa = keys.authority(T1, lambda: 1)
    tsa.available = False
    with pytest.raises(TimestampUnavailable):
        tsa.timestamp(digest(b"x"))
    with pytest.raises(TimestampUnavailable):
        keys.authority(T1, lambda: None).timestamp(digest(b"x"))


def test_certificate_chain_validates_to_root(keys, trust):
    leaf = trust.validate_chain(keys.identities[2].cert_chain)
    assert leaf.public_numbers() == keys.identities[2].public_key.public_numbers()


def test_foreign_root_rejects_chain(keys):
    other = KeyRing.generate(99, 1).trust_store()
    with pytest.raises(CertificateError):
        other.validate_chain(keys.identities[0].cert_chain)
    with pytest.raises(CertificateError):
        other.validate_chain(())


def test_seeded_generation_is_reproducible():
    a, b = KeyRing.generate(11, 1, ED25519), KeyRing.generate(11, 1, ED25519)
    assert a.root_cert == b.root_cert
    assert a.identities[0].cert_chain == b.identities[0].cert_chain


def test_keyring_save_load(tmp_path, keys):
    keys.save(tmp_path)
    loaded = KeyRing.load(tmp_path)
    assert loaded.root_cert == keys.root_cert
    assert sorted(loaded.identities) == sorted(keys.identities)
    msg = b"persisted"
    assert sign(loaded.identities[1], msg).signature == sign(keys.identities[1], msg).signature
    anchors = load_trust_store(tmp_path)
    assert anchors.root_cert == keys.root_cert
    assert anchors.validate_chain(keys.identities[1].cert_chain)
