"""Hashing, signatures, seeded key material and a local timestamp authority.

Signatures are produced by a pluggable scheme. The default is RSA-2048 with
PSS padding and a zero-length salt, which keeps signatures deterministic so
that a fixed seed reproduces an archive byte for byte. Ed25519 is available
as the alternative scheme.
"""

from __future__ import annotations

import datetime
import functools
import hashlib
import random
import struct
from dataclasses import dataclass, field
from math import gcd
from pathlib import Path
from typing import Callable, Optional

import gmpy2
from cryptography import x509
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ed25519, padding, rsa
from cryptography.x509.oid import NameOID

from vsig.model import SecurityValue

DIGEST_SIZE = 32
T1 = 1
T2 = 2
AUTHORITY_NAMES = {T1: "T1", T2: "T2"}
DEFAULT_EPOCH_MS = 1_767_225_600_000  # 2026-01-01T00:00:00Z

_NOT_BEFORE = datetime.datetime(2020, 1, 1, tzinfo=datetime.timezone.utc)
_NOT_AFTER = datetime.datetime(2045, 1, 1, tzinfo=datetime.timezone.utc)


class SigningUnavailable(Exception):
    """The identity carries no private key."""


class TimestampUnavailable(Exception):
    """The timestamp authority could not issue a token."""


class CertificateError(Exception):
    pass


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


# -- signature schemes ------------------------------------------------------


class SignatureScheme:
    algorithm_id: int = 0
    name: str = ""

    def generate(self, rng: random.Random):
        raise NotImplementedError

    def sign(self, private_key, message: bytes) -> bytes:
        raise NotImplementedError

    def verify(self, public_key, message: bytes, signature: bytes) -> None:
        """Raise InvalidSignature when the signature does not verify."""
        raise NotImplementedError

    def cert_hash(self):
        return hashes.SHA256()


class RsaPss(SignatureScheme):
    algorithm_id = 1
    name = "rsa-pss"
    bits = 2048
    _padding = padding.PSS(mgf=padding.MGF1(hashes.SHA256()), salt_length=0)

    def generate(self, rng: random.Random):
        e = 65537
        half = self.bits // 2
        while True:
            p = _seeded_prime(rng, half, e)
            q = _seeded_prime(rng, half, e)
            if p != q and (p * q).bit_length() == self.bits:
                break
        n = p * q
        d = pow(e, -1, (p - 1) * (q - 1))
        numbers = rsa.RSAPrivateNumbers(
            p=p,
            q=q,
            d=d,
            dmp1=rsa.rsa_crt_dmp1(d, p),
            dmq1=rsa.rsa_crt_dmq1(d, q),
            iqmp=rsa.rsa_crt_iqmp(p, q),
            public_numbers=rsa.RSAPublicNumbers(e, n),
        )
        return numbers.private_key()

    def sign(self, private_key, message):
        return private_key.sign(message, self._padding, hashes.SHA256())

    def verify(self, public_key, message, signature):
        if not isinstance(public_key, rsa.RSAPublicKey):
            raise InvalidSignature("key type does not match scheme")
        public_key.verify(signature, message, self._padding, hashes.SHA256())


class Ed25519(SignatureScheme):
    algorithm_id = 2
    name = "ed25519"

    def generate(self, rng: random.Random):
        return ed25519.Ed25519PrivateKey.from_private_bytes(rng.randbytes(32))

    def sign(self, private_key, message):
        return private_key.sign(message)

    def verify(self, public_key, message, signature):
        if not isinstance(public_key, ed25519.Ed25519PublicKey):
            raise InvalidSignature("key type does not match scheme")
        public_key.verify(signature, message)

    def cert_hash(self):
        return None


SCHEMES: dict[int, SignatureScheme] = {s.algorithm_id: s for s in (RsaPss(), Ed25519())}
SCHEME_BY_NAME = {s.name: s for s in SCHEMES.values()}
DEFAULT_SCHEME = SCHEMES[RsaPss.algorithm_id]


def scheme_for_key(public_key) -> SignatureScheme:
    if isinstance(public_key, ed25519.Ed25519PublicKey):
        return SCHEMES[Ed25519.algorithm_id]
    return DEFAULT_SCHEME


def _seeded_prime(rng: random.Random, bits: int, e: int) -> int:
    while True:
        cand = int.from_bytes(rng.randbytes(bits // 8), "big")
        cand |= (3 << (bits - 2)) | 1
        p = int(gmpy2.next_prime(cand))
        if p.bit_length() == bits and gcd(e, p - 1) == 1:
            return p


def _rng(seed: int, label: str) -> random.Random:
    material = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return random.Random(int.from_bytes(material, "big"))


# -- identities -------------------------------------------------------------


@dataclass(frozen=True)
class SignerIdentity:
    participant_id: int
    public_key: object
    cert_chain: tuple[bytes, ...] = ()
    private_key: Optional[object] = field(default=None, repr=False)
    scheme: SignatureScheme = DEFAULT_SCHEME

    def public_only(self) -> "SignerIdentity":
        return SignerIdentity(self.participant_id, self.public_key, self.cert_chain, None, self.scheme)


@dataclass(frozen=True)
class Verification:
    ok: bool
    reason: str = ""

    def __bool__(self):
        return self.ok


def sign(identity: SignerIdentity, message: bytes, chain_index=None) -> SecurityValue:
    if identity.private_key is None:
        raise SigningUnavailable(f"participant {identity.participant_id} has no private key")
    signature = identity.scheme.sign(identity.private_key, message)
    return SecurityValue(chain_index, identity.participant_id, signature, digest(message))


def verify(public_key, message: bytes, signature: bytes, scheme: SignatureScheme = DEFAULT_SCHEME) -> Verification:
    try:
        scheme.verify(public_key, message, signature)
    except InvalidSignature:
        return Verification(False, "signature mismatch")
    except (ValueError, TypeError) as exc:
        return Verification(False, f"malformed key or signature: {exc}")
    return Verification(True)


# -- timestamps -------------------------------------------------------------


@dataclass(frozen=True)
class TimestampToken:
    authority: int
    asserted_time: int
    covered_digest: bytes
    signature: bytes = b""
    algorithm_id: int = DEFAULT_SCHEME.algorithm_id

    def signed_bytes(self) -> bytes:
        return struct.pack(">BQ", self.authority, self.asserted_time) + self.covered_digest


class TimestampAuthority:
    """A local TSA with an injectable wall clock (milliseconds)."""

    def __init__(self, authority: int, identity: SignerIdentity, clock: Optional[Callable[[], Optional[int]]] = None):
        self.authority = authority
        self.identity = identity
        self.clock = clock
        self.available = True

    def timestamp(self, covered_digest: bytes) -> TimestampToken:
        if not self.available or self.clock is None:
            raise TimestampUnavailable(f"{AUTHORITY_NAMES.get(self.authority, self.authority)} offline")
        now = self.clock()
        if now is None:
            raise TimestampUnavailable("authority clock unavailable")
        token = TimestampToken(self.authority, int(now), covered_digest, algorithm_id=self.identity.scheme.algorithm_id)
        sig = self.identity.scheme.sign(self.identity.private_key, token.signed_bytes())
        return TimestampToken(token.authority, token.asserted_time, covered_digest, sig, token.algorithm_id)


def verify_token(token: TimestampToken, public_key) -> Verification:
    scheme = SCHEMES.get(token.algorithm_id)
    if scheme is None:
        return Verification(False, f"unknown algorithm {token.algorithm_id}")
    return verify(public_key, token.signed_bytes(), token.signature, scheme)


# -- certificates and key rings --------------------------------------------


def _name(common_name: str) -> x509.Name:
    return x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, common_name)])


def _certificate(subject: str, public_key, issuer: str, issuer_key, scheme: SignatureScheme, serial: int, ca: bool) -> bytes:
    builder = (
        x509.CertificateBuilder()
        .subject_name(_name(subject))
        .issuer_name(_name(issuer))
        .public_key(public_key)
        .serial_number(serial)
        .not_valid_before(_NOT_BEFORE)
        .not_valid_after(_NOT_AFTER)
        .add_extension(x509.BasicConstraints(ca=ca, path_length=None), critical=True)
    )
    cert = builder.sign(issuer_key, scheme.cert_hash())
    return cert.public_bytes(serialization.Encoding.DER)


@functools.lru_cache(maxsize=256)
def _load_cert(der: bytes):
    return x509.load_der_x509_certificate(der)


@functools.lru_cache(maxsize=256)
def _check_issued(leaf_der: bytes, root_der: bytes) -> str:
    try:
        leaf = _load_cert(leaf_der)
        root = _load_cert(root_der)
        leaf.verify_directly_issued_by(root)
    except (InvalidSignature, ValueError, TypeError) as exc:
        return f"certificate not issued by trust root: {exc or type(exc).__name__}"
    return ""


@dataclass
class TrustStore:
    root_cert: bytes
    tsa_keys: dict[int, object]

    def validate_chain(self, chain: tuple[bytes, ...]):
        """Return the leaf public key if the chain leads to the root."""
        if not chain:
            raise CertificateError("empty certificate chain")
        issuer = self.root_cert
        for der in reversed(chain):
            problem = _check_issued(der, issuer)
            if problem:
                raise CertificateError(problem)
            issuer = der
        return _load_cert(chain[0]).public_key()


@dataclass
class KeyRing:
    """All key material for a run: a test root, per-participant identities
    and the two timestamp authorities."""

    root_key: object
    root_cert: bytes
    identities: dict[int, SignerIdentity]
    tsa_identities: dict[int, SignerIdentity]
    scheme: SignatureScheme = DEFAULT_SCHEME

    @classmethod
    def generate(cls, seed: int, participants: int = 2, scheme: SignatureScheme = DEFAULT_SCHEME) -> "KeyRing":
        root_key = scheme.generate(_rng(seed, "root"))
        root_cert = _certificate("vsig test root", root_key.public_key(), "vsig test root", root_key, scheme, 1, True)
        ring = cls(root_key, root_cert, {}, {}, scheme)
        for pid in range(participants):
            ring.add_participant(pid, seed)
        for authority in (T1, T2):
            key = scheme.generate(_rng(seed, f"tsa-{authority}"))
            name = f"vsig {AUTHORITY_NAMES[authority]}"
            cert = _certificate(name, key.public_key(), "vsig test root", root_key, scheme, 1000 + authority, False)
            ring.tsa_identities[authority] = SignerIdentity(authority, key.public_key(), (cert,), key, scheme)
        return ring

    def add_participant(self, pid: int, seed: int) -> SignerIdentity:
        key = self.scheme.generate(_rng(seed, f"participant-{pid}"))
        cert = _certificate(f"participant {pid}", key.public_key(), "vsig test root", self.root_key, self.scheme, 100 + pid, False)
        identity = SignerIdentity(pid, key.public_key(), (cert,), key, self.scheme)
        self.identities[pid] = identity
        return identity

    def trust_store(self) -> TrustStore:
        return TrustStore(self.root_cert, {a: i.public_key for a, i in self.tsa_identities.items()})

    def authority(self, authority: int, clock=None) -> TimestampAuthority:
        return TimestampAuthority(authority, self.tsa_identities[authority], clock)

    def save(self, directory: Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "scheme").write_text(self.scheme.name + "\n")
        _write_pair(directory / "root", self.root_key, self.root_cert)
        for pid, ident in self.identities.items():
            _write_pair(directory / f"participant-{pid}", ident.private_key, ident.cert_chain[0])
        for authority, ident in self.tsa_identities.items():
            _write_pair(directory / f"tsa-{AUTHORITY_NAMES[authority]}", ident.private_key, ident.cert_chain[0])

    @classmethod
    def load(cls, directory: Path) -> "KeyRing":
        directory = Path(directory)
        scheme_file = directory / "scheme"
        scheme = SCHEME_BY_NAME[scheme_file.read_text().strip()] if scheme_file.exists() else DEFAULT_SCHEME
        root_key, root_cert = _read_pair(directory / "root")
        ring = cls(root_key, root_cert, {}, {}, scheme)
        for key_file in sorted(directory.glob("participant-*.key")):
            pid = int(key_file.stem.split("-", 1)[1])
            key, cert = _read_pair(directory / key_file.stem)
            ring.identities[pid] = SignerIdentity(pid, key.public_key(), (cert,), key, scheme)
        for authority, name in AUTHORITY_NAMES.items():
            key, cert = _read_pair(directory / f"tsa-{name}")
            ring.tsa_identities[authority] = SignerIdentity(authority, key.public_key(), (cert,), key, scheme)
        return ring


def _write_pair(stem: Path, key, cert_der: bytes) -> None:
    key_pem = key.private_bytes(serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8, serialization.NoEncryption())
    stem.with_suffix(".key").write_bytes(key_pem)
    stem.with_suffix(".pem").write_bytes(_load_cert(cert_der).public_bytes(serialization.Encoding.PEM))


def _read_pair(stem: Path):
    key = serialization.load_pem_private_key(stem.with_suffix(".key").read_bytes(), password=None)
    cert = x509.load_pem_x509_certificate(stem.with_suffix(".pem").read_bytes())
    return key, cert.public_bytes(serialization.Encoding.DER)


def load_trust_store(directory: Path) -> TrustStore:
    """Trust anchors only: the root certificate and the TSA certificates."""
    directory = Path(directory)
    root = x509.load_pem_x509_certificate((directory / "root.pem").read_bytes())
    root_der = root.public_bytes(serialization.Encoding.DER)
    keys = {}
    for authority, name in AUTHORITY_NAMES.items():
        cert = x509.load_pem_x509_certificate((directory / f"tsa-{name}.pem").read_bytes())
        keys[authority] = cert.public_key()
    return TrustStore(root_der, keys)
