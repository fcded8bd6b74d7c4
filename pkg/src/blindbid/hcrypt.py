"""Additively homomorphic symmetric cipher and wire-crypto envelopes.

The cipher replaces the xor of a stream cipher with addition modulo a
power of two: ``c = (m + k) mod M``.  Adding two ciphertexts therefore
adds their plaintexts, provided the sum stays inside the signed headroom
``|m| < M/2``.  Keystreams are derived deterministically from a 32-byte
master secret and a structured label, so both endpoints of the protocol
can re-derive the key for any profile slot from public identifiers alone.

On top of the cipher this module provides the two envelopes used on the
wire: an anonymous-sender sealed box (X25519 + ChaCha20-Poly1305) for
shipping per-request session keys to a retargeter, and a plain AEAD for
the session-keyed payloads themselves.

Everything here is a pure function of its inputs; there is no shared
mutable state and all operations are safe to call concurrently.
"""

from __future__ import annotations

import hashlib
import secrets
import struct
from base64 import b64decode, b64encode
from dataclasses import dataclass
from functools import lru_cache

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF


class CipherError(Exception):
    """Base class for cipher and envelope failures."""


class MagnitudeError(CipherError):
    """Plaintext magnitude exceeds the signed headroom of the modulus."""


class ModulusMismatchError(CipherError):
    """Ciphertexts under different moduli cannot be combined."""


class LabelError(CipherError):
    """Malformed keystream derivation label."""


class OpenError(CipherError):
    """Authenticated decryption failed (tamper, wrong key, bad context)."""


# ---------------------------------------------------------------------------
# Modulus and ciphertext values
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Modulus:
    """A power-of-two modulus for the additive cipher.

    Production paths use 2**64 so ciphertext addition is native wrapping
    word arithmetic; tests use small powers of two for exhaustive checks.
    """

    M: int

    def __post_init__(self):
        if self.M < 2 or self.M & (self.M - 1):
            raise ValueError(f"modulus must be a power of two >= 2, got {self.M}")

    @property
    def half(self) -> int:
        return self.M >> 1


#: Production modulus: one 64-bit residue per ciphertext.
M64 = Modulus(1 << 64)


@dataclass(frozen=True)
class Ciphertext:
    """One residue in [0, M) housing an encrypted fixed-point value."""

    value: int
    modulus: Modulus = M64

    def __post_init__(self):
        if not 0 <= self.value < self.modulus.M:
            raise ValueError(f"ciphertext {self.value} outside [0, {self.modulus.M})")


def enc(m: int, k: int, modulus: Modulus = M64) -> Ciphertext:
    """Encrypt signed integer ``m`` under keystream ``k``.

    ``m`` is embedded as its residue mod M (two's-complement style), so
    negative plaintexts are supported as long as ``|m| < M/2``.
    """
    if abs(m) >= modulus.half:
        raise MagnitudeError(f"|{m}| >= M/2 = {modulus.half}")
    return Ciphertext((m + k) % modulus.M, modulus)


def dec(ct: Ciphertext, k: int) -> int:
    """Decrypt to a signed integer in [-M/2, M/2)."""
    r = (ct.value - k) % ct.modulus.M
    return r - ct.modulus.M if r >= ct.modulus.half else r


def add_ct(c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
    """Homomorphic addition; decrypts under k1+k2 to m1+m2 within headroom."""
    if c1.modulus != c2.modulus:
        raise ModulusMismatchError(f"{c1.modulus} != {c2.modulus}")
    return Ciphertext((c1.value + c2.value) % c1.modulus.M, c1.modulus)


def ct_to_bytes(ct: Ciphertext) -> bytes:
    """8-byte big-endian form (production modulus only)."""
    if ct.modulus != M64:
        raise ValueError("only 2**64 ciphertexts have a wire form")
    return ct.value.to_bytes(8, "big")


def ct_from_bytes(raw: bytes) -> Ciphertext:
    if len(raw) != 8:
        raise ValueError(f"expected 8 bytes, got {len(raw)}")
    return Ciphertext(int.from_bytes(raw, "big"), M64)


def ct_to_b64(ct: Ciphertext) -> str:
    return b64encode(ct_to_bytes(ct)).decode("ascii")


def ct_from_b64(text: str) -> Ciphertext:
    return ct_from_bytes(b64decode(text.encode("ascii"), validate=True))


# ---------------------------------------------------------------------------
# Keystream derivation
# ---------------------------------------------------------------------------

KIND_FACTOR = 0x01
KIND_PIS = 0x02
KIND_BIDKEY = 0x03
KIND_COEFF = 0x04

_KIND_ARITY = {KIND_FACTOR: 2, KIND_PIS: 0, KIND_BIDKEY: 0, KIND_COEFF: 4}
_SEP = b"\x1f"


class MasterSecret:
    """32 opaque bytes held only by a retargeter and its ranking service.

    Deliberately repr-opaque; never serialize this into a wire message.
    """

    __slots__ = ("key",)

    def __init__(self, key: bytes):
        if len(key) != 32:
            raise ValueError("master secret must be exactly 32 bytes")
        self.key = key

    @classmethod
    def generate(cls) -> "MasterSecret":
        return cls(secrets.token_bytes(32))

    def __repr__(self):
        return "MasterSecret(<32 bytes>)"

    def __eq__(self, other):
        return isinstance(other, MasterSecret) and self.key == other.key


@dataclass(frozen=True)
class KeyLabel:
    """Structured derivation label: product id, slot kind, slot indices."""

    id_P: str
    kind: int
    indices: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in _KIND_ARITY:
            raise LabelError(f"unknown label kind {self.kind:#x}")
        if len(self.indices) != _KIND_ARITY[self.kind]:
            raise LabelError(
                f"kind {self.kind:#x} takes {_KIND_ARITY[self.kind]} indices, "
                f"got {len(self.indices)}"
            )
        if any(i < 0 or i > 0xFFFFFFFF for i in self.indices):
            raise LabelError(f"indices out of 32-bit range: {self.indices}")


def factor_label(id_P: str, i: int, j: int) -> KeyLabel:
    """Key slot for impact factor value ``j`` of attribute ``i`` (0-based)."""
    return KeyLabel(id_P, KIND_FACTOR, (i, j))


def pis_label(id_P: str) -> KeyLabel:
    """Key slot for the product's initial-score ciphertext."""
    return KeyLabel(id_P, KIND_PIS)


def bidkey_label(id_P: str) -> KeyLabel:
    """Key slot for the re-keyed score returned by the ranking service."""
    return KeyLabel(id_P, KIND_BIDKEY)


def coeff_label(id_P: str, i: int, j: int, a: int, b: int) -> KeyLabel:
    """Key slot for coefficient table (i,j) at value indices (a,b)."""
    return KeyLabel(id_P, KIND_COEFF, (i, j, a, b))


@lru_cache(maxsize=1 << 21)
def _stream64(key: bytes, id_P: str, kind: int, indices: tuple[int, ...]) -> int:
    """Raw 64-bit keystream for one slot (memoized — labels repeat heavily).

    The cache is what lets a ranking service decrypt scores for a product
    catalog at rate: the same (product, slot) keys recur across every request
    that mentions the product.
    """
    data = b"".join(
        (
            id_P.encode("utf-8"),
            _SEP,
            key,
            _SEP,
            bytes([kind]),
            struct.pack(f">{len(indices)}I", *indices),
        )
    )
    return int.from_bytes(hashlib.sha256(data).digest()[:8], "big")


def derive_keystream(master: MasterSecret, label: KeyLabel, modulus: Modulus = M64) -> int:
    """Deterministic keystream for one cipher slot.

    Canonical encoding: UTF-8(id_P) | 0x1F | 32-byte secret | 0x1F | kind
    byte | indices as 4-byte big-endian each.  The keystream is the first
    8 bytes of SHA-256 over that encoding, read big-endian (reduced mod M
    for sub-64-bit test moduli).
    """
    return _stream64(master.key, label.id_P, label.kind, label.indices) % modulus.M


def score_keystream(
    master: MasterSecret,
    id_P: str,
    u: tuple[int, ...],
    pairs: tuple[tuple[int, int], ...] = (),
    modulus: Modulus = M64,
) -> int:
    """The key a client score ciphertext decrypts under.

    k_PIS plus one factor keystream per attribute at the user's value, plus
    one coefficient keystream per declared pair — the exact counterpart of
    the homomorphic sum the client computed.
    """
    key = master.key
    k = _stream64(key, id_P, KIND_PIS, ())
    for i, value in enumerate(u):
        k += _stream64(key, id_P, KIND_FACTOR, (i, value))
    for i, j in pairs:
        k += _stream64(key, id_P, KIND_COEFF, (i, j, u[i], u[j]))
    return k % modulus.M


# ---------------------------------------------------------------------------
# Session keys, sealed box, AEAD
# ---------------------------------------------------------------------------

SESSION_KEY_BYTES = 32

#: Associated-data contexts allowed on session-keyed AEAD payloads.
CONTEXT_PRODUCT_PAYLOAD = b"product-payload"
CONTEXT_AD_CONTENT = b"ad-content"
_CONTEXTS = frozenset((CONTEXT_PRODUCT_PAYLOAD, CONTEXT_AD_CONTENT))

_NONCE_BYTES = 12


def new_session_key() -> bytes:
    """Fresh 32-byte session key, one per (client, retargeter, ad request)."""
    return secrets.token_bytes(SESSION_KEY_BYTES)


def generate_keypair() -> tuple[bytes, bytes]:
    """X25519 (private, public) raw 32-byte pair for session-key sealing."""
    priv = X25519PrivateKey.generate()
    return (
        priv.private_bytes_raw(),
        priv.public_key().public_bytes_raw(),
    )


def _sealed_box_key(shared: bytes, epk: bytes, rpk: bytes) -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(),
        length=32,
        salt=None,
        info=b"sealed-session-key" + epk + rpk,
    ).derive(shared)


def seal_session_key(session_key: bytes, recipient_pub: bytes) -> bytes:
    """Seal a session key to a recipient public key (anonymous sender).

    Fresh ephemeral randomness per call, so two seals of the same key
    yield distinct blobs.  Layout: epk(32) | nonce(12) | ct.
    """
    if len(session_key) != SESSION_KEY_BYTES:
        raise ValueError("session key must be 32 bytes")
    eph = X25519PrivateKey.generate()
    epk = eph.public_key().public_bytes_raw()
    shared = eph.exchange(X25519PublicKey.from_public_bytes(recipient_pub))
    key = _sealed_box_key(shared, epk, recipient_pub)
    nonce = secrets.token_bytes(_NONCE_BYTES)
    ct = ChaCha20Poly1305(key).encrypt(nonce, session_key, epk)
    return epk + nonce + ct


def open_session_key(blob: bytes, recipient_priv: bytes) -> bytes:
    """Open a sealed session key; raises OpenError on tamper or wrong key."""
    if len(blob) < 32 + _NONCE_BYTES + 16:
        raise OpenError("sealed blob too short")
    epk, nonce, ct = blob[:32], blob[32 : 32 + _NONCE_BYTES], blob[32 + _NONCE_BYTES :]
    priv = X25519PrivateKey.from_private_bytes(recipient_priv)
    rpk = priv.public_key().public_bytes_raw()
    shared = priv.exchange(X25519PublicKey.from_public_bytes(epk))
    key = _sealed_box_key(shared, epk, rpk)
    try:
        return ChaCha20Poly1305(key).decrypt(nonce, ct, epk)
    except InvalidTag as exc:
        raise OpenError("sealed session key failed to open") from exc


def aead_seal(payload: bytes, session_key: bytes, context: bytes) -> bytes:
    """ChaCha20-Poly1305 with random 96-bit nonce prefixed to the ciphertext.

    ``context`` must be one of the canonical contexts and is bound as
    associated data, so a payload sealed for one purpose cannot be opened
    as another.
    """
    if context not in _CONTEXTS:
        raise ValueError(f"unknown AEAD context {context!r}")
    nonce = secrets.token_bytes(_NONCE_BYTES)
    return nonce + ChaCha20Poly1305(session_key).encrypt(nonce, payload, context)


def aead_open(blob: bytes, session_key: bytes, context: bytes) -> bytes:
    if context not in _CONTEXTS:
        raise ValueError(f"unknown AEAD context {context!r}")
    if len(blob) < _NONCE_BYTES + 16:
        raise OpenError("AEAD blob too short")
    nonce, ct = blob[:_NONCE_BYTES], blob[_NONCE_BYTES:]
    try:
        return ChaCha20Poly1305(session_key).decrypt(nonce, ct, context)
    except InvalidTag as exc:
        raise OpenError("AEAD payload failed to open") from exc
