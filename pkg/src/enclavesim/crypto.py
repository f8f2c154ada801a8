"""Cryptographic primitives for the emulated datacenter.

Everything here wraps the ``cryptography`` package and ``hashlib``; nothing
is hand-rolled.  Key objects store their raw 32-byte seeds so that worlds
containing them can be deep-copied and serialized, and so that all key
material can be derived from the simulation's seeded RNG (a requirement for
byte-identical traces, and acceptable in an emulator that never protects
real data).

Primitives:

- SHA-256 digests (the only hash in the model).
- Ed25519 signatures (deterministic, >=128-bit security).
- X25519 + HKDF + AES-GCM sealed boxes for encrypt-to-public-key.
- AES-GCM for symmetric authenticated encryption.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.hashes import SHA256
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

DIGEST_SIZE = 32
KEY_SIZE = 32
NONCE_SIZE = 12

# a digest is plain bytes; this alias marks intent in signatures
Digest = bytes


def sha256(data: bytes) -> Digest:
    return hashlib.sha256(data).digest()


def ensure_digest(value: bytes) -> Digest:
    if not isinstance(value, (bytes, bytearray)) or len(value) != DIGEST_SIZE:
        raise ValueError("digest must be exactly 32 bytes")
    return bytes(value)


def hexdigest(value: bytes) -> str:
    """Digests render as lowercase hex on every log and wire surface."""
    return ensure_digest(value).hex()


def _hkdf(secret: bytes, info: bytes) -> bytes:
    return HKDF(algorithm=SHA256(), length=KEY_SIZE, salt=None, info=info).derive(secret)


@dataclass
class SigningKey:
    """Ed25519 keypair stored as a raw seed."""

    seed: bytes

    def __post_init__(self):
        if len(self.seed) != KEY_SIZE:
            raise ValueError("signing key seed must be 32 bytes")

    @property
    def public_bytes(self) -> bytes:
        return (
            Ed25519PrivateKey.from_private_bytes(self.seed)
            .public_key()
            .public_bytes_raw()
        )

    def sign(self, message: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(self.seed).sign(message)


def verify_signature(public_bytes: bytes, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_bytes).verify(signature, message)
        return True
    except (InvalidSignature, ValueError):
        return False


@dataclass
class DecryptionKey:
    """X25519 keypair stored as a raw seed; target of sealed boxes."""

    seed: bytes

    def __post_init__(self):
        if len(self.seed) != KEY_SIZE:
            raise ValueError("decryption key seed must be 32 bytes")

    @property
    def public_bytes(self) -> bytes:
        return (
            X25519PrivateKey.from_private_bytes(self.seed)
            .public_key()
            .public_bytes_raw()
        )


def seal(recipient_public: bytes, plaintext: bytes, rng) -> bytes:
    """Encrypt to a public key: ephemeral X25519 + HKDF + AES-GCM.

    The ephemeral seed and nonce come from the caller's RNG so sealed blobs
    are reproducible under a fixed simulation seed.
    """
    eph = X25519PrivateKey.from_private_bytes(rng.randbytes(KEY_SIZE))
    shared = eph.exchange(X25519PublicKey.from_public_bytes(recipient_public))
    key = _hkdf(shared, b"sealed-box")
    nonce = rng.randbytes(NONCE_SIZE)
    eph_pub = eph.public_key().public_bytes_raw()
    ct = AESGCM(key).encrypt(nonce, plaintext, eph_pub)
    return eph_pub + nonce + ct


def unseal(recipient: DecryptionKey, blob: bytes) -> bytes:
    """Open a sealed box; raises ValueError on any tamper or wrong key."""
    if len(blob) < KEY_SIZE + NONCE_SIZE + 16:
        raise ValueError("sealed blob too short")
    eph_pub, nonce, ct = (
        blob[:KEY_SIZE],
        blob[KEY_SIZE : KEY_SIZE + NONCE_SIZE],
        blob[KEY_SIZE + NONCE_SIZE :],
    )
    priv = X25519PrivateKey.from_private_bytes(recipient.seed)
    shared = priv.exchange(X25519PublicKey.from_public_bytes(eph_pub))
    key = _hkdf(shared, b"sealed-box")
    try:
        return AESGCM(key).decrypt(nonce, ct, eph_pub)
    except InvalidTag as exc:
        raise ValueError("sealed blob failed authentication") from exc


def aead_encrypt(key: bytes, plaintext: bytes, aad: bytes, rng) -> bytes:
    """AES-GCM with an RNG-drawn nonce prepended to the ciphertext."""
    if len(key) != KEY_SIZE:
        raise ValueError("aead key must be 32 bytes")
    nonce = rng.randbytes(NONCE_SIZE)
    return nonce + AESGCM(key).encrypt(nonce, plaintext, aad)


def aead_decrypt(key: bytes, blob: bytes, aad: bytes) -> bytes:
    """Raises ValueError when the key is wrong or the blob was tampered."""
    if len(key) != KEY_SIZE:
        raise ValueError("aead key must be 32 bytes")
    if len(blob) < NONCE_SIZE + 16:
        raise ValueError("ciphertext too short")
    try:
        return AESGCM(key).decrypt(blob[:NONCE_SIZE], blob[NONCE_SIZE:], aad)
    except InvalidTag as exc:
        raise ValueError("ciphertext failed authentication") from exc


def derive_key(secret: bytes, purpose: str) -> bytes:
    """Derive a 32-byte key bound to a purpose label."""
    return _hkdf(secret, purpose.encode())
