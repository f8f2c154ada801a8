"""Software TPM: PCR bank, identity keys, quotes, credential activation.

The register model follows the standard extend discipline: a register never
takes an arbitrary value, it only moves by ``new = SHA256(old || measurement)``
from an all-zeros reset state.  Quotes are Ed25519 signatures by the
attestation identity key (AIK) over ``nonce || composite``, where the
composite hashes the selected register values in ascending index order.
Credential activation proves joint possession of the endorsement key (EK)
and the AIK: a secret sealed to the EK public key can only be recovered on
the device holding the EK private half.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from . import crypto
from .crypto import Digest
from .errors import IDENTITY, RANGE, ServiceError

PCR_COUNT = 24

# conventional register assignment used by the boot chain
PCR_PLATFORM = 0   # platform firmware (POST, stock network boot ROM)
PCR_BOOT = 4       # downloaded boot stages and the tenant kernel
PCR_RUNTIME = 10   # runtime file measurements


class PcrBank:
    """24 SHA-256 platform configuration registers."""

    def __init__(self):
        self._registers = [bytes(crypto.DIGEST_SIZE) for _ in range(PCR_COUNT)]

    def read(self, index: int) -> Digest:
        self._check_index(index)
        return self._registers[index]

    def extend(self, index: int, measurement: bytes) -> Digest:
        """Fold a measurement into a register; the only way registers move."""
        self._check_index(index)
        measurement = crypto.ensure_digest(measurement)
        new = crypto.sha256(self._registers[index] + measurement)
        self._registers[index] = new
        return new

    def composite(self, selection: Iterable[int]) -> Digest:
        """Hash of the selected register values in ascending index order."""
        indexes = sorted(set(selection))
        if not indexes:
            raise ServiceError(RANGE, "empty register selection")
        for i in indexes:
            self._check_index(i)
        return crypto.sha256(b"".join(self._registers[i] for i in indexes))

    def values(self) -> list[Digest]:
        return list(self._registers)

    @staticmethod
    def _check_index(index: int):
        if not isinstance(index, int) or not 0 <= index < PCR_COUNT:
            raise ServiceError(RANGE, f"PCR index out of range: {index!r}")


def expected_register(measurements: Sequence[bytes]) -> Digest:
    """Register value after extending the given measurements from reset.

    This is how a verifier derives whitelist values from known-good blobs
    without ever touching a device.
    """
    value = bytes(crypto.DIGEST_SIZE)
    for m in measurements:
        value = crypto.sha256(value + crypto.ensure_digest(m))
    return value


@dataclass
class Quote:
    """Signed register report: signature covers nonce || composite."""

    nonce: bytes
    selection: tuple[int, ...]
    composite: Digest
    signature: bytes
    aik_public: bytes

    def to_wire(self) -> dict:
        return {
            "nonce": self.nonce.hex(),
            "selection": list(self.selection),
            "composite": self.composite.hex(),
            "signature": self.signature.hex(),
            "aik": self.aik_public.hex(),
        }

    @classmethod
    def from_wire(cls, body: dict) -> "Quote":
        try:
            return cls(
                nonce=bytes.fromhex(body["nonce"]),
                selection=tuple(int(i) for i in body["selection"]),
                composite=bytes.fromhex(body["composite"]),
                signature=bytes.fromhex(body["signature"]),
                aik_public=bytes.fromhex(body["aik"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ServiceError("format", f"malformed quote: {exc}")


def verify_quote(quote: Quote, expected_nonce: bytes, expected_composite: Digest) -> bool:
    """Check a quote against an expected nonce and composite.

    Pure function of its inputs; freshness (nonce single-use) is the
    verifier's bookkeeping, not the TPM's.
    """
    if quote.nonce != expected_nonce:
        return False
    if quote.composite != expected_composite:
        return False
    return crypto.verify_signature(
        quote.aik_public, quote.signature, quote.nonce + quote.composite
    )


class Tpm:
    """One TPM device: a PCR bank plus EK and AIK keypairs.

    The EK is fixed at manufacture.  The AIK signs quotes only after a
    registrar has certified it through credential activation.
    """

    def __init__(self, ek_seed: bytes, aik_seed: bytes):
        self.pcrs = PcrBank()
        self._ek = crypto.DecryptionKey(ek_seed)
        self._aik = crypto.SigningKey(aik_seed)
        self.aik_certified = False

    @property
    def ek_public(self) -> bytes:
        return self._ek.public_bytes

    @property
    def aik_public(self) -> bytes:
        return self._aik.public_bytes

    def reset_pcrs(self):
        """Power cycle: registers return to zeros, keys survive."""
        self.pcrs = PcrBank()

    def quote(self, nonce: bytes, selection: Iterable[int]) -> Quote:
        if not self.aik_certified:
            raise ServiceError(IDENTITY, "AIK not certified; refusing to quote")
        indexes = tuple(sorted(set(selection)))
        composite = self.pcrs.composite(indexes)
        signature = self._aik.sign(nonce + composite)
        return Quote(
            nonce=nonce,
            selection=indexes,
            composite=composite,
            signature=signature,
            aik_public=self.aik_public,
        )

    def activate_credential(self, challenge_blob: bytes) -> bytes:
        """Recover a registrar challenge secret sealed to the EK.

        The challenge names an AIK; the secret is released only when that
        name matches this TPM's own AIK, binding the certification to a
        key that actually lives next to this EK.
        """
        try:
            plaintext = crypto.unseal(self._ek, challenge_blob)
        except ValueError:
            raise ServiceError(IDENTITY, "credential activation failed")
        if len(plaintext) <= crypto.DIGEST_SIZE:
            raise ServiceError(IDENTITY, "malformed credential")
        name, secret = plaintext[: crypto.DIGEST_SIZE], plaintext[crypto.DIGEST_SIZE:]
        if name != crypto.sha256(self.aik_public):
            raise ServiceError(IDENTITY, "credential names a different AIK")
        return secret


def make_credential(ek_public: bytes, aik_public: bytes, secret: bytes,
                    rng) -> bytes:
    """Registrar-side challenge: seal (AIK name ‖ secret) to the EK."""
    return crypto.seal(ek_public, crypto.sha256(aik_public) + secret, rng)
