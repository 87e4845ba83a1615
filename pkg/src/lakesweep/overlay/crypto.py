"""Identity keys, signed ephemeral key agreement, and per-link AEAD."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from ..errors import SecurityError

_RAW = dict(encoding=serialization.Encoding.Raw, format=serialization.PublicFormat.Raw)


def fingerprint(public_key: bytes) -> bytes:
    return hashlib.sha256(public_key).digest()


class Identity:
    """Long-term Ed25519 signing key of a peer."""

    def __init__(self, key: Ed25519PrivateKey | None = None):
        self._key = key or Ed25519PrivateKey.generate()
        self.public_key = self._key.public_key().public_bytes(**_RAW)
        self.fingerprint = fingerprint(self.public_key)

    @classmethod
    def from_seed(cls, seed: bytes) -> "Identity":
        return cls(Ed25519PrivateKey.from_private_bytes(hashlib.sha256(seed).digest()))

    @classmethod
    def load_or_create(cls, path) -> "Identity":
        """Keep a peer's key across restarts so the rendezvous accepts it back."""
        if os.path.exists(path):
            with open(path, "rb") as fh:
                return cls(Ed25519PrivateKey.from_private_bytes(fh.read()))
        ident = cls()
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
        with os.fdopen(fd, "wb") as fh:
            fh.write(ident.private_bytes())
        return ident

    def private_bytes(self) -> bytes:
        return self._key.private_bytes(
            serialization.Encoding.Raw, serialization.PrivateFormat.Raw, serialization.NoEncryption()
        )

    def sign(self, data: bytes) -> bytes:
        return self._key.sign(data)


def verify(public_key: bytes, expected_fingerprint: bytes, signature: bytes, data: bytes) -> None:
    if fingerprint(public_key) != expected_fingerprint:
        raise SecurityError("public key does not match the pinned fingerprint")
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, data)
    except (InvalidSignature, ValueError):
        raise SecurityError("handshake signature rejected") from None


def transcript(role: bytes, link_id: bytes, eph_pub: bytes, sender: str, receiver: str) -> bytes:
    return b"|".join([b"lakesweep-hs1", role, link_id, eph_pub, sender.encode(), receiver.encode()])


class Ephemeral:
    def __init__(self) -> None:
        self._key = X25519PrivateKey.generate()
        self.public = self._key.public_key().public_bytes(**_RAW)

    def shared(self, peer_public: bytes) -> bytes:
        try:
            return self._key.exchange(X25519PublicKey.from_public_bytes(peer_public))
        except ValueError:
            raise SecurityError("bad ephemeral key") from None


@dataclass
class SessionKeys:
    """Directional keys: ``send`` for our frames, ``recv`` for the peer's."""

    send: ChaCha20Poly1305
    recv: ChaCha20Poly1305

    @classmethod
    def derive(cls, shared: bytes, link_id: bytes, initiator: str, responder: str, we_initiated: bool):
        okm = HKDF(
            algorithm=hashes.SHA256(),
            length=64,
            salt=link_id,
            info=b"lakesweep link|" + initiator.encode() + b"|" + responder.encode(),
        ).derive(shared)
        i2r, r2i = ChaCha20Poly1305(okm[:32]), ChaCha20Poly1305(okm[32:])
        return cls(i2r, r2i) if we_initiated else cls(r2i, i2r)

    def seal(self, plaintext: bytes, aad: bytes) -> tuple[bytes, bytes]:
        nonce = os.urandom(12)
        return nonce, self.send.encrypt(nonce, plaintext, aad)

    def open(self, nonce: bytes, sealed: bytes, aad: bytes) -> bytes | None:
        try:
            return self.recv.decrypt(nonce, sealed, aad)
        except InvalidTag:
            return None
