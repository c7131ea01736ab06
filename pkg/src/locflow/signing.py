"""Project code-signing keys.

Application files are signed offline with the project's private key and
checked by the server at submission and by every worker before execution.
The signature covers the SHA-256 digest of the file, so large binaries are
hashed once and the signature stays 64 bytes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

SCHEME = "ed25519-sha256"


@dataclass(frozen=True)
class Keypair:
    private: Ed25519PrivateKey

    @property
    def public_bytes(self) -> bytes:
        return public_key_bytes(self.private.public_key())

    def sign(self, data: bytes) -> bytes:
        return self.private.sign(hashlib.sha256(data).digest())


def generate() -> Keypair:
    return Keypair(Ed25519PrivateKey.generate())


def public_key_bytes(key: Ed25519PublicKey) -> bytes:
    return key.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)


def save_keypair(kp: Keypair, path: str | Path) -> Path:
    """Write the private key as PEM at ``path`` and the raw public key, hex encoded, at ``path.pub``."""
    path = Path(path)
    pem = kp.private.private_bytes(serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8,
                                   serialization.NoEncryption())
    path.write_bytes(pem)
    path.chmod(0o600)
    pub = path.with_name(path.name + ".pub")
    pub.write_text(kp.public_bytes.hex() + "\n")
    return pub


def load_keypair(path: str | Path) -> Keypair:
    key = serialization.load_pem_private_key(Path(path).read_bytes(), password=None)
    if not isinstance(key, Ed25519PrivateKey):
        raise ValueError(f"{path} does not hold an Ed25519 private key")
    return Keypair(key)


def load_public_key(path: str | Path) -> bytes:
    """Accept either a ``.pub`` hex file or the private key PEM itself."""
    raw = Path(path).read_bytes()
    if raw.startswith(b"-----BEGIN"):
        return load_keypair(path).public_bytes
    return bytes.fromhex(raw.decode("ascii").strip())


def verify_signature(data: bytes, signature: bytes, public_key: bytes) -> bool:
    """True iff ``signature`` signs the SHA-256 digest of ``data`` under ``public_key``."""
    try:
        key = Ed25519PublicKey.from_public_bytes(bytes(public_key))
        key.verify(bytes(signature), hashlib.sha256(data).digest())
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True
