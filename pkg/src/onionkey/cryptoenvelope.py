"""Per-fragment public-key encryption.

A fragment is serialized as a fixed 6-byte header (index, total, bit_length;
big-endian uint16 each) followed by its zero-padded payload bytes, then sealed
to the recipient.  The index lives inside the sealed plaintext, so nothing in
the ciphertext says where the fragment sits in the key.

Two schemes sit behind :class:`AsymmetricScheme`:

* ``RsaOaepScheme`` (default, matches the classical-RSA prototype).  Plaintexts
  that fit OAEP are encrypted directly; larger ones use an AES-256-GCM content
  key wrapped with OAEP.
* ``X25519SealedScheme``: ephemeral X25519 + HKDF + AES-GCM.  Faster, and shows
  that a KEM-style scheme slots in without touching protocol code.
"""

from __future__ import annotations

import base64
import os
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa, x25519
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import DecryptionError, KeyFormatError
from .keycore import Fragment, bytes_to_bits

HEADER = struct.Struct(">HHH")

_MODE_DIRECT = 0x01
_MODE_ENVELOPE = 0x02
_MODE_SEALED = 0x03
_NONCE = 12


class AsymmetricScheme(ABC):
    name: str

    @abstractmethod
    def generate_private_key(self) -> Any: ...

    @abstractmethod
    def encrypt(self, public_key: Any, plaintext: bytes) -> bytes: ...

    @abstractmethod
    def decrypt(self, private_key: Any, ciphertext: bytes) -> bytes: ...

    def describe(self) -> str:
        return self.name


class RsaOaepScheme(AsymmetricScheme):
    def __init__(self, key_size: int = 2048):
        self.key_size = key_size
        self.name = f"RSA-{key_size}/OAEP-SHA256"
        self._pad = padding.OAEP(mgf=padding.MGF1(hashes.SHA256()), algorithm=hashes.SHA256(), label=None)

    def max_direct(self, public_key: rsa.RSAPublicKey) -> int:
        # OAEP overhead is 2*hLen + 2
        return public_key.key_size // 8 - 2 * 32 - 2

    def generate_private_key(self) -> rsa.RSAPrivateKey:
        return rsa.generate_private_key(public_exponent=65537, key_size=self.key_size)

    def encrypt(self, public_key: rsa.RSAPublicKey, plaintext: bytes) -> bytes:
        if len(plaintext) <= self.max_direct(public_key):
            return bytes([_MODE_DIRECT]) + public_key.encrypt(plaintext, self._pad)
        content_key = AESGCM.generate_key(bit_length=256)
        nonce = os.urandom(_NONCE)
        wrapped = public_key.encrypt(content_key, self._pad)
        body = AESGCM(content_key).encrypt(nonce, plaintext, wrapped)
        return bytes([_MODE_ENVELOPE]) + wrapped + nonce + body

    def decrypt(self, private_key: rsa.RSAPrivateKey, ciphertext: bytes) -> bytes:
        if not ciphertext:
            raise DecryptionError("empty ciphertext")
        mode, rest = ciphertext[0], ciphertext[1:]
        k = private_key.key_size // 8
        try:
            if mode == _MODE_DIRECT:
                if len(rest) != k:
                    raise DecryptionError("RSA block has the wrong length")
                return private_key.decrypt(rest, self._pad)
            if mode == _MODE_ENVELOPE:
                if len(rest) < k + _NONCE + 16:
                    raise DecryptionError("envelope is truncated")
                wrapped, nonce, body = rest[:k], rest[k:k + _NONCE], rest[k + _NONCE:]
                content_key = private_key.decrypt(wrapped, self._pad)
                return AESGCM(content_key).decrypt(nonce, body, wrapped)
        except (ValueError, InvalidTag) as exc:
            raise DecryptionError(f"{self.name}: {exc.__class__.__name__}") from exc
        raise DecryptionError(f"unknown ciphertext mode {mode:#x}")

    def describe(self) -> str:
        return f"{self.name} (AES-256-GCM envelope above {self.key_size // 8 - 66} B)"


class X25519SealedScheme(AsymmetricScheme):
    name = "X25519-HKDF-SHA256/AES-256-GCM"

    def generate_private_key(self) -> x25519.X25519PrivateKey:
        return x25519.X25519PrivateKey.generate()

    @staticmethod
    def _raw(pub: x25519.X25519PublicKey) -> bytes:
        return pub.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)

    def _key(self, shared: bytes, eph: bytes, recipient: bytes) -> bytes:
        return HKDF(algorithm=hashes.SHA256(), length=32, salt=None,
                    info=b"onionkey sealed fragment" + eph + recipient).derive(shared)

    def encrypt(self, public_key: x25519.X25519PublicKey, plaintext: bytes) -> bytes:
        eph = x25519.X25519PrivateKey.generate()
        eph_raw = self._raw(eph.public_key())
        key = self._key(eph.exchange(public_key), eph_raw, self._raw(public_key))
        nonce = os.urandom(_NONCE)
        return bytes([_MODE_SEALED]) + eph_raw + nonce + AESGCM(key).encrypt(nonce, plaintext, eph_raw)

    def decrypt(self, private_key: x25519.X25519PrivateKey, ciphertext: bytes) -> bytes:
        if len(ciphertext) < 1 + 32 + _NONCE + 16 or ciphertext[0] != _MODE_SEALED:
            raise DecryptionError("sealed box is truncated or has the wrong mode")
        eph_raw, nonce, body = ciphertext[1:33], ciphertext[33:45], ciphertext[45:]
        eph = x25519.X25519PublicKey.from_public_bytes(eph_raw)
        key = self._key(private_key.exchange(eph), eph_raw, self._raw(private_key.public_key()))
        try:
            return AESGCM(key).decrypt(nonce, body, eph_raw)
        except InvalidTag as exc:
            raise DecryptionError(f"{self.name}: authentication failed") from exc


DEFAULT_SCHEME = RsaOaepScheme()


def serialize_public_key(public_key: Any) -> str:
    der = public_key.public_bytes(serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo)
    return base64.b64encode(der).decode("ascii")


def load_public_key(text: str) -> tuple[Any, AsymmetricScheme]:
    """Parse printable public-key text and pick the scheme that matches it."""
    try:
        der = base64.b64decode(text.encode("ascii"), validate=True)
        key = serialization.load_der_public_key(der)
    except Exception as exc:
        raise KeyFormatError(f"cannot parse public key: {exc}") from exc
    if isinstance(key, rsa.RSAPublicKey):
        return key, RsaOaepScheme(key.key_size)
    if isinstance(key, x25519.X25519PublicKey):
        return key, X25519SealedScheme()
    raise KeyFormatError(f"unsupported public key type {type(key).__name__}")


@dataclass(frozen=True)
class RecipientKeyPair:
    private_key: Any
    scheme: AsymmetricScheme

    @classmethod
    def generate(cls, scheme: AsymmetricScheme | None = None) -> "RecipientKeyPair":
        scheme = scheme or DEFAULT_SCHEME
        return cls(scheme.generate_private_key(), scheme)

    @property
    def public_key(self) -> str:
        return serialize_public_key(self.private_key.public_key())


@dataclass(frozen=True)
class EncryptedFragment:
    ciphertext: bytes
    session_tag: str

    def b64(self) -> str:
        return base64.b64encode(self.ciphertext).decode("ascii")

    @classmethod
    def from_b64(cls, text: str, session_tag: str) -> "EncryptedFragment":
        return cls(base64.b64decode(text.encode("ascii"), validate=True), session_tag)


def encode_fragment(frag: Fragment) -> bytes:
    return HEADER.pack(frag.index, frag.total, frag.bit_length) + frag.payload_bytes()


def decode_fragment(plaintext: bytes) -> Fragment:
    if len(plaintext) < HEADER.size:
        raise DecryptionError("fragment plaintext shorter than its header")
    index, total, bit_length = HEADER.unpack_from(plaintext)
    body = plaintext[HEADER.size:]
    if len(body) != (bit_length + 7) // 8:
        raise DecryptionError("fragment payload length disagrees with its header")
    try:
        return Fragment(index, total, bytes_to_bits(body, bit_length))
    except ValueError as exc:
        raise DecryptionError(f"malformed fragment: {exc}") from exc


def encrypt_fragment(frag: Fragment, public_key: Any, session_tag: str = "",
                     scheme: AsymmetricScheme | None = None) -> EncryptedFragment:
    """Seal ``frag`` to ``public_key`` (key object or printable text)."""
    if isinstance(public_key, str):
        public_key, detected = load_public_key(public_key)
        scheme = scheme or detected
    elif scheme is None:
        scheme = X25519SealedScheme() if isinstance(public_key, x25519.X25519PublicKey) \
            else RsaOaepScheme(getattr(public_key, "key_size", 2048))
    if frag.total > 0xFFFF or frag.bit_length > 0xFFFF:
        raise ValueError("fragment too large for the 16-bit header fields")
    return EncryptedFragment(scheme.encrypt(public_key, encode_fragment(frag)), session_tag)


def decrypt_fragment(ef: EncryptedFragment, keypair: RecipientKeyPair) -> Fragment:
    return decode_fragment(keypair.scheme.decrypt(keypair.private_key, ef.ciphertext))
