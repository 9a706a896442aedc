"""QKMS, proxy and client state machines.

Each actor consumes messages one at a time from the simulated scheduler.  The
``on_*`` methods are the network handlers: they decode wire bytes, call the
pure(ish) ``handle_*`` methods and send whatever follows.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from . import keycore, wire
from .cryptoenvelope import (EncryptedFragment, RecipientKeyPair, decrypt_fragment, encrypt_fragment,
                             load_public_key)
from .errors import (ConfigurationError, DecryptionError, ParameterError, ParameterMismatchError,
                     ProtocolError, TagnameReuseError, TransportError)
from .keycore import Fragment, SessionKey
from .oniontransport import CRYPTO, OTHER, SimClock

logger = logging.getLogger(__name__)

WAITING = "waiting_for_peer"
ISSUED = "issued"
COMPLETED = "completed"
FAILED = "failed"


# -- crypto timing -------------------------------------------------------------

class StubCryptoTimer:
    """Charges a fixed cost per operation; used for reproducible latency reports."""

    def __init__(self, ms_per_op: float, clock: SimClock | None = None):
        self.ms_per_op = ms_per_op
        self.clock = clock or SimClock()

    def run(self, fn: Callable, *args):
        result = fn(*args)
        self.clock.advance(self.ms_per_op, CRYPTO)
        return result, self.ms_per_op / 1000.0


class WallCryptoTimer:
    """Charges measured wall-clock time to the simulated clock."""

    def __init__(self, clock: SimClock | None = None):
        self.clock = clock or SimClock()

    def run(self, fn: Callable, *args):
        start = time.perf_counter()
        result = fn(*args)
        elapsed = time.perf_counter() - start
        self.clock.advance(elapsed * 1000.0, CRYPTO)
        return result, elapsed


# -- session cipher --------------------------------------------------------------

SESSION_KDF_INFO = b"onionkey session cipher v1"


@dataclass(frozen=True)
class SessionCipher:
    key: bytes

    def encrypt(self, plaintext: bytes, associated: bytes = b"", nonce: bytes | None = None) -> bytes:
        nonce = nonce or os.urandom(12)
        return nonce + AESGCM(self.key).encrypt(nonce, plaintext, associated)

    def decrypt(self, token: bytes, associated: bytes = b"") -> bytes:
        try:
            return AESGCM(self.key).decrypt(token[:12], token[12:], associated)
        except (InvalidTag, ValueError) as exc:
            raise DecryptionError("session message failed authentication") from exc


def derive_session_cipher(key: SessionKey, salt: bytes | None = None) -> SessionCipher:
    """HKDF-SHA256 the reconstructed master secret down to an AES-256-GCM key."""
    if key.key_type < 128:
        raise ParameterError(f"master secret must be at least 128 bits, got {key.key_type}")
    okm = HKDF(algorithm=hashes.SHA256(), length=32, salt=salt, info=SESSION_KDF_INFO).derive(key.to_bytes())
    return SessionCipher(okm)


# -- QKMS ----------------------------------------------------------------------------

@dataclass(frozen=True)
class EndpointEntry:
    proxy_id: str
    public_key: str
    channels: tuple[str, ...]


@dataclass
class SessionRecord:
    tagname: str
    key_type: int
    num_of_splits: int
    shuffle: bool
    created_at: float
    endpoints: list[EndpointEntry] = field(default_factory=list)
    state: str = WAITING
    reason: str = ""


@dataclass(frozen=True)
class Bundle:
    channel: str
    encrypted_fragments: tuple[EncryptedFragment, ...]
    bundle_id: int

    def __post_init__(self):
        if not self.encrypted_fragments:
            raise ParameterError("a bundle carries at least one fragment")

    def delivery(self, tagname: str) -> wire.FragmentDelivery:
        return wire.FragmentDelivery(tagname, tuple(ef.b64() for ef in self.encrypted_fragments), self.bundle_id)


@dataclass(frozen=True)
class DispatchAction:
    proxy_id: str
    bundle: Bundle


def qkms_assign_channels(n: int, channels: Sequence[str], rng: np.random.Generator) -> list[str]:
    """Independent uniform channel choice for each of ``n`` fragments."""
    if not channels:
        raise ParameterError("channel list is empty")
    picks = rng.integers(0, len(channels), size=n)
    return [channels[int(i)] for i in picks]


def group_bundles(encrypted: Sequence[EncryptedFragment], assignment: Sequence[str],
                  channels: Sequence[str], first_id: int) -> list[Bundle]:
    """One bundle per channel that received anything, in channel-list order."""
    per_channel: dict[str, list[EncryptedFragment]] = {}
    for ef, ch in zip(encrypted, assignment):
        per_channel.setdefault(ch, []).append(ef)
    bundles = []
    for ch in dict.fromkeys(channels):
        if ch in per_channel:
            bundles.append(Bundle(ch, tuple(per_channel[ch]), first_id + len(bundles)))
    return bundles


def _validate_params(tagname: str, key_type: int, n: int) -> None:
    if not tagname:
        raise ProtocolError("tagname must be non-empty")
    if key_type < 8 or key_type % 8:
        raise ProtocolError(f"key_type must be a positive multiple of 8, got {key_type}")
    if not 1 <= n <= key_type:
        raise ProtocolError(f"num_of_splits must lie in [1, key_type], got {n}")


class QKMS:
    def __init__(self, rng: np.random.Generator, crypto: StubCryptoTimer | WallCryptoTimer | None = None,
                 session_timeout_ms: float | None = None, clock: SimClock | None = None,
                 handling_ms: float = 0.0):
        self.rng = rng
        self.clock = clock or (crypto.clock if crypto else SimClock())
        self.crypto = crypto or WallCryptoTimer(self.clock)
        self.session_timeout_ms = session_timeout_ms
        self.handling_ms = handling_ms
        self.sessions: dict[str, SessionRecord] = {}
        self.issued_keys: dict[str, SessionKey] = {}
        self.trace: list[str] = []
        self.net = None
        self.address = "qkms"

    def attach(self, net, address: str = "qkms") -> None:
        self.net, self.address = net, address
        net.register(address, self.on_get_key, onion=False)

    def expire(self, now: float) -> None:
        if self.session_timeout_ms is None:
            return
        for rec in self.sessions.values():
            if rec.state == WAITING and now - rec.created_at > self.session_timeout_ms:
                rec.state, rec.reason = FAILED, "expired"

    def handle_request(self, req: wire.ProxyKeyRequest, proxy_id: str, now: float | None = None) -> list[DispatchAction]:
        now = self.clock.now_ms if now is None else now
        wire.validate(req)
        _validate_params(req.tagname, req.key_type, req.num_of_splits)
        self.expire(now)
        entry = EndpointEntry(proxy_id, req.public_key, tuple(req.channels))
        rec = self.sessions.get(req.tagname)
        if rec is None:
            self.sessions[req.tagname] = SessionRecord(req.tagname, req.key_type, req.num_of_splits,
                                                      req.shuffle, now, [entry])
            return []
        if rec.state != WAITING:
            raise TagnameReuseError(f"tagname {req.tagname!r} is no longer usable ({rec.state})")
        if any(e.proxy_id == proxy_id for e in rec.endpoints):
            raise ProtocolError(f"proxy {proxy_id!r} already registered for {req.tagname!r}")
        if (req.key_type, req.num_of_splits, req.shuffle) != (rec.key_type, rec.num_of_splits, rec.shuffle):
            raise ParameterMismatchError(
                f"{req.tagname!r}: peer asked for key_type={rec.key_type}, n={rec.num_of_splits}, "
                f"shuffle={rec.shuffle}")
        load_public_key(req.public_key)
        rec.endpoints.append(entry)
        return self._issue(rec)

    def _issue(self, rec: SessionRecord) -> list[DispatchAction]:
        key = keycore.generate_key(rec.key_type, self.rng)
        self.clock.advance(self.handling_ms, OTHER)
        rec.state = ISSUED
        self.issued_keys[rec.tagname] = key
        actions = []
        next_id = 1
        for entry in rec.endpoints:
            fset = keycore.split_key(key, rec.num_of_splits)
            if rec.shuffle:
                fset = keycore.shuffle_fragments(fset, self.rng)
            self.trace.append(f"[QKMS] {rec.tagname} -> {entry.proxy_id}")
            self.trace.extend(f"{frag.label()}: {frag.bits}" for frag in fset)
            encrypted = []
            for frag in fset:
                ef, _ = self.crypto.run(encrypt_fragment, frag, entry.public_key, rec.tagname)
                encrypted.append(ef)
            assignment = qkms_assign_channels(len(encrypted), entry.channels, self.rng)
            bundles = group_bundles(encrypted, assignment, entry.channels, next_id)
            next_id += len(bundles)
            actions.extend(DispatchAction(entry.proxy_id, b) for b in bundles)
        return actions

    def on_get_key(self, source: str, path: str, payload: bytes) -> bytes:
        if path != wire.GET_KEY:
            raise ProtocolError(f"QKMS has no endpoint {path!r}")
        req = wire.decode(payload, wire.ProxyKeyRequest)
        actions = self.handle_request(req, source)
        rec = self.sessions[req.tagname]
        try:
            for act in actions:
                self.net.send_direct(self.address, act.bundle.channel, wire.RECEIVE_FRAGMENT,
                                     wire.encode(act.bundle.delivery(req.tagname)))
        except Exception as exc:
            rec.state, rec.reason = FAILED, f"dispatch failed: {exc}"
            raise
        if actions:
            rec.state = COMPLETED
        return wire.encode(wire.KeyAck(req.tagname, "issued" if actions else "waiting"))


# -- proxy -----------------------------------------------------------------------------

@dataclass(frozen=True)
class ProxyConfig:
    proxy_id: str
    channels: tuple[str, ...]
    client_address: str = ""
    qkms_address: str = "qkms"


def proxy_handle_client_request(req: wire.KeyRequest, config: ProxyConfig) -> wire.ProxyKeyRequest:
    if not config.channels:
        raise ConfigurationError(f"proxy {config.proxy_id!r} has no channels configured")
    wire.validate(req)
    if not req.tagname:
        raise ProtocolError("tagname must be non-empty")
    return wire.ProxyKeyRequest.from_client(req, config.channels)


class Proxy:
    """Forwards requests to the QKMS and bundles to its client, one fresh circuit per bundle."""

    def __init__(self, config: ProxyConfig, transport=None):
        self.config = config
        self.transport = transport
        self.net = None
        self.log: list[str] = []
        self.inbound: list[bytes] = []  # raw payloads this proxy handled
        self.failed: set[str] = set()
        self.receipts: dict[str, list] = {}

    def attach(self, net, onion_address: str) -> None:
        self.net = net
        self.transport = net.transport(self.config.proxy_id)
        net.register(onion_address, self.on_client_request, onion=True)
        for ch in self.config.channels:
            net.register(ch, self.on_bundle, onion=False)

    def on_client_request(self, source: str, path: str, payload: bytes) -> bytes:
        if path != wire.GET_KEY:
            raise ProtocolError(f"proxy has no endpoint {path!r}")
        self.inbound.append(payload)
        req = wire.decode(payload, wire.KeyRequest)
        fwd = proxy_handle_client_request(req, self.config)
        self.log.append(f"forward tag={fwd.tagname} channels={len(fwd.channels)}")
        self.net.send_direct(self.config.proxy_id, self.config.qkms_address, wire.GET_KEY, wire.encode(fwd))
        return wire.encode(wire.KeyAck(fwd.tagname, "forwarded"))

    def on_bundle(self, source: str, path: str, payload: bytes) -> None:
        self.inbound.append(payload)
        delivery = wire.decode(payload, wire.FragmentDelivery)
        self.log.append(f"bundle tag={delivery.tagname} id={delivery.bundle_id} size={len(delivery.fragments)}")
        self.forward_bundles([delivery], self.config.client_address)

    def forward_bundles(self, deliveries: Sequence[wire.FragmentDelivery], client_address: str,
                        transport=None) -> list:
        """NEWNYM, wait, POST; once per bundle.  The first failure fails the session."""
        transport = transport or self.transport
        receipts = []
        for d in deliveries:
            if d.tagname in self.failed:
                self.log.append(f"drop tag={d.tagname} id={d.bundle_id} (session failed)")
                continue
            transport.newnym()
            try:
                receipt = transport.send(client_address, wire.RECEIVE_FRAGMENT, wire.encode(d))
            except (TransportError, OSError) as exc:
                self.failed.add(d.tagname)
                self.log.append(f"fail tag={d.tagname} id={d.bundle_id}: {exc}")
                break
            receipts.append(receipt)
            self.receipts.setdefault(d.tagname, []).append(receipt)
            self.log.append(f"sent tag={d.tagname} id={d.bundle_id} circuit={getattr(receipt, 'circuit_id', None)}")
        return receipts


# -- client --------------------------------------------------------------------------

@dataclass
class ClientSessionState:
    tagname: str
    expected_total: int
    received: dict[int, Fragment] = field(default_factory=dict)
    complete: bool = False
    failed: bool = False
    error: str = ""
    key: Optional[SessionKey] = None
    bundles_seen: set[int] = field(default_factory=set)


class Client:
    def __init__(self, name: str, keypair: RecipientKeyPair, proxy_address: str = "",
                 crypto: StubCryptoTimer | WallCryptoTimer | None = None, clock: SimClock | None = None):
        self.name = name
        self.keypair = keypair
        self.proxy_address = proxy_address
        self.clock = clock or (crypto.clock if crypto else SimClock())
        self.crypto = crypto or WallCryptoTimer(self.clock)
        self.sessions: dict[str, ClientSessionState] = {}
        self.trace: list[str] = []
        self.transport = None
        self._shares = 0

    def attach(self, net, onion_address: str) -> None:
        self.transport = net.transport(self.name)
        net.register(onion_address, self.on_fragment, onion=True)

    def make_request(self, tagname: str, key_type: int, num_of_splits: int, shuffle: bool) -> wire.KeyRequest:
        _validate_params(tagname, key_type, num_of_splits)
        if tagname in self.sessions:
            raise TagnameReuseError(f"client already used tagname {tagname!r}")
        self.sessions[tagname] = ClientSessionState(tagname, num_of_splits)
        return wire.KeyRequest(tagname, key_type, num_of_splits, shuffle, self.keypair.public_key)

    def request_key(self, tagname: str, key_type: int, num_of_splits: int, shuffle: bool):
        req = self.make_request(tagname, key_type, num_of_splits, shuffle)
        return self.transport.send(self.proxy_address, wire.GET_KEY, wire.encode(req))

    def on_fragment(self, source: str, path: str, payload: bytes) -> None:
        if path != wire.RECEIVE_FRAGMENT:
            raise ProtocolError(f"client has no endpoint {path!r}")
        self.receive(wire.decode(payload, wire.FragmentDelivery))

    def _fail(self, state: ClientSessionState, why: str) -> None:
        state.failed, state.error = True, why
        self.trace.append(f"[CLIENT] Session {state.tagname} failed: {why}")
        raise ProtocolError(why)

    def receive(self, delivery: wire.FragmentDelivery) -> ClientSessionState:
        state = self.sessions.get(delivery.tagname)
        if state is None:
            raise ProtocolError(f"no open session for tagname {delivery.tagname!r}")
        if state.failed:
            raise ProtocolError(f"session {delivery.tagname!r} already failed")
        state.bundles_seen.add(delivery.bundle_id)
        for text in delivery.fragments:
            self._shares += 1
            self.trace.append(f"[CLIENT] Received share (idx={self._shares}): {text[:23]}...")
            try:
                ef = EncryptedFragment.from_b64(text, delivery.tagname)
                frag, seconds = self.crypto.run(decrypt_fragment, ef, self.keypair)
            except (DecryptionError, ValueError) as exc:
                self._fail(state, f"fragment rejected: {exc}")
            self.trace.append(f"Decrypted: part {frag.index} of {frag.total}, {frag.bits[:25]}...")
            self.trace.append(f"Decryption time: {seconds:.3f} s")
            self.trace.append("")
            if frag.total != state.expected_total:
                self._fail(state, f"fragment claims total {frag.total}, expected {state.expected_total}")
            seen = state.received.get(frag.index)
            if seen is not None:
                if seen.bits != frag.bits:
                    self._fail(state, f"conflicting duplicate of part {frag.index}")
                continue
            state.received[frag.index] = frag
        if not state.complete and len(state.received) == state.expected_total:
            self.trace.append(f"[CLIENT] All {state.expected_total} fragments received; reassembling.")
            state.key = keycore.reassemble(state.received.values())
            state.complete = True
        return state

    def session_key(self, tagname: str) -> Optional[SessionKey]:
        state = self.sessions.get(tagname)
        return state.key if state else None
