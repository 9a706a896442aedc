"""End-to-end key establishment on the simulated network.

Wires two clients, two proxies and one QKMS onto a :class:`SimulatedOnionNetwork`
and runs the whole exchange: out-of-band tagname, client requests over onion
circuits, proxy forwarding, pairing and dispatch at the QKMS, per-bundle
NEWNYM delivery, and reconstruction at both clients.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .actors import QKMS, Client, Proxy, ProxyConfig, StubCryptoTimer, WallCryptoTimer, derive_session_cipher
from .cryptoenvelope import RecipientKeyPair
from .keycore import SessionKey
from .oniontransport import CRYPTO, OTHER, TRANSPORT, LatencyModel, RelayNetwork, SimulatedOnionNetwork

ENDPOINTS = ("A", "B")


@dataclass(frozen=True)
class SessionConfig:
    key_type: int = 768
    num_of_splits: int = 10
    shuffle: bool = True
    channels_per_proxy: int = 2
    tagname: str = "session-2026-05-12-001"
    relays: int = 100
    f: float = 0.0
    selection_policy: str = "uniform"
    guard_policy: str = "fresh_per_circuit"
    latency: LatencyModel = LatencyModel()
    crypto_ms_per_fragment: Optional[float] = 10.0  # None: charge measured wall time
    handling_ms: float = 0.0
    seed: int = 0

    @classmethod
    def from_dict(cls, obj: dict) -> "SessionConfig":
        obj = dict(obj)
        if "latency" in obj and isinstance(obj["latency"], dict):
            obj["latency"] = LatencyModel(**obj["latency"])
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown session config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class RunReport:
    key_reconstructed: bool
    keys_agree: bool
    crypto_ms: float
    transport_ms: float
    other_ms: float
    total_ms: float
    fraction_transport: float
    bundle_count: int
    bundles_per_client: dict[str, int]
    circuit_ids: dict[str, list[int]]
    failure: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


@dataclass
class SessionOutcome:
    report: RunReport
    qkms_key: Optional[SessionKey]
    client_keys: dict[str, Optional[SessionKey]]
    net: SimulatedOnionNetwork
    qkms: QKMS
    proxies: dict[str, Proxy]
    clients: dict[str, Client]
    scheme: str = ""
    extra: dict = field(default_factory=dict)

    def traces(self) -> dict[str, str]:
        out = {"qkms.txt": "\n".join([f"# scheme: {self.scheme}"] + self.qkms.trace) + "\n"}
        for name, client in self.clients.items():
            out[f"client-{name}.txt"] = "\n".join(client.trace) + "\n"
        for name, proxy in self.proxies.items():
            out[f"proxy-{name}.log"] = "\n".join(proxy.log) + "\n"
        return out

    def write(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for fname, text in self.traces().items():
            (d / fname).write_text(text, encoding="utf-8")
        self.net.write_observations(d / "observations.jsonl")
        (d / "report.json").write_text(self.report.to_json() + "\n", encoding="utf-8")


def default_keypairs() -> dict[str, RecipientKeyPair]:
    return {name: RecipientKeyPair.generate() for name in ENDPOINTS}


def run_session(config: SessionConfig, keypairs: dict[str, RecipientKeyPair] | None = None,
                backend: str | None = None, net: SimulatedOnionNetwork | None = None) -> SessionOutcome:
    """Run one full key establishment and return the report plus every actor."""
    keypairs = keypairs or default_keypairs()
    ss = np.random.SeedSequence(config.seed)
    net_seed, qkms_seed = ss.spawn(2)
    if net is None:
        network = RelayNetwork.build(config.relays, f=config.f, selection_policy=config.selection_policy,
                                     guard_policy=config.guard_policy)
        net = SimulatedOnionNetwork(network, config.latency, np.random.default_rng(net_seed), backend=backend)

    def timer():
        if config.crypto_ms_per_fragment is None:
            return WallCryptoTimer(net.clock)
        return StubCryptoTimer(config.crypto_ms_per_fragment, net.clock)

    qkms = QKMS(np.random.default_rng(qkms_seed), crypto=timer(), clock=net.clock, handling_ms=config.handling_ms)
    qkms.attach(net, "qkms")
    proxies, clients = {}, {}
    for i, name in enumerate(ENDPOINTS):
        channels = tuple(f"http://10.0.{i}.5:{4000 + c}/" for c in range(config.channels_per_proxy))
        proxy = Proxy(ProxyConfig(f"proxy-{name}", channels, client_address=f"client{name}.onion",
                                  qkms_address="qkms"))
        proxy.attach(net, f"proxy{name}.onion")
        client = Client(f"client-{name}", keypairs[name], proxy_address=f"proxy{name}.onion",
                        crypto=timer(), clock=net.clock)
        client.attach(net, f"client{name}.onion")
        proxies[name], clients[name] = proxy, client

    failure = ""
    try:
        for name in ENDPOINTS:
            clients[name].request_key(config.tagname, config.key_type, config.num_of_splits, config.shuffle)
        net.run()
    except Exception as exc:  # surfaced in the report; the CLI maps it to an exit code
        failure = f"{type(exc).__name__}: {exc}"
    errors = [r for r in net.results if r.error is not None]
    if errors and not failure:
        first = errors[0]
        failure = f"{first.destination}{first.path}: {type(first.error).__name__}: {first.error}"

    qkms_key = qkms.issued_keys.get(config.tagname)
    client_keys = {name: c.session_key(config.tagname) for name, c in clients.items()}
    reconstructed = all(k is not None for k in client_keys.values())
    agree = reconstructed and qkms_key is not None and all(k == qkms_key for k in client_keys.values())
    if agree and qkms_key.key_type >= 128:
        ciphers = [derive_session_cipher(client_keys[n]) for n in ENDPOINTS]
        agree = ciphers[0].key == ciphers[1].key
    if not failure and not agree:
        failure = "clients did not reconstruct the issued key"

    phases = net.clock.phases
    total = phases[CRYPTO] + phases[TRANSPORT] + phases[OTHER]
    receipts = {name: [r.circuit_id for r in proxies[name].receipts.get(config.tagname, [])] for name in ENDPOINTS}
    bundles = {}
    for name in ENDPOINTS:
        state = clients[name].sessions.get(config.tagname)
        bundles[name] = len(state.bundles_seen) if state else 0
    report = RunReport(
        key_reconstructed=reconstructed,
        keys_agree=agree,
        crypto_ms=phases[CRYPTO],
        transport_ms=phases[TRANSPORT],
        other_ms=phases[OTHER],
        total_ms=total,
        fraction_transport=phases[TRANSPORT] / total if total else 0.0,
        bundle_count=sum(bundles.values()),
        bundles_per_client=bundles,
        circuit_ids=receipts,
        failure=failure,
    )
    scheme = keypairs[ENDPOINTS[0]].scheme.describe()
    return SessionOutcome(report, qkms_key, client_keys, net, qkms, proxies, clients, scheme)
