"""Simulated onion-routing network.

One :class:`SimulatedOnionNetwork` owns the relay population, a logical clock,
a FIFO delivery queue and the adversary's observation log.  Each actor talks
through an :class:`EndpointTransport`, which keeps one circuit per destination
until :meth:`EndpointTransport.newnym` starts a new epoch.

Onion-service connections use six relays: the connecting side picks
``[guard, middle, rendezvous]`` and the service picks ``[guard, middle,
exit_to_rendezvous]``.  Relays are distinct within a half but may repeat across
halves.
"""

from __future__ import annotations

import itertools
import json
import logging
from collections import deque
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from . import _kernels
from .errors import NetworkError, ParameterError, RoutingError, TransportError

logger = logging.getLogger(__name__)

SELECTION_POLICIES = ("uniform", "bandwidth_weighted")
GUARD_POLICIES = ("fresh_per_circuit", "pinned_service", "pinned_per_endpoint")

TRANSPORT = "transport"
CRYPTO = "crypto"
OTHER = "other"
PHASES = (CRYPTO, TRANSPORT, OTHER)


@dataclass(frozen=True)
class Relay:
    id: int
    bandwidth_weight: float = 1.0
    compromised: bool = False

    def __post_init__(self):
        if not self.bandwidth_weight > 0:
            raise ParameterError(f"relay {self.id}: bandwidth_weight must be > 0")


@dataclass(frozen=True)
class RelayNetwork:
    relays: tuple[Relay, ...]
    selection_policy: str = "uniform"
    guard_policy: str = "fresh_per_circuit"

    def __post_init__(self):
        if len(self.relays) < 6:
            raise NetworkError(f"need at least 6 relays, got {len(self.relays)}")
        if [r.id for r in self.relays] != list(range(len(self.relays))):
            raise NetworkError("relay ids must be 0..P-1 in order")
        if self.selection_policy not in SELECTION_POLICIES:
            raise ParameterError(f"unknown selection_policy {self.selection_policy!r}")
        if self.guard_policy not in GUARD_POLICIES:
            raise ParameterError(f"unknown guard_policy {self.guard_policy!r}")
        if all(r.compromised for r in self.relays):
            raise ParameterError("compromised fraction must be < 1")

    @classmethod
    def build(cls, size: int, f: float = 0.0, compromised: Iterable[int] | None = None,
              weights: Iterable[float] | None = None, selection_policy: str = "uniform",
              guard_policy: str = "fresh_per_circuit") -> "RelayNetwork":
        """Network of ``size`` relays; relays ``0..round(f*size)-1`` are compromised
        unless explicit ids are given."""
        if compromised is None:
            if not 0 <= f < 1:
                raise ParameterError(f"f must lie in [0, 1), got {f}")
            a = round(f * size)
            if abs(a - f * size) > 1e-9 * max(1, size):
                raise ParameterError(f"f={f} is not a whole number of relays out of {size}")
            bad = set(range(a))
        else:
            bad = set(compromised)
            if not bad <= set(range(size)):
                raise ParameterError("compromised ids must lie in 0..P-1")
        ws = [1.0] * size if weights is None else [float(w) for w in weights]
        if len(ws) != size:
            raise ParameterError(f"expected {size} bandwidth weights, got {len(ws)}")
        relays = tuple(Relay(i, ws[i], i in bad) for i in range(size))
        return cls(relays, selection_policy, guard_policy)

    @classmethod
    def heavy_adversary(cls, size: int, share: float = 0.5, guard_policy: str = "fresh_per_circuit") -> "RelayNetwork":
        """One compromised relay (id 0) carrying ``share`` of the total bandwidth."""
        if not 0 < share < 1:
            raise ParameterError("share must lie in (0, 1)")
        heavy = share / (1 - share) * (size - 1)
        return cls.build(size, compromised=[0], weights=[heavy] + [1.0] * (size - 1),
                         selection_policy="bandwidth_weighted", guard_policy=guard_policy)

    @property
    def size(self) -> int:
        return len(self.relays)

    @property
    def compromised_mask(self) -> np.ndarray:
        return np.array([r.compromised for r in self.relays], dtype=bool)

    @property
    def fraction(self) -> float:
        return float(self.compromised_mask.mean())

    def sampling_weights(self) -> np.ndarray:
        if self.selection_policy == "uniform":
            return np.ones(self.size)
        return np.array([r.bandwidth_weight for r in self.relays], dtype=np.float64)

    @property
    def pin_client(self) -> bool:
        return self.guard_policy == "pinned_per_endpoint"

    @property
    def pin_service(self) -> bool:
        return self.guard_policy in ("pinned_service", "pinned_per_endpoint")

    def to_dict(self) -> dict:
        return {
            "P": self.size,
            "compromised": [r.id for r in self.relays if r.compromised],
            "bandwidth_weights": [r.bandwidth_weight for r in self.relays],
            "selection_policy": self.selection_policy,
            "guard_policy": self.guard_policy,
        }


@dataclass(frozen=True)
class LatencyModel:
    per_hop_ms: float = 0.0
    circuit_build_ms: float = 0.0
    stabilization_ms: float = 0.0

    def __post_init__(self):
        for name in ("per_hop_ms", "circuit_build_ms", "stabilization_ms"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be non-negative")


@dataclass(frozen=True)
class NetworkConfig:
    network: RelayNetwork
    latency: LatencyModel = LatencyModel()
    seed: int = 0

    @classmethod
    def from_dict(cls, obj: dict) -> "NetworkConfig":
        known = {"P", "f", "compromised", "bandwidth_weights", "selection_policy", "guard_policy", "latency", "seed"}
        unknown = set(obj) - known
        if unknown:
            raise ParameterError(f"unknown network config keys: {sorted(unknown)}")
        if "P" not in obj:
            raise ParameterError("network config needs P")
        net = RelayNetwork.build(
            int(obj["P"]), f=float(obj.get("f", 0.0)), compromised=obj.get("compromised"),
            weights=obj.get("bandwidth_weights"),
            selection_policy=obj.get("selection_policy", "uniform"),
            guard_policy=obj.get("guard_policy", "fresh_per_circuit"),
        )
        return cls(net, LatencyModel(**obj.get("latency", {})), int(obj.get("seed", 0)))

    @classmethod
    def load(cls, path) -> "NetworkConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class CircuitPath:
    client_half: tuple[int, int, int]
    service_half: tuple[int, int, int]
    circuit_id: int

    def __post_init__(self):
        for half in (self.client_half, self.service_half):
            if len(half) != 3 or len(set(half)) != 3:
                raise NetworkError(f"circuit half {half} must hold three distinct relays")

    @property
    def relays(self) -> tuple[int, ...]:
        return self.client_half + self.service_half


@dataclass(frozen=True)
class ObservationRecord:
    """What the adversary log holds for one send.

    ``source``/``destination`` are ground-truth labels kept for debugging; the
    adversary analysis reads only the compromise flags.
    """

    seq: int
    circuit_id: int
    relays: tuple[int, ...]
    compromised: tuple[bool, ...]
    timestamp_ms: float
    size: int
    source: str = ""
    destination: str = ""

    @property
    def client_guard_compromised(self) -> bool:
        return self.compromised[_kernels.CLIENT_GUARD]

    @property
    def service_guard_compromised(self) -> bool:
        return self.compromised[_kernels.SERVICE_GUARD]

    def to_json(self) -> str:
        d = asdict(self)
        d["relays"] = list(self.relays)
        d["compromised"] = list(self.compromised)
        return json.dumps(d, separators=(",", ":"))


@dataclass(frozen=True)
class DeliveryReceipt:
    circuit_id: Optional[int]
    observation: Optional[ObservationRecord]
    sent_at_ms: float


class SimClock:
    """Logical milliseconds, tallied per phase."""

    def __init__(self):
        self.now_ms = 0.0
        self.phases = {p: 0.0 for p in PHASES}

    def advance(self, ms: float, phase: str = OTHER) -> None:
        if ms < 0:
            raise ParameterError("cannot move the clock backwards")
        if phase not in self.phases:
            raise ParameterError(f"unknown phase {phase!r}")
        self.now_ms += ms
        self.phases[phase] += ms


Handler = Callable[[str, str, bytes], object]


@dataclass
class _Pending:
    source: str
    destination: str
    path: str
    payload: bytes


@dataclass
class DeliveryResult:
    source: str
    destination: str
    path: str
    response: object = None
    error: Optional[Exception] = None


class SimulatedOnionNetwork:
    """Single-threaded scheduler; every send is totally ordered."""

    def __init__(self, network: RelayNetwork, latency: LatencyModel | None = None,
                 rng: np.random.Generator | int | None = 0, backend: str | None = None):
        self.network = network
        self.latency = latency or LatencyModel()
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.backend = backend
        self.clock = SimClock()
        self.observations: list[ObservationRecord] = []
        self.results: list[DeliveryResult] = []
        self._tables = _kernels.weight_tables(network.sampling_weights())
        self._handlers: dict[str, tuple[Handler, bool]] = {}
        self._queue: deque[_Pending] = deque()
        self._circuit_ids = itertools.count(1)
        self._pinned: dict[str, int] = {}
        self._faults: list[Callable[[str, str, str, bytes], bool]] = []
        self._mask = network.compromised_mask

    # registry --------------------------------------------------------------
    def register(self, address: str, handler: Handler, onion: bool = True) -> None:
        if address in self._handlers:
            raise RoutingError(f"address {address!r} already registered")
        self._handlers[address] = (handler, onion)

    def transport(self, endpoint: str) -> "EndpointTransport":
        return EndpointTransport(self, endpoint)

    def inject_fault(self, predicate: Callable[[str, str, str, bytes], bool]) -> None:
        """Make sends for which ``predicate(source, dest, path, payload)`` holds fail."""
        self._faults.append(predicate)

    # path selection ----------------------------------------------------------
    def pinned_guard(self, endpoint: str) -> int:
        if endpoint not in self._pinned:
            self._pinned[endpoint] = _kernels.sample_half(self._tables, self.rng.random(), 0.0, 0.0,
                                                          backend=self.backend)[0]
        return self._pinned[endpoint]

    def build_circuit(self, client_endpoint: str, service_endpoint: str) -> CircuitPath:
        net = self.network
        if net.size < 3:
            raise NetworkError("fewer than 3 eligible relays per half")
        cg = self.pinned_guard(client_endpoint) if net.pin_client else -1
        sg = self.pinned_guard(service_endpoint) if net.pin_service else -1
        u = self.rng.random(6)
        client = _kernels.sample_half(self._tables, u[0], u[1], u[2], cg, self.backend)
        service = _kernels.sample_half(self._tables, u[3], u[4], u[5], sg, self.backend)
        return CircuitPath(client, service, next(self._circuit_ids))

    # delivery ------------------------------------------------------------------
    def _check(self, source: str, destination: str, path: str, payload: bytes, onion: bool) -> None:
        entry = self._handlers.get(destination)
        if entry is None:
            raise RoutingError(f"unknown destination {destination!r}")
        if entry[1] != onion:
            kind = "onion" if entry[1] else "conventional"
            raise RoutingError(f"{destination!r} is a {kind} endpoint")
        for fault in self._faults:
            if fault(source, destination, path, payload):
                raise TransportError(f"injected failure sending {source} -> {destination}{path}")

    def _observe(self, source: str, destination: str, circuit: CircuitPath, size: int) -> ObservationRecord:
        rec = ObservationRecord(
            seq=len(self.observations), circuit_id=circuit.circuit_id, relays=circuit.relays,
            compromised=tuple(bool(self._mask[r]) for r in circuit.relays),
            timestamp_ms=self.clock.now_ms, size=size, source=source, destination=destination,
        )
        self.observations.append(rec)
        return rec

    def send_direct(self, source: str, destination: str, path: str, payload: bytes) -> DeliveryReceipt:
        """Conventional (non-onion) channel: no circuit, no observation, no latency."""
        self._check(source, destination, path, payload, onion=False)
        self._queue.append(_Pending(source, destination, path, payload))
        return DeliveryReceipt(None, None, self.clock.now_ms)

    def run(self, max_steps: int = 1_000_000) -> int:
        steps = 0
        while self._queue:
            if steps >= max_steps:
                raise TransportError("scheduler did not go idle")
            item = self._queue.popleft()
            handler, _ = self._handlers[item.destination]
            result = DeliveryResult(item.source, item.destination, item.path)
            try:
                result.response = handler(item.source, item.path, item.payload)
            except Exception as exc:  # a handler error is an error response, not a crash
                logger.debug("handler %s%s failed: %s", item.destination, item.path, exc)
                result.error = exc
            self.results.append(result)
            steps += 1
        return steps

    def write_observations(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.observations:
                fh.write(rec.to_json() + "\n")


class EndpointTransport:
    """One endpoint's view of the network (its local onion-routing client)."""

    def __init__(self, net: SimulatedOnionNetwork, endpoint: str):
        self.net = net
        self.endpoint = endpoint
        self.epoch = 0
        self._circuits: dict[str, CircuitPath] = {}
        self.circuits_used: list[int] = []

    def newnym(self) -> int:
        self.epoch += 1
        self._circuits.clear()
        self.net.clock.advance(self.net.latency.stabilization_ms, TRANSPORT)
        return self.epoch

    def current_circuit(self, destination: str) -> Optional[CircuitPath]:
        return self._circuits.get(destination)

    def send(self, destination: str, path: str, payload: bytes) -> DeliveryReceipt:
        net = self.net
        net._check(self.endpoint, destination, path, payload, onion=True)
        circuit = self._circuits.get(destination)
        if circuit is None:
            circuit = net.build_circuit(self.endpoint, destination)
            self._circuits[destination] = circuit
            net.clock.advance(net.latency.circuit_build_ms, TRANSPORT)
        sent_at = net.clock.now_ms
        rec = net._observe(self.endpoint, destination, circuit, len(payload))
        net.clock.advance(_kernels.HOPS * net.latency.per_hop_ms, TRANSPORT)
        self.circuits_used.append(circuit.circuit_id)
        net._queue.append(_Pending(self.endpoint, destination, path, payload))
        return DeliveryReceipt(circuit.circuit_id, rec, sent_at)


def read_observations(path) -> list[ObservationRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                d["relays"] = tuple(d["relays"])
                d["compromised"] = tuple(d["compromised"])
                out.append(ObservationRecord(**d))
    return out
