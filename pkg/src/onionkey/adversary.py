"""Linkage analysis: closed-form bounds and Monte Carlo over the simulated network.

A circuit counts as correlated when both guard positions (the first hop of
each half) sit on compromised relays.  A session is linked when every one of
its ``n`` circuits is correlated.  The Monte Carlo reads nothing but the
per-hop compromise flags the simulator emits.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from . import _kernels
from .errors import ParameterError
from .oniontransport import ObservationRecord, RelayNetwork

logger = logging.getLogger(__name__)

SHARD_TRIALS = 1 << 16
MIN_EXPECTED_SUCCESSES = 10

# sweep label -> (selection_policy, guard_policy)
POLICIES = {
    "fresh": ("uniform", "fresh_per_circuit"),
    "pinned": ("uniform", "pinned_service"),
    "pinned_both": ("uniform", "pinned_per_endpoint"),
    "weighted": ("bandwidth_weighted", "fresh_per_circuit"),
    "weighted_pinned": ("bandwidth_weighted", "pinned_service"),
}

CSV_HEADER = ("policy", "f", "n", "trials", "successes", "p_hat", "std_err", "analytic", "ratio")


def _check_f(f: float) -> None:
    if not 0 <= f < 1:
        raise ParameterError(f"f must lie in [0, 1), got {f}")


def _check_n(n: int) -> None:
    if isinstance(n, bool) or not isinstance(n, (int, np.integer)) or n < 1:
        raise ParameterError(f"n must be a positive integer, got {n!r}")


def per_circuit_corr(f: float) -> float:
    _check_f(f)
    return f * f


def multi_circuit_bound(f: float, n: int) -> float:
    _check_f(f)
    _check_n(n)
    return f ** (2 * n)


def pinned_guard_analytic(f: float, n: int, both_sides: bool = False) -> float:
    """All-``n``-correlated probability with pinned guards.

    Service guard pinned for the session, client guards fresh: ``f**(n+1)``.
    Both guards pinned: ``f**2`` whatever ``n`` is.
    """
    _check_f(f)
    _check_n(n)
    return f * f if both_sides else f ** (n + 1)


def guard_hit_probability(net: RelayNetwork) -> float:
    """Chance that one guard draw lands on a compromised relay."""
    w = net.sampling_weights()
    return float(w[net.compromised_mask].sum() / w.sum())


def weighted_per_circuit_corr(net: RelayNetwork) -> float:
    return guard_hit_probability(net) ** 2


def analytic_linkage(net: RelayNetwork, n: int) -> float:
    """Closed form matching whatever policies ``net`` is configured with."""
    _check_n(n)
    q = guard_hit_probability(net)
    if net.guard_policy == "pinned_per_endpoint":
        return q * q
    if net.guard_policy == "pinned_service":
        return q ** (n + 1)
    return q ** (2 * n)


def clopper_pearson(successes: int, trials: int, confidence: float = 0.95) -> tuple[float, float]:
    alpha = 1.0 - confidence
    lo = 0.0 if successes == 0 else float(stats.beta.ppf(alpha / 2, successes, trials - successes + 1))
    hi = 1.0 if successes == trials else float(stats.beta.ppf(1 - alpha / 2, successes + 1, trials - successes))
    return lo, hi


@dataclass(frozen=True)
class LinkageExperiment:
    network: RelayNetwork
    n: int
    trials: int
    seed: int = 0
    shard_trials: int = SHARD_TRIALS

    def __post_init__(self):
        _check_n(self.n)
        if self.trials < 1:
            raise ParameterError("trials must be >= 1")
        if self.shard_trials < 1:
            raise ParameterError("shard_trials must be >= 1")


@dataclass(frozen=True)
class LinkageEstimate:
    successes: int
    trials: int
    p_hat: float
    std_err: float
    analytic_bound: float
    status: str = "ok"  # or "upper_bound_only" when too few successes are expected
    upper_95: float = 1.0
    partial_counts: tuple[int, ...] = field(default=())  # trials with exactly k correlated circuits

    def within(self, k_se: float = 3.0) -> bool:
        return abs(self.p_hat - self.analytic_bound) <= k_se * self.std_err


def correlated_circuits(flags: np.ndarray) -> np.ndarray:
    """Per-circuit correlation from compromise flags shaped ``(..., 6)``."""
    return flags[..., _kernels.CLIENT_GUARD] & flags[..., _kernels.SERVICE_GUARD]


def shard_rng(seed: int, shard: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(shard,)))


def _run_shard(exp: LinkageExperiment, tables, mask, shard: int, size: int, backend) -> np.ndarray:
    rng = shard_rng(exp.seed, shard)
    u = rng.random((size, exp.n, _kernels.HOPS))
    pins = rng.random((size, 2))
    flags = _kernels.observe_flags(tables, mask, u, pins, exp.network.pin_client, exp.network.pin_service,
                                   backend=backend)
    k = correlated_circuits(flags).sum(axis=1)
    return np.bincount(k, minlength=exp.n + 1)


def estimate_from_counts(counts: np.ndarray, analytic: float) -> LinkageEstimate:
    counts = np.asarray(counts, dtype=np.int64)
    trials = int(counts.sum())
    successes = int(counts[-1])
    p = successes / trials
    se = math.sqrt(p * (1 - p) / trials)
    _, hi = clopper_pearson(successes, trials)
    status = "ok" if analytic * trials >= MIN_EXPECTED_SUCCESSES else "upper_bound_only"
    return LinkageEstimate(successes, trials, p, se, analytic, status, hi, tuple(int(c) for c in counts))


def run_linkage_experiment(exp: LinkageExperiment, backend: str | None = None, workers: int = 1) -> LinkageEstimate:
    """Sample ``exp.trials`` sessions of ``exp.n`` circuits each.

    Trials are cut into fixed-size shards seeded by ``(seed, shard index)``,
    so the result does not depend on ``workers``.
    """
    tables = _kernels.weight_tables(exp.network.sampling_weights())
    mask = exp.network.compromised_mask
    sizes = [min(exp.shard_trials, exp.trials - start) for start in range(0, exp.trials, exp.shard_trials)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda a: _run_shard(exp, tables, mask, a[0], a[1], backend), enumerate(sizes)))
    else:
        parts = [_run_shard(exp, tables, mask, s, size, backend) for s, size in enumerate(sizes)]
    est = estimate_from_counts(np.sum(parts, axis=0), analytic_linkage(exp.network, exp.n))
    if est.status != "ok":
        logger.warning("expected successes %.3g < %d; report the 95%% upper bound %.3g instead of p_hat",
                       est.analytic_bound * est.trials, MIN_EXPECTED_SUCCESSES, est.upper_95)
    return est


def linkage_from_observations(records: Iterable[ObservationRecord], n: int) -> bool:
    """Adversary verdict for one session's log: did every circuit show both guards?

    Records are grouped by circuit id; anything other than the compromise flags
    is ignored.
    """
    per_circuit: dict[int, bool] = {}
    for rec in records:
        hit = rec.client_guard_compromised and rec.service_guard_compromised
        per_circuit[rec.circuit_id] = per_circuit.get(rec.circuit_id, True) and hit
    if len(per_circuit) != n:
        raise ParameterError(f"expected {n} circuits in the log, found {len(per_circuit)}")
    return all(per_circuit.values())


# -- sweeps --------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    policy: str
    f: float
    n: int
    estimate: LinkageEstimate

    @property
    def ratio(self) -> float:
        a = self.estimate.analytic_bound
        return self.estimate.p_hat / a if a > 0 else float("nan")

    def cells(self) -> list[str]:
        e = self.estimate
        return [self.policy, repr(self.f), str(self.n), str(e.trials), str(e.successes), repr(e.p_hat),
                repr(e.std_err), repr(e.analytic_bound), repr(self.ratio)]


def cell_seed(seed: int, policy: str, f: float, n: int) -> int:
    digest = hashlib.sha256(f"{seed}|{policy}|{f!r}|{n}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def build_policy_network(policy: str, f: float, relays: int = 100,
                         weights: Sequence[float] | None = None) -> RelayNetwork:
    if policy not in POLICIES:
        raise ParameterError(f"unknown policy {policy!r}; choose from {sorted(POLICIES)}")
    selection, guard = POLICIES[policy]
    return RelayNetwork.build(relays, f=f, weights=weights, selection_policy=selection, guard_policy=guard)


def sweep(f_values: Sequence[float], n_values: Sequence[int], policies: Sequence[str], trials: int,
          seed: int, relays: int = 100, weights: Sequence[float] | None = None,
          backend: str | None = None, workers: int = 1, progress=None) -> list[SweepRow]:
    if not f_values or not n_values or not policies:
        raise ParameterError("sweep grids must be non-empty")
    rows = []
    for policy in policies:
        for f in f_values:
            net = build_policy_network(policy, f, relays, weights)
            for n in n_values:
                exp = LinkageExperiment(net, n, trials, cell_seed(seed, policy, f, n))
                est = run_linkage_experiment(exp, backend=backend, workers=workers)
                rows.append(SweepRow(policy, f, n, est))
                if progress is not None:
                    progress(rows[-1])
    return rows


def rows_to_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in rows:
        writer.writerow(row.cells())
    return buf.getvalue()
