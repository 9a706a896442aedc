"""Bundled acceptance runner.

Each check returns a :class:`CriterionResult`.  ``artifact`` holds the
deterministic text a check produced (CSV rows, report JSON digests) so that
the determinism check can compare two runs byte for byte.  Wall-clock time is
kept out of artifacts.
"""

from __future__ import annotations

import hashlib
import itertools
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import adversary, keycore, wire
from .actors import QKMS, StubCryptoTimer
from .cryptoenvelope import RecipientKeyPair
from .errors import ParameterMismatchError, TagnameReuseError
from .oniontransport import LatencyModel, RelayNetwork, SimClock
from .session import ENDPOINTS, SessionConfig, SessionOutcome, default_keypairs, run_session

DEFAULT_SEED = 20260512
DEFAULT_TRIALS = 1_000_000
ROUND_TRIP_GRID = dict(key_type=(128, 256, 768, 1024), n=(1, 2, 5, 10), shuffle=(False, True))
ROUND_TRIP_SEEDS = 50
ROUND_TRIP_BUDGET_S = 60.0
K_SE = 3.0


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    artifact: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.number:>2}. {self.name}: {self.detail}"


@dataclass
class ValidationOptions:
    seed: int = DEFAULT_SEED
    trials: int = DEFAULT_TRIALS
    seeds: int = ROUND_TRIP_SEEDS
    fuzz_cases: int = 1000
    backend: str | None = None
    workers: int = 1
    keypairs: dict[str, RecipientKeyPair] | None = None


def _sub_seed(seed: int, *parts) -> int:
    digest = hashlib.sha256("|".join(map(str, (seed,) + parts)).encode()).digest()
    return int.from_bytes(digest[:8], "big")


# -- criteria 1, 6, 8 share one pass over the round-trip grid -----------------------

@dataclass
class RoundTripRun:
    config: SessionConfig
    outcome: SessionOutcome


@dataclass
class RoundTripBatch:
    runs: list[RoundTripRun] = field(default_factory=list)
    seconds: float = 0.0


def round_trip_batch(opts: ValidationOptions) -> RoundTripBatch:
    keypairs = opts.keypairs or default_keypairs()
    batch = RoundTripBatch()
    start = time.perf_counter()
    grid = itertools.product(ROUND_TRIP_GRID["key_type"], ROUND_TRIP_GRID["n"], ROUND_TRIP_GRID["shuffle"])
    for key_type, n, shuffle in grid:
        for s in range(opts.seeds):
            cfg = SessionConfig(key_type=key_type, num_of_splits=n, shuffle=shuffle,
                                tagname=f"rt-{key_type}-{n}-{int(shuffle)}-{s}",
                                seed=_sub_seed(opts.seed, "round-trip", key_type, n, shuffle, s))
            batch.runs.append(RoundTripRun(cfg, run_session(cfg, keypairs, backend=opts.backend)))
    batch.seconds = time.perf_counter() - start
    return batch


def check_round_trip(batch: RoundTripBatch) -> CriterionResult:
    bad = [r for r in batch.runs
           if r.outcome.qkms_key is None
           or any(k != r.outcome.qkms_key for k in r.outcome.client_keys.values())]
    artifact = "\n".join(r.outcome.report.to_json() for r in batch.runs)
    in_budget = batch.seconds < ROUND_TRIP_BUDGET_S
    detail = f"{len(batch.runs) - len(bad)}/{len(batch.runs)} sessions reconstructed"
    if bad:
        first = bad[0]
        detail += f"; first failure {first.config.tagname}: {first.outcome.report.failure or 'key mismatch'}"
    detail += f"; {batch.seconds:.1f} s (budget {ROUND_TRIP_BUDGET_S:.0f} s)"
    return CriterionResult(1, "round-trip reconstruction", not bad and in_budget and bool(batch.runs), detail,
                           _digest(artifact), batch.seconds)


def check_circuit_per_bundle(batch: RoundTripBatch) -> CriterionResult:
    violations = 0
    lines = []
    for r in batch.runs:
        rep = r.outcome.report
        for name in ENDPOINTS:
            ids = rep.circuit_ids.get(name, [])
            ok = len(set(ids)) == rep.bundles_per_client.get(name, -1) == len(ids)
            violations += not ok
            lines.append(f"{r.config.tagname},{name},{len(set(ids))},{rep.bundles_per_client.get(name, -1)}")
    checked = 2 * len(batch.runs)
    return CriterionResult(6, "circuit-per-bundle invariant", violations == 0 and checked > 0,
                           f"{violations} violations over {checked} client sessions", _digest("\n".join(lines)))


def _fragment_needles(outcome: SessionOutcome) -> list[str]:
    """Every fragment bit-string the QKMS issued, read back from its trace."""
    needles = []
    for line in outcome.qkms.trace:
        if line.startswith("Part "):
            needles.append(line.split(": ", 1)[1])
    return needles


def check_proxy_blindness(batch: RoundTripBatch) -> CriterionResult:
    leaks = 0
    scanned = 0
    for r in batch.runs:
        needles = _fragment_needles(r.outcome)
        packed = [keycore.bits_to_bytes(b) for b in needles if len(b) >= 64]
        for proxy in r.outcome.proxies.values():
            text = "\n".join(proxy.log) + "\n" + repr(vars(proxy.config))
            blobs = list(proxy.inbound)
            haystack = text + "\n" + "\n".join(b.decode("utf-8", "replace") for b in blobs)
            leaks += sum(bits in haystack for bits in needles)
            leaks += sum(p in blob for p in packed for blob in blobs)
            scanned += len(needles)
    return CriterionResult(8, "proxy blindness", leaks == 0 and scanned > 0,
                           f"{leaks} fragment bit-strings found in proxy-visible state ({scanned} checked)",
                           f"leaks={leaks},scanned={scanned}")


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


# -- Monte Carlo criteria ------------------------------------------------------------------

def _mc_rows(policy: str, f_values, n_values, opts: ValidationOptions) -> list[adversary.SweepRow]:
    return adversary.sweep(f_values, n_values, [policy], opts.trials, opts.seed, backend=opts.backend,
                           workers=opts.workers)


def _band(row: adversary.SweepRow, target: float) -> bool:
    e = row.estimate
    return e.status == "ok" and abs(e.p_hat - target) <= K_SE * e.std_err


def _row_note(row: adversary.SweepRow, target: float) -> str:
    e = row.estimate
    z = (e.p_hat - target) / e.std_err if e.std_err else float("inf")
    return f"f={row.f} n={row.n} p_hat={e.p_hat:.6g} target={target:.6g} z={z:+.2f}"


def check_per_circuit(opts: ValidationOptions) -> CriterionResult:
    rows = _mc_rows("fresh", (0.2, 0.3, 0.5), (1,), opts)
    ok = all(_band(r, r.f ** 2) for r in rows)
    return CriterionResult(2, "per-circuit correlation f^2", ok,
                           "; ".join(_row_note(r, r.f ** 2) for r in rows), adversary.rows_to_csv(rows))


def check_multi_circuit(opts: ValidationOptions) -> CriterionResult:
    rows = _mc_rows("fresh", (0.3, 0.5), (2, 3), opts)
    ok = all(_band(r, r.f ** (2 * r.n)) for r in rows)
    by_f: dict[float, list[adversary.SweepRow]] = {}
    for r in rows:
        by_f.setdefault(r.f, []).append(r)
    decreasing = all(
        all(a.estimate.p_hat > b.estimate.p_hat for a, b in zip(rs, rs[1:]))
        for rs in (sorted(v, key=lambda r: r.n) for v in by_f.values()))
    tiny = adversary.multi_circuit_bound(0.05, 10)
    tiny_ok = abs(tiny - 0.05 ** 20) <= 1e-3 * 0.05 ** 20
    notes = "; ".join(_row_note(r, r.f ** (2 * r.n)) for r in rows)
    notes += f"; strictly decreasing in n: {decreasing}; bound(0.05, 10)={tiny:.4g}"
    return CriterionResult(3, "multi-circuit bound f^(2n)", ok and decreasing and tiny_ok, notes,
                           adversary.rows_to_csv(rows))


def check_guard_pinning(opts: ValidationOptions) -> CriterionResult:
    rows = _mc_rows("pinned", (0.5,), (2, 3), opts)
    ok = all(_band(r, r.f ** (r.n + 1)) and r.estimate.p_hat > r.f ** (2 * r.n) for r in rows)
    notes = "; ".join(f"{_row_note(r, r.f ** (r.n + 1))} > f^(2n)={r.f ** (2 * r.n):.6g}" for r in rows)
    return CriterionResult(4, "service guard pinning f^(n+1)", ok, notes, adversary.rows_to_csv(rows))


def check_bandwidth_weighting(opts: ValidationOptions, sizes: Sequence[int] = (10, 100, 1000)) -> CriterionResult:
    rows = []
    for size in sizes:
        net = RelayNetwork.heavy_adversary(size, share=0.5)
        exp = adversary.LinkageExperiment(net, 1, opts.trials, _sub_seed(opts.seed, "weighted", size))
        est = adversary.run_linkage_experiment(exp, backend=opts.backend, workers=opts.workers)
        rows.append(adversary.SweepRow("weighted", net.fraction, 1, est))
    ok = all(_band(r, 0.25) for r in rows)
    notes = "; ".join(f"P={s} " + _row_note(r, 0.25) for s, r in zip(sizes, rows))
    return CriterionResult(5, "bandwidth-weighted guard (W_S/W)^2", ok, notes, adversary.rows_to_csv(rows))


# -- criterion 7 ---------------------------------------------------------------------------

def _pairing_case(rng: np.random.Generator, keypair: RecipientKeyPair, case: int):
    """Build one shuffled request sequence.

    Returns ``(requests, expected_keys, mismatch_pairs)`` where each request is
    ``(proxy_id, ProxyKeyRequest)``.
    """
    pk = keypair.public_key
    ch = ("http://10.0.0.5:4000/",)

    def req(tag, key_type=128, n=2, shuffle=True):
        return wire.ProxyKeyRequest(tag, key_type, n, shuffle, pk, ch)

    matched = f"match-{case}"
    reqs = [("proxy-A", req(matched)), ("proxy-B", req(matched))]
    extras = int(rng.integers(0, 4))
    pairs = 0
    i = 0
    while extras > 0:
        if extras >= 2 and rng.random() < 0.5:
            tag = f"mismatch-{case}-{i}"
            reqs += [("proxy-C", req(tag, n=2)), ("proxy-D", req(tag, n=3))]
            pairs += 1
            extras -= 2
        else:
            reqs.append(("proxy-E", req(f"lonely-{case}-{i}")))
            extras -= 1
        i += 1
    order = rng.permutation(len(reqs))
    return [reqs[j] for j in order], {matched}, pairs


def check_tagname_pairing(opts: ValidationOptions) -> CriterionResult:
    rng = np.random.default_rng(_sub_seed(opts.seed, "pairing"))
    keypair = (opts.keypairs or {}).get("A") or RecipientKeyPair.generate()
    failures = []
    summary = []
    for case in range(opts.fuzz_cases):
        reqs, expected, pairs = _pairing_case(rng, keypair, case)
        clock = SimClock()
        qkms = QKMS(np.random.default_rng(_sub_seed(opts.seed, "pairing-qkms", case)),
                    crypto=StubCryptoTimer(0.0, clock), clock=clock)
        rejected = 0
        for proxy_id, r in reqs:
            try:
                qkms.handle_request(r, proxy_id)
            except ParameterMismatchError:
                rejected += 1
        reused = False
        try:
            qkms.handle_request(next(r for _, r in reqs if r.tagname in expected), "proxy-Z")
        except TagnameReuseError:
            reused = True
        ok = set(qkms.issued_keys) == expected and rejected == pairs and reused
        summary.append(f"{case},{len(reqs)},{pairs},{rejected},{sorted(qkms.issued_keys)}")
        if not ok:
            failures.append(case)
    detail = (f"{opts.fuzz_cases - len(failures)}/{opts.fuzz_cases} interleavings issued exactly the matched key"
              f" and rejected every mismatch")
    if failures:
        detail += f"; first failing case {failures[0]}"
    return CriterionResult(7, "tagname pairing safety", not failures and opts.fuzz_cases > 0, detail,
                           _digest("\n".join(summary)))


# -- criterion 9 -------------------------------------------------------------------------

LATENCY_CASE = LatencyModel(per_hop_ms=50.0, circuit_build_ms=2000.0, stabilization_ms=500.0)


def expected_phase_sums(latency: LatencyModel, n: int, bundles: int, crypto_ms: float = 10.0) -> dict[str, float]:
    """Closed-form phase totals for one session.

    Two client requests each open a circuit; every bundle pays stabilization
    plus a fresh build; every message crosses six hops.  Crypto is one
    encryption at the QKMS and one decryption at a client per fragment per
    endpoint.
    """
    hop = 6 * latency.per_hop_ms
    transport = 2 * (latency.circuit_build_ms + hop) + bundles * (
        latency.stabilization_ms + latency.circuit_build_ms + hop)
    return {"transport_ms": transport, "crypto_ms": 2 * 2 * n * crypto_ms, "other_ms": 0.0}


def check_latency(opts: ValidationOptions) -> CriterionResult:
    cfg = SessionConfig(num_of_splits=10, channels_per_proxy=2, latency=LATENCY_CASE, crypto_ms_per_fragment=10.0,
                        seed=_sub_seed(opts.seed, "latency"), tagname="latency-case")
    out = run_session(cfg, opts.keypairs, backend=opts.backend)
    rep = out.report
    want = expected_phase_sums(LATENCY_CASE, cfg.num_of_splits, rep.bundle_count)
    got = {"transport_ms": rep.transport_ms, "crypto_ms": rep.crypto_ms, "other_ms": rep.other_ms}
    total_ok = rep.total_ms == sum(got.values()) and rep.fraction_transport == rep.transport_ms / rep.total_ms
    ok = rep.keys_agree and got == want and total_ok and rep.fraction_transport > 0.8
    detail = (f"transport {rep.transport_ms:g}/{want['transport_ms']:g} ms, crypto {rep.crypto_ms:g}/"
              f"{want['crypto_ms']:g} ms, other {rep.other_ms:g} ms, bundles {rep.bundle_count}, "
              f"fraction_transport {rep.fraction_transport:.3f}")
    return CriterionResult(9, "latency decomposition", ok, detail, rep.to_json())


# -- driver ------------------------------------------------------------------------------

ALL_CRITERIA = tuple(range(1, 11))


def run_criteria(opts: ValidationOptions, only: Sequence[int] = ALL_CRITERIA[:-1]) -> list[CriterionResult]:
    only = set(only)
    results = []
    if only & {1, 6, 8}:
        batch = round_trip_batch(opts)
        for num, fn in ((1, check_round_trip), (6, check_circuit_per_bundle), (8, check_proxy_blindness)):
            if num in only:
                results.append(fn(batch))
    simple: dict[int, Callable[[ValidationOptions], CriterionResult]] = {
        2: check_per_circuit, 3: check_multi_circuit, 4: check_guard_pinning, 5: check_bandwidth_weighting,
        7: check_tagname_pairing, 9: check_latency,
    }
    for num, fn in simple.items():
        if num in only:
            start = time.perf_counter()
            res = fn(opts)
            res.seconds = time.perf_counter() - start
            results.append(res)
    return sorted(results, key=lambda r: r.number)


def check_determinism(first: Sequence[CriterionResult], opts: ValidationOptions) -> CriterionResult:
    start = time.perf_counter()
    again = run_criteria(opts, [r.number for r in first])
    diffs = [a.number for a, b in zip(first, again) if a.artifact != b.artifact or a.passed != b.passed]
    ok = not diffs and len(first) == len(again) and bool(first)
    detail = f"{len(first)} criteria rerun; byte-identical outputs" if ok else f"outputs differ for {diffs}"
    return CriterionResult(10, "determinism", ok, detail, _digest("".join(r.artifact for r in first)),
                           time.perf_counter() - start)


def validate(opts: ValidationOptions | None = None, only: Sequence[int] = ALL_CRITERIA,
             report: Callable[[CriterionResult], None] | None = None) -> list[CriterionResult]:
    opts = opts or ValidationOptions()
    if opts.keypairs is None:
        opts.keypairs = default_keypairs()
    base = [n for n in only if n != 10]
    if 10 in only and not base:
        base = list(ALL_CRITERIA[:-1])
    results = run_criteria(opts, base)
    if 10 in only:
        results.append(check_determinism(results, opts))
    shown = [r for r in results if r.number in only]
    if report is not None:
        for r in shown:
            report(r)
    return shown


def summary_table(results: Sequence[CriterionResult]) -> str:
    lines = [r.line() for r in results]
    passed = sum(r.passed for r in results)
    lines.append(f"{passed}/{len(results)} criteria passed")
    return "\n".join(lines)
