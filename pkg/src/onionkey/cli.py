"""Command line: ``onionkey run-session | experiment | validate``.

Exit codes: 0 ok, 1 failed session or criterion, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import adversary, validation
from .errors import OnionKeyError
from .oniontransport import GUARD_POLICIES, SELECTION_POLICIES, LatencyModel
from .session import SessionConfig, run_session

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _csv_list(kind):
    def parse(text: str):
        try:
            return [kind(x) for x in text.split(",") if x.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"bad list {text!r}: {exc}") from exc
    return parse


def _load_json(path) -> dict:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return obj


# -- run-session ---------------------------------------------------------------------

def _session_config(args) -> SessionConfig:
    try:
        cfg = SessionConfig.from_dict(_load_json(args.config)) if args.config else SessionConfig()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad session config: {exc}") from exc
    overrides = {k: v for k, v in {
        "key_type": args.key_type, "num_of_splits": args.splits, "shuffle": args.shuffle,
        "channels_per_proxy": args.channels, "tagname": args.tagname, "relays": args.relays, "f": args.f,
        "selection_policy": args.selection_policy, "guard_policy": args.guard_policy, "seed": args.seed,
        "handling_ms": args.handling_ms,
    }.items() if v is not None}
    if args.crypto_ms is not None:
        overrides["crypto_ms_per_fragment"] = None if args.crypto_ms == "wall" else float(args.crypto_ms)
    lat = {k: v for k, v in {"per_hop_ms": args.per_hop_ms, "circuit_build_ms": args.build_ms,
                              "stabilization_ms": args.stabilization_ms}.items() if v is not None}
    try:
        if lat:
            overrides["latency"] = replace(cfg.latency, **lat)
        return replace(cfg, **overrides)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_run_session(args) -> int:
    cfg = _session_config(args)
    out = run_session(cfg, backend=args.backend)
    if args.out:
        out.write(args.out)
    print(out.report.to_json())
    if out.report.failure or not out.report.keys_agree:
        print(f"session failed: {out.report.failure}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# -- experiment ----------------------------------------------------------------------

def _experiment_params(args) -> dict:
    params = _load_json(args.config) if args.config else {}
    unknown = set(params) - {"f", "n", "policy", "trials", "seed", "relays", "weights", "workers"}
    if unknown:
        raise UsageError(f"unknown experiment config keys: {sorted(unknown)}")
    for key in ("f", "n", "policy"):
        if key in params and not isinstance(params[key], list):
            params[key] = [params[key]]
    for key in ("f", "n", "policy", "trials", "seed", "relays", "workers"):
        val = getattr(args, key)
        if val is not None:
            params[key] = val
    if args.weights:
        try:
            params["weights"] = json.loads(Path(args.weights).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read weights {args.weights}: {exc}") from exc
    for key in ("seed", "trials", "f", "n"):
        if key not in params:
            raise UsageError(f"--{key} is required")
    params.setdefault("policy", ["fresh"])
    return params


def cmd_experiment(args) -> int:
    p = _experiment_params(args)

    def progress(row):
        e = row.estimate
        print(f"{row.policy} f={row.f} n={row.n}: {e.successes}/{e.trials} p_hat={e.p_hat:.6g} "
              f"analytic={e.analytic_bound:.6g} [{e.status}]", file=sys.stderr)

    rows = adversary.sweep(p["f"], p["n"], p["policy"], int(p["trials"]), int(p["seed"]),
                           relays=int(p.get("relays", 100)), weights=p.get("weights"), backend=args.backend,
                           workers=int(p.get("workers", 1)), progress=None if args.quiet else progress)
    text = adversary.rows_to_csv(rows)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- validate ------------------------------------------------------------------------

def cmd_validate(args) -> int:
    opts = validation.ValidationOptions(seed=args.seed, trials=args.trials, seeds=args.seeds,
                                        fuzz_cases=args.fuzz_cases, backend=args.backend, workers=args.workers)
    only = args.only or list(validation.ALL_CRITERIA)
    bad = [n for n in only if n not in validation.ALL_CRITERIA]
    if bad:
        raise UsageError(f"unknown criteria {bad}")
    results = validation.validate(opts, only, report=lambda r: print(r.line(), flush=True))
    passed = sum(r.passed for r in results)
    print(f"{passed}/{len(results)} criteria passed")
    return EXIT_OK if passed == len(results) else EXIT_FAIL


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="onionkey", description=__doc__.splitlines()[0])
    parser.add_argument("--backend", choices=("numba", "numpy"), default=None,
                        help="kernel backend (default: numba when available)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    rs = sub.add_parser("run-session", help="run one key establishment on the simulated network")
    rs.add_argument("--config", help="session config JSON")
    rs.add_argument("--key-type", type=int)
    rs.add_argument("--splits", type=int, help="num_of_splits")
    rs.add_argument("--shuffle", action=argparse.BooleanOptionalAction, default=None)
    rs.add_argument("--channels", type=int, help="channels per proxy")
    rs.add_argument("--tagname")
    rs.add_argument("--relays", type=int)
    rs.add_argument("--f", type=float, help="compromised relay fraction")
    rs.add_argument("--selection-policy", choices=SELECTION_POLICIES)
    rs.add_argument("--guard-policy", choices=GUARD_POLICIES)
    rs.add_argument("--per-hop-ms", type=float)
    rs.add_argument("--build-ms", type=float)
    rs.add_argument("--stabilization-ms", type=float)
    rs.add_argument("--crypto-ms", help="stub cost per fragment operation in ms, or 'wall' to measure")
    rs.add_argument("--handling-ms", type=float)
    rs.add_argument("--seed", type=int)
    rs.add_argument("--out", help="directory for traces, observations.jsonl and report.json")
    rs.set_defaults(func=cmd_run_session)

    ex = sub.add_parser("experiment", help="Monte Carlo linkage sweep, CSV output")
    ex.add_argument("--config", help="experiment config JSON")
    ex.add_argument("--f", type=_csv_list(float), help="comma-separated compromised fractions")
    ex.add_argument("--n", type=_csv_list(int), help="comma-separated circuit counts")
    ex.add_argument("--policy", type=_csv_list(str), help=f"comma-separated, from {sorted(adversary.POLICIES)}")
    ex.add_argument("--trials", type=int)
    ex.add_argument("--seed", type=int)
    ex.add_argument("--relays", type=int)
    ex.add_argument("--weights", help="JSON list of per-relay bandwidth weights")
    ex.add_argument("--workers", type=int)
    ex.add_argument("--out", help="CSV path (default stdout)")
    ex.add_argument("--quiet", action="store_true", help="no progress lines on stderr")
    ex.set_defaults(func=cmd_experiment)

    va = sub.add_parser("validate", help="run the acceptance criteria")
    va.add_argument("--seed", type=int, default=validation.DEFAULT_SEED)
    va.add_argument("--trials", type=int, default=validation.DEFAULT_TRIALS)
    va.add_argument("--seeds", type=int, default=validation.ROUND_TRIP_SEEDS, help="seeds per round-trip cell")
    va.add_argument("--fuzz-cases", type=int, default=1000)
    va.add_argument("--workers", type=int, default=1)
    va.add_argument("--only", type=_csv_list(int), help="comma-separated criterion numbers")
    va.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))  # exits 2
    except OnionKeyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE if isinstance(exc, ValueError) else EXIT_FAIL
    return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
