"""Command-line experiment runner.

Three subcommands::

    cachemodel run <config.json> [--out PATH] [--threads N]
    cachemodel compare <a.csv> <b.csv> --tol X
    cachemodel trace <trace.tsv> --policy P --capacity C

``run`` reads one JSON scenario, evaluates every sweep point with the
analytic model, the simulator or both, and writes one CSV row per
(policy or strategy, capacity, engine).  Rows are sorted by key so the
file does not depend on the order in which the work pool finishes.

Exit codes: 0 success, 1 ``compare`` found differences above tolerance,
2 malformed input (config, CSV or trace), 3 an engine failed (for
example a fixed point did not converge).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from ._solve import ConvergenceError
from .netsim import run_network_replications
from .network import solve_network
from .policies import PolicySpec
from .simulation import DEFAULT_WARMUP, TraceError, replay_trace, run_replications
from .single import solve_characteristic_time
from .topology import CacheNetwork, TopologyError, parse_strategy
from .traffic import Traffic, explicit_popularity, zipf_popularity

__all__ = ["main", "run_scenario", "compare_csv", "load_scenario", "ConfigError", "SCENARIO_SCHEMA", "COLUMNS"]

COLUMNS = ("policy", "strategy", "C", "engine", "hit_total", "hit_ci", "per_node_hits", "tc_values",
           "runtime_s", "seed")

EXIT_OK, EXIT_DIFF, EXIT_INPUT, EXIT_ENGINE = 0, 1, 2, 3

_positive_int = {"type": "integer", "minimum": 1}

SCENARIO_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["engine", "system", "traffic", "popularity", "sweep"],
    "properties": {
        "engine": {"enum": ["analytic", "sim", "both"]},
        "system": {
            "oneOf": [
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["type", "policies"],
                    "properties": {
                        "type": {"const": "single"},
                        "policies": {"type": "array", "minItems": 1, "items": {"type": "string"}},
                    },
                },
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["type", "topology", "strategies"],
                    "properties": {
                        "type": {"const": "network"},
                        "topology": {
                            "oneOf": [
                                {"type": "string", "minLength": 1},
                                {
                                    "type": "object",
                                    "additionalProperties": False,
                                    "required": ["kind", "length"],
                                    "properties": {"kind": {"const": "chain"}, "length": _positive_int},
                                },
                                {
                                    "type": "object",
                                    "additionalProperties": False,
                                    "required": ["kind", "arity", "levels"],
                                    "properties": {
                                        "kind": {"const": "kary_tree"},
                                        "arity": _positive_int,
                                        "levels": _positive_int,
                                        "exogenous": {"enum": ["leaves", "all"]},
                                    },
                                },
                            ]
                        },
                        "strategies": {"type": "array", "minItems": 1, "items": {"type": "string"}},
                        "model": {"enum": ["refined", "naive"]},
                    },
                },
            ]
        },
        "traffic": {
            "oneOf": [
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind"],
                    "properties": {"kind": {"const": "irm"}},
                },
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind", "z"],
                    "properties": {"kind": {"const": "hyperexp"}, "z": {"type": "number", "minimum": 1}},
                },
            ]
        },
        "popularity": {
            "oneOf": [
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["alpha", "M"],
                    "properties": {"alpha": {"type": "number", "minimum": 0}, "M": {"type": "integer", "minimum": 2}},
                },
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["file"],
                    "properties": {"file": {"type": "string", "minLength": 1}},
                },
            ]
        },
        "sweep": {
            "oneOf": [
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["capacities"],
                    "properties": {"capacities": {"type": "array", "minItems": 1, "items": _positive_int}},
                },
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["capacity_scales"],
                    "properties": {
                        "capacity_scales": {
                            "type": "array", "minItems": 1, "items": {"type": "number", "exclusiveMinimum": 0},
                        }
                    },
                },
            ]
        },
        "sim": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "requests": _positive_int,
                "warmup": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "seeds": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
                "replications": _positive_int,
                "batches": {"type": "integer", "minimum": 2},
            },
        },
        "output": {"type": "string", "minLength": 1},
    },
}


class ConfigError(ValueError):
    """A scenario field is missing, malformed or inconsistent.

    ``path`` locates the field, e.g. ``system.policies[2]``.
    """

    def __init__(self, path, message):
        super().__init__(f"{path or '<root>'}: {message}")
        self.path = path


def _format_path(parts) -> str:
    out = ""
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out


@dataclass(frozen=True)
class SimControls:
    requests: int = 10**6
    warmup: float = DEFAULT_WARMUP
    seeds: tuple = (0,)
    batches: int = 20


@dataclass(frozen=True)
class Scenario:
    """A validated experiment: what to evaluate and with which engines."""

    engines: tuple
    kind: str
    items: tuple
    network: CacheNetwork | None
    refined: bool
    traffic: Traffic
    popularity: object
    sweep: tuple
    scaled: bool
    sim: SimControls
    output: Path | None


def _read_weights(path: Path):
    try:
        w = np.loadtxt(path, dtype=float, ndmin=1, comments="#")
    except (OSError, ValueError) as exc:
        raise ConfigError("popularity.file", f"cannot read weights from {str(path)!r}: {exc}") from None
    try:
        return explicit_popularity(w)
    except ValueError as exc:
        raise ConfigError("popularity.file", str(exc)) from None


def load_scenario(doc, base: Path | None = None) -> Scenario:
    """Validate a parsed config document and resolve every reference.

    Relative file paths resolve against ``base`` (the config's folder).
    Raises :class:`ConfigError` naming the offending field.
    """
    base = Path(base) if base is not None else Path.cwd()
    validator = jsonschema.Draft202012Validator(SCENARIO_SCHEMA)
    error = jsonschema.exceptions.best_match(validator.iter_errors(doc))
    if error is not None:
        raise ConfigError(_format_path(error.absolute_path), error.message)

    engines = ("analytic", "sim") if doc["engine"] == "both" else (doc["engine"],)
    t = doc["traffic"]
    traffic = Traffic.irm() if t["kind"] == "irm" else Traffic.hyperexp(float(t["z"]))
    p = doc["popularity"]
    if "file" in p:
        popularity = _read_weights(base / p["file"])
    else:
        popularity = zipf_popularity(float(p["alpha"]), int(p["M"]))
    M = popularity.M

    system = doc["system"]
    network = None
    refined = True
    if system["type"] == "single":
        items = []
        for i, name in enumerate(system["policies"]):
            try:
                items.append(PolicySpec.parse(name, 1))
            except ValueError as exc:
                raise ConfigError(f"system.policies[{i}]", str(exc)) from None
    else:
        items = []
        for i, name in enumerate(system["strategies"]):
            try:
                items.append(parse_strategy(name))
            except TopologyError as exc:
                raise ConfigError(f"system.strategies[{i}]", str(exc)) from None
        refined = system.get("model", "refined") == "refined"
        topo = system["topology"]
        try:
            if isinstance(topo, str):
                network = CacheNetwork.load(base / topo)
            elif topo["kind"] == "chain":
                network = CacheNetwork.chain(int(topo["length"]), 1)
            else:
                network = CacheNetwork.kary_tree(int(topo["arity"]), int(topo["levels"]), 1,
                                                 exogenous=topo.get("exogenous", "leaves"))
        except (OSError, ValueError, json.JSONDecodeError) as exc:
            raise ConfigError("system.topology", str(exc)) from None

    sweep_doc = doc["sweep"]
    scaled = "capacity_scales" in sweep_doc
    if scaled:
        if network is None or not isinstance(system["topology"], str):
            raise ConfigError("sweep.capacity_scales", "capacity scales apply to networks loaded from a file")
        sweep = tuple(float(s) for s in sweep_doc["capacity_scales"])
        for i, s in enumerate(sweep):
            cap = _scaled(network.capacities, s)
            if cap.max() >= M:
                raise ConfigError(f"sweep.capacity_scales[{i}]",
                                  f"scaled capacity {int(cap.max())} must be smaller than the catalog ({M})")
    else:
        sweep = tuple(int(c) for c in sweep_doc["capacities"])
        for i, c in enumerate(sweep):
            if c >= M:
                raise ConfigError(f"sweep.capacities[{i}]", f"capacity {c} must be smaller than the catalog ({M})")
    if len(set(sweep)) != len(sweep):
        raise ConfigError("sweep", "sweep values must be distinct")

    s = doc.get("sim", {})
    if "seeds" in s and ("seed" in s or "replications" in s):
        raise ConfigError("sim.seeds", "give either an explicit seed list or seed/replications, not both")
    if "seeds" in s:
        seeds = tuple(int(x) for x in s["seeds"])
        if len(set(seeds)) != len(seeds):
            raise ConfigError("sim.seeds", "replication seeds must be distinct")
    else:
        first = int(s.get("seed", 0))
        seeds = tuple(range(first, first + int(s.get("replications", 1))))
    sim = SimControls(int(s.get("requests", SimControls.requests)), float(s.get("warmup", DEFAULT_WARMUP)),
                      seeds, int(s.get("batches", SimControls.batches)))

    output = base / doc["output"] if "output" in doc else None
    return Scenario(engines, system["type"], tuple(items), network, refined, traffic, popularity, sweep, scaled,
                    sim, output)


def _scaled(capacities, scale):
    return np.maximum(1, np.rint(np.asarray(capacities) * scale)).astype(np.int64)


def _num(x) -> str:
    x = float(x)
    return "nan" if math.isnan(x) else f"{x:.12g}"


def _join(values) -> str:
    return ";".join(_num(v) for v in values)


def _c_label(value, scaled) -> str:
    return f"x{value:g}" if scaled else str(int(value))


def _evaluate(sc: Scenario, item, value, engine):
    """One sweep point with one engine -> CSV row dict."""
    start = time.perf_counter()
    seed = ""
    ci = ""
    if sc.kind == "single":
        policy = item.with_capacity(int(value))
        label, strategy = policy.label, ""
        if engine == "analytic":
            sol = solve_characteristic_time(policy, sc.traffic, sc.popularity)
            hit, nodes, tcs = sol.aggregate_hit, [sol.aggregate_hit], sol.times.values
        else:
            rep = run_replications(policy, sc.traffic, sc.popularity, sc.sim.requests, sc.sim.seeds,
                                   warmup_fraction=sc.sim.warmup, threads=1, batches=sc.sim.batches)
            hit, nodes, ci = rep.aggregate_hit, [rep.aggregate_hit], _num(rep.hit_ci)
            # LFU evicts by rank, not age: no eviction time to report
            tcs = () if np.all(np.isnan(rep.eviction_age)) else rep.eviction_age
            seed = ";".join(str(s) for s in sc.sim.seeds)
    else:
        name, q = item
        net = sc.network.with_strategy(name, q if name == "lcp" else None)
        net = net.with_capacity(_scaled(net.capacities, value) if sc.scaled else int(value))
        label = net.policy(0).label
        strategy = f"lcp({q:g})" if name == "lcp" else name
        if engine == "analytic":
            sol = solve_network(net, sc.traffic, sc.popularity, refined=sc.refined)
            hit, nodes, tcs = sol.total_hit, sol.node_hit, sol.characteristic_times
        else:
            rep = run_network_replications(net, sc.traffic, sc.popularity, sc.sim.requests, sc.sim.seeds,
                                           warmup_fraction=sc.sim.warmup, batches=sc.sim.batches)
            hit, nodes, tcs, ci = rep.total_hit, rep.node_hit_ratio, (), _num(rep.hit_ci)
            seed = ";".join(str(s) for s in sc.sim.seeds)
    return {
        "policy": label,
        "strategy": strategy,
        "C": _c_label(value, sc.scaled),
        "engine": engine,
        "hit_total": _num(hit),
        "hit_ci": ci,
        "per_node_hits": _join(nodes),
        "tc_values": _join(tcs),
        "runtime_s": f"{time.perf_counter() - start:.3f}",
        "seed": seed,
    }


def _row_key(row):
    c = row["C"]
    return row["policy"], row["strategy"], float(c[1:] if c.startswith("x") else c), row["engine"]


def run_scenario(sc: Scenario, threads: int = 1) -> list[dict]:
    """Evaluate every sweep point; rows come back in sorted key order.

    Any engine exception propagates after the pool has been joined.
    """
    jobs = [(item, value, engine) for item in sc.items for value in sc.sweep for engine in sc.engines]
    with ThreadPoolExecutor(max(1, int(threads))) as pool:
        futures = [pool.submit(_evaluate, sc, *job) for job in jobs]
        rows = []
        failure = None
        for fut in futures:
            try:
                rows.append(fut.result())
            except Exception as exc:  # collect the first failure, keep joining the rest
                failure = failure or exc
    if failure is not None:
        raise failure
    return sorted(rows, key=_row_key)


def _csv_text(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def _write_atomic(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_rows(path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"policy", "strategy", "C", "engine", "hit_total", "per_node_hits"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        return list(reader)


def _values(row):
    out = [float(row["hit_total"])]
    if row["per_node_hits"]:
        out += [float(v) for v in row["per_node_hits"].split(";")]
    return np.array(out)


def compare_csv(path_a, path_b, tol: float):
    """Pair rows of two result files and measure their hit differences.

    Rows pair on ``(policy, strategy, C)``, plus ``engine`` when both
    files hold the same set of engines; this lets an analytic file be
    checked against a simulation file.  Returns ``(report_lines, ok)``.
    """
    a, b = _read_rows(path_a), _read_rows(path_b)
    with_engine = {r["engine"] for r in a} == {r["engine"] for r in b}

    def index(rows, path):
        out = {}
        for r in rows:
            key = (r["policy"], r["strategy"], r["C"]) + ((r["engine"],) if with_engine else ())
            if key in out:
                raise ValueError(f"{path}: duplicate row key {','.join(key)}")
            out[key] = r
        return out

    ia, ib = index(a, path_a), index(b, path_b)
    lines, ok = [], True
    for key in sorted(set(ia) | set(ib)):
        name = ",".join(key)
        if key not in ib or key not in ia:
            lines.append(f"{name}: only in {path_a if key in ia else path_b}")
            ok = False
            continue
        va, vb = _values(ia[key]), _values(ib[key])
        if va.shape != vb.shape:
            lines.append(f"{name}: node count differs ({va.size - 1} vs {vb.size - 1})")
            ok = False
            continue
        diff = float(np.max(np.abs(va - vb)))
        good = diff <= tol
        ok &= good
        lines.append(f"{name}: max_diff={diff:.6g} {'ok' if good else 'FAIL'}")
    return lines, ok


def _cmd_run(args) -> int:
    path = Path(args.config)
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except json.JSONDecodeError as exc:
        print(f"config error: not valid JSON: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        sc = load_scenario(doc, path.parent)
    except ConfigError as exc:
        print(f"config error at {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        rows = run_scenario(sc, args.threads)
    except ConvergenceError as exc:
        print(f"solver did not converge: {exc}", file=sys.stderr)
        return EXIT_ENGINE
    except (ValueError, RuntimeError) as exc:
        print(f"engine failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ENGINE
    text = _csv_text(rows)
    out = Path(args.out) if args.out else sc.output
    if out is None:
        sys.stdout.write(text)
    else:
        _write_atomic(out, text)
    return EXIT_OK


def _cmd_compare(args) -> int:
    try:
        lines, ok = compare_csv(args.a, args.b, args.tol)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    print("\n".join(lines))
    return EXIT_OK if ok else EXIT_DIFF


def _cmd_trace(args) -> int:
    try:
        policy = PolicySpec.parse(args.policy, args.capacity)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    start = time.perf_counter()
    try:
        rep = replay_trace(policy, None, args.trace, warmup_fraction=args.warmup, seed=args.seed)
    except TraceError as exc:
        print(f"trace error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: cannot read trace: {exc}", file=sys.stderr)
        return EXIT_INPUT
    row = {
        "policy": policy.label,
        "strategy": "",
        "C": str(policy.capacity),
        "engine": "trace",
        "hit_total": _num(rep.aggregate_hit),
        "hit_ci": _num(rep.hit_ci) if rep.n_batches > 1 else "",
        "per_node_hits": _num(rep.aggregate_hit),
        "tc_values": _join(rep.eviction_age),
        "runtime_s": f"{time.perf_counter() - start:.3f}",
        "seed": str(args.seed),
    }
    sys.stdout.write(_csv_text([row]))
    return EXIT_OK


def _parser():
    parser = argparse.ArgumentParser(prog="cachemodel", description="Cache hit-ratio models and simulators.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="evaluate a JSON scenario and write CSV")
    run.add_argument("config")
    run.add_argument("--out", help="CSV path (overrides the config's output; stdout if neither is set)")
    run.add_argument("--threads", type=int, default=1, help="work-pool size")
    run.set_defaults(func=_cmd_run)

    cmp_ = sub.add_parser("compare", help="diff the hit columns of two result files")
    cmp_.add_argument("a")
    cmp_.add_argument("b")
    cmp_.add_argument("--tol", type=float, required=True, help="maximum allowed absolute difference")
    cmp_.set_defaults(func=_cmd_compare)

    tr = sub.add_parser("trace", help="replay a timestamp<TAB>object trace through one cache")
    tr.add_argument("trace")
    tr.add_argument("--policy", required=True, help="lru, fifo, random, lfu, qlru(q), klru(k) or 2lru")
    tr.add_argument("--capacity", type=int, required=True)
    tr.add_argument("--warmup", type=float, default=0.0, help="fraction of requests excluded from statistics")
    tr.add_argument("--seed", type=int, default=0, help="seed for randomized policies")
    tr.set_defaults(func=_cmd_trace)
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if getattr(args, "threads", 1) is not None and getattr(args, "threads", 1) < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_INPUT
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
