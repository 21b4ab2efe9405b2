"""Batch experiment runner and trace replay.

Subcommands: check-graph, llb, count, consensus-crash, consensus-omission,
replay.  Each run executes a seed range (in parallel across worker
processes; FTLLB_THREADS caps the pool), writes a versioned CSV plus a JSON
summary, and exits nonzero iff a hard invariant (value range, sandwich,
agreement persistence) was violated in any seed.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import graph as gm
from . import llb as lm
from . import oracle as om
from . import protocols as pm
from . import simnet as sm

CSV_VERSION = "ftllb-report v1"
CSV_COLUMNS = [
    "seed", "protocol", "n", "t", "adversary", "agreed", "valid",
    "decided_value", "rounds", "messages", "bits", "active_count",
    "range_ok", "oracle_ok", "persistence_ok", "detail",
]

PRESETS = {
    "desk": {"c1": 4.0, "c2": 8.0, "c_gnp": 20.0, "lambda2_floor": 0.85},
    "theory": {"c1": float(2**15), "c2": float(2**15), "c_gnp": 3200.0,
               "lambda2_floor": None},
}

ADVERSARIES = {"null": None}
ADVERSARIES.update({name: ("crash", cls) for name, cls in sm.CRASH_STRATEGIES.items()})
ADVERSARIES.update(
    {name: ("omission", cls) for name, cls in sm.OMISSION_STRATEGIES.items()}
)


class SpecError(Exception):
    pass


@dataclass
class ExperimentSpec:
    protocol: str
    n: int = 128
    t: int = 0
    adversary: str = "null"
    seed_start: int = 0
    seed_stop: int = 1
    preset: str = "desk"
    c1: Optional[float] = None
    c2: Optional[float] = None
    c_gnp: Optional[float] = None
    lambda2_floor: Optional[float] = None
    loads: str = "split"
    flags: Optional[int] = None
    oracle: bool = True
    out_dir: Optional[str] = None
    trace_dir: Optional[str] = None
    graph_file: Optional[str] = None

    def __post_init__(self):
        if self.protocol not in (
            "check-graph", "llb", "count", "consensus-crash", "consensus-omission"
        ):
            raise SpecError(f"unknown protocol {self.protocol!r}")
        if self.seed_stop <= self.seed_start:
            raise SpecError("seed range is empty")
        if self.n < 2:
            raise SpecError("need n >= 2")
        if not (0 <= self.t < self.n):
            raise SpecError("need 0 <= t < n")
        if self.preset not in PRESETS:
            raise SpecError(f"unknown preset {self.preset!r}")
        if self.adversary not in ADVERSARIES:
            raise SpecError(f"unknown adversary {self.adversary!r}")
        preset = PRESETS[self.preset]
        if self.c1 is None:
            self.c1 = preset["c1"]
        if self.c2 is None:
            self.c2 = preset["c2"]
        if self.c_gnp is None:
            self.c_gnp = preset["c_gnp"]
        if self.lambda2_floor is None:
            self.lambda2_floor = preset["lambda2_floor"]

    @property
    def seeds(self) -> range:
        return range(self.seed_start, self.seed_stop)

    def make_adversary(self):
        entry = ADVERSARIES[self.adversary]
        if entry is None or self.t == 0:
            return None
        kind, cls = entry
        if self.protocol == "consensus-crash" and kind != "crash":
            raise SpecError("consensus-crash requires a crash adversary")
        if self.protocol == "consensus-omission" and kind != "omission":
            raise SpecError("consensus-omission requires an omission adversary")
        return cls(self.t)


def spec_from_config_file(path: str) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    if path.endswith(".toml"):
        try:
            import tomllib
        except ImportError as exc:  # python < 3.11
            raise SpecError("TOML configs need Python >= 3.11; use JSON") from exc
        return tomllib.loads(text)
    return json.loads(text)


def _initial_loads(kind: str, n: int, seed: int) -> np.ndarray:
    if kind == "split":
        return np.array([v % 2 for v in range(n)], dtype=np.float64)
    if kind == "indicator":
        x = np.zeros(n)
        x[0] = 1.0
        return x
    if kind == "uniform":
        return np.random.default_rng([seed, 0x10AD5]).random(n)
    raise SpecError(f"unknown loads kind {kind!r}")


def _sample_topology(spec: ExperimentSpec, seed: int) -> gm.Graph:
    if spec.graph_file:
        return gm.Graph.from_file(spec.graph_file)
    q, _ = pm.set_graph_probability(spec.n, spec.c2)
    return gm.sample_gnp(spec.n, q, rng=np.random.default_rng([seed, 0x6EA9]))


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def run_seed(spec: ExperimentSpec, seed: int) -> dict:
    """Execute one seed of the spec and produce one report row."""
    row = {
        "seed": seed, "protocol": spec.protocol, "n": spec.n, "t": spec.t,
        "adversary": spec.adversary, "agreed": None, "valid": None,
        "decided_value": None, "rounds": 0, "messages": 0, "bits": 0,
        "active_count": None, "range_ok": True, "oracle_ok": None,
        "persistence_ok": None, "detail": "",
    }
    if spec.protocol == "check-graph":
        g = _sample_topology(spec, seed)
        degs = g.degrees()
        params = gm.WellConnectedParams(
            max(float(degs.min()), 1.0), float(degs.max()), spec.lambda2_floor
        )
        verdict = gm.check_well_connected(g, params)
        row["active_count"] = g.n
        row["detail"] = (
            f"lambda2={verdict.lambda2!r};certified={str(verdict.ok).lower()}"
            f";d_min={int(degs.min())};d_max={int(degs.max())}"
            + ("" if verdict.ok else f";reason={verdict.reason}")
        )
        row["oracle_ok"] = verdict.ok
        return row

    if spec.protocol == "llb":
        g = _sample_topology(spec, seed)
        degs = g.degrees()
        params = gm.WellConnectedParams(
            max(float(degs.min()), 1.0), float(degs.max()), spec.lambda2_floor
        )
        verdict = gm.check_well_connected(g, params)
        cfg = lm.config_with_fallback(float(degs.min()), float(degs.max()), g.n)
        loads = _initial_loads(spec.loads, g.n, seed)
        ctx = sm.SimContext(g.n, seed, spec.make_adversary(),
                            trace=sm.TraceData() if spec.trace_dir else None)
        run = lm.run_llb(
            g, loads, cfg, ctx=ctx, graph=g,
            record_deliveries=bool(spec.oracle or spec.trace_dir),
        )
        mu = float(loads.mean())
        err = float(np.max(np.abs(run.x_final[run.active] - mu))) if run.active.any() else math.nan
        row.update(
            rounds=run.metrics.rounds, messages=run.metrics.messages_sent,
            bits=run.metrics.bits, active_count=int(run.active.sum()),
            range_ok=run.range_report.violations == 0,
        )
        detail = [f"certified={str(verdict.ok).lower()}", f"max_err={err!r}"]
        if not verdict.ok:
            detail.append(f"warning=uncertified:{verdict.reason}")
        if spec.oracle:
            sandwich = om.sandwich_check(run, graph=g)
            row["oracle_ok"] = sandwich.passed
            detail.append(f"sandwich_violations={sandwich.violations}")
        if spec.trace_dir:
            _write_llb_trace(spec, seed, g, cfg, run, ctx)
        row["detail"] = ";".join(detail)
        return row

    if spec.protocol == "count":
        k = spec.flags if spec.flags is not None else spec.n // 4
        flags = np.zeros(spec.n, dtype=int)
        flags[:k] = 1
        res = pm.ae_counting(flags, c2=spec.c2, seed=seed, adversary=spec.make_adversary())
        returned = res.returned()
        devs = [abs(e - k) for e in res.estimates if e is not None]
        row.update(
            rounds=res.rounds, messages=res.messages, bits=res.bits,
            active_count=returned, range_ok=res.range_violations == 0,
        )
        row["detail"] = (
            f"true_count={k};returned={returned};max_dev={max(devs) if devs else ''}"
        )
        return row

    if spec.protocol == "consensus-crash":
        cfg = pm.ConsensusConfig.crash(spec.n, spec.t, c1=spec.c1, c2=spec.c2)
        inputs = [v % 2 for v in range(spec.n)] if spec.loads == "split" else \
            [1] * spec.n if spec.loads == "ones" else [0] * spec.n
        res = pm.consensus_crash(inputs, cfg, seed=seed, adversary=spec.make_adversary())
    else:
        cfg = pm.ConsensusConfig.omission(spec.n, spec.t, c1=spec.c1, c2=spec.c2)
        inputs = [v % 2 for v in range(spec.n)] if spec.loads == "split" else \
            [1] * spec.n if spec.loads == "ones" else [0] * spec.n
        res = pm.consensus_omission(inputs, cfg, seed=seed, adversary=spec.make_adversary())
    row.update(
        agreed=res.agreed, valid=res.valid, decided_value=res.decided_value,
        rounds=res.rounds, messages=res.messages, bits=res.bits,
        active_count=res.active_count, range_ok=res.range_violations == 0,
        persistence_ok=res.persistence_ok,
    )
    row["detail"] = (
        f"iterations={cfg.iterations};coin_iterations={res.coin_iterations}"
        f";suspected={res.suspected_count};faulted={len(res.faulted)}"
    )
    return row


def _write_llb_trace(spec, seed, g, cfg, run, ctx) -> None:
    trace = ctx.trace
    trace.header = {
        "protocol": "llb",
        "n": g.n,
        "seed": seed,
        "budget": spec.t,
        "adversary": {"name": spec.adversary,
                      "kind": "null" if spec.adversary == "null" else
                      ADVERSARIES[spec.adversary][0]},
        "d_min": cfg.d_min,
        "d_max": cfg.d_max,
        "tau1": cfg.tau1,
        "tau2": cfg.tau2,
        "x0": [float(v) for v in run.x0],
        "graph": g.to_text(),
    }
    for i, row in enumerate(trace.rounds):
        row.senders = [int(v) for v in np.flatnonzero(run.senders_by_round[i])]
        row.drops = [[int(u), int(v)] for u, v in run.drops_by_round[i]]
        r = i + 1
        if r <= cfg.tau1:
            row.loads = [float(v) for v in run.x_main[r]]
        else:
            row.loads = [float(v) for v in run.x_fix[r - cfg.tau1]]
    out = Path(spec.trace_dir)
    out.mkdir(parents=True, exist_ok=True)
    trace.to_jsonl(out / f"trace_{spec.protocol}_{seed}.jsonl")


def replay_trace(path: str, checks: Optional[list] = None) -> dict:
    """Re-run the oracle checks against a stored llb trace without simulating."""
    trace = sm.TraceData.from_jsonl(path)
    header = trace.header
    if header.get("protocol") != "llb":
        raise sm.TraceError("replay supports llb traces", line=1)
    for key in ("graph", "x0", "d_min", "d_max", "tau1", "tau2"):
        if key not in header:
            raise sm.TraceError(f"header lacks {key!r}", line=1)
    g = gm.Graph.from_text(header["graph"])
    cfg = lm.LLBConfig(
        header["d_min"], header["d_max"], header["tau1"], header["tau2"], g.n
    )
    n = g.n
    total = cfg.tau1 + cfg.tau2
    if len(trace.rounds) != total:
        raise sm.TraceError(
            f"trace holds {len(trace.rounds)} rounds, config promises {total}",
            line=len(trace.rounds) + 1,
        )
    x0 = np.array(header["x0"], dtype=np.float64)
    kind = header.get("adversary", {}).get("kind", "null")
    live = np.ones(n, dtype=bool)
    senders_by_round, drops_by_round, live_by_round = [], [], []
    x_main = np.empty((cfg.tau1 + 1, n))
    x_main[0] = x0
    x_fix = np.empty((cfg.tau2 + 1, n))
    for i, row in enumerate(trace.rounds, start=1):
        if row.senders is None or row.drops is None or row.loads is None:
            raise sm.TraceError("round lacks senders/drops/loads detail", line=i + 1)
        mask = np.zeros(n, dtype=bool)
        mask[row.senders] = True
        if (mask & ~live).any():
            raise sm.TraceError("crashed node listed as sender", line=i + 1)
        senders_by_round.append(mask)
        drops_by_round.append([tuple(p) for p in row.drops])
        if kind == "crash":
            for v in row.faulted:
                live[v] = False
        live_by_round.append(live.copy())
        loads = np.array(row.loads, dtype=np.float64)
        if i <= cfg.tau1:
            x_main[i] = loads
        if i == cfg.tau1:
            x_fix[0] = loads
        if i > cfg.tau1:
            x_fix[i - cfg.tau1] = loads
    run = lm.LLBRun(
        cfg=cfg, x0=x0, x_final=np.array(trace.rounds[-1].loads),
        silent=np.zeros(n, dtype=bool), live=live,
        participants=np.ones(n, dtype=bool),
        range_report=lm.RangeReport(float(x0.min()), float(x0.max())),
        metrics=sm.Metrics(), x_main=x_main, x_fix=x_fix,
        senders_by_round=senders_by_round, drops_by_round=drops_by_round,
        live_by_round=live_by_round, send_bool=g.adjacency_matrix(dtype=bool),
    )
    wanted = set(checks) if checks else {"range", "sandwich"}
    verdicts: dict = {"trace": str(path), "rounds": total}
    if "range" in wanted:
        lo, hi = float(x0.min()), float(x0.max())
        ok = True
        for i in range(1, cfg.tau1 + 1):
            mask = run.participants & live_by_round[i - 1]
            vals = x_main[i][mask]
            if vals.size and (vals.min() < lo - 1e-9 or vals.max() > hi + 1e-9):
                ok = False
                break
        verdicts["range"] = {"passed": ok}
    if "sandwich" in wanted:
        sv = om.sandwich_check(run, graph=g)
        verdicts["sandwich"] = {
            "passed": sv.passed, "violations": sv.violations,
            "first_violation": sv.first,
        }
    return verdicts


@dataclass
class ExperimentReport:
    spec: ExperimentSpec
    rows: list = field(default_factory=list)

    @property
    def hard_violations(self) -> int:
        bad = 0
        for row in self.rows:
            if row["range_ok"] is False:
                bad += 1
            elif row["oracle_ok"] is False and row["protocol"] == "llb":
                bad += 1
            elif row["persistence_ok"] is False:
                bad += 1
        return bad

    def to_csv(self) -> str:
        lines = [f"# {CSV_VERSION}", ",".join(CSV_COLUMNS)]
        for row in self.rows:
            lines.append(",".join(_fmt(row[c]) for c in CSV_COLUMNS))
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        rounds = sorted(r["rounds"] for r in self.rows)
        consensus = [r for r in self.rows if r["agreed"] is not None]
        ok = sum(1 for r in consensus if r["agreed"] and r["valid"])
        def pct(values, q):
            if not values:
                return 0
            k = min(len(values) - 1, int(math.ceil(q * len(values))) - 1)
            return values[max(k, 0)]
        return {
            "spec": {
                k: v for k, v in dataclasses.asdict(self.spec).items()
                if k not in ("out_dir", "trace_dir")  # destinations, not parameters
            },
            "rows": len(self.rows),
            "success_rate": (ok / len(consensus)) if consensus else None,
            "rounds_p50": pct(rounds, 0.5),
            "rounds_p90": pct(rounds, 0.9),
            "rounds_max": rounds[-1] if rounds else 0,
            "messages_total": sum(r["messages"] for r in self.rows),
            "hard_violations": self.hard_violations,
        }


def _pool_init():
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")


def _worker(args) -> dict:
    spec_dict, seed = args
    return run_seed(ExperimentSpec(**spec_dict), seed)


def run(spec: ExperimentSpec, threads: Optional[int] = None) -> ExperimentReport:
    """Execute every seed, attach verdicts, write CSV + JSON when out_dir set."""
    report = ExperimentReport(spec)
    seeds = list(spec.seeds)
    if threads is None:
        threads = int(os.environ.get("FTLLB_THREADS", os.cpu_count() or 1))
    threads = max(1, min(threads, len(seeds)))
    if threads == 1 or len(seeds) == 1:
        rows = [run_seed(spec, seed) for seed in seeds]
    else:
        import multiprocessing as mp

        spec_dict = dataclasses.asdict(spec)
        with mp.get_context("spawn").Pool(threads, initializer=_pool_init) as pool:
            rows = pool.map(_worker, [(spec_dict, s) for s in seeds], chunksize=1)
    report.rows = sorted(rows, key=lambda r: r["seed"])
    if spec.out_dir:
        out = Path(spec.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
        (out / "summary.json").write_text(
            json.dumps(report.summary(), sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )
    return report


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--n", type=int, default=128)
    sub.add_argument("--t", type=int, default=0)
    sub.add_argument("--seed-range", default="0:1", help="start:stop (stop exclusive)")
    sub.add_argument("--adversary", default="null", choices=sorted(ADVERSARIES))
    sub.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    sub.add_argument("--c1", type=float, default=None)
    sub.add_argument("--c2", type=float, default=None)
    sub.add_argument("--c-gnp", type=float, default=None)
    sub.add_argument("--lambda2-floor", type=float, default=None)
    sub.add_argument("--loads", default="split", choices=["split", "indicator", "uniform", "ones", "zeros"])
    sub.add_argument("--flags", type=int, default=None)
    sub.add_argument("--oracle", default="on", choices=["on", "off"])
    sub.add_argument("--out", default=None)
    sub.add_argument("--trace-dir", default=None)
    sub.add_argument("--graph-file", default=None)
    sub.add_argument("--config", default=None, help="JSON/TOML spec file; flags override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ftllb",
        description="Fault-tolerant local load balancing experiments",
    )
    subs = parser.add_subparsers(dest="command", required=True)
    for name in ("check-graph", "llb", "count", "consensus-crash", "consensus-omission"):
        _add_common(subs.add_parser(name))
    rep = subs.add_parser("replay")
    rep.add_argument("trace")
    rep.add_argument("--checks", default=None, help="comma list: range,sandwich")
    return parser


def _spec_from_args(args) -> ExperimentSpec:
    base: dict = {}
    if args.config:
        base = spec_from_config_file(args.config)
    start, _, stop = args.seed_range.partition(":")
    fields = dict(
        protocol=args.command,
        n=args.n, t=args.t,
        adversary=args.adversary,
        seed_start=int(start), seed_stop=int(stop or int(start) + 1),
        preset=args.preset, c1=args.c1, c2=args.c2, c_gnp=args.c_gnp,
        lambda2_floor=args.lambda2_floor, loads=args.loads, flags=args.flags,
        oracle=args.oracle == "on", out_dir=args.out, trace_dir=args.trace_dir,
        graph_file=args.graph_file,
    )
    merged = {**fields, **{k: v for k, v in base.items() if k in ExperimentSpec.__dataclass_fields__}}
    # explicit CLI flags override the config file
    parser_defaults = dict(
        n=128, t=0, adversary="null", preset="desk", loads="split",
        seed_start=0, seed_stop=1,
    )
    for key, value in fields.items():
        default = parser_defaults.get(key)
        if value is not None and (default is None or value != default):
            merged[key] = value
    merged["protocol"] = args.command
    return ExperimentSpec(**merged)


def main(argv=None) -> int:
    _pool_init()
    args = build_parser().parse_args(argv)
    if args.command == "replay":
        checks = args.checks.split(",") if args.checks else None
        try:
            verdicts = replay_trace(args.trace, checks)
        except sm.TraceError as err:
            print(f"trace rejected: {err}", file=sys.stderr)
            return 2
        print(json.dumps(verdicts, sort_keys=True, indent=2))
        passed = all(v.get("passed", True) for v in verdicts.values() if isinstance(v, dict))
        return 0 if passed else 1
    try:
        spec = _spec_from_args(args)
        report = run(spec)
    except (SpecError, pm.InvalidDensity) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    print(json.dumps(report.summary(), sort_keys=True, indent=2))
    return 0 if report.hard_violations == 0 else 1


if __name__ == "__main__":
    sys.exit(main())
