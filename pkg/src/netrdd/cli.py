"""Command-line interface: ``estimate``, ``simulate``, ``boundary`` and ``diagnose``.

Failures print a one-line JSON error report to stderr and exit with a
stable code (see ``EXIT_CODES``).  Output files are written to a temporary
sibling and renamed into place, so a failed run never leaves partial files.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .boundary import build_boundary
from .estimators import Dataset, EffectRequest, estimate, estimates_to_csv
from .exposure import mapping_from_name
from .graph import (
    DEPENDENCY_MODES,
    GraphError,
    InterferenceSets,
    degree_diagnostics,
    interference_from_clusters,
    interference_from_network,
    read_edge_list,
)
from .kernel_fit import Kernel
from .simulate import SCENARIOS, DgpConfig, default_effects, run_monte_carlo
from .variance import VARIANCE_MODES

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    tomllib = None

EXIT_CODES = {
    "config_error": 2,
    "input_error": 3,
    "estimation_error": 4,
    "simulation_error": 5,
    "io_error": 6,
}


class CliError(Exception):
    def __init__(self, code: str, message: str, **context):
        super().__init__(message)
        self.code = code
        self.context = context

    def report(self) -> str:
        return json.dumps({"error": self.code, "message": str(self), **self.context}, sort_keys=True)


def atomic_write(path: str | Path, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file in the same directory."""
    path = Path(path)
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


# ---------------------------------------------------------------- config

@dataclass
class InputSchema:
    path: str
    id: str = "id"
    score: str = "score"
    outcome: str = "outcome"
    cluster: str | None = None
    strata: list[str] = field(default_factory=list)
    edges: str | None = None
    treatment: str | None = None


@dataclass
class RunConfig:
    data: InputSchema | None = None
    cutoff: float = 0.0
    exposure: str = "one_treated"
    effects: list[dict] = field(default_factory=list)
    kernel: str = "triangular"
    graph_mode: str = "overlap"
    variance: list[str] = field(default_factory=lambda: ["network", "iid"])
    bias_correct: bool = False
    max_neighbors: int | None = None
    seed: int = 0
    output_csv: str | None = None
    output_json: str | None = None


def _load_structured(path: str) -> dict:
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise CliError("io_error", f"cannot read config {path}: {exc.strerror}") from None
    if p.suffix.lower() == ".toml":
        if tomllib is None:
            raise CliError("config_error", "TOML configs need Python 3.11 or newer; use JSON")
        try:
            return tomllib.loads(raw.decode("utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise CliError("config_error", f"{path}: {exc}") from None
    try:
        return json.loads(raw.decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError("config_error", f"{path}:{exc.lineno}: {exc.msg}") from None


def parse_config(obj: dict, base: Path | None = None) -> RunConfig:
    """Validate a config mapping; every enumerated name is checked before any work starts."""
    if not isinstance(obj, dict):
        raise CliError("config_error", "config must be a mapping")
    known = {"data", "cutoff", "exposure", "effects", "kernel", "graph_mode", "variance", "bias_correct",
             "max_neighbors", "seed", "output"}
    extra = set(obj) - known
    if extra:
        raise CliError("config_error", f"unknown config keys: {sorted(extra)}")
    cfg = RunConfig()
    if "data" in obj:
        d = dict(obj["data"])
        if "path" not in d:
            raise CliError("config_error", "data.path is required")
        if base is not None:
            for key in ("path", "edges"):
                if d.get(key) and not os.path.isabs(d[key]):
                    d[key] = str(base / d[key])
        try:
            cfg.data = InputSchema(**d)
        except TypeError as exc:
            raise CliError("config_error", f"bad data section: {exc}") from None
    for key in ("cutoff", "exposure", "kernel", "graph_mode", "bias_correct", "max_neighbors", "seed"):
        if key in obj:
            setattr(cfg, key, obj[key])
    if "variance" in obj:
        v = obj["variance"]
        cfg.variance = [v] if isinstance(v, str) else list(v)
    cfg.effects = list(obj.get("effects", []))
    out = obj.get("output", {})
    cfg.output_csv, cfg.output_json = out.get("csv"), out.get("json")
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    try:
        Kernel.from_name(cfg.kernel)
        mapping_from_name(cfg.exposure)
    except ValueError as exc:
        raise CliError("config_error", str(exc)) from None
    if cfg.graph_mode not in DEPENDENCY_MODES:
        raise CliError("config_error", f"unknown graph mode {cfg.graph_mode!r}; expected one of {DEPENDENCY_MODES}")
    for m in cfg.variance:
        if m not in VARIANCE_MODES:
            raise CliError("config_error", f"unknown variance mode {m!r}; expected one of {VARIANCE_MODES}")
    if cfg.max_neighbors is not None and int(cfg.max_neighbors) < 0:
        raise CliError("config_error", "max_neighbors must be nonnegative")
    for k, spec in enumerate(cfg.effects):
        effect_request(spec, cfg, k)


def parse_exposure_value(v) -> Fraction:
    """Exposure values from config: integers, booleans or ``"a/b"`` strings."""
    if isinstance(v, bool):
        return Fraction(int(v))
    if isinstance(v, int):
        return Fraction(v)
    if isinstance(v, str):
        try:
            return Fraction(v.strip())
        except ValueError:
            pass
    raise CliError("config_error", f"exposure value {v!r} must be an integer or a fraction string like '1/2'")


def _pair(v, what: str) -> tuple[int, Fraction]:
    if isinstance(v, str):
        v = v.split(",")
    if not isinstance(v, (list, tuple)) or len(v) != 2:
        raise CliError("config_error", f"{what} must be a (d, g) pair")
    try:
        d = int(v[0])
    except (TypeError, ValueError):
        raise CliError("config_error", f"{what}: own treatment must be 0 or 1") from None
    if d not in (0, 1):
        raise CliError("config_error", f"{what}: own treatment must be 0 or 1")
    return d, parse_exposure_value(v[1].strip() if isinstance(v[1], str) else v[1])


def effect_request(spec: dict, cfg: RunConfig, k: int = 0) -> EffectRequest:
    if not isinstance(spec, dict) or "kind" not in spec:
        raise CliError("config_error", f"effect #{k} needs a 'kind'")
    kw = dict(p=int(spec.get("p", 1)), kernel=spec.get("kernel", cfg.kernel), h=spec.get("h"), b=spec.get("b"),
              bias_correct=bool(spec.get("bias_correct", cfg.bias_correct)),
              variance_modes=tuple(spec.get("variance", cfg.variance)), label=spec.get("label"))
    kind = spec["kind"]
    try:
        if kind == "boundary":
            return EffectRequest.boundary(_pair(spec.get("from"), f"effect #{k} 'from'"),
                                          _pair(spec.get("to"), f"effect #{k} 'to'"), **kw)
        if kind == "direct_subset":
            return EffectRequest.direct_subset(parse_exposure_value(spec.get("g")), **kw)
        if kind in ("overall_direct", "overall_indirect"):
            return EffectRequest(kind, **kw)
    except ValueError as exc:
        raise CliError("config_error", f"effect #{k}: {exc}") from None
    raise CliError("config_error", f"effect #{k}: unknown kind {kind!r}")


# ---------------------------------------------------------------- ingest

def _read_rows(path: str) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            rows = list(reader)
    except OSError as exc:
        raise CliError("io_error", f"cannot read {path}: {exc.strerror}") from None
    if header is None:
        raise CliError("input_error", f"{path}: empty file")
    return [h.strip() for h in header], rows


def _numeric(value: str, path: str, line: int, col: str) -> float:
    try:
        v = float(value)
    except ValueError:
        raise CliError("input_error", f"{path}:{line}: column {col!r} is not numeric ({value!r})",
                       line=line, column=col) from None
    if not math.isfinite(v):
        raise CliError("input_error", f"{path}:{line}: column {col!r} is not finite", line=line, column=col)
    return v


def ingest(schema: InputSchema, cutoff: float = 0.0, exposure: str = "one_treated",
           graph_mode: str = "overlap", max_neighbors: int | None = None, log=None) -> Dataset:
    """Read the unit CSV (and edge list, if any) into a :class:`Dataset`.

    Diagnostics (row count, empty interference sets, size histogram) go to
    ``log`` when given.
    """
    header, rows = _read_rows(schema.path)
    cols = [schema.id, schema.score, schema.outcome]
    cols += [schema.cluster] if schema.cluster else []
    cols += list(schema.strata)
    cols += [schema.treatment] if schema.treatment else []
    missing = [c for c in cols if c not in header]
    if missing:
        raise CliError("input_error", f"{schema.path}: missing columns {missing}")
    if not (schema.cluster or schema.strata or schema.edges):
        raise CliError("config_error", "data needs a cluster column, stratum columns or an edge list")
    pos = {c: header.index(c) for c in cols}
    ids, x, y, labels, strata, treat = [], [], [], [], [], []
    seen: dict[str, int] = {}
    for r, row in enumerate(rows):
        line = r + 2
        if len(row) != len(header):
            raise CliError("input_error", f"{schema.path}:{line}: expected {len(header)} fields, got {len(row)}",
                           line=line)
        uid = row[pos[schema.id]].strip()
        if uid in seen:
            raise CliError("input_error", f"{schema.path}:{line}: duplicate id {uid!r} (first on line {seen[uid]})",
                           line=line)
        seen[uid] = line
        ids.append(uid)
        x.append(_numeric(row[pos[schema.score]], schema.path, line, schema.score))
        y.append(_numeric(row[pos[schema.outcome]], schema.path, line, schema.outcome))
        if schema.cluster:
            labels.append(row[pos[schema.cluster]].strip())
        if schema.strata:
            strata.append(tuple(row[pos[c]].strip() for c in schema.strata))
        if schema.treatment:
            treat.append(_numeric(row[pos[schema.treatment]], schema.path, line, schema.treatment))
    n = len(ids)
    if n == 0:
        raise CliError("input_error", f"{schema.path}: no data rows")
    x_arr = np.array(x)
    if schema.treatment:
        expected = (x_arr >= cutoff).astype(float)
        bad = np.flatnonzero(np.array(treat) != expected)
        if bad.size:
            raise CliError("input_error", f"{schema.path}:{bad[0] + 2}: treatment column disagrees with "
                           f"1(score >= {cutoff}) on {bad.size} rows; only sharp designs are supported",
                           line=int(bad[0] + 2))
    try:
        if schema.edges:
            sets = interference_from_network(read_edge_list(schema.edges, ids=ids))
            clusters = np.array(labels) if labels else None
        else:
            grp = labels if labels else [""] * n
            sets = interference_from_clusters(grp, strata if strata else None)
            clusters = None
    except GraphError as exc:
        raise CliError("input_error", str(exc)) from None
    try:
        data = Dataset(x_arr, np.array(y), sets, cutoff, mapping_from_name(exposure), clusters=clusters,
                       graph_mode=graph_mode, ids=ids)
    except ValueError as exc:
        raise CliError("input_error", str(exc)) from None
    sizes = sets.sizes
    if log is not None:
        hist = Counter(int(s) for s in sizes)
        print(f"rows: {n}", file=log)
        print(f"empty interference sets: {int(np.sum(sizes == 0))}", file=log)
        print("interference set sizes: " + ", ".join(f"{k}:{hist[k]}" for k in sorted(hist)), file=log)
    if max_neighbors is not None:
        data = data.restrict_max_neighbors(int(max_neighbors))
        if log is not None:
            print(f"units with |S_i| <= {max_neighbors}: {int(data.eligible.sum())} of {n}", file=log)
    return data


def export_dataset(data: Dataset, csv_path: str | Path, edges_path: str | Path | None = None) -> InputSchema:
    """Write a dataset so that :func:`ingest` reproduces it.

    Cluster-built sets are written as a cluster column; anything else needs
    ``edges_path`` for a symmetric edge list.
    """
    lines = ["id,score,outcome" + ("" if edges_path else ",cluster")]
    for i in range(data.n):
        row = f"{data.ids[i]},{float(data.x[i])!r},{float(data.y[i])!r}"
        if not edges_path:
            if data.sets.clusters is None:
                raise ValueError("interference sets carry no cluster labels; pass edges_path")
            row += f",{int(data.sets.clusters[i])}"
        lines.append(row)
    atomic_write(csv_path, "\n".join(lines) + "\n")
    schema = InputSchema(path=str(csv_path), cluster=None if edges_path else "cluster")
    if edges_path:
        out = []
        for i in range(data.n):
            for j in data.sets[i]:
                if i < j:
                    out.append(f"{data.ids[i]} {data.ids[int(j)]}")
        atomic_write(edges_path, "\n".join(out) + ("\n" if out else ""))
        schema.edges = str(edges_path)
    return schema


# ---------------------------------------------------------------- commands

def _apply_overrides(cfg: RunConfig, args) -> None:
    if getattr(args, "kernel", None):
        cfg.kernel = args.kernel
    if getattr(args, "graph_mode", None):
        cfg.graph_mode = args.graph_mode
    if getattr(args, "variance", None):
        cfg.variance = args.variance.split(",")
    if getattr(args, "max_neighbors", None) is not None:
        cfg.max_neighbors = args.max_neighbors
    if getattr(args, "bc", False):
        cfg.bias_correct = True
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    for e in cfg.effects:
        if getattr(args, "h", None) is not None:
            e["h"] = args.h
        if getattr(args, "b", None) is not None:
            e["b"] = args.b
        if getattr(args, "bc", False):
            e["bias_correct"] = True
        if getattr(args, "kernel", None):
            e["kernel"] = args.kernel
        if getattr(args, "variance", None):
            e["variance"] = cfg.variance
    validate_config(cfg)


def _load_run_config(args) -> RunConfig:
    obj = _load_structured(args.config) if args.config else {}
    base = Path(args.config).resolve().parent if args.config else None
    if args.data:
        obj.setdefault("data", {})
        obj["data"] = dict(obj["data"], path=args.data)
    if getattr(args, "edges", None):
        obj.setdefault("data", {})["edges"] = args.edges
    if getattr(args, "cluster", None):
        obj.setdefault("data", {})["cluster"] = args.cluster
    cfg = parse_config(obj, base)
    _apply_overrides(cfg, args)
    if args.out_csv:
        cfg.output_csv = args.out_csv
    if args.out_json:
        cfg.output_json = args.out_json
    if cfg.data is None:
        raise CliError("config_error", "no data file given (use --data or a data section)")
    return cfg


def run_estimate(cfg: RunConfig, log=None) -> str:
    log = sys.stderr if log is None else log
    if not cfg.effects:
        raise CliError("config_error", "no effects requested")
    reqs = [effect_request(e, cfg, k) for k, e in enumerate(cfg.effects)]
    data = ingest(cfg.data, cfg.cutoff, cfg.exposure, cfg.graph_mode, cfg.max_neighbors, log=log)
    results = []
    for req in reqs:
        try:
            results.append(estimate(data, req))
        except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
            raise CliError("estimation_error", f"{req.name}: {exc}", effect=req.name) from None
    text = estimates_to_csv(results)
    if cfg.output_csv:
        atomic_write(cfg.output_csv, text)
    if cfg.output_json:
        atomic_write(cfg.output_json, json.dumps([r.to_dict() for r in results], indent=2, default=_json_default) + "\n")
    return text


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, Fraction):
        return str(o)
    raise TypeError(type(o).__name__)


def _cmd_estimate(args) -> int:
    cfg = _load_run_config(args)
    text = run_estimate(cfg)
    if not cfg.output_csv:
        sys.stdout.write(text)
    return 0


SCENARIO_ALIASES = {"cluster3": ("cluster", 3)}


def _cmd_simulate(args) -> int:
    scen, size = SCENARIO_ALIASES.get(args.scenario, (args.scenario, args.group_size))
    if scen not in SCENARIOS:
        raise CliError("config_error", f"unknown scenario {args.scenario!r}")
    sizes = tuple(int(s) for s in args.sizes.split(",")) if args.sizes else (3, 4, 5, 6, 8)
    try:
        cfg = DgpConfig(scenario=scen, n=args.n, seed=args.seed, group_size=size, rewire_p=args.rewire_p,
                        degree=args.degree, sizes=sizes)
        modes = tuple(args.variance.split(",")) if args.variance else ("network", "iid", "cluster")
        if scen == "smallworld" and "cluster" in modes:
            modes = tuple(m for m in modes if m != "cluster")
        effects = default_effects(bias_correct=args.bc, variance_modes=modes, kernel=args.kernel or "triangular")
        if args.h is not None or args.b is not None:
            effects = [EffectRequest(e.kind, e.source, e.target, e.g, e.p, e.kernel, args.h, args.b, e.bias_correct,
                                     e.variance_modes, e.label) for e in effects]
    except ValueError as exc:
        raise CliError("config_error", str(exc)) from None
    try:
        report = run_monte_carlo(cfg, args.reps, effects, workers=args.workers)
    except RuntimeError as exc:
        raise CliError("simulation_error", str(exc)) from None
    text = report.to_csv()
    if args.out_csv:
        atomic_write(args.out_csv, text)
    else:
        sys.stdout.write(text)
    if args.out_json:
        atomic_write(args.out_json, report.to_json(indent=2) + "\n")
    return 0


def _cmd_boundary(args) -> int:
    try:
        mapping = mapping_from_name(args.exposure)
    except ValueError as exc:
        raise CliError("config_error", str(exc)) from None
    src, tgt = _pair(args.source, "--from"), _pair(args.target, "--to")
    try:
        spec = build_boundary(mapping, args.size, src, tgt)
    except ValueError as exc:
        raise CliError("estimation_error", str(exc)) from None
    for line in spec.describe():
        print(line)
    print(f"min codimension: {spec.min_codim}")
    return 0


def _cmd_diagnose(args) -> int:
    cfg = _load_run_config(args)
    data = ingest(cfg.data, cfg.cutoff, cfg.exposure, cfg.graph_mode, cfg.max_neighbors, log=sys.stdout)
    diag = degree_diagnostics(data.dependency())
    for k, v in diag.items():
        print(f"{k}: {v:.6g}")
    tr = data.treatments
    keys = Counter((int(d), str(tr.g(i))) for i, d in enumerate(tr.d) if data.eligible[i])
    for (d, g), c in sorted(keys.items()):
        print(f"effective treatment ({d},{g}): {c}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="netrdd", description="RD estimation under network interference")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        if data:
            p.add_argument("--config", help="JSON (or TOML on Python 3.11+) run configuration")
            p.add_argument("--data", help="unit CSV; overrides data.path")
            p.add_argument("--edges", help="edge list file")
            p.add_argument("--cluster", help="cluster column name")
            p.add_argument("--graph-mode", choices=DEPENDENCY_MODES)
            p.add_argument("--max-neighbors", type=int)
        p.add_argument("--kernel", choices=[k.value for k in Kernel])
        p.add_argument("--h", type=float, help="main bandwidth")
        p.add_argument("--b", type=float, help="pilot bandwidth for bias correction")
        p.add_argument("--variance", help="comma list of network,iid,cluster")
        p.add_argument("--seed", type=int)
        p.add_argument("--bc", action="store_true", help="bias-corrected estimates")
        p.add_argument("--out-csv")
        p.add_argument("--out-json")

    p = sub.add_parser("estimate", help="estimate effects on a dataset")
    common(p)
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("simulate", help="Monte Carlo replications")
    common(p, data=False)
    p.add_argument("--scenario", default="cluster3", help="cluster3, cluster, smallworld or varying")
    p.add_argument("--n", type=int, default=3000)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--group-size", type=int, default=3)
    p.add_argument("--rewire-p", type=float, default=0.15)
    p.add_argument("--degree", type=int, default=4)
    p.add_argument("--sizes", help="comma list of group sizes for the varying scenario")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_simulate, seed=0)

    p = sub.add_parser("boundary", help="list the boundary pieces between two effective treatments")
    p.add_argument("--exposure", default="one_treated")
    p.add_argument("--size", type=int, required=True, help="interference set size")
    p.add_argument("--from", dest="source", required=True, help="d,g")
    p.add_argument("--to", dest="target", required=True, help="d,g")
    p.set_defaults(func=_cmd_boundary)

    p = sub.add_parser("diagnose", help="ingest diagnostics and dependency-graph degrees")
    common(p)
    p.set_defaults(func=_cmd_diagnose)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(exc.report(), file=sys.stderr)
        return EXIT_CODES[exc.code]


if __name__ == "__main__":
    sys.exit(main())
