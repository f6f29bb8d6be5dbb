"""Data-generating processes and a reproducible Monte Carlo harness.

Outcomes follow

    Y = 0.5 + 1.5 D + G + 0.5 X + 4.3 D X² - 1.5 (1 - D) X² + 0.3 mean(X_S) + ε,
    ε = (D - 1.4 (1 - D)) (2 mean(u_S) + u),

with truncated-normal scores, a sharp cutoff at zero and the one-treated
exposure by default.  Each replication draws from its own Philox stream
spawned from the master seed, so results do not depend on how replications
are scheduled across workers.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .bandwidth import BandwidthError
from .boundary import BoundaryError
from .estimators import Dataset, EffectRequest, EstimationError, estimate
from .exposure import FRACTION_TREATED, ONE_TREATED, SUM_TREATED, ExposureMapping, assign_effective_treatments
from .graph import InterferenceSets, Network, interference_from_clusters, interference_from_network
from .kernel_fit import FitError

__all__ = [
    "DgpConfig",
    "SimulatedDataset",
    "McReport",
    "McAbort",
    "truncated_normal",
    "truncated_normal_ppf",
    "watts_strogatz",
    "generate",
    "true_effects",
    "default_effects",
    "run_monte_carlo",
    "replication_rng",
    "SCENARIOS",
]

SCENARIOS = ("cluster", "smallworld", "varying")
# share of failed replications tolerated before a run is aborted
MAX_FAILURE_SHARE = 0.01
MC_COLUMNS = ("estimator", "truth", "bias", "sd", "se", "se_iid", "se_cl", "coverage", "coverage_iid",
              "coverage_cl", "n_plus", "n_minus", "pct_unique", "mean_h", "reps", "failures")


class McAbort(RuntimeError):
    pass


@dataclass(frozen=True)
class DgpConfig:
    """Scenario definition.

    ``scenario`` is ``"cluster"`` (groups of ``group_size``), ``"smallworld"``
    (Watts-Strogatz with ``degree`` and ``rewire_p``) or ``"varying"``
    (consecutive groups cycling through ``sizes``).  ``direct`` and
    ``spillover`` are the coefficients on ``D`` and ``G``.
    """

    scenario: str = "cluster"
    n: int = 3000
    seed: int = 0
    group_size: int = 3
    rewire_p: float = 0.15
    degree: int = 4
    sizes: tuple[int, ...] = (3, 4, 5, 6, 8)
    exposure: str = "one_treated"
    direct: float = 1.5
    spillover: float = 1.0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if self.n < 2:
            raise ValueError("n must be at least 2")
        if self.scenario == "cluster" and (self.group_size < 2 or self.n % self.group_size):
            raise ValueError(f"n={self.n} is not divisible by group size {self.group_size}")
        if self.scenario == "smallworld":
            if not 0.0 <= self.rewire_p <= 1.0:
                raise ValueError("rewire_p must lie in [0, 1]")
            if self.degree % 2 or self.degree < 2 or self.n <= self.degree:
                raise ValueError("degree must be even, positive and below n")
        if self.scenario == "varying" and (not self.sizes or min(self.sizes) < 2):
            raise ValueError("group sizes must be >= 2")
        _mapping(self.exposure)

    @property
    def mapping(self) -> ExposureMapping:
        return _mapping(self.exposure)


def _mapping(name: str) -> ExposureMapping:
    table = {"one_treated": ONE_TREATED, "sum": SUM_TREATED, "fraction": FRACTION_TREATED}
    if name not in table:
        raise ValueError(f"unknown exposure {name!r}")
    return table[name]


def truncated_normal_ppf(u, mean: float = 0.0, sd: float = 1.0, lo: float = -5.0, hi: float = 5.0):
    """Inverse-CDF transform of uniforms ``u`` to a normal truncated to ``[lo, hi]``.

    The uniform is mapped around the midpoint of ``[Φ(a), Φ(b)]``, so for a
    symmetric window ``u = 0.5`` returns the mean exactly.
    """
    if not lo < hi:
        raise ValueError("lower bound must be below upper bound")
    a, b = (lo - mean) / sd, (hi - mean) / sd
    fa, fb = ndtr(a), ndtr(b)
    p = 0.5 * (fa + fb) + (np.asarray(u, dtype=float) - 0.5) * (fb - fa)
    z = np.clip(ndtri(p), a, b)
    return mean + sd * z


def truncated_normal(rng: np.random.Generator, size=None, mean: float = 0.0, sd: float = 1.0,
                     lo: float = -5.0, hi: float = 5.0):
    """Truncated-normal draws by inverse-CDF sampling."""
    return truncated_normal_ppf(rng.random(size), mean, sd, lo, hi)


def watts_strogatz(n: int, degree: int = 4, rewire_p: float = 0.15,
                   rng: np.random.Generator | int | None = None) -> Network:
    """Small-world graph: ring lattice with each edge endpoint rewired with probability ``rewire_p``.

    Edges are visited in lattice order; every endpoint is independently moved
    to a uniform node that creates neither a loop nor a duplicate edge.
    """
    if degree % 2 or degree < 2 or n <= degree:
        raise ValueError("degree must be even, positive and below n")
    if not 0.0 <= rewire_p <= 1.0:
        raise ValueError("rewire_p must lie in [0, 1]")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.Generator(np.random.Philox(rng))
    k = degree // 2
    edges = [[i, (i + j) % n] for j in range(1, k + 1) for i in range(n)]
    edges.sort()
    adj = [set() for _ in range(n)]
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    flips = rng.random((len(edges), 2)) < rewire_p
    for e, (f1, f0) in zip(edges, flips):
        for end, flip in ((1, f1), (0, f0)):
            if not flip:
                continue
            keep, old = e[1 - end], e[end]
            if len(adj[keep]) >= n - 1:
                continue
            while True:
                t = int(rng.integers(n))
                if t != keep and t not in adj[keep]:
                    break
            adj[keep].discard(old)
            adj[old].discard(keep)
            adj[keep].add(t)
            adj[t].add(keep)
            e[end] = t
    out = [(i, j) for i in range(n) for j in adj[i] if i < j]
    return Network.from_edges(n, out)


def _group_labels(cfg: DgpConfig) -> np.ndarray:
    if cfg.scenario == "cluster":
        return np.repeat(np.arange(cfg.n // cfg.group_size), cfg.group_size)
    sizes = []
    total = 0
    while total < cfg.n:
        s = cfg.sizes[len(sizes) % len(cfg.sizes)]
        s = min(s, cfg.n - total)
        sizes.append(s)
        total += s
    if sizes[-1] < 2 and len(sizes) > 1:
        sizes[-2] += sizes.pop()
    return np.repeat(np.arange(len(sizes)), sizes)


@dataclass(frozen=True)
class SimulatedDataset:
    x: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)
    u: np.ndarray = field(repr=False)
    sets: InterferenceSets = field(repr=False)
    cfg: DgpConfig = None
    network: Network | None = field(default=None, repr=False)

    def dataset(self, **kw) -> Dataset:
        return Dataset(self.x, self.y, self.sets, 0.0, self.cfg.mapping, **kw)


def _set_means(v: np.ndarray, sets: InterferenceSets) -> np.ndarray:
    sizes = sets.sizes
    tot = np.asarray(sets.membership().astype(np.float64) @ v).ravel()
    return np.where(sizes > 0, tot / np.maximum(sizes, 1), 0.0)


def outcome(x, d, g, xbar, ubar, u, direct: float = 1.5, spillover: float = 1.0) -> np.ndarray:
    """Outcome equation given scores, treatments, neighbour means and latent shocks."""
    d = np.asarray(d, dtype=float)
    eps = (d - 1.4 * (1.0 - d)) * (2.0 * ubar + u)
    return (0.5 + direct * d + spillover * g + 0.5 * x + 4.3 * d * x ** 2
            - 1.5 * (1.0 - d) * x ** 2 + 0.3 * xbar + eps)


def generate(cfg: DgpConfig, rng: np.random.Generator | None = None) -> SimulatedDataset:
    """Draw one dataset; ``rng`` defaults to a Philox stream seeded by ``cfg.seed``."""
    rng = rng if rng is not None else np.random.Generator(np.random.Philox(cfg.seed))
    network = None
    if cfg.scenario == "smallworld":
        network = watts_strogatz(cfg.n, cfg.degree, cfg.rewire_p, rng)
        sets = interference_from_network(network)
    else:
        sets = interference_from_clusters(_group_labels(cfg))
    x = truncated_normal(rng, cfg.n)
    u = rng.standard_normal(cfg.n)
    d = (x >= 0.0).astype(np.int8)
    tr = assign_effective_treatments(x, 0.0, sets, cfg.mapping)
    g = tr.g_float()
    g = np.where(tr.defined, g, 0.0)
    y = outcome(x, d, g, _set_means(x, sets), _set_means(u, sets), u, cfg.direct, cfg.spillover)
    return SimulatedDataset(x, y, u, sets, cfg, network)


def default_effects(bias_correct: bool = False, variance_modes=("network", "iid", "cluster"),
                    kernel: str = "triangular") -> list[EffectRequest]:
    """Overall direct, boundary direct ``(1,0)|(0,0)`` and boundary indirect ``(0,1)|(0,0)``."""
    kw = dict(bias_correct=bias_correct, variance_modes=tuple(variance_modes), kernel=kernel)
    return [
        EffectRequest.overall_direct(label="tau_1|0", **kw),
        EffectRequest.boundary((1, 0), (0, 0), label="tau_10|00", **kw),
        EffectRequest.boundary((0, 1), (0, 0), label="tau_01|00", **kw),
    ]


def true_effects(cfg: DgpConfig, effects: Sequence[EffectRequest]) -> dict[str, float | None]:
    """Analytic truths.

    The outcome is linear in ``D`` and ``G`` and continuous in every score, so
    across any boundary the effect is ``direct (d - d') + spillover (g - g')``
    and the overall direct effect is ``direct``.  The overall indirect effect
    has no closed form and gets ``None``.
    """
    out: dict[str, float | None] = {}
    for req in effects:
        if req.kind == "overall_direct":
            out[req.name] = cfg.direct
        elif req.kind == "direct_subset":
            out[req.name] = cfg.direct
        elif req.kind == "boundary":
            (d1, g1), (d2, g2) = req.source, req.target
            out[req.name] = cfg.direct * (d1 - d2) + cfg.spillover * float(g1 - g2)
        else:
            out[req.name] = None
    return out


def replication_rng(seed: int, reps: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(reps)


_FAILURES = (FitError, EstimationError, BandwidthError, BoundaryError, np.linalg.LinAlgError)
_MODES = ("network", "iid", "cluster")


def _one_replication(args) -> list[dict | None]:
    cfg, effects, ss = args
    rng = np.random.Generator(np.random.Philox(ss))
    sim = generate(cfg, rng)
    data = sim.dataset()
    rows = []
    for req in effects:
        try:
            e = estimate(data, req)
        except _FAILURES:
            rows.append(None)
            continue
        bc = req.bias_correct
        tau = e.tau_bc if bc else e.tau
        se = e.se_bc if bc else e.se
        rows.append({"tau": tau, "se": {m: se.get(m, math.nan) for m in _MODES},
                     "n_plus": e.n_plus, "n_minus": e.n_minus, "pct_unique": e.pct_unique_distance,
                     "h": e.h_used})
    return rows


@dataclass
class McReport:
    """Summaries per estimand plus the raw per-replication draws."""

    rows: list[dict]
    reps: int
    cfg: DgpConfig
    draws: dict[str, dict[str, np.ndarray]] = field(default_factory=dict, repr=False)

    def row(self, name: str) -> dict:
        for r in self.rows:
            if r["estimator"] == name:
                return r
        raise KeyError(name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=MC_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: _fmt(r.get(k)) for k in MC_COLUMNS})
        return buf.getvalue()

    def to_json(self, **kw) -> str:
        cfg = asdict(self.cfg)
        cfg["sizes"] = list(cfg["sizes"])
        rows = [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in r.items()}
                for r in self.rows]
        return json.dumps({"reps": self.reps, "config": cfg, "rows": rows}, **kw)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def _summarise(name: str, truth: float | None, draws: list[dict]) -> tuple[dict, dict]:
    tau = np.array([d["tau"] for d in draws])
    se = {m: np.array([d["se"][m] for d in draws]) for m in _MODES}
    row = {"estimator": name, "truth": math.nan if truth is None else float(truth)}
    row["bias"] = float(tau.mean() - truth) if truth is not None else math.nan
    row["sd"] = float(tau.std(ddof=1)) if tau.size > 1 else math.nan
    for m, col in zip(_MODES, ("se", "se_iid", "se_cl")):
        v = se[m]
        row[col] = float(np.mean(v)) if np.all(np.isfinite(v)) else math.nan
    for m, col in zip(_MODES, ("coverage", "coverage_iid", "coverage_cl")):
        v = se[m]
        if truth is None or not np.all(np.isfinite(v)):
            row[col] = math.nan
        else:
            row[col] = float(np.mean(np.abs(tau - truth) <= 1.96 * v))
    row["n_plus"] = float(np.mean([d["n_plus"] for d in draws]))
    row["n_minus"] = float(np.mean([d["n_minus"] for d in draws]))
    row["pct_unique"] = float(np.mean([d["pct_unique"] for d in draws]))
    row["mean_h"] = float(np.mean([d["h"] for d in draws]))
    raw = {"tau": tau, **{f"se_{m}": se[m] for m in _MODES},
           "h": np.array([d["h"] for d in draws])}
    return row, raw


def run_monte_carlo(cfg: DgpConfig, reps: int, effects: Sequence[EffectRequest] | None = None,
                    truths: dict[str, float | None] | None = None, workers: int = 1,
                    chunksize: int = 8) -> McReport:
    """Replicate ``generate`` then ``estimate`` for every effect, ``reps`` times.

    Parameters
    ----------
    cfg : DgpConfig
        ``cfg.seed`` is the master seed; replication ``r`` uses the ``r``-th
        spawned child sequence.
    reps : int
    effects : list of EffectRequest, optional
        Defaults to :func:`default_effects`, without the cluster mode on
        small-world networks.
    truths : dict, optional
        Defaults to :func:`true_effects`.
    workers : int
        Process count; results are reduced in replication order.

    Raises
    ------
    McAbort
        When an estimand fails in at least 1% of replications.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    if effects is None:
        # small-world networks carry no cluster labels
        modes = ("network", "iid") if cfg.scenario == "smallworld" else _MODES
        effects = default_effects(variance_modes=modes)
    effects = list(effects)
    truths = truths if truths is not None else true_effects(cfg, effects)
    jobs = [(cfg, effects, ss) for ss in replication_rng(cfg.seed, reps)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_one_replication, jobs, chunksize=chunksize))
    else:
        results = [_one_replication(j) for j in jobs]
    rows, draws = [], {}
    for k, req in enumerate(effects):
        ok = [r[k] for r in results if r[k] is not None]
        failures = reps - len(ok)
        if failures and failures >= MAX_FAILURE_SHARE * reps:
            raise McAbort(f"{req.name}: {failures} of {reps} replications failed")
        if not ok:
            raise McAbort(f"{req.name}: every replication failed")
        row, raw = _summarise(req.name, truths.get(req.name), ok)
        row["reps"] = len(ok)
        row["failures"] = failures
        rows.append(row)
        draws[req.name] = raw
    return McReport(rows, reps, cfg, draws)
