"""Aggregation cores: DP open-set histograms and DP vector sums.

The heavy-hitters pipeline is

1. per client: de-duplicate composite keys into a local histogram,
2. bound contributions (l0 key sampling, l_inf clamping, l1/l2 rescaling),
3. GROUP-BY SUM across clients in a fixed (key, client) order,
4. add Laplace or Gaussian noise, whichever has lower variance,
5. drop every row where some column's noisy magnitude is below threshold.

Privacy budget split: epsilon is divided evenly across the ``p`` value
columns.  delta is split in half between Gaussian noise and key-release
thresholding, then evenly across columns.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dpquery import ONES_COLUMN, DpQueryConfig
from .errors import ArityMismatch, DimensionMismatch, InvalidBudget

Key = tuple[str, ...]
Values = tuple[float, ...]
LocalHistogram = dict[Key, Values]
CrossClientHistogram = dict[Key, Values]

LAPLACE = "laplace"
GAUSSIAN = "gaussian"


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------

class Randomness:
    """Noise and sampling source.

    Production mode draws its seed from system entropy and can never disable
    noise.  Test mode takes an explicit seed and may switch noise off, which
    makes releases equal to the thresholded exact aggregate.
    """

    def __init__(self, seed: bytes | int | None = None, *, noise_off: bool = False):
        if seed is None:
            if noise_off:
                raise ValueError("noise-off is only available with an explicit test seed")
            self.test_mode = False
            seed_bytes = os.urandom(32)
        else:
            self.test_mode = True
            if isinstance(seed, int):
                seed_bytes = hashlib.sha256(b"cfc-seed" + seed.to_bytes(16, "little", signed=True)).digest()
            else:
                seed_bytes = bytes(seed)
        self.seed = seed_bytes
        self.noise_off = noise_off
        self.generator = np.random.default_rng(int.from_bytes(seed_bytes, "little"))

    @classmethod
    def production(cls) -> "Randomness":
        return cls()

    def child(self, label: str) -> "Randomness":
        """Independent stream derived from this seed and ``label``."""
        r = Randomness.__new__(Randomness)
        r.test_mode, r.noise_off = self.test_mode, self.noise_off
        r.seed = hashlib.sha256(self.seed + label.encode()).digest()
        r.generator = np.random.default_rng(int.from_bytes(r.seed, "little"))
        return r


# ---------------------------------------------------------------------------
# Client tables and local histograms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClientTable:
    key_columns: tuple[str, ...]
    value_columns: tuple[str, ...]
    rows: tuple[tuple[Key, Values], ...] = ()

    def __post_init__(self):
        for key, values in self.rows:
            if len(key) != len(self.key_columns) or len(values) != len(self.value_columns):
                raise ArityMismatch(
                    f"row {key!r} has arity ({len(key)}, {len(values)}), table expects "
                    f"({len(self.key_columns)}, {len(self.value_columns)})")

    @classmethod
    def of(cls, key_columns: Sequence[str], value_columns: Sequence[str],
           rows: Iterable[tuple[Sequence[str], Sequence[float]]]) -> "ClientTable":
        return cls(tuple(key_columns), tuple(value_columns),
                   tuple((tuple(str(k) for k in key), tuple(float(v) for v in vals)) for key, vals in rows))

    def to_dict(self) -> dict:
        return {"key_columns": list(self.key_columns), "value_columns": list(self.value_columns),
                "rows": [{"key": list(k), "values": list(v)} for k, v in self.rows]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ClientTable":
        try:
            return cls.of(d["key_columns"], d["value_columns"], ((r["key"], r["values"]) for r in d["rows"]))
        except (KeyError, TypeError) as exc:
            raise ArityMismatch(f"malformed client table: {exc}") from exc


def build_local_histogram(t: ClientTable) -> LocalHistogram:
    hist: dict[Key, list[float]] = {}
    width = len(t.value_columns)
    for key, values in t.rows:
        if len(values) != width:
            raise ArityMismatch(f"row {key!r} has {len(values)} values, expected {width}")
        acc = hist.setdefault(key, [0.0] * width)
        for j, v in enumerate(values):
            acc[j] += v
    return {k: tuple(v) for k, v in hist.items()}


def project_for_query(t: ClientTable, cfg: DpQueryConfig) -> ClientTable:
    """Reorder/select the table's columns into the query's key and value layout."""
    try:
        kidx = [t.key_columns.index(c) for c in cfg.key_columns]
        vidx = [None if c == ONES_COLUMN else t.value_columns.index(c) for c in cfg.value_columns]
    except ValueError as exc:
        raise ArityMismatch(f"client table lacks a column the query needs: {exc}") from exc
    rows = tuple(
        (tuple(key[i] for i in kidx), tuple(1.0 if i is None else vals[i] for i in vidx))
        for key, vals in t.rows
    )
    return ClientTable(tuple(cfg.key_columns), tuple(cfg.value_columns), rows)


def _clamp(v: float, bound: float) -> float:
    if math.isnan(v):
        return 0.0
    return max(-bound, min(bound, v))


def _rescale(col: list[float], bound: float, norm) -> list[float]:
    """Scale ``col`` so that ``norm(col) <= bound`` holds exactly in floats."""
    n = norm(col)
    if n <= bound:
        return col
    scale = bound / n
    out = [v * scale for v in col]
    while norm(out) > bound:
        scale = math.nextafter(scale, 0.0)
        out = [v * scale for v in col]
    return out


def l1_norm(col: Iterable[float]) -> float:
    return math.fsum(abs(v) for v in col)


def l2_norm(col: Iterable[float]) -> float:
    return math.sqrt(math.fsum(v * v for v in col))


def bound_contributions(h: LocalHistogram, cfg: DpQueryConfig, rng: Randomness) -> LocalHistogram:
    keys = sorted(h)
    l0 = cfg.max_groups_contributed
    if len(keys) > l0:
        picked = rng.generator.choice(len(keys), size=l0, replace=False)
        keys = sorted(keys[i] for i in picked)
    cols = []
    for j, agg in enumerate(cfg.aggregations):
        col = [_clamp(h[k][j], agg.l_inf) for k in keys]
        if agg.l_1 is not None:
            col = _rescale(col, agg.l_1, l1_norm)
        if agg.l_2 is not None:
            col = _rescale(col, agg.l_2, l2_norm)
        cols.append(col)
    return {k: tuple(col[i] for col in cols) for i, k in enumerate(keys)}


def aggregate(hs: Iterable[tuple[str, LocalHistogram]]) -> CrossClientHistogram:
    """Cross-client GROUP-BY SUM, summed in (key, client_id) order."""
    contributions: list[tuple[Key, str, Values]] = []
    for client_id, h in hs:
        contributions.extend((k, client_id, v) for k, v in h.items())
    contributions.sort(key=lambda c: (c[0], c[1]))
    out: dict[Key, list[float]] = {}
    for key, _, values in contributions:
        acc = out.get(key)
        if acc is None:
            out[key] = list(values)
        else:
            for j, v in enumerate(values):
                acc[j] += v
    return {k: tuple(v) for k, v in out.items()}


# ---------------------------------------------------------------------------
# Noise
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ColumnNoise:
    distribution: str
    scale: float          # Laplace b or Gaussian sigma
    threshold: float
    sensitivity_l1: float
    sensitivity_l2: float
    epsilon: float
    delta_noise: float
    delta_threshold: float

    @property
    def variance(self) -> float:
        return 2 * self.scale**2 if self.distribution == LAPLACE else self.scale**2

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class NoisePlan:
    columns: tuple[ColumnNoise, ...]
    max_groups_contributed: int
    output_names: tuple[str, ...] = field(default=())

    def to_dict(self) -> dict:
        return {"columns": [c.to_dict() for c in self.columns],
                "max_groups_contributed": self.max_groups_contributed,
                "output_names": list(self.output_names)}


def _check_budget(epsilon: float, delta: float) -> None:
    if not (math.isfinite(epsilon) and epsilon > 0):
        raise InvalidBudget(f"epsilon must be > 0, got {epsilon}")
    if not 0 < delta < 1:
        raise InvalidBudget(f"delta must lie in (0, 1), got {delta}")


def gaussian_sigma(l2_sensitivity: float, epsilon: float, delta: float) -> float:
    """Classical Gaussian mechanism calibration."""
    return l2_sensitivity * math.sqrt(2 * math.log(1.25 / delta)) / epsilon


def derive_noise_plan(cfg: DpQueryConfig) -> NoisePlan:
    _check_budget(cfg.epsilon, cfg.delta)
    p = len(cfg.aggregations)
    l0 = cfg.max_groups_contributed
    eps_j = cfg.epsilon / p
    delta_thr = cfg.delta / (2 * p)
    delta_noise = cfg.delta / (2 * p)
    # per-key, per-tail probability of a single-client key clearing the threshold
    tail = delta_thr / (2 * l0)
    columns = []
    for agg in cfg.aggregations:
        s1 = l0 * agg.l_inf if agg.l_1 is None else min(l0 * agg.l_inf, agg.l_1)
        s2 = math.sqrt(l0) * agg.l_inf if agg.l_2 is None else min(math.sqrt(l0) * agg.l_inf, agg.l_2)
        b = s1 / eps_j
        dist, scale, thr = LAPLACE, b, agg.l_inf + b * math.log(1 / (2 * tail))
        if eps_j < 1:
            sigma = gaussian_sigma(s2, eps_j, delta_noise)
            if sigma**2 < 2 * b**2:
                dist, scale = GAUSSIAN, sigma
                thr = agg.l_inf + sigma * NormalDist().inv_cdf(1 - tail)
        columns.append(ColumnNoise(dist, scale, thr, s1, s2, eps_j,
                                   delta_noise if dist == GAUSSIAN else 0.0, delta_thr))
    return NoisePlan(tuple(columns), l0, tuple(a.output_name for a in cfg.aggregations))


def sample_noise(col: ColumnNoise, size: int, gen: np.random.Generator) -> np.ndarray:
    if col.distribution == LAPLACE:
        return gen.laplace(0.0, col.scale, size)
    return gen.normal(0.0, col.scale, size)


@dataclass(frozen=True)
class ReleasedHistogram:
    output_names: tuple[str, ...]
    rows: dict[Key, Values]

    def to_dict(self) -> dict:
        return {"output_names": list(self.output_names),
                "rows": [{"key": list(k), "values": list(v)} for k, v in sorted(self.rows.items())]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ReleasedHistogram":
        return cls(tuple(d["output_names"]),
                   {tuple(r["key"]): tuple(float(x) for x in r["values"]) for r in d["rows"]})


def add_noise_and_threshold(H: CrossClientHistogram, plan: NoisePlan, rng: Randomness) -> ReleasedHistogram:
    keys = sorted(H)
    p = len(plan.columns)
    exact = np.array([H[k] for k in keys], dtype=np.float64).reshape(len(keys), p)
    if rng.noise_off:
        noisy = exact
    else:
        noise = np.column_stack([sample_noise(c, len(keys), rng.generator) for c in plan.columns]) \
            if keys else np.zeros((0, p))
        noisy = exact + noise
    thresholds = np.array([c.threshold for c in plan.columns])
    keep = np.all(np.abs(noisy) >= thresholds, axis=1) if keys else np.zeros(0, dtype=bool)
    rows = {k: tuple(float(x) for x in noisy[i]) for i, k in enumerate(keys) if keep[i]}
    return ReleasedHistogram(plan.output_names, rows)


def private_heavy_hitters(tables: Iterable[tuple[str, ClientTable]], cfg: DpQueryConfig,
                          rng: Randomness) -> ReleasedHistogram:
    """Whole PHH core over per-client tables (client ids order the RNG draws)."""
    bounded = []
    for client_id, table in sorted(tables, key=lambda t: t[0]):
        local = build_local_histogram(project_for_query(table, cfg))
        bounded.append((client_id, bound_contributions(local, cfg, rng)))
    return add_noise_and_threshold(aggregate(bounded), derive_noise_plan(cfg), rng)


# ---------------------------------------------------------------------------
# DP vector sum
# ---------------------------------------------------------------------------

def clip_l2(v: np.ndarray, l2_clip: float) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    if norm > l2_clip:
        return v * (l2_clip / norm)
    return v


def dp_vector_sum(updates: Sequence[tuple[str, Sequence[float]]], l2_clip: float, epsilon: float,
                  delta: float, rng: Randomness, *, dimension: int | None = None) -> np.ndarray:
    """Clip each client's vector to L2 ``l2_clip``, sum, add Gaussian noise."""
    _check_budget(epsilon, delta)
    if not (math.isfinite(l2_clip) and l2_clip > 0):
        raise InvalidBudget("l2_clip must be > 0")
    vecs = [(cid, np.nan_to_num(np.asarray(v, dtype=np.float64), nan=0.0)) for cid, v in updates]
    dims = {v.shape for _, v in vecs}
    if dimension is not None:
        dims.add((dimension,))
    if len(dims) > 1 or any(len(d) != 1 for d in dims):
        raise DimensionMismatch(f"update shapes {sorted(dims)}")
    if not dims:
        raise DimensionMismatch("no updates and no dimension given")
    (dim,) = dims.pop()
    total = np.zeros(dim)
    for _, v in sorted(vecs, key=lambda c: c[0]):
        total = total + clip_l2(v, l2_clip)
    if rng.noise_off:
        return total
    sigma = gaussian_sigma(l2_clip, epsilon, delta)
    return total + rng.generator.normal(0.0, sigma, dim)
