"""Shapley attributions over groups of model inputs.

A coalition ``S`` of groups is evaluated by masking every group outside
``S`` to its baseline (zero in the z-scored feature space, zero text vector,
or dropping the geometric/positional term) and reading the model score.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .hypergraph import HypergraphSnapshot
from .rng import stream

DEFAULT_GROUPS = (
    "geometric",
    "positional",
    "text_embedding",
    "tweet_volume",
    "daily_return",
    "trading_volume",
    "technical_indicators",
)

# columns of the stock feature vector owned by each feature-backed group
FEATURE_COLUMNS = {
    "daily_return": (0,),
    "tweet_volume": (1, 2),
    "trading_volume": (3,),
    "technical_indicators": (4, 5, 6, 7),
}

MAX_EXACT_GROUPS = 20


class ExplainError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureGrouping:
    names: tuple = DEFAULT_GROUPS

    def __post_init__(self):
        unknown = [g for g in self.names if g not in DEFAULT_GROUPS]
        if unknown:
            raise ExplainError(f"unknown feature group(s): {', '.join(unknown)}")
        if len(set(self.names)) != len(self.names):
            raise ExplainError("feature groups must be distinct")

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ExplainError(f"unknown feature group {name!r}") from None


def mask_inputs(snapshot: HypergraphSnapshot, grouping: FeatureGrouping, keep: Iterable) -> HypergraphSnapshot:
    """Snapshot where groups in ``grouping`` but not in ``keep`` are at baseline.

    ``keep`` holds group names or indices into ``grouping``.
    """
    kept = set()
    for g in keep:
        kept.add(grouping.names[g] if isinstance(g, (int, np.integer)) else grouping.names[grouping.index(g)])
    masked = [g for g in grouping.names if g not in kept]
    if not masked:
        return snapshot
    feats = snapshot.stock_features
    cols = [c for g in masked for c in FEATURE_COLUMNS.get(g, ())]
    if cols:
        feats = feats.copy()
        feats[:, cols] = 0.0
    text = np.zeros_like(snapshot.news_text) if "text_embedding" in masked else snapshot.news_text
    return snapshot.with_inputs(
        stock_features=feats,
        news_text=text,
        use_geometric=snapshot.use_geometric and "geometric" not in masked,
        use_positional=snapshot.use_positional and "positional" not in masked,
    )


@dataclass
class ShapReport:
    groups: tuple
    phi: np.ndarray
    f_x: float
    f_baseline: float
    method: str
    target: str = "mean"
    n_samples: int | None = None
    seed: int | None = None
    coalition_values: dict = field(default_factory=dict, repr=False)

    @property
    def efficiency_residual(self) -> float:
        return float(math.fsum(self.phi) - (self.f_x - self.f_baseline))

    def rows(self) -> list[dict]:
        order = sorted(range(len(self.groups)), key=lambda i: (-abs(self.phi[i]), i))
        return [{"group": self.groups[i], "phi": float(self.phi[i])} for i in order]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "phi"])
        for r in self.rows():
            w.writerow([r["group"], repr(r["phi"])])
        w.writerow(["f(x)", repr(self.f_x)])
        w.writerow(["f(baseline)", repr(self.f_baseline)])
        w.writerow(["efficiency_residual", repr(self.efficiency_residual)])
        return buf.getvalue()


def report_table(report: ShapReport) -> str:
    """Aligned table sorted by |phi|, with f(x), f(baseline) and the efficiency residual."""
    rows = report.rows()
    width = max([len("group")] + [len(r["group"]) for r in rows] + [len("efficiency residual")])
    head = f"Shapley attribution ({report.method}"
    if report.method == "sampled":
        head += f", n={report.n_samples}, seed={report.seed}"
    head += f"; target={report.target})"
    lines = [head, f"{'group'.ljust(width)}  {'phi':>12}", f"{'-' * width}  {'-' * 12}"]
    for r in rows:
        lines.append(f"{r['group'].ljust(width)}  {r['phi']:>12.6f}")
    lines.append(f"{'-' * width}  {'-' * 12}")
    lines.append(f"{'f(x)'.ljust(width)}  {report.f_x:>12.6f}")
    lines.append(f"{'f(baseline)'.ljust(width)}  {report.f_baseline:>12.6f}")
    lines.append(f"{'efficiency residual'.ljust(width)}  {report.efficiency_residual:>12.3e}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# estimators on an abstract coalition value function
# ---------------------------------------------------------------------------


def shapley_weight(size: int, m: int) -> float:
    """|S|! (M - |S| - 1)! / M!"""
    return math.factorial(size) * math.factorial(m - size - 1) / math.factorial(m)


def _all_values(value: Callable[[frozenset], float], m: int) -> np.ndarray:
    out = np.empty(1 << m)
    for code in range(1 << m):
        out[code] = value(frozenset(i for i in range(m) if code >> i & 1))
    return out


def exact_shapley_values(value: Callable[[frozenset], float], m: int) -> tuple[np.ndarray, np.ndarray]:
    """Shapley values by full enumeration; returns ``(phi, v indexed by bitmask)``."""
    if m < 1:
        raise ExplainError("need at least one group")
    if m > MAX_EXACT_GROUPS:
        raise ExplainError(f"{m} groups is too many for exact enumeration (max {MAX_EXACT_GROUPS}); use sampled mode")
    v = _all_values(value, m)
    codes = np.arange(1 << m)
    sizes = np.array([bin(c).count("1") for c in codes])
    weights = np.array([shapley_weight(s, m) if s < m else 0.0 for s in range(m + 1)])
    phi = np.empty(m)
    for i in range(m):
        without = codes[(codes >> i & 1) == 0]
        terms = weights[sizes[without]] * (v[without | (1 << i)] - v[without])
        phi[i] = math.fsum(terms)
    return phi, v


def sampled_shapley_values(
    value: Callable[[frozenset], float], m: int, n_samples: int, seed: int
) -> np.ndarray:
    """Permutation-sampling estimate: mean of ``v(S + i) - v(S)`` with ``S`` the
    groups preceding ``i`` in a uniformly random ordering.

    Each sampled ordering supplies one term for every group.
    """
    if n_samples < 1:
        raise ExplainError("n_samples must be >= 1")
    if m < 1:
        raise ExplainError("need at least one group")
    rng = stream(seed, "shapley")
    perms = np.argsort(rng.random((n_samples, m)), axis=1)
    rank = np.argsort(perms, axis=1)
    bit = np.int64(1) << np.arange(m, dtype=np.int64)
    cache: dict[int, float] = {}

    def v_of(codes: np.ndarray) -> np.ndarray:
        uniq, inv = np.unique(codes, return_inverse=True)
        vals = np.empty(uniq.shape[0])
        for k, c in enumerate(uniq.tolist()):
            if c not in cache:
                cache[c] = value(frozenset(j for j in range(m) if c >> j & 1))
            vals[k] = cache[c]
        return vals[inv]

    phi = np.empty(m)
    for i in range(m):
        before = (rank < rank[:, [i]]) @ bit
        phi[i] = float(np.mean(v_of(before | bit[i]) - v_of(before)))
    return phi


# ---------------------------------------------------------------------------
# model-facing wrappers
# ---------------------------------------------------------------------------


def _coalition_fn(score_fn, snapshot, grouping, target):
    def value(subset: frozenset) -> float:
        scores = np.asarray(score_fn(mask_inputs(snapshot, grouping, subset)), dtype=np.float64)
        return float(scores.mean() if target is None else scores[target])

    return value


def _target_index(snapshot, target):
    if target is None:
        return None, "mean"
    if isinstance(target, str):
        if target not in snapshot.tickers:
            raise ExplainError(f"unknown stock {target!r}")
        return snapshot.tickers.index(target), target
    if not 0 <= int(target) < snapshot.n_stocks:
        raise ExplainError(f"stock index {target} out of range")
    return int(target), snapshot.tickers[int(target)]


def exact_shapley(score_fn, snapshot, grouping: FeatureGrouping = FeatureGrouping(), target=None) -> ShapReport:
    """Exact attributions of ``score_fn(snapshot)[target]`` (mean over stocks when target is None)."""
    idx, name = _target_index(snapshot, target)
    m = len(grouping)
    phi, v = exact_shapley_values(_coalition_fn(score_fn, snapshot, grouping, idx), m)
    return ShapReport(grouping.names, phi, float(v[-1]), float(v[0]), "exact", name)


def sampled_shapley(
    score_fn, snapshot, grouping: FeatureGrouping = FeatureGrouping(), target=None, n_samples: int = 1000, seed: int = 0
) -> ShapReport:
    idx, name = _target_index(snapshot, target)
    m = len(grouping)
    value = _coalition_fn(score_fn, snapshot, grouping, idx)
    phi = sampled_shapley_values(value, m, n_samples, seed)
    full = value(frozenset(range(m)))
    empty = value(frozenset())
    return ShapReport(grouping.names, phi, full, empty, "sampled", name, n_samples, seed)


def model_score_fn(params, config):
    from .model import forward

    return lambda snap: forward(snap, params, config).score
