"""Classification metrics and the threshold-portfolio backtest."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, Sequence

import numpy as np


class UndefinedSharpeError(ValueError):
    """Sharpe ratio requested for a return series with zero (or no) dispersion."""


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConfusionStats:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        # 2PR/(P+R) reduced to counts, so the float is the correctly rounded ratio
        return 2 * self.tp / (2 * self.tp + self.fp + self.fn) if self.tp else 0.0

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total


@dataclass(frozen=True)
class ClassificationReport:
    accuracy: float
    per_class: tuple
    confusion: np.ndarray = field(repr=False)
    class_names: tuple = ("down", "neutral", "up")

    @property
    def precision(self) -> tuple:
        return tuple(c.precision for c in self.per_class)

    @property
    def recall(self) -> tuple:
        return tuple(c.recall for c in self.per_class)

    @property
    def f1(self) -> tuple:
        return tuple(c.f1 for c in self.per_class)

    @property
    def macro_f1(self) -> float:
        exact = [Fraction(2 * c.tp, 2 * c.tp + c.fp + c.fn) if c.tp else Fraction(0) for c in self.per_class]
        return float(sum(exact) / len(exact))

    def rows(self) -> list[dict]:
        out = [
            {"metric": "accuracy", "class": "all", "value": self.accuracy},
            {"metric": "macro_f1", "class": "all", "value": self.macro_f1},
        ]
        for name, c in zip(self.class_names, self.per_class):
            out.append({"metric": "precision", "class": name, "value": c.precision})
            out.append({"metric": "recall", "class": name, "value": c.recall})
            out.append({"metric": "f1", "class": name, "value": c.f1})
        return out


def confusion_matrix(predictions, labels, n_classes: int = 3) -> np.ndarray:
    """``cm[true, predicted]`` counts."""
    pred = np.asarray(predictions, dtype=np.int64)
    lab = np.asarray(labels, dtype=np.int64)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (lab, pred), 1)
    return cm


def one_vs_rest(cm: np.ndarray) -> tuple:
    total = int(cm.sum())
    stats = []
    for k in range(cm.shape[0]):
        tp = int(cm[k, k])
        fp = int(cm[:, k].sum()) - tp
        fn = int(cm[k, :].sum()) - tp
        stats.append(ConfusionStats(tp, fp, fn, total - tp - fp - fn))
    return tuple(stats)


def classification_metrics(predictions, labels, n_classes: int = 3) -> ClassificationReport:
    """Accuracy (correct / total), one-vs-rest precision/recall/F1 and macro-F1.

    A zero denominator in precision, recall or F1 yields 0.
    """
    pred = np.asarray(predictions, dtype=np.int64)
    lab = np.asarray(labels, dtype=np.int64)
    if pred.shape != lab.shape:
        raise ValueError(f"{pred.size} predictions for {lab.size} labels")
    if pred.size == 0:
        raise ValueError("classification_metrics needs at least one sample")
    for arr in (pred, lab):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise ValueError(f"class ids must lie in [0, {n_classes})")
    cm = confusion_matrix(pred, lab, n_classes)
    return ClassificationReport(
        accuracy=float(np.trace(cm)) / pred.size,
        per_class=one_vs_rest(cm),
        confusion=cm,
    )


# ---------------------------------------------------------------------------
# portfolio
# ---------------------------------------------------------------------------


def select_portfolio(scores: Mapping[str, float], theta: float) -> frozenset:
    """Stocks whose score is strictly above ``theta``."""
    if not -1.0 <= theta <= 1.0:
        raise ValueError(f"theta must lie in [-1, 1], got {theta}")
    return frozenset(s for s, v in scores.items() if v > theta)


def portfolio_returns(selections: Sequence, realized: Sequence[Mapping[str, float]]) -> np.ndarray:
    """Equal-weight return of each day's selection; an empty selection earns 0."""
    if len(selections) != len(realized):
        raise ValueError(f"{len(selections)} selections for {len(realized)} days of returns")
    out = np.zeros(len(selections))
    for t, (sel, rets) in enumerate(zip(selections, realized)):
        if not sel:
            continue
        vals = []
        for s in sorted(sel):
            r = rets.get(s)
            if r is None or not math.isfinite(r):
                raise ValueError(f"day {t}: no realised return for selected stock {s}")
            vals.append(r)
        out[t] = math.fsum(vals) / len(vals)
    return out


def sharpe(returns, risk_free: float = 0.0) -> float:
    """Mean excess return over the sample (n-1) standard deviation; unannualised."""
    r = np.asarray(returns, dtype=np.float64)
    if r.size < 2:
        raise UndefinedSharpeError(f"Sharpe needs at least 2 returns, got {r.size}")
    sd = r.std(ddof=1)
    if sd == 0.0 or np.ptp(r) == 0.0:
        raise UndefinedSharpeError("Sharpe undefined: portfolio returns have zero variance")
    return float(np.mean(r - risk_free) / sd)


@dataclass
class BacktestReport:
    theta: float
    risk_free: float
    dates: list
    selections: list
    returns: np.ndarray
    average_return: float
    sharpe: float | None
    flags: list

    @property
    def day_count(self) -> int:
        return len(self.dates)

    @property
    def empty_days(self) -> int:
        return sum(1 for s in self.selections if not s)

    @property
    def mean_selected(self) -> float:
        return float(np.mean([len(s) for s in self.selections])) if self.selections else 0.0

    def summary(self) -> dict:
        return {
            "theta": self.theta,
            "risk_free": self.risk_free,
            "days": self.day_count,
            "empty_days": self.empty_days,
            "mean_selected": self.mean_selected,
            "average_daily_return": self.average_return,
            "return_std": float(np.std(self.returns, ddof=1)) if self.day_count > 1 else float("nan"),
            "sharpe": self.sharpe,
            "flags": ";".join(self.flags),
        }


def _report(theta, risk_free, dates, selections, rets) -> BacktestReport:
    flags = []
    if any(not s for s in selections):
        flags.append("empty_portfolio_days")
    try:
        sr = sharpe(rets, risk_free)
    except UndefinedSharpeError:
        sr = None
        flags.append("sharpe_undefined")
    return BacktestReport(
        theta=theta,
        risk_free=risk_free,
        dates=list(dates),
        selections=list(selections),
        returns=rets,
        average_return=float(np.mean(rets)) if len(rets) else 0.0,
        sharpe=sr,
        flags=flags,
    )


def backtest(
    score_fn: Callable[[int], Mapping[str, float]],
    days: Sequence[int],
    dates: Sequence,
    next_returns: Sequence[Mapping[str, float]],
    theta: float,
    risk_free: float = 0.0,
) -> BacktestReport:
    """Score each day, pick stocks above ``theta``, earn their next-day return.

    ``score_fn(t)`` returns ``{ticker: score}`` for day index ``t``;
    ``next_returns[k]`` holds the realised returns from day ``days[k]`` to the
    following day.
    """
    selections = [select_portfolio(score_fn(t), theta) for t in days]
    rets = portfolio_returns(selections, next_returns)
    return _report(theta, risk_free, dates, selections, rets)


def equal_weight_baseline(dates, next_returns: Sequence[Mapping[str, float]], risk_free: float = 0.0) -> BacktestReport:
    """Hold every stock with a realised return, equally weighted, every day."""
    selections = [frozenset(k for k, v in r.items() if math.isfinite(v)) for r in next_returns]
    rets = portfolio_returns(selections, next_returns)
    rep = _report(float("nan"), risk_free, dates, selections, rets)
    return rep


def standard_error(returns) -> float:
    r = np.asarray(returns, dtype=np.float64)
    return float(r.std(ddof=1) / math.sqrt(r.size))


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return "undefined"
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def format_table(rows: Sequence[Mapping], columns: Sequence[str]) -> str:
    """Aligned text table; numbers right-aligned."""
    cells = [[_fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row, r in zip(cells, rows):
        parts = []
        for i, (cell, w) in enumerate(zip(row, widths)):
            numeric = isinstance(r.get(columns[i]), (int, float)) and not isinstance(r.get(columns[i]), bool)
            parts.append(cell.rjust(w) if numeric else cell.ljust(w))
        lines.append("  ".join(parts).rstrip())
    return "\n".join(lines) + "\n"


def to_csv(rows: Sequence[Mapping], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_csv_value(r.get(c)) for c in columns])
    return buf.getvalue()


def _csv_value(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def selection_log_rows(report: BacktestReport) -> list[dict]:
    return [
        {
            "date": d.isoformat() if hasattr(d, "isoformat") else str(d),
            "n_selected": len(s),
            "selected": " ".join(sorted(s)),
            "portfolio_return": float(r),
        }
        for d, s, r in zip(report.dates, report.selections, report.returns)
    ]
