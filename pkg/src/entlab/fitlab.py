"""Entropy-performance law ``R = -a exp(H) + b``: fitting, prediction, size scaling."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class FitResult:
    a: float
    b: float
    rmse: float
    n_points: int

    @property
    def ceiling(self) -> float:
        """Predicted reward once entropy is exhausted (H = 0)."""
        return self.b - self.a

    def to_json(self) -> str:
        return json.dumps({**asdict(self), "ceiling": self.ceiling})

    @classmethod
    def from_json(cls, text: str) -> "FitResult":
        d = json.loads(text)
        return cls(d["a"], d["b"], d["rmse"], d["n_points"])


def _rmse(residuals: np.ndarray) -> float:
    return float(math.sqrt(np.mean(residuals**2))) if residuals.size else float("nan")


def _ols_line(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Closed-form OLS ``y = slope * x + intercept`` on centered data (sorted for order independence)."""
    order = np.lexsort((y, x))
    x, y = x[order], y[order]
    xm, ym = x.mean(), y.mean()
    dx = x - xm
    sxx = float(dx @ dx)
    if sxx == 0.0:
        raise ValueError("rank deficient: all abscissae are identical")
    slope = float(dx @ (y - ym)) / sxx
    return slope, float(ym - slope * xm)


def fit_exponential(entropies: Sequence[float], rewards: Sequence[float]) -> FitResult:
    """Least-squares fit of ``R = -a exp(H) + b`` via the linear substitution ``u = exp(H)``."""
    h = np.asarray(entropies, dtype=np.float64)
    r = np.asarray(rewards, dtype=np.float64)
    if h.shape != r.shape or h.size < 2:
        raise ValueError("need >= 2 (H, R) pairs")
    order = np.lexsort((r, h))  # fixed summation order makes the fit permutation-invariant
    h, r = h[order], r[order]
    u = np.exp(h)
    slope, intercept = _ols_line(u, r)
    a, b = -slope, intercept
    resid = r - (-a * u + b)
    return FitResult(a, b, _rmse(resid), int(h.size))


def predict_performance(fit: FitResult, entropies, truths=None):
    """Predicted rewards; with ``truths`` also returns the RMSE against them."""
    pred = -fit.a * np.exp(np.asarray(entropies, dtype=np.float64)) + fit.b
    if truths is None:
        return pred
    return pred, _rmse(np.asarray(truths, dtype=np.float64) - pred)


def fit_prefix(entropies, rewards, fit_fraction: float = 0.15):
    """Fit on the first ``fit_fraction`` of a run and predict the rest.

    Returns ``(fit, predictions, heldout_rmse)``; the held-out RMSE falls back to
    the RMSE over all points when nothing is held out.
    """
    h = np.asarray(entropies, dtype=np.float64)
    r = np.asarray(rewards, dtype=np.float64)
    if not 0 < fit_fraction <= 1:
        raise ValueError("fit_fraction must lie in (0, 1]")
    n_fit = max(2, math.ceil(round(fit_fraction * h.size, 9)))
    fit = fit_exponential(h[:n_fit], r[:n_fit])
    pred = predict_performance(fit, h)
    held = r[n_fit:] - pred[n_fit:]
    rmse = _rmse(held) if held.size else _rmse(r - pred)
    return fit, pred, rmse


@dataclass(frozen=True)
class ScalingFit:
    slope: float
    intercept: float
    residuals: tuple

    def predict(self, size: float) -> float:
        if size <= 0:
            raise ValueError("size must be positive")
        return self.slope * math.log(size) + self.intercept


def fit_loglinear_coeffs(sizes: Sequence[float], coefs: Sequence[float]) -> ScalingFit:
    """OLS of a fitted coefficient against ``ln(size)``."""
    s = np.asarray(sizes, dtype=np.float64)
    c = np.asarray(coefs, dtype=np.float64)
    if s.shape != c.shape:
        raise ValueError("sizes and coefs must have equal length")
    if np.any(s <= 0):
        raise ValueError("sizes must be positive")
    if np.unique(s).size < 2:
        raise ValueError("need >= 2 distinct sizes")
    x = np.log(s)
    slope, intercept = _ols_line(x, c)
    return ScalingFit(slope, intercept, tuple((c - (slope * x + intercept)).tolist()))


def read_curve(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Read ``(step, entropy, val_reward)`` columns from a steps CSV or a minimal ``entropy,val_reward`` CSV.

    Rows are strict: a ragged row, a missing column or a non-finite value raises.
    Files without a ``step`` column are numbered from 0.
    """
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = rows[0]
    missing = [c for c in ("entropy", "val_reward") if c not in header]
    if missing:
        raise ValueError(f"{path}: missing column(s) {', '.join(missing)}")
    ih, ir = header.index("entropy"), header.index("val_reward")
    ist = header.index("step") if "step" in header else None
    steps, h, r = [], [], []
    for n, row in enumerate(rows[1:], 2):
        if len(row) != len(header):
            raise ValueError(f"{path}:{n}: expected {len(header)} fields, got {len(row)}")
        try:
            vals = float(row[ih]), float(row[ir])
            st = int(row[ist]) if ist is not None else n - 2
        except ValueError:
            raise ValueError(f"{path}:{n}: unparsable value") from None
        if not all(map(math.isfinite, vals)):
            raise ValueError(f"{path}:{n}: non-finite entropy or reward")
        steps.append(st)
        h.append(vals[0])
        r.append(vals[1])
    return np.array(steps, dtype=np.int64), np.array(h), np.array(r)
