"""First-order entropy-change predictions, their numerical verification, and run instrumentation."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .advantage import compute_advantage
from .losses import npg_update, pg_update
from .policy import PolicyTable, entropy_from_logits, log_softmax

QUANTILES = (0.02, 0.2, 2.0, 20.0, 50.0, 100.0)
RULES = ("pg", "npg")


def _state_weights(policy: PolicyTable, states) -> np.ndarray:
    if states is None:
        w = np.ones(policy.num_states)
    else:
        w = np.asarray(states, dtype=np.float64)
        if w.shape != (policy.num_states,):
            raise ValueError(f"state weights must have shape ({policy.num_states},)")
    return w / w.sum()


def _cov_under(p: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row-wise covariance of x and y under the categorical distribution p."""
    ex = (p * x).sum(axis=-1, keepdims=True)
    ey = (p * y).sum(axis=-1, keepdims=True)
    return (p * (x - ex) * (y - ey)).sum(axis=-1)


def weighted_entropy(policy: PolicyTable, states=None) -> float:
    w = _state_weights(policy, states)
    return float((w * entropy_from_logits(policy.logits)).sum())


def lemma1_predict(policy_before: PolicyTable, policy_after: PolicyTable, states=None) -> float:
    """``E_s[-Cov_{a ~ pi_before}(log pi_before(a|s), z_after - z_before)]``."""
    if policy_before.logits.shape != policy_after.logits.shape:
        raise ValueError("policies must share dimensions")
    w = _state_weights(policy_before, states)
    logp = log_softmax(policy_before.logits)
    dz = policy_after.logits - policy_before.logits
    return float((w * -_cov_under(np.exp(logp), logp, dz)).sum())


def theorem_predict(policy: PolicyTable, advantages, eta: float, rule: str, states=None) -> float:
    """Closed-form step entropy change: ``-eta Cov(log pi, pi A)`` (pg) or ``-eta Cov(log pi, A)`` (npg)."""
    if rule not in RULES:
        raise ValueError(f"unknown rule {rule!r}")
    w = _state_weights(policy, states)
    logp = log_softmax(policy.logits)
    p = np.exp(logp)
    adv = np.asarray(advantages, dtype=np.float64)
    y = p * adv if rule == "pg" else adv
    return float((w * -eta * _cov_under(p, logp, y)).sum())


def apply_rule(policy: PolicyTable, advantages, eta: float, rule: str, states=None) -> PolicyTable:
    if rule == "pg":
        return pg_update(policy, advantages, eta, mode="exact-expectation")[0]
    if rule == "npg":
        return npg_update(policy, advantages, eta)[0]
    raise ValueError(f"unknown rule {rule!r}")


def center_advantages(policy: PolicyTable, values) -> np.ndarray:
    """Subtract the on-policy mean per state so that ``E_pi[A] = 0``."""
    p = np.exp(log_softmax(policy.logits))
    v = np.asarray(values, dtype=np.float64)
    return v - (p * v).sum(axis=1, keepdims=True)


@dataclass
class EntropyDeltaPrediction:
    step: int
    eta: float
    pred_lemma1: float
    pred_theorem: float
    measured: float

    @property
    def abs_err(self) -> float:
        return abs(self.measured - self.pred_lemma1)

    CSV_HEADER = ("step", "eta", "pred_lemma1", "pred_theorem", "measured", "abs_err")

    def csv_row(self) -> list:
        return [self.step, self.eta, self.pred_lemma1, self.pred_theorem, self.measured, self.abs_err]


@dataclass
class FirstOrderTable:
    etas: np.ndarray
    predicted: np.ndarray
    measured: np.ndarray
    errors: np.ndarray
    ratios: np.ndarray  # errors[i] / errors[i + 1]
    noise_floor: float

    @property
    def above_noise(self) -> np.ndarray:
        return self.errors > self.noise_floor

    def tail_ratios(self, count: int = 2) -> np.ndarray:
        return self.ratios[-count:]

    def passes(self, count: int = 2, lo: float = 3.0, hi: float = 5.0) -> bool:
        """True if the last ``count`` ratios lie in [lo, hi] (pairs below noise are skipped)."""
        ok_pairs = self.above_noise[:-1] & self.above_noise[1:]
        tail = slice(len(self.ratios) - count, None)
        r, ok = self.ratios[tail], ok_pairs[tail]
        if not ok.any():
            return True
        return bool(np.all((r[ok] >= lo) & (r[ok] <= hi)))


def verify_first_order(
    policy: PolicyTable,
    advantages,
    rule: str,
    etas: Sequence[float] = tuple(0.1 * 0.5**i for i in range(6)),
    states=None,
    noise_floor: float = 1e-13,
    delta_scale: float = 1.0,
) -> FirstOrderTable:
    """Apply one exact update per step size and compare measured entropy change to the prediction.

    The residual of a first-order prediction is second order, so halving the
    step size should quarter the error. ``delta_scale`` multiplies the applied
    logit change (fault injection for negative controls).
    """
    etas = np.asarray(etas, dtype=np.float64)
    if etas.size < 3 or np.any(np.diff(etas) >= 0):
        raise ValueError("step sizes must be strictly decreasing with at least 3 values")
    h0 = weighted_entropy(policy, states)
    pred, meas = [], []
    for eta in etas:
        after = apply_rule(policy, advantages, float(eta), rule, states)
        if delta_scale != 1.0:
            after.logits = policy.logits + delta_scale * (after.logits - policy.logits)
        pred.append(theorem_predict(policy, advantages, float(eta), rule, states))
        meas.append(weighted_entropy(after, states) - h0)
    pred, meas = np.array(pred), np.array(meas)
    err = np.abs(meas - pred)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = err[:-1] / err[1:]
    return FirstOrderTable(etas, pred, meas, err, ratios, noise_floor)


# ---------------------------------------------------------------------------
# group-wise covariance of sequence log-prob and pi * A


def group_covariance(norm_log_probs: np.ndarray, advantages: np.ndarray) -> float:
    """Population covariance over a group of (normalized log-prob, exp(normalized log-prob) * A)."""
    lp = np.asarray(norm_log_probs, dtype=np.float64)
    if lp.size < 2:
        raise ValueError("group needs K >= 2")
    y = np.exp(lp) * np.asarray(advantages, dtype=np.float64)
    return float(((lp - lp.mean()) * (y - y.mean())).mean())


def group_advantages(rewards, estimator: str = "grpo") -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if np.ptp(r) == 0 and estimator == "grpo":
        return np.zeros_like(r)
    return compute_advantage(r, estimator)


def batch_covariance(groups, policy, estimator: str = "grpo") -> tuple[float, np.ndarray]:
    """Mean over groups of the group-wise covariance; also returns the per-group values.

    Sequence log-probs are length-normalized; ``policy`` is a :class:`SequencePolicy`.
    """
    vals = []
    for g in groups:
        if g.K < 2:
            raise ValueError("group with K < 2")
        rows = policy.response_rows(np.full(g.K, g.prompt), g.responses, create=False)
        logp = log_softmax(policy.table.logits[rows.ravel()])
        tok = logp[np.arange(rows.size), g.responses.ravel()].reshape(g.responses.shape)
        vals.append(group_covariance(tok.mean(axis=1), group_advantages(g.rewards, estimator)))
    vals = np.array(vals)
    return (float(vals.mean()) if vals.size else 0.0), vals


# ---------------------------------------------------------------------------
# run-level records and summaries


@dataclass
class StepRecord:
    step: int
    entropy: float
    cov_mean: float
    train_acc: float
    val_reward: float
    resp_len: float
    cov_easy: float = float("nan")
    cov_mid: float = float("nan")
    cov_hard: float = float("nan")

    def __post_init__(self):
        if self.entropy < 0:
            raise ValueError("entropy must be >= 0")
        if not 0 <= self.train_acc <= 1:
            raise ValueError("train_acc must lie in [0, 1]")

    @classmethod
    def csv_header(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def csv_row(self) -> list:
        return [getattr(self, f.name) for f in fields(self)]


@dataclass
class ConsumptionCurve:
    entropy_consumed: np.ndarray
    perf_gained: np.ndarray
    entropy_envelope: np.ndarray
    perf_envelope: np.ndarray
    degenerate_reward: bool = False


def _envelope(x: np.ndarray) -> np.ndarray:
    return np.maximum.accumulate(np.clip(np.nan_to_num(x, nan=0.0), 0.0, 1.0))


def consumption_curve(entropies: Sequence[float], rewards: Sequence[float] | None = None) -> ConsumptionCurve:
    """Cumulative fraction of total entropy drop and of total reward gain at each step."""
    h = np.asarray(entropies, dtype=np.float64)
    if h.size < 2:
        raise ValueError("need at least 2 records")
    if h[0] == h[-1]:
        raise ValueError("degenerate run: initial and final entropy are equal")
    ent = (h[0] - h) / (h[0] - h[-1])
    degenerate = True
    perf = np.full(h.size, np.nan)
    if rewards is not None:
        r = np.asarray(rewards, dtype=np.float64)
        if r.shape != h.shape:
            raise ValueError("entropy and reward series must have equal length")
        if r[-1] != r[0]:
            perf = (r - r[0]) / (r[-1] - r[0])
            degenerate = False
    return ConsumptionCurve(ent, perf, _envelope(ent), _envelope(perf), degenerate)


def quantile_label(q: float) -> str:
    return "All" if q >= 100 else f"Top {q:g}%"


def cov_quantile_report(token_covs, quantiles: Sequence[float] = QUANTILES) -> list[tuple[str, float]]:
    """Mean of the ``ceil(q N / 100)`` largest covariances for each quantile ``q`` (percent)."""
    c = np.sort(np.asarray(token_covs, dtype=np.float64))[::-1]
    if c.size < 1:
        raise ValueError("need at least one covariance")
    rows = []
    for q in quantiles:
        if not 0 < q <= 100:
            raise ValueError("quantiles must lie in (0, 100]")
        n = max(1, math.ceil(round(q * c.size / 100, 9)))
        rows.append((quantile_label(q), float(c[:n].mean())))
    return rows
