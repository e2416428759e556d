"""Update rules and surrogate losses over a tabular logit table.

All ``*_grad`` functions return the value of a loss that is *minimized* and its
analytic gradient with respect to ``policy.logits``. Token-level terms reach the
table through ``d log pi(y|s) / d z[s] = e_y - pi(.|s)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .advantage import compute_advantage
from .policy import PolicyTable, SequencePolicy, log_softmax, score_jacobian, softmax

PENALTY_KINDS = ("abs-logratio", "exact-kl")


class TokenRecord(NamedTuple):
    prompt: int
    response: int
    position: int
    token: int
    state: int
    old_log_prob: float
    cur_log_prob: float
    advantage: float
    covariance: float


@dataclass
class TokenBatch:
    """Struct-of-arrays batch of rollout tokens.

    ``states`` index rows of the policy table the batch is evaluated against.
    ``weights`` are per-token visit weights for state-level terms (entropy,
    KL to a reference); by default each response contributes equally and its
    tokens share its weight.
    """

    states: np.ndarray
    tokens: np.ndarray
    advantages: np.ndarray
    old_log_probs: np.ndarray | None = None
    weights: np.ndarray | None = None
    prompts: np.ndarray | None = None
    responses: np.ndarray | None = None
    positions: np.ndarray | None = None
    covariance: np.ndarray | None = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.int64)
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.advantages = np.asarray(self.advantages, dtype=np.float64)
        n = self.states.size
        if self.tokens.size != n or self.advantages.size != n:
            raise ValueError("states, tokens and advantages must have equal length")
        if self.old_log_probs is not None:
            self.old_log_probs = np.asarray(self.old_log_probs, dtype=np.float64)
        if self.weights is None:
            self.weights = np.full(n, 1.0 / n) if n else np.zeros(0)
        for name in ("prompts", "responses", "positions"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(n, dtype=np.int64) if name != "positions" else np.arange(n))

    def __len__(self) -> int:
        return self.states.size

    def records(self, policy: PolicyTable):
        cur = current_log_probs(policy, self)
        old = self.old_log_probs if self.old_log_probs is not None else np.full(len(self), np.nan)
        cov = self.covariance if self.covariance is not None else np.full(len(self), np.nan)
        for i in range(len(self)):
            yield TokenRecord(
                int(self.prompts[i]), int(self.responses[i]), int(self.positions[i]), int(self.tokens[i]),
                int(self.states[i]), float(old[i]), float(cur[i]), float(self.advantages[i]), float(cov[i]),
            )

    def remap(self, rows: np.ndarray) -> tuple["TokenBatch", np.ndarray]:
        """Re-index states onto a compact local table; returns (batch, global rows)."""
        uniq, inv = np.unique(self.states, return_inverse=True)
        b = TokenBatch(
            inv.reshape(-1), self.tokens, self.advantages, self.old_log_probs, self.weights,
            self.prompts, self.responses, self.positions, self.covariance,
        )
        return b, np.asarray(rows)[uniq] if rows is not None else uniq


def build_token_batch(policy: SequencePolicy, groups, estimator: str = "grpo", old_from_policy: bool = True) -> TokenBatch:
    """Flatten groups into a :class:`TokenBatch` over ``policy.table`` rows.

    Old log-probs are evaluated from the (frozen) policy at temperature 1 when
    ``old_from_policy``; otherwise the recorded behavior log-probs are used.
    """
    groups = list(groups)
    if not groups:
        return TokenBatch(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0))
    responses = np.concatenate([g.responses for g in groups])
    n, T = responses.shape
    prompts = np.repeat([g.prompt for g in groups], [g.K for g in groups])
    rows = policy.response_rows(prompts, responses)
    adv = np.concatenate([compute_advantage(g.rewards, estimator) for g in groups])
    if old_from_policy:
        logp = log_softmax(policy.table.logits[rows.ravel()])
        old = logp[np.arange(n * T), responses.ravel()]
    else:
        old = np.concatenate([g.behavior_log_probs for g in groups]).ravel()
    return TokenBatch(
        states=rows.ravel(),
        tokens=responses.ravel(),
        advantages=np.repeat(adv, T),
        old_log_probs=old,
        weights=np.full(n * T, 1.0 / (n * T)),
        prompts=np.repeat(prompts, T),
        responses=np.repeat(np.arange(n), T),
        positions=np.tile(np.arange(T), n),
    )


class GradResult(NamedTuple):
    loss: float
    grad: np.ndarray
    selected: np.ndarray = np.zeros(0, dtype=np.int64)


@dataclass
class UpdateReport:
    logit_delta: np.ndarray
    selected: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    loss: float = float("nan")
    grad_norm: float = float("nan")
    eta: float = float("nan")
    selected_covs: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def to_json(self, step: int, **extra) -> str:
        covs = self.selected_covs
        doc = {
            "step": int(step),
            "loss": _json_float(self.loss),
            "grad_norm": _json_float(self.grad_norm),
            "n_selected": int(self.selected.size),
            "selected_cov_min": _json_float(covs.min()) if covs.size else None,
            "selected_cov_max": _json_float(covs.max()) if covs.size else None,
        }
        doc.update(extra)
        return json.dumps(doc)


def _json_float(x) -> float | None:
    x = float(x)
    return x if math.isfinite(x) else None


# ---------------------------------------------------------------------------
# token-level primitives


def current_log_probs(policy: PolicyTable, batch: TokenBatch) -> np.ndarray:
    logp = log_softmax(policy.logits[batch.states])
    return logp[np.arange(len(batch)), batch.tokens]


def token_covariance(log_probs, advantages) -> np.ndarray:
    """Token-wise centered cross-product of log-prob and advantage over the batch."""
    lp = np.asarray(log_probs, dtype=np.float64)
    adv = np.asarray(advantages, dtype=np.float64)
    if lp.size < 2 or lp.shape != adv.shape:
        raise ValueError("need >= 2 tokens with matching log-probs and advantages")
    return (lp - lp.mean()) * (adv - adv.mean())


def _backprop_tokens(policy: PolicyTable, batch: TokenBatch, dlogp: np.ndarray) -> np.ndarray:
    """Push per-token ``dL/dlog pi(y_i|s_i)`` onto the logit table."""
    grad = np.zeros_like(policy.logits)
    probs = softmax(policy.logits[batch.states])
    contrib = -dlogp[:, None] * probs
    contrib[np.arange(len(batch)), batch.tokens] += dlogp
    np.add.at(grad, batch.states, contrib)
    return grad


def _backprop_states(policy: PolicyTable, states: np.ndarray, dz: np.ndarray) -> np.ndarray:
    grad = np.zeros_like(policy.logits)
    np.add.at(grad, states, dz)
    return grad


def _ratio(policy: PolicyTable, batch: TokenBatch) -> tuple[np.ndarray, np.ndarray]:
    if batch.old_log_probs is None:
        raise ValueError("batch is missing old log-probs recorded at rollout")
    lp = current_log_probs(policy, batch)
    return lp, np.exp(lp - batch.old_log_probs)


def _clip_terms(ratio, adv, eps_low, eps_high):
    """Per-token PPO-clip loss and its derivative w.r.t. the token log-prob."""
    lo, hi = 1.0 - eps_low, 1.0 + eps_high
    l1 = -ratio * adv
    l2 = -np.clip(ratio, lo, hi) * adv
    loss = np.maximum(l1, l2)
    # gradient flows through the unclipped branch, or the clipped one while inside the range
    active = (l1 >= l2) | ((ratio >= lo) & (ratio <= hi))
    return loss, np.where(active, -ratio * adv, 0.0)


def _select_count(fraction: float, n: int, rounding) -> int:
    # round away float noise such as 0.002 * 1000 = 2.0000000000000004
    return int(rounding(round(fraction * n, 9)))


# ---------------------------------------------------------------------------
# exact / sampled policy-gradient updates


def pg_loss_grad(policy: PolicyTable, batch: TokenBatch) -> GradResult:
    """Sampled surrogate ``-mean(A * log pi)`` whose negative gradient is the PG estimate."""
    lp = current_log_probs(policy, batch)
    n = len(batch)
    loss = float(-(batch.advantages * lp).mean())
    return GradResult(loss, _backprop_tokens(policy, batch, -batch.advantages / n))


def pg_update(policy: PolicyTable, batch, eta: float, mode: str = "exact-expectation", state_weights=None):
    """One gradient-ascent step on the expected-advantage objective.

    ``exact-expectation``: ``batch`` is an advantage table ``A[s, a]`` and the
    gradient at each state is the full sum ``sum_a' pi(a') A(a') d log pi(a')/dz``
    (optionally scaled by ``state_weights``). ``sampled``: ``batch`` is a
    :class:`TokenBatch` and the gradient is the Monte-Carlo estimate.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    new = policy.copy()
    if mode == "exact-expectation":
        adv = np.asarray(batch, dtype=np.float64)
        if adv.shape != policy.logits.shape:
            raise ValueError(f"advantage table shape {adv.shape} != {policy.logits.shape}")
        w = np.ones(policy.num_states) if state_weights is None else np.asarray(state_weights, dtype=np.float64)
        grad = np.zeros_like(policy.logits)
        for s in range(policy.num_states):
            p = softmax(policy.logits[s])
            grad[s] = w[s] * ((p * adv[s]) @ score_jacobian(policy, s))
        new.logits = policy.logits + eta * grad
        loss = float(-(w[:, None] * softmax(policy.logits) * adv).sum())
    elif mode == "sampled":
        res = pg_loss_grad(policy, batch)
        grad = -res.grad
        loss = res.loss
        new.logits = policy.logits + eta * grad
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return new, UpdateReport(new.logits - policy.logits, loss=loss, grad_norm=float(np.linalg.norm(grad)), eta=eta)


def npg_update(policy: PolicyTable, advantages, eta: float, visited=None):
    """Natural policy gradient step for tabular softmax: ``z[s, a] += eta * A(s, a)``.

    ``advantages`` is either an ``A[s, a]`` table (``visited`` masks which
    entries move; default all) or a :class:`TokenBatch`, in which case each
    visited (state, token) pair moves by the mean advantage of its tokens.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    if isinstance(advantages, TokenBatch):
        b = advantages
        total = np.zeros_like(policy.logits)
        count = np.zeros_like(policy.logits)
        np.add.at(total, (b.states, b.tokens), b.advantages)
        np.add.at(count, (b.states, b.tokens), 1.0)
        mask = count > 0
        adv = np.divide(total, count, out=np.zeros_like(total), where=mask)
    else:
        adv = np.asarray(advantages, dtype=np.float64)
        if adv.shape != policy.logits.shape:
            raise ValueError(f"advantage table shape {adv.shape} != {policy.logits.shape}")
        mask = np.ones(adv.shape, bool) if visited is None else np.asarray(visited, bool)
    delta = np.where(mask, eta * adv, 0.0)
    new = policy.copy()
    new.logits = policy.logits + delta
    return new, UpdateReport(delta, eta=eta, grad_norm=float(np.linalg.norm(np.where(mask, adv, 0.0))))


# ---------------------------------------------------------------------------
# surrogate losses


def ppo_clip_grad(policy: PolicyTable, batch: TokenBatch, eps_low: float = 0.2, eps_high: float | None = None) -> GradResult:
    """PPO clipped surrogate, averaged over tokens; ``eps_high`` > ``eps_low`` gives clip-higher."""
    eps_high = eps_low if eps_high is None else eps_high
    if not (0 < eps_low < 1 and 0 < eps_high < 1):
        raise ValueError("clip thresholds must lie in (0, 1)")
    _, ratio = _ratio(policy, batch)
    loss, dl = _clip_terms(ratio, batch.advantages, eps_low, eps_high)
    n = len(batch)
    return GradResult(float(loss.mean()), _backprop_tokens(policy, batch, dl / n))


def weighted_entropy_grad(policy: PolicyTable, batch: TokenBatch) -> tuple[float, np.ndarray]:
    """Visit-weighted mean state entropy and its gradient."""
    logp = log_softmax(policy.logits[batch.states])
    p = np.exp(logp)
    h = -(p * logp).sum(axis=1)
    w = batch.weights
    dz = -w[:, None] * p * (logp + h[:, None])
    return float((w * h).sum()), _backprop_states(policy, batch.states, dz)


def entropy_reg_grad(policy: PolicyTable, batch: TokenBatch, alpha: float, eps_low=0.2, eps_high=None) -> GradResult:
    """PPO-clip loss minus ``alpha`` times the mean entropy of the visited states."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    base = ppo_clip_grad(policy, batch, eps_low, eps_high)
    if alpha == 0:
        return base
    h, gh = weighted_entropy_grad(policy, batch)
    return GradResult(base.loss - alpha * h, base.grad - alpha * gh)


def weighted_kl_grad(policy: PolicyTable, ref_policy: PolicyTable, batch: TokenBatch) -> tuple[float, np.ndarray]:
    """Visit-weighted ``KL(pi_theta || pi_ref)`` over batch states and its gradient."""
    logp = log_softmax(policy.logits[batch.states])
    logq = log_softmax(ref_policy.logits[batch.states])
    p = np.exp(logp)
    kl = (p * (logp - logq)).sum(axis=1)
    w = batch.weights
    dz = w[:, None] * p * (logp - logq - kl[:, None])
    return float((w * kl).sum()), _backprop_states(policy, batch.states, dz)


def ref_kl_grad(policy: PolicyTable, ref_policy: PolicyTable, batch: TokenBatch, beta_ref: float, eps_low=0.2, eps_high=None) -> GradResult:
    if beta_ref < 0:
        raise ValueError("beta_ref must be >= 0")
    if ref_policy.logits.shape != policy.logits.shape:
        raise ValueError("reference policy must share dimensions")
    base = ppo_clip_grad(policy, batch, eps_low, eps_high)
    if beta_ref == 0:
        return base
    kl, gk = weighted_kl_grad(policy, ref_policy, batch)
    return GradResult(base.loss + beta_ref * kl, base.grad + beta_ref * gk)


def clip_cov_select(covs: np.ndarray, ratio: float, cov_low: float, cov_high: float, seed) -> np.ndarray:
    """Uniformly pick ``floor(ratio * N)`` candidates with covariance in ``[cov_low, cov_high]``."""
    if cov_low >= cov_high:
        raise ValueError("cov_low must be < cov_high")
    cand = np.flatnonzero((covs >= cov_low) & (covs <= cov_high))
    n_sel = min(_select_count(ratio, covs.size, math.floor), cand.size)
    if n_sel == 0:
        return np.zeros(0, dtype=np.int64)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(cand, size=n_sel, replace=False))


def clip_cov_grad(
    policy: PolicyTable,
    batch: TokenBatch,
    ratio: float = 2e-4,
    cov_low: float = 1.0,
    cov_high: float = 5.0,
    seed=0,
    eps_low: float = 0.2,
    eps_high: float | None = None,
) -> GradResult:
    """PPO-clip loss with a random subset of high-covariance tokens detached.

    Detached tokens keep their loss value and stay in the mean's denominator
    but contribute no gradient.
    """
    if cov_low >= cov_high:
        raise ValueError("cov_low must be < cov_high")
    lp, r = _ratio(policy, batch)
    covs = token_covariance(lp, batch.advantages)
    batch.covariance = covs
    sel = clip_cov_select(covs, ratio, cov_low, cov_high, seed)
    eps_high = eps_low if eps_high is None else eps_high
    loss, dl = _clip_terms(r, batch.advantages, eps_low, eps_high)
    dl[sel] = 0.0
    n = len(batch)
    return GradResult(float(loss.mean()), _backprop_tokens(policy, batch, dl / n), sel)


def kl_cov_select(covs: np.ndarray, k: float) -> np.ndarray:
    """Indices of the ``ceil(k * N)`` largest covariances; ties go to the lower index."""
    n_sel = min(_select_count(k, covs.size, math.ceil), covs.size)
    if n_sel <= 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-covs, kind="stable")
    return np.sort(order[:n_sel])


def kl_cov_grad(
    policy: PolicyTable,
    batch: TokenBatch,
    k: float = 2e-3,
    beta: float = 1.0,
    penalty_kind: str = "abs-logratio",
    old_policy: PolicyTable | None = None,
) -> GradResult:
    """Unclipped ratio objective plus a KL-style penalty on the top-k covariance tokens.

    ``abs-logratio`` penalizes ``|log pi(y) - log pi_old(y)|`` of the taken token
    (subgradient 0 at equality); ``exact-kl`` penalizes the full categorical
    ``KL(pi_old(.|s) || pi(.|s))`` at the token's state and needs ``old_policy``.
    """
    if beta < 0:
        raise ValueError("beta must be >= 0")
    if penalty_kind not in PENALTY_KINDS:
        raise ValueError(f"unknown penalty_kind {penalty_kind!r}")
    lp, r = _ratio(policy, batch)
    adv = batch.advantages
    covs = token_covariance(lp, adv)
    batch.covariance = covs
    n = len(batch)
    sel = kl_cov_select(covs, k) if beta > 0 else np.zeros(0, dtype=np.int64)
    per_tok = -r * adv
    dl = -r * adv
    extra_grad = None
    if sel.size:
        if penalty_kind == "abs-logratio":
            diff = lp[sel] - batch.old_log_probs[sel]
            per_tok[sel] += beta * np.abs(diff)
            dl[sel] += beta * np.sign(diff)
        else:
            if old_policy is None:
                raise ValueError("exact-kl penalty needs old_policy")
            states = batch.states[sel]
            logq = log_softmax(old_policy.logits[states])
            logp = log_softmax(policy.logits[states])
            q = np.exp(logq)
            kl = (q * (logq - logp)).sum(axis=1)
            per_tok[sel] += beta * kl
            extra_grad = _backprop_states(policy, states, beta * (np.exp(logp) - q) / n)
    grad = _backprop_tokens(policy, batch, dl / n)
    if extra_grad is not None:
        grad += extra_grad
    return GradResult(float(per_tok.mean()), grad, sel)
