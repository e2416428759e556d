"""Tabular softmax policies: bandit tables and lazily materialized sequence policies."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax via log-sum-exp with max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def entropy_from_logits(logits: np.ndarray) -> np.ndarray:
    """Exact categorical entropy (nats) of each row of ``logits``."""
    logp = log_softmax(logits)
    return -(np.exp(logp) * logp).sum(axis=-1)


class PolicyTable:
    """Dense table of logits ``z[s, a]`` defining ``pi(a|s) = softmax(z[s])``.

    Rows can be appended (used by :class:`SequencePolicy` for lazy states), so
    the storage keeps spare capacity and ``logits`` is a view of the live rows.
    """

    def __init__(self, logits: np.ndarray):
        arr = np.array(logits, dtype=np.float64, ndmin=2)
        if arr.ndim != 2 or arr.shape[1] < 1:
            raise ValueError(f"logits must be a 2-d table, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("logits must be finite")
        self._buf = arr
        self._n = arr.shape[0]

    @property
    def logits(self) -> np.ndarray:
        return self._buf[: self._n]

    @logits.setter
    def logits(self, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.logits.shape:
            raise ValueError(f"shape mismatch: {value.shape} vs {self.logits.shape}")
        self._buf[: self._n] = value

    @property
    def num_states(self) -> int:
        return self._n

    @property
    def num_actions(self) -> int:
        return self._buf.shape[1]

    def copy(self) -> "PolicyTable":
        return PolicyTable(self.logits.copy())

    def append_uniform(self, count: int) -> int:
        """Append ``count`` zero-logit rows; returns the index of the first new row."""
        start = self._n
        need = self._n + count
        if need > self._buf.shape[0]:
            cap = max(need, 2 * self._buf.shape[0], 64)
            buf = np.zeros((cap, self.num_actions))
            buf[: self._n] = self._buf[: self._n]
            self._buf = buf
        self._buf[start:need] = 0.0
        self._n = need
        return start

    def _check_state(self, state: int) -> None:
        if not 0 <= state < self._n:
            raise IndexError(f"state {state} out of range [0, {self._n})")

    def to_json(self) -> str:
        return json.dumps(
            {
                "num_states": self.num_states,
                "num_actions": self.num_actions,
                "logits": self.logits.ravel().tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "PolicyTable":
        doc = json.loads(text)
        arr = np.asarray(doc["logits"], dtype=np.float64)
        return cls(arr.reshape(doc["num_states"], doc["num_actions"]))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PolicyTable):
            return NotImplemented
        return self.logits.shape == other.logits.shape and np.array_equal(self.logits, other.logits)

    def __repr__(self) -> str:
        return f"PolicyTable(num_states={self.num_states}, num_actions={self.num_actions})"


def init_policy(num_states: int, num_actions: int, init="uniform") -> PolicyTable:
    """Create a policy; ``init`` is ``"uniform"`` or an explicit logit table."""
    if num_states < 1 or num_actions < 1:
        raise ValueError("dimensions must be >= 1")
    if isinstance(init, str):
        if init != "uniform":
            raise ValueError(f"unknown init {init!r}")
        return PolicyTable(np.zeros((num_states, num_actions)))
    table = np.asarray(init, dtype=np.float64)
    if table.ndim == 1:
        table = table[None, :]
    if table.shape != (num_states, num_actions):
        raise ValueError(f"explicit table has shape {table.shape}, expected {(num_states, num_actions)}")
    return PolicyTable(table)


def action_distribution(policy: PolicyTable, state: int) -> np.ndarray:
    policy._check_state(state)
    return softmax(policy.logits[state])


def action_log_probs(policy: PolicyTable, state: int) -> np.ndarray:
    policy._check_state(state)
    return log_softmax(policy.logits[state])


def state_entropy(policy: PolicyTable, state: int) -> float:
    policy._check_state(state)
    return float(entropy_from_logits(policy.logits[state]))


def score_jacobian(policy: PolicyTable, state: int) -> np.ndarray:
    """``J[a, a'] = d log pi(a|s) / d z[s, a'] = 1{a == a'} - pi(a'|s)``."""
    p = action_distribution(policy, state)
    return np.eye(p.size) - p[None, :]


@dataclass(frozen=True)
class _Window:
    """Integer codec for (prompt, last-c-token prefix) states."""

    vocab_size: int
    context_window: int

    @property
    def offsets(self) -> list[int]:
        # offsets[l] = number of prefixes shorter than l
        out, acc = [], 0
        for ln in range(self.context_window + 1):
            out.append(acc)
            acc += self.vocab_size**ln
        return out

    @property
    def states_per_prompt(self) -> int:
        return sum(self.vocab_size**ln for ln in range(self.context_window + 1))


class SequencePolicy:
    """Autoregressive tabular policy over ``vocab_size`` tokens.

    The state for generating token ``t`` of a response is the pair
    ``(prompt, last min(t, context_window) tokens)``. States are encoded as
    integer keys and materialized in the underlying :class:`PolicyTable` on
    first visit with uniform (zero) logits.
    """

    def __init__(self, num_prompts: int, vocab_size: int, max_len: int, context_window: int | None = None):
        if min(num_prompts, vocab_size, max_len) < 1:
            raise ValueError("num_prompts, vocab_size and max_len must be >= 1")
        c = max_len - 1 if context_window is None else context_window
        if c < 0:
            raise ValueError("context_window must be >= 0")
        self.num_prompts = num_prompts
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.context_window = c
        self._codec = _Window(vocab_size, c)
        self._offsets = np.array(self._codec.offsets, dtype=np.int64)
        self._per_prompt = self._codec.states_per_prompt
        if num_prompts * self._per_prompt >= 2**62:
            raise ValueError("state space too large for 64-bit keys")
        self.table = PolicyTable(np.zeros((0, vocab_size)))
        self._row_of: dict[int, int] = {}
        self._key_of: list[int] = []

    # -- state codec -------------------------------------------------------
    def encode(self, prompt: int, prefix: Sequence[int]) -> int:
        if not 0 <= prompt < self.num_prompts:
            raise KeyError(f"unknown prompt {prompt}")
        window = list(prefix)[-self.context_window :] if self.context_window else []
        code = 0
        for tok in window:
            if not 0 <= tok < self.vocab_size:
                raise ValueError(f"token {tok} outside vocabulary")
            code = code * self.vocab_size + int(tok)
        return prompt * self._per_prompt + int(self._offsets[len(window)]) + code

    def decode(self, key: int) -> tuple[int, tuple[int, ...]]:
        prompt, rest = divmod(int(key), self._per_prompt)
        length = int(np.searchsorted(self._offsets, rest, side="right")) - 1
        code = rest - int(self._offsets[length])
        toks = []
        for _ in range(length):
            code, tok = divmod(code, self.vocab_size)
            toks.append(tok)
        return prompt, tuple(reversed(toks))

    def step_codes(self, codes: np.ndarray, lengths: np.ndarray, tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Advance window codes by one emitted token (vectorized)."""
        c, v = self.context_window, self.vocab_size
        if c == 0:
            return codes, lengths
        full = lengths >= c
        codes = np.where(full, codes % (v ** (c - 1)), codes) * v + tokens
        return codes, np.minimum(lengths + 1, c)

    def keys_from_codes(self, prompts: np.ndarray, codes: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        return prompts.astype(np.int64) * self._per_prompt + self._offsets[lengths] + codes

    # -- materialization ---------------------------------------------------
    @property
    def num_materialized(self) -> int:
        return self.table.num_states

    def rows_for_keys(self, keys: np.ndarray, create: bool = True) -> np.ndarray:
        """Map state keys to table rows, materializing unseen states if ``create``."""
        keys = np.asarray(keys, dtype=np.int64)
        uniq, inv = np.unique(keys, return_inverse=True)
        rows = np.empty(uniq.size, dtype=np.int64)
        missing = []
        for i, k in enumerate(uniq.tolist()):
            r = self._row_of.get(k)
            if r is None:
                missing.append(i)
            else:
                rows[i] = r
        if missing:
            if not create:
                raise KeyError(f"state {self.decode(int(uniq[missing[0]]))} not materialized")
            start = self.table.append_uniform(len(missing))
            for j, i in enumerate(missing):
                k = int(uniq[i])
                self._row_of[k] = start + j
                self._key_of.append(k)
                rows[i] = start + j
        return rows[inv].reshape(keys.shape)

    def state_row(self, prompt: int, prefix: Sequence[int], create: bool = True) -> int:
        return int(self.rows_for_keys(np.array([self.encode(prompt, prefix)]), create=create)[0])

    def key_of_row(self, row: int) -> int:
        return self._key_of[row]

    def prefix_rows(self, prompt: int, response: Sequence[int], create: bool = True) -> np.ndarray:
        """Rows of the states from which each token of ``response`` was emitted."""
        keys = [self.encode(prompt, response[:t]) for t in range(len(response))]
        return self.rows_for_keys(np.array(keys, dtype=np.int64), create=create)

    def response_rows(self, prompts: np.ndarray, responses: np.ndarray, create: bool = True) -> np.ndarray:
        """Vectorized :meth:`prefix_rows` for equal-length responses, shape ``(n, T)``."""
        responses = np.asarray(responses, dtype=np.int64)
        prompts = np.asarray(prompts, dtype=np.int64)
        n, T = responses.shape
        keys = np.empty((n, T), dtype=np.int64)
        codes = np.zeros(n, dtype=np.int64)
        lengths = np.zeros(n, dtype=np.int64)
        for t in range(T):
            keys[:, t] = self.keys_from_codes(prompts, codes, lengths)
            codes, lengths = self.step_codes(codes, lengths, responses[:, t])
        return self.rows_for_keys(keys, create=create)

    def token_log_probs(self, prompt: int, response: Sequence[int], create: bool = True) -> np.ndarray:
        rows = self.prefix_rows(prompt, response, create=create)
        logp = log_softmax(self.table.logits[rows])
        return logp[np.arange(len(response)), np.asarray(response, dtype=np.int64)]

    def to_json(self) -> str:
        return json.dumps(
            {
                "num_prompts": self.num_prompts,
                "vocab_size": self.vocab_size,
                "max_len": self.max_len,
                "context_window": self.context_window,
                "keys": list(self._key_of),
                "table": json.loads(self.table.to_json()),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "SequencePolicy":
        doc = json.loads(text)
        pol = cls(doc["num_prompts"], doc["vocab_size"], doc["max_len"], doc["context_window"])
        tab = doc["table"]
        logits = np.asarray(tab["logits"], dtype=np.float64).reshape(tab["num_states"], tab["num_actions"])
        start = pol.table.append_uniform(logits.shape[0])
        pol.table.logits[start:] = logits
        pol._key_of = [int(k) for k in doc["keys"]]
        pol._row_of = {k: i for i, k in enumerate(pol._key_of)}
        return pol


def sequence_log_prob(policy: SequencePolicy, prompt: int, response: Sequence[int], normalize: bool = False) -> float:
    """Sum of per-token log-probs of ``response``; divided by its length if ``normalize``."""
    if len(response) == 0:
        raise ValueError("empty response")
    if len(response) > policy.max_len:
        raise ValueError(f"response longer than max_len={policy.max_len}")
    if not 0 <= prompt < policy.num_prompts:
        raise KeyError(f"unknown prompt {prompt}")
    lp = policy.token_log_probs(prompt, response)
    total = float(lp.sum())
    return total / len(response) if normalize else total


def mean_entropy(policy: SequencePolicy, rollouts: Iterable, monte_carlo: bool = False) -> float:
    """Average token-level entropy over visited prefixes of sampled responses.

    Each response contributes the mean entropy of the states it visited; the
    response means are averaged within each prompt and then across prompts.
    With ``monte_carlo`` the exact entropy at a state is replaced by
    ``-log pi(y_t)`` of the sampled token.
    """
    per_prompt = []
    for g in rollouts:
        resp = np.asarray(g.responses, dtype=np.int64)
        rows = policy.response_rows(np.full(resp.shape[0], g.prompt), resp, create=False)
        if monte_carlo:
            logp = log_softmax(policy.table.logits[rows.ravel()])
            h = -logp[np.arange(rows.size), resp.ravel()]
        else:
            h = entropy_from_logits(policy.table.logits[rows.ravel()])
        per_prompt.append(h.reshape(resp.shape).mean(axis=1).mean())
    if not per_prompt:
        raise ValueError("empty rollout set")
    return float(np.mean(per_prompt))
