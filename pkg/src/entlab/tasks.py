"""Synthetic exact-match sequence tasks and group rollout sampling."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .policy import SequencePolicy, log_softmax

TIER_NAMES = ("hard", "medium", "easy")
BUCKET_NAMES = ("hard", "mid", "easy")


@dataclass
class TaskSpec:
    """Per-prompt sets of accepted token sequences of length ``response_len``."""

    num_prompts: int
    vocab_size: int
    response_len: int
    targets: list[frozenset]
    seed: int
    difficulty_tier: list[str] = field(default_factory=list)
    diagnostics: Counter = field(default_factory=Counter, compare=False, repr=False)

    def __post_init__(self):
        if len(self.targets) != self.num_prompts:
            raise ValueError("one target set per prompt required")
        for p, ts in enumerate(self.targets):
            if not ts:
                raise ValueError(f"prompt {p} has no targets")
            for t in ts:
                if len(t) > self.response_len or any(not 0 <= x < self.vocab_size for x in t):
                    raise ValueError(f"invalid target {t} for prompt {p}")
        if not self.difficulty_tier:
            self.difficulty_tier = _tiers([len(ts) for ts in self.targets])
        self._keys = None

    @property
    def target_keys(self) -> np.ndarray:
        """Sorted integer keys ``prompt * V**T + code(target)`` for vectorized scoring."""
        if self._keys is None:
            keys = [
                p * self.vocab_size**self.response_len + _code(t, self.vocab_size)
                for p, ts in enumerate(self.targets)
                for t in ts
                if len(t) == self.response_len
            ]
            self._keys = np.array(sorted(keys), dtype=np.int64)
        return self._keys

    def chance_rate(self, prompt: int) -> float:
        """Success probability of the uniform policy on ``prompt``."""
        return sum(self.vocab_size ** -len(t) for t in self.targets[prompt])

    def to_json(self) -> str:
        return json.dumps(
            {
                "num_prompts": self.num_prompts,
                "vocab_size": self.vocab_size,
                "response_len": self.response_len,
                "seed": self.seed,
                "difficulty_tier": self.difficulty_tier,
                "targets": [sorted(list(t) for t in ts) for ts in self.targets],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "TaskSpec":
        d = json.loads(text)
        return cls(
            num_prompts=d["num_prompts"],
            vocab_size=d["vocab_size"],
            response_len=d["response_len"],
            targets=[frozenset(tuple(t) for t in ts) for ts in d["targets"]],
            seed=d["seed"],
            difficulty_tier=list(d["difficulty_tier"]),
        )


def _code(seq: Sequence[int], base: int) -> int:
    c = 0
    for x in seq:
        c = c * base + int(x)
    return c


def _decode(code: int, base: int, length: int) -> tuple[int, ...]:
    out = []
    for _ in range(length):
        code, x = divmod(code, base)
        out.append(x)
    return tuple(reversed(out))


def _tiers(counts: list[int]) -> list[str]:
    # tier by target count relative to the largest count in the task
    top = max(counts)
    tiers = []
    for c in counts:
        frac = c / top
        tiers.append(TIER_NAMES[0] if frac <= 1 / 3 else TIER_NAMES[1] if frac <= 2 / 3 else TIER_NAMES[2])
    return tiers


def make_task(
    num_prompts: int,
    vocab_size: int,
    response_len: int,
    targets_per_prompt: int | Sequence[int],
    seed: int,
) -> TaskSpec:
    """Draw per-prompt target sets without replacement from a seeded generator.

    ``targets_per_prompt`` may be a single count or a sequence of counts that is
    cycled over prompts, which yields a mix of difficulties.
    """
    if min(num_prompts, vocab_size, response_len) < 1:
        raise ValueError("all counts must be >= 1")
    counts = [targets_per_prompt] if isinstance(targets_per_prompt, (int, np.integer)) else list(targets_per_prompt)
    space = vocab_size**response_len
    if space >= 2**62:
        raise ValueError("vocab_size**response_len too large")
    if not counts or min(counts) < 1 or max(counts) > space:
        raise ValueError(f"targets_per_prompt must lie in [1, {space}]")
    rng = np.random.default_rng(seed)
    targets = []
    for p in range(num_prompts):
        n = int(counts[p % len(counts)])
        codes = rng.choice(space, size=n, replace=False)
        targets.append(frozenset(_decode(int(c), vocab_size, response_len) for c in codes))
    return TaskSpec(num_prompts, vocab_size, response_len, targets, seed)


def reward(task: TaskSpec, prompt: int, response: Sequence[int]) -> int:
    """1 iff ``response`` is one of the prompt's targets."""
    if not 0 <= prompt < task.num_prompts:
        raise IndexError(f"prompt {prompt} out of range")
    try:
        toks = tuple(int(x) for x in response)
    except (TypeError, ValueError):
        task.diagnostics["malformed"] += 1
        return 0
    if any(not 0 <= x < task.vocab_size for x in toks):
        task.diagnostics["malformed"] += 1
        return 0
    return int(toks in task.targets[prompt])


def batch_rewards(task: TaskSpec, prompts: np.ndarray, responses: np.ndarray) -> np.ndarray:
    """Vectorized :func:`reward` for full-length responses, shape ``(n, T)``."""
    responses = np.asarray(responses, dtype=np.int64)
    codes = np.zeros(responses.shape[0], dtype=np.int64)
    for t in range(responses.shape[1]):
        codes = codes * task.vocab_size + responses[:, t]
    keys = np.asarray(prompts, dtype=np.int64) * task.vocab_size**task.response_len + codes
    return np.isin(keys, task.target_keys).astype(np.float64)


@dataclass
class GroupRollout:
    prompt: int
    seed: int
    responses: np.ndarray  # (K, T) int
    behavior_log_probs: np.ndarray  # (K, T)
    rewards: np.ndarray  # (K,)

    def __post_init__(self):
        self.responses = np.asarray(self.responses, dtype=np.int64)
        self.behavior_log_probs = np.asarray(self.behavior_log_probs, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if self.responses.ndim != 2 or self.responses.shape[0] < 2:
            raise ValueError("a group needs K >= 2 responses")
        if self.behavior_log_probs.shape != self.responses.shape:
            raise ValueError("behavior_log_probs must match responses")
        if self.rewards.shape != (self.responses.shape[0],):
            raise ValueError("one reward per response")

    @property
    def K(self) -> int:
        return self.responses.shape[0]

    @property
    def accuracy(self) -> float:
        return float(self.rewards.mean())

    def to_json(self) -> str:
        return json.dumps(
            {
                "prompt": int(self.prompt),
                "seed": int(self.seed),
                "responses": self.responses.tolist(),
                "behavior_log_probs": self.behavior_log_probs.tolist(),
                "rewards": self.rewards.tolist(),
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "GroupRollout":
        d = json.loads(line)
        return cls(d["prompt"], d["seed"], d["responses"], d["behavior_log_probs"], d["rewards"])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GroupRollout):
            return NotImplemented
        return (
            self.prompt == other.prompt
            and self.seed == other.seed
            and np.array_equal(self.responses, other.responses)
            and np.array_equal(self.behavior_log_probs, other.behavior_log_probs)
            and np.array_equal(self.rewards, other.rewards)
        )


def write_groups(path, groups: Iterable[GroupRollout]) -> None:
    with open(path, "w") as f:
        for g in groups:
            f.write(g.to_json() + "\n")


def read_groups(path) -> list[GroupRollout]:
    with open(path) as f:
        return [GroupRollout.from_json(line) for line in f if line.strip()]


def prompt_uniforms(seed: int, prompt: int, K: int, T: int) -> np.ndarray:
    # independent stream per (seed, prompt): serial and batched sampling agree
    return np.random.default_rng([int(seed), int(prompt)]).random((K, T))


def sample_responses(
    policy: SequencePolicy,
    prompts: np.ndarray,
    uniforms: np.ndarray,
    temperature: float = 1.0,
    greedy: bool = False,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Autoregressively sample one response per row of ``uniforms``.

    Returns ``(tokens, behavior_log_probs, rows)`` each of shape ``(n, T)``;
    ``rows`` are the policy-table rows of the visited prefix states.
    """
    if temperature <= 0 and not greedy:
        raise ValueError("temperature must be positive (use greedy for the zero limit)")
    n, T = uniforms.shape
    prompts = np.asarray(prompts, dtype=np.int64)
    tokens = np.zeros((n, T), dtype=np.int64)
    logps = np.zeros((n, T))
    rows = np.zeros((n, T), dtype=np.int64)
    codes = np.zeros(n, dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    ar = np.arange(n)
    for t in range(T):
        r = policy.rows_for_keys(policy.keys_from_codes(prompts, codes, lengths))
        rows[:, t] = r
        z = policy.table.logits[r]
        if greedy:
            tok = z.argmax(axis=1)
            lp = np.zeros(n)
        else:
            logp = log_softmax(z / temperature)
            cdf = np.cumsum(np.exp(logp), axis=1)
            tok = np.minimum((cdf < (uniforms[:, t] * cdf[:, -1])[:, None]).sum(axis=1), z.shape[1] - 1)
            lp = logp[ar, tok]
        tokens[:, t] = tok
        logps[:, t] = lp
        codes, lengths = policy.step_codes(codes, lengths, tok)
    return tokens, logps, rows


def rollout_batch(
    policy: SequencePolicy,
    task: TaskSpec,
    prompts: Sequence[int],
    K: int,
    temperature: float = 1.0,
    seed: int = 0,
    greedy: bool = False,
) -> list[GroupRollout]:
    """Sample K responses for each prompt; identical to per-prompt :func:`rollout_group` calls."""
    if K < 2:
        raise ValueError("K must be >= 2")
    T = task.response_len
    prompts = [int(p) for p in prompts]
    u = np.concatenate([prompt_uniforms(seed, p, K, T) for p in prompts]) if prompts else np.zeros((0, T))
    pid = np.repeat(np.array(prompts, dtype=np.int64), K)
    tokens, logps, _ = sample_responses(policy, pid, u, temperature, greedy)
    rew = batch_rewards(task, pid, tokens)
    return [
        GroupRollout(p, seed, tokens[i * K : (i + 1) * K], logps[i * K : (i + 1) * K], rew[i * K : (i + 1) * K])
        for i, p in enumerate(prompts)
    ]


def rollout_group(
    policy: SequencePolicy,
    task: TaskSpec,
    prompt: int,
    K: int,
    temperature: float = 1.0,
    seed: int = 0,
    greedy: bool = False,
) -> GroupRollout:
    return rollout_batch(policy, task, [prompt], K, temperature, seed, greedy)[0]


def difficulty_bucket(groups: Iterable[GroupRollout], edges: Sequence[float] = (1 / 3, 2 / 3)) -> list[int]:
    """Bucket index per group by accuracy; 0 is the hardest bucket.

    A group whose accuracy equals an edge goes to the lower interval.
    """
    edges = np.asarray(edges, dtype=np.float64)
    if np.any(np.diff(edges) <= 0) or edges.min(initial=0.5) < 0 or edges.max(initial=0.5) > 1:
        raise ValueError("edges must be strictly increasing within [0, 1]")
    out = []
    for g in groups:
        if len(g.rewards) == 0:
            raise ValueError("empty group")
        out.append(int(np.searchsorted(edges, g.rewards.mean(), side="left")))
    return out
