"""Experiment orchestration: configs, seeded training runs and their on-disk outputs."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .advantage import ESTIMATORS, filter_prompts
from .dynamics import (
    EntropyDeltaPrediction,
    StepRecord,
    batch_covariance,
    RULES,
    center_advantages,
    consumption_curve,
    cov_quantile_report,
    lemma1_predict,
    theorem_predict,
    verify_first_order,
    weighted_entropy,
)
from .fitlab import fit_exponential, fit_prefix, predict_performance, read_curve
from .losses import (
    PENALTY_KINDS,
    TokenBatch,
    build_token_batch,
    clip_cov_grad,
    current_log_probs,
    entropy_reg_grad,
    kl_cov_grad,
    npg_update,
    pg_update,
    pg_loss_grad,
    ppo_clip_grad,
    ref_kl_grad,
    token_covariance,
)
from .policy import PolicyTable, SequencePolicy, mean_entropy, softmax
from .tasks import BUCKET_NAMES, TaskSpec, difficulty_bucket, make_task, rollout_batch

log = logging.getLogger(__name__)

LOSSES = ("pg", "npg", "ppo_clip", "clip_higher", "entropy_reg", "ref_kl", "clip_cov", "kl_cov")
ALPHA_GRID = (1e-4, 1e-3, 5e-3, 1e-2)
OUT_ENV = "ENTLAB_OUT"


class ConfigError(ValueError):
    """Invalid configuration or usage; maps to the usage exit code."""


@dataclass
class RunConfig:
    # task
    num_prompts: int = 512
    vocab_size: int = 4
    response_len: int = 4
    targets_per_prompt: str = "2,4,8"
    task_seed: int = 0
    # policy
    context_window: int = -1  # -1: condition on the full prefix
    # algorithm
    algorithm: str = "grpo"
    loss: str = "ppo_clip"
    eta: float = 0.2
    llm_lr: float = 5e-7  # LLM-scale learning rate, recorded only
    K: int = 8
    temperature: float = 1.0
    eps: float = 0.2
    eps_high: float = 0.28
    alpha: float = 1e-3
    beta_ref: float = 1e-3
    clip_ratio: float = 2e-4
    cov_low: float = 1.0
    cov_high: float = 5.0
    kl_k: float = 2e-3
    kl_beta: float = 1.0
    penalty_kind: str = "abs-logratio"
    epochs: int = 8
    steps: int = 300
    seed: int = 0
    verify_every: int = 0  # >0: log first-order entropy predictions every N steps
    out: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.algorithm not in ESTIMATORS:
            raise ConfigError(f"algorithm must be one of {ESTIMATORS}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}")
        if self.penalty_kind not in PENALTY_KINDS:
            raise ConfigError(f"penalty_kind must be one of {PENALTY_KINDS}")
        if self.loss == "npg" and self.response_len != 1:
            raise ConfigError("npg runs in exact-expectation bandit mode and needs response_len=1")
        if min(self.num_prompts, self.vocab_size, self.response_len, self.K - 1, self.epochs) < 1:
            raise ConfigError("num_prompts, vocab_size, response_len, epochs must be >= 1 and K >= 2")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.eta <= 0 or self.temperature <= 0:
            raise ConfigError("eta and temperature must be positive")
        self.target_counts()

    def target_counts(self) -> list[int]:
        try:
            counts = [int(x) for x in str(self.targets_per_prompt).split(",")]
        except ValueError:
            raise ConfigError(f"bad targets_per_prompt {self.targets_per_prompt!r}") from None
        return counts

    @property
    def window(self) -> int | None:
        return None if self.context_window < 0 else self.context_window

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_CASTS = {"int": int, "float": float, "str": str}


def _cast(key: str, value: str):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return _CASTS[_FIELD_TYPES[key]](value)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None


def parse_pairs(lines, origin: str) -> dict[str, tuple[object, str]]:
    """Parse ``key=value`` lines (``#`` comments allowed) into ``{key: (value, origin)}``."""
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected key=value, got {raw.strip()!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = (_cast(k, v), origin if origin.startswith("--") else f"{origin}:{n}")
    return out


def resolve_config(config_path=None, overrides=(), **flags) -> tuple[RunConfig, dict[str, str]]:
    """Merge defaults < config file < ``--set`` overrides < explicit flags.

    Returns the config and the source of every key.
    """
    values: dict[str, object] = {}
    sources = {f.name: "default" for f in fields(RunConfig)}
    layers = []
    if config_path is not None:
        try:
            with open(config_path) as f:
                layers.append(parse_pairs(f, str(config_path)))
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from None
    layers.append(parse_pairs(overrides, "--set"))
    layers.append({k: (_cast(k, str(v)), f"--{k}") for k, v in flags.items() if v is not None})
    for layer in layers:
        for k, (v, src) in layer.items():
            values[k] = v
            sources[k] = src
    if "out" not in values or not values["out"]:
        values["out"] = str(Path(os.environ.get(OUT_ENV, "runs")) / f"{values.get('loss', RunConfig.loss)}_s{values.get('seed', 0)}")
        sources["out"] = f"env:{OUT_ENV}" if OUT_ENV in os.environ else "default"
    return RunConfig(**values), sources


# ---------------------------------------------------------------------------
# training loop


def _step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


def _loss_grad(cfg: RunConfig, local: PolicyTable, batch: TokenBatch, ref: PolicyTable, old: PolicyTable, sel_seed: int):
    if cfg.loss == "pg":
        return pg_loss_grad(local, batch)
    if cfg.loss == "ppo_clip":
        return ppo_clip_grad(local, batch, cfg.eps)
    if cfg.loss == "clip_higher":
        return ppo_clip_grad(local, batch, cfg.eps, cfg.eps_high)
    if cfg.loss == "entropy_reg":
        return entropy_reg_grad(local, batch, cfg.alpha, cfg.eps)
    if cfg.loss == "ref_kl":
        return ref_kl_grad(local, ref, batch, cfg.beta_ref, cfg.eps)
    if cfg.loss == "clip_cov":
        return clip_cov_grad(local, batch, cfg.clip_ratio, cfg.cov_low, cfg.cov_high, sel_seed, cfg.eps)
    if cfg.loss == "kl_cov":
        return kl_cov_grad(local, batch, cfg.kl_k, cfg.kl_beta, cfg.penalty_kind, old)
    raise ConfigError(f"loss {cfg.loss!r} has no surrogate gradient")


def _bucket_covs(groups, per_group: np.ndarray) -> dict[str, float]:
    """Mean group covariance per difficulty bucket as ``cov_<name>`` fields; NaN for empty buckets."""
    out = {f"cov_{name}": float("nan") for name in BUCKET_NAMES}
    if not groups:
        return out
    b = np.array(difficulty_bucket(groups))
    for i, name in enumerate(BUCKET_NAMES):
        if np.any(b == i):
            out[f"cov_{name}"] = float(per_group[b == i].mean())
    return out


def _greedy_accuracy(policy: SequencePolicy, task: TaskSpec) -> float:
    groups = rollout_batch(policy, task, range(task.num_prompts), 2, greedy=True)
    return float(np.mean([g.rewards[0] for g in groups]))


def _npg_bandit_step(cfg: RunConfig, policy: SequencePolicy, task: TaskSpec):
    """Exact natural-gradient step on a single-token task with ``A = r - V``."""
    rows = policy.response_rows(np.arange(task.num_prompts), np.zeros((task.num_prompts, 1), dtype=np.int64))[:, 0]
    local = PolicyTable(policy.table.logits[rows].copy())
    r = np.zeros(local.logits.shape)
    for p, ts in enumerate(task.targets):
        for t in ts:
            r[p, t[0]] = 1.0
    adv = r - (softmax(local.logits) * r).sum(axis=1, keepdims=True)
    new, rep = npg_update(local, adv, cfg.eta)
    return rows, local, new, rep, adv


class RunWriter:
    """Single writer for a run directory's output files."""

    def __init__(self, out: Path):
        self.out = out
        self.steps_f = open(out / "steps.csv", "w", newline="")
        self.steps = csv.writer(self.steps_f, lineterminator="\n")
        self.steps.writerow(StepRecord.csv_header())
        self.updates = open(out / "updates.jsonl", "w")
        self.dyn_f = open(out / "dynamics.csv", "w", newline="")
        self.dyn = csv.writer(self.dyn_f, lineterminator="\n")
        self.dyn.writerow(EntropyDeltaPrediction.CSV_HEADER)
        self.covs: list[np.ndarray] = []

    def step(self, rec: StepRecord) -> None:
        self.steps.writerow([_fmt(x) for x in rec.csv_row()])

    def close(self) -> None:
        for f in (self.steps_f, self.updates, self.dyn_f):
            f.close()
        lens = np.array([c.size for c in self.covs], dtype=np.int64)
        np.save(self.out / "token_cov_counts.npy", lens)
        np.save(self.out / "token_covs.npy", np.concatenate(self.covs).astype(np.float32) if self.covs else np.zeros(0, np.float32))


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(float(x))
    return str(x)


def run_experiment(cfg: RunConfig, sources: dict[str, str] | None = None) -> Path:
    """Run the configured training loop and write its outputs; returns the run directory."""
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise OSError(f"output directory {out} is not writable: {e}") from None

    task = make_task(cfg.num_prompts, cfg.vocab_size, cfg.response_len, cfg.target_counts(), cfg.task_seed)
    policy = SequencePolicy(cfg.num_prompts, cfg.vocab_size, cfg.response_len, cfg.window)
    manifest = {
        "code_version": __version__,
        "config": cfg.to_dict(),
        "sources": sources or {f.name: "default" for f in fields(RunConfig)},
        "alpha_grid": list(ALPHA_GRID),
        "task": json.loads(task.to_json()),
        "lr_note": "eta is a per-token step size (updates use the token-sum gradient); llm_lr is the LLM-scale value, recorded only",
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    for k, src in manifest["sources"].items():
        if src != "default":
            log.info("config %s=%r from %s", k, getattr(cfg, k), src)
    w = RunWriter(out)
    try:
        for step in range(cfg.steps):
            _train_step(cfg, step, policy, task, w)
    finally:
        w.close()
    return out


def _train_step(cfg: RunConfig, step: int, policy: SequencePolicy, task: TaskSpec, w: RunWriter) -> None:
    seed = _step_seed(cfg.seed, step)
    groups = rollout_batch(policy, task, range(task.num_prompts), cfg.K, cfg.temperature, seed)
    entropy = mean_entropy(policy, groups)
    train_acc = float(np.mean([g.accuracy for g in groups]))
    val = _greedy_accuracy(policy, task)
    kept = filter_prompts(groups)
    cov_mean, per_group = batch_covariance(kept, policy, cfg.algorithm)
    rec = StepRecord(step, entropy, cov_mean, train_acc, val, float(cfg.response_len), **_bucket_covs(kept, per_group))

    if cfg.loss == "npg":
        rows, before, after, rep, adv = _npg_bandit_step(cfg, policy, task)
        policy.table.logits[rows] = after.logits
        w.covs.append(np.zeros(0))
        w.updates.write(rep.to_json(step, epoch=0) + "\n")
        if cfg.verify_every and step % cfg.verify_every == 0:
            _log_prediction(w, step, cfg.eta, before, after, adv, "npg")
        w.step(rec)
        return

    if not kept:
        w.covs.append(np.zeros(0))
        w.step(rec)
        return
    batch = build_token_batch(policy, kept, cfg.algorithm)
    batch, rows = batch.remap(None)
    local = PolicyTable(policy.table.logits[rows].copy())
    old = local.copy()
    ref = PolicyTable(np.zeros_like(local.logits))  # reference = the uniform initial policy
    n = len(batch)
    w.covs.append(token_covariance(current_log_probs(local, batch), batch.advantages) if n >= 2 else np.zeros(0))
    epochs = 1 if cfg.loss == "pg" else cfg.epochs
    for epoch in range(epochs):
        before = local.copy() if cfg.verify_every and step % cfg.verify_every == 0 and epoch == 0 else None
        res = _loss_grad(cfg, local, batch, ref, old, [cfg.seed, step, epoch])
        local.logits = local.logits - cfg.eta * n * res.grad
        if before is not None:
            _log_prediction(w, step, cfg.eta, before, local, None, None, batch)
        covs = batch.covariance[res.selected] if batch.covariance is not None and res.selected.size else np.zeros(0)
        doc = {
            "step": step,
            "epoch": epoch,
            "loss": float(res.loss),
            "grad_norm": float(np.linalg.norm(res.grad)),
            "n_selected": int(res.selected.size),
            "selected_cov_min": float(covs.min()) if covs.size else None,
            "selected_cov_max": float(covs.max()) if covs.size else None,
        }
        w.updates.write(json.dumps(doc) + "\n")
    policy.table.logits[rows] = local.logits
    w.step(rec)


def _log_prediction(w: RunWriter, step, eta, before: PolicyTable, after: PolicyTable, adv, rule, batch: TokenBatch | None = None) -> None:
    """Append one first-order prediction row.

    Exact bandit steps use the advantage table directly. Sampled steps weight
    states by their token counts ``n_s`` and apply the pg closed form to the
    batch's empirical advantage table, centered under the pre-update policy and
    scaled by ``n_s`` to match the token-sum update.
    """
    if batch is None:
        states = None
        pred_th = theorem_predict(before, adv, eta, rule)
    else:
        counts = np.bincount(batch.states, minlength=before.num_states).astype(np.float64)
        sums = np.zeros_like(before.logits)
        hits = np.zeros_like(before.logits)
        np.add.at(sums, (batch.states, batch.tokens), batch.advantages)
        np.add.at(hits, (batch.states, batch.tokens), 1.0)
        table = np.divide(sums, hits, out=np.zeros_like(sums), where=hits > 0)
        scaled = counts[:, None] * center_advantages(before, table)
        states = counts
        pred_th = theorem_predict(before, scaled, eta, "pg", states)
    measured = weighted_entropy(after, states) - weighted_entropy(before, states)
    row = EntropyDeltaPrediction(step, eta, lemma1_predict(before, after, states), pred_th, measured)
    w.dyn.writerow([_fmt(x) for x in row.csv_row()])


# ---------------------------------------------------------------------------
# verification, fitting and plot data


@dataclass
class DynamicsReport:
    """Outcome of the randomized first-order entropy-dynamics suites."""

    suites: dict[str, tuple[int, int, bool]]  # name -> (passed, total, ok)
    ratios: list[tuple[int, str, float]]  # (instance, rule, err(eta)/err(eta/2) at the smallest pair)

    @property
    def ok(self) -> bool:
        return all(ok for _, _, ok in self.suites.values())

    @property
    def failed(self) -> list[str]:
        return [name for name, (_, _, ok) in self.suites.items() if not ok]

    def median_ratio(self, rule: str) -> float:
        r = np.array([x for _, ru, x in self.ratios if ru == rule and math.isfinite(x)])
        return float(np.median(r)) if r.size else float("nan")

    def format(self) -> str:
        lines = ["instance\trule\terr(eta)/err(eta/2)"]
        lines += [f"{i}\t{rule}\t{r:.4f}" for i, rule, r in self.ratios]
        lines.append("")
        for rule in RULES:
            lines.append(f"median ratio {rule}: {self.median_ratio(rule):.4f}")
        for name, (ok_n, n, ok) in self.suites.items():
            lines.append(f"{'PASS' if ok else 'FAIL'} {name}: {ok_n}/{n}")
        return "\n".join(lines)


def _random_bandit(rng: np.random.Generator) -> tuple[PolicyTable, np.ndarray]:
    S, V = int(rng.integers(1, 4)), int(rng.integers(2, 7))
    pol = PolicyTable(rng.normal(scale=1.5, size=(S, V)))
    return pol, center_advantages(pol, rng.normal(size=(S, V)))


def verify_dynamics(seed: int = 0, n_instances: int = 100, fault: bool = False, min_pass: float = 0.9) -> DynamicsReport:
    """Check the exact-step identity, the covariance form and the first-order law on random bandits.

    ``fault`` doubles every applied logit change, a negative control that must
    make the exact-step identity fail.
    """
    scale = 2.0 if fault else 1.0
    prop1 = lemma = 0
    first = {rule: 0 for rule in RULES}
    ratios = []
    for i in range(n_instances):
        rng = np.random.default_rng([seed, i])
        pol, adv = _random_bandit(rng)
        eta = float(rng.uniform(1e-3, 0.1))
        p = softmax(pol.logits)
        after = pg_update(pol, adv, eta, mode="exact-expectation")[0]
        dz = scale * (after.logits - pol.logits)
        prop1 += bool(np.max(np.abs(dz - eta * p * adv)) <= 1e-12)
        ok = True
        for rule in RULES:
            step = eta * p * adv if rule == "pg" else eta * adv
            moved = PolicyTable(pol.logits + scale * step)
            ok &= abs(lemma1_predict(pol, moved) - theorem_predict(pol, adv, eta, rule)) <= 1e-12
            tab = verify_first_order(pol, adv, rule, delta_scale=scale)
            first[rule] += tab.passes()
            ratios.append((i, rule, float(tab.ratios[-1])))
        lemma += ok
    need = math.ceil(min_pass * n_instances)
    suites = {
        "Prop-1 exact pg step": (prop1, n_instances, prop1 == n_instances),
        "Lemma-1 covariance form": (lemma, n_instances, lemma == n_instances),
        "Theorem-1 first-order (pg)": (first["pg"], n_instances, first["pg"] >= need),
        "Theorem-2 first-order (npg)": (first["npg"], n_instances, first["npg"] >= need),
    }
    return DynamicsReport(suites, ratios)


def steps_path(path) -> Path:
    p = Path(path)
    return p / "steps.csv" if p.is_dir() else p


def fit_and_predict(run_dir, fit_fraction: float = 0.15, out=None, min_rows: int = 10):
    """Fit the entropy-performance law on a run prefix and predict the rest.

    Writes ``predictions.csv`` (step,entropy,R_true,R_pred) and ``fit.json``
    into ``out`` (default: the run directory). Returns ``(fit, heldout_rmse)``.
    """
    src = steps_path(run_dir)
    if not src.exists():
        raise FileNotFoundError(f"missing input: {src}")
    steps, h, r = read_curve(src)
    if steps.size < min_rows:
        raise ValueError(f"{src}: need >= {min_rows} rows, found {steps.size}")
    fit, pred, rmse = fit_prefix(h, r, fit_fraction)
    dest = Path(out) if out is not None else src.parent
    dest.mkdir(parents=True, exist_ok=True)
    with open(dest / "predictions.csv", "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["step", "entropy", "R_true", "R_pred"])
        for row in zip(steps.tolist(), h.tolist(), r.tolist(), pred.tolist()):
            wr.writerow([_fmt(x) for x in row])
    summary = {**json.loads(fit.to_json()), "fit_fraction": fit_fraction, "heldout_rmse": rmse, "source": str(src)}
    (dest / "fit.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return fit, rmse


PLOT_KINDS = ("entropy_curve", "fit_curve", "cov_curve", "consumption", "quantiles")


def _run_labels(run_dirs) -> list[str]:
    names = [Path(d).resolve().name for d in run_dirs]
    return [n if names.count(n) == 1 else f"{n}#{i}" for i, n in enumerate(names)]


def _read_steps(path: Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header = tuple(rows[0]) if rows else ()
    if header != StepRecord.csv_header():
        raise ValueError(f"{path}: header does not match the steps schema")
    for n, row in enumerate(rows[1:], 2):
        if len(row) != len(header):
            raise ValueError(f"{path}:{n}: expected {len(header)} fields, got {len(row)}")
    cols = list(zip(*rows[1:])) if len(rows) > 1 else [()] * len(header)
    return {k: np.array(v, dtype=np.float64) for k, v in zip(header, cols)}


def emit_plot_data(run_dirs, kind: str, out_dir) -> Path:
    """Write ``<out_dir>/<kind>.tsv`` built from the given run directories.

    Series from several runs become one column per run (``name@run``) aligned on
    step. The first line is a ``#`` comment naming the source runs.
    """
    if kind not in PLOT_KINDS:
        raise ValueError(f"kind must be one of {PLOT_KINDS}")
    if not run_dirs:
        raise ValueError("need at least one run directory")
    need = "token_covs.npy" if kind == "quantiles" else "steps.csv"
    missing = [str(Path(d) / need) for d in run_dirs if not (Path(d) / need).exists()]
    if missing:
        raise FileNotFoundError("missing input(s): " + ", ".join(missing))
    labels = _run_labels(run_dirs)
    multi = len(run_dirs) > 1

    def col(name, label):
        return f"{name}@{label}" if multi else name

    if kind == "quantiles":
        reports = [cov_quantile_report(np.load(Path(d) / need).astype(np.float64)) for d in run_dirs]
        header = ["quantile"] + [col("mean_cov", lb) for lb in labels]
        body = [[label] + [_fmt(rep[i][1]) for rep in reports] for i, (label, _) in enumerate(reports[0])]
    else:
        series = []  # (column name, {step: value})
        all_steps: set[int] = set()
        for d, lb in zip(run_dirs, labels):
            data = _read_steps(Path(d) / need)
            st = data["step"].astype(np.int64)
            all_steps.update(st.tolist())
            if kind == "entropy_curve":
                cols = {"entropy": data["entropy"]}
            elif kind == "cov_curve":
                cols = {k: data[k] for k in ("cov_mean", "cov_easy", "cov_mid", "cov_hard")}
            elif kind == "fit_curve":
                if st.size < 2:
                    raise ValueError(f"{d}: need >= 2 steps to fit")
                fit = fit_exponential(data["entropy"], data["val_reward"])
                cols = {"entropy": data["entropy"], "R_true": data["val_reward"], "R_pred": predict_performance(fit, data["entropy"])}
            else:
                cc = consumption_curve(data["entropy"], data["val_reward"])
                cols = {"entropy_consumed": cc.entropy_consumed, "perf_gained": cc.perf_gained}
            for name, v in cols.items():
                series.append((col(name, lb), dict(zip(st.tolist(), v.tolist()))))
        steps = sorted(all_steps)
        if kind == "consumption":
            last = max(steps[-1], 1) if steps else 1
            header = ["step_frac"]
            keys = [_fmt(s / last) for s in steps]
        else:
            header = ["step"]
            keys = [str(s) for s in steps]
        header += [name for name, _ in series]
        body = [[k] + [_fmt(float(m.get(s, float("nan")))) for _, m in series] for k, s in zip(keys, steps)]

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{kind}.tsv"
    with open(path, "w", newline="") as f:
        f.write("# sources: " + ", ".join(str(Path(d)) for d in run_dirs) + "\n")
        wr = csv.writer(f, delimiter="\t", lineterminator="\n")
        wr.writerow(header)
        wr.writerows(body)
    return path


def cov_report(run_dir) -> list[tuple[str, float]]:
    """Token-covariance quantile rows for a run's stored token covariances."""
    src = Path(run_dir) / "token_covs.npy"
    if not src.exists():
        raise FileNotFoundError(f"missing input: {src}")
    covs = np.load(src).astype(np.float64)
    if covs.size == 0:
        raise ValueError(f"{src}: no token covariances recorded")
    return cov_quantile_report(covs)
