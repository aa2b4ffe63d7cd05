"""Latent-quality probes, rollout evaluation, correlation and experiment tables."""

from __future__ import annotations

import csv
import dataclasses
import io
import math
from collections import defaultdict
from typing import Callable, Iterable, Sequence

import numpy as np

from laoflab import autodiff as ad
from laoflab.autodiff import Tensor, no_grad
from laoflab.envs import EnvConfig, env_reset, env_step, random_action, render, scripted_expert
from laoflab.errors import UndefinedCorrelationError, UsageError
from laoflab.models import LamModel, PatchEncoder, encode_visual
from laoflab.nn import MLP
from laoflab.optim import Adam

PROBE_EPOCHS = 3
PROBE_HIDDEN = 64
PROBE_BATCH = 32
PROBE_LR = 3e-3


@dataclasses.dataclass
class ProbeResult:
    metric: str  # "accuracy" or "mse"
    value: float
    n_samples: int
    seed: int
    checkpoint: str = ""

    def __post_init__(self):
        if self.n_samples <= 0:
            raise UsageError("probe result needs at least one sample")
        if self.metric == "accuracy" and not 0.0 <= self.value <= 1.0:
            raise UsageError(f"accuracy {self.value} outside [0, 1]")
        if self.metric == "mse" and self.value < 0:
            raise UsageError("mse cannot be negative")


@dataclasses.dataclass
class Probe:
    net: MLP
    mean: np.ndarray
    std: np.ndarray
    discrete: bool
    steps: int

    def predict(self, latents: np.ndarray) -> np.ndarray:
        with no_grad():
            out = self.net(Tensor((np.asarray(latents, np.float32) - self.mean) / self.std)).data
        return out


def train_probe(
    latents: np.ndarray,
    actions: np.ndarray,
    discrete: bool,
    epochs: int = PROBE_EPOCHS,
    seed: int = 0,
    batch_size: int = PROBE_BATCH,
    lr: float = PROBE_LR,
    hidden: int = PROBE_HIDDEN,
) -> Probe:
    """Fresh one-hidden-layer decoder from latents to actions, trained for ``epochs`` epochs.

    Latents are standardized with their own per-dimension statistics so the
    probe sees every representation at the same scale.
    """
    from laoflab.data import batch_iterator

    latents = np.asarray(latents, dtype=np.float32)
    actions = np.asarray(actions)
    if latents.ndim != 2 or len(latents) == 0:
        raise UsageError("probe needs a non-empty (n, k) latent matrix")
    if len(actions) != len(latents):
        raise UsageError("latents and actions differ in length")
    rng = np.random.default_rng([seed, 606])
    mean = latents.mean(0)
    std = latents.std(0) + 1e-6
    x = (latents - mean) / std
    out_dim = 5 if discrete else actions.shape[1]
    net = MLP([latents.shape[1], hidden, out_dim], rng, activation="relu")
    opt = Adam(net.parameters(), lr=lr)
    steps = 0
    for epoch in range(epochs):
        for ids in batch_iterator(np.arange(len(x)), batch_size, seed, epoch):
            pred = net(Tensor(x[ids]))
            if discrete:
                loss = ad.softmax_cross_entropy(pred, actions[ids])
            else:
                loss = ad.mse(pred, Tensor(actions[ids].astype(np.float32)))
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            steps += 1
    return Probe(net, mean, std, discrete, steps)


def argmax_lowest(logits: np.ndarray) -> np.ndarray:
    return np.argmax(np.asarray(logits), axis=-1)


def eval_accuracy(predictions, truth) -> float:
    """Fraction of exact matches. 2-D predictions are treated as logits (argmax, ties to lowest)."""
    pred = np.asarray(predictions)
    truth = np.asarray(truth)
    if pred.ndim == 2:
        pred = argmax_lowest(pred)
    if pred.shape != truth.shape:
        raise UsageError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise UsageError("no predictions to score")
    return float(np.mean(pred == truth))


def eval_mse(predictions, truth) -> float:
    """(1/M) sum_i ||pred_i - truth_i||^2 (squared Euclidean norm per sample)."""
    pred = np.asarray(predictions, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise UsageError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise UsageError("no predictions to score")
    diff = (pred - truth).reshape(len(pred), -1)
    return float(np.mean(np.sum(diff * diff, axis=1)))


def model_latents(model: LamModel, data, ids: np.ndarray, chunk: int = 4096) -> np.ndarray:
    out = []
    with no_grad():
        for lo in range(0, len(ids), chunk):
            b = data.batch(ids[lo : lo + chunk])
            out.append(model.infer_latent(b["s_t"], b["s_next"], b["f_t"]).z.data)
    return np.concatenate(out) if out else np.zeros((0, model.latent_dim), np.float32)


def probe_model(model: LamModel, data, seed: int = 0, checkpoint: str = "") -> ProbeResult:
    """Probe protocol on the held-out split.

    The test split is halved (seeded); the probe is fit on one half for three
    epochs and scored on the other. The model itself is never modified.
    """
    ids = np.asarray(data.test_ids)
    if len(ids) < 2:
        raise UsageError("test split too small for probing")
    rng = np.random.default_rng([seed, 5])
    perm = ids[rng.permutation(len(ids))]
    fit, held = perm[: len(perm) // 2], perm[len(perm) // 2 :]
    z_fit, z_held = model_latents(model, data, fit), model_latents(model, data, held)
    probe = train_probe(z_fit, data.actions[fit], data.discrete, seed=seed)
    pred = probe.predict(z_held)
    if data.discrete:
        return ProbeResult("accuracy", eval_accuracy(pred, data.actions[held]), len(held), seed, checkpoint)
    return ProbeResult("mse", eval_mse(pred, data.actions[held]), len(held), seed, checkpoint)


# ------------------------------------------------------------------ rollouts

BatchPolicy = Callable[[np.ndarray, list], list]


def composed_policy(model: LamModel, encoder: PatchEncoder) -> BatchPolicy:
    """d_action o pi as a batched policy over rendered frames."""

    def act(frames: np.ndarray, states: list) -> list:
        s = encode_visual(frames, encoder)
        tasks = np.array([st.task_id for st in states], dtype=np.int64)
        with no_grad():
            z = model.policy_forward(s, tasks)
            out = model.action_decode(z).data
        if model.discrete_actions:
            return [int(a) for a in argmax_lowest(out)]
        return [np.clip(a.astype(np.float64), -3.0, 3.0) for a in out]

    return act


def expert_policy() -> BatchPolicy:
    return lambda frames, states: [scripted_expert(st) for st in states]


def uniform_policy(config: EnvConfig, seed: int) -> BatchPolicy:
    rng = np.random.default_rng([seed, 31])
    return lambda frames, states: [random_action(config, rng) for _ in states]


def rollout_success(policy: BatchPolicy, env_config: EnvConfig, episodes: int, horizon: int, seed: int) -> float:
    """Fraction of ``episodes`` that reach the goal within ``horizon`` steps."""
    if not env_config.goal_enabled:
        raise UsageError("rollout evaluation needs goal_enabled=True")
    if episodes <= 0 or horizon <= 0:
        raise UsageError("episodes and horizon must be positive")
    states = [
        env_reset(env_config, int(np.random.SeedSequence([seed, e, 77]).generate_state(1)[0]))
        for e in range(episodes)
    ]
    done = np.zeros(episodes, dtype=bool)
    for _ in range(horizon):
        active = np.flatnonzero(~done)
        if active.size == 0:
            break
        frames = np.stack([render(states[i]) for i in active])
        actions = policy(frames, [states[i] for i in active])
        for i, a in zip(active, actions):
            states[i], reached = env_step(states[i], a)
            done[i] = reached
    return float(done.mean())


# ------------------------------------------------------------------ statistics


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise UsageError("pearson needs two equal-length sequences of at least 2 values")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("correlation is undefined for a constant sequence")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


@dataclasses.dataclass
class ExperimentRow:
    variant: str
    action_ratio: float
    seed: int
    metric: str
    value: float
    success: float | None = None
    wall_clock: float = 0.0
    lam: float | None = None
    env: str = "DistractorGrid"

    def label(self) -> str:
        return self.variant if self.lam is None else f"{self.variant}[lambda={self.lam:g}]"


@dataclasses.dataclass
class ExperimentTable:
    rows: list[ExperimentRow]
    summary: list[dict]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "action_ratio", "seed", "metric", "value"])
        for r in self.rows:
            w.writerow([r.label(), r.action_ratio, r.seed, r.metric, repr(r.value)])
            if r.success is not None:
                w.writerow([r.label(), r.action_ratio, r.seed, "success", repr(r.success)])
        return buf.getvalue()

    def series_csv(self, axis: str) -> str:
        """Plot-ready means: metric vs action ratio (``axis="action_ratio"``) or vs lambda."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["env", "variant", axis, "metric", "mean", "std", "n"])
        for cell in self.summary:
            if axis == "lambda" and cell["lambda"] is None:
                continue
            w.writerow([cell["env"], cell["variant"], cell[axis], cell["metric"],
                        repr(cell["mean"]), repr(cell["std"]), cell["n"]])
        return buf.getvalue()


def _key(r: ExperimentRow):
    return (r.env, r.variant, r.action_ratio, r.lam)


def aggregate_experiments(rows: Iterable[ExperimentRow]) -> ExperimentTable:
    """Mean and population std over seeds per (env, variant, ratio, lambda) cell,
    with the improvement over the LAPO cell of the same environment."""
    rows = list(rows)
    seen = set()
    for r in rows:
        k = _key(r) + (r.seed,)
        if k in seen:
            raise UsageError(f"duplicate row for {k}")
        seen.add(k)
    cells: dict[tuple, list[ExperimentRow]] = defaultdict(list)
    for r in rows:
        cells[_key(r)].append(r)
    summary = []
    for (env, variant, ratio, lam), rs in sorted(cells.items(), key=lambda kv: [str(x) for x in kv[0]]):
        vals = np.array([r.value for r in rs], dtype=np.float64)
        succ = [r.success for r in rs if r.success is not None]
        summary.append({
            "env": env,
            "variant": variant,
            "action_ratio": ratio,
            "lambda": lam,
            "metric": rs[0].metric,
            "mean": float(vals.mean()),
            "std": float(vals.std()),
            "n": len(rs),
            "success_mean": float(np.mean(succ)) if succ else None,
            "success_std": float(np.std(succ)) if succ else None,
        })
    baselines = {c["env"]: c for c in summary if c["variant"] == "LAPO" and c["lambda"] is None}
    for c in summary:
        base = baselines.get(c["env"])
        c["avg_impr"] = None if base is None else c["mean"] - base["mean"]
        if base is None or c["success_mean"] is None or base["success_mean"] is None:
            c["avg_impr_success"] = None
        else:
            c["avg_impr_success"] = c["success_mean"] - base["success_mean"]
    return ExperimentTable(rows, summary)
