"""Pre-training, distillation and fine-tuning of latent action models."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from pathlib import Path
from typing import Callable, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from laoflab import autodiff as ad
from laoflab.autodiff import Tensor, no_grad
from laoflab.checkpoint import load_checkpoint, save_checkpoint
from laoflab.data import Dataset, TransitionSet, batch_iterator, split_action_ratio
from laoflab.errors import NumericError, UsageError
from laoflab.models import ACTION_SUPERVISED, VARIANTS, LamModel, PatchEncoder, encode_visual
from laoflab.optim import Adam

log = logging.getLogger(__name__)

# learning rates per stage, discrete (game-like) and continuous (manipulation-like) regimes
DEFAULT_LR = {
    "discrete": {"pretrain": 3e-4, "distill": 2e-4, "finetune": 3e-5},
    "continuous": {"pretrain": 1e-4, "distill": 3.5e-4, "finetune": 3.5e-4},
}
DEFAULT_EPOCHS = {"pretrain": 10, "distill": 5, "finetune": 3}


class StageConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    stage: Literal["pretrain", "distill", "finetune"] = "pretrain"
    epochs: int | None = Field(default=None, ge=0)
    batch_size: int = Field(default=128, ge=1)
    lr: float | None = Field(default=None, gt=0)
    variant: str = "LAOF"
    latent_mode: Literal["continuous", "discrete"] = "discrete"
    latent_dim: int = Field(default=16, ge=1, le=128)
    hidden: int = Field(default=256, ge=1)
    codebook_size: int = Field(default=64, ge=1)
    action_ratio: float = Field(default=0.0, ge=0.0, le=1.0)
    lambda_override: float | None = Field(default=None, ge=0.0, le=1.0)
    discrete_action_loss: Literal["cross-entropy", "l2"] = "cross-entropy"
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {list(VARIANTS)}")
        if self.stage == "pretrain" and self.variant in ACTION_SUPERVISED and self.action_ratio <= 0:
            raise ValueError(f"{self.variant} needs action_ratio > 0")
        return self

    def resolved_epochs(self) -> int:
        return DEFAULT_EPOCHS[self.stage] if self.epochs is None else self.epochs

    def resolved_lr(self, discrete_actions: bool) -> float:
        if self.lr is not None:
            return self.lr
        return DEFAULT_LR["discrete" if discrete_actions else "continuous"][self.stage]


def compute_lambda(n_unlabeled: int, m_labeled: int) -> float:
    """Weight of action supervision: the labelled share M / (N + M)."""
    if n_unlabeled < 0 or m_labeled < 0:
        raise UsageError("counts must be non-negative")
    if n_unlabeled + m_labeled == 0:
        raise UsageError("lambda is undefined for an empty dataset")
    return m_labeled / (n_unlabeled + m_labeled)


# ------------------------------------------------------------------ data


@dataclasses.dataclass
class EncodedData:
    """States of a dataset under the frozen encoder, plus labels and splits."""

    s_t: np.ndarray
    s_next: np.ndarray
    f_t: np.ndarray
    actions: np.ndarray
    task_ids: np.ndarray
    train_ids: np.ndarray
    test_ids: np.ndarray
    discrete: bool
    n_tasks: int

    @classmethod
    def from_transitions(
        cls,
        ts: TransitionSet,
        encoder: PatchEncoder,
        train_ids: np.ndarray,
        test_ids: np.ndarray,
        chunk: int = 2048,
    ) -> EncodedData:
        n = len(ts)
        d = encoder.state_dim
        s = np.zeros((n, 2, d), dtype=np.float32)
        f = np.zeros((n, d), dtype=np.float32)
        for lo in range(0, n, chunk):
            hi = min(n, lo + chunk)
            s[lo:hi] = encode_visual(np.asarray(ts.obs[lo:hi]), encoder)
            f[lo:hi] = encode_visual(np.asarray(ts.flow_rgb[lo:hi]), encoder)
        return cls(
            s_t=s[:, 0],
            s_next=s[:, 1],
            f_t=f,
            actions=np.asarray(ts.actions),
            task_ids=ts.task_ids,
            train_ids=np.asarray(train_ids, dtype=np.int64),
            test_ids=np.asarray(test_ids, dtype=np.int64),
            discrete=ts.env.discrete,
            n_tasks=ts.env.n_tasks,
        )

    @classmethod
    def from_dataset(cls, ds: Dataset, encoder: PatchEncoder) -> EncodedData:
        return cls.from_transitions(ds.transitions, encoder, ds.split_ids("train"), ds.split_ids("test"))

    def batch(self, ids: np.ndarray) -> dict[str, np.ndarray]:
        return {
            "s_t": self.s_t[ids],
            "s_next": self.s_next[ids],
            "f_t": self.f_t[ids],
            "actions": self.actions[ids],
            "task_ids": self.task_ids[ids],
        }

    @property
    def action_dim(self) -> int:
        return 5 if self.discrete else 2


def build_model(cfg: StageConfig, data: EncodedData, state_dim: int) -> LamModel:
    return LamModel(
        variant=cfg.variant,
        latent_mode=cfg.latent_mode,
        state_dim=state_dim,
        action_dim=data.action_dim,
        discrete_actions=data.discrete,
        latent_dim=cfg.latent_dim,
        n_tasks=data.n_tasks,
        hidden=cfg.hidden,
        codebook_size=cfg.codebook_size,
        seed=cfg.seed,
    )


# ------------------------------------------------------------------ losses


def action_loss(pred: Tensor, actions: np.ndarray, discrete: bool, mode: str = "cross-entropy") -> Tensor:
    if not discrete:
        return ad.mse(pred, Tensor(np.asarray(actions, dtype=np.float32)))
    if mode == "l2":
        onehot = np.zeros(pred.shape, dtype=np.float32)
        onehot[np.arange(pred.shape[0]), np.asarray(actions, dtype=np.int64)] = 1.0
        return ad.mse(pred, Tensor(onehot))
    return ad.softmax_cross_entropy(pred, actions)


def pretrain_losses(
    model: LamModel,
    batch: dict,
    flow_weight: float = 1.0,
    action_weight: float = 0.0,
    action_mode: str = "cross-entropy",
) -> dict[str, Tensor | None]:
    """Loss components for one batch; absent components are None.

    ``flow_weight`` scales the flow term and ``action_weight`` the action term
    (which requires ``batch["actions"]``).
    """
    s_t, s_next, f_t = Tensor(batch["s_t"]), Tensor(batch["s_next"]), Tensor(batch["f_t"])
    lat = model.infer_latent(s_t, s_next, f_t)
    out: dict[str, Tensor | None] = {"recon": None, "flow": None, "action": None, "vq": lat.vq_loss}
    w = model.wiring
    f_hat = None
    if w.fdm is not None:
        pred = model.fdm_forward(s_t, lat.z)
        s_hat, f_hat = pred if w.fdm == "dual" else (pred, None)
        out["recon"] = ad.mse(s_hat, s_next)
    if w.flow_decoder is not None and flow_weight > 0:
        if f_hat is None:
            f_hat = model.flow_decode(lat.z, s_t)
        out["flow"] = ad.mse(f_hat, f_t)
    if action_weight > 0:
        if batch.get("actions") is None:
            raise UsageError("action supervision requested for a batch without actions")
        out["action"] = action_loss(model.action_decode(lat.z, stage="pretrain"), batch["actions"],
                                    model.discrete_actions, action_mode)
    terms = [out["recon"], out["vq"]]
    if out["flow"] is not None:
        terms.append(ad.scale(out["flow"], flow_weight) if flow_weight != 1.0 else out["flow"])
    if out["action"] is not None:
        terms.append(ad.scale(out["action"], action_weight) if action_weight != 1.0 else out["action"])
    terms = [t for t in terms if t is not None]
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    out["total"] = total
    return out


def _optimize(opt: Adam, total: Tensor) -> float:
    opt.zero_grad()
    if total.requires_grad:
        ad.backward(total)
    gn = opt.grad_norm()
    opt.step()
    return gn


def _floats(comps: dict[str, Tensor | None]) -> dict[str, float | None]:
    return {k: (None if v is None else float(v.data)) for k, v in comps.items()}


def pretrain_step(model: LamModel, opt: Adam, batch: dict) -> dict:
    """One optimizer step on L_recon + L_flow (+ quantizer terms in discrete mode)."""
    comps = pretrain_losses(model, batch)
    gn = _optimize(opt, comps["total"])
    return {**_floats(comps), "grad_norm": gn}


def pretrain_step_mixed(
    model: LamModel,
    opt: Adam,
    unlabeled: dict,
    labeled: dict,
    lam: float,
    action_mode: str = "cross-entropy",
) -> dict:
    """Alternating update: unlabeled batch on L_recon + (1 - lam) L_flow, then
    labeled batch on L_recon + lam L_action. Shared trunks see both sub-steps."""
    if model.variant not in ACTION_SUPERVISED:
        raise UsageError(f"mixed pre-training needs an action-supervised variant, not {model.variant}")
    if not 0.0 <= lam <= 1.0:
        raise UsageError(f"lambda must lie in [0, 1], got {lam}")
    if labeled.get("actions") is None:
        raise UsageError("labeled batch has no actions")
    a = pretrain_losses(model, unlabeled, flow_weight=1.0 - lam)
    gn_a = _optimize(opt, a["total"])
    b = pretrain_losses(model, labeled, flow_weight=0.0, action_weight=lam, action_mode=action_mode)
    gn_b = _optimize(opt, b["total"])
    fa, fb = _floats(a), _floats(b)
    return {
        "total": fa["total"] + fb["total"],
        "recon": fa["recon"],
        "flow": fa["flow"],
        "vq": fa["vq"],
        "recon_labeled": fb["recon"],
        "action": fb["action"],
        "lambda": lam,
        "grad_norm": gn_a,
        "grad_norm_labeled": gn_b,
    }


def distill_step(model: LamModel, opt: Adam, batch: dict) -> dict:
    """Fit the latent policy to the frozen IDM's latents: mse(pi(s_t, task), z)."""
    with no_grad():
        z = model.infer_latent(batch["s_t"], batch["s_next"], batch["f_t"]).z.data
    pred = model.policy_forward(Tensor(batch["s_t"]), batch["task_ids"])
    loss = ad.mse(pred, Tensor(z))
    gn = _optimize(opt, loss)
    return {"total": float(loss.data), "distill": float(loss.data), "grad_norm": gn}


def finetune_step(model: LamModel, opt: Adam, batch: dict, action_mode: str = "cross-entropy") -> dict:
    """Train the action decoder on latents from the frozen policy."""
    with no_grad():
        z = model.policy_forward(batch["s_t"], batch["task_ids"]).data
    pred = model.action_decode(Tensor(z))
    loss = action_loss(pred, batch["actions"], model.discrete_actions, action_mode)
    gn = _optimize(opt, loss)
    return {"total": float(loss.data), "action": float(loss.data), "grad_norm": gn}


# ------------------------------------------------------------------ stages


@dataclasses.dataclass
class TrainLog:
    stage: str
    records: list[dict] = dataclasses.field(default_factory=list)
    epochs: list[dict] = dataclasses.field(default_factory=list)
    wall_clock: float = 0.0
    status: str = "ok"

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps({"kind": "step", **rec}) + "\n")
            for rec in self.epochs:
                fh.write(json.dumps({"kind": "epoch", **rec}) + "\n")
            fh.write(json.dumps({"kind": "summary", "stage": self.stage, "status": self.status,
                                 "steps": len(self.records), "wall_clock": self.wall_clock}) + "\n")

    @staticmethod
    def read(path) -> TrainLog:
        recs = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        summary = next(r for r in recs if r["kind"] == "summary")
        out = TrainLog(stage=summary["stage"], wall_clock=summary["wall_clock"], status=summary["status"])
        for r in recs:
            kind = r.pop("kind")
            if kind == "step":
                out.records.append(r)
            elif kind == "epoch":
                out.epochs.append(r)
        return out


EpochHook = Callable[[LamModel, int], dict]


def _cycle(ids: np.ndarray, batch_size: int, seed: int):
    epoch = 0
    while True:
        yield from batch_iterator(ids, batch_size, seed, epoch)
        epoch += 1


def run_stage(
    cfg: StageConfig,
    data: EncodedData,
    model: LamModel | None = None,
    state_dim: int | None = None,
    on_epoch: EpochHook | None = None,
) -> tuple[LamModel, TrainLog]:
    """Run one stage for the configured number of epochs.

    ``pretrain`` creates a fresh model; ``distill`` and ``finetune`` require the
    model produced by the previous stage. ``on_epoch(model, epoch)`` is called
    after every epoch (and once before training, with epoch 0) and its result
    stored in the log.
    """
    stage = cfg.stage
    if stage == "pretrain":
        if model is None:
            model = build_model(cfg, data, state_dim or data.s_t.shape[1])
    elif model is None:
        need = "pretrain" if stage == "distill" else "distill"
        raise UsageError(f"{stage} stage requires a {need} checkpoint")
    elif stage == "finetune" and not getattr(model, "distilled", False):
        raise UsageError("finetune stage requires a distilled checkpoint")

    lr = cfg.resolved_lr(data.discrete)
    epochs = cfg.resolved_epochs()
    tlog = TrainLog(stage=stage)
    start = time.perf_counter()

    params = {
        "pretrain": model.pretrain_parameters,
        "distill": lambda: model.group("policy"),
        "finetune": lambda: model.group("finetune_decoder"),
    }[stage]()
    opt = Adam(params, lr=lr)

    mixed = stage == "pretrain" and model.variant in ACTION_SUPERVISED
    train_ids = data.train_ids
    lam = None
    labeled_iter = None
    if mixed:
        labeled, unlabeled = split_action_ratio(data.train_ids, cfg.action_ratio, cfg.seed)
        if cfg.lambda_override is not None:
            lam = cfg.lambda_override
        elif model.variant == "LAOM-Action":
            lam = 1.0
        else:
            lam = compute_lambda(len(unlabeled), len(labeled))
        train_ids = unlabeled if len(unlabeled) else labeled
        labeled_iter = _cycle(labeled, cfg.batch_size, cfg.seed + 1)
    elif stage == "finetune" and 0 < cfg.action_ratio < 1:
        train_ids, _ = split_action_ratio(data.train_ids, cfg.action_ratio, cfg.seed)

    if on_epoch is not None:
        tlog.epochs.append({"epoch": 0, **on_epoch(model, 0)})
    step = 0
    try:
        for epoch in range(epochs):
            for ids in batch_iterator(train_ids, cfg.batch_size, cfg.seed, epoch):
                batch = data.batch(ids)
                if mixed:
                    rec = pretrain_step_mixed(model, opt, batch, data.batch(next(labeled_iter)), lam,
                                              cfg.discrete_action_loss)
                elif stage == "pretrain":
                    rec = pretrain_step(model, opt, batch)
                elif stage == "distill":
                    rec = distill_step(model, opt, batch)
                else:
                    rec = finetune_step(model, opt, batch, cfg.discrete_action_loss)
                step += 1
                tlog.records.append({"step": step, "epoch": epoch + 1, **rec})
            if on_epoch is not None:
                tlog.epochs.append({"epoch": epoch + 1, **on_epoch(model, epoch + 1)})
    except NumericError:
        tlog.status = "aborted: non-finite values"
        tlog.wall_clock = time.perf_counter() - start
        raise NumericError(f"{stage} aborted at step {step + 1}: non-finite values") from None
    finally:
        tlog.wall_clock = time.perf_counter() - start
    if stage == "distill":
        model.distilled = True
    if stage == "finetune":
        model.finetuned = True
    log.info("%s %s finished: %d steps in %.1fs", stage, model.variant, step, tlog.wall_clock)
    return model, tlog


# ------------------------------------------------------------------ persistence


def save_model(model: LamModel, encoder: PatchEncoder, directory, extra: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    params = {"encoder.projection": encoder.projection, **model.state_dict()}
    save_checkpoint(params, directory / "checkpoint.bin")
    meta = {
        **model.describe(),
        "hidden": model.idm.layers[0].weight.shape[1],
        "codebook_size": model.quantizer.codebook.shape[0] if model.quantizer else None,
        "encoder": {"height": encoder.height, "width": encoder.width, "patch": encoder.patch, "dim": encoder.dim},
        "distilled": getattr(model, "distilled", False),
        "finetuned": getattr(model, "finetuned", False),
        **(extra or {}),
    }
    (directory / "manifest.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_model(directory) -> tuple[LamModel, PatchEncoder, dict]:
    directory = Path(directory)
    meta = json.loads((directory / "manifest.json").read_text())
    params = load_checkpoint(directory / "checkpoint.bin")
    enc = meta["encoder"]
    encoder = PatchEncoder(enc["height"], enc["width"], enc["patch"], enc["dim"])
    encoder.projection = params.pop("encoder.projection")
    model = LamModel(
        variant=meta["variant"],
        latent_mode=meta["latent_mode"],
        state_dim=meta["state_dim"],
        action_dim=meta["action_dim"],
        discrete_actions=meta["discrete_actions"],
        latent_dim=meta["latent_dim"],
        n_tasks=meta["n_tasks"],
        hidden=meta["hidden"],
        codebook_size=meta["codebook_size"] or 64,
    )
    model.load_state_dict(params)
    model.distilled = meta.get("distilled", False)
    model.finetuned = meta.get("finetuned", False)
    return model, encoder, meta
