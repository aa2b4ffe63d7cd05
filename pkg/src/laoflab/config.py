"""Run configuration: one JSON document drives every CLI subcommand."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from laoflab.envs import POLICIES, EnvConfig, FlowSettings
from laoflab.errors import ConfigError
from laoflab.models import ACTION_SUPERVISED, VARIANTS
from laoflab.training import StageConfig

STAGES = ("pretrain", "distill", "finetune")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Strict):
    seed: int = 0
    n_transitions: int = Field(default=20000, ge=1)
    policy: str = "epsilon-mixture"
    epsilon: float = Field(default=0.3, ge=0.0, le=1.0)
    test_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)
    flow: FlowSettings = FlowSettings()
    expert_transitions: int = Field(default=5000, ge=0)  # pure-expert set for distill/finetune; 0 reuses the main set
    path: str | None = None  # existing dataset directory; generated on the fly when absent

    @field_validator("policy")
    @classmethod
    def _policy(cls, v):
        if v not in POLICIES:
            raise ValueError(f"unknown policy {v!r}; choose from {list(POLICIES)}")
        return v


class StageSchedule(_Strict):
    epochs: int | None = Field(default=None, ge=0)
    lr: float | None = Field(default=None, gt=0)


class EvalConfig(_Strict):
    probe_seed: int | None = None  # defaults to the run seed
    rollout_episodes: int = Field(default=100, ge=1)
    horizon: int | None = Field(default=None, ge=1)  # defaults to H + W


class RunConfig(_Strict):
    env: EnvConfig = EnvConfig()
    data: DataConfig = DataConfig()
    model: StageConfig = StageConfig()
    schedule: dict[Literal["pretrain", "distill", "finetune"], StageSchedule] = {}
    pipeline: list[Literal["pretrain", "distill", "finetune"]] = ["pretrain"]
    variants: list[str] = ["LAOF"]
    action_ratios: list[float] = [0.0]
    lambdas: list[float | None] = [None]
    seeds: list[int] = [0]
    eval: EvalConfig = EvalConfig()
    checkpoint: str | None = None  # previous-stage checkpoint for distill/finetune/eval
    out: str = "runs"

    @field_validator("variants")
    @classmethod
    def _variants(cls, v):
        bad = [x for x in v if x not in VARIANTS]
        if bad:
            raise ValueError(f"unknown variant(s) {bad}; choose from {list(VARIANTS)}")
        if not v:
            raise ValueError("at least one variant is required")
        return v

    @field_validator("action_ratios")
    @classmethod
    def _ratios(cls, v):
        if not v or any(not 0.0 <= r <= 1.0 for r in v):
            raise ValueError("action ratios must lie in [0, 1]")
        return v

    @field_validator("lambdas")
    @classmethod
    def _lambdas(cls, v):
        if not v or any(x is not None and not 0.0 <= x <= 1.0 for x in v):
            raise ValueError("lambdas must be null or lie in [0, 1]")
        return v

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if not v or len(set(v)) != len(v):
            raise ValueError("seeds must be a non-empty list without duplicates")
        return v

    @model_validator(mode="after")
    def _pipeline(self):
        if not self.pipeline or self.pipeline != list(STAGES[: len(self.pipeline)]):
            raise ValueError(f"pipeline must be a prefix of {list(STAGES)}")
        for v in self.variants:
            if v in ACTION_SUPERVISED and 0.0 in self.action_ratios:
                raise ValueError(f"{v} needs action ratios > 0")
        return self

    def stage_config(
        self,
        stage: str,
        variant: str | None = None,
        action_ratio: float | None = None,
        lam: float | None = None,
        seed: int | None = None,
    ) -> StageConfig:
        """The StageConfig for one stage of one sweep cell."""
        sched = self.schedule.get(stage, StageSchedule())
        base = self.model.model_dump()
        base.update(
            stage=stage,
            epochs=sched.epochs if sched.epochs is not None else base["epochs"] if stage == "pretrain" else None,
            lr=sched.lr if sched.lr is not None else base["lr"] if stage == "pretrain" else None,
        )
        if variant is not None:
            base["variant"] = variant
        if action_ratio is not None:
            base["action_ratio"] = action_ratio
        if lam is not None:
            base["lambda_override"] = lam
        if seed is not None:
            base["seed"] = seed
        return StageConfig(**base)

    def cells(self) -> list[tuple[str, float, float | None, int]]:
        """Every (variant, ratio, lambda, seed) combination the sweep runs.

        Lambda only matters for action-supervised variants; other variants get
        one cell per ratio and seed with lambda None.
        """
        out = []
        for v in self.variants:
            lams = self.lambdas if v in ACTION_SUPERVISED else [None]
            for r in self.action_ratios:
                for lam in dict.fromkeys(lams):
                    for s in self.seeds:
                        out.append((v, r, lam, s))
        return out

    def snapshot(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=1, sort_keys=True) + "\n"


def _line_of(text: str, key: str) -> int | None:
    needle = f'"{key}"'
    for n, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return n
    return None


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse and validate a RunConfig, raising ConfigError with line/key diagnostics."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        msgs = []
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"]) or "<root>"
            last = next((str(p) for p in reversed(err["loc"]) if isinstance(p, str)), None)
            line = _line_of(text, last) if last else None
            where = f"{source}:{line}" if line else source
            msgs.append(f"{where}: key '{loc}': {err['msg']}")
        raise ConfigError("\n".join(msgs)) from None


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_run_config(text, str(path))
