"""Sweep runner: every (variant, ratio, lambda, seed) cell of a RunConfig as an isolated run."""

from __future__ import annotations

import dataclasses
import json
import logging
import multiprocessing as mp
import os
import time
from pathlib import Path

import numpy as np

from laoflab.config import RunConfig
from laoflab.data import read_dataset, split_episodes
from laoflab.envs import generate_transitions
from laoflab.eval import ExperimentRow, aggregate_experiments, composed_policy, probe_model, rollout_success
from laoflab.models import PatchEncoder
from laoflab.training import EncodedData, LamModel, TrainLog, run_stage, save_model

log = logging.getLogger(__name__)


EXPERT_DIR = "expert"


@dataclasses.dataclass
class LabData:
    """Encoded pre-training data, the pure-expert set used after pre-training, and the encoder."""

    pretrain: EncodedData
    expert: EncodedData
    encoder: PatchEncoder


def episode_split_ids(ts, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    splits = split_episodes(ts.n_episodes, test_fraction, seed)
    starts = ts.episode_starts
    ends = np.append(starts[1:], len(ts))

    def ids(eps):
        parts = [np.arange(starts[e], ends[e]) for e in eps]
        return np.concatenate(parts) if parts else np.zeros(0, np.int64)

    return ids(splits["train"]), ids(splits["test"])


def expert_seed(seed: int) -> int:
    return seed + 1


def load_lab_data(cfg: RunConfig) -> LabData:
    """Encode the configured datasets, reading them from disk or generating them in memory.

    On disk the expert set lives in an ``expert/`` subdirectory; when it is
    missing (or ``expert_transitions`` is 0) the main set serves every stage.
    """
    encoder = PatchEncoder(cfg.env.height, cfg.env.width)
    d = cfg.data
    if d.path:
        main = EncodedData.from_dataset(read_dataset(d.path), encoder)
        sub = Path(d.path) / EXPERT_DIR
        expert = EncodedData.from_dataset(read_dataset(sub), encoder) if sub.exists() else main
        return LabData(main, expert, encoder)
    ts = generate_transitions(cfg.env, d.n_transitions, d.policy, d.seed, d.epsilon, d.flow)
    main = EncodedData.from_transitions(ts, encoder, *episode_split_ids(ts, d.test_fraction, d.seed))
    expert = main
    if d.expert_transitions > 0:
        es = expert_seed(d.seed)
        ets = generate_transitions(cfg.env, d.expert_transitions, "expert", es, flow=d.flow)
        expert = EncodedData.from_transitions(ets, encoder, *episode_split_ids(ets, d.test_fraction, es))
    return LabData(main, expert, encoder)


def cell_label(variant: str, ratio: float, lam: float | None, seed: int) -> str:
    lam_part = "" if lam is None else f"_lam{lam:g}"
    return f"{variant}_r{ratio:g}{lam_part}_s{seed}"


def run_pipeline(
    cfg: RunConfig,
    lab: LabData,
    variant: str,
    ratio: float,
    lam: float | None,
    seed: int,
    out_dir=None,
) -> tuple[ExperimentRow, LamModel, dict[str, TrainLog]]:
    """Run the configured stages for one cell, then probe and (after fine-tuning) roll out.

    Pre-training sees the main set; distillation and fine-tuning see the expert set.
    """
    start = time.perf_counter()
    encoder = lab.encoder
    model, logs = None, {}
    for stage in cfg.pipeline:
        sc = cfg.stage_config(stage, variant, ratio, lam, seed)
        model, logs[stage] = run_stage(sc, lab.pretrain if stage == "pretrain" else lab.expert, model=model)
    probe_seed = seed if cfg.eval.probe_seed is None else cfg.eval.probe_seed
    probe = probe_model(model, lab.pretrain, probe_seed)
    success = None
    if "finetune" in cfg.pipeline and cfg.env.goal_enabled:
        horizon = cfg.eval.horizon or cfg.env.height + cfg.env.width
        success = rollout_success(composed_policy(model, encoder), cfg.env, cfg.eval.rollout_episodes, horizon, seed)
    row = ExperimentRow(
        variant=variant,
        action_ratio=ratio,
        seed=seed,
        metric=probe.metric,
        value=probe.value,
        success=success,
        wall_clock=time.perf_counter() - start,
        lam=lam,
        env=cfg.env.family,
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_model(model, encoder, out_dir, extra={"seed": seed, "action_ratio": ratio, "lambda": lam})
        for stage, tl in logs.items():
            tl.write(out_dir / f"{stage}_log.jsonl")
        (out_dir / "metrics.json").write_text(json.dumps(row_metrics(row), indent=1, sort_keys=True) + "\n")
    return row, model, logs


def row_metrics(row: ExperimentRow) -> dict:
    """Deterministic part of a row (everything except wall-clock)."""
    return {k: v for k, v in vars(row).items() if k != "wall_clock"}


# worker-process state, populated by fork inheritance or the pool initializer
_WORKER: dict = {}


def _init_worker(cfg_json: str, lab: LabData, out):
    _WORKER.update(cfg=RunConfig.model_validate_json(cfg_json), lab=lab, out=out)


def _run_cell(cell) -> ExperimentRow:
    variant, ratio, lam, seed = cell
    out = _WORKER["out"]
    cell_dir = None if out is None else Path(out) / "cells" / cell_label(*cell)
    row, _, _ = run_pipeline(_WORKER["cfg"], _WORKER["lab"], variant, ratio, lam, seed, cell_dir)
    log.info("cell %s: %s=%.4f", cell_label(*cell), row.metric, row.value)
    return row


def pool_width(requested: int) -> int:
    width = max(1, requested)
    cap = os.environ.get("LAOF_LAB_THREADS")
    if cap:
        try:
            width = min(width, max(1, int(cap)))
        except ValueError:
            log.warning("ignoring non-integer LAOF_LAB_THREADS=%r", cap)
    return width


def run_sweep(cfg: RunConfig, workers: int = 1, out=None, lab: LabData | None = None) -> list[ExperimentRow]:
    """All cells of ``cfg``; rows come back in cell order whatever the pool width."""
    lab = lab or load_lab_data(cfg)
    cells = cfg.cells()
    width = min(pool_width(workers), len(cells))
    args = (cfg.model_dump_json(), lab, None if out is None else str(out))
    if width == 1:
        _init_worker(*args)
        rows = [_run_cell(c) for c in cells]
    else:
        with mp.get_context("fork").Pool(width, initializer=_init_worker, initargs=args) as pool:
            rows = pool.map(_run_cell, cells, chunksize=1)
    if out is not None:
        write_sweep(rows, out)
    return rows


def write_rows(rows: list[ExperimentRow], path) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(vars(r), sort_keys=True) + "\n")


def read_rows(path) -> list[ExperimentRow]:
    return [ExperimentRow(**json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]


def write_sweep(rows: list[ExperimentRow], out) -> dict:
    """Rows, long-format table, JSON summary and plot series under ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_rows(rows, out / "rows.jsonl")
    return export_tables(rows, out)


def export_tables(rows: list[ExperimentRow], out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    table = aggregate_experiments(rows)
    (out / "table.csv").write_text(table.to_csv())
    (out / "series_ratio.csv").write_text(table.series_csv("action_ratio"))
    (out / "series_lambda.csv").write_text(table.series_csv("lambda"))
    (out / "summary.json").write_text(json.dumps(table.summary, indent=1, sort_keys=True) + "\n")
    return {"rows": len(rows), "cells": len(table.summary), "summary": table.summary}
