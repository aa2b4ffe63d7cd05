"""Command-line entry point.

Logs go to stderr; stdout carries exactly one JSON document per invocation.
Exit codes: 0 success, 1 usage/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

from laoflab.config import RunConfig, load_run_config
from laoflab.data import split_action_ratio, split_episodes, write_dataset
from laoflab.errors import LabError, UsageError
from laoflab.envs import generate_transitions
from laoflab.eval import ExperimentRow, composed_policy, probe_model, rollout_success
from laoflab.experiments import (
    EXPERT_DIR,
    episode_split_ids,
    expert_seed,
    export_tables,
    load_lab_data,
    read_rows,
    row_metrics,
    run_sweep,
)
from laoflab.training import load_model, run_stage, save_model

log = logging.getLogger("laoflab")

COMMANDS = ("gen-data", "pretrain", "distill", "finetune", "eval", "sweep", "export")
SNAPSHOT = "resolved_config.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="laoflab", description="Latent action learning with optical-flow constraints, desk scale.")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, help_, checkpoint=False, data=True):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", type=Path, help="RunConfig JSON (defaults used when omitted)")
        sp.add_argument("--seed", type=int, help="override the seed")
        sp.add_argument("--out", type=Path, help="output directory")
        sp.add_argument("--workers", type=int, default=1, help="sweep pool width")
        if data:
            sp.add_argument("--data", type=Path, help="dataset directory (overrides data.path)")
        if checkpoint:
            sp.add_argument("--checkpoint", type=Path, help="checkpoint directory of the previous stage")
        return sp

    add("gen-data", "generate a dataset directory", data=False)
    add("pretrain", "pre-train a latent action model")
    add("distill", "distill the latent policy from a pre-trained checkpoint", checkpoint=True)
    add("finetune", "fine-tune the action decoder of a distilled checkpoint", checkpoint=True)
    add("eval", "probe a checkpoint and roll out its composed policy", checkpoint=True)
    add("sweep", "run the variants x ratios x lambdas x seeds grid")
    add("export", "rebuild CSV tables and plot series from a sweep directory", data=False)
    return p


def _resolve(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    upd: dict = {}
    if getattr(args, "data", None):
        upd["data"] = cfg.data.model_copy(update={"path": str(args.data)})
    if args.seed is not None:
        if args.command == "gen-data":
            upd["data"] = (upd.get("data") or cfg.data).model_copy(update={"seed": args.seed})
        else:
            upd["model"] = cfg.model.model_copy(update={"seed": args.seed})
            upd["seeds"] = [args.seed]
    if getattr(args, "checkpoint", None):
        upd["checkpoint"] = str(args.checkpoint)
    if args.out:
        upd["out"] = str(args.out)
    cfg = cfg.model_copy(update=upd)
    # re-validate so overrides obey the same rules as file contents
    return RunConfig.model_validate(cfg.model_dump())


def _write_snapshot(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / SNAPSHOT).write_text(cfg.snapshot())


def cmd_gen_data(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    d = cfg.data
    ts = generate_transitions(cfg.env, d.n_transitions, d.policy, d.seed, d.epsilon, d.flow)
    splits = split_episodes(ts.n_episodes, d.test_fraction, d.seed)
    train, _ = episode_split_ids(ts, d.test_fraction, d.seed)
    ratios = {}
    for r in cfg.action_ratios:
        if r > 0:
            ratios[f"{r:g}"] = {str(s): split_action_ratio(train, r, s)[0].tolist() for s in cfg.seeds}
    manifest = write_dataset(ts, out, splits=splits, ratios=ratios)
    if d.expert_transitions > 0:
        es = expert_seed(d.seed)
        ets = generate_transitions(cfg.env, d.expert_transitions, "expert", es, flow=d.flow)
        write_dataset(ets, out / EXPERT_DIR, splits=split_episodes(ets.n_episodes, d.test_fraction, es))
    _write_snapshot(cfg.model_copy(update={"data": d.model_copy(update={"path": None})}), out)
    return {"command": "gen-data", "out": str(out), "counts": manifest["counts"]}


def _checkpoint_model(cfg: RunConfig):
    if not cfg.checkpoint:
        raise UsageError("this command needs --checkpoint DIR")
    return load_model(cfg.checkpoint)


def cmd_stage(cfg: RunConfig, stage: str) -> dict:
    out = Path(cfg.out)
    lab = load_lab_data(cfg)
    data, encoder = lab.pretrain, lab.encoder
    model = None
    if stage != "pretrain":
        model, encoder, _ = _checkpoint_model(cfg)
    sc = cfg.stage_config(stage)
    model, tlog = run_stage(sc, data if stage == "pretrain" else lab.expert, model=model)
    _write_snapshot(cfg, out)
    save_model(model, encoder, out, extra={"seed": sc.seed, "stage": stage})
    tlog.write(out / f"{stage}_log.jsonl")
    probe = probe_model(model, data, cfg.eval.probe_seed if cfg.eval.probe_seed is not None else sc.seed)
    success = None
    if stage == "finetune" and cfg.env.goal_enabled:
        horizon = cfg.eval.horizon or cfg.env.height + cfg.env.width
        success = rollout_success(composed_policy(model, encoder), cfg.env, cfg.eval.rollout_episodes, horizon, sc.seed)
    row = ExperimentRow(sc.variant, sc.action_ratio, sc.seed, probe.metric, probe.value, success,
                        tlog.wall_clock, sc.lambda_override, cfg.env.family)
    metrics = row_metrics(row)
    metrics["final_loss"] = tlog.records[-1]["total"] if tlog.records else None
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n")
    return {"command": stage, "out": str(out), **metrics}


def cmd_eval(cfg: RunConfig) -> dict:
    model, encoder, meta = _checkpoint_model(cfg)
    data = load_lab_data(cfg).pretrain
    seed = cfg.eval.probe_seed if cfg.eval.probe_seed is not None else cfg.model.seed
    probe = probe_model(model, data, seed, checkpoint=str(cfg.checkpoint))
    result = {"command": "eval", "checkpoint": cfg.checkpoint, "metric": probe.metric, "value": probe.value,
              "n_samples": probe.n_samples, "seed": seed, "success": None}
    if getattr(model, "finetuned", False) and cfg.env.goal_enabled:
        horizon = cfg.eval.horizon or cfg.env.height + cfg.env.width
        result["success"] = rollout_success(composed_policy(model, encoder), cfg.env,
                                            cfg.eval.rollout_episodes, horizon, seed)
    out = Path(cfg.out)
    _write_snapshot(cfg, out)
    (out / "eval.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    return result


def cmd_sweep(cfg: RunConfig, workers: int) -> dict:
    out = Path(cfg.out)
    _write_snapshot(cfg, out)
    rows = run_sweep(cfg, workers=workers, out=out)
    return {"command": "sweep", "out": str(out), "rows": len(rows), "cells": len(cfg.cells())}


def cmd_export(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    rows_path = out / "rows.jsonl"
    if not rows_path.exists():
        raise UsageError(f"{rows_path} not found; point --out at a sweep directory")
    info = export_tables(read_rows(rows_path), out)
    return {"command": "export", "out": str(out), "rows": info["rows"], "cells": info["cells"]}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(stream=sys.stderr, level=logging.WARNING if args.quiet else logging.INFO,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError(f"a command is required: {', '.join(COMMANDS)}")
        cfg = _resolve(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        if args.command == "gen-data":
            result = cmd_gen_data(cfg)
        elif args.command in ("pretrain", "distill", "finetune"):
            result = cmd_stage(cfg, args.command)
        elif args.command == "eval":
            result = cmd_eval(cfg)
        elif args.command == "sweep":
            result = cmd_sweep(cfg, args.workers)
        else:
            result = cmd_export(cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (LabError, OSError, ArithmeticError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
