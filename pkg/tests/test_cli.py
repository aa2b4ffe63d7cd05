import csv
import json
import subprocess
import sys

import pytest

from laoflab import cli
from laoflab.data import FILES

TINY = {
    "data": {"n_transitions": 240, "expert_transitions": 120},
    "model": {"hidden": 16, "latent_dim": 4, "batch_size": 32, "epochs": 1, "lr": 1e-3},
    "schedule": {"distill": {"epochs": 1}, "finetune": {"epochs": 1}},
    "eval": {"rollout_episodes": 4},
}


def write_config(path, **over):
    cfg = json.loads(json.dumps(TINY))
    cfg.update(over)
    path.write_text(json.dumps(cfg, indent=1))
    return path


def run(capsys, *argv):
    code = cli.main(["-q", *map(str, argv)])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 else None), err


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "c.json", action_ratios=[0.1])
    assert cli.main(["-q", "gen-data", "--config", str(cfg), "--seed", "7", "--out", str(root / "data")]) == 0
    return root, cfg


class TestUsage:
    def test_unknown_subcommand(self, capsys):
        code, _, err = run(capsys, "frobnicate")
        assert code == 1 and "usage" in err

    def test_no_command(self, capsys):
        assert run(capsys)[0] == 1

    def test_bad_config_exit_1(self, tmp_path, capsys):
        (tmp_path / "bad.json").write_text('{\n "seeds": [1, 1]\n}')
        code, _, err = run(capsys, "pretrain", "--config", tmp_path / "bad.json")
        assert code == 1 and "bad.json:2" in err and "seeds" in err

    def test_missing_checkpoint_flag(self, dataset, capsys):
        root, cfg = dataset
        code, _, err = run(capsys, "distill", "--config", cfg, "--data", root / "data", "--out", root / "x")
        assert code == 1 and "--checkpoint" in err

    def test_runtime_failure_exit_2(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json")
        code, _, _ = run(capsys, "pretrain", "--config", cfg, "--data", tmp_path / "missing", "--out", tmp_path / "o")
        assert code == 2

    def test_export_needs_sweep(self, tmp_path, capsys):
        assert run(capsys, "export", "--out", tmp_path)[0] == 1

    def test_console_script(self):
        res = subprocess.run([sys.executable, "-m", "laoflab.cli", "--help"], capture_output=True, text=True)
        assert res.returncode == 0 and "gen-data" in res.stdout


class TestGenData:
    def test_byte_identical(self, dataset, tmp_path, capsys):
        root, cfg = dataset
        code, result, _ = run(capsys, "gen-data", "--config", cfg, "--seed", 7, "--out", tmp_path / "again")
        assert code == 0 and result["counts"]["n_transitions"] == 240
        for sub in ("", "expert/"):
            for name in FILES + ("manifest.json",):
                assert (root / "data" / sub / name).read_bytes() == (tmp_path / "again" / sub / name).read_bytes()

    def test_manifest_records_label_sets(self, dataset):
        root, _ = dataset
        manifest = json.loads((root / "data" / "manifest.json").read_text())
        labelled = manifest["ratios"]["0.1"]["0"]
        assert len(labelled) > 0 and len(set(labelled)) == len(labelled)
        snap = json.loads((root / "data" / cli.SNAPSHOT).read_text())
        assert snap["data"]["seed"] == 7


class TestPipeline:
    def test_stages_eval_and_replay(self, dataset, capsys):
        root, cfg = dataset
        data = root / "data"
        code, pre, _ = run(capsys, "pretrain", "--config", cfg, "--data", data, "--seed", 3, "--out", root / "pre")
        assert code == 0 and pre["metric"] == "accuracy" and pre["seed"] == 3
        code, dis, _ = run(capsys, "distill", "--config", cfg, "--data", data, "--seed", 3,
                           "--checkpoint", root / "pre", "--out", root / "dis")
        assert code == 0
        code, fin, _ = run(capsys, "finetune", "--config", cfg, "--data", data, "--seed", 3,
                           "--checkpoint", root / "dis", "--out", root / "fin")
        assert code == 0 and 0.0 <= fin["success"] <= 1.0
        for stage, d in (("pretrain", "pre"), ("distill", "dis"), ("finetune", "fin")):
            assert (root / d / f"{stage}_log.jsonl").exists() and (root / d / "checkpoint.bin").exists()

        code, res, _ = run(capsys, "eval", "--config", cfg, "--data", data, "--checkpoint", root / "fin",
                           "--seed", 3, "--out", root / "ev")
        assert code == 0 and res["success"] == fin["success"] and res["value"] == fin["value"]

        # re-run pre-training from its own resolved-config snapshot
        code, again, _ = run(capsys, "pretrain", "--config", root / "pre" / cli.SNAPSHOT, "--out", root / "pre2")
        assert code == 0
        first = json.loads((root / "pre" / "metrics.json").read_text())
        second = json.loads((root / "pre2" / "metrics.json").read_text())
        assert first == second
        assert (root / "pre" / "checkpoint.bin").read_bytes() == (root / "pre2" / "checkpoint.bin").read_bytes()


class TestSweep:
    def test_ten_rows_and_export(self, dataset, tmp_path, capsys):
        root, _ = dataset
        cfg = write_config(tmp_path / "s.json", variants=["LAPO", "LAOF"], action_ratios=[0.0], seeds=[0, 1, 2, 3, 4])
        code, res, _ = run(capsys, "sweep", "--config", cfg, "--data", root / "data", "--out", tmp_path / "sw")
        assert code == 0 and res["rows"] == 10
        with open(tmp_path / "sw" / "table.csv") as fh:
            table = list(csv.DictReader(fh))
        assert len(table) == 10 and {r["variant"] for r in table} == {"LAPO", "LAOF"}
        summary = json.loads((tmp_path / "sw" / "summary.json").read_text())
        assert {c["variant"]: c["n"] for c in summary} == {"LAPO": 5, "LAOF": 5}

        before = (tmp_path / "sw" / "table.csv").read_text()
        (tmp_path / "sw" / "table.csv").unlink()
        code, res, _ = run(capsys, "export", "--out", tmp_path / "sw")
        assert code == 0 and res["cells"] == 2
        assert (tmp_path / "sw" / "table.csv").read_text() == before

    def test_pool_matches_serial(self, dataset, tmp_path, capsys):
        root, _ = dataset
        cfg = write_config(tmp_path / "s.json", variants=["LAPO", "LAOF"], seeds=[0, 1])
        outs = []
        for workers, d in ((1, "a"), (2, "b")):
            code, _, _ = run(capsys, "sweep", "--config", cfg, "--data", root / "data",
                             "--out", tmp_path / d, "--workers", workers)
            assert code == 0
            rows = [json.loads(line) for line in (tmp_path / d / "rows.jsonl").read_text().splitlines()]
            outs.append([{k: v for k, v in r.items() if k != "wall_clock"} for r in rows])
        assert outs[0] == outs[1]
