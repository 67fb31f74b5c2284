from __future__ import annotations

import json

import numpy as np
import pytest
import yaml

from split_ensemble import harness
from split_ensemble.cli import main
from split_ensemble.config import (ConfigError, ExperimentConfig, apply_overrides, load_config,
                                   parse_config)


def tiny_raw(**extra) -> dict:
    raw = {
        "name": "tiny",
        "dataset": {
            "kind": "blobs",
            "blobs": {"n_classes": 4, "per_class": 16, "size": 8, "test_per_class": 6,
                      "ood_count": 12},
            "ood": [{"name": "holdout", "kind": "blob_holdout"},
                    {"name": "gauss", "kind": "gaussian", "count": 10}],
        },
        "backbone": {"blocks": [{"kind": "conv", "out": 4}, {"kind": "pool"},
                                {"kind": "conv", "out": 6}]},
        "split": {"n_splits": 2},
        "train": {"epochs": 2, "warmup_epochs": 1, "batch_size": 16, "prune_interval": 1,
                  "arch_until": 1.0, "mct_threshold": 0.9, "sensitivity_batch_size": 16},
    }
    raw.update(extra)
    return raw


class TestConfig:
    def test_yaml_round_trip(self):
        cfg = parse_config(tiny_raw())
        again = parse_config(yaml.safe_load(cfg.to_yaml()))
        assert again == cfg
        assert parse_config({}) == ExperimentConfig()

    def test_errors_name_every_key(self):
        raw = tiny_raw(baseline="bagging")
        raw["train"]["epochs"] = 0
        raw["dataset"]["kind"] = "mnist"
        raw["bogus"] = 1
        with pytest.raises(ConfigError) as err:
            parse_config(raw)
        for key in ("baseline", "dataset.kind", "bogus"):
            assert key in err.value.problems
        assert any(k.startswith("train") for k in err.value.problems)
        assert str(err.value).count("\n") >= 3

    def test_split_needs_two_subtasks(self):
        with pytest.raises(ConfigError, match="n_splits"):
            parse_config(tiny_raw(split={"n_splits": 1}))

    def test_overrides(self):
        raw = apply_overrides(tiny_raw(), ["train.epochs=7", "split.groups=[[0, 1], [2, 3]]",
                                           "eval.tpr=0.9"])
        cfg = parse_config(raw)
        assert cfg.train.epochs == 7 and cfg.eval.tpr == 0.9
        assert cfg.split.groups == [[0, 1], [2, 3]]
        with pytest.raises(ValueError):
            apply_overrides({}, ["no-equals-sign"])

    def test_output_dir_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv("SPLIT_ENSEMBLE_OUTPUT", str(tmp_path))
        assert ExperimentConfig(name="x").resolved_output_dir() == tmp_path / "x"


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    harness.cmd_train(parse_config(tiny_raw()), out)
    return out


class TestRun:
    def test_artifacts(self, run_dir):
        for name in ("config.yaml", "events.jsonl", "model.pt", "architecture.json",
                     "architecture.dot", "summary.json"):
            assert (run_dir / name).is_file(), name
        summary = json.loads((run_dir / "summary.json").read_text())
        assert summary["flops"][0] <= summary["budget"]
        assert load_config(run_dir / "config.yaml") == parse_config(tiny_raw())

    def test_eval_rows_and_mean(self, run_dir, tmp_path):
        rows = harness.cmd_eval(run_dir, out_dir=tmp_path)
        assert [r.ood_set for r in rows] == ["holdout", "gauss", "mean"]
        assert rows[-1].report.auroc == pytest.approx(np.mean([r.report.auroc for r in rows[:2]]))
        assert (tmp_path / "metrics.csv").read_text().splitlines()[0].startswith("ood_set,")
        harness.cmd_eval(run_dir, out_dir=tmp_path / "again")
        for name in ("metrics.csv", "metrics.json"):
            assert (tmp_path / name).read_bytes() == (tmp_path / "again" / name).read_bytes()

    def test_failing_ood_set_is_reported_per_row(self, run_dir, tmp_path):
        raw = tiny_raw()
        raw["dataset"]["ood"].append({"name": "broken", "kind": "npz",
                                      "path": str(tmp_path / "missing.npz")})
        rows = harness.cmd_eval(run_dir, parse_config(raw), tmp_path)
        by = {r.ood_set: r for r in rows}
        assert by["broken"].report is None and "missing.npz" in by["broken"].error
        assert by["holdout"].report is not None and by["mean"].report is not None

    def test_accuracy_only_without_ood(self, run_dir, tmp_path):
        raw = tiny_raw()
        raw["dataset"]["ood"] = []
        rows = harness.cmd_eval(run_dir, parse_config(raw), tmp_path)
        assert len(rows) == 1 and rows[0].ood_set == "id"
        assert rows[0].report.auroc is None and 0.0 <= rows[0].report.accuracy <= 1.0

    def test_mean_row_when_everything_fails(self, run_dir, tmp_path):
        raw = tiny_raw()
        raw["dataset"]["ood"] = [{"name": "broken", "kind": "image_dir",
                                  "path": str(tmp_path / "nowhere")}]
        rows = harness.cmd_eval(run_dir, parse_config(raw), tmp_path)
        assert [r.ood_set for r in rows] == ["broken", "mean"]
        assert rows[-1].report is None and "no OOD set" in rows[-1].error


def test_naive_ensemble_members(tmp_path):
    cfg = parse_config(tiny_raw(baseline="naive_ensemble", n_members=2))
    run = harness.cmd_train(cfg, tmp_path)
    assert [p.name for p in harness.checkpoint_paths(tmp_path)] == ["member_0.pt", "member_1.pt"]
    assert all(not h.splits and not h.prunes for h in run.histories)
    a, b = (m.state_dict() for m in run.models)
    assert any(not np.array_equal(a[k].numpy(), b[k].numpy()) for k in a)
    rows = harness.cmd_eval(tmp_path)
    assert rows[-1].ood_set == "mean"


class TestCLI:
    def test_train_eval_export_gen(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.yaml"
        cfg_path.write_text(yaml.safe_dump(tiny_raw()))
        run = tmp_path / "run"
        assert main(["train", "-c", str(cfg_path), "--set", "train.epochs=1", "-o", str(run)]) == 0
        assert load_config(run / "config.yaml").train.epochs == 1
        assert main(["eval", str(run)]) == 0
        assert capsys.readouterr().out.count("\n") >= 4
        assert main(["export-arch", str(run / "model.pt"), "-o", str(tmp_path / "arch")]) == 0
        desc = json.loads((tmp_path / "arch.json").read_text())
        assert desc["schema"] == "split-ensemble-arch/1"
        assert main(["gen-ood", "uniform", str(tmp_path / "u.npz"), "--shape", "1,8,8",
                     "--count", "5", "--seed", "3"]) == 0
        x = np.load(tmp_path / "u.npz")["x"]
        assert x.shape == (5, 1, 8, 8)

    def test_bad_config_exit_code(self, tmp_path, capsys):
        assert main(["train", "--set", "train.epochs=0", "-o", str(tmp_path)]) == 2
        assert "train.epochs" in capsys.readouterr().err

    def test_missing_checkpoint_exit_code(self, tmp_path):
        assert main(["export-arch", str(tmp_path / "none.pt")]) == 1

    def test_ablate_with_failing_cell(self, tmp_path):
        grid = {"base": tiny_raw(), "axes": {"train.ood_target_mode": ["ood_aware", "bogus"]},
                "seeds": [0]}
        grid["base"]["train"]["epochs"] = 1
        grid_path = tmp_path / "grid.yaml"
        grid_path.write_text(yaml.safe_dump(grid))
        code = main(["ablate", str(grid_path), "-o", str(tmp_path / "abl")])
        table = json.loads((tmp_path / "abl" / "ablation.json").read_text())
        by = {r["cell"]["train.ood_target_mode"]: r for r in table}
        assert by["ood_aware"]["n_ok"] == 1 and by["bogus"]["n_failed"] == 1
        assert code == 1
        assert (tmp_path / "abl" / "ablation.csv").read_text().count("\n") == 3

    def test_ablate_rejects_bad_grid(self):
        with pytest.raises(ConfigError):
            harness.cmd_ablate({"axes": [1, 2]})
