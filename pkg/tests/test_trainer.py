from __future__ import annotations

import math

import pytest
import torch

import split_ensemble.trainer as trainer_mod
from split_ensemble.data import make_blobs
from split_ensemble.pruning import ImportanceScore
from split_ensemble.task_split import SubtaskSpec
from split_ensemble.tree_model import build_backbone, init_shared
from split_ensemble.trainer import (CheckpointError, TrainConfig, TrainingDiverged,
                                    learning_rate, load_checkpoint, save_checkpoint, train)

SPEC = SubtaskSpec(4, ((0, 1), (2, 3)), per_class_count=24)
BLOCKS = [{"kind": "conv", "out": 4}, {"kind": "conv", "out": 4}, {"kind": "pool"},
          {"kind": "conv", "out": 8}]


@pytest.fixture(scope="module")
def data():
    d = make_blobs(4, 24, 8, test_per_class=4, holdout_classes=0, seed=3)
    return torch.as_tensor(d.train[0]), torch.as_tensor(d.train[1])


def fresh_model(seed=0):
    torch.manual_seed(seed)
    return init_shared(build_backbone(BLOCKS, 1), SPEC, (1, 8, 8))


def config(**kw):
    base = dict(epochs=4, warmup_epochs=1, lr=0.05, batch_size=16, prune_interval=1,
                arch_until=1.0, sensitivity_batch_size=32, beta=0.99)
    base.update(kw)
    return TrainConfig(**base)


def test_schedule():
    cfg = TrainConfig(epochs=10, warmup_epochs=2, lr=1.0)
    assert [learning_rate(cfg, e) for e in (0, 1)] == [0.5, 1.0]
    assert learning_rate(cfg, 2) == 1.0
    assert learning_rate(cfg, 6) == pytest.approx(0.5 * (1 + math.cos(math.pi * 4 / 8)))


def test_arch_epochs():
    cfg = TrainConfig(epochs=30, warmup_epochs=3, prune_interval=3, arch_until=0.7)
    assert cfg.arch_epochs() == [3, 6, 9, 12, 15, 18, 21]


def test_config_validation():
    with pytest.raises(ValueError, match="prune_interval"):
        TrainConfig(prune_interval=0)
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"epochs": 1, "bogus": 2})


def test_zero_threshold_never_splits_and_budget_met_never_prunes(data):
    model, hist = train(fresh_model(), SPEC, data, config(mct_threshold=0.0))
    assert hist.splits == [] and hist.prunes == []
    assert model.node_ids() == [0]
    assert len(hist.epochs) == 4


def test_architecture_changes_only_at_arch_epochs(data, tmp_path):
    model = fresh_model()
    budget = int(0.6 * model.flops())
    cfg = config(epochs=6, prune_interval=2, arch_until=0.7, mct_threshold=0.99,
                 flops_budget=budget)
    model, hist = train(model, SPEC, data, cfg, event_log=tmp_path / "ev.jsonl")
    assert hist.splits, "threshold 0.99 should split"
    assert {e["epoch"] for e in hist.events()} <= set(cfg.arch_epochs()) == {2, 4}
    trajectory = [p["flops_after"] for p in hist.prunes]
    assert trajectory == sorted(trajectory, reverse=True)
    assert all(p["flops_after"] < p["flops_before"] for p in hist.prunes)
    assert model.flops() <= budget
    lines = (tmp_path / "ev.jsonl").read_text().splitlines()
    assert len(lines) == len(hist.epochs) + len(hist.events())


def test_escalates_n_remove_on_empty_intersection(data, monkeypatch):
    def crafted(model, batch, loss):
        out = []
        spaces = [sid for sid, sp in model.channel_spaces().items() if sp.prunable]
        for si, sid in enumerate(spaces):
            for j in range(model.channel_spaces()[sid].size):
                out.append(ImportanceScore((sid, j), 0, 10.0 * si + j))
                swapped = {0: 1, 1: 0}.get(j, j) if si == 0 else j
                out.append(ImportanceScore((sid, j), 1, 10.0 * si + swapped))
        return out

    monkeypatch.setattr(trainer_mod, "all_importances", crafted)
    model = fresh_model()
    cfg = config(epochs=1, mct_threshold=0.0, n_remove=1, flops_budget=model.flops() - 1)
    _, hist = train(model, SPEC, data, cfg)
    assert hist.prunes[0]["n_remove"] == 2 and hist.prunes[0]["removed"] == 2


def test_divergence_raises(data):
    with pytest.raises(TrainingDiverged, match="epoch 1"):
        train(fresh_model(), SPEC, data, config(lr=1e30, mct_threshold=0.0))


def test_rejects_bad_labels(data):
    x, y = data
    with pytest.raises(ValueError, match="labels"):
        train(fresh_model(), SPEC, (x, y + 10), config())


def test_deterministic(data):
    cfg = config(mct_threshold=0.99, flops_budget=int(0.7 * fresh_model().flops()))
    a, ha = train(fresh_model(), SPEC, data, cfg)
    b, hb = train(fresh_model(), SPEC, data, cfg)
    assert ha.to_dict() == hb.to_dict()
    assert a.describe() == b.describe()
    for k, v in a.state_dict().items():
        assert torch.equal(v, b.state_dict()[k])


class TestCheckpoint:
    def test_round_trip(self, data, tmp_path):
        cfg = config(epochs=2, mct_threshold=0.99, flops_budget=int(0.8 * fresh_model().flops()))
        model, hist = train(fresh_model(), SPEC, data, cfg)
        path = save_checkpoint(tmp_path / "m.pt", model, SPEC, None, hist, cfg, 2)
        state = load_checkpoint(path, SPEC)
        assert state.model.describe() == model.describe()
        assert state.history.to_dict() == hist.to_dict() and state.epoch == 2
        model.eval()
        state.model.eval()
        x = data[0][:10]
        with torch.no_grad():
            pairs = list(zip(model(x), state.model(x)))
        for a, b in pairs:
            assert float((a - b).abs().max()) <= 1e-6 * max(1.0, float(a.abs().max()))

    def test_spec_mismatch(self, tmp_path):
        path = save_checkpoint(tmp_path / "m.pt", fresh_model(), SPEC)
        with pytest.raises(ValueError, match="subtasks"):
            load_checkpoint(path, SubtaskSpec(4, ((0, 2), (1, 3))))

    def test_missing_and_corrupt(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "nope.pt")
        bad = tmp_path / "bad.pt"
        bad.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(bad)
        torch.save({"schema": "other"}, tmp_path / "other.pt")
        with pytest.raises(CheckpointError, match="is not"):
            load_checkpoint(tmp_path / "other.pt")

    def test_resume_matches_uninterrupted(self, data, tmp_path):
        cfg = config(epochs=4, mct_threshold=0.99, flops_budget=None)
        full, hfull = train(fresh_model(), SPEC, data, cfg)
        path = tmp_path / "run.pt"
        train(fresh_model(), SPEC, data, cfg, stop_after=2, checkpoint=path)
        state = load_checkpoint(path, SPEC)
        assert state.epoch == 2 and state.extra["budget"] == fresh_model().flops()
        resumed, hres = train(state.model, SPEC, data, cfg, state=state)
        assert hres.to_dict() == hfull.to_dict()
        for k, v in full.state_dict().items():
            assert torch.equal(v, resumed.state_dict()[k]), k
