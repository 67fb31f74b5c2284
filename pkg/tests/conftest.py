from __future__ import annotations

import numpy as np
import pytest
import torch

from split_ensemble.task_split import SplitEnsembleLoss, SubtaskSpec
from split_ensemble.tree_model import TreeModel, build_backbone

_CRITERIA: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> str:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    _CRITERIA[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[n])


SPEC4 = SubtaskSpec(6, ((0, 1), (2,), (3, 4), (5,)), per_class_count=10)


def random_blocks(rng: np.random.Generator) -> list[dict]:
    """Small conv stack, optionally with an identity residual and a pool."""
    blocks = [{"kind": "conv", "out": int(rng.integers(2, 5))}]
    if rng.random() < 0.5:
        blocks.append({"kind": "res", "out": blocks[-1]["out"]})
    if rng.random() < 0.5:
        blocks.append({"kind": "pool"})
    blocks.append({"kind": "conv", "out": int(rng.integers(2, 5))})
    if rng.random() < 0.5:
        blocks.append({"kind": "res", "out": int(rng.integers(2, 5)), "stride": 1})
    return blocks


def random_tree(rng: np.random.Generator, spec: SubtaskSpec = SPEC4, splits: int = 2,
                input_shape=(2, 6, 6), dtype=torch.float64) -> TreeModel:
    """Random tiny backbone with up to ``splits`` random split events applied."""
    torch.manual_seed(int(rng.integers(2**31)))
    model = TreeModel(build_backbone(random_blocks(rng), input_shape[0]), spec.head_widths,
                      input_shape).to(dtype)
    for _ in range(splits):
        random_split(model, rng)
    randomize_norm(model)
    return model


def random_split(model: TreeModel, rng: np.random.Generator):
    shared = [n for n in model.leaves()
              if len(model.node(n).submodels) >= 2 and len(model.node(n).layers)]
    if not shared:
        return None
    nid = shared[int(rng.integers(len(shared)))]
    subs = list(model.node(nid).submodels)
    rng.shuffle(subs)
    cut = int(rng.integers(1, len(subs)))
    layer_index = int(rng.integers(0, len(model.node(nid).layers)))
    partition = (sorted(subs[:cut]), sorted(subs[cut:]))
    model.split_at(nid, layer_index, partition)
    return nid, layer_index, partition


def randomize_norm(model: TreeModel) -> None:
    """Non-trivial running statistics and affine parameters for every BN layer."""
    gen = torch.Generator().manual_seed(0)
    for m in model.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            with torch.no_grad():
                c = m.num_features
                m.running_mean.copy_(torch.randn(c, generator=gen, dtype=torch.float64))
                m.running_var.copy_(torch.rand(c, generator=gen, dtype=torch.float64) + 0.5)
                m.weight.copy_(torch.randn(c, generator=gen, dtype=torch.float64))
                m.bias.copy_(torch.randn(c, generator=gen, dtype=torch.float64))


def random_batch(rng: np.random.Generator, n: int, spec: SubtaskSpec = SPEC4,
                 input_shape=(2, 6, 6), dtype=torch.float64):
    x = torch.as_tensor(rng.normal(size=(n, *input_shape)), dtype=dtype)
    y = torch.as_tensor(rng.integers(0, spec.total_classes, n), dtype=torch.long)
    return x, y


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def spec4():
    return SPEC4


@pytest.fixture
def loss4():
    return SplitEnsembleLoss(SPEC4, beta=0.99, lam=1e-4)


def central_difference(f, tensor: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Gradient of scalar ``f()`` w.r.t. ``tensor`` by central differences (in place)."""
    grad = torch.zeros_like(tensor)
    flat, gflat = tensor.data.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = float(f())
        flat[i] = old - h
        down = float(f())
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad
