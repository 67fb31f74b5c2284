"""Tree-structured split-ensemble network.

The network is a tree of nodes.  Each node holds a sequence of layers
(blocks); the root is shared by every submodel, and each submodel follows one
root-to-leaf path before its own linear head.  Shared nodes are evaluated once
per forward pass.

Channel bookkeeping works on *channel spaces*: every tensor edge whose channel
axis must agree (a conv output and all its consumers, or every producer tied
together by an identity residual) gets one space id.  Pruning removes an index
from a space; FLOPs can be evaluated for hypothetical space sizes.
"""

from __future__ import annotations

import copy
import json
from collections import Counter
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

ARCH_SCHEMA = "split-ensemble-arch/1"
INPUT_SPACE = "input"


# ---------------------------------------------------------------- units ----

def _narrow(module: nn.Module, name: str, index: torch.Tensor, dim: int, optimizer=None) -> None:
    """Keep ``index`` along ``dim`` of a parameter or buffer.

    Parameters are replaced by new objects (autograd caches leaf shapes), and
    the optimizer's references and momentum buffers follow them.
    """
    old = getattr(module, name)
    data = old.data.index_select(dim, index).contiguous()
    if not isinstance(old, nn.Parameter):
        setattr(module, name, data)
        return
    new = nn.Parameter(data, requires_grad=old.requires_grad)
    setattr(module, name, new)
    if optimizer is None:
        return
    for group in optimizer.param_groups:
        group["params"] = [new if p is old else p for p in group["params"]]
    state = optimizer.state.pop(old, None)
    if state:
        buf = state.get("momentum_buffer")
        if buf is not None:
            state["momentum_buffer"] = buf.index_select(dim, index).contiguous()
        optimizer.state[new] = state


class ConvUnit(nn.Module):
    """Conv2d followed by optional BatchNorm; one output filter = one structure."""

    def __init__(self, cin: int, cout: int, kernel_size: int = 3, stride: int = 1,
                 norm: bool = True):
        super().__init__()
        self.kernel_size, self.stride = kernel_size, stride
        self.conv = nn.Conv2d(cin, cout, kernel_size, stride, padding=kernel_size // 2,
                              bias=not norm)
        self.bn = nn.BatchNorm2d(cout) if norm else None

    @property
    def in_channels(self):
        return self.conv.in_channels

    @property
    def out_channels(self):
        return self.conv.out_channels

    def forward(self, x):
        x = self.conv(x)
        return self.bn(x) if self.bn is not None else x

    def spatial_out(self, hw):
        p, k, s = self.kernel_size // 2, self.kernel_size, self.stride
        return tuple((d + 2 * p - k) // s + 1 for d in hw)

    def flops(self, hw, cin, cout) -> int:
        ho, wo = self.spatial_out(hw)
        return 2 * self.kernel_size ** 2 * cin * cout * ho * wo

    def sensitivity_weights(self):
        return [self.conv.weight]

    def filter_params(self):
        ps = [self.conv.weight]
        if self.conv.bias is not None:
            ps.append(self.conv.bias)
        if self.bn is not None:
            ps += [self.bn.weight, self.bn.bias]
        return ps

    def filter_dot(self, grads: dict) -> torch.Tensor:
        """Per output filter sum of ``w * dL/dw`` over all of the filter's parameters."""
        total = torch.zeros(self.out_channels, dtype=self.conv.weight.dtype)
        for p in self.filter_params():
            g = grads.get(p)
            if g is not None:
                total = total + (p.detach() * g).reshape(p.shape[0], -1).sum(1)
        return total

    def prune_out(self, keep, optimizer=None):
        _narrow(self.conv, "weight", keep, 0, optimizer)
        if self.conv.bias is not None:
            _narrow(self.conv, "bias", keep, 0, optimizer)
        self.conv.out_channels = len(keep)
        if self.bn is not None:
            for name in ("weight", "bias", "running_mean", "running_var"):
                _narrow(self.bn, name, keep, 0, optimizer)
            self.bn.num_features = len(keep)

    def prune_in(self, keep, optimizer=None):
        _narrow(self.conv, "weight", keep, 1, optimizer)
        self.conv.in_channels = len(keep)

    def zero_filters(self, idx):
        with torch.no_grad():
            for p in self.filter_params():
                p[idx] = 0


class LinearUnit(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.fc = nn.Linear(cin, cout)

    @property
    def in_channels(self):
        return self.fc.in_features

    @property
    def out_channels(self):
        return self.fc.out_features

    def forward(self, x):
        return self.fc(x)

    def flops(self, hw, cin, cout) -> int:
        return 2 * cin * cout

    def sensitivity_weights(self):
        return [self.fc.weight]

    def filter_params(self):
        return [self.fc.weight, self.fc.bias]

    def filter_dot(self, grads: dict) -> torch.Tensor:
        total = torch.zeros(self.out_channels, dtype=self.fc.weight.dtype)
        for p in self.filter_params():
            g = grads.get(p)
            if g is not None:
                total = total + (p.detach() * g).reshape(p.shape[0], -1).sum(1)
        return total

    def prune_out(self, keep, optimizer=None):
        _narrow(self.fc, "weight", keep, 0, optimizer)
        _narrow(self.fc, "bias", keep, 0, optimizer)
        self.fc.out_features = len(keep)

    def prune_in(self, keep, optimizer=None):
        _narrow(self.fc, "weight", keep, 1, optimizer)
        self.fc.in_features = len(keep)

    def zero_filters(self, idx):
        with torch.no_grad():
            self.fc.weight[idx] = 0
            self.fc.bias[idx] = 0


# --------------------------------------------------------------- layers ----

@dataclass
class LayerSpec:
    """Declarative description of one block.

    ``kind`` is one of ``conv`` (conv + norm + ReLU), ``res`` (basic residual
    block), ``pool`` (2x2 max pool), ``gap`` (global average pool to a
    vector) or ``linear`` (fully connected + ReLU).
    """

    kind: str
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    mid_channels: int | None = None
    projection: bool | None = None
    norm: bool = True
    activation: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class Layer(nn.Module):
    kind = ""
    # when True the output channel space is the input space (identity skip or
    # channel-preserving op)
    passthrough = False

    def wiring(self) -> list[tuple[nn.Module, str, str]]:
        """``(unit, in_key, out_key)`` with keys ``in``, ``out`` or ``mid``."""
        return []

    def spatial_out(self, hw):
        return hw

    def flops(self, hw, sizes: dict) -> int:
        return 0

    def sensitivity_weights(self) -> list[torch.Tensor]:
        return [w for unit, _, _ in self.wiring() for w in unit.sensitivity_weights()]


class ConvLayer(Layer):
    kind = "conv"

    def __init__(self, cin, cout, kernel_size=3, stride=1, norm=True, activation=True):
        super().__init__()
        self.unit = ConvUnit(cin, cout, kernel_size, stride, norm)
        self.activation = activation

    def forward(self, x):
        x = self.unit(x)
        return F.relu(x) if self.activation else x

    def wiring(self):
        return [(self.unit, "in", "out")]

    def spatial_out(self, hw):
        return self.unit.spatial_out(hw)

    def flops(self, hw, sizes):
        return self.unit.flops(hw, sizes["in"], sizes["out"])

    def spec(self):
        u = self.unit
        return LayerSpec("conv", u.in_channels, u.out_channels, u.kernel_size, u.stride,
                         norm=u.bn is not None, activation=self.activation)


class ResLayer(Layer):
    """Basic residual block ``relu(bn(conv(relu(bn(conv(x))))) + shortcut(x))``."""

    kind = "res"

    def __init__(self, cin, cout, stride=1, mid=None, projection=None, kernel_size=3):
        super().__init__()
        mid = cout if mid is None else mid
        if projection is None:
            projection = stride != 1 or cin != cout
        self.conv1 = ConvUnit(cin, mid, kernel_size, stride)
        self.conv2 = ConvUnit(mid, cout, kernel_size, 1)
        self.proj = ConvUnit(cin, cout, 1, stride) if projection else None
        self.passthrough = not projection

    def forward(self, x):
        h = self.conv2(F.relu(self.conv1(x)))
        return F.relu(h + (self.proj(x) if self.proj is not None else x))

    def wiring(self):
        w = [(self.conv1, "in", "mid"), (self.conv2, "mid", "out")]
        if self.proj is not None:
            w.append((self.proj, "in", "out"))
        return w

    def spatial_out(self, hw):
        return self.conv2.spatial_out(self.conv1.spatial_out(hw))

    def flops(self, hw, sizes):
        total = self.conv1.flops(hw, sizes["in"], sizes["mid"])
        total += self.conv2.flops(self.conv1.spatial_out(hw), sizes["mid"], sizes["out"])
        if self.proj is not None:
            total += self.proj.flops(hw, sizes["in"], sizes["out"])
        return total

    def spec(self):
        return LayerSpec("res", self.conv1.in_channels, self.conv2.out_channels,
                         self.conv1.kernel_size, self.conv1.stride,
                         mid_channels=self.conv1.out_channels,
                         projection=self.proj is not None)


class PoolLayer(Layer):
    kind = "pool"
    passthrough = True

    def __init__(self, channels):
        super().__init__()
        self.channels = channels

    def forward(self, x):
        return F.max_pool2d(x, 2)

    def spatial_out(self, hw):
        return tuple(d // 2 for d in hw)

    def spec(self):
        return LayerSpec("pool", self.channels, self.channels, 2, 2)


class GAPLayer(Layer):
    kind = "gap"
    passthrough = True

    def __init__(self, channels):
        super().__init__()
        self.channels = channels

    def forward(self, x):
        return x.mean(dim=(2, 3))

    def spatial_out(self, hw):
        return None

    def spec(self):
        return LayerSpec("gap", self.channels, self.channels)


class LinearLayer(Layer):
    kind = "linear"

    def __init__(self, cin, cout, activation=True):
        super().__init__()
        self.unit = LinearUnit(cin, cout)
        self.activation = activation

    def forward(self, x):
        x = self.unit(x)
        return F.relu(x) if self.activation else x

    def wiring(self):
        return [(self.unit, "in", "out")]

    def flops(self, hw, sizes):
        return self.unit.flops(hw, sizes["in"], sizes["out"])

    def spec(self):
        return LayerSpec("linear", self.unit.in_channels, self.unit.out_channels,
                         activation=self.activation)


def build_layer(spec: LayerSpec) -> Layer:
    if spec.kind == "conv":
        return ConvLayer(spec.in_channels, spec.out_channels, spec.kernel_size,
                         spec.stride, spec.norm, spec.activation)
    if spec.kind == "res":
        return ResLayer(spec.in_channels, spec.out_channels, spec.stride,
                        spec.mid_channels, spec.projection, spec.kernel_size)
    if spec.kind == "pool":
        return PoolLayer(spec.in_channels)
    if spec.kind == "gap":
        return GAPLayer(spec.in_channels)
    if spec.kind == "linear":
        return LinearLayer(spec.in_channels, spec.out_channels, spec.activation)
    raise ValueError(f"unknown layer kind {spec.kind!r}")


def build_backbone(blocks: Sequence[dict], in_channels: int) -> list[LayerSpec]:
    """Turn a compact block list into ``LayerSpec``s, inferring in-channels.

    Each block is a dict such as ``{"kind": "conv", "out": 16}``,
    ``{"kind": "res", "out": 32, "stride": 2}``, ``{"kind": "pool"}``.
    """
    specs, c = [], in_channels
    for i, b in enumerate(blocks):
        kind = b["kind"]
        if kind in ("pool", "gap"):
            specs.append(LayerSpec(kind, c, c))
            continue
        if "out" not in b:
            raise ValueError(f"block {i} ({kind}) needs 'out'")
        out = int(b["out"])
        specs.append(LayerSpec(kind, c, out, kernel_size=b.get("kernel", 3),
                               stride=b.get("stride", 1), mid_channels=b.get("mid"),
                               projection=b.get("projection"),
                               norm=b.get("norm", True), activation=b.get("activation", True)))
        c = out
    return specs


def resnet18_blocks(width: int = 64) -> list[dict]:
    """CIFAR-style ResNet-18 body (3x3 stem, four stages of two basic blocks)."""
    blocks = [{"kind": "conv", "out": width}]
    for stage, mult in enumerate((1, 2, 4, 8)):
        for j in range(2):
            stride = 2 if stage > 0 and j == 0 else 1
            blocks.append({"kind": "res", "out": width * mult, "stride": stride})
    return blocks


# ----------------------------------------------------------------- tree ----

class Head(nn.Module):
    """Per-submodel classifier: global average pool (for feature maps) + linear."""

    def __init__(self, cin, width):
        super().__init__()
        self.unit = LinearUnit(cin, width)

    def forward(self, x):
        if x.dim() == 4:
            x = x.mean(dim=(2, 3))
        return self.unit(x)


class TreeNode(nn.Module):
    def __init__(self, node_id: int, layers: Iterable[Layer], parent: int | None,
                 submodels: Iterable[int]):
        super().__init__()
        self.node_id = node_id
        self.layers = nn.ModuleList(layers)
        self.parent = parent
        self.child_ids: list[int] = []
        self.submodels = tuple(sorted(submodels))

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


@dataclass
class ChannelSpace:
    space_id: str
    order: int
    size: int
    producers: list = None
    consumers: list = None
    submodels: tuple = ()

    @property
    def prunable(self) -> bool:
        return self.space_id != INPUT_SPACE and bool(self.producers)


class TreeModel(nn.Module):
    """Split-ensemble network; see module docstring."""

    def __init__(self, backbone: Sequence[LayerSpec], head_widths: Sequence[int],
                 input_shape: Sequence[int]):
        super().__init__()
        if not backbone:
            raise ValueError("backbone must contain at least one layer")
        if not head_widths:
            raise ValueError("at least one head is required")
        self.input_shape = tuple(int(d) for d in input_shape)
        if backbone[0].in_channels != self.input_shape[0]:
            raise ValueError(f"first layer expects {backbone[0].in_channels} channels, "
                             f"input has {self.input_shape[0]}")
        self.head_widths = tuple(int(w) for w in head_widths)
        self.root = 0
        self._next_id = 1
        subs = range(len(self.head_widths))
        self.nodes = nn.ModuleDict({"0": TreeNode(0, [build_layer(s) for s in backbone], None, subs)})
        cout = backbone[-1].out_channels
        self.heads = nn.ModuleList(Head(cout, w) for w in self.head_widths)
        self.eval_counts: Counter = Counter()
        self.check_channels()

    # -- structure ---------------------------------------------------------

    @property
    def n_submodels(self) -> int:
        return len(self.head_widths)

    def node(self, node_id: int) -> TreeNode:
        return self.nodes[str(node_id)]

    def node_ids(self) -> list[int]:
        """Node ids in depth-first (root-first) order."""
        out, stack = [], [self.root]
        while stack:
            nid = stack.pop()
            out.append(nid)
            stack.extend(reversed(self.node(nid).child_ids))
        return out

    def path(self, submodel: int) -> list[int]:
        if not 0 <= submodel < self.n_submodels:
            raise IndexError(f"submodel {submodel} out of range")
        nid, out = self.root, [self.root]
        while self.node(nid).child_ids:
            nid = next(c for c in self.node(nid).child_ids if submodel in self.node(c).submodels)
            out.append(nid)
        return out

    def leaf_of(self, submodel: int) -> int:
        return self.path(submodel)[-1]

    def leaves(self) -> list[int]:
        return [n for n in self.node_ids() if not self.node(n).child_ids]

    def all_private(self) -> bool:
        """True once every submodel ends in its own leaf branch."""
        return all(len(self.node(n).submodels) == 1 for n in self.leaves())

    def layer_ids(self) -> list[tuple[int, int]]:
        return [(n, i) for n in self.node_ids() for i in range(len(self.node(n).layers))]

    def layer(self, layer_id: tuple[int, int]) -> Layer:
        nid, idx = layer_id
        return self.node(nid).layers[idx]

    def layer_depth(self, layer_id: tuple[int, int]) -> int:
        nid, idx = layer_id
        depth, p = idx, self.node(nid).parent
        while p is not None:
            depth += len(self.node(p).layers)
            p = self.node(p).parent
        return depth

    # -- forward -----------------------------------------------------------

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"input shape {tuple(x.shape[1:])} does not match "
                             f"model input {self.input_shape}")
        out: list = [None] * self.n_submodels
        self._forward_node(self.root, x, out)
        return out

    def _forward_node(self, nid, x, out):
        node = self.node(nid)
        self.eval_counts[nid] += 1
        h = node(x)
        if node.child_ids:
            for c in node.child_ids:
                self._forward_node(c, h, out)
        else:
            for s in node.submodels:
                out[s] = self.heads[s](h)

    # -- surgery -----------------------------------------------------------

    def split_at(self, node_id: int, layer_index: int, partition, optimizer=None) -> "TreeModel":
        """Duplicate layers ``layer_index:`` of a node into two child branches.

        ``partition`` is ``(S, T)``: submodels in ``S`` keep the original
        parameters, those in ``T`` get an exact copy (with copied optimizer
        state when ``optimizer`` is given).  Mutates in place and returns self.
        """
        node = self.node(node_id)
        s, t = (frozenset(int(v) for v in side) for side in partition)
        if not s or not t:
            raise ValueError("both sides of the partition must be nonempty")
        if s & t or (s | t) != set(node.submodels):
            raise ValueError(f"partition {sorted(s)}/{sorted(t)} does not split "
                             f"node submodels {list(node.submodels)}")
        if not 0 <= layer_index < len(node.layers):
            raise ValueError(f"layer_index {layer_index} outside node with "
                             f"{len(node.layers)} layers")
        for c in node.child_ids:
            cs = set(self.node(c).submodels)
            if not (cs <= s or cs <= t):
                raise ValueError(f"child {c} straddles the partition")
        tail = list(node.layers[layer_index:])
        twin = copy.deepcopy(tail)
        if optimizer is not None:
            for p_old, p_new in zip(nn.ModuleList(tail).parameters(),
                                    nn.ModuleList(twin).parameters()):
                st = optimizer.state.get(p_old)
                if st:
                    optimizer.state[p_new] = {k: v.clone() if torch.is_tensor(v) else v
                                              for k, v in st.items()}
        node.layers = nn.ModuleList(list(node.layers[:layer_index]))
        old_children = node.child_ids
        new_ids = []
        for side, layers in ((s, tail), (t, twin)):
            nid = self._next_id
            self._next_id += 1
            child = TreeNode(nid, layers, node_id, side)
            child.child_ids = [c for c in old_children if set(self.node(c).submodels) <= side]
            for c in child.child_ids:
                self.node(c).parent = nid
            self.nodes[str(nid)] = child
            new_ids.append(nid)
        node.child_ids = new_ids
        self.check_channels()
        return self

    # -- channel spaces ----------------------------------------------------

    def channel_spaces(self) -> dict[str, ChannelSpace]:
        spaces: dict[str, ChannelSpace] = {}
        node_of_unit: dict[int, int] = {}

        def get(sid, size):
            if sid not in spaces:
                spaces[sid] = ChannelSpace(sid, len(spaces), size, [], [])
            return spaces[sid]

        get(INPUT_SPACE, self.input_shape[0])

        def visit(nid, cur):
            node = self.node(nid)
            for li, layer in enumerate(node.layers):
                keys = {"in": cur, "mid": f"{nid}.{li}.mid",
                        "out": cur if layer.passthrough else f"{nid}.{li}.out"}
                for unit, ki, ko in layer.wiring():
                    get(keys[ki], unit.in_channels).consumers.append(unit)
                    get(keys[ko], unit.out_channels).producers.append(unit)
                    node_of_unit[id(unit)] = nid
                if hasattr(layer, "channels"):
                    layer.channels = spaces[cur].size
                cur = keys["out"]
            if node.child_ids:
                for c in node.child_ids:
                    visit(c, cur)
            else:
                for sub in node.submodels:
                    spaces[cur].consumers.append(self.heads[sub].unit)

        visit(self.root, INPUT_SPACE)
        for sp in spaces.values():
            subs = set()
            for u in sp.producers:
                subs.update(self.node(node_of_unit[id(u)]).submodels)
            sp.submodels = tuple(sorted(subs))
        return spaces

    def check_channels(self) -> None:
        """Raise if any producer/consumer disagrees with its channel space size."""
        for sp in self.channel_spaces().values():
            for u in sp.producers:
                if u.out_channels != sp.size:
                    raise RuntimeError(f"space {sp.space_id}: producer has "
                                       f"{u.out_channels} channels, expected {sp.size}")
            for u in sp.consumers:
                if u.in_channels != sp.size:
                    raise RuntimeError(f"space {sp.space_id}: consumer has "
                                       f"{u.in_channels} channels, expected {sp.size}")

    # -- accounting --------------------------------------------------------

    def flops(self, input_shape: Sequence[int] | None = None,
              channel_sizes: dict[str, int] | None = None) -> int:
        """Multiply-add FLOPs (factor 2) of conv and linear units, each node once.

        ``channel_sizes`` optionally overrides space sizes to evaluate a
        hypothetical pruned model.
        """
        shape = tuple(input_shape) if input_shape is not None else self.input_shape
        sizes = {sid: sp.size for sid, sp in self.channel_spaces().items()}
        if channel_sizes:
            sizes.update(channel_sizes)
        total = 0

        def visit(nid, cur, hw):
            nonlocal total
            node = self.node(nid)
            for li, layer in enumerate(node.layers):
                keys = {"in": cur, "mid": f"{nid}.{li}.mid",
                        "out": cur if layer.passthrough else f"{nid}.{li}.out"}
                total += layer.flops(hw, {k: sizes.get(v, 0) for k, v in keys.items()})
                hw = layer.spatial_out(hw) if hw is not None else None
                cur = keys["out"]
            if node.child_ids:
                for c in node.child_ids:
                    visit(c, cur, hw)
            else:
                for sub in node.submodels:
                    total += 2 * sizes[cur] * self.head_widths[sub]

        visit(self.root, INPUT_SPACE, tuple(shape[1:]))
        return total

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # -- export ------------------------------------------------------------

    def describe(self) -> dict:
        nodes = []
        for nid in self.node_ids():
            n = self.node(nid)
            nodes.append({"id": nid, "parent": n.parent, "children": list(n.child_ids),
                          "submodels": list(n.submodels),
                          "layers": [layer.spec().to_dict() for layer in n.layers]})
        heads = [{"submodel": s, "width": w, "in_features": self.heads[s].unit.in_channels,
                  "leaf": self.leaf_of(s)} for s, w in enumerate(self.head_widths)]
        return {"schema": ARCH_SCHEMA, "input_shape": list(self.input_shape),
                "root": self.root, "next_id": self._next_id, "nodes": nodes, "heads": heads,
                "flops": self.flops(), "parameters": self.num_parameters()}

    def to_json(self, **kw) -> str:
        return json.dumps(self.describe(), **kw)

    def to_dot(self) -> str:
        lines = ["digraph split_ensemble {", "  rankdir=TB;", "  node [shape=box];"]
        for nid in self.node_ids():
            n = self.node(nid)
            rows = [f"{l.kind} {l.spec().out_channels}" for l in n.layers] or ["(empty)"]
            label = f"node {nid} | subs {list(n.submodels)}\\n" + "\\n".join(rows)
            lines.append(f'  n{nid} [label="{label}"];')
            if n.parent is not None:
                lines.append(f"  n{n.parent} -> n{nid};")
        for s, w in enumerate(self.head_widths):
            lines.append(f'  h{s} [shape=ellipse, label="head {s} ({w})"];')
            lines.append(f"  n{self.leaf_of(s)} -> h{s};")
        lines.append("}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_description(cls, desc: dict) -> "TreeModel":
        """Rebuild the topology and shapes of an exported model (weights not included)."""
        if desc.get("schema") != ARCH_SCHEMA:
            raise ValueError(f"unsupported architecture schema {desc.get('schema')!r}")
        by_id = {n["id"]: n for n in desc["nodes"]}
        root = by_id[desc["root"]]
        root_layers = [LayerSpec.from_dict(d) for d in root["layers"]]
        placeholder = root_layers or [LayerSpec("pool", desc["input_shape"][0],
                                                desc["input_shape"][0])]
        model = cls(placeholder, [h["width"] for h in desc["heads"]], desc["input_shape"])
        model.nodes = nn.ModuleDict()
        for n in desc["nodes"]:
            node = TreeNode(n["id"], [build_layer(LayerSpec.from_dict(d)) for d in n["layers"]],
                            n["parent"], n["submodels"])
            node.child_ids = list(n["children"])
            model.nodes[str(n["id"])] = node
        model.root = desc["root"]
        model._next_id = desc["next_id"]
        model.heads = nn.ModuleList(Head(h["in_features"], h["width"]) for h in desc["heads"])
        model.check_channels()
        return model


def init_shared(backbone: Sequence[LayerSpec], spec, input_shape: Sequence[int]) -> TreeModel:
    """All-shared tree: one trunk node carrying every layer, one head per subtask."""
    return TreeModel(backbone, spec.head_widths, input_shape)


def split_at(model: TreeModel, node_id: int, layer_index: int, partition,
             optimizer=None) -> TreeModel:
    return model.split_at(node_id, layer_index, partition, optimizer)


def flops(model: TreeModel, input_shape=None) -> int:
    return model.flops(input_shape)
