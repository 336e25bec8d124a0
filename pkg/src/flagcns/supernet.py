"""Weight-sharing GCN SuperNet over the architecture space.

All parameters live in one flat float64 vector.  The flattening order is

    is_blocks[0..4]            each: W (F x H), b (H)
    slot 1..L, type 0..K-1     each: the type's blocks, see ``LAYER_TYPES``
    os_blocks[0..4]            each: W (H x C), b (C)

and every block is a numpy view into that vector, so two architectures that
pick the same (slot, type) read and write the same memory.  An architecture
touches exactly the blocks named by its genes on valid slots; its gradient
is zero everywhere else.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .graph import GraphBundle, GraphShard
from .space import IO_ACTIVATIONS, K_IO, ArchCode, SpaceConfig

APPNP_STEPS = 10
APPNP_ALPHA = 0.1
GAT_SLOPE = 0.2


@dataclass(frozen=True)
class LayerType:
    name: str
    blocks: Callable[[int], list]  # hidden -> [(name, shape, fan_in, fan_out)]
    forward: Callable


def _affine(h):
    return [("W", (h, h), h, h), ("b", (h,), 0, 0)]


def _gcn(p, x, g: GraphBundle):
    return T.add(T.spmm(g.norm_adj, T.matmul(x, p["W"])), p["b"])


def _sage(p, x, g):
    return T.add(T.matmul(T.concat([T.spmm(g.mean_adj, x), x]), p["W"]), p["b"])


def _sgc(p, x, g):
    z = T.matmul(x, p["W"])
    return T.add(T.spmm(g.norm_adj, T.spmm(g.norm_adj, z)), p["b"])


def _appnp(p, x, g):
    z = T.add(T.matmul(x, p["W"]), p["b"])
    out = z
    for _ in range(APPNP_STEPS):
        out = T.add(T.scale(T.spmm(g.norm_adj, out), 1.0 - APPNP_ALPHA), T.scale(z, APPNP_ALPHA))
    return out


def _gin(p, x, g):
    m = T.add(T.mul(x, T.add(p["eps"], T.Tensor(1.0))), T.spmm(g.adjacency, x))
    hidden = T.activation(T.add(T.matmul(m, p["W1"]), p["b1"]), "relu")
    return T.add(T.matmul(hidden, p["W2"]), p["b2"])


def _gat(p, x, g):
    src, dst = g.attention_edges
    z = T.matmul(x, p["W"])
    score = T.add(T.gather_rows(T.matmul(z, p["a_src"]), src), T.gather_rows(T.matmul(z, p["a_dst"]), dst))
    alpha = T.segment_softmax(T.leaky_relu(score, GAT_SLOPE), dst, g.num_nodes)
    msg = T.mul(T.gather_rows(z, src), alpha)
    return T.add(T.segment_sum(msg, dst, g.num_nodes), p["b"])


LAYER_TYPES = {
    "gcn": LayerType("gcn", _affine, _gcn),
    "sage": LayerType("sage", lambda h: [("W", (2 * h, h), 2 * h, h), ("b", (h,), 0, 0)], _sage),
    "sgc": LayerType("sgc", _affine, _sgc),
    "appnp": LayerType("appnp", _affine, _appnp),
    "gin": LayerType(
        "gin",
        lambda h: [("eps", (1,), 0, 0), ("W1", (h, h), h, h), ("b1", (h,), 0, 0),
                   ("W2", (h, h), h, h), ("b2", (h,), 0, 0)],
        _gin,
    ),
    "gat": LayerType(
        "gat",
        lambda h: [("W", (h, h), h, h), ("a_src", (h, 1), h, 1), ("a_dst", (h, 1), h, 1), ("b", (h,), 0, 0)],
        _gat,
    ),
}


@dataclass(frozen=True)
class Block:
    group: tuple  # ("is", j) | ("slot", i, t) | ("os", j)
    name: str
    offset: int
    shape: tuple
    fan_in: int
    fan_out: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def build_layout(cfg: SpaceConfig, num_features: int, num_classes: int) -> list[Block]:
    for name in cfg.layer_types:
        if name not in LAYER_TYPES:
            raise ValueError(f"unknown layer type {name!r}; registry has {sorted(LAYER_TYPES)}")
    h, f, c = cfg.hidden, num_features, num_classes
    specs = []
    for j in range(K_IO):
        specs += [(("is", j), "W", (f, h), f, h), (("is", j), "b", (h,), 0, 0)]
    for i in range(1, cfg.layers + 1):
        for t, name in enumerate(cfg.layer_types):
            specs += [(("slot", i, t), *blk) for blk in LAYER_TYPES[name].blocks(h)]
    for j in range(K_IO):
        specs += [(("os", j), "W", (h, c), h, c), (("os", j), "b", (c,), 0, 0)]
    layout, off = [], 0
    for group, name, shape, fi, fo in specs:
        blk = Block(group, name, off, tuple(shape), fi, fo)
        layout.append(blk)
        off += blk.size
    return layout


def layout_hash(layout: Sequence[Block]) -> str:
    desc = [[list(b.group), b.name, b.offset, list(b.shape)] for b in layout]
    return hashlib.sha256(json.dumps(desc).encode()).hexdigest()


class SuperNetWeights:
    """Flat parameter store plus per-block views."""

    def __init__(self, cfg: SpaceConfig, num_features: int, num_classes: int, theta=None):
        self.cfg = cfg
        self.num_features = num_features
        self.num_classes = num_classes
        self.layout = build_layout(cfg, num_features, num_classes)
        size = sum(b.size for b in self.layout)
        self.theta = np.zeros(size) if theta is None else np.asarray(theta, dtype=np.float64)
        if self.theta.shape != (size,):
            raise ValueError(f"parameter vector has length {self.theta.size}, layout needs {size}")
        self._groups: dict[tuple, list[Block]] = {}
        for b in self.layout:
            self._groups.setdefault(b.group, []).append(b)

    @property
    def size(self) -> int:
        return self.theta.size

    @property
    def layout_hash(self) -> str:
        return layout_hash(self.layout)

    def view(self, b: Block) -> np.ndarray:
        return self.theta[b.offset:b.offset + b.size].reshape(b.shape)

    def group(self, key: tuple) -> list[Block]:
        return self._groups[key]

    def selected_groups(self, code: ArchCode) -> list[tuple]:
        keys = [("is", code.is_)]
        keys += [("slot", i + 1, code.ltype[i]) for i in range(code.num_valid())]
        keys.append(("os", code.os))
        return keys

    def mask(self, code: ArchCode) -> np.ndarray:
        """Boolean mask over ``theta`` selecting the code's blocks."""
        m = np.zeros(self.size, dtype=bool)
        for key in self.selected_groups(code):
            for b in self._groups[key]:
                m[b.offset:b.offset + b.size] = True
        return m

    def copy(self) -> "SuperNetWeights":
        return SuperNetWeights(self.cfg, self.num_features, self.num_classes, self.theta.copy())

    # --- checkpoint: u64 header length, JSON header, f64 LE payload ---

    def save(self, path) -> None:
        header = {
            "format": "flagcns-supernet-v1",
            "layers": self.cfg.layers,
            "layer_types": list(self.cfg.layer_types),
            "hidden": self.cfg.hidden,
            "num_features": self.num_features,
            "num_classes": self.num_classes,
            "layout_hash": self.layout_hash,
            "blocks": [{"group": list(b.group), "name": b.name, "offset": b.offset, "shape": list(b.shape)}
                       for b in self.layout],
        }
        raw = json.dumps(header).encode()
        Path(path).write_bytes(struct.pack("<Q", len(raw)) + raw + self.theta.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "SuperNetWeights":
        data = Path(path).read_bytes()
        (n,) = struct.unpack_from("<Q", data)
        header = json.loads(data[8:8 + n])
        cfg = SpaceConfig(header["layers"], tuple(header["layer_types"]), header["hidden"])
        w = cls(cfg, header["num_features"], header["num_classes"],
                np.frombuffer(data[8 + n:], dtype="<f8").astype(np.float64))
        if w.layout_hash != header["layout_hash"]:
            raise ValueError("checkpoint layout hash mismatch")
        return w


def build(cfg: SpaceConfig, num_features: int, num_classes: int, seed=0) -> SuperNetWeights:
    """Allocate and initialize every block.

    Matrices draw from U[-s, s], s = sqrt(6 / (fan_in + fan_out)); biases and
    the GIN epsilon start at zero.
    """
    w = SuperNetWeights(cfg, num_features, num_classes)
    rng = np.random.default_rng(seed)
    for b in w.layout:
        if b.fan_in:
            w.view(b)[...] = T.glorot_uniform(rng, b.fan_in, b.fan_out, b.shape)
    return w


def _leaves(w: SuperNetWeights, code: ArchCode):
    leaves = {}
    for key in w.selected_groups(code):
        leaves[key] = {b.name: (b, T.Tensor(w.view(b), requires_grad=True)) for b in w.group(key)}
    return leaves


def _dropout(x: T.Tensor, rate: float, rng) -> T.Tensor:
    if not rate:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return T.mul(x, T.Tensor(keep))


def _forward(w: SuperNetWeights, code: ArchCode, g: GraphBundle, leaves, dropout=0.0, rng=None):
    if g.num_features != w.num_features:
        raise ValueError(f"shard has {g.num_features} features, SuperNet expects {w.num_features}")
    p = {k: {n: t for n, (_, t) in v.items()} for k, v in leaves.items()}
    x = _dropout(T.Tensor(g.features), dropout, rng)
    blk = p[("is", code.is_)]
    outputs = [T.activation(T.add(T.matmul(x, blk["W"]), blk["b"]), IO_ACTIVATIONS[code.is_])]
    valid = code.num_valid()
    for i in range(1, valid + 1):
        layer = LAYER_TYPES[w.cfg.layer_types[code.ltype[i - 1]]]
        h = layer.forward(p[("slot", i, code.ltype[i - 1])], outputs[code.lpre[i - 1]], g)
        outputs.append(T.activation(h, "relu"))
    stage2 = T.mean_stack(outputs[1:]) if valid else outputs[0]
    stage2 = _dropout(stage2, dropout, rng)
    blk = p[("os", code.os)]
    logits = T.activation(T.add(T.matmul(stage2, blk["W"]), blk["b"]), IO_ACTIVATIONS[code.os])
    return T.check_finite(logits)


def _bundle(shard) -> GraphBundle:
    return shard.bundle if isinstance(shard, GraphShard) else shard


def forward(w: SuperNetWeights, code: ArchCode, shard) -> np.ndarray:
    """Logits (n x C) of ``code`` on a shard."""
    return _forward(w, code, _bundle(shard), _leaves(w, code)).data


def split_loss(w: SuperNetWeights, code: ArchCode, shard, split: str) -> float:
    g = _bundle(shard)
    idx = g.splits[split]
    if not len(idx):
        raise ValueError(f"shard has an empty {split} split")
    logits = _forward(w, code, g, _leaves(w, code))
    return float(T.masked_cross_entropy(logits, g.labels, idx).data)


def local_val_loss(w: SuperNetWeights, code: ArchCode, shard) -> float:
    return split_loss(w, code, shard, "val")


def accuracy(w: SuperNetWeights, code: ArchCode, shard, split: str = "test") -> float:
    g = _bundle(shard)
    idx = g.splits[split]
    if not len(idx):
        raise ValueError(f"shard has an empty {split} split")
    pred = forward(w, code, g)[idx].argmax(axis=1)
    return float(np.mean(pred == g.labels[idx]))


def local_grad(w: SuperNetWeights, code: ArchCode, shard, weight_decay=0.0, dropout=0.0, rng=None,
               out=None) -> np.ndarray:
    """Gradient of the shard's train loss w.r.t. the flat parameter vector.

    Entries outside the code's blocks are exactly zero.  With ``out`` the
    gradient is added into that buffer instead of a fresh one.
    """
    g = _bundle(shard)
    idx = g.splits["train"]
    if not len(idx):
        raise ValueError("shard has an empty train split")
    leaves = _leaves(w, code)
    loss = T.masked_cross_entropy(_forward(w, code, g, leaves, dropout, rng), g.labels, idx)
    flat_leaves = [bt for grp in leaves.values() for bt in grp.values()]
    grads = T.backward(loss, [t for _, t in flat_leaves])
    grad = np.zeros(w.size) if out is None else out
    for b, t in flat_leaves:
        sl = slice(b.offset, b.offset + b.size)
        grad[sl] += grads[t].ravel()
        if weight_decay:
            grad[sl] += weight_decay * w.theta[sl]
    return grad


def population_grad(w: SuperNetWeights, population: Sequence[ArchCode], shard, **kw) -> np.ndarray:
    """Sum (not mean) of ``local_grad`` over a population multiset."""
    if not len(population):
        raise ValueError("empty population")
    total = np.zeros(w.size)
    for code in population:
        local_grad(w, code, shard, out=total, **kw)
    return total


def param_count(code: ArchCode, cfg: SpaceConfig, num_features: int, num_classes: int) -> int:
    h, f, c = cfg.hidden, num_features, num_classes
    total = (f * h + h) + (h * c + c)
    for i in range(code.num_valid()):
        total += sum(int(np.prod(shape)) for _, shape, _, _ in LAYER_TYPES[cfg.layer_types[code.ltype[i]]].blocks(h))
    return total
