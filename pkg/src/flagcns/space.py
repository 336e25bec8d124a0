"""Architecture codes: IS gene, L (type, predecessor) slot pairs, OS gene.

``lpre[i]`` names the input of slot ``i+1``: ``0`` is the input-stage output
and ``j`` the output of slot ``j``; ``None`` switches off this slot and every
later one.  Genes at or after the first ``None`` are don't-care and
:func:`canonicalize` pins them to a fixed filler.
"""

from __future__ import annotations

import itertools
import json
import math
import re
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

IO_ACTIVATIONS = ("sigmoid", "tanh", "relu", "softmax_rows", "identity")
K_IO = len(IO_ACTIVATIONS)
HIDDEN = 64


@dataclass(frozen=True)
class SpaceConfig:
    layers: int = 6
    layer_types: tuple = ("gcn", "sage", "sgc", "appnp", "gin", "gat")
    hidden: int = HIDDEN

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("need at least one layer slot")
        if not self.layer_types:
            raise ValueError("need at least one layer type")
        if len(set(self.layer_types)) != len(self.layer_types):
            raise ValueError("layer type names must be unique")
        object.__setattr__(self, "layer_types", tuple(self.layer_types))

    @property
    def num_types(self) -> int:
        return len(self.layer_types)

    @property
    def num_genes(self) -> int:
        return 2 * self.layers + 2


@dataclass(frozen=True, order=False)
class ArchCode:
    is_: int
    ltype: tuple
    lpre: tuple
    os: int

    @property
    def layers(self) -> int:
        return len(self.ltype)

    def num_valid(self) -> int:
        for i, p in enumerate(self.lpre):
            if p is None:
                return i
        return self.layers

    def genes(self) -> list:
        """Flat gene list ``[is, t1..tL, p1..pL, os]``."""
        return [self.is_, *self.ltype, *self.lpre, self.os]

    @classmethod
    def from_genes(cls, genes, layers: int) -> "ArchCode":
        genes = list(genes)
        if len(genes) != 2 * layers + 2:
            raise ValueError(f"expected {2 * layers + 2} genes, got {len(genes)}")
        return cls(
            int(genes[0]),
            tuple(int(t) for t in genes[1:1 + layers]),
            tuple(None if p is None else int(p) for p in genes[1 + layers:1 + 2 * layers]),
            int(genes[-1]),
        )

    def sort_key(self) -> tuple:
        return tuple(-1 if g is None else g for g in self.genes())

    def to_json(self) -> list:
        return self.genes()

    def to_text(self, cfg: SpaceConfig | None = None) -> str:
        names = cfg.layer_types if cfg else None
        slots = []
        for i, (t, p) in enumerate(zip(self.ltype, self.lpre), start=1):
            if p is None:
                slots.append(f"L{i}:None")
                break
            slots.append(f"L{i}:{names[t] if names else t}<-{p}")
        return f"IS{self.is_} | {' '.join(slots)} | OS{self.os}"

    def __str__(self):
        return self.to_text()


_SLOT = re.compile(r"L(\d+):(?:None|(\w+)<-(\d+))$")


def parse_code(text: str, cfg: SpaceConfig) -> ArchCode:
    """Parse either the JSON gene array or the ``IS3 | L1:gcn<-0 ... | OS4`` form."""
    text = text.strip()
    if text.startswith("["):
        code = ArchCode.from_genes(json.loads(text), cfg.layers)
    else:
        parts = [p.strip() for p in text.split("|")]
        if len(parts) != 3 or not parts[0].startswith("IS") or not parts[2].startswith("OS"):
            raise ValueError(f"cannot parse architecture code {text!r}")
        ltype, lpre = [0] * cfg.layers, [None] * cfg.layers
        for tok in parts[1].split():
            m = _SLOT.match(tok)
            if not m:
                raise ValueError(f"bad slot token {tok!r}")
            i = int(m.group(1)) - 1
            if m.group(2) is not None:
                name = m.group(2)
                ltype[i] = cfg.layer_types.index(name) if not name.isdigit() else int(name)
                lpre[i] = int(m.group(3))
        code = ArchCode(int(parts[0][2:]), tuple(ltype), tuple(lpre), int(parts[2][2:]))
    validate(code, cfg)
    return canonicalize(code)


def validate(code: ArchCode, cfg: SpaceConfig) -> None:
    if code.layers != cfg.layers or len(code.lpre) != cfg.layers:
        raise ValueError(f"code has {code.layers} slots, space has {cfg.layers}")
    if not 0 <= code.is_ < K_IO or not 0 <= code.os < K_IO:
        raise ValueError("IS/OS gene out of range")
    for i, (t, p) in enumerate(zip(code.ltype, code.lpre), start=1):
        if not 0 <= t < cfg.num_types:
            raise ValueError(f"slot {i} type {t} out of range")
        if p is not None and not 0 <= p < i:
            raise ValueError(f"slot {i} predecessor {p} not in [0, {i})")


def canonicalize(code: ArchCode) -> ArchCode:
    v = code.num_valid()
    if v == code.layers:
        return code
    ltype = code.ltype[:v] + (0,) * (code.layers - v)
    lpre = code.lpre[:v] + (None,) * (code.layers - v)
    return ArchCode(code.is_, ltype, lpre, code.os)


def gene_options(cfg: SpaceConfig) -> list[list]:
    """Legal values of every gene position, in ``ArchCode.genes`` order."""
    opts = [list(range(K_IO))]
    opts += [list(range(cfg.num_types)) for _ in range(cfg.layers)]
    opts += [[None, *range(i)] for i in range(1, cfg.layers + 1)]
    opts.append(list(range(K_IO)))
    return opts


def space_size(cfg: SpaceConfig) -> int:
    """Raw code count ``25 * K^L * (L+1)!``."""
    return K_IO * K_IO * cfg.num_types ** cfg.layers * math.factorial(cfg.layers + 1)


def distinct_size(cfg: SpaceConfig) -> int:
    """Number of canonical codes (architectures after tail collapse)."""
    k = cfg.num_types
    return K_IO * K_IO * sum(k ** v * math.factorial(v) for v in range(cfg.layers + 1))


def enumerate_codes(cfg: SpaceConfig) -> Iterator[ArchCode]:
    for genes in itertools.product(*gene_options(cfg)):
        yield ArchCode.from_genes(genes, cfg.layers)


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_random(cfg: SpaceConfig, seed=None) -> ArchCode:
    rng = _rng(seed)
    genes = [opts[rng.integers(len(opts))] for opts in gene_options(cfg)]
    return canonicalize(ArchCode.from_genes(genes, cfg.layers))


def _mutate_raw(code: ArchCode, cfg: SpaceConfig, rate: float, rng) -> ArchCode:
    genes = code.genes()
    for pos, opts in enumerate(gene_options(cfg)):
        if len(opts) > 1 and rng.random() < rate:
            others = [o for o in opts if o != genes[pos]]
            genes[pos] = others[rng.integers(len(others))]
    return ArchCode.from_genes(genes, cfg.layers)


def mutate(code: ArchCode, cfg: SpaceConfig, rate: float | None = None, seed=None) -> ArchCode:
    """Resample each gene to a different legal value with probability ``rate``."""
    if rate is None:
        rate = 1.0 / cfg.num_genes
    return canonicalize(_mutate_raw(code, cfg, rate, _rng(seed)))


def crossover(a: ArchCode, b: ArchCode, seed=None) -> ArchCode:
    if a.layers != b.layers:
        raise ValueError("crossover between codes of different spaces")
    rng = _rng(seed)
    take_a = rng.random(2 * a.layers + 2) < 0.5
    genes = [ga if t else gb for ga, gb, t in zip(a.genes(), b.genes(), take_a)]
    return canonicalize(ArchCode.from_genes(genes, a.layers))


def decode(code: ArchCode) -> dict:
    """Structured view of the valid part of a code."""
    v = code.num_valid()
    return {
        "is": code.is_,
        "slots": [(code.ltype[i], code.lpre[i]) for i in range(v)],
        "os": code.os,
        "layers": code.layers,
    }


def encode(arch: dict) -> ArchCode:
    layers = arch["layers"]
    slots = list(arch["slots"])
    ltype = [t for t, _ in slots] + [0] * (layers - len(slots))
    lpre: list[Optional[int]] = [p for _, p in slots] + [None] * (layers - len(slots))
    return ArchCode(arch["is"], tuple(ltype), tuple(lpre), arch["os"])
