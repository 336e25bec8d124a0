"""Federated evolutionary optimization: schedule, variation step, elites, quotas."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .space import ArchCode, SpaceConfig, crossover, mutate

GAMMA0 = 0.5
GAMMA_DECAY = 0.99
TOURNAMENT = 2
CROSSOVER_PROB = 0.9


@dataclass(frozen=True)
class Individual:
    code: ArchCode
    fitness: float  # negated loss
    origin: str = "federated"  # "federated" | "client-<i>"

    def __post_init__(self):
        if not math.isfinite(self.fitness):
            raise ValueError("fitness must be finite")


@dataclass(frozen=True)
class GammaSchedule:
    gamma0: float = GAMMA0
    decay: float = GAMMA_DECAY

    def __call__(self, t: int) -> float:
        if t < 1:
            raise ValueError("generation index starts at 1")
        return self.gamma0 * self.decay ** t


def gamma(t: int, gamma0: float = GAMMA0, decay: float = GAMMA_DECAY) -> float:
    return GammaSchedule(gamma0, decay)(t)


def party_rng(run_seed: int, party: int, generation: int) -> np.random.Generator:
    """Independent stream per (run, party, generation); controller is party 0."""
    return np.random.default_rng(np.random.SeedSequence([run_seed, party, generation]))


def rank_by_loss(codes: Sequence[ArchCode], losses: Sequence[float]) -> list[int]:
    """Indices ordered by ascending loss, ties by code lexicographic order."""
    return sorted(range(len(codes)), key=lambda i: (losses[i], codes[i].sort_key()))


def top_k(codes: Sequence[ArchCode], losses: Sequence[float], k: int) -> list[int]:
    if k > len(codes):
        raise ValueError(f"quota {k} exceeds population of {len(codes)}")
    if k < 0:
        raise ValueError("negative quota")
    return rank_by_loss(codes, losses)[:k]


def client_elites(codes, losses, quota: int, client: int | None = None) -> list[Individual]:
    origin = "federated" if client is None else f"client-{client}"
    return [Individual(codes[i], -float(losses[i]), origin) for i in top_k(codes, losses, quota)]


def controller_elites(codes, fll, quota: int) -> list[Individual]:
    return client_elites(codes, fll, quota, client=None)


def largest_remainder(total: int, weights: Sequence[float]) -> list[int]:
    w = np.asarray(weights, dtype=np.float64)
    exact = total * w / w.sum()
    base = np.floor(exact + 1e-12).astype(int)
    rest = total - int(base.sum())
    order = sorted(range(len(w)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[:rest]:
        base[i] += 1
    return base.tolist()


def quotas(pop_size: int, gamma_value: float, val_sizes: Sequence[int],
           mode: str = "full") -> tuple[list[int], int]:
    """Per-client elite quotas and the controller quota; they sum to ``pop_size``.

    ``mode`` is ``full``, ``controller-only`` (clients contribute nothing) or
    ``client-only`` (the controller contributes nothing).
    """
    if not 0.0 <= gamma_value <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    if mode == "controller-only":
        return [0] * len(val_sizes), pop_size
    if mode == "client-only":
        return largest_remainder(pop_size, val_sizes), 0
    if mode != "full":
        raise ValueError(f"unknown quota mode {mode!r}")
    client_total = int(round(pop_size * gamma_value))
    per_client = largest_remainder(client_total, val_sizes)
    return per_client, pop_size - sum(per_client)


def _tournament(losses: np.ndarray, rng) -> int:
    picks = rng.integers(len(losses), size=TOURNAMENT)
    return int(picks[np.argmin(losses[picks])])


def evolve(codes: Sequence[ArchCode], losses: Sequence[float] | Mapping, cfg: SpaceConfig, seed=None,
           crossover_prob: float = CROSSOVER_PROB, mutation_rate: float | None = None) -> list[ArchCode]:
    """One generational step minimizing ``losses`` (fitness is their negation).

    The best individual survives unchanged; the rest come from size-2
    tournaments, uniform crossover and per-gene mutation.
    """
    if not len(codes):
        raise ValueError("cannot evolve an empty population")
    if isinstance(losses, Mapping):
        losses = [losses[c] for c in codes]
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    loss_arr = np.asarray(losses, dtype=np.float64)
    if not np.all(np.isfinite(loss_arr)):
        raise ValueError("every individual needs a finite fitness")
    children = [codes[rank_by_loss(codes, loss_arr)[0]]]
    while len(children) < len(codes):
        a = codes[_tournament(loss_arr, rng)]
        if rng.random() < crossover_prob:
            child = crossover(a, codes[_tournament(loss_arr, rng)], rng)
        else:
            child = a
        children.append(mutate(child, cfg, mutation_rate, rng))
    return children
