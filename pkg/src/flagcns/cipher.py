"""Fixed-point secure aggregation.

Plaintexts are encoded as signed fixed-point integers (``scale_bits``
fractional bits) stored as 64-bit words mod 2^64.  The ``mask`` scheme adds,
for every other client ``j``, a pseudorandom word stream derived from the
pair's shared seed and a per-aggregation nonce: the lower id adds it, the
higher id subtracts it, so masks cancel exactly in the sum over all clients.

Clients fold their own public aggregation weight into the plaintext before
encoding (``weight=``), which leaves the controller a pure modular sum.
Any remaining coefficient, necessarily common to all inputs under the mask
scheme, is applied as a fixed-point integer with ``COEFF_BITS`` fractional
bits, rounded half-to-even, and the product is shifted back with the same
rounding.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

SCHEMES = ("plain", "mask")
SCALE_BITS = 24
COEFF_BITS = 30
CLIP = 64.0
_MASK64 = (1 << 64) - 1


class CipherError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CipherVector:
    scheme: str
    scale_bits: int
    payload: np.ndarray  # uint64 words
    weight: float = 1.0  # coefficient already folded into the plaintext

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise CipherError(f"unknown scheme {self.scheme!r}")
        object.__setattr__(self, "payload", np.ascontiguousarray(self.payload, dtype=np.uint64))

    @property
    def length(self) -> int:
        return int(self.payload.size)

    def __len__(self):
        return self.length


@dataclass(frozen=True)
class AggregationWeights:
    coefficients: tuple

    def __post_init__(self):
        c = np.asarray(self.coefficients, dtype=np.float64)
        if c.ndim != 1 or not c.size:
            raise CipherError("need at least one coefficient")
        if np.any(c < 0):
            raise CipherError("coefficients must be nonnegative")
        if abs(c.sum() - 1.0) > 1e-12:
            raise CipherError(f"coefficients sum to {c.sum()!r}, not 1")
        object.__setattr__(self, "coefficients", tuple(float(x) for x in c))

    @classmethod
    def from_sizes(cls, sizes: Sequence[int]) -> "AggregationWeights":
        s = np.asarray(sizes, dtype=np.float64)
        if s.sum() <= 0:
            raise CipherError("split sizes sum to zero")
        return cls(tuple(s / s.sum()))

    def __len__(self):
        return len(self.coefficients)

    def __getitem__(self, i):
        return self.coefficients[i]


@dataclass
class CipherContext:
    """One party's view of the run's cipher configuration."""

    scheme: str
    num_clients: int
    client_id: int
    run_seed: int = 0
    scale_bits: int = SCALE_BITS
    clip: float | None = CLIP
    clipped: int = field(default=0, init=False)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise CipherError(f"unknown scheme {self.scheme!r}")

    def pair_seed(self, other: int) -> np.random.SeedSequence:
        lo, hi = sorted((self.client_id, other))
        return np.random.SeedSequence([self.run_seed, 0x5EC, lo, hi])

    def mask_words(self, other: int, nonce: int, n: int) -> np.ndarray:
        ss = self.pair_seed(other)
        gen = np.random.PCG64(np.random.SeedSequence(ss.entropy, spawn_key=(nonce,)))
        return gen.random_raw(n).astype(np.uint64)

    def total_mask(self, nonce: int, n: int) -> np.ndarray:
        total = np.zeros(n, dtype=np.uint64)
        for j in range(self.num_clients):
            if j == self.client_id:
                continue
            m = self.mask_words(j, nonce, n)
            if self.client_id < j:
                total += m
            else:
                total -= m
        return total


def encode_fixed(v: np.ndarray, scale_bits: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise CipherError("cannot encode non-finite values")
    limit = 2.0 ** (63 - scale_bits)
    if v.size and np.abs(v).max() >= limit:
        raise CipherError(f"value {np.abs(v).max()!r} overflows fixed-point range 2^{63 - scale_bits}")
    return np.rint(np.ldexp(v, scale_bits)).astype(np.int64).view(np.uint64)


def decode_fixed(words: np.ndarray, scale_bits: int) -> np.ndarray:
    return np.ldexp(np.asarray(words, dtype=np.uint64).view(np.int64).astype(np.float64), -scale_bits)


def encrypt(v, ctx: CipherContext, nonce: int = 0, weight: float = 1.0, clip: bool = False) -> CipherVector:
    """Encode ``weight * v``; with ``clip`` the weighted values are first clipped to +/-``ctx.clip``."""
    v = np.asarray(v, dtype=np.float64).ravel() * weight
    if clip and ctx.clip is not None:
        over = int(np.count_nonzero(np.abs(v) > ctx.clip))
        if over:
            ctx.clipped += over
            logger.info("client %d: clipped %d values to +/-%g", ctx.client_id, over, ctx.clip)
            v = np.clip(v, -ctx.clip, ctx.clip)
    words = encode_fixed(v, ctx.scale_bits)
    if ctx.scheme == "mask":
        words = words + ctx.total_mask(nonce, words.size)
    return CipherVector(ctx.scheme, ctx.scale_bits, words, float(weight))


def decrypt(c: CipherVector) -> np.ndarray:
    """Decode a plaintext-scheme vector or a complete mask-scheme aggregate."""
    return decode_fixed(c.payload, c.scale_bits)


def _round_shift(words: np.ndarray, bits: int) -> np.ndarray:
    """Signed ``words / 2^bits`` rounded half-to-even, on int64 two's complement."""
    s = words.view(np.int64)
    q = s >> bits  # floor
    r = (s - (q << bits)).astype(np.int64)
    half = np.int64(1) << (bits - 1)
    up = (r > half) | ((r == half) & ((q & 1) == 1))
    return (q + up.astype(np.int64)).view(np.uint64)


def _fixed_coeff(x: float) -> int:
    return int(np.rint(np.ldexp(x, COEFF_BITS)))


def aggregate(cs: Sequence[CipherVector], coeffs) -> CipherVector:
    """Linear combination ``sum_i coeffs[i] * plaintext_i`` in the encrypted domain."""
    if not cs:
        raise CipherError("nothing to aggregate")
    coeffs = list(coeffs.coefficients if isinstance(coeffs, AggregationWeights) else coeffs)
    if len(coeffs) != len(cs):
        raise CipherError(f"{len(coeffs)} coefficients for {len(cs)} vectors")
    first = cs[0]
    for c in cs:
        if c.scheme != first.scheme or c.scale_bits != first.scale_bits:
            raise CipherError("scheme/scale mismatch")
        if c.length != first.length:
            raise CipherError("length mismatch")
    rest = []
    for k, c in zip(coeffs, cs):
        if c.weight:
            rest.append(float(k) / c.weight)
        elif k:
            raise CipherError("cannot rescale a vector encoded with weight 0")
        else:
            rest.append(1.0)  # encodes zeros; any factor that keeps masks aligned works
    if all(abs(r - 1.0) < 1e-12 for r in rest):
        total = np.zeros(first.length, dtype=np.uint64)
        for c in cs:
            total += c.payload
        return CipherVector(first.scheme, first.scale_bits, total)
    if first.scheme == "mask" and max(rest) - min(rest) > 1e-12:
        raise CipherError("mask-scheme inputs need a common residual coefficient (pre-scale each client's weight)")
    total = np.zeros(first.length, dtype=np.uint64)
    for r, c in zip(rest, cs):
        total += c.payload * np.uint64(_fixed_coeff(r) & _MASK64)
    return CipherVector(first.scheme, first.scale_bits, _round_shift(total, COEFF_BITS))


def aggregate_losses(reports: Sequence[CipherVector], weights: AggregationWeights) -> np.ndarray:
    """Federated loss per code: sum_i w_i * loss_i (clients pre-scale by w_i)."""
    return decrypt(aggregate(reports, weights))


def aggregate_grads(reports: Sequence[CipherVector], weights: AggregationWeights, pop_size: int) -> CipherVector:
    """Encrypted population gradient (1/|P|) sum_i w_i g_i, ready to broadcast."""
    if pop_size < 1:
        raise CipherError("population size must be positive")
    return aggregate(reports, [w / pop_size for w in weights.coefficients])
