"""Pairwise-masking secure aggregation over integers mod ``2**bits``.

Only the masking core shared by the usual SA protocols is simulated: each
pair of cohort members ``i < j`` derives a common seed, ``i`` adds the
generated mask and ``j`` subtracts it, so the masks cancel in the sum and the
server only learns the aggregate. There is no dropout recovery and the
generator is not cryptographic.

Fixed point: ``x -> round(clip(x, -K, K) * scale)`` with
``scale = (2**(bits-1) - 1) / K``, stored as its residue mod ``2**bits``.
A sum decodes correctly as long as it stays inside
``[-(2**(bits-1) - 1), 2**(bits-1) - 1]``.

Pair seed: ``mix_seed(round_seed, min(i, j), max(i, j))``; mask words are
``counter_stream(pair_seed, D)`` reduced mod ``2**bits``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ProtocolError, ShapeError, ValidationError
from .nnkit import ModelArch, ParamVector
from .prng import counter_stream, mix_seed

SUPPORTED_BITS = (16, 32, 64)


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 32
    clip: float = 8.0

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise ValidationError(f"bits must be one of {SUPPORTED_BITS}")
        if not self.clip > 0:
            raise ValidationError("clip must be positive")

    @property
    def scale(self) -> float:
        return (2 ** (self.bits - 1) - 1) / self.clip

    @property
    def mask(self) -> np.uint64:
        return np.uint64((1 << self.bits) - 1)

    @property
    def max_level(self) -> float:
        # largest float64 not above 2**(bits-1) - 1
        if self.bits == 64:
            return float(np.nextafter(2.0**63, 0.0))
        return float(2 ** (self.bits - 1) - 1)


@dataclass(frozen=True)
class MaskedUpdate:
    residues: np.ndarray
    client_id: int
    bits: int

    def __post_init__(self):
        r = np.asarray(self.residues, dtype=np.uint64)
        if self.bits < 64 and np.any(r >> np.uint64(self.bits)):
            raise ValidationError("residue outside [0, 2**bits)")
        object.__setattr__(self, "residues", r)


def _as_array(v) -> np.ndarray:
    if isinstance(v, ParamVector):
        return v.values
    return np.asarray(v, dtype=np.float64)


def quantize(v, q: QuantConfig) -> np.ndarray:
    """Residues mod ``2**bits`` of the clipped, scaled and rounded values."""
    x = np.clip(_as_array(v), -q.clip, q.clip) * q.scale
    lv = q.max_level
    levels = np.clip(np.rint(x), -lv, lv).astype(np.int64)
    return levels.view(np.uint64) & q.mask


def centered(iv: np.ndarray, q: QuantConfig) -> np.ndarray:
    """Signed representatives in ``[-2**(bits-1), 2**(bits-1))``."""
    iv = np.asarray(iv, dtype=np.uint64) & q.mask
    if q.bits == 64:
        return iv.view(np.int64)
    half = np.uint64(1 << (q.bits - 1))
    signed = iv.astype(np.int64)
    return np.where(iv >= half, signed - (1 << q.bits), signed)


def dequantize(iv, q: QuantConfig, n_summands: int = 1, arch: ModelArch | None = None):
    """Decode a (summed) residue vector and divide by ``n_summands``.

    With ``n_summands > 1`` this turns a secure sum into the mean.
    """
    if n_summands < 1:
        raise ValidationError("n_summands must be >= 1")
    vals = centered(iv, q).astype(np.float64) / q.scale / n_summands
    return ParamVector(vals, arch) if arch is not None else vals


def pair_seed(round_seed: int, i: int, j: int) -> int:
    lo, hi = (i, j) if i < j else (j, i)
    return mix_seed(round_seed, lo, hi)


def pair_mask(round_seed: int, i: int, j: int, dim: int, q: QuantConfig) -> np.ndarray:
    return counter_stream(pair_seed(round_seed, i, j), dim) & q.mask


def mask_update(q_update: np.ndarray, client_id: int, cohort: Iterable[int], round_seed: int, q: QuantConfig) -> MaskedUpdate:
    """Add masks shared with higher ids and subtract those shared with lower ids."""
    members = sorted(set(int(c) for c in cohort))
    if client_id not in members:
        raise ProtocolError(f"client {client_id} is not in the cohort {members}")
    acc = np.asarray(q_update, dtype=np.uint64).copy()
    dim = acc.shape[0]
    for j in members:
        if j == client_id:
            continue
        m = pair_mask(round_seed, client_id, j, dim, q)
        if j > client_id:
            acc += m
        else:
            acc -= m
    # uint64 arithmetic wraps mod 2**64, and 2**bits divides 2**64
    return MaskedUpdate(acc & q.mask, int(client_id), q.bits)


def secure_sum(masked: Sequence[MaskedUpdate], cohort: Iterable[int], q: QuantConfig) -> np.ndarray:
    """Coordinatewise sum mod ``2**bits``; requires exactly one update per cohort member."""
    members = sorted(set(int(c) for c in cohort))
    seen: dict[int, MaskedUpdate] = {}
    for m in masked:
        if m.client_id in seen:
            raise ProtocolError(f"duplicate masked update from client {m.client_id}")
        if m.bits != q.bits:
            raise ProtocolError(f"client {m.client_id} used {m.bits}-bit residues, expected {q.bits}")
        seen[m.client_id] = m
    missing = [c for c in members if c not in seen]
    if missing:
        raise ProtocolError(f"missing masked updates from clients {missing}")
    extra = sorted(set(seen) - set(members))
    if extra:
        raise ProtocolError(f"updates from clients outside the cohort: {extra}")
    dims = {m.residues.shape for m in seen.values()}
    if len(dims) != 1:
        raise ShapeError(f"masked updates disagree on dimension: {sorted(dims)}")
    total = np.zeros(dims.pop(), dtype=np.uint64)
    for c in members:
        total += seen[c].residues
    return total & q.mask


def plain_sum(q_updates: Sequence[np.ndarray], q: QuantConfig) -> np.ndarray:
    total = np.zeros_like(np.asarray(q_updates[0], dtype=np.uint64))
    for u in q_updates:
        total += np.asarray(u, dtype=np.uint64)
    return total & q.mask


def secure_aggregate(vectors: dict[int, np.ndarray], round_seed: int, q: QuantConfig) -> np.ndarray:
    """Quantize, mask and securely sum ``{client_id: vector}``; returns the decoded float sum."""
    cohort = sorted(vectors)
    masked = [mask_update(quantize(vectors[c], q), c, cohort, round_seed, q) for c in cohort]
    return dequantize(secure_sum(masked, cohort, q), q)
