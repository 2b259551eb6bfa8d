"""Temporal correlation matrices, matrix cosine, triplet and regularization losses.

All functions accept either single operands (``D`` vectors, ``D x D``
matrices) or a leading batch axis, and are written with tensor ops so that
gradients flow through them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from tavce import tensor as T
from tavce.errors import ShapeError
from tavce.rng import SeededRng
from tavce.tensor import Tensor

DEGENERATE_NORM = 1e-12


def covariance(f_i: Tensor, f_j: Tensor) -> Tensor:
    """Centered outer product ``(f_i - mean f_i)(f_j - mean f_j)^T``.

    Channels act as samples, which is what makes a single pair of embeddings
    yield a full D x D matrix.
    """
    if f_i.shape != f_j.shape:
        raise ShapeError(f"covariance: embedding shapes differ {f_i.shape} vs {f_j.shape}")
    d = f_i.shape[-1]
    if d < 2:
        raise ShapeError(f"covariance needs D >= 2, got D={d}")
    xc = T.sub(f_i, T.mean(f_i, axis=-1, keepdims=True))
    yc = T.sub(f_j, T.mean(f_j, axis=-1, keepdims=True))
    lead = f_i.shape[:-1]
    return T.mul(T.reshape(xc, lead + (d, 1)), T.reshape(yc, lead + (1, d)))


@dataclass
class Cosine:
    value: Tensor
    degenerate: np.ndarray  # bool, same shape as value

    @property
    def any_degenerate(self) -> bool:
        return bool(self.degenerate.any())

    @property
    def degenerate_count(self) -> int:
        return int(self.degenerate.sum())


def flat_cosine(c1: Tensor, c2: Tensor) -> Cosine:
    """Cosine of the flattened matrices (Frobenius inner product over norms).

    A pair where either norm is below 1e-12 gets cosine exactly 0 and is
    flagged in ``degenerate``; its gradient is zero.
    """
    if c1.shape != c2.shape:
        raise ShapeError(f"flat_cosine: shapes differ {c1.shape} vs {c2.shape}")
    if c1.ndim < 2:
        raise ShapeError(f"flat_cosine expects matrices, got shape {c1.shape}")
    axes = (-2, -1)
    dot = T.sum(T.mul(c1, c2), axis=axes)
    n1 = T.norm(c1, axis=axes)
    n2 = T.norm(c2, axis=axes)
    deg = (n1.data < DEGENERATE_NORM) | (n2.data < DEGENERATE_NORM)
    deg = np.asarray(deg)
    if not deg.any():
        return Cosine(T.div(dot, T.mul(n1, n2)), deg)
    keep = Tensor((~deg).astype(c1.dtype))
    pad = Tensor(deg.astype(c1.dtype))
    denom = T.add(T.mul(n1, n2), pad)
    return Cosine(T.mul(T.div(dot, denom), keep), deg)


def tavc_triplet_loss(c_a: Tensor, c_v_pos: Tensor, c_v_neg: Tensor) -> Tensor:
    """``(1 - cos(c_a, pos)) + (1 + cos(c_a, neg))``, per triplet, in [0, 4]."""
    if not (c_a.shape == c_v_pos.shape == c_v_neg.shape):
        raise ShapeError(
            f"triplet shapes differ: {c_a.shape}, {c_v_pos.shape}, {c_v_neg.shape}"
        )
    pos = flat_cosine(c_a, c_v_pos).value
    neg = flat_cosine(c_a, c_v_neg).value
    return T.add(T.sub(1.0, pos), T.add(1.0, neg))


def _stack_triplets(batch) -> tuple[Tensor, Tensor, Tensor]:
    if isinstance(batch, tuple) and len(batch) == 3 and all(isinstance(b, Tensor) for b in batch):
        return batch
    batch = list(batch)
    if not batch:
        raise ValueError("tavc_objective: empty batch")
    return tuple(T.stack([trip[k] for trip in batch]) for k in range(3))


def tavc_objective(batch) -> Tensor:
    """Sum of triplet losses over a batch.

    ``batch`` is either a list of ``(c_a, c_v_pos, c_v_neg)`` tuples or a
    tuple of three stacked ``N x D x D`` tensors.
    """
    c_a, pos, neg = _stack_triplets(batch)
    if c_a.ndim == 2:
        return tavc_triplet_loss(c_a, pos, neg)
    return T.sum(tavc_triplet_loss(c_a, pos, neg))


def car_loss(pairs) -> Tensor:
    """Mean of ``1 - cos(c_a, c_v_gen)`` over all pairs, in [0, 2]."""
    if isinstance(pairs, tuple) and len(pairs) == 2 and all(isinstance(p, Tensor) for p in pairs):
        c_a, c_gen = pairs
    else:
        pairs = list(pairs)
        if not pairs:
            raise ValueError("car_loss: empty pair list")
        c_a = T.stack([p[0] for p in pairs])
        c_gen = T.stack([p[1] for p in pairs])
    if c_a.shape != c_gen.shape:
        raise ShapeError(f"car_loss: shapes differ {c_a.shape} vs {c_gen.shape}")
    return T.mean(T.sub(1.0, flat_cosine(c_a, c_gen).value))


@dataclass(frozen=True)
class TripletIndex:
    i: int
    j: int
    tau: int

    @property
    def pos(self) -> tuple[int, int]:
        return (self.i - 1, self.i)

    @property
    def neg(self) -> tuple[int, int]:
        return (self.i - 1, self.j)


def negative_candidates(T_len: int, i: int, tau: int) -> list[int]:
    return [j for j in range(T_len) if j < i - tau or j > i + tau]


def make_triplet_indices(T_len: int, tau: int, rng: SeededRng) -> list[TripletIndex]:
    """One triplet per anchor ``i`` in ``1..T-1`` with a uniform negative outside the window."""
    if tau < 0:
        raise ValueError(f"tau must be non-negative, got {tau}")
    if T_len < 2 * tau + 3:
        raise ValueError(
            f"sequence length {T_len} too short for tau={tau}: need T >= {2 * tau + 3}"
        )
    out = []
    for i in range(1, T_len):
        cands = negative_candidates(T_len, i, tau)
        out.append(TripletIndex(i, rng.choice(cands), tau))
    return out


def correlation_stack(emb: Tensor, first: Sequence[int], second: Sequence[int]) -> Tensor:
    """Covariances between rows ``first[k]`` and ``second[k]`` of an ``N x D`` embedding table."""
    return covariance(T.take(emb, np.asarray(first)), T.take(emb, np.asarray(second)))
