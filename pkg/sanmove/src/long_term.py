"""
Long-term preference learning.

Queries are user-plus-time vectors of every historical check-in, keys and
values the location embeddings of the same check-ins. Each layer is an
attention step followed by a position-wise feed-forward network, and the
final rows are averaged into h_L. There are no residual connections or layer
normalisation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray

from sanmove.src.autodiff import (
    Tensor,
    add,
    concat,
    gather_rows,
    matmul,
    mean,
    mul,
    relu,
    scale,
    slice_cols,
    softmax,
    transpose,
)
from sanmove.src.embeddings import EmbeddingTables
from sanmove.src.errors import ShapeError

L_MAX = 128


@dataclass
class AttentionBlockParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def initialize(
        cls, d: int, rng: np.random.Generator, prefix: str, init_std: float = 0.02
    ) -> "AttentionBlockParams":
        def matrix(name):
            return Tensor(rng.normal(0.0, init_std, size=(d, d)), requires_grad=True, name=f"{prefix}.{name}")

        def bias(name):
            return Tensor(np.zeros(d), requires_grad=True, name=f"{prefix}.{name}")

        return cls(
            w_q=matrix("w_q"),
            w_k=matrix("w_k"),
            w_v=matrix("w_v"),
            w1=matrix("w1"),
            b1=bias("b1"),
            w2=matrix("w2"),
            b2=bias("b2"),
        )

    def named_tensors(self) -> dict[str, Tensor]:
        return {t.name: t for t in (self.w_q, self.w_k, self.w_v, self.w1, self.b1, self.w2, self.b2)}


def build_queries(tables: EmbeddingTables, user: int, slots: ArrayLike) -> Tensor:
    """Row i is e_u + e_t(slot_i)."""
    slots = np.asarray(slots, dtype=np.int64)
    user_row = gather_rows(tables.user, [user])
    return add(tables.time_rows(slots), user_row)


def attention_with_weights(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: Optional[NDArray[np.bool_]] = None,
    n_heads: int = 1,
    gamma: Optional[NDArray[np.float64]] = None,
    gamma_placement: str = "logits",
) -> tuple[Tensor, list[Tensor]]:
    """
    Scaled dot-product attention, optionally multi-head.

    With `gamma`, logits are scaled elementwise by it ("logits") or the
    post-softmax weights are multiplied by it and renormalised ("weights").

    Returns
    -------
    tuple
        Output [a x d] and the per-head weight matrices [a x b].
    """
    d = q.shape[1]
    if k.shape[1] != d or v.shape[1] != d or k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention shapes disagree: Q {q.shape}, K {k.shape}, V {v.shape}")
    if d % n_heads:
        raise ShapeError(f"width {d} is not divisible by {n_heads} heads")
    if mask is not None and not np.asarray(mask).any(axis=1).all():
        raise ValueError("attention row is fully masked: no valid key")
    if gamma is not None and gamma_placement == "weights":
        log_gamma = np.log(np.where(gamma > 0, gamma, 1.0))

    head_dim = d // n_heads
    outputs, weights = [], []
    for h in range(n_heads):
        if n_heads == 1:
            qh, kh, vh = q, k, v
        else:
            lo, hi = h * head_dim, (h + 1) * head_dim
            qh, kh, vh = slice_cols(q, lo, hi), slice_cols(k, lo, hi), slice_cols(v, lo, hi)
        logits = scale(matmul(qh, transpose(kh)), 1.0 / math.sqrt(head_dim))
        if gamma is not None:
            if gamma_placement == "logits":
                logits = mul(logits, gamma)
            elif gamma_placement == "weights":
                logits = add(logits, log_gamma)
            else:
                raise ValueError(f"unknown gamma placement {gamma_placement!r}")
        w = softmax(logits, axis=1, mask=mask)
        outputs.append(matmul(w, vh))
        weights.append(w)
    out = outputs[0] if n_heads == 1 else concat(outputs, axis=1)
    return out, weights


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: Optional[NDArray[np.bool_]] = None,
    n_heads: int = 1,
) -> Tensor:
    return attention_with_weights(q, k, v, mask=mask, n_heads=n_heads)[0]


def ffn(y: Tensor, block: AttentionBlockParams) -> Tensor:
    """ReLU(Y W1 + b1) W2 + b2, row by row."""
    hidden = relu(add(matmul(y, block.w1), block.b1))
    return add(matmul(hidden, block.w2), block.b2)


def long_term_forward(
    blocks: list[AttentionBlockParams],
    tables: EmbeddingTables,
    user: int,
    locations: ArrayLike,
    slots: ArrayLike,
    n_heads: int = 1,
    l_max: int = L_MAX,
) -> Tensor:
    """
    h_L for one user from the concatenated historical check-ins, truncated to
    the most recent `l_max` records.

    Raises
    ------
    ValueError
        If the history is empty.
    """
    locations = np.asarray(locations, dtype=np.int64)[-l_max:]
    slots = np.asarray(slots, dtype=np.int64)[-l_max:]
    if locations.size == 0:
        raise ValueError("long-term module needs at least one historical check-in")

    x_q = build_queries(tables, user, slots)
    x_kv = gather_rows(tables.location, locations)
    for block in blocks:
        y = attention(
            matmul(x_q, block.w_q),
            matmul(x_kv, block.w_k),
            matmul(x_kv, block.w_v),
            n_heads=n_heads,
        )
        x_q = x_kv = ffn(y, block)
    return mean(x_kv, axis=0)
