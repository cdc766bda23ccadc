"""
Short-term preference learning with spatial-temporal guided non-invasive
self-attention.

Queries and keys come from the integrated embedding e_u + e_t + e_l + h_L,
values from the pure location embedding. Attention is causal, and each
query-key logit is scaled by a weight Gamma built from time-slot similarity
and inverse geographic distance between the two check-ins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from sanmove.src.autodiff import Tensor, add, matmul, reshape, slice_rows
from sanmove.src.data_pipeline import SlotSimilarityTable
from sanmove.src.embeddings import EmbeddingTables
from sanmove.src.long_term import AttentionBlockParams, attention_with_weights, ffn

EARTH_RADIUS_KM = 6371.0
MIN_DISTANCE_KM = 0.1
MAX_INVERSE_DISTANCE = 10.0


class StnovaMode(str, Enum):
    FULL = "full"
    INVASIVE = "nova"
    NO_PERSONAL = "no-p"
    NO_ST = "no-st"


@dataclass(frozen=True)
class StContext:
    slots: NDArray[np.int64]
    coords: NDArray[np.float64]
    slot_table: SlotSimilarityTable

    def __post_init__(self):
        if len(self.slots) != len(self.coords):
            raise ValueError(
                f"context lengths differ: {len(self.slots)} slots, {len(self.coords)} coords"
            )


def haversine_km(p1: tuple[float, float], p2: tuple[float, float]) -> float:
    """Great-circle distance between two (lat, lon) points in degrees."""
    lat1, lon1 = p1
    lat2, lon2 = p2
    if any(math.isnan(v) for v in (lat1, lon1, lat2, lon2)):
        return math.nan
    lat1_rad = math.radians(lat1)
    lat2_rad = math.radians(lat2)
    dlat = math.radians(lat2 - lat1)
    dlon = math.radians(lon2 - lon1)
    a = math.sin(dlat / 2) ** 2 + math.cos(lat1_rad) * math.cos(lat2_rad) * math.sin(dlon / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(a)))


def pairwise_haversine_km(coords: NDArray[np.float64]) -> NDArray[np.float64]:
    """[k x k] distances; rows or columns with NaN coordinates stay NaN."""
    lat = np.radians(coords[:, 0])
    lon = np.radians(coords[:, 1])
    dlat = lat[None, :] - lat[:, None]
    dlon = lon[None, :] - lon[:, None]
    a = np.sin(dlat / 2) ** 2 + np.cos(lat[:, None]) * np.cos(lat[None, :]) * np.sin(dlon / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.minimum(1.0, np.sqrt(a)))


def _normalize(logits: NDArray[np.float64]) -> NDArray[np.float64]:
    e = np.exp(logits - logits.max())
    return e / e.sum()


def _spatial_logits(distances: NDArray[np.float64]) -> NDArray[np.float64]:
    # unknown coordinates contribute the neutral logit 0
    clamped = np.maximum(np.nan_to_num(distances, nan=np.inf), MIN_DISTANCE_KM)
    return np.minimum(1.0 / clamped, MAX_INVERSE_DISTANCE)


def temporal_weights(i: int, context: StContext) -> NDArray[np.float64]:
    """Softmax of lambda(slot_i, slot_k) over key positions k <= i."""
    lam = context.slot_table.lam
    return _normalize(lam[context.slots[i], context.slots[: i + 1]])


def spatial_weights(i: int, context: StContext) -> NDArray[np.float64]:
    """Softmax of min(1 / max(d_km, 0.1), 10) over key positions k <= i."""
    distances = np.array(
        [haversine_km(tuple(context.coords[i]), tuple(context.coords[k])) for k in range(i + 1)]
    )
    return _normalize(_spatial_logits(distances))


def gamma(alpha_t: ArrayLike, alpha_s: ArrayLike) -> NDArray[np.float64]:
    alpha_t = np.asarray(alpha_t, dtype=np.float64)
    alpha_s = np.asarray(alpha_s, dtype=np.float64)
    if alpha_t.shape != alpha_s.shape:
        raise ValueError(f"alpha shapes differ: {alpha_t.shape} vs {alpha_s.shape}")
    return _normalize(alpha_t + alpha_s)


def _causal_softmax(logits: NDArray[np.float64]) -> NDArray[np.float64]:
    causal = np.tril(np.ones(logits.shape, dtype=bool))
    z = np.where(causal, logits, -np.inf)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def gamma_matrix(context: StContext, mode: StnovaMode = StnovaMode.FULL) -> NDArray[np.float64]:
    """
    Row i holds Gamma for query i over keys k <= i (zeros above the
    diagonal); all ones under NO_ST.
    """
    k = len(context.slots)
    if mode == StnovaMode.NO_ST:
        return np.ones((k, k))
    alpha_t = _causal_softmax(context.slot_table.lam[np.ix_(context.slots, context.slots)])
    alpha_s = _causal_softmax(_spatial_logits(pairwise_haversine_km(context.coords)))
    causal = np.tril(np.ones((k, k), dtype=bool))
    return np.where(causal, _causal_softmax(alpha_t + alpha_s), 0.0)


def integrated_embedding(
    user_rows: Tensor,
    time_rows: Tensor,
    location_rows: Tensor,
    h_long: Optional[Tensor],
    mode: StnovaMode = StnovaMode.FULL,
) -> Tensor:
    """e_z = e_u + e_t + e_l + h_L; h_L is left out under NO_PERSONAL."""
    return add(location_rows, side_information(user_rows, time_rows, h_long, mode))


def side_information(
    user_rows: Tensor,
    time_rows: Tensor,
    h_long: Optional[Tensor],
    mode: StnovaMode = StnovaMode.FULL,
) -> Tensor:
    side = add(user_rows, time_rows)
    if h_long is not None and mode != StnovaMode.NO_PERSONAL:
        side = add(side, h_long)
    return side


@dataclass
class StnovaOutput:
    outputs: Tensor
    readouts: Tensor
    h_s: Tensor
    weights: list[Tensor]
    values: Tensor
    attended: Tensor


def stnova_forward(
    blocks: list[AttentionBlockParams],
    tables: EmbeddingTables,
    user: int,
    locations: ArrayLike,
    context: StContext,
    h_long: Optional[Tensor],
    mode: Union[StnovaMode, str] = StnovaMode.FULL,
    n_heads: int = 1,
    readout: str = "last",
    gamma_placement: str = "logits",
) -> StnovaOutput:
    """
    Causal STNOVA over a recent sequence.

    Returns per-position outputs [k x d], the per-prefix readouts (each row
    is h_s for the prefix ending there: the row itself, or the prefix mean
    with readout="mean") and h_s for the whole sequence. The weights, value
    rows and pre-FFN attention output of the final layer are kept for
    inspection.

    Raises
    ------
    ValueError
        If the sequence is empty.
    """
    mode = StnovaMode(mode)
    locations = np.asarray(locations, dtype=np.int64)
    k = locations.shape[0]
    if k == 0:
        raise ValueError("STNOVA needs at least one recent check-in")

    user_rows, location_rows, time_rows = tables.embed_session(user, locations, context.slots)
    side = side_information(user_rows, time_rows, h_long, mode)
    g = gamma_matrix(context, mode)
    causal = np.tril(np.ones((k, k), dtype=bool))

    item = location_rows
    for block in blocks:
        fused = add(item, side)
        value_source = fused if mode == StnovaMode.INVASIVE else item
        values = matmul(value_source, block.w_v)
        attended, weights = attention_with_weights(
            matmul(fused, block.w_q),
            matmul(fused, block.w_k),
            values,
            mask=causal,
            n_heads=n_heads,
            gamma=g,
            gamma_placement=gamma_placement,
        )
        item = ffn(attended, block)

    if readout == "last":
        readouts = item
    elif readout == "mean":
        prefix_mean = np.tril(np.ones((k, k))) / np.arange(1, k + 1)[:, None]
        readouts = matmul(Tensor(prefix_mean), item)
    else:
        raise ValueError(f"unknown readout {readout!r}")
    h_s = reshape(slice_rows(readouts, k - 1, k), (item.shape[1],))
    return StnovaOutput(item, readouts, h_s, weights, values, attended)
