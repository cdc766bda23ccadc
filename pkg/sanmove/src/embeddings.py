from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.typing import ArrayLike, NDArray

from sanmove.src.autodiff import Tensor, gather_rows
from sanmove.src.data_pipeline import N_SLOTS
from sanmove.src.errors import ConfigError


def time_encoding(t: int, d: int) -> NDArray[np.float64]:
    """
    Sinusoidal encoding of a time slot: sin at even dimensions, cos at odd
    ones, with frequencies 1 / 10000^(2i/d).
    """
    if d % 2:
        raise ConfigError(f"time encoding needs an even width, got d={d}")
    i = np.arange(d // 2)
    angle = t / np.power(10000.0, 2.0 * i / d)
    out = np.empty(d)
    out[0::2] = np.sin(angle)
    out[1::2] = np.cos(angle)
    return out


@lru_cache(maxsize=None)
def _time_table(d: int) -> NDArray[np.float64]:
    table = np.stack([time_encoding(t, d) for t in range(N_SLOTS)])
    table.setflags(write=False)
    return table


def time_table(d: int) -> Tensor:
    """All 48 slot encodings as a constant [48 x d] tensor."""
    return Tensor(_time_table(d))


@dataclass
class EmbeddingTables:
    user: Tensor
    location: Tensor
    d: int

    @classmethod
    def initialize(
        cls,
        n_users: int,
        n_locations: int,
        d: int,
        rng: np.random.Generator,
        init_std: float = 0.02,
    ) -> "EmbeddingTables":
        if d % 2:
            raise ConfigError(f"embedding width must be even, got d={d}")
        user = rng.normal(0.0, init_std, size=(n_users, d))
        location = rng.normal(0.0, init_std, size=(n_locations + 1, d))
        location[0] = 0.0
        return cls(
            user=Tensor(user, requires_grad=True, name="embeddings.user"),
            location=Tensor(location, requires_grad=True, name="embeddings.location"),
            d=d,
        )

    def time_rows(self, slots: ArrayLike) -> Tensor:
        return gather_rows(time_table(self.d), slots)

    def embed_session(
        self, user: int, locations: ArrayLike, slots: ArrayLike
    ) -> tuple[Tensor, Tensor, Tensor]:
        """
        User, location and time rows for one encoded sequence, each [k x d];
        the user row is repeated at every position.
        """
        locations = np.asarray(locations, dtype=np.int64)
        slots = np.asarray(slots, dtype=np.int64)
        if locations.shape != slots.shape:
            raise ValueError(
                f"locations and slots differ in length: {locations.shape} vs {slots.shape}"
            )
        if slots.size and (slots.min() < 0 or slots.max() >= N_SLOTS):
            raise IndexError(f"time slot out of range [0, {N_SLOTS}): {slots.tolist()}")
        user_rows = gather_rows(self.user, np.full(locations.shape[0], user))
        location_rows = gather_rows(self.location, locations)
        return user_rows, location_rows, self.time_rows(slots)
