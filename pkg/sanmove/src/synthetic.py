"""
Synthetic check-in generators for learnability, ablation and timing runs.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from sanmove.src.data_pipeline import (
    CheckIn,
    EncodedSession,
    PreparedDataset,
    Vocab,
    compute_slot_table,
    time_to_slot,
)

START_TS = 1_333_324_800  # 2012-04-02 00:00 UTC, a Monday
HOUR = 3600
SESSION_GAP = 4 * 24 * HOUR
WEEK = 7 * 24 * HOUR
CENTER = (40.75, -73.98)


def ring_coords(n_locations: int, radius_km: float = 3.0) -> np.ndarray:
    """Locations evenly spaced on a circle; neighbours on the ring are nearest in space."""
    angles = 2.0 * math.pi * np.arange(n_locations) / n_locations
    dlat = radius_km / 111.0
    dlon = radius_km / (111.0 * math.cos(math.radians(CENTER[0])))
    return np.stack([CENTER[0] + dlat * np.sin(angles), CENTER[1] + dlon * np.cos(angles)], axis=1)


def _checkins_from_walks(
    walks: list[list[list[int]]],
    coords: np.ndarray,
    tz_offset_min: int = 0,
    first_hours: Optional[Sequence[int]] = None,
    session_gap: int = SESSION_GAP,
) -> list[CheckIn]:
    records = []
    for u, sessions in enumerate(walks):
        ts = START_TS + u * 600
        if first_hours is not None:
            ts += first_hours[u] * HOUR
        for session in sessions:
            for step, loc in enumerate(session):
                records.append(
                    CheckIn(
                        user_id=f"user{u:03d}",
                        location_id=f"loc{loc:03d}",
                        timestamp=ts + step * HOUR,
                        tz_offset_min=tz_offset_min,
                        lat=float(coords[loc, 0]),
                        lon=float(coords[loc, 1]),
                    )
                )
            ts += session_gap
    return records


def cycle_checkins(
    n_users: int = 20,
    n_locations: int = 10,
    sessions_per_user: int = 6,
    session_len: int = 6,
    noise: float = 0.05,
    seed: int = 0,
    train_ratio: float = 0.8,
) -> list[CheckIn]:
    """
    Every user walks the cycle loc000 -> loc001 -> ... -> loc000, starting at a
    user-dependent offset. With probability `noise` a check-in in a training
    session is replaced by a random location; test sessions stay clean.
    """
    rng = np.random.default_rng(seed)
    n_train = min(math.ceil(round(train_ratio * sessions_per_user, 9)), sessions_per_user - 1)
    walks = []
    for u in range(n_users):
        position = u % n_locations
        sessions = []
        for j in range(sessions_per_user):
            session = []
            for _ in range(session_len):
                loc = position
                if j < n_train and noise and rng.random() < noise:
                    loc = int(rng.integers(n_locations))
                session.append(loc)
                position = (position + 1) % n_locations
            sessions.append(session)
        walks.append(sessions)
    return _checkins_from_walks(walks, ring_coords(n_locations))


def preference_checkins(
    n_users: int = 40,
    n_locations: int = 16,
    sessions_per_user: int = 6,
    noise: float = 0.05,
    seed: int = 0,
    train_ratio: float = 0.8,
) -> list[CheckIn]:
    """
    Every user has a favourite venue on the ring and a fixed hour of the week
    at which their sessions start. A session starts 4 to 7 ring steps away
    from the favourite, on a random side, and walks to it one neighbouring
    venue per hour, so the favourite ends every session.

    The favourite is only recoverable from the user's history and each step
    goes to a nearby venue at a recurring time slot. With probability `noise`
    a check-in in a training session is replaced by a random location; test
    sessions stay clean.
    """
    rng = np.random.default_rng(seed)
    n_train = min(math.ceil(round(train_ratio * sessions_per_user, 9)), sessions_per_user - 1)
    max_steps = min(7, n_locations // 2 - 1)
    if max_steps < 4:
        raise ValueError(f"need at least 10 locations for walks of 5 check-ins, got {n_locations}")
    walks, first_hours = [], []
    for u in range(n_users):
        favourite = int(rng.integers(n_locations))
        sessions = []
        for j in range(sessions_per_user):
            steps = int(rng.integers(4, max_steps + 1))
            side = 1 if rng.random() < 0.5 else -1
            session = []
            for remaining in range(steps, -1, -1):
                loc = (favourite + side * remaining) % n_locations
                if j < n_train and noise and rng.random() < noise:
                    loc = int(rng.integers(n_locations))
                session.append(loc)
            sessions.append(session)
        walks.append(sessions)
        first_hours.append(7 + 2 * (u % 6))
    return _checkins_from_walks(
        walks, ring_coords(n_locations), first_hours=first_hours, session_gap=WEEK
    )


def bench_workload(
    n_sessions: int,
    seq_len: int,
    n_locations: int = 50,
    sessions_per_user: int = 10,
    seed: int = 0,
) -> PreparedDataset:
    """
    Encoded random walks of exactly `seq_len` check-ins. Each user gets one
    extra leading session that only serves as history, so the training split
    yields `n_sessions` examples.
    """
    rng = np.random.default_rng(seed)
    n_users = max(1, math.ceil(n_sessions / sessions_per_user))
    coords = np.full((n_locations + 1, 2), np.nan)
    coords[1:] = ring_coords(n_locations)
    vocab = Vocab(
        {f"user{u:05d}": u for u in range(n_users)},
        {f"loc{i:03d}": i for i in range(1, n_locations + 1)},
        coords,
    )
    train: dict[int, list[EncodedSession]] = {}
    remaining = n_sessions
    for u in range(n_users):
        count = min(sessions_per_user, remaining)
        remaining -= count
        ts = START_TS
        sessions = []
        for _ in range(count + 1):
            timestamps = ts + HOUR * np.arange(seq_len, dtype=np.int64)
            steps = rng.integers(-2, 3, size=seq_len)
            locations = (int(rng.integers(n_locations)) + np.cumsum(steps)) % n_locations + 1
            slots = np.array([time_to_slot(int(t)) for t in timestamps], dtype=np.int64)
            sessions.append(EncodedSession(u, locations.astype(np.int64), timestamps, slots))
            ts += SESSION_GAP + seq_len * HOUR
        train[u] = sessions
    test = {u: [] for u in train}
    slot_table = compute_slot_table(s for sessions in train.values() for s in sessions)
    return PreparedDataset(vocab, train, test, slot_table)
