"""
On-disk form of a preprocessed dataset.

`dataset.txt` is tab-separated text:

    # sanmove-dataset v1
    users     <M>
    locations <N>
    user      <index> <external id>
    location  <index> <external id> <lat> <lon>
    train     <user index> <loc:timestamp:slot> ...
    test      <user index> <loc:timestamp:slot> ...

Session lines are grouped by user, training sessions first, each group in
chronological order. The slot table is rebuilt from the training sessions on
read.
"""

from __future__ import annotations

import os
from typing import Iterable

import numpy as np
import pandas as pd

from sanmove.src.data_pipeline import (
    EncodedSession,
    PreparedDataset,
    Reject,
    Vocab,
    compute_slot_table,
)
from sanmove.src.errors import DataError
from sanmove.src.logger_download import logger

HEADER = "# sanmove-dataset v1"
DATASET_FILE = "dataset.txt"
STATS_FILE = "stats.csv"
REJECTS_FILE = "rejects.txt"


def _session_field(session: EncodedSession) -> str:
    return " ".join(
        f"{loc}:{ts}:{slot}"
        for loc, ts, slot in zip(session.locations.tolist(), session.timestamps.tolist(), session.slots.tolist())
    )


def dataset_lines(dataset: PreparedDataset) -> list[str]:
    vocab = dataset.vocab
    lines = [HEADER, f"users\t{vocab.n_users}", f"locations\t{vocab.n_locations}"]
    for user_id, index in sorted(vocab.user_index.items(), key=lambda item: item[1]):
        lines.append(f"user\t{index}\t{user_id}")
    for location_id, index in sorted(vocab.location_index.items(), key=lambda item: item[1]):
        lat, lon = vocab.location_coords[index]
        lines.append(f"location\t{index}\t{location_id}\t{float(lat)!r}\t{float(lon)!r}")
    for index in sorted(vocab.user_index.values()):
        for split, sessions in (("train", dataset.train), ("test", dataset.test)):
            for session in sessions.get(index, []):
                lines.append(f"{split}\t{index}\t{_session_field(session)}")
    return lines


def write_dataset(dataset: PreparedDataset, directory: str) -> str:
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, DATASET_FILE)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(dataset_lines(dataset)) + "\n")
    logger.info(f"[Pipeline] Dataset written to {path}")
    return path


def _parse_session(user: int, field: str, line_number: int) -> EncodedSession:
    try:
        triples = [tuple(int(v) for v in item.split(":")) for item in field.split()]
    except ValueError as e:
        raise DataError(f"line {line_number}: bad session entry: {e}") from e
    if not triples or any(len(t) != 3 for t in triples):
        raise DataError(f"line {line_number}: session entries must be loc:timestamp:slot")
    locations, timestamps, slots = (np.array(col, dtype=np.int64) for col in zip(*triples))
    return EncodedSession(user, locations, timestamps, slots)


def read_dataset(directory: str) -> PreparedDataset:
    """
    Raises
    ------
    DataError
        On a missing file, an unknown format version or a malformed line.
    """
    path = os.path.join(directory, DATASET_FILE)
    if not os.path.exists(path):
        raise DataError(f"no dataset at {path}")
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != HEADER:
        raise DataError(f"unknown dataset format in {path}: {lines[0] if lines else ''!r}")

    counts: dict[str, int] = {}
    user_index: dict[str, int] = {}
    locations: dict[int, tuple[str, float, float]] = {}
    train: dict[int, list[EncodedSession]] = {}
    test: dict[int, list[EncodedSession]] = {}
    for line_number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        kind = parts[0]
        try:
            if kind in ("users", "locations"):
                counts[kind] = int(parts[1])
            elif kind == "user":
                user_index[parts[2]] = int(parts[1])
            elif kind == "location":
                locations[int(parts[1])] = (parts[2], float(parts[3]), float(parts[4]))
            elif kind in ("train", "test"):
                user = int(parts[1])
                target = train if kind == "train" else test
                target.setdefault(user, []).append(_parse_session(user, parts[2], line_number))
            else:
                raise DataError(f"line {line_number}: unknown record kind {kind!r}")
        except DataError:
            raise
        except (IndexError, ValueError) as e:
            raise DataError(f"line {line_number}: malformed {kind!r} line") from e

    n_users, n_locations = counts.get("users"), counts.get("locations")
    if n_users != len(user_index) or n_locations != len(locations):
        raise DataError(
            f"header counts ({n_users} users, {n_locations} locations) do not match "
            f"the {len(user_index)} user and {len(locations)} location lines"
        )
    if sorted(locations) != list(range(1, n_locations + 1)):
        raise DataError("location indices must run from 1 to N")
    coords = np.full((n_locations + 1, 2), np.nan)
    for index, (_, lat, lon) in locations.items():
        coords[index] = (lat, lon)
    vocab = Vocab(user_index, {loc_id: index for index, (loc_id, _, _) in locations.items()}, coords)
    for index in user_index.values():
        train.setdefault(index, [])
        test.setdefault(index, [])
    slot_table = compute_slot_table(s for sessions in train.values() for s in sessions)
    return PreparedDataset(vocab, train, test, slot_table)


def write_stats(frame: pd.DataFrame, directory: str) -> str:
    path = os.path.join(directory, STATS_FILE)
    frame.to_csv(path, index=False)
    return path


def write_rejects(rejects: Iterable[Reject], directory: str) -> str:
    path = os.path.join(directory, REJECTS_FILE)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for reject in rejects:
            f.write(f"{reject}\n")
    return path
