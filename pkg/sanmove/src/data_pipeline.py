"""
Check-in parsing, sessionization, filtering, splitting and vocabularies.

The stages follow the Foursquare preprocessing recipe: drop users with fewer
than 10 raw check-ins, cut each trajectory into sub-trajectories at gaps of
72 hours, de-duplicate same-venue check-ins less than 10 minutes apart, drop
sessions shorter than 5 and users left with fewer than 5 sessions, then keep
the first 80% of every user's sessions for training.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from itertools import groupby
from typing import BinaryIO, Iterable, Optional, Sequence, TextIO, Union

import numpy as np
import pandas as pd
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from sanmove.src.errors import DataError
from sanmove.src.logger_download import logger

N_SLOTS = 48
FOURSQUARE_TIME_FORMAT = "%a %b %d %H:%M:%S %z %Y"


class CheckIn(BaseModel):
    model_config = ConfigDict(frozen=True)

    user_id: str = Field(..., min_length=1)
    location_id: str = Field(..., min_length=1)
    timestamp: int = Field(..., description="Seconds since epoch, UTC")
    tz_offset_min: int = 0
    lat: float
    lon: float

    @field_validator("lat")
    def validate_lat(cls, v):
        if not -90.0 <= v <= 90.0:
            raise ValueError("lat out of range")
        return v

    @field_validator("lon")
    def validate_lon(cls, v):
        if not -180.0 <= v <= 180.0:
            raise ValueError("lon out of range")
        return v

    @field_validator("timestamp")
    def validate_timestamp(cls, v):
        if v <= 0:
            raise ValueError("timestamp must be positive")
        return v


@dataclass(frozen=True)
class Reject:
    line_number: int
    reason: str
    line: str

    def __str__(self) -> str:
        return f"{self.line_number}\t{self.reason}\t{self.line}"


@dataclass(frozen=True)
class Session:
    records: tuple[CheckIn, ...]

    def __len__(self) -> int:
        return len(self.records)

    @property
    def start(self) -> int:
        return self.records[0].timestamp


@dataclass(frozen=True)
class UserTrajectory:
    user_id: str
    sessions: tuple[Session, ...]
    raw_record_count: int

    @property
    def record_count(self) -> int:
        return int(np.sum([len(s) for s in self.sessions])) if self.sessions else 0


@dataclass(frozen=True)
class Vocab:
    user_index: dict[str, int]
    location_index: dict[str, int]
    location_coords: NDArray[np.float64]
    pad_location: int = 0

    @property
    def n_users(self) -> int:
        return len(self.user_index)

    @property
    def n_locations(self) -> int:
        return len(self.location_index)

    def encode_location(self, location_id: str) -> int:
        return self.location_index.get(location_id, self.pad_location)


@dataclass(frozen=True)
class SlotSimilarityTable:
    lam: NDArray[np.float64]
    slot_locations: tuple[frozenset[int], ...] = field(default=())


@dataclass(frozen=True)
class EncodedSession:
    user: int
    locations: NDArray[np.int64]
    timestamps: NDArray[np.int64]
    slots: NDArray[np.int64]

    def __len__(self) -> int:
        return int(self.locations.shape[0])


@dataclass(frozen=True)
class PreparedDataset:
    vocab: Vocab
    train: dict[int, list[EncodedSession]]
    test: dict[int, list[EncodedSession]]
    slot_table: SlotSimilarityTable


class PreprocessConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    gap_hours: float = Field(72.0, gt=0)
    merge_minutes: float = Field(10.0, ge=0)
    min_user_records: int = Field(10, ge=1)
    min_session_records: int = Field(5, ge=1)
    min_user_sessions: int = Field(5, ge=2)
    train_ratio: float = Field(0.8, gt=0, lt=1)
    workers: int = Field(1, ge=1)


def _parse_foursquare_line(line: str) -> CheckIn:
    parts = line.rstrip("\r\n").split("\t")
    if len(parts) != 8:
        raise DataError(f"expected 8 tab-separated columns, got {len(parts)}")
    user_id, venue_id, _, _, lat, lon, tz_offset, utc_time = parts
    try:
        lat_value, lon_value = float(lat), float(lon)
        tz_value = int(tz_offset)
    except ValueError as e:
        raise DataError(f"bad numeric field: {e}") from e
    try:
        moment = datetime.strptime(utc_time.strip(), FOURSQUARE_TIME_FORMAT)
    except ValueError as e:
        raise DataError(f"bad timestamp {utc_time!r}") from e
    return CheckIn(
        user_id=user_id,
        location_id=venue_id,
        timestamp=int(moment.timestamp()),
        tz_offset_min=tz_value,
        lat=lat_value,
        lon=lon_value,
    )


LINE_PARSERS = {"foursquare": _parse_foursquare_line}


def _validation_reason(error: ValidationError) -> str:
    message = str(error.errors()[0]["msg"])
    return message.removeprefix("Value error, ")


def parse_checkins(
    source: Union[TextIO, BinaryIO],
    fmt: str = "foursquare",
    rejects: Optional[list[Reject]] = None,
) -> list[CheckIn]:
    """
    Parse a check-in text stream into `CheckIn` records, in file order.

    Malformed lines are skipped and, when `rejects` is given, appended to it
    with their 1-based line number and a reason. A binary stream is decoded
    line by line as UTF-8, so an undecodable line is rejected like any other.
    """
    if fmt not in LINE_PARSERS:
        raise DataError(f"unknown check-in format {fmt!r}")
    parse_line = LINE_PARSERS[fmt]
    records = []
    n_rejected = 0
    for line_number, line in enumerate(source, start=1):
        if not line.strip():
            continue
        try:
            if isinstance(line, bytes):
                line = line.decode("utf-8")
            records.append(parse_line(line))
        except UnicodeDecodeError as e:
            reason = f"invalid UTF-8 at byte {e.start}"
            line = e.object.decode("utf-8", errors="replace")
        except ValidationError as e:
            reason = _validation_reason(e)
        except DataError as e:
            reason = str(e)
        else:
            continue
        n_rejected += 1
        if rejects is not None:
            rejects.append(Reject(line_number, reason, line.rstrip("\r\n")))
    if n_rejected:
        logger.warning(f"[Pipeline] Rejected {n_rejected} malformed lines")
    logger.info(f"[Pipeline] Parsed {len(records)} check-ins")
    return records


def sessionize(
    records: Sequence[CheckIn],
    gap_hours: float = 72.0,
    merge_minutes: float = 10.0,
) -> list[Session]:
    """
    Split one user's time-ordered check-ins into sessions.

    A new session starts when the gap to the previous kept record is at
    least `gap_hours`; within a session a record at the same venue less than
    `merge_minutes` after the previous kept record is dropped.

    Raises
    ------
    ValueError
        If the records are not sorted by timestamp.
    """
    gap = gap_hours * 3600.0
    merge = merge_minutes * 60.0
    sessions: list[list[CheckIn]] = []
    previous: Optional[CheckIn] = None
    last_seen = None
    for record in records:
        if last_seen is not None and record.timestamp < last_seen:
            raise ValueError(
                f"sessionize needs records sorted by timestamp: "
                f"{record.timestamp} after {last_seen}"
            )
        last_seen = record.timestamp
        if previous is None or record.timestamp - previous.timestamp >= gap:
            sessions.append([record])
        elif (
            record.location_id == previous.location_id
            and record.timestamp - previous.timestamp < merge
        ):
            continue
        else:
            sessions[-1].append(record)
        previous = record
    return [Session(tuple(s)) for s in sessions]


def filter_dataset(
    users: Iterable[UserTrajectory],
    min_user_records: int = 10,
    min_session_records: int = 5,
    min_user_sessions: int = 5,
) -> list[UserTrajectory]:
    """Apply the user, session and session-count thresholds in that order."""
    kept = []
    for user in users:
        if user.raw_record_count < min_user_records:
            continue
        sessions = tuple(s for s in user.sessions if len(s) >= min_session_records)
        if len(sessions) < min_user_sessions:
            continue
        kept.append(UserTrajectory(user.user_id, sessions, user.raw_record_count))
    return kept


def split_train_test(
    user: UserTrajectory, ratio: float = 0.8
) -> tuple[list[Session], list[Session]]:
    """
    Chronological split: the first ceil(ratio * n) sessions train, the rest
    test, keeping at least one test session.
    """
    n = len(user.sessions)
    if n < 2:
        raise ValueError(f"user {user.user_id} has {n} session(s), cannot split")
    n_train = min(math.ceil(round(ratio * n, 9)), n - 1)
    return list(user.sessions[:n_train]), list(user.sessions[n_train:])


def build_vocab(train_sessions: dict[str, list[Session]]) -> Vocab:
    """
    Dense ids from the training split: users 0..M-1 and locations 1..N in
    sorted external-id order; index 0 is the padding location. Coordinates
    are the mean over all training check-ins at each venue.

    Raises
    ------
    DataError
        If the training split holds no check-ins.
    """
    records = [r for sessions in train_sessions.values() for s in sessions for r in s.records]
    if not records:
        raise DataError("cannot build a vocabulary from an empty training set")
    user_index = {u: i for i, u in enumerate(sorted(train_sessions))}
    location_ids = sorted({r.location_id for r in records})
    location_index = {loc: i + 1 for i, loc in enumerate(location_ids)}

    frame = pd.DataFrame(
        {
            "index": [location_index[r.location_id] for r in records],
            "lat": [r.lat for r in records],
            "lon": [r.lon for r in records],
        }
    )
    means = frame.groupby("index")[["lat", "lon"]].mean().sort_index()
    coords = np.full((len(location_ids) + 1, 2), np.nan)
    coords[means.index.to_numpy()] = means.to_numpy()
    return Vocab(user_index, location_index, coords)


def time_to_slot(timestamp: int, tz_offset_min: int = 0) -> int:
    """Weekday hours map to slots 0-23, weekend hours to 24-47 (local time)."""
    local = datetime.fromtimestamp(timestamp + 60 * tz_offset_min, tz=timezone.utc)
    return local.hour if local.weekday() < 5 else 24 + local.hour


def encode_session(session: Session, vocab: Vocab, user: int) -> EncodedSession:
    return EncodedSession(
        user=user,
        locations=np.array([vocab.encode_location(r.location_id) for r in session.records], dtype=np.int64),
        timestamps=np.array([r.timestamp for r in session.records], dtype=np.int64),
        slots=np.array([time_to_slot(r.timestamp, r.tz_offset_min) for r in session.records], dtype=np.int64),
    )


def compute_slot_table(
    train_sessions: Iterable[EncodedSession], n_slots: int = N_SLOTS
) -> SlotSimilarityTable:
    """Jaccard similarity of the location sets seen in each time slot."""
    slot_sets: list[set[int]] = [set() for _ in range(n_slots)]
    for session in train_sessions:
        for location, slot in zip(session.locations.tolist(), session.slots.tolist()):
            if location != 0:
                slot_sets[slot].add(location)
    lam = np.zeros((n_slots, n_slots))
    for c in range(n_slots):
        for j in range(c, n_slots):
            union = len(slot_sets[c] | slot_sets[j])
            if union:
                lam[c, j] = lam[j, c] = len(slot_sets[c] & slot_sets[j]) / union
    return SlotSimilarityTable(lam, tuple(frozenset(s) for s in slot_sets))


def slot_distribution(table: SlotSimilarityTable, slot: int) -> NDArray[np.float64]:
    """Softmax of lambda[slot, :] over all 48 slots (diagnostic only)."""
    row = table.lam[slot]
    e = np.exp(row - row.max())
    return e / e.sum()


@dataclass(frozen=True)
class DatasetStats:
    users: int
    records: int
    locations: int
    sessions: int
    span_days: float

    @property
    def span_months(self) -> float:
        return self.span_days / 30.44

    def to_frame(self, stage: str = "dataset") -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "stage": stage,
                    "users": self.users,
                    "records": self.records,
                    "locations": self.locations,
                    "sessions": self.sessions,
                    "span_days": round(self.span_days, 2),
                }
            ]
        )

    def to_text(self) -> str:
        return (
            f"users: {self.users}\n"
            f"records: {self.records}\n"
            f"locations: {self.locations}\n"
            f"sessions: {self.sessions}\n"
            f"span: {self.span_days:.2f} days (~{self.span_months:.1f} months)\n"
        )


def dataset_stats(dataset: Union[Sequence[CheckIn], Sequence[UserTrajectory]]) -> DatasetStats:
    """Counts for raw check-ins (sessions = 0) or sessionized trajectories."""
    items = list(dataset)
    if not items:
        return DatasetStats(0, 0, 0, 0, 0.0)
    if isinstance(items[0], UserTrajectory):
        records = [r for u in items for s in u.sessions for r in s.records]
        n_sessions = int(np.sum([len(u.sessions) for u in items]))
        users = len({u.user_id for u in items})
    else:
        records = items
        n_sessions = 0
        users = len({r.user_id for r in records})
    if not records:
        return DatasetStats(users, 0, 0, n_sessions, 0.0)
    timestamps = [r.timestamp for r in records]
    return DatasetStats(
        users=users,
        records=len(records),
        locations=len({r.location_id for r in records}),
        sessions=n_sessions,
        span_days=(max(timestamps) - min(timestamps)) / 86400.0,
    )


def _process_user(
    item: tuple[str, list[CheckIn]], config: PreprocessConfig
) -> UserTrajectory:
    user_id, records = item
    ordered = sorted(records, key=lambda r: r.timestamp)
    sessions = sessionize(ordered, config.gap_hours, config.merge_minutes)
    return UserTrajectory(user_id, tuple(sessions), len(records))


def group_by_user(records: Iterable[CheckIn]) -> list[tuple[str, list[CheckIn]]]:
    ordered = sorted(records, key=lambda r: r.user_id)
    return [(user_id, list(group)) for user_id, group in groupby(ordered, key=lambda r: r.user_id)]


def sessionize_users(
    records: Iterable[CheckIn], config: PreprocessConfig
) -> list[UserTrajectory]:
    """Sessionize every user; results come back in user-id order."""
    grouped = group_by_user(records)
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            return list(pool.map(lambda item: _process_user(item, config), grouped))
    return [_process_user(item, config) for item in grouped]


def preprocess(
    records: Iterable[CheckIn], config: Optional[PreprocessConfig] = None
) -> PreparedDataset:
    """
    Run the whole pipeline from raw check-ins to an encoded dataset.

    Raises
    ------
    DataError
        If no user survives filtering.
    """
    config = config or PreprocessConfig()
    users = sessionize_users(records, config)
    logger.info(f"[Pipeline] Sessionized {len(users)} users")
    users = filter_dataset(
        users,
        config.min_user_records,
        config.min_session_records,
        config.min_user_sessions,
    )
    logger.info(f"[Pipeline] {len(users)} users left after filtering")
    if not users:
        raise DataError("no user survives filtering")

    splits = {u.user_id: split_train_test(u, config.train_ratio) for u in users}
    vocab = build_vocab({user_id: train for user_id, (train, _) in splits.items()})

    train: dict[int, list[EncodedSession]] = {}
    test: dict[int, list[EncodedSession]] = {}
    for user_id, (train_sessions, test_sessions) in splits.items():
        index = vocab.user_index[user_id]
        train[index] = [encode_session(s, vocab, index) for s in train_sessions]
        test[index] = [encode_session(s, vocab, index) for s in test_sessions]
    slot_table = compute_slot_table(s for sessions in train.values() for s in sessions)
    logger.info(
        f"[Pipeline] Vocabulary: {vocab.n_users} users, {vocab.n_locations} locations"
    )
    return PreparedDataset(vocab, train, test, slot_table)


def prepared_stats(dataset: PreparedDataset) -> DatasetStats:
    """Counts over the encoded train and test sessions of a prepared dataset."""
    sessions = [s for split in (dataset.train, dataset.test) for user in split.values() for s in user]
    if not sessions:
        return DatasetStats(dataset.vocab.n_users, 0, dataset.vocab.n_locations, 0, 0.0)
    timestamps = np.concatenate([s.timestamps for s in sessions])
    return DatasetStats(
        users=dataset.vocab.n_users,
        records=int(timestamps.size),
        locations=dataset.vocab.n_locations,
        sessions=len(sessions),
        span_days=float(timestamps.max() - timestamps.min()) / 86400.0,
    )
