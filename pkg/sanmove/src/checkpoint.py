"""
Binary checkpoints.

Layout: the magic bytes "SANMOVE1", then for each tensor in name order the
name length and UTF-8 name, the rank, one extent per axis (all unsigned
64-bit little-endian) and the values as little-endian float64. The file ends
after the last tensor.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Union

import numpy as np
from numpy.typing import NDArray

from sanmove.src.autodiff import Tensor
from sanmove.src.errors import BadMagicError, TruncatedCheckpointError
from sanmove.src.logger_download import logger
from sanmove.src.predictor import ModelParams

MAGIC = b"SANMOVE1"
_U64 = struct.Struct("<Q")


def encode_tensors(tensors: dict[str, NDArray[np.float64]]) -> bytes:
    chunks = [MAGIC]
    for name in sorted(tensors):
        values = np.asarray(tensors[name], dtype="<f8", order="C")
        encoded = name.encode("utf-8")
        chunks.append(_U64.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_U64.pack(values.ndim))
        chunks.extend(_U64.pack(extent) for extent in values.shape)
        chunks.append(values.tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"checkpoint ends inside {what}: need {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u64(self, what: str) -> int:
        return _U64.unpack(self.take(_U64.size, what))[0]

    @property
    def exhausted(self) -> bool:
        return self.pos >= len(self.data)


def decode_tensors(data: bytes) -> dict[str, NDArray[np.float64]]:
    """
    Raises
    ------
    BadMagicError
        If the file does not start with the magic bytes.
    TruncatedCheckpointError
        If the file ends inside a record.
    """
    head = data[: len(MAGIC)]
    if head != MAGIC:
        if len(head) < len(MAGIC) and MAGIC.startswith(head):
            raise TruncatedCheckpointError(f"checkpoint is only {len(data)} bytes long")
        raise BadMagicError(f"not a SanMove checkpoint: magic {head!r}")
    reader = _Reader(data)
    reader.pos = len(MAGIC)
    tensors = {}
    while not reader.exhausted:
        name_length = reader.u64("a name length")
        name = reader.take(name_length, "a tensor name").decode("utf-8")
        rank = reader.u64(f"the rank of {name}")
        shape = tuple(reader.u64(f"the extents of {name}") for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        payload = reader.take(8 * count, f"the values of {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    return tensors


def save_checkpoint(params: Union[ModelParams, dict[str, Tensor]], path: str) -> None:
    named = params.named_tensors() if isinstance(params, ModelParams) else params
    data = encode_tensors({name: t.data for name, t in named.items()})
    with open(path, "wb") as f:
        f.write(data)
    logger.info(f"[Checkpoint] Saved {len(named)} tensors to {path}")


def read_checkpoint(source: Union[str, BinaryIO]) -> dict[str, NDArray[np.float64]]:
    if isinstance(source, str):
        with open(source, "rb") as f:
            return decode_tensors(f.read())
    return decode_tensors(source.read())


def load_checkpoint(path: str) -> ModelParams:
    """
    Load a SanMove model; nothing is returned unless the whole file decodes
    and every tensor name is known.
    """
    params = ModelParams.from_arrays(read_checkpoint(path))
    logger.info(f"[Checkpoint] Loaded {path}")
    return params
