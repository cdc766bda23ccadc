from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np
from numpy.typing import ArrayLike, NDArray

from sanmove.src.autodiff import (
    Tensor,
    add,
    log,
    matmul,
    mean,
    pick,
    scale,
    softmax,
    transpose,
)
from sanmove.src.data_pipeline import PreparedDataset, SlotSimilarityTable, Vocab
from sanmove.src.embeddings import EmbeddingTables
from sanmove.src.errors import ConfigError, UnknownTensorError
from sanmove.src.long_term import AttentionBlockParams, long_term_forward
from sanmove.src.stnova import StContext, StnovaMode, StnovaOutput, stnova_forward

TENSOR_NAME = re.compile(
    r"^(embeddings\.(user|location)"
    r"|(long_term|stnova)\.\d+\.(w_q|w_k|w_v|w1|b1|w2|b2)"
    r"|predictor\.w_p)$"
)


@dataclass(frozen=True)
class SequenceExample:
    """
    One next-location task: a historical pool and a recent sequence whose
    positions 0..k-2 are inputs and 1..k-1 the supervised targets.
    """

    user: int
    history_locations: NDArray[np.int64]
    history_slots: NDArray[np.int64]
    locations: NDArray[np.int64]
    slots: NDArray[np.int64]
    coords: NDArray[np.float64]

    @property
    def inputs(self) -> NDArray[np.int64]:
        return self.locations[:-1]

    @property
    def targets(self) -> NDArray[np.int64]:
        return self.locations[1:]

    def context(self, slot_table: SlotSimilarityTable) -> StContext:
        return StContext(self.slots[:-1], self.coords[:-1], slot_table)


def build_examples(dataset: PreparedDataset, split: str = "train") -> list[SequenceExample]:
    """
    Training examples use every training session after the first, with the
    earlier training sessions as history. Test examples use each test session
    with all earlier sessions of that user as history.
    """
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}")
    vocab = dataset.vocab
    examples = []
    for user in sorted(dataset.train):
        train_sessions = dataset.train[user]
        test_sessions = dataset.test.get(user, [])
        if split == "train":
            pool, targets = [], train_sessions
        else:
            pool, targets = list(train_sessions), test_sessions
        for session in targets:
            if pool and len(session) >= 2:
                examples.append(_make_example(user, pool, session, vocab))
            pool = pool + [session]
    return examples


def _make_example(user, pool, session, vocab: Vocab) -> SequenceExample:
    return SequenceExample(
        user=user,
        history_locations=np.concatenate([s.locations for s in pool]),
        history_slots=np.concatenate([s.slots for s in pool]),
        locations=session.locations,
        slots=session.slots,
        coords=vocab.location_coords[session.locations],
    )


class Recommender(Protocol):
    def parameters(self) -> dict[str, Tensor]: ...

    def calculate_loss(self, example: SequenceExample) -> Tensor: ...

    def full_sort_predict(self, example: SequenceExample) -> NDArray[np.float64]: ...


def predict_distribution(
    h_long: Optional[Tensor], outputs: Tensor, w_p: Tensor
) -> Tensor:
    """
    softmax(W_p (h_L + h_s_i)) over the N+1 locations for every row of
    `outputs`; the pad location 0 is never predicted.
    """
    hidden = outputs if h_long is None else add(outputs, h_long)
    logits = matmul(hidden, transpose(w_p))
    mask = np.ones(logits.shape, dtype=bool)
    mask[:, 0] = False
    return softmax(logits, axis=1, mask=mask)


def nll_loss(probabilities: Tensor, targets: ArrayLike) -> Tensor:
    """
    Mean negative log-likelihood of the targets; pad targets are skipped.

    Raises
    ------
    ValueError
        If every target is the pad location.
    """
    targets = np.asarray(targets, dtype=np.int64)
    rows = np.flatnonzero(targets != 0)
    if rows.size == 0:
        raise ValueError("no supervised position: every target is the pad location")
    return scale(mean(log(pick(probabilities, rows, targets[rows]))), -1.0)


@dataclass
class ModelParams:
    tables: EmbeddingTables
    long_term: list[AttentionBlockParams]
    stnova: list[AttentionBlockParams]
    w_p: Optional[Tensor]

    @classmethod
    def initialize(
        cls,
        n_users: int,
        n_locations: int,
        d: int,
        n_layers: int,
        rng: np.random.Generator,
        init_std: float = 0.02,
        tie_weights: bool = False,
    ) -> "ModelParams":
        tables = EmbeddingTables.initialize(n_users, n_locations, d, rng, init_std)
        long_term = [AttentionBlockParams.initialize(d, rng, f"long_term.{i}", init_std) for i in range(n_layers)]
        stnova = [AttentionBlockParams.initialize(d, rng, f"stnova.{i}", init_std) for i in range(n_layers)]
        w_p = None
        if not tie_weights:
            w_p = Tensor(
                rng.normal(0.0, init_std, size=(n_locations + 1, d)),
                requires_grad=True,
                name="predictor.w_p",
            )
        return cls(tables, long_term, stnova, w_p)

    @property
    def projection(self) -> Tensor:
        return self.tables.location if self.w_p is None else self.w_p

    def named_tensors(self) -> dict[str, Tensor]:
        named = {t.name: t for t in (self.tables.user, self.tables.location)}
        for block in self.long_term + self.stnova:
            named.update(block.named_tensors())
        if self.w_p is not None:
            named[self.w_p.name] = self.w_p
        return named

    @classmethod
    def from_arrays(
        cls, arrays: dict[str, NDArray[np.float64]], n_layers: Optional[int] = None
    ) -> "ModelParams":
        """
        Rebuild parameters from named arrays (checkpoint contents). The layer count
        is read off the names unless given.

        Raises
        ------
        UnknownTensorError
            If a name is not a SanMove parameter.
        ConfigError
            If a required parameter is missing.
        """
        for name in arrays:
            if not TENSOR_NAME.match(name):
                raise UnknownTensorError(f"unknown tensor name {name!r}")
        if n_layers is None:
            n_layers = len({name.split(".")[1] for name in arrays if name.startswith("long_term.")})

        def take(name):
            if name not in arrays:
                raise ConfigError(f"checkpoint misses tensor {name!r}")
            return Tensor(arrays[name], requires_grad=True, name=name)

        user, location = take("embeddings.user"), take("embeddings.location")
        tables = EmbeddingTables(user, location, d=user.shape[1])

        def blocks(prefix):
            return [
                AttentionBlockParams(*(take(f"{prefix}.{i}.{p}") for p in ("w_q", "w_k", "w_v", "w1", "b1", "w2", "b2")))
                for i in range(n_layers)
            ]

        w_p = take("predictor.w_p") if "predictor.w_p" in arrays else None
        return cls(tables, blocks("long_term"), blocks("stnova"), w_p)


class SanMoveModel:
    """
    Long-term self-attention over the historical pool plus STNOVA over the
    recent sequence, combined by the softmax prediction head.
    """

    def __init__(
        self,
        params: ModelParams,
        slot_table: SlotSimilarityTable,
        mode: StnovaMode = StnovaMode.FULL,
        n_heads: int = 1,
        l_max: int = 128,
        readout: str = "last",
        gamma_placement: str = "logits",
    ):
        self.params = params
        self.slot_table = slot_table
        self.mode = StnovaMode(mode)
        self.n_heads = n_heads
        self.l_max = l_max
        self.readout = readout
        self.gamma_placement = gamma_placement

    @classmethod
    def from_config(cls, config, params: ModelParams, slot_table: SlotSimilarityTable) -> "SanMoveModel":
        return cls(
            params,
            slot_table,
            mode=config.mode,
            n_heads=config.n_heads,
            l_max=config.l_max,
            readout=config.readout,
            gamma_placement=config.gamma_placement,
        )

    def parameters(self) -> dict[str, Tensor]:
        return self.params.named_tensors()

    def pad_tables(self) -> tuple[str, ...]:
        return ("embeddings.location",)

    def long_term(self, example: SequenceExample) -> Tensor:
        return long_term_forward(
            self.params.long_term,
            self.params.tables,
            example.user,
            example.history_locations,
            example.history_slots,
            n_heads=self.n_heads,
            l_max=self.l_max,
        )

    def short_term(self, example: SequenceExample, h_long: Optional[Tensor]) -> StnovaOutput:
        return stnova_forward(
            self.params.stnova,
            self.params.tables,
            example.user,
            example.inputs,
            example.context(self.slot_table),
            h_long,
            mode=self.mode,
            n_heads=self.n_heads,
            readout=self.readout,
            gamma_placement=self.gamma_placement,
        )

    def forward(self, example: SequenceExample) -> Tensor:
        """Next-location distributions for every input position [k-1 x N+1]."""
        h_long = self.long_term(example)
        short = self.short_term(example, h_long)
        return predict_distribution(h_long, short.readouts, self.params.projection)

    def calculate_loss(self, example: SequenceExample) -> Tensor:
        return nll_loss(self.forward(example), example.targets)

    def full_sort_predict(self, example: SequenceExample) -> NDArray[np.float64]:
        """Scores over all locations for the final target; pad scores -inf."""
        probabilities = self.forward(example).data[-1].copy()
        probabilities[0] = -np.inf
        return probabilities

    def predict_next(self, example: SequenceExample) -> int:
        return int(np.argmax(self.full_sort_predict(example)))
