"""
Comparison models: a first-order Markov chain over locations and a
single-layer LSTM over location embeddings with the SanMove prediction head.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
from numpy.typing import NDArray

from sanmove.src.autodiff import (
    Tensor,
    add,
    concat,
    gather_rows,
    matmul,
    mul,
    sigmoid,
    slice_cols,
    slice_rows,
    tanh,
)
from sanmove.src.data_pipeline import EncodedSession, PreparedDataset
from sanmove.src.predictor import SequenceExample, nll_loss, predict_distribution


class MarkovModel:
    """
    Transition counts between consecutive check-ins of the training sessions.

    A prefix is scored by the counts out of its last location; when that
    location has no recorded transition (or is unknown) global visit
    popularity is used instead.
    """

    def __init__(self, n_locations: int):
        self.n_locations = n_locations
        self.transitions = np.zeros((n_locations + 1, n_locations + 1), dtype=np.int64)
        self.popularity = np.zeros(n_locations + 1, dtype=np.int64)

    @classmethod
    def from_dataset(cls, dataset: PreparedDataset) -> "MarkovModel":
        model = cls(dataset.vocab.n_locations)
        model.fit(s for sessions in dataset.train.values() for s in sessions)
        return model

    def fit(self, sessions: Iterable[EncodedSession]) -> "MarkovModel":
        for session in sessions:
            locations = session.locations
            np.add.at(self.popularity, locations, 1)
            np.add.at(self.transitions, (locations[:-1], locations[1:]), 1)
        self.popularity[0] = 0
        self.transitions[0, :] = 0
        self.transitions[:, 0] = 0
        return self

    def parameters(self) -> dict[str, Tensor]:
        return {}

    def score_after(self, last_location: int) -> NDArray[np.float64]:
        counts = self.transitions[last_location] if 0 < last_location <= self.n_locations else None
        if counts is None or not counts.any():
            counts = self.popularity
        scores = counts.astype(np.float64)
        scores[0] = -np.inf
        return scores

    def full_sort_predict(self, example: SequenceExample) -> NDArray[np.float64]:
        return self.score_after(int(example.inputs[-1]))

    def predict_next(self, example: SequenceExample) -> int:
        return int(np.argmax(self.full_sort_predict(example)))


@dataclass
class LSTMParams:
    embedding: Tensor
    w: Tensor
    u: Tensor
    b: Tensor
    w_p: Tensor

    @classmethod
    def initialize(
        cls, n_locations: int, d: int, rng: np.random.Generator, init_std: float = 0.02
    ) -> "LSTMParams":
        embedding = rng.normal(0.0, init_std, size=(n_locations + 1, d))
        embedding[0] = 0.0
        return cls(
            embedding=Tensor(embedding, requires_grad=True, name="lstm.embedding"),
            w=Tensor(rng.normal(0.0, init_std, size=(d, 4 * d)), requires_grad=True, name="lstm.w"),
            u=Tensor(rng.normal(0.0, init_std, size=(d, 4 * d)), requires_grad=True, name="lstm.u"),
            b=Tensor(np.zeros(4 * d), requires_grad=True, name="lstm.b"),
            w_p=Tensor(rng.normal(0.0, init_std, size=(n_locations + 1, d)), requires_grad=True, name="lstm.w_p"),
        )

    def named_tensors(self) -> dict[str, Tensor]:
        return {t.name: t for t in (self.embedding, self.w, self.u, self.b, self.w_p)}


def lstm_cell(x_proj: Tensor, h: Tensor, c: Tensor, u: Tensor) -> tuple[Tensor, Tensor]:
    """
    One step given the input projection x W + b [1 x 4d]; gate order is
    input, forget, output, candidate.
    """
    d = h.shape[1]
    z = add(x_proj, matmul(h, u))
    i = sigmoid(slice_cols(z, 0, d))
    f = sigmoid(slice_cols(z, d, 2 * d))
    o = sigmoid(slice_cols(z, 2 * d, 3 * d))
    g = tanh(slice_cols(z, 3 * d, 4 * d))
    c_next = add(mul(f, c), mul(i, g))
    return mul(o, tanh(c_next)), c_next


class LSTMBaseline:
    def __init__(self, params: LSTMParams):
        self.params = params

    @classmethod
    def initialize(
        cls, n_locations: int, d: int, rng: np.random.Generator, init_std: float = 0.02
    ) -> "LSTMBaseline":
        return cls(LSTMParams.initialize(n_locations, d, rng, init_std))

    def parameters(self) -> dict[str, Tensor]:
        return self.params.named_tensors()

    def pad_tables(self) -> tuple[str, ...]:
        return ("lstm.embedding",)

    def hidden_states(self, locations: NDArray[np.int64]) -> Tensor:
        """Hidden state after each check-in of the sequence [k x d]."""
        p = self.params
        d = p.w.shape[0]
        x_proj = add(matmul(gather_rows(p.embedding, locations), p.w), p.b)
        h = Tensor(np.zeros((1, d)))
        c = Tensor(np.zeros((1, d)))
        states = []
        for t in range(len(locations)):
            h, c = lstm_cell(slice_rows(x_proj, t, t + 1), h, c, p.u)
            states.append(h)
        return concat(states, axis=0)

    def forward(self, example: SequenceExample) -> Tensor:
        return predict_distribution(None, self.hidden_states(example.inputs), self.params.w_p)

    def calculate_loss(self, example: SequenceExample) -> Tensor:
        return nll_loss(self.forward(example), example.targets)

    def full_sort_predict(self, example: SequenceExample) -> NDArray[np.float64]:
        scores = self.forward(example).data[-1].copy()
        scores[0] = -np.inf
        return scores

    def predict_next(self, example: SequenceExample) -> int:
        return int(np.argmax(self.full_sort_predict(example)))
