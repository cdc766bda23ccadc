import numpy as np
import pytest

from sanmove.src import autodiff as ad
from sanmove.src.autodiff import Tensor, grad_check
from sanmove.src.baselines import LSTMBaseline, LSTMParams, MarkovModel, lstm_cell
from sanmove.src.metrics import evaluate, rank_candidates
from sanmove.src.predictor import SequenceExample, build_examples
from sanmove.src.trainer import TrainConfig, Trainer
from tests.conftest import make_session


def prefix(locations):
    locations = np.asarray(locations, dtype=np.int64)
    k = locations.size
    return SequenceExample(
        user=0,
        history_locations=locations[:1],
        history_slots=np.zeros(1, dtype=np.int64),
        locations=locations,
        slots=np.arange(k, dtype=np.int64) % 48,
        coords=np.zeros((k, 2)),
    )


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class TestMarkov:
    def test_cycle_data_is_predicted_exactly(self, cycle_dataset):
        model = MarkovModel.from_dataset(cycle_dataset)
        metrics = evaluate(model, build_examples(cycle_dataset, "test"))
        assert metrics.recall_at[1] == 1.0

    def test_ranks_by_transition_counts(self):
        model = MarkovModel(4).fit([make_session(0, [1, 2, 1, 2, 1, 3])])
        ranked = rank_candidates(model.score_after(1))
        assert list(ranked[:2]) == [2, 3]

    def test_unseen_location_falls_back_to_popularity(self):
        model = MarkovModel(4).fit([make_session(0, [1, 2, 1, 3])])
        scores = model.score_after(4)
        np.testing.assert_array_equal(scores[1:], [2.0, 1.0, 1.0, 0.0])
        assert scores[0] == -np.inf
        np.testing.assert_array_equal(model.score_after(0), scores)

    def test_ties_go_to_the_lower_index(self):
        model = MarkovModel(4).fit([make_session(0, [1, 3]), make_session(0, [1, 2])])
        assert model.predict_next(prefix([1, 1])) == 2

    def test_transitions_do_not_cross_sessions(self):
        model = MarkovModel(3).fit([make_session(0, [1, 2]), make_session(0, [3, 1])])
        assert model.transitions[2].sum() == 0

    def test_training_order_does_not_matter(self, cycle_dataset):
        sessions = [s for user_sessions in cycle_dataset.train.values() for s in user_sessions]
        forward = MarkovModel(cycle_dataset.vocab.n_locations).fit(sessions)
        backward = MarkovModel(cycle_dataset.vocab.n_locations).fit(reversed(sessions))
        np.testing.assert_array_equal(forward.transitions, backward.transitions)
        np.testing.assert_array_equal(forward.popularity, backward.popularity)


class TestLSTM:
    def test_zero_weights_keep_the_state_at_zero(self):
        d, n = 4, 5
        zeros = LSTMParams(
            embedding=Tensor(np.zeros((n + 1, d))),
            w=Tensor(np.zeros((d, 4 * d))),
            u=Tensor(np.zeros((d, 4 * d))),
            b=Tensor(np.zeros(4 * d)),
            w_p=Tensor(np.zeros((n + 1, d))),
        )
        states = LSTMBaseline(zeros).hidden_states(np.array([1, 3, 5, 2, 4]))
        np.testing.assert_array_equal(states.data, np.zeros((5, d)))

    def test_matches_a_reference_recurrence(self, rng):
        d = 3
        model = LSTMBaseline.initialize(4, d, rng, init_std=0.5)
        p = model.params
        locations = np.array([2, 4, 1])
        h, c = np.zeros(d), np.zeros(d)
        expected = []
        for loc in locations:
            z = p.embedding.data[loc] @ p.w.data + p.b.data + h @ p.u.data
            i, f, o, g = sigmoid(z[:d]), sigmoid(z[d : 2 * d]), sigmoid(z[2 * d : 3 * d]), np.tanh(z[3 * d :])
            c = f * c + i * g
            h = o * np.tanh(c)
            expected.append(h)
        np.testing.assert_allclose(model.hidden_states(locations).data, np.stack(expected), atol=1e-12)

    def test_cell_gradients(self, rng):
        d = 3
        x_proj = Tensor(rng.normal(size=(1, 4 * d)), requires_grad=True)
        h = Tensor(rng.normal(size=(1, d)), requires_grad=True)
        c = Tensor(rng.normal(size=(1, d)), requires_grad=True)
        u = Tensor(rng.normal(0.0, 0.5, size=(d, 4 * d)), requires_grad=True)
        r_h, r_c = rng.normal(size=(1, d)), rng.normal(size=(1, d))

        def readout(h_next, c_next):
            return ad.add(ad.sum(ad.mul(h_next, r_h)), ad.sum(ad.mul(c_next, r_c)))

        assert grad_check(lambda t: readout(*lstm_cell(x_proj, h, c, t)), u) < 1e-5
        assert grad_check(lambda t: readout(*lstm_cell(t, h, c, u)), x_proj) < 1e-5
        assert grad_check(lambda t: readout(*lstm_cell(x_proj, h, t, u)), c) < 1e-5

    def test_scores(self, tiny_dataset, rng):
        model = LSTMBaseline.initialize(tiny_dataset.vocab.n_locations, 8, rng, init_std=0.3)
        example = build_examples(tiny_dataset, "test")[0]
        scores = model.full_sort_predict(example)
        assert scores.shape == (7,)
        assert scores[0] == -np.inf
        assert model.predict_next(example) == int(np.argmax(scores))
        assert model.pad_tables() == ("lstm.embedding",)

    @pytest.mark.slow
    def test_learns_the_cycle(self, cycle_dataset):
        config = TrainConfig(d=32, lr=0.01, weight_decay=0.0, init_std=0.1, epochs=50, seed=0)
        model = LSTMBaseline.initialize(
            cycle_dataset.vocab.n_locations, config.d, np.random.default_rng(config.seed), config.init_std
        )
        Trainer(model, config).fit(build_examples(cycle_dataset, "train"))
        metrics = evaluate(model, build_examples(cycle_dataset, "test"))
        assert metrics.recall_at[1] >= 0.95
