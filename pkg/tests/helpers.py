"""Shared test fixtures: a history-independent lattice-backed model and an
independent path-mass oracle for it."""

import numpy as np

from transducer_workbench.lattice import BLANK_ID
from transducer_workbench.numerics import NEG_INF, log_softmax, log_sum_exp


class FixedLatticeModel:
    """Decoder model whose joint depends only on (t, u).

    Backed by a (T, Umax+1, K) log-probability array; the prediction state
    is just the emitted-label count, clamped to the last stored row. Because
    the output distribution ignores label identity, exact path-mass dynamic
    programming over the (t, u) grid is valid for this model, which makes it
    the reference against which search results can be audited.
    """

    def __init__(self, logprob: np.ndarray):
        self.lattice = np.asarray(logprob, dtype=np.float64)
        self.T, self.u_rows, self.K = self.lattice.shape

    @property
    def num_labels(self) -> int:
        return self.K - 1

    def encode_features(self, features, aux=None):
        return np.arange(self.T)

    def init_decode_state(self):
        return 0

    def extend_decode_state(self, state, label):
        return state + 1

    def joint_log_probs(self, h_vec, state):
        return self.lattice[int(h_vec), min(int(state), self.u_rows - 1)]

    def logprob_lattice(self, H, labels):
        U = len(labels)
        rows = np.minimum(np.arange(U + 1), self.u_rows - 1)
        return self.lattice[:, rows, :]


def random_fixed_model(T, u_rows, K, rng) -> FixedLatticeModel:
    return FixedLatticeModel(log_softmax(rng.normal(0, 2, size=(T, u_rows, K))))


def blank_dominant_model(T, u_rows, K) -> FixedLatticeModel:
    logits = np.zeros((T, u_rows, K))
    logits[:, :, BLANK_ID] = 5.0
    return FixedLatticeModel(log_softmax(logits))


def total_mass_over_lengths(model: FixedLatticeModel, max_symbols: int) -> float:
    """log sum over all label sequences with |y| <= max_symbols of p(y|x),
    by label-marginalized path-mass DP (valid because the model's output
    distribution is history independent)."""
    T = model.T
    lat = model.lattice

    def row(u):
        return min(u, model.u_rows - 1)

    label_mass = np.array(
        [
            [log_sum_exp(lat[t, row(u), 1:]) for u in range(max_symbols + 1)]
            for t in range(T)
        ]
    )
    m = np.full((T + 1, max_symbols + 1), NEG_INF)
    m[0, 0] = 0.0
    for t in range(T + 1):
        for u in range(max_symbols + 1):
            if t == 0 and u == 0:
                continue
            parts = []
            if t >= 1:
                parts.append(m[t - 1, u] + lat[t - 1, row(u), BLANK_ID])
            if u >= 1:
                parts.append(m[t, u - 1] + label_mass[min(t, T - 1), u - 1])
            m[t, u] = log_sum_exp(parts)
    return log_sum_exp(m[T, :])
