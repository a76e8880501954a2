"""Numerical foundation: log-domain arithmetic, seeded random streams,
and the finite-difference gradient oracle.

Everything runs in 64-bit floats. -inf is a legal log-domain value meaning
exact zero probability; NaN is never legal.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation, OracleFailure

NEG_INF = -np.inf


def log_sum_exp(values) -> float:
    """Stable log(sum(exp(values))) for a non-empty list of log-domain values.

    Returns -inf when every element is -inf.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ContractViolation("log_sum_exp of an empty list")
    m = np.max(v)
    if m == NEG_INF:
        return NEG_INF
    return float(m + np.log(np.sum(np.exp(v - m))))


def log_add(a: float, b: float) -> float:
    """log(exp(a) + exp(b)); scalar fast path of log_sum_exp."""
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a < b:
        a, b = b, a
    return a + np.log1p(np.exp(b - a))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Probability vector exp(z)/sum(exp(z)), shift-invariant and stable."""
    z = np.asarray(logits, dtype=np.float64)
    if np.isnan(z).any():
        raise ContractViolation("softmax input contains NaN")
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """log(softmax(z)) computed without leaving the log domain."""
    z = np.asarray(logits, dtype=np.float64)
    if np.isnan(z).any():
        raise ContractViolation("log_softmax input contains NaN")
    m = np.max(z, axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def log_softmax_backward(grad_logprob: np.ndarray, logprob: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. pre-softmax logits given grad w.r.t. log-probabilities.

    d z_k = g_k - exp(logprob_k) * sum_j g_j, applied along the last axis.
    """
    s = np.sum(grad_logprob, axis=-1, keepdims=True)
    return grad_logprob - np.exp(logprob) * s


def finite_difference_gradient(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function at x.

    The oracle every analytic backward pass in this package is checked
    against. Raises OracleFailure naming the coordinate if f returns a
    non-finite value.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleFailure(
                f"non-finite function value at coordinate {i}: f+={fp}, f-={fm}"
            )
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-5) -> float:
    """max |a-b| / max(floor, |a|, |b|), elementwise; scalar summary.

    The floor reflects the noise level of central differences at eps = 1e-5:
    entries larger than the floor must agree to the stated relative error,
    smaller ones to floor * tolerance in absolute terms.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / denom))


_MIX_CONST_1 = 0x9E3779B97F4A7C15
_MIX_CONST_2 = 0xBF58476D1CE4E5B9
_MIX_CONST_3 = 0x94D049BB133111EB
_MASK64 = (1 << 64) - 1


def _splitmix64(z: int) -> int:
    z = (z + _MIX_CONST_1) & _MASK64
    z = ((z ^ (z >> 30)) * _MIX_CONST_2) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX_CONST_3) & _MASK64
    return z ^ (z >> 31)


class RandomStream:
    """Deterministic, splittable random stream.

    Backed by the counter-based Philox generator keyed on (seed, stream id),
    so the draw at a given (seed, stream, index) is identical across runs
    and platforms. `child(*tags)` derives an independent sub-stream; use it
    to give each utterance / epoch / operation its own stream.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self._gen: np.random.Generator | None = None

    @property
    def gen(self) -> np.random.Generator:
        if self._gen is None:
            self._gen = np.random.Generator(
                np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64))
            )
        return self._gen

    def child(self, *tags: int) -> "RandomStream":
        h = self.stream
        for t in tags:
            h = _splitmix64(h ^ (int(t) & _MASK64))
        return RandomStream(self.seed, h)

    # Thin draw delegates so callers never touch the generator directly.
    def random(self, size=None):
        return self.gen.random(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice_weighted(self, weights) -> int:
        """Index drawn from unnormalized nonnegative weights."""
        w = np.asarray(weights, dtype=np.float64)
        total = w.sum()
        if not np.isfinite(total) or total <= 0:
            raise ContractViolation("choice_weighted needs positive finite weights")
        u = self.gen.random() * total
        return int(np.searchsorted(np.cumsum(w), u, side="right").clip(0, w.size - 1))


def pack_arrays(arrays: dict[str, np.ndarray]) -> np.ndarray:
    """Concatenate named arrays (sorted by name) into one flat vector."""
    return np.concatenate([arrays[k].ravel() for k in sorted(arrays)]) if arrays else np.zeros(0)


def unpack_arrays(vector: np.ndarray, template: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Inverse of pack_arrays against a shape template."""
    out = {}
    pos = 0
    for k in sorted(template):
        n = template[k].size
        out[k] = vector[pos : pos + n].reshape(template[k].shape).copy()
        pos += n
    if pos != vector.size:
        raise ContractViolation(f"vector length {vector.size} != template size {pos}")
    return out
