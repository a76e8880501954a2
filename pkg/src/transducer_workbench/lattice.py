"""Exact transducer negative log-likelihood over the T x U lattice.

Conventions (shared with the decoder):

- The augmented vocabulary has the blank symbol at index 0; a label with
  id k (0-based, k < |Y|) lives at lattice slice k+1.
- A lattice node (t, u) means t frames consumed (t blanks emitted) and u
  labels emitted. Blank moves (t, u) -> (t+1, u) and reads lattice row t;
  a label moves (t, u) -> (t, u+1) and reads lattice row min(t, T-1), so
  labels emitted after the final blank condition on the last frame.
- Every interleaving of T blanks and U labels is a valid alignment, so
  there are exactly C(T+U, U) of them, and the terminal node is (T, U).

`brute_force_nll` enumerates alignments directly and is the independent
oracle for `rnnt_forward`; both implement the same convention.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, DimensionError, EnumerationCapExceeded
from .numerics import NEG_INF, log_softmax, log_softmax_backward, log_sum_exp

BLANK_ID = 0

ENUMERATION_CAP = 22  # max T+U for alignment enumeration; C(22,11) ~ 7e5 paths


def label_to_output_index(label: int) -> int:
    """Map a label id in Y to its slice index in the augmented vocabulary."""
    return label + 1


@dataclass
class LatticeResult:
    """Loss, forward/backward grids, and the log-probability-entry gradient."""

    nll: float
    alpha: np.ndarray  # (T+1, U+1)
    beta: np.ndarray  # (T+1, U+1)
    grad: np.ndarray  # same shape as the lattice


def _check_shapes(lattice: np.ndarray, y) -> tuple[int, int, int]:
    lattice = np.asarray(lattice)
    if lattice.ndim != 3:
        raise DimensionError(f"lattice must be T x (U+1) x K, got shape {lattice.shape}")
    T, U1, K = lattice.shape
    U = len(y)
    if T < 1:
        raise DimensionError("lattice needs T >= 1")
    if U1 != U + 1:
        raise DimensionError(f"lattice has {U1} label rows but y has length {U}")
    for lab in y:
        if not 0 <= lab < K - 1:
            raise DimensionError(f"label id {lab} out of range for {K - 1} labels")
    return T, U, K


def rnnt_forward(lattice: np.ndarray, y) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of y and the forward grid alpha.

    alpha[t][u] is the log-probability mass of all alignment prefixes with
    t blanks and u labels; the full loss is -alpha[T][U].
    """
    lattice = np.asarray(lattice, dtype=np.float64)
    T, U, _ = _check_shapes(lattice, y)

    blank = lattice[:, :, BLANK_ID]  # (T, U+1)
    if U > 0:
        yk = np.array([label_to_output_index(lab) for lab in y])
        label = lattice[:, np.arange(U), yk]  # (T, U): label[t][u] = step prob of y[u] at row t
    else:
        label = np.zeros((T, 0))

    alpha = np.full((T + 1, U + 1), NEG_INF)
    alpha[0, 0] = 0.0
    for t in range(1, T + 1):
        alpha[t, 0] = alpha[t - 1, 0] + blank[t - 1, 0]
    for u in range(1, U + 1):
        alpha[0, u] = alpha[0, u - 1] + label[0, u - 1]
    for t in range(1, T + 1):
        row = min(t, T - 1)
        for u in range(1, U + 1):
            alpha[t, u] = np.logaddexp(
                alpha[t - 1, u] + blank[t - 1, u],
                alpha[t, u - 1] + label[row, u - 1],
            )
    nll = -alpha[T, U]
    return float(nll), alpha


def rnnt_backward(lattice: np.ndarray, y, alpha: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Backward grid beta and the gradient of the NLL w.r.t. every
    log-probability entry of the lattice.

    grad[t][u][k] = -exp(occupancy of the edges reading that entry, minus
    log p(y|x)); computed fully in the log domain until the final exp.
    """
    lattice = np.asarray(lattice, dtype=np.float64)
    T, U, _ = _check_shapes(lattice, y)
    if alpha.shape != (T + 1, U + 1):
        raise DimensionError(f"alpha shape {alpha.shape} does not match (T+1, U+1)")
    log_p = alpha[T, U]
    if not np.isfinite(log_p):
        raise ContractViolation("gradient undefined: p(y|x) is zero for this lattice")

    blank = lattice[:, :, BLANK_ID]
    if U > 0:
        yk = np.array([label_to_output_index(lab) for lab in y])
        label = lattice[:, np.arange(U), yk]
    else:
        yk = np.zeros(0, dtype=int)
        label = np.zeros((T, 0))

    beta = np.full((T + 1, U + 1), NEG_INF)
    beta[T, U] = 0.0
    for t in range(T - 1, -1, -1):
        beta[t, U] = blank[t, U] + beta[t + 1, U]
    for u in range(U - 1, -1, -1):
        beta[T, u] = label[T - 1, u] + beta[T, u + 1]
    for t in range(T - 1, -1, -1):
        for u in range(U - 1, -1, -1):
            beta[t, u] = np.logaddexp(
                blank[t, u] + beta[t + 1, u],
                label[t, u] + beta[t, u + 1],
            )

    grad = np.zeros_like(lattice)
    with np.errstate(invalid="ignore"):
        # Blank edges: node (t, u) -> (t+1, u) reads row t directly.
        occ_blank = alpha[:T, :] + blank + beta[1:, :] - log_p
        grad[:, :, BLANK_ID] = -np.exp(occ_blank)
        # Label edges: node (t, u) -> (t, u+1) reads row min(t, T-1); the
        # t = T node folds onto row T-1, so that entry collects two edges.
        for u in range(U):
            k = yk[u]
            occ = alpha[:T, u] + lattice[:, u, k] + beta[:T, u + 1] - log_p
            grad[:, u, k] = -np.exp(occ)
            extra = alpha[T, u] + lattice[T - 1, u, k] + beta[T, u + 1] - log_p
            grad[T - 1, u, k] -= np.exp(extra)
    return beta, grad


def rnnt_loss(lattice: np.ndarray, y) -> LatticeResult:
    """Forward and backward in one call."""
    nll, alpha = rnnt_forward(lattice, y)
    beta, grad = rnnt_backward(lattice, y, alpha)
    return LatticeResult(nll=nll, alpha=alpha, beta=beta, grad=grad)


def rnnt_loss_from_logits(logits: np.ndarray, y) -> tuple[float, np.ndarray]:
    """NLL and its gradient w.r.t. pre-softmax logits of shape T x (U+1) x K."""
    logprob = log_softmax(logits)
    result = rnnt_loss(logprob, y)
    grad_logits = log_softmax_backward(result.grad, logprob)
    return result.nll, grad_logits


def enumerate_alignments(T: int, U: int, y, cap: int = ENUMERATION_CAP) -> list[tuple[int, ...]]:
    """All C(T+U, U) alignments of y, as tuples over the augmented vocabulary
    (blank = 0), ordered lexicographically by label positions (so the
    all-labels-first alignment comes first).

    Refuses when T+U exceeds the cap to keep enumeration tractable.
    """
    if T < 0 or len(y) != U or T + U < 1:
        raise ContractViolation(f"bad enumeration request T={T}, U={U}, |y|={len(y)}")
    if T + U > cap:
        raise EnumerationCapExceeded(
            f"T+U = {T + U} exceeds enumeration cap {cap}"
        )
    out = []
    labels = [label_to_output_index(lab) for lab in y]
    for label_positions in itertools.combinations(range(T + U), U):
        symbols = [BLANK_ID] * (T + U)
        for li, pos in enumerate(label_positions):
            symbols[pos] = labels[li]
        out.append(tuple(symbols))
    return out


def collapse_alignment(alignment) -> tuple[int, ...]:
    """Remove blanks and map back to label ids in Y."""
    return tuple(k - 1 for k in alignment if k != BLANK_ID)


def alignment_log_prob(lattice: np.ndarray, alignment) -> float:
    """Log-probability of one alignment under the shared step convention."""
    T = lattice.shape[0]
    t = u = 0
    total = 0.0
    for sym in alignment:
        if sym == BLANK_ID:
            total += lattice[t, u, BLANK_ID]
            t += 1
        else:
            total += lattice[min(t, T - 1), u, sym]
            u += 1
    if t != T:
        raise ContractViolation(f"alignment consumed {t} blanks, lattice has T={T}")
    return float(total)


def brute_force_nll(lattice: np.ndarray, y, cap: int = ENUMERATION_CAP) -> float:
    """NLL by direct enumeration of every alignment; the acceptance oracle
    for rnnt_forward. Returns +inf when y has zero probability.
    """
    lattice = np.asarray(lattice, dtype=np.float64)
    T, U, _ = _check_shapes(lattice, y)
    paths = [
        alignment_log_prob(lattice, a) for a in enumerate_alignments(T, U, y, cap=cap)
    ]
    total = log_sum_exp(paths)
    if total == NEG_INF:
        return np.inf
    return -total


def random_logprob_lattice(T: int, U: int, K: int, rng) -> np.ndarray:
    """Random normalized log-probability lattice for tests and oracles."""
    logits = rng.normal(0.0, 1.0, size=(T, U + 1, K))
    return log_softmax(logits)
