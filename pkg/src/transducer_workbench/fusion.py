"""Language-model fusion and two-model combination.

Scoring forms (all over complete label sequences y):

- shallow fusion:      log p(y|x) + lam*log p_ext(y) + rho*|y|
- density ratio:       log p(y|x) - mu*log p_src(y) + lam*log p_ext(y) + rho*|y|
- combination:         alpha*log p(y|x; A) + beta*log p(y|x; B)
                       - mu*log p_src(y) + lam*log p_ext(y) + rho*|y|

|y| counts emitted labels (sentence markers excluded). During beam search
the same objective is applied per emitted symbol through FusionScorer; the
completed-hypothesis scores agree with full-sequence rescoring.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .networks import (
    CharLMParams,
    LMState,
    lm_end_increment,
    lm_init_state,
    lm_score,
    lm_score_next,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FusionWeights:
    """mu: source-LM subtraction, lam: external LM, rho: length reward.
    All zero reduces every scorer to the plain transducer score."""

    mu: float = 0.0
    lam: float = 0.0
    rho: float = 0.0


@dataclass(frozen=True)
class CombinationWeights:
    alpha: float = 0.5
    beta: float = 0.5
    mu: float = 0.0
    lam: float = 0.0
    rho: float = 0.0

    @property
    def fusion(self) -> FusionWeights:
        return FusionWeights(self.mu, self.lam, self.rho)


def density_ratio_score(components, w: FusionWeights) -> float:
    """components = (log p(y|x), log p_src(y), log p_ext(y), |y|)."""
    trans, src, ext, length = components
    return trans - w.mu * src + w.lam * ext + w.rho * length


def shallow_fusion_score(components, lam: float, rho: float) -> float:
    """components = (log p(y|x), log p_ext(y), |y|); density ratio with mu=0."""
    trans, ext, length = components
    return density_ratio_score((trans, 0.0, ext, length), FusionWeights(0.0, lam, rho))


class FusionScorer:
    """Incremental LM scoring used inside beam search (shallow integration).

    Tracks one state per language model per hypothesis; `extend` returns the
    per-symbol (source, external) log-probability increments and
    `end_increments` the end-of-sequence terms applied when a hypothesis
    completes. LMs may be omitted when their weight is zero.
    """

    def __init__(
        self,
        weights: FusionWeights,
        source_lm: CharLMParams | None = None,
        external_lm: CharLMParams | None = None,
    ):
        if weights.mu != 0.0 and source_lm is None:
            raise ContractViolation("mu != 0 needs a source language model")
        if weights.lam != 0.0 and external_lm is None:
            raise ContractViolation("lam != 0 needs an external language model")
        self.weights = weights
        self.source_lm = source_lm
        self.external_lm = external_lm

    def init_state(self):
        return (
            lm_init_state(self.source_lm) if self.source_lm is not None else None,
            lm_init_state(self.external_lm) if self.external_lm is not None else None,
        )

    def extend(self, state, label: int):
        src_state, ext_state = state
        src_inc = ext_inc = 0.0
        if src_state is not None:
            src_inc, src_state = lm_score_next(src_state, label, self.source_lm)
        if ext_state is not None:
            ext_inc, ext_state = lm_score_next(ext_state, label, self.external_lm)
        return src_inc, ext_inc, (src_state, ext_state)

    def end_increments(self, state):
        src_state, ext_state = state
        src_end = lm_end_increment(src_state, self.source_lm) if src_state is not None else 0.0
        ext_end = lm_end_increment(ext_state, self.external_lm) if ext_state is not None else 0.0
        return src_end, ext_end


# ---------------------------------------------------------------------------
# Rescoring


@dataclass(frozen=True)
class ScoredCandidate:
    """One label sequence with every retained score component; the total is
    always reconstructible as the weighted sum of the components."""

    labels: tuple[int, ...]
    score: float
    transducer_a: float
    transducer_b: float | None
    source_lm: float
    external_lm: float

    @property
    def length(self) -> int:
        return len(self.labels)


def rescore_nbest(
    hypotheses,
    weights: FusionWeights,
    source_lm: CharLMParams | None = None,
    external_lm: CharLMParams | None = None,
):
    """Density-ratio rescoring of decoder hypotheses with full-sequence LM
    scores. Returns ScoredCandidates ranked by fused score."""
    out = []
    for hyp in hypotheses:
        src = lm_score(hyp.labels, source_lm)[0] if source_lm is not None else 0.0
        ext = lm_score(hyp.labels, external_lm)[0] if external_lm is not None else 0.0
        total = density_ratio_score((hyp.transducer, src, ext, len(hyp.labels)), weights)
        out.append(
            ScoredCandidate(
                labels=hyp.labels,
                score=total,
                transducer_a=hyp.transducer,
                transducer_b=None,
                source_lm=src,
                external_lm=ext,
            )
        )
    out.sort(key=lambda c: (-c.score, c.labels))
    return out


def combine_rescore(
    features,
    nbest_a,
    nbest_b,
    weights: CombinationWeights,
    model_a,
    model_b,
    source_lm: CharLMParams | None = None,
    external_lm: CharLMParams | None = None,
    aux=None,
    max_label_length: int | None = None,
):
    """Log-linear rescoring of the union of two n-best lists.

    Every unique label sequence in the union is cross-scored by both
    transducers (exact lattice marginals) and the shared LMs. Hypotheses
    longer than the length cap are excluded with a logged warning (they
    would exceed the decoders' own expansion budget).
    """
    H_a = model_a.encode_features(features, aux)
    H_b = model_b.encode_features(features, aux)
    if max_label_length is None:
        max_label_length = 2 * max(H_a.shape[0], H_b.shape[0])
    union = []
    seen = set()
    for hyp in itertools.chain(nbest_a, nbest_b):
        if hyp.labels not in seen:
            seen.add(hyp.labels)
            union.append(hyp.labels)
    out = []
    for labels in union:
        if len(labels) > max_label_length:
            logger.warning(
                "combine_rescore: dropping hypothesis of length %d (cap %d)",
                len(labels),
                max_label_length,
            )
            continue
        trans_a = -model_a.lattice_nll(H_a, list(labels))
        trans_b = -model_b.lattice_nll(H_b, list(labels))
        src = lm_score(labels, source_lm)[0] if source_lm is not None else 0.0
        ext = lm_score(labels, external_lm)[0] if external_lm is not None else 0.0
        total = (
            weights.alpha * trans_a
            + weights.beta * trans_b
            - weights.mu * src
            + weights.lam * ext
            + weights.rho * len(labels)
        )
        out.append(
            ScoredCandidate(
                labels=labels,
                score=total,
                transducer_a=trans_a,
                transducer_b=trans_b,
                source_lm=src,
                external_lm=ext,
            )
        )
    out.sort(key=lambda c: (-c.score, c.labels))
    return out


# ---------------------------------------------------------------------------
# Weight tuning on cached components


@dataclass
class CachedHypothesis:
    """Score components cached so tuning never re-runs a model."""

    words: tuple[str, ...]
    transducer_a: float
    source_lm: float
    external_lm: float
    length: int
    transducer_b: float | None = None


@dataclass
class CachedNBest:
    utt_id: str
    reference: tuple[str, ...]
    hypotheses: list[CachedHypothesis]


@dataclass(frozen=True)
class TuneResult:
    weights: FusionWeights | CombinationWeights
    wer: float


DEFAULT_MU_GRID = tuple(round(0.1 * i, 1) for i in range(11))
DEFAULT_LAM_GRID = tuple(round(0.1 * i, 1) for i in range(11))
DEFAULT_RHO_GRID = tuple(round(0.1 * i, 1) for i in range(6))


def _pick_best(cell_scores, nbest: CachedNBest):
    best = None
    best_key = None
    for hyp, score in zip(nbest.hypotheses, cell_scores):
        key = (-score, hyp.words)
        if best is None or key < best_key:
            best, best_key = hyp, key
    return best


def tune_weights(
    dev_nbests: list[CachedNBest],
    mu_grid=DEFAULT_MU_GRID,
    lam_grid=DEFAULT_LAM_GRID,
    rho_grid=DEFAULT_RHO_GRID,
    alpha_beta_grid=None,
) -> TuneResult:
    """Exhaustive grid search minimizing corpus WER on cached components.

    Ties break toward smaller total |weights|, then lexicographically, so
    results are deterministic. When `alpha_beta_grid` is given, the search
    runs over CombinationWeights (hypotheses must carry transducer_b).
    """
    from .scoring import compute_wer  # local import: scoring also uses fusion types

    if not mu_grid or not lam_grid or not rho_grid:
        raise ContractViolation("tuning grid must be non-empty")
    if alpha_beta_grid is not None and not alpha_beta_grid:
        raise ContractViolation("tuning grid must be non-empty")

    def corpus_wer(weight_obj) -> float:
        errors = 0
        ref_words = 0
        for nbest in dev_nbests:
            scores = []
            for hyp in nbest.hypotheses:
                if isinstance(weight_obj, CombinationWeights):
                    if hyp.transducer_b is None:
                        raise ContractViolation(
                            "combination tuning needs transducer_b components"
                        )
                    s = (
                        weight_obj.alpha * hyp.transducer_a
                        + weight_obj.beta * hyp.transducer_b
                        - weight_obj.mu * hyp.source_lm
                        + weight_obj.lam * hyp.external_lm
                        + weight_obj.rho * hyp.length
                    )
                else:
                    s = density_ratio_score(
                        (hyp.transducer_a, hyp.source_lm, hyp.external_lm, hyp.length),
                        weight_obj,
                    )
                scores.append(s)
            best = _pick_best(scores, nbest)
            _, subs, dels, ins = compute_wer(list(nbest.reference), list(best.words))
            errors += subs + dels + ins
            ref_words += len(nbest.reference)
        return errors / max(1, ref_words)

    candidates = []
    if alpha_beta_grid is None:
        for mu in mu_grid:
            for lam in lam_grid:
                for rho in rho_grid:
                    candidates.append(FusionWeights(mu, lam, rho))
    else:
        for alpha, beta in alpha_beta_grid:
            for mu in mu_grid:
                for lam in lam_grid:
                    for rho in rho_grid:
                        candidates.append(CombinationWeights(alpha, beta, mu, lam, rho))

    best = None
    best_key = None
    for w in candidates:
        wer = corpus_wer(w)
        if isinstance(w, CombinationWeights):
            magnitude = abs(w.alpha) + abs(w.beta) + abs(w.mu) + abs(w.lam) + abs(w.rho)
            tiebreak = (w.alpha, w.beta, w.mu, w.lam, w.rho)
        else:
            magnitude = abs(w.mu) + abs(w.lam) + abs(w.rho)
            tiebreak = (w.mu, w.lam, w.rho)
        key = (wer, magnitude, tiebreak)
        if best is None or key < best_key:
            best, best_key = TuneResult(w, wer), key
    return best


# ---------------------------------------------------------------------------
# N-best serialization (tab separated), consumed by rescoring and verify


def write_nbest(path, records, alphabet):
    """records: iterable of (utt_id, hypotheses); one line per hypothesis:
    utt_id, label text, alignment length, transducer, source LM, external LM.
    """
    with open(path, "w", encoding="utf-8") as f:
        for utt_id, hyps in records:
            for hyp in hyps:
                f.write(
                    "\t".join(
                        [
                            utt_id,
                            alphabet.to_text(hyp.labels),
                            str(hyp.alignment_length),
                            f"{hyp.transducer:.17g}",
                            f"{hyp.source_lm:.17g}",
                            f"{hyp.external_lm:.17g}",
                        ]
                    )
                    + "\n"
                )


@dataclass(frozen=True)
class NBestRecord:
    labels: tuple[int, ...]
    alignment_length: int
    transducer: float
    source_lm: float
    external_lm: float


def read_nbest(path, alphabet) -> dict[str, list[NBestRecord]]:
    out: dict[str, list[NBestRecord]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 6:
                raise ContractViolation(f"n-best line {lineno}: expected 6 fields")
            utt_id, text, align_len, trans, src, ext = parts
            out.setdefault(utt_id, []).append(
                NBestRecord(
                    labels=alphabet.to_labels(text),
                    alignment_length=int(align_len),
                    transducer=float(trans),
                    source_lm=float(src),
                    external_lm=float(ext),
                )
            )
    return out
