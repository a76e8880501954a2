"""LSTM building blocks: encoder stacks, the prediction network, and the
character-level language models used for fusion.

Each forward pass has a closed-form backward implemented alongside it; every
backward in this module is checked against central finite differences in the
test suite. The hidden-to-hidden matrix of each LSTM is the DropConnect
target: when a mask is supplied, the matrix is replaced elementwise by
matrix * mask for the whole pass, and gradients are chained through the mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DimensionError
from .numerics import NEG_INF, RandomStream, log_softmax, log_softmax_backward


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# Single LSTM layer


@dataclass
class LSTMParams:
    """Gates are ordered (input, forget, cell, output) along the first axis."""

    W_x: np.ndarray  # (4H, D)
    W_h: np.ndarray  # (4H, H); DropConnect target
    b: np.ndarray  # (4H,)

    def __post_init__(self):
        H4 = self.W_x.shape[0]
        if H4 % 4 != 0 or self.W_h.shape != (H4, H4 // 4) or self.b.shape != (H4,):
            raise DimensionError(
                f"inconsistent LSTM shapes W_x{self.W_x.shape} W_h{self.W_h.shape} b{self.b.shape}"
            )

    @property
    def hidden(self) -> int:
        return self.W_h.shape[1]

    @property
    def input_dim(self) -> int:
        return self.W_x.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"W_x": self.W_x, "W_h": self.W_h, "b": self.b}


def init_lstm_params(input_dim: int, hidden: int, rng: RandomStream) -> LSTMParams:
    lim_x = 1.0 / np.sqrt(input_dim)
    lim_h = 1.0 / np.sqrt(hidden)
    return LSTMParams(
        W_x=rng.uniform(-lim_x, lim_x, size=(4 * hidden, input_dim)),
        W_h=rng.uniform(-lim_h, lim_h, size=(4 * hidden, hidden)),
        b=np.zeros(4 * hidden),
    )


def zero_state(hidden: int) -> tuple[np.ndarray, np.ndarray]:
    return np.zeros(hidden), np.zeros(hidden)


def lstm_step(x, state, params: LSTMParams, hh_mask=None):
    """One gated recursion step; returns ((h, c), output).

    The output is the new hidden vector. hh_mask, when present, replaces the
    hidden-to-hidden matrix by W_h * mask for this step.
    """
    (state_out, out), _ = lstm_step_cached(x, state, params, hh_mask)
    return state_out, out


def lstm_step_cached(x, state, params: LSTMParams, hh_mask=None):
    h_prev, c_prev = state
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.input_dim,):
        raise DimensionError(f"LSTM expects input dim {params.input_dim}, got {x.shape}")
    if hh_mask is not None and hh_mask.shape != params.W_h.shape:
        raise DimensionError("hh_mask shape must match the hidden-to-hidden matrix")
    W_h_eff = params.W_h if hh_mask is None else params.W_h * hh_mask
    z = params.W_x @ x + W_h_eff @ h_prev + params.b
    H = params.hidden
    i = _sigmoid(z[:H])
    f = _sigmoid(z[H : 2 * H])
    g = np.tanh(z[2 * H : 3 * H])
    o = _sigmoid(z[3 * H :])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    cache = (x, h_prev, c_prev, i, f, g, o, tc)
    return ((h, c), h), cache


@dataclass
class LSTMSeqCache:
    steps: list
    W_h_eff: np.ndarray
    hh_mask: np.ndarray | None


def lstm_forward(xs: np.ndarray, params: LSTMParams, hh_mask=None, state=None):
    """Run a whole sequence; returns (outputs (T, H), final state, cache)."""
    T = xs.shape[0]
    if state is None:
        state = zero_state(params.hidden)
    outs = np.zeros((T, params.hidden))
    steps = []
    W_h_eff = params.W_h if hh_mask is None else params.W_h * hh_mask
    for t in range(T):
        ((h, c), out), cache = lstm_step_cached(xs[t], state, params, hh_mask)
        state = (h, c)
        outs[t] = out
        steps.append(cache)
    return outs, state, LSTMSeqCache(steps, W_h_eff, hh_mask)


def lstm_backward(d_outs: np.ndarray, cache: LSTMSeqCache, params: LSTMParams):
    """BPTT through lstm_forward. Returns (d_xs, grads, d_h0, d_c0)."""
    T = d_outs.shape[0]
    H = params.hidden
    d_xs = np.zeros((T, params.input_dim))
    gW_x = np.zeros_like(params.W_x)
    gW_h_eff = np.zeros_like(params.W_h)
    gb = np.zeros_like(params.b)
    d_h_next = np.zeros(H)
    d_c_next = np.zeros(H)
    for t in range(T - 1, -1, -1):
        x, h_prev, c_prev, i, f, g, o, tc = cache.steps[t]
        d_h = d_outs[t] + d_h_next
        d_o = d_h * tc
        d_c = d_h * o * (1.0 - tc**2) + d_c_next
        d_c_next = d_c * f
        d_z = np.concatenate(
            [
                d_c * g * i * (1.0 - i),
                d_c * c_prev * f * (1.0 - f),
                d_c * i * (1.0 - g**2),
                d_o * o * (1.0 - o),
            ]
        )
        gW_x += np.outer(d_z, x)
        gW_h_eff += np.outer(d_z, h_prev)
        gb += d_z
        d_xs[t] = params.W_x.T @ d_z
        d_h_next = cache.W_h_eff.T @ d_z
    gW_h = gW_h_eff if cache.hh_mask is None else gW_h_eff * cache.hh_mask
    grads = {"W_x": gW_x, "W_h": gW_h, "b": gb}
    return d_xs, grads, d_h_next, d_c_next


# ---------------------------------------------------------------------------
# Frame stacking and auxiliary-vector append


def stack_and_skip(features: np.ndarray, stacking: int = 2, skip: int = 2) -> np.ndarray:
    """Concatenate `stacking` consecutive frames and keep every `skip`-th
    position. A trailing partial window repeats the last frame."""
    if stacking < 1 or skip < 1:
        raise ContractViolation("stacking and skip must be >= 1")
    T, D = features.shape
    if stacking == 1 and skip == 1:
        return features.copy()
    T_out = (T + skip - 1) // skip
    out = np.zeros((T_out, stacking * D))
    for j in range(T_out):
        for r in range(stacking):
            src = min(j * skip + r, T - 1)
            out[j, r * D : (r + 1) * D] = features[src]
    return out


def stack_and_skip_backward(d_out: np.ndarray, T: int, D: int, stacking: int = 2, skip: int = 2):
    if stacking == 1 and skip == 1:
        return d_out.copy()
    d_features = np.zeros((T, D))
    for j in range(d_out.shape[0]):
        for r in range(stacking):
            src = min(j * skip + r, T - 1)
            d_features[src] += d_out[j, r * D : (r + 1) * D]
    return d_features


def append_aux(features: np.ndarray, aux: np.ndarray | None) -> np.ndarray:
    """Append a per-utterance auxiliary (speaker) vector to every frame."""
    if aux is None or aux.size == 0:
        return features
    return np.concatenate([features, np.tile(aux, (features.shape[0], 1))], axis=1)


# ---------------------------------------------------------------------------
# Encoder


@dataclass
class EncoderConfig:
    layers: int = 2
    cells: int = 64
    bidirectional: bool = True
    stacking: int = 2
    skip: int = 2
    lookahead: int = 0  # unidirectional only; the paper's streaming setup uses 5
    aux_dim: int = 0
    input_dim: int = 0  # feature dim before aux append and stacking

    def __post_init__(self):
        if self.bidirectional and self.lookahead != 0:
            raise ContractViolation("lookahead requires a unidirectional encoder")
        if self.stacking < 1:
            raise ContractViolation("stacking must be >= 1")

    @property
    def stacked_dim(self) -> int:
        return (self.input_dim + self.aux_dim) * self.stacking

    @property
    def output_dim(self) -> int:
        return self.cells * (2 if self.bidirectional else 1)


@dataclass
class EncoderLayer:
    fwd: LSTMParams
    bwd: LSTMParams | None = None


@dataclass
class EncoderParams:
    layers: list[EncoderLayer]

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.fwd.arrays().items():
                out[f"layers.{i}.fwd.{name}"] = arr
            if layer.bwd is not None:
                for name, arr in layer.bwd.arrays().items():
                    out[f"layers.{i}.bwd.{name}"] = arr
        return out


def init_encoder_params(config: EncoderConfig, rng: RandomStream) -> EncoderParams:
    layers = []
    in_dim = config.stacked_dim
    for i in range(config.layers):
        fwd = init_lstm_params(in_dim, config.cells, rng.child(i, 0))
        bwd = (
            init_lstm_params(in_dim, config.cells, rng.child(i, 1))
            if config.bidirectional
            else None
        )
        layers.append(EncoderLayer(fwd, bwd))
        in_dim = config.output_dim
    return EncoderParams(layers)


@dataclass
class EncoderCache:
    stacked_T: int
    raw_T: int
    raw_D: int
    layer_inputs: list
    layer_caches: list


def encode(
    features: np.ndarray,
    config: EncoderConfig,
    params: EncoderParams,
    masks: list | None = None,
    aux: np.ndarray | None = None,
):
    """Embed a feature sequence; returns (h sequence (T', E), cache).

    Bidirectional layers concatenate forward and reverse passes per frame.
    A unidirectional encoder with lookahead L buffers L extra (zero) frames
    and emits the state from L steps ahead, so output t sees inputs <= t+L.
    `masks` is an optional per-layer list of (fwd_mask, bwd_mask) pairs.
    """
    with_aux = append_aux(np.asarray(features, dtype=np.float64), aux)
    expected = config.input_dim + config.aux_dim
    if with_aux.shape[1] != expected:
        raise DimensionError(
            f"encoder expects feature dim {expected} (incl. aux), got {with_aux.shape[1]}"
        )
    x = stack_and_skip(with_aux, config.stacking, config.skip)
    T = x.shape[0]
    if not config.bidirectional and config.lookahead > 0:
        x = np.concatenate([x, np.zeros((config.lookahead, x.shape[1]))], axis=0)

    layer_inputs = []
    layer_caches = []
    for i, layer in enumerate(params.layers):
        fwd_mask, bwd_mask = (masks[i] if masks is not None else (None, None))
        layer_inputs.append(x)
        fo, _, fcache = lstm_forward(x, layer.fwd, fwd_mask)
        if layer.bwd is not None:
            bo, _, bcache = lstm_forward(x[::-1], layer.bwd, bwd_mask)
            x = np.concatenate([fo, bo[::-1]], axis=1)
        else:
            bcache = None
            x = fo
        layer_caches.append((fcache, bcache))
    if not config.bidirectional and config.lookahead > 0:
        x = x[config.lookahead :]
    cache = EncoderCache(T, features.shape[0], with_aux.shape[1], layer_inputs, layer_caches)
    return x, cache


def encode_backward(
    d_h: np.ndarray,
    config: EncoderConfig,
    params: EncoderParams,
    cache: EncoderCache,
):
    """Backward through encode. Returns (grads, d_features_with_aux)."""
    if not config.bidirectional and config.lookahead > 0:
        padded = np.zeros((cache.stacked_T + config.lookahead, d_h.shape[1]))
        padded[config.lookahead :] = d_h
        d_x = padded
    else:
        d_x = d_h
    grads: dict[str, np.ndarray] = {}
    H = config.cells
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        fcache, bcache = cache.layer_caches[i]
        if layer.bwd is not None:
            d_fo = d_x[:, :H]
            d_bo = d_x[:, H:][::-1]
            d_in_f, gf, _, _ = lstm_backward(d_fo, fcache, layer.fwd)
            d_in_b, gb, _, _ = lstm_backward(d_bo, bcache, layer.bwd)
            d_x = d_in_f + d_in_b[::-1]
            for name, arr in gb.items():
                grads[f"layers.{i}.bwd.{name}"] = arr
        else:
            d_x, gf, _, _ = lstm_backward(d_x, fcache, layer.fwd)
        for name, arr in gf.items():
            grads[f"layers.{i}.fwd.{name}"] = arr
    d_stacked = d_x
    d_features = stack_and_skip_backward(
        d_stacked, cache.raw_T, cache.raw_D, config.stacking, config.skip
    )
    return grads, d_features


# ---------------------------------------------------------------------------
# Prediction network


@dataclass
class PredictionConfig:
    cells: int = 48
    embed_dim: int = 16


@dataclass
class PredictionParams:
    embedding: np.ndarray  # (|Y|, embed_dim)
    lstm: LSTMParams

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"embedding": self.embedding}
        for name, arr in self.lstm.arrays().items():
            out[f"lstm.{name}"] = arr
        return out

    @property
    def vocab(self) -> int:
        return self.embedding.shape[0]


def init_prediction_params(
    vocab: int, config: PredictionConfig, rng: RandomStream
) -> PredictionParams:
    lim = 1.0 / np.sqrt(config.embed_dim)
    return PredictionParams(
        embedding=rng.child(0).uniform(-lim, lim, size=(vocab, config.embed_dim)),
        lstm=init_lstm_params(config.embed_dim, config.cells, rng.child(1)),
    )


def predict_embed(prefix, params: PredictionParams, hh_mask=None):
    """Label-prefix embeddings for every lattice row: |prefix|+1 vectors.

    Row 0 is the all-zero vector; row u is the LSTM output after consuming
    the first u labels from the zero state. Returns (G, cache).
    """
    for lab in prefix:
        if not 0 <= lab < params.vocab:
            raise ContractViolation(f"label {lab} outside vocabulary of {params.vocab}")
    U = len(prefix)
    P = params.lstm.hidden
    G = np.zeros((U + 1, P))
    if U == 0:
        return G, None
    xs = params.embedding[np.asarray(prefix, dtype=int)]
    outs, _, cache = lstm_forward(xs, params.lstm, hh_mask)
    G[1:] = outs
    return G, cache


def predict_backward(d_G: np.ndarray, prefix, cache, params: PredictionParams):
    """Backward through predict_embed; row 0 of d_G is ignored (g0 is
    constant zero). Returns a grads dict matching params.arrays()."""
    grads = {
        "embedding": np.zeros_like(params.embedding),
        "lstm.W_x": np.zeros_like(params.lstm.W_x),
        "lstm.W_h": np.zeros_like(params.lstm.W_h),
        "lstm.b": np.zeros_like(params.lstm.b),
    }
    if len(prefix) == 0:
        return grads
    d_xs, lstm_grads, _, _ = lstm_backward(d_G[1:], cache, params.lstm)
    for name, arr in lstm_grads.items():
        grads[f"lstm.{name}"] = arr
    np.add.at(grads["embedding"], np.asarray(prefix, dtype=int), d_xs)
    return grads


@dataclass(frozen=True)
class PredictionState:
    """Immutable snapshot of the prediction network at one prefix length.

    `g` is the lattice-row embedding for the current prefix; extending never
    mutates the parent state, so beam branches can share snapshots."""

    h: np.ndarray
    c: np.ndarray
    g: np.ndarray


def init_prediction_state(params: PredictionParams) -> PredictionState:
    H = params.lstm.hidden
    return PredictionState(h=np.zeros(H), c=np.zeros(H), g=np.zeros(H))


def advance_prediction_state(
    state: PredictionState, label: int, params: PredictionParams, hh_mask=None
) -> PredictionState:
    if not 0 <= label < params.vocab:
        raise ContractViolation(f"label {label} outside vocabulary of {params.vocab}")
    (h, c), out = lstm_step(
        params.embedding[label], (state.h, state.c), params.lstm, hh_mask
    )
    return PredictionState(h=h, c=c, g=out)


# ---------------------------------------------------------------------------
# Character language model


@dataclass
class CharLMConfig:
    layers: int = 1
    cells: int = 64
    embed_dim: int = 16


@dataclass
class CharLMParams:
    """LM over Y plus sentence-begin/end markers (ids |Y| and |Y|+1)."""

    embedding: np.ndarray  # (V, embed_dim), V = |Y| + 2
    layers: list[LSTMParams]
    W_out: np.ndarray  # (V, H)
    b_out: np.ndarray  # (V,)

    @property
    def vocab(self) -> int:
        return self.embedding.shape[0]

    @property
    def num_labels(self) -> int:
        return self.vocab - 2

    @property
    def bos(self) -> int:
        return self.vocab - 2

    @property
    def eos(self) -> int:
        return self.vocab - 1

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"embedding": self.embedding, "W_out": self.W_out, "b_out": self.b_out}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.arrays().items():
                out[f"layers.{i}.{name}"] = arr
        return out


def init_char_lm_params(num_labels: int, config: CharLMConfig, rng: RandomStream) -> CharLMParams:
    V = num_labels + 2
    lim_e = 1.0 / np.sqrt(config.embed_dim)
    lim_o = 1.0 / np.sqrt(config.cells)
    layers = []
    in_dim = config.embed_dim
    for i in range(config.layers):
        layers.append(init_lstm_params(in_dim, config.cells, rng.child(10 + i)))
        in_dim = config.cells
    return CharLMParams(
        embedding=rng.child(0).uniform(-lim_e, lim_e, size=(V, config.embed_dim)),
        layers=layers,
        W_out=rng.child(1).uniform(-lim_o, lim_o, size=(V, config.cells)),
        b_out=np.zeros(V),
    )


def _lm_forward_states(inputs, params: CharLMParams, masks=None):
    xs = params.embedding[np.asarray(inputs, dtype=int)]
    caches = []
    for i, layer in enumerate(params.layers):
        mask = masks[i] if masks is not None else None
        xs, _, cache = lstm_forward(xs, layer, mask)
        caches.append(cache)
    logits = xs @ params.W_out.T + params.b_out
    return xs, log_softmax(logits), caches


def lm_score(sequence, params: CharLMParams):
    """Total log-probability of a label sequence including the end marker,
    plus the per-symbol increments (length |sequence|+1)."""
    for lab in sequence:
        if not 0 <= lab < params.num_labels:
            raise ContractViolation(f"symbol {lab} outside LM vocabulary")
    inputs = [params.bos] + list(sequence)
    targets = list(sequence) + [params.eos]
    _, logprobs, _ = _lm_forward_states(inputs, params)
    increments = logprobs[np.arange(len(targets)), targets]
    return float(increments.sum()), increments


def lm_loss_and_grads(sequence, params: CharLMParams, masks=None):
    """NLL of one sequence and gradients for every LM parameter."""
    inputs = [params.bos] + list(sequence)
    targets = np.asarray(list(sequence) + [params.eos], dtype=int)
    hs, logprobs, caches = _lm_forward_states(inputs, params, masks)
    nll = -float(logprobs[np.arange(len(targets)), targets].sum())
    d_lp = np.zeros_like(logprobs)
    d_lp[np.arange(len(targets)), targets] = -1.0
    d_logits = log_softmax_backward(d_lp, logprobs)
    grads = {
        "W_out": d_logits.T @ hs,
        "b_out": d_logits.sum(axis=0),
    }
    d_x = d_logits @ params.W_out
    for i in range(len(params.layers) - 1, -1, -1):
        d_x, layer_grads, _, _ = lstm_backward(d_x, caches[i], params.layers[i])
        for name, arr in layer_grads.items():
            grads[f"layers.{i}.{name}"] = arr
    g_embed = np.zeros_like(params.embedding)
    np.add.at(g_embed, np.asarray(inputs, dtype=int), d_x)
    grads["embedding"] = g_embed
    return nll, grads


@dataclass(frozen=True)
class LMState:
    """Immutable LM snapshot: per-layer (h, c) plus the next-symbol
    log-probability distribution."""

    states: tuple
    logprobs: np.ndarray


def lm_init_state(params: CharLMParams) -> LMState:
    return _lm_advance_symbol(params.bos, tuple(zero_state(l.hidden) for l in params.layers), params)


def _lm_advance_symbol(symbol, states, params):
    x = params.embedding[symbol]
    new_states = []
    for layer, state in zip(params.layers, states):
        (h, c), x = lstm_step(x, state, layer)
        new_states.append((h, c))
    logprobs = log_softmax(params.W_out @ x + params.b_out)
    return LMState(states=tuple(new_states), logprobs=logprobs)


def lm_score_next(state: LMState, symbol: int, params: CharLMParams):
    """Incremental scoring: log p(symbol | history) and the advanced state."""
    if not 0 <= symbol < params.num_labels:
        raise ContractViolation(f"symbol {symbol} outside LM vocabulary")
    inc = float(state.logprobs[symbol])
    return inc, _lm_advance_symbol(symbol, state.states, params)


def lm_end_increment(state: LMState, params: CharLMParams) -> float:
    """log p(end-of-sequence | history)."""
    return float(state.logprobs[params.eos])


# ---------------------------------------------------------------------------
# DropConnect


def sample_dropconnect_mask(shape, rate: float, rng: RandomStream) -> np.ndarray:
    """Inverted-scaling DropConnect mask: entries are 0 with probability
    `rate`, else 1/(1-rate), so evaluation can use unmasked weights."""
    if not 0.0 <= rate <= 1.0:
        raise ContractViolation(f"DropConnect rate {rate} outside [0, 1]")
    if rate == 0.0:
        return np.ones(shape)
    if rate == 1.0:
        return np.zeros(shape)
    keep = (rng.random(shape) >= rate).astype(np.float64)
    return keep / (1.0 - rate)
