"""Full transducer model: encoder + prediction network + joint network,
with end-to-end loss gradients and checkpoint serialization.

Parameter tensors live in a flat name -> array mapping ("encoder.layers.0.
fwd.W_x", "prediction.embedding", "joint.W_out", ...) used by the optimizer,
the checkpoint format, and the encoder-initialization hook.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DimensionError, TrainingDiverged
from .joint import (
    ADDITIVE,
    JointParams,
    count_parameters,
    init_joint_params,
    joint_backward_lattice,
    joint_forward,
    joint_forward_lattice,
)
from .lattice import LatticeResult, rnnt_backward, rnnt_forward
from .networks import (
    EncoderConfig,
    EncoderParams,
    PredictionConfig,
    PredictionParams,
    PredictionState,
    advance_prediction_state,
    encode,
    encode_backward,
    init_encoder_params,
    init_prediction_params,
    init_prediction_state,
    predict_backward,
    predict_embed,
    sample_dropconnect_mask,
)
from .numerics import RandomStream


@dataclass
class ModelConfig:
    num_labels: int
    encoder: EncoderConfig
    prediction: PredictionConfig = field(default_factory=PredictionConfig)
    joint_dim: int = 16
    joint_mode: str = ADDITIVE
    joint_branch_biases: bool = False

    @property
    def vocab_size(self) -> int:
        return self.num_labels + 1  # labels plus blank

    def to_dict(self) -> dict:
        return {
            "num_labels": self.num_labels,
            "encoder": vars(self.encoder).copy(),
            "prediction": vars(self.prediction).copy(),
            "joint_dim": self.joint_dim,
            "joint_mode": self.joint_mode,
            "joint_branch_biases": self.joint_branch_biases,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(
            num_labels=d["num_labels"],
            encoder=EncoderConfig(**d["encoder"]),
            prediction=PredictionConfig(**d["prediction"]),
            joint_dim=d["joint_dim"],
            joint_mode=d["joint_mode"],
            joint_branch_biases=d["joint_branch_biases"],
        )


@dataclass
class DropConnectMasks:
    encoder: list | None = None  # per layer: (fwd_mask, bwd_mask | None)
    prediction: np.ndarray | None = None


@dataclass
class TransducerModel:
    config: ModelConfig
    encoder: EncoderParams
    prediction: PredictionParams
    joint: JointParams

    # -- parameter bookkeeping ------------------------------------------

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, arr in self.encoder.arrays().items():
            out[f"encoder.{name}"] = arr
        for name, arr in self.prediction.arrays().items():
            out[f"prediction.{name}"] = arr
        for name, arr in self.joint.arrays().items():
            out[f"joint.{name}"] = arr
        return out

    def num_parameters(self) -> int:
        return sum(a.size for a in self.arrays().values())

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str = ""):
        """Copy matching tensors in place; shapes must agree."""
        own = self.arrays()
        for name, arr in arrays.items():
            key = prefix + name
            if key not in own:
                raise ContractViolation(f"unknown parameter {key}")
            if own[key].shape != arr.shape:
                raise DimensionError(
                    f"{key}: checkpoint shape {arr.shape} != model shape {own[key].shape}"
                )
            own[key][:] = arr

    # -- training path ---------------------------------------------------

    def loss_and_grads(self, features, labels, aux=None, masks: DropConnectMasks | None = None):
        """NLL of one utterance and gradients for every parameter.

        Raises TrainingDiverged when the forward loss is non-finite, so the
        training loop can abort with its last good checkpoint.
        """
        enc_masks = masks.encoder if masks is not None else None
        pred_mask = masks.prediction if masks is not None else None
        H, enc_cache = encode(features, self.config.encoder, self.encoder, enc_masks, aux)
        G, pred_cache = predict_embed(labels, self.prediction, pred_mask)
        logprob, joint_cache = joint_forward_lattice(H, G, self.joint)
        nll, alpha = rnnt_forward(logprob, labels)
        if not np.isfinite(nll):
            raise TrainingDiverged(f"non-finite loss {nll}")
        beta, grad = rnnt_backward(logprob, labels, alpha)
        result = LatticeResult(nll=nll, alpha=alpha, beta=beta, grad=grad)
        joint_grads, d_H, d_G = joint_backward_lattice(result.grad, joint_cache, self.joint)
        enc_grads, _ = encode_backward(d_H, self.config.encoder, self.encoder, enc_cache)
        pred_grads = predict_backward(d_G, labels, pred_cache, self.prediction)
        grads = {f"joint.{k}": v for k, v in joint_grads.items()}
        grads.update({f"encoder.{k}": v for k, v in enc_grads.items()})
        grads.update({f"prediction.{k}": v for k, v in pred_grads.items()})
        return result.nll, grads

    def loss(self, features, labels, aux=None) -> float:
        H, _ = encode(features, self.config.encoder, self.encoder, None, aux)
        return self.lattice_nll(H, labels)

    def lattice_nll(self, H, labels) -> float:
        nll, _ = rnnt_forward(self.logprob_lattice(H, labels), labels)
        return nll

    # -- decoding interface ----------------------------------------------

    def encode_features(self, features, aux=None) -> np.ndarray:
        H, _ = encode(features, self.config.encoder, self.encoder, None, aux)
        return H

    def init_decode_state(self) -> PredictionState:
        return init_prediction_state(self.prediction)

    def extend_decode_state(self, state: PredictionState, label: int) -> PredictionState:
        return advance_prediction_state(state, label, self.prediction)

    def joint_log_probs(self, h_vec: np.ndarray, state: PredictionState) -> np.ndarray:
        return joint_forward(h_vec, state.g, self.joint)

    def logprob_lattice(self, H: np.ndarray, labels) -> np.ndarray:
        """The (T, U+1, K) log-probability lattice for a given label sequence."""
        G, _ = predict_embed(labels, self.prediction)
        logprob, _ = joint_forward_lattice(H, G, self.joint)
        return logprob

    @property
    def num_labels(self) -> int:
        return self.config.num_labels


def init_model(config: ModelConfig, rng: RandomStream) -> TransducerModel:
    enc = init_encoder_params(config.encoder, rng.child(1))
    pred = init_prediction_params(config.num_labels, config.prediction, rng.child(2))
    joint = init_joint_params(
        enc_dim=config.encoder.output_dim,
        pred_dim=config.prediction.cells,
        joint_dim=config.joint_dim,
        vocab_size=config.vocab_size,
        mode=config.joint_mode,
        rng=rng.child(3),
        branch_biases=config.joint_branch_biases,
    )
    return TransducerModel(config, enc, pred, joint)


def sample_model_masks(model: TransducerModel, rate: float, rng: RandomStream) -> DropConnectMasks:
    """One DropConnect mask per hidden-to-hidden matrix; resampled by the
    training loop once per minibatch."""
    if rate <= 0.0:
        return DropConnectMasks()
    enc_masks = []
    for i, layer in enumerate(model.encoder.layers):
        fwd = sample_dropconnect_mask(layer.fwd.W_h.shape, rate, rng.child(i, 0))
        bwd = (
            sample_dropconnect_mask(layer.bwd.W_h.shape, rate, rng.child(i, 1))
            if layer.bwd is not None
            else None
        )
        enc_masks.append((fwd, bwd))
    pred_mask = sample_dropconnect_mask(
        model.prediction.lstm.W_h.shape, rate, rng.child(100)
    )
    return DropConnectMasks(encoder=enc_masks, prediction=pred_mask)


# ---------------------------------------------------------------------------
# Checkpoints: named tensors plus a JSON config fingerprint in one .npz file.


def save_checkpoint(path, model: TransducerModel, extra_meta: dict | None = None):
    meta = {"config": model.config.to_dict()}
    if extra_meta:
        meta.update(extra_meta)
    payload = {k: v for k, v in model.arrays().items()}
    payload["__meta__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    np.savez(path, **payload)


def load_checkpoint(path) -> tuple[TransducerModel, dict]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    config = ModelConfig.from_dict(meta["config"])
    model = init_model(config, RandomStream(0))
    model.load_arrays(arrays)
    return model, meta


def load_encoder_init(model: TransducerModel, path):
    """Encoder-initialization hook: copy only encoder tensors from a
    checkpoint (stands in for initializing from a separately trained
    encoder)."""
    with np.load(path) as data:
        arrays = {
            k: data[k] for k in data.files if k.startswith("encoder.")
        }
    if not arrays:
        raise ContractViolation(f"no encoder tensors found in {path}")
    model.load_arrays(arrays)


def save_char_lm(path, lm, config, extra_meta: dict | None = None):
    """Same container as model checkpoints: named tensors + JSON meta."""
    from .networks import CharLMConfig  # noqa: F401  (documented round-trip type)

    meta = {"lm_config": vars(config).copy(), "num_labels": lm.num_labels}
    if extra_meta:
        meta.update(extra_meta)
    payload = dict(lm.arrays())
    payload["__meta__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    np.savez(path, **payload)


def load_char_lm(path):
    from .networks import CharLMConfig, init_char_lm_params

    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    config = CharLMConfig(**meta["lm_config"])
    lm = init_char_lm_params(meta["num_labels"], config, RandomStream(0))
    own = lm.arrays()
    for name, arr in arrays.items():
        if name not in own:
            raise ContractViolation(f"unknown LM parameter {name}")
        own[name][:] = arr
    return lm, meta
