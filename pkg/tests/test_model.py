import numpy as np
import pytest

from transducer_workbench.joint import ADDITIVE, MULTIPLICATIVE
from transducer_workbench.model import (
    DropConnectMasks,
    ModelConfig,
    init_model,
    load_checkpoint,
    load_encoder_init,
    sample_model_masks,
    save_checkpoint,
)
from transducer_workbench.networks import EncoderConfig, PredictionConfig
from transducer_workbench.numerics import (
    RandomStream,
    finite_difference_gradient,
    pack_arrays,
    relative_error,
    unpack_arrays,
)


def tiny_config(mode=ADDITIVE, bidirectional=True, aux_dim=0):
    return ModelConfig(
        num_labels=3,
        encoder=EncoderConfig(
            layers=1,
            cells=4,
            bidirectional=bidirectional,
            stacking=2,
            skip=2,
            lookahead=0 if bidirectional else 1,
            aux_dim=aux_dim,
            input_dim=3,
        ),
        prediction=PredictionConfig(cells=4, embed_dim=3),
        joint_dim=5,
        joint_mode=mode,
    )


class TestLossAndGrads:
    @pytest.mark.parametrize("mode", [ADDITIVE, MULTIPLICATIVE])
    @pytest.mark.parametrize("bidirectional", [True, False])
    def test_finite_differences_end_to_end(self, mode, bidirectional):
        model = init_model(tiny_config(mode, bidirectional), RandomStream(1))
        rng = RandomStream(2)
        features = rng.normal(size=(7, 3))
        labels = [0, 2, 1]
        template = model.arrays()

        def loss(vec):
            a = unpack_arrays(vec, template)
            for name, arr in model.arrays().items():
                arr[:] = a[name]
            return model.loss(features, labels)

        x0 = pack_arrays(template)
        numeric = unpack_arrays(finite_difference_gradient(loss, x0), template)
        loss(x0)
        nll, grads = model.loss_and_grads(features, labels)
        assert np.isfinite(nll)
        for name in template:
            assert relative_error(grads[name], numeric[name]) <= 1e-4, name

    def test_empty_transcript_is_legal(self):
        model = init_model(tiny_config(), RandomStream(3))
        nll, grads = model.loss_and_grads(RandomStream(4).normal(size=(5, 3)), [])
        assert np.isfinite(nll)
        assert np.all(grads["prediction.embedding"] == 0)

    def test_masked_loss_differs_but_is_deterministic(self):
        model = init_model(tiny_config(), RandomStream(5))
        rng = RandomStream(6)
        features = rng.normal(size=(6, 3))
        labels = [1, 0]
        masks = sample_model_masks(model, 0.5, RandomStream(7))
        nll_plain, _ = model.loss_and_grads(features, labels)
        nll_masked, _ = model.loss_and_grads(features, labels, masks=masks)
        nll_masked2, _ = model.loss_and_grads(
            features, labels, masks=sample_model_masks(model, 0.5, RandomStream(7))
        )
        assert nll_masked != nll_plain
        assert nll_masked == nll_masked2

    def test_masked_gradients_finite_differences(self):
        model = init_model(tiny_config(MULTIPLICATIVE), RandomStream(8))
        rng = RandomStream(9)
        features = rng.normal(size=(6, 3))
        labels = [2, 2]
        masks = sample_model_masks(model, 0.25, RandomStream(10))
        template = model.arrays()

        def loss(vec):
            a = unpack_arrays(vec, template)
            for name, arr in model.arrays().items():
                arr[:] = a[name]
            return model.loss_and_grads(features, labels, masks=masks)[0]

        x0 = pack_arrays(template)
        numeric = unpack_arrays(finite_difference_gradient(loss, x0), template)
        loss(x0)
        _, grads = model.loss_and_grads(features, labels, masks=masks)
        for name in template:
            assert relative_error(grads[name], numeric[name]) <= 1e-4, name

    def test_aux_vector_path(self):
        model = init_model(tiny_config(aux_dim=2), RandomStream(11))
        rng = RandomStream(12)
        nll, _ = model.loss_and_grads(
            rng.normal(size=(6, 3)), [0], aux=np.array([0.3, -0.7])
        )
        assert np.isfinite(nll)


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        model = init_model(tiny_config(MULTIPLICATIVE), RandomStream(13))
        path = tmp_path / "model.npz"
        save_checkpoint(path, model, {"epoch": 3})
        loaded, meta = load_checkpoint(path)
        assert meta["epoch"] == 3
        for name, arr in model.arrays().items():
            np.testing.assert_array_equal(arr, loaded.arrays()[name])
        rng = RandomStream(14)
        features = rng.normal(size=(5, 3))
        assert model.loss(features, [1]) == loaded.loss(features, [1])

    def test_encoder_init_hook(self, tmp_path):
        donor = init_model(tiny_config(), RandomStream(15))
        path = tmp_path / "donor.npz"
        save_checkpoint(path, donor)
        target = init_model(tiny_config(), RandomStream(16))
        before = target.arrays()["prediction.embedding"].copy()
        load_encoder_init(target, path)
        for name, arr in donor.arrays().items():
            if name.startswith("encoder."):
                np.testing.assert_array_equal(arr, target.arrays()[name])
        np.testing.assert_array_equal(target.arrays()["prediction.embedding"], before)

    def test_config_roundtrip(self):
        config = tiny_config(MULTIPLICATIVE, bidirectional=False)
        back = ModelConfig.from_dict(config.to_dict())
        assert back == config
