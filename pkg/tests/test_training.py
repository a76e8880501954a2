import math

import numpy as np
import pytest

from transducer_workbench.augment import SwitchoutConfig
from transducer_workbench.data import (
    Alphabet,
    SyntheticTaskConfig,
    generate_synthetic_task,
)
from transducer_workbench.errors import ContractViolation, TrainingDiverged
from transducer_workbench.model import ModelConfig, init_model
from transducer_workbench.networks import (
    CharLMConfig,
    EncoderConfig,
    PredictionConfig,
    init_char_lm_params,
    lm_score,
)
from transducer_workbench.numerics import RandomStream
from transducer_workbench.training import (
    ADAMW,
    CONST_DECAY,
    MOMENTUM_SGD,
    ONE_CYCLE,
    OptimizerConfig,
    ScheduleConfig,
    TrainingRecipe,
    adamw_step,
    batch_loss_and_grads,
    clip_gradients,
    init_optimizer,
    lr_at,
    momentum_sgd_step,
    train,
    train_char_lm,
)


class TestSchedules:
    def test_one_cycle_endpoints_exact(self):
        s = ScheduleConfig(kind=ONE_CYCLE)
        assert lr_at(s, 0.0) == 5e-5
        assert lr_at(s, 6.0) == 5e-4
        assert lr_at(s, 20.0) == 0.0

    def test_one_cycle_warmup_midpoint(self):
        s = ScheduleConfig(kind=ONE_CYCLE)
        assert lr_at(s, 3.0) == pytest.approx(2.75e-4, abs=1e-19)

    def test_one_cycle_continuous_and_peaked_at_warmup(self):
        s = ScheduleConfig(kind=ONE_CYCLE)
        grid = np.linspace(0, 20, 2001)
        values = [lr_at(s, float(e)) for e in grid]
        diffs = np.abs(np.diff(values))
        assert diffs.max() < 1e-5  # no jumps on a fine grid
        assert grid[int(np.argmax(values))] == pytest.approx(6.0, abs=0.01)

    def test_const_decay_values(self):
        s = ScheduleConfig(kind=CONST_DECAY)
        assert lr_at(s, 0.0) == 0.01
        assert lr_at(s, 10.0) == 0.01
        assert lr_at(s, 10.9) == 0.01  # integer-epoch granularity
        assert lr_at(s, 11.0) == 0.01 * 0.7
        assert lr_at(s, 12.0) == pytest.approx(0.01 * 0.7**2, abs=1e-18)
        assert lr_at(s, 12.0) == pytest.approx(4.9e-3, abs=1e-12)
        assert lr_at(s, 15.0) == 0.01 * 0.7**5

    def test_negative_rejected(self):
        with pytest.raises(ContractViolation):
            lr_at(ScheduleConfig(kind=ONE_CYCLE), -0.1)

    def test_beyond_total_rejected(self):
        with pytest.raises(ContractViolation):
            lr_at(ScheduleConfig(kind=ONE_CYCLE), 21.0)


class TestOptimizers:
    def test_sgd_zero_gradient_no_change(self):
        params = {"w": np.array([1.0, -2.0])}
        state = init_optimizer(params, OptimizerConfig(kind=MOMENTUM_SGD))
        momentum_sgd_step(params, {"w": np.zeros(2)}, state, 0.1)
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])

    def test_sgd_first_step_delta(self):
        params = {"w": np.array([1.0])}
        state = init_optimizer(params, OptimizerConfig(kind=MOMENTUM_SGD))
        momentum_sgd_step(params, {"w": np.array([2.0])}, state, 0.1)
        assert params["w"][0] == pytest.approx(1.0 - 0.1 * 2.0, abs=1e-15)

    def test_adamw_zero_gradient_zero_decay_no_change(self):
        params = {"w": np.array([3.0])}
        state = init_optimizer(params, OptimizerConfig(kind=ADAMW, weight_decay=0.0))
        adamw_step(params, {"w": np.zeros(1)}, state, 0.1)
        np.testing.assert_array_equal(params["w"], [3.0])

    def test_adamw_first_step_sign_scaled(self):
        config = OptimizerConfig(kind=ADAMW, weight_decay=0.0, eps=1e-12)
        for g in (0.5, -3.0, 10.0):
            params = {"w": np.array([1.0])}
            state = init_optimizer(params, config)
            adamw_step(params, {"w": np.array([g])}, state, 0.01)
            assert params["w"][0] == pytest.approx(1.0 - 0.01 * np.sign(g), rel=1e-6)

    def test_adamw_decay_applied_before_moments(self):
        config = OptimizerConfig(kind=ADAMW, weight_decay=0.5, eps=1e-12)
        params = {"w": np.array([2.0])}
        state = init_optimizer(params, config)
        adamw_step(params, {"w": np.zeros(1)}, state, 0.1)
        # zero gradient: only the decoupled decay moves the parameter
        assert params["w"][0] == pytest.approx(2.0 * (1 - 0.1 * 0.5), abs=1e-15)

    def test_sgd_quadratic_bowl_spec_window(self):
        # 200 steps at lr 0.01 reach |x| < 1e-6 with momentum 0.8; the
        # default 0.9 has contraction sqrt(0.9)/step and needs ~220 steps.
        config = OptimizerConfig(kind=MOMENTUM_SGD, momentum=0.8)
        params = {"x": np.array([1.0])}
        state = init_optimizer(params, config)
        for _ in range(200):
            momentum_sgd_step(params, {"x": 2.0 * params["x"]}, state, 0.01)
        assert abs(params["x"][0]) < 1e-6

    def test_sgd_quadratic_bowl_default_momentum(self):
        config = OptimizerConfig(kind=MOMENTUM_SGD)
        params = {"x": np.array([1.0])}
        state = init_optimizer(params, config)
        for _ in range(500):
            momentum_sgd_step(params, {"x": 2.0 * params["x"]}, state, 0.01)
        assert abs(params["x"][0]) < 1e-10

    def test_adamw_quadratic_bowl_convergence(self):
        # AdamW at a constant rate oscillates with decaying amplitude: the
        # trajectory crosses 1e-6 and the late iterates stay small.
        config = OptimizerConfig(kind=ADAMW, weight_decay=0.0)
        params = {"x": np.array([1.0])}
        state = init_optimizer(params, config)
        best = np.inf
        for _ in range(2000):
            adamw_step(params, {"x": 2.0 * params["x"]}, state, 0.01)
            best = min(best, abs(params["x"][0]))
        assert best < 1e-6
        assert abs(params["x"][0]) < 1e-3

    def test_nonfinite_gradient_aborts_with_name(self):
        params = {"bad_tensor": np.array([1.0])}
        state = init_optimizer(params, OptimizerConfig(kind=MOMENTUM_SGD))
        with pytest.raises(TrainingDiverged, match="bad_tensor"):
            momentum_sgd_step(params, {"bad_tensor": np.array([np.nan])}, state, 0.1)

    def test_clip_gradients(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        norm = clip_gradients(grads, 1.0)
        assert norm == pytest.approx(5.0)
        assert math.sqrt(sum(float((g**2).sum()) for g in grads.values())) == pytest.approx(1.0)
        grads2 = {"a": np.array([0.3])}
        clip_gradients(grads2, 1.0)
        np.testing.assert_array_equal(grads2["a"], [0.3])


def small_task(train_size=10, seed=5):
    config = SyntheticTaskConfig(
        num_labels=4,
        feature_dim=6,
        frames_per_symbol=(2, 3),
        noise_level=0.1,
        length_range=(2, 4),
        train_size=train_size,
        dev_size=4,
        test_size=4,
    )
    return generate_synthetic_task(config, RandomStream(seed))


def small_model(task, seed=7, mode="additive", cells=12, pred=10, joint=8, embed=6):
    config = ModelConfig(
        num_labels=task.config.num_labels,
        encoder=EncoderConfig(layers=1, cells=cells, stacking=2, skip=2,
                              input_dim=task.config.feature_dim),
        prediction=PredictionConfig(cells=pred, embed_dim=embed),
        joint_dim=joint,
        joint_mode=mode,
    )
    return init_model(config, RandomStream(seed))


def plain_recipe(**kw):
    defaults = dict(
        epochs=2,
        batch_size=4,
        optimizer=OptimizerConfig(kind=ADAMW),
        schedule=ScheduleConfig(kind=ONE_CYCLE, total_epochs=50.0),
        dropconnect_rate=0.0,
    )
    defaults.update(kw)
    return TrainingRecipe(**defaults)


class TestTrainLoop:
    def test_zero_epochs_returns_initialization(self):
        task = small_task()
        model = small_model(task)
        before = {k: v.copy() for k, v in model.arrays().items()}
        result = train(model, task.train, plain_recipe(epochs=0), RandomStream(1))
        assert result.metrics == []
        for name, arr in model.arrays().items():
            np.testing.assert_array_equal(arr, before[name])

    def test_batch_gradient_equals_mean_of_singles(self):
        task = small_task()
        model = small_model(task)
        items = [
            (utt.frames.astype(np.float64), utt.labels, None)
            for utt in list(task.train)[:8]
        ]
        nll_batch, grads_batch = batch_loss_and_grads(model, items)
        singles = [batch_loss_and_grads(model, [item]) for item in items]
        assert nll_batch == pytest.approx(
            np.mean([s[0] for s in singles]), abs=1e-12
        )
        for name in grads_batch:
            mean = np.mean([s[1][name] for s in singles], axis=0)
            assert np.max(np.abs(grads_batch[name] - mean)) <= 1e-10

    def test_seed_determinism(self):
        task = small_task()
        recipe = plain_recipe(epochs=1, dropconnect_rate=0.1)
        model_a = small_model(task)
        model_b = small_model(task)
        res_a = train(model_a, task.train, recipe, RandomStream(42))
        res_b = train(model_b, task.train, recipe, RandomStream(42))
        assert abs(res_a.metrics[0].train_nll - res_b.metrics[0].train_nll) <= 1e-12
        for name, arr in model_a.arrays().items():
            np.testing.assert_array_equal(arr, model_b.arrays()[name])

    def test_loss_decreases(self):
        task = small_task(train_size=16)
        model = small_model(task)
        result = train(model, task.train, plain_recipe(epochs=5), RandomStream(3))
        nlls = [r.train_nll for r in result.metrics]
        assert nlls[-1] < nlls[0]

    def test_overfit_small_dataset(self):
        # 10 utterances, 200 epochs: per-label NLL below 0.01.
        task = small_task(train_size=10)
        model = small_model(task, cells=16, pred=12, joint=12, embed=8)
        recipe = plain_recipe(
            epochs=200,
            batch_size=10,
            optimizer=OptimizerConfig(kind=ADAMW, weight_decay=0.0),
            schedule=ScheduleConfig(
                kind=ONE_CYCLE, total_epochs=200.0, warmup_epochs=10.0, peak_lr=3e-2,
                start_lr=1e-3,
            ),
        )
        result = train(model, task.train, recipe, RandomStream(4))
        assert result.metrics[-1].train_nll_per_label < 0.01

    def test_dev_wer_recorded(self):
        task = small_task()
        model = small_model(task)
        result = train(
            model,
            task.train,
            plain_recipe(epochs=1),
            RandomStream(5),
            dev_set=task.dev,
            alphabet=task.alphabet,
        )
        assert result.metrics[0].dev_wer is not None
        assert 0.0 <= result.metrics[0].dev_wer

    def test_augmented_recipe_runs(self):
        task = small_task()
        model = small_model(task)
        from transducer_workbench.augment import NoiseInjectConfig, SpecAugmentConfig

        recipe = plain_recipe(
            epochs=1,
            dropconnect_rate=0.25,
            switchout=SwitchoutConfig(temperature=10.0, vocab=task.config.num_labels),
            sequence_noise=NoiseInjectConfig(probability=0.5, scale=0.2),
            specaugment=SpecAugmentConfig(freq_masks=1, freq_max_width=2,
                                          time_masks=1, time_max_width=3),
            replicas=(("speed", 0.9), ("tempo", 1.1)),
        )
        result = train(model, task.train, recipe, RandomStream(6))
        assert np.isfinite(result.metrics[0].train_nll)

    def test_nan_parameters_abort(self):
        task = small_task()
        model = small_model(task)
        model.arrays()["joint.W_out"][0, 0] = np.nan
        with pytest.raises(TrainingDiverged):
            train(model, task.train, plain_recipe(epochs=1), RandomStream(7))

    def test_divergence_carries_last_checkpoint(self, monkeypatch):
        # Inject a fault in epoch 2: the error must carry the epoch-1
        # checkpoint (the tanh/softmax stack saturates rather than
        # overflowing, so organic NaNs need a fault seam).
        import transducer_workbench.training as training_mod

        task = small_task()
        model = small_model(task)
        real = training_mod.batch_loss_and_grads
        calls = {"n": 0}
        steps_in_epoch = math.ceil(len(task.train) / 4)

        def flaky(model_, items, masks=None):
            calls["n"] += 1
            if calls["n"] > steps_in_epoch:
                raise TrainingDiverged("non-finite loss nan")
            return real(model_, items, masks)

        monkeypatch.setattr(training_mod, "batch_loss_and_grads", flaky)
        with pytest.raises(TrainingDiverged) as exc:
            training_mod.train(model, task.train, plain_recipe(epochs=2), RandomStream(7))
        ckpt = exc.value.last_good_checkpoint
        assert ckpt is not None
        assert set(ckpt) == set(model.arrays())
        for arr in ckpt.values():
            assert np.isfinite(arr).all()


class TestCharLMTraining:
    def test_lm_learns_skewed_distribution(self):
        rng = RandomStream(8)
        # Strongly skewed unigram text: the LM should beat the uniform score.
        sequences = [
            tuple(int(v) for v in rng.child(9, i).integers(0, 2, size=6))
            for i in range(40
            )
        ]
        lm = init_char_lm_params(4, CharLMConfig(layers=1, cells=12, embed_dim=6), rng.child(1))
        history = train_char_lm(lm, sequences, rng.child(2), epochs=8, lr=5e-3)
        assert history[-1] < history[0]
        uniform_nll = math.log(lm.vocab)
        assert history[-1] < uniform_nll
        total, _ = lm_score((0, 1, 0), lm)
        assert np.isfinite(total)
