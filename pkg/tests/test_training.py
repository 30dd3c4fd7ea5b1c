import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import central_difference, metrics_reference
from spikegrid.data import SplitSpec, generate_synthetic, prepare
from spikegrid.errors import DataError, TrainingError
from spikegrid.network import NetworkSpec
from spikegrid.training import (ConfusionMatrix, TrainConfig, cross_entropy_loss, evaluate,
                                metrics_from_confusion, mse_loss, sgd_step, train)


@pytest.fixture(scope="module")
def tiny_task():
    cube, labels = generate_synthetic(3, 12, 12, 6, 1.0, 0.1, seed=4)
    data = prepare(cube, labels, SplitSpec("count", 12, 4), 4, 5)
    net = NetworkSpec.build(3, in_channels=4, patch_size=5, time_steps=3, channels=(4, 8, 8))
    return net, data.patches(data.train_coords), data.targets(data.train_coords)


class TestLosses:
    def test_uniform_logits(self):
        loss, grad = cross_entropy_loss(np.zeros(4), 2)
        assert abs(loss - math.log(4)) < 1e-12
        np.testing.assert_allclose(grad, [0.25, 0.25, -0.75, 0.25])

    @pytest.mark.parametrize("fn", [cross_entropy_loss, mse_loss])
    def test_gradient_matches_differences(self, rng, fn):
        z = rng.standard_normal((3, 5))
        y = np.array([0, 4, 2])
        _, grad = fn(z, y)
        flat = z.reshape(-1)
        num = [central_difference(lambda: fn(z, y)[0], flat, i, 1e-6) for i in range(flat.size)]
        np.testing.assert_allclose(grad.reshape(-1), num, atol=1e-6)

    def test_extreme_logits_stay_finite(self):
        loss, grad = cross_entropy_loss(np.array([1e4, -1e4]), 1)
        assert np.isfinite(loss) and np.all(np.isfinite(grad))


class TestSchedule:
    def test_step_decay(self):
        cfg = TrainConfig()
        assert cfg.lr_at(0) == cfg.lr_at(24) == 0.085
        assert abs(cfg.lr_at(25) - 0.0085) < 1e-15

    @pytest.mark.parametrize("kw", [{"learning_rate": -1.0}, {"lr_decay_factor": 0.0},
                                    {"epochs": 0}, {"batch_size": 0}, {"loss": "hinge"}])
    def test_invalid(self, kw):
        with pytest.raises(TrainingError):
            TrainConfig(**kw)


class TestSgd:
    def test_zero_gradient_leaves_params(self, rng):
        p = {"w": rng.standard_normal((3, 2)).astype(np.float32)}
        before = p["w"].copy()
        sgd_step(p, {"w": np.zeros((3, 2))}, {}, TrainConfig(), 0)
        np.testing.assert_array_equal(p["w"], before)

    def test_without_momentum_is_plain_descent(self, rng):
        cfg = TrainConfig(momentum=0.0, learning_rate=0.1)
        p = {"w": np.zeros(3)}
        vel = {}
        for g in (np.ones(3), 2 * np.ones(3)):
            sgd_step(p, {"w": g}, vel, cfg, 0)
        np.testing.assert_allclose(p["w"], -0.3)

    def test_momentum_accumulates(self):
        cfg = TrainConfig(momentum=0.5, learning_rate=1.0)
        p = {"w": np.zeros(1)}
        vel = {}
        sgd_step(p, {"w": np.ones(1)}, vel, cfg, 0)
        sgd_step(p, {"w": np.ones(1)}, vel, cfg, 0)
        assert p["w"][0] == -2.5

    def test_non_finite_gradient_names_parameter(self):
        with pytest.raises(TrainingError) as err:
            sgd_step({"fc.weight": np.zeros(2)}, {"fc.weight": np.array([1.0, np.nan])}, {},
                     TrainConfig(), 0)
        assert err.value.parameter == "fc.weight"

    def test_overflowing_update_names_parameter(self):
        with pytest.raises(TrainingError) as err:
            sgd_step({"w": np.zeros(1, np.float32)}, {"w": np.ones(1)}, {},
                     TrainConfig(learning_rate=1e39), 0)
        assert err.value.parameter == "w"

    def test_shape_mismatch(self):
        with pytest.raises(TrainingError):
            sgd_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, {}, TrainConfig(), 0)


class TestMetrics:
    def test_two_class_example(self):
        m = metrics_from_confusion(ConfusionMatrix(np.array([[40, 10], [20, 30]])))
        assert abs(m.oa - 0.70) < 1e-12
        assert abs(m.aa - 0.70) < 1e-12
        assert abs(m.kappa - 0.40) < 1e-12

    def test_matches_reference(self, rng):
        for _ in range(20):
            counts = rng.integers(0, 30, (5, 5))
            m = metrics_from_confusion(ConfusionMatrix(counts))
            oa, aa, kappa = metrics_reference(counts)
            assert np.allclose([m.oa, m.aa, m.kappa], [oa, aa, kappa], atol=1e-12)

    def test_diagonal_is_perfect(self):
        m = metrics_from_confusion(ConfusionMatrix(np.diag([5, 9, 2])))
        assert m.oa == m.aa == m.kappa == 1.0

    @given(st.integers(0, 2 ** 31), st.booleans())
    def test_kappa_one_iff_diagonal(self, seed, diagonal):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(2, 6))
        counts = np.diag(rng.integers(1, 20, k))
        if not diagonal:
            i, j = rng.choice(k, 2, replace=False)
            counts[i, j] = rng.integers(1, 5)
        kappa = metrics_from_confusion(ConfusionMatrix(counts)).kappa
        assert (kappa == 1.0) == diagonal

    def test_balanced_classes_give_aa_equal_oa(self):
        m = metrics_from_confusion(ConfusionMatrix(np.array([[8, 2, 0], [1, 8, 1], [0, 2, 8]])))
        assert abs(m.aa - m.oa) < 1e-12

    def test_chance_predictions_give_zero_kappa(self, rng):
        k, n = 4, 20_000
        _, m = evaluate(rng.integers(1, k + 1, n), rng.integers(1, k + 1, n), k)
        # sampling std of kappa under independence is about sqrt(pe / (n (1 - pe)))
        assert abs(m.kappa) < 3 * math.sqrt(0.25 / (n * 0.75))

    def test_evaluate_counts(self):
        cm, m = evaluate([1, 2, 2, 1], [1, 2, 1, 1], 2)
        np.testing.assert_array_equal(cm.counts, [[2, 1], [0, 1]])
        assert cm.total == 4 and m.oa == 0.75

    @pytest.mark.parametrize("pred,true", [([0], [1]), ([1], [3]), ([1, 2], [1])])
    def test_bad_labels(self, pred, true):
        with pytest.raises(DataError):
            evaluate(pred, true, 2)

    def test_empty(self):
        with pytest.raises(DataError):
            metrics_from_confusion(ConfusionMatrix(np.zeros((2, 2), int)))


class TestTrain:
    def test_zero_learning_rate_keeps_initial_params(self, tiny_task):
        net, x, y = tiny_task
        result = train(net, x, y, TrainConfig(learning_rate=0.0, epochs=1, seed=1))
        for k in result.params:
            np.testing.assert_array_equal(result.params[k], result.init_params[k])

    def test_deterministic(self, tiny_task):
        net, x, y = tiny_task
        cfg = TrainConfig(epochs=2, seed=3)
        a, b = train(net, x, y, cfg), train(net, x, y, cfg)
        assert [r.row() for r in a.history] == [r.row() for r in b.history]
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])

    def test_loss_falls(self, tiny_task):
        net, x, y = tiny_task
        seen = []
        result = train(net, x, y, TrainConfig(epochs=5, seed=0, learning_rate=0.05),
                       on_epoch=seen.append)
        assert seen == result.history and len(seen) == 5
        assert result.history[-1].loss < result.history[0].loss
        assert 0 <= result.best_epoch < 5

    def test_explicit_validation_set(self, tiny_task):
        net, x, y = tiny_task
        result = train(net, x, y, TrainConfig(epochs=1), val_patches=x[:3], val_labels=y[:3])
        assert result.history[0].oa in (0.0, 1 / 3, 2 / 3, 1.0)
