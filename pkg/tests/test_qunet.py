"""Tests for the quantile network, pinball loss/gradient, Adam, training."""

import numpy as np
import pytest
from conftest import end_to_end_gradcheck, margin_safe_targets, randomize_biases

from rainquant.dataset import SynthConfig, synth_scene
from rainquant.qunet import (
    ModelConfig,
    QuantileUNet,
    TrainConfig,
    TrainingDivergedError,
    adam_init,
    adam_step,
    evaluate_loss,
    load_checkpoint,
    pinball_grad,
    pinball_loss,
    save_checkpoint,
    scene_input,
    train,
)
from rainquant.swath import TileSizeError, mask_from_boxes


class TestPinballLoss:
    def test_closed_form_cases(self):
        # single pixel, single level
        assert pinball_loss([[1.0]], [2.0], levels=[0.5]) == pytest.approx(0.5, abs=1e-12)
        assert pinball_loss([[1.0]], [0.0], levels=[0.9]) == pytest.approx(0.1, abs=1e-12)
        assert pinball_loss([[3.0]], [3.0], levels=[0.3]) == pytest.approx(0.0, abs=1e-12)

    def test_hand_sum_two_pixels(self):
        # y = {0, 2}, yhat = 1, q = 0.5: mean(0.5, 0.5) = 0.5
        pred = np.array([[1.0], [1.0]])
        target = np.array([0.0, 2.0])
        assert pinball_loss(pred, target, levels=[0.5]) == pytest.approx(0.5, abs=1e-12)

    def test_sums_over_levels(self):
        pred = np.array([[1.0, 1.0]])
        target = np.array([2.0])
        # 0.25*(1) + 0.75*(1) = 1.0
        assert pinball_loss(pred, target, levels=[0.25, 0.75]) == pytest.approx(1.0, abs=1e-12)

    def test_nonnegative_and_zero_iff_exact(self):
        rng = np.random.default_rng(0)
        pred = rng.normal(size=(3, 5, 5, 9))
        target = rng.normal(size=(3, 5, 5))
        levels = np.linspace(0.1, 0.9, 9)
        assert pinball_loss(pred, target, levels) > 0
        exact = np.repeat(target[..., None], 9, axis=-1)
        assert pinball_loss(exact, target, levels) == 0.0

    def test_nan_pixels_excluded(self):
        pred = np.array([[1.0], [7.0]])
        target = np.array([2.0, np.nan])
        assert pinball_loss(pred, target, levels=[0.5]) == pytest.approx(0.5, abs=1e-12)

    def test_all_nan_raises(self):
        with pytest.raises(ValueError, match="empty pinball"):
            pinball_loss([[1.0]], [np.nan], levels=[0.5])

    def test_minimizer_is_empirical_quantile(self):
        # brute-force grid search: the best constant predictor sits at the
        # empirical q-quantile within one grid step
        rng = np.random.default_rng(7)
        grid = np.arange(0.0, 1.0 + 1e-9, 1e-3)
        for q in (0.25, 0.5, 0.9):
            y = rng.random(201)
            losses = [pinball_loss(np.full((201, 1), c), y, levels=[q]) for c in grid]
            best = grid[int(np.argmin(losses))]
            emp = np.quantile(y, q, method="inverted_cdf")
            assert abs(best - emp) <= 1e-3 + 1e-9


class TestPinballGrad:
    def test_branch_values(self):
        assert pinball_grad([[1.0]], [2.0], levels=[0.5])[0, 0] == pytest.approx(-0.5)
        assert pinball_grad([[1.0]], [0.0], levels=[0.9])[0, 0] == pytest.approx(0.1)

    def test_kink_takes_geq_branch(self):
        g = pinball_grad([[1.0]], [1.0], levels=[0.7])
        assert g[0, 0] == pytest.approx(-0.7)

    def test_normalized_by_pixel_count(self):
        pred = np.full((4, 1), 1.0)
        target = np.full(4, 2.0)
        g = pinball_grad(pred, target, levels=[0.5])
        np.testing.assert_allclose(g, -0.5 / 4)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        levels = np.linspace(0.05, 0.95, 19)
        pred = rng.normal(size=(6, 6, 19)).astype(np.float64)
        target = pred[..., 9] + rng.choice([-1.0, 1.0], (6, 6)) * rng.uniform(0.01, 1.0, (6, 6))
        # keep every pixel-level pair away from its kink
        assert np.abs(target[..., None] - pred).min() > 1e-3
        g = pinball_grad(pred, target, levels)
        h = 1e-6
        for _ in range(60):
            i, j, k = rng.integers(0, 6), rng.integers(0, 6), rng.integers(0, 19)
            p = pred.copy()
            p[i, j, k] += h
            lp = pinball_loss(p, target, levels)
            p[i, j, k] -= 2 * h
            lm = pinball_loss(p, target, levels)
            fd = (lp - lm) / (2 * h)
            assert abs(fd - g[i, j, k]) / max(abs(fd), abs(g[i, j, k]), 1e-12) < 1e-6

    def test_nan_gets_zero_gradient(self):
        g = pinball_grad(np.ones((2, 1)), np.array([2.0, np.nan]), levels=[0.5])
        assert g[1, 0] == 0.0


class TestAdam:
    def test_first_step_magnitude_is_lr(self):
        p = [("x", np.array([1.0, -2.0, 5.0]))]
        g = [("x", np.array([0.3, -40.0, 1e-3]))]
        st = adam_init(p)
        adam_step(p, g, st, lr=0.01)
        # bias-corrected first step: |delta| = lr * |g| / (|g| + eps) ~ lr
        np.testing.assert_allclose(np.abs(p[0][1] - [1.0, -2.0, 5.0]), 0.01, rtol=1e-4)

    def test_zero_gradient_no_update(self):
        p = [("x", np.array([1.5, -0.5]))]
        g = [("x", np.zeros(2))]
        st = adam_init(p)
        adam_step(p, g, st, lr=0.1)
        np.testing.assert_array_equal(p[0][1], [1.5, -0.5])

    def test_scalar_quadratic_simulation(self):
        # oracle: simulate Adam on f(x) = x^2 from x = 1 with lr 0.1
        p = [("x", np.array([1.0]))]
        st = adam_init(p)
        trace = [1.0]
        for _ in range(100):
            g = [("x", np.array([2.0 * p[0][1][0]]))]
            adam_step(p, g, st, lr=0.1)
            trace.append(float(p[0][1][0]))
        trace = np.abs(np.array(trace))
        first_below = int(np.argmax(trace < 0.1))
        assert first_below > 0
        assert np.all(np.diff(trace[:first_below + 1]) < 0)
        assert trace[-1] < 0.01


class TestForward:
    def test_shape_contract(self):
        model = QuantileUNet(ModelConfig(depth=4, width=8))
        x = np.zeros((1, 64, 64, 4), dtype=np.float32)
        y = model.forward(x)
        assert y.shape == (1, 64, 64, 99)

    def test_deterministic(self):
        model = QuantileUNet(ModelConfig(depth=2, width=4, seed=5))
        x = np.random.default_rng(0).normal(size=(2, 16, 16, 4)).astype(np.float32)
        np.testing.assert_array_equal(model.forward(x), model.forward(x))

    def test_same_seed_same_weights(self):
        a = QuantileUNet(ModelConfig(seed=9))
        b = QuantileUNet(ModelConfig(seed=9))
        for (_, pa), (_, pb) in zip(a.params(), b.params()):
            np.testing.assert_array_equal(pa, pb)

    def test_indivisible_dims_rejected(self):
        model = QuantileUNet(ModelConfig(depth=4, width=4))
        with pytest.raises(TileSizeError, match="crop"):
            model.forward(np.zeros((1, 60, 64, 4), dtype=np.float32))

    def test_translation_equivariance_periodic(self):
        cfg = ModelConfig(depth=4, width=4, seed=2, padding="periodic", dtype="float64")
        model = QuantileUNet(cfg)
        rng = np.random.default_rng(3)
        randomize_biases(model, rng)
        x = rng.normal(size=(1, 32, 32, 4))
        shift = cfg.tile_multiple
        y = model.forward(x)
        y_shift = model.forward(np.roll(x, (shift, shift), axis=(1, 2)))
        np.testing.assert_allclose(y_shift, np.roll(y, (shift, shift), axis=(1, 2)),
                                   atol=1e-9)

    def test_param_count_closed_form(self):
        depth, width, cin, cout = 4, 8, 4, 99
        widths = [width * 2 ** i for i in range(depth + 1)]

        def conv(ci, co, k=3):
            return k * k * ci * co + co

        expected = 0
        prev = cin
        for w in widths[:-1]:
            expected += conv(prev, w) + conv(w, w)
            prev = w
        expected += conv(widths[-2], widths[-1]) + conv(widths[-1], widths[-1])
        for i in reversed(range(depth)):
            w = widths[i]
            expected += conv(widths[i + 1], w) + conv(2 * w, w) + conv(w, w)
        expected += conv(width, cout, k=1)
        model = QuantileUNet(ModelConfig(depth=depth, width=width))
        assert model.param_count() == expected


class TestEndToEndGradient:
    def test_tiny_model_matches_finite_differences(self):
        model = QuantileUNet(ModelConfig(depth=1, width=2, seed=3, dtype="float64"))
        rng = np.random.default_rng(11)
        randomize_biases(model, rng)
        x = rng.normal(size=(1, 16, 16, 4))
        target = margin_safe_targets(model, x, rng)
        worst = end_to_end_gradcheck(model, x, target, rng, n_coords=60)
        assert worst < 1e-3

    def test_periodic_padding_backward(self):
        model = QuantileUNet(ModelConfig(depth=1, width=2, seed=4, dtype="float64",
                                         padding="periodic"))
        rng = np.random.default_rng(12)
        randomize_biases(model, rng)
        x = rng.normal(size=(1, 8, 8, 4))
        target = margin_safe_targets(model, x, rng)
        worst = end_to_end_gradcheck(model, x, target, rng, n_coords=40)
        assert worst < 1e-3


def tiny_dataset(n=3, size=(16, 16), seed=0):
    mask = mask_from_boxes(1.0, land_boxes=[(40.0, 55.0, -10.0, 15.0)])
    cfg = SynthConfig(size=size)
    out = []
    for i in range(n):
        scene, rain = synth_scene(cfg, mask, seed=seed, index=i)
        x = scene_input(scene.tb) / 300.0
        out.append((x.astype(np.float32), rain.rain.copy()))
    return out


class TestTrain:
    def test_zero_epochs_returns_initial_weights(self):
        model = QuantileUNet(ModelConfig(depth=2, width=2, seed=1))
        before = [p.copy() for _, p in model.params()]
        history, _, _ = train(model, tiny_dataset(2), [], TrainConfig(epochs=0))
        assert history == []
        for (_, p), q in zip(model.params(), before):
            np.testing.assert_array_equal(p, q)

    def test_two_runs_identical_history(self):
        data = tiny_dataset(4)
        cfg = TrainConfig(lr=1e-3, epochs=3, batch_size=2, seed=7)
        h1, _, _ = train(QuantileUNet(ModelConfig(depth=2, width=4, seed=7)),
                         data[:3], data[3:], cfg)
        h2, _, _ = train(QuantileUNet(ModelConfig(depth=2, width=4, seed=7)),
                         data[:3], data[3:], cfg)
        assert h1 == h2

    def test_overfits_single_scene(self):
        data = tiny_dataset(1)
        model = QuantileUNet(ModelConfig(depth=4, width=8, seed=0))
        cfg = TrainConfig(lr=3e-3, epochs=500, batch_size=1, seed=0)
        history, _, _ = train(model, data, [], cfg)
        assert history[-1]["train_loss"] < 0.05 * history[0]["train_loss"]

    def test_divergence_aborts_with_epoch(self):
        data = tiny_dataset(2)
        model = QuantileUNet(ModelConfig(depth=2, width=4, seed=1))
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(TrainingDivergedError) as err:
                train(model, data, [], TrainConfig(lr=1e30, epochs=10, batch_size=2))
        assert err.value.epoch >= 0

    def test_empty_train_set_rejected(self):
        model = QuantileUNet(ModelConfig(depth=2, width=2))
        with pytest.raises(ValueError):
            train(model, [], [], TrainConfig(epochs=1))


class TestCheckpoint:
    def test_roundtrip_identical_outputs(self, tmp_path):
        model = QuantileUNet(ModelConfig(depth=2, width=4, seed=5))
        data = tiny_dataset(2)
        train(model, data, [], TrainConfig(lr=1e-3, epochs=2, batch_size=2))
        path = tmp_path / "model.qnt1"
        save_checkpoint(model, path, train_cfg=TrainConfig(epochs=2))
        loaded, meta = load_checkpoint(path)
        assert meta["param_count"] == model.param_count()
        x = np.random.default_rng(0).normal(size=(1, 16, 16, 4)).astype(np.float32)
        np.testing.assert_array_equal(loaded.forward(x), model.forward(x))

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.qnt1"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        from rainquant.swath import BadMagicError

        with pytest.raises(BadMagicError):
            load_checkpoint(p)

    def test_resume_reproduces_history(self, tmp_path):
        data = tiny_dataset(5)
        mk = lambda: QuantileUNet(ModelConfig(depth=2, width=4, seed=3))
        cfg = TrainConfig(lr=1e-3, epochs=4, batch_size=2, seed=9)
        straight, _, _ = train(mk(), data[:4], data[4:], cfg)

        model = mk()
        half = TrainConfig(lr=1e-3, epochs=2, batch_size=2, seed=9)
        h1, state, rng = train(model, data[:4], data[4:], half)
        path = tmp_path / "resume.qnt1"
        save_checkpoint(model, path, train_cfg=half, optimizer_state=state,
                        rng=rng, epoch=2)
        loaded, meta = load_checkpoint(path)
        h2, _, _ = train(loaded, data[:4], data[4:], cfg, start_epoch=meta["epoch"],
                         optimizer_state=meta["optimizer_state"], rng=meta["rng"])
        assert h1 + h2 == straight
