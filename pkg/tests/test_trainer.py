import numpy as np
import pytest

from fatq import spectral
from fatq.numerics import make_rng
from fatq.quantizers import LOGARITHMIC
from fatq.trainer import (
    Checkpoint,
    QatLayer,
    QatSettings,
    StaleCacheError,
    TinyCNN,
    TrainConfig,
    backward_layer,
    bop,
    evaluate,
    finetune,
    forward_layer,
    load_checkpoint,
    load_npz,
    make_dataset,
    save_checkpoint,
    train,
    transform_overhead,
)
from fatq.trainer.checkpoint import CheckpointFormatError, from_bytes, to_bytes
from fatq.trainer.layers import ALPHA_FLOOR, col2im, im2col
from fatq.trainer.train import softmax_xent


def naive_conv(x, w, padding):
    b, c, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho, wo = h + 2 * padding - k + 1, wd + 2 * padding - k + 1
    out = np.zeros((b, co, ho, wo))
    for n in range(b):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    out[n, o, i, j] = np.sum(xp[n, :, i : i + k, j : j + k] * w[o])
    return out


def saturated_generator(w):
    """Generator making every mask entry round to exactly 1.0."""
    norms = spectral.spectrum(w.reshape(w.shape[0], -1)).norms
    return 1e3 / norms.min() * np.eye(w.shape[0])


class TestForward:
    def test_conv_matches_naive(self):
        rng = make_rng(0)
        w = rng.normal(size=(3, 2, 3, 3))
        x = rng.normal(size=(2, 2, 5, 5))
        out, _ = forward_layer(QatLayer("conv", w, padding=1), QatSettings("fp"), x)
        np.testing.assert_allclose(out, naive_conv(x, w, 1), atol=1e-12)

    def test_high_precision_fat_matches_full_precision(self):
        rng = make_rng(1)
        w = rng.normal(size=(4, 2, 3, 3))
        x = rng.uniform(0, 1, size=(2, 2, 6, 6))
        layer = QatLayer("conv", w, generator=saturated_generator(w), padding=1,
                         alpha_w=float(np.abs(w).max()), alpha_a=1.0)
        out, _ = forward_layer(layer, QatSettings("fat", bits_w=16, bits_a=16), x)
        ref = naive_conv(x, w, 1)
        assert np.max(np.abs(out - ref)) <= 1e-3 * np.max(np.abs(ref))

    def test_zero_input(self):
        w = make_rng(2).normal(size=(2, 1, 3, 3))
        layer = QatLayer("conv", w, generator=np.eye(2), padding=1)
        out, _ = forward_layer(layer, QatSettings("fat"), np.zeros((1, 1, 4, 4)))
        assert np.all(out == 0)

    def test_hand_computed_two_bit_conv(self):
        # signed 2-bit weights snap to {-1, 0, 1}, unsigned 2-bit inputs to {0, 1/3, 2/3, 1}
        w = np.array([[[[0.9, -0.6], [0.4, -1.3]]]])  # -> [[1, -1], [0, -1]]
        x = np.array([[[[0.6, 0.1], [1.5, 0.2]]]])  # -> [[2/3, 0], [1, 1/3]]
        layer = QatLayer("conv", w, alpha_w=1.0, alpha_a=1.0)
        out, _ = forward_layer(layer, QatSettings("ste", bits_w=2, bits_a=2), x)
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == pytest.approx(2 / 3 - 1 / 3, abs=1e-15)

    def test_fc(self):
        w = np.array([[1.0, 2.0], [3.0, -1.0]])
        out, _ = forward_layer(QatLayer("fc", w), QatSettings("fp"), np.array([[1.0, 1.0]]))
        np.testing.assert_allclose(out, [[3.0, 2.0]])

    @pytest.mark.parametrize(
        "layer, x",
        [
            (QatLayer("conv", np.ones((2, 3, 3, 3))), np.ones((1, 2, 5, 5))),
            (QatLayer("conv", np.ones((2, 1, 3, 3))), np.ones((1, 1, 2, 2))),
            (QatLayer("fc", np.ones((2, 3))), np.ones((1, 4))),
        ],
    )
    def test_shape_errors(self, layer, x):
        with pytest.raises(ValueError):
            forward_layer(layer, QatSettings("fp"), x)

    def test_im2col_adjoint(self):
        rng = make_rng(3)
        x = rng.normal(size=(2, 3, 5, 4))
        cols = im2col(x, 3, 1, 1)
        g = rng.normal(size=cols.shape)
        assert np.sum(cols * g) == pytest.approx(np.sum(x * col2im(g, x.shape, 3, 1, 1)), rel=1e-12)


class TestBackward:
    def _layer(self, mode="fat"):
        rng = make_rng(4)
        w = rng.normal(size=(3, 2, 3, 3))
        gen = spectral.init_generator(spectral.spectrum(w.reshape(3, -1)).norms)
        layer = QatLayer("conv", w, generator=gen, padding=1, alpha_w=1.0, alpha_a=0.8)
        x = rng.uniform(0, 1, size=(2, 2, 4, 4))
        return layer, x

    def test_zero_upstream(self):
        layer, x = self._layer()
        out, cache = forward_layer(layer, QatSettings("fat"), x)
        g = backward_layer(layer, cache, np.zeros_like(out))
        assert np.all(g["weight"] == 0) and np.all(g["generator"] == 0) and np.all(g["input"] == 0)
        assert g["alpha_w"] == 0 and g["alpha_a"] == 0

    def test_stale_cache(self):
        layer, x = self._layer()
        out, cache = forward_layer(layer, QatSettings("fat"), x)
        layer.weight = layer.weight * 1.01
        layer.touch()
        with pytest.raises(StaleCacheError):
            backward_layer(layer, cache, np.ones_like(out))

    def test_unit_mask_equals_plain_ste(self):
        layer, x = self._layer()
        layer.generator = saturated_generator(layer.weight)
        s_fat = QatSettings("fat", norm_path=False)
        out, cache = forward_layer(layer, s_fat, x)
        assert np.all(cache["wcache"]["mask"].values == 1.0)
        up = make_rng(5).normal(size=out.shape)
        g_fat = backward_layer(layer, cache, up)
        out2, cache2 = forward_layer(layer, QatSettings("ste"), x)
        g_ste = backward_layer(layer, cache2, up)
        np.testing.assert_allclose(out, out2, atol=1e-12)
        np.testing.assert_allclose(g_fat["weight"], g_ste["weight"], atol=1e-12)
        np.testing.assert_allclose(g_fat["input"], g_ste["input"], atol=1e-12)

    @pytest.mark.parametrize("kind", ["conv", "fc"])
    @pytest.mark.parametrize("weight_norm", [False, True])
    def test_one_layer_gradcheck(self, kind, weight_norm):
        """Single layer, N = 8, batch 2, clip surrogate in place of rounding."""
        from fatq.numerics import finite_diff_jacobian

        rng = make_rng(6)
        if kind == "conv":
            w = rng.normal(size=(3, 2, 2, 2))
            x = rng.uniform(0, 1, size=(2, 2, 3, 3))
        else:
            w = rng.normal(size=(3, 8))
            x = rng.uniform(0, 1, size=(2, 8))
        s = QatSettings("fat", scheme=LOGARITHMIC, weight_norm=weight_norm, surrogate=True)
        gen = spectral.init_generator(spectral.spectrum(w.reshape(3, -1)).norms)
        gen = gen + rng.normal(0, 0.2 * gen[0, 0], size=gen.shape)
        layer = QatLayer(kind, w, generator=gen, alpha_w=0.7, alpha_a=0.75)
        out, cache = forward_layer(layer, s, x)
        target = rng.normal(size=out.shape)
        grads = backward_layer(layer, cache, target)

        def loss():
            return float(np.sum(forward_layer(layer, s, x)[0] * target))

        for attr in ("weight", "generator", "alpha_w", "alpha_a"):
            base = np.atleast_1d(np.asarray(getattr(layer, attr), dtype=float)).ravel().copy()

            def f(v, attr=attr, base=base):
                setattr(layer, attr, v.reshape(np.shape(getattr(layer, attr))) if base.size > 1 else float(v[0]))
                layer.touch()
                return [loss()]

            fd = finite_diff_jacobian(f, base)[0]
            f(base)
            analytic = np.atleast_1d(grads[attr]).ravel()
            assert np.max(np.abs(analytic - fd)) <= 1e-4 * max(np.max(np.abs(fd)), 1e-8), attr
        fd_x = finite_diff_jacobian(lambda v: [float(np.sum(forward_layer(layer, s, v.reshape(x.shape))[0] * target))],
                                    x.ravel())[0]
        np.testing.assert_allclose(grads["input"].ravel(), fd_x, atol=1e-6)

    def test_alpha_floor(self):
        layer = QatLayer("fc", np.ones((2, 2)), alpha_w=-3.0, alpha_a=0.0)
        layer.clamp_alphas()
        assert layer.alpha_w == ALPHA_FLOOR and layer.alpha_a == ALPHA_FLOOR


class TestModel:
    def test_network_gradcheck_all_modes(self):
        from fatq import gradcheck

        rng = make_rng(7)
        results = []
        for mode in ("fp", "ste", "fat"):
            for wn in (False, True):
                results += gradcheck.check_end_to_end(rng, QatSettings(mode, weight_norm=wn, surrogate=True), 0)
        assert {r.module.split(".")[0] for r in results} >= {"end_to_end[fp]", "end_to_end[ste]", "end_to_end[fat]"}
        assert all(r.passed for r in results), gradcheck.worst(results)

    def test_fold_for_inference(self, toy):
        ckpt, _ = toy.qat(0, "fat", 4)
        x = toy.data.x_test[:128]
        folded = ckpt.model.fold_for_inference()
        assert all(l.generator is None for l in folded.layers)
        assert folded.settings.mode == "ste"
        assert np.max(np.abs(folded.predict(x) - ckpt.model.predict(x))) <= 1e-10

    def test_fold_with_weight_norm(self):
        rng = make_rng(8)
        model = TinyCNN.create(rng)
        x = rng.uniform(0, 1, size=(16, 1, 16, 16))
        model.settings = QatSettings("fat", weight_norm=True)
        model.init_quantization(x)
        folded = model.fold_for_inference()
        assert np.max(np.abs(folded.predict(x) - model.predict(x))) <= 1e-10

    def test_init_quantization(self):
        rng = make_rng(9)
        model = TinyCNN.create(rng)
        model.settings = QatSettings("fat")
        x = rng.uniform(0, 1, size=(32, 1, 16, 16))
        model.init_quantization(x)
        for layer in model.layers:
            mask = spectral.make_mask(spectral.spectrum(layer.weight.reshape(layer.c_out, -1)), layer.generator)
            assert abs(np.median(mask.values) - 1 / (1 + np.exp(-3))) < 0.01
        assert model.layers[0].alpha_a == pytest.approx(np.percentile(x, 99.9))


class TestTraining:
    def test_zero_epochs_returns_initial_model(self):
        data = make_dataset(seed=1, n_train=64, n_test=32)
        model = TinyCNN.create(make_rng(0))
        before = to_bytes(Checkpoint(model.copy()))
        ckpt, log = train(model, data, TrainConfig(epochs=0))
        assert log == [] and ckpt.epoch == 0
        assert to_bytes(Checkpoint(ckpt.model)) == before

    def test_determinism(self):
        data = make_dataset(seed=2, n_train=128, n_test=64)
        model = TinyCNN.create(make_rng(1))
        model.settings = QatSettings("fat")
        model.init_quantization(data.x_train[:64])
        runs = []
        for _ in range(2):
            ckpt, log = train(model.copy(), data, TrainConfig(epochs=2, mode="fat", seed=5))
            runs.append((to_bytes(ckpt), log))
        assert runs[0][0] == runs[1][0]
        assert runs[0][1] == runs[1][1]

    def test_fp_loss_decreases_first_five_epochs(self, toy):
        for seed in toy.seeds:
            _, log = toy.fp(seed)
            train_loss = [row[2] for row in log if row[1] == "train"][:5]
            assert all(b < a for a, b in zip(train_loss, train_loss[1:])), train_loss

    def test_fp_pretraining_smoke(self, toy):
        for seed in toy.seeds:
            _, log = toy.fp(seed)
            assert [r for r in log if r[1] == "train"][-1][3] >= 0.95

    def test_alphas_stay_positive(self):
        data = make_dataset(seed=3, n_train=64, n_test=32)
        model = TinyCNN.create(make_rng(2))
        fp = Checkpoint(model)
        ckpt, _ = finetune(fp, data, TrainConfig(epochs=1, mode="ste", lr=5.0), calib_size=32)
        assert all(l.alpha_w >= ALPHA_FLOOR and l.alpha_a >= ALPHA_FLOOR for l in ckpt.model.layers)

    def test_finetune_requires_quantized_mode(self):
        with pytest.raises(ValueError):
            finetune(Checkpoint(TinyCNN.create(make_rng(0))), make_dataset(n_train=8, n_test=8), TrainConfig())

    @pytest.mark.parametrize("kwargs", [{"epochs": -1}, {"lr": 0.0}, {"milestones": (0.8, 0.2)}])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)

    def test_lr_schedule(self):
        cfg = TrainConfig(epochs=20, lr=0.01)
        assert [cfg.lr_at(e) for e in (0, 9, 10, 14, 15, 19)] == pytest.approx(
            [0.01, 0.01, 0.001, 0.001, 0.0001, 0.0001]
        )

    def test_softmax_xent_gradient(self):
        rng = make_rng(3)
        logits = rng.normal(size=(4, 3))
        y = np.array([0, 2, 1, 2])
        loss, g = softmax_xent(logits, y)
        h = 1e-6
        for i in range(4):
            for j in range(3):
                lp, lm = logits.copy(), logits.copy()
                lp[i, j] += h
                lm[i, j] -= h
                fd = (softmax_xent(lp, y)[0] - softmax_xent(lm, y)[0]) / (2 * h)
                assert abs(fd - g[i, j]) < 1e-8

    def test_evaluate_range(self):
        data = make_dataset(seed=4, n_train=16, n_test=16)
        loss, acc = evaluate(TinyCNN.create(make_rng(0)), data.x_test, data.y_test)
        assert loss > 0 and 0 <= acc <= 1


class TestData:
    def test_deterministic(self):
        a, b = make_dataset(seed=3, n_train=32, n_test=16), make_dataset(seed=3, n_train=32, n_test=16)
        assert a.x_train.tobytes() == b.x_train.tobytes() and np.array_equal(a.y_test, b.y_test)

    def test_shapes_and_range(self):
        d = make_dataset(seed=0, n_train=32, n_test=16)
        assert d.x_train.shape == (32, 1, 16, 16) and d.x_test.shape == (16, 1, 16, 16)
        assert d.x_train.min() >= 0 and d.x_train.max() <= 1
        assert d.n_classes == 4

    def test_missing_file_hint(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="bundled synthetic set"):
            load_npz(tmp_path / "nope.npz")

    def test_npz_round_trip(self, tmp_path):
        d = make_dataset(seed=0, n_train=8, n_test=4)
        np.savez(tmp_path / "d.npz", x_train=d.x_train, y_train=d.y_train, x_test=d.x_test, y_test=d.y_test)
        e = load_npz(tmp_path / "d.npz")
        assert np.array_equal(e.x_train, d.x_train)


class TestCheckpoint:
    def _ckpt(self):
        model = TinyCNN.create(make_rng(0))
        model.settings = QatSettings("fat", bits_w=3, bits_a=3)
        model.init_quantization(make_rng(1).uniform(0, 1, size=(8, 1, 16, 16)))
        return Checkpoint(model, 3, [(0, "train", 1.2, 0.4), (0, "test", 1.3, 0.35)],
                          make_rng(5).bit_generator.state, {"note": "x"})

    def test_round_trip_bytes(self, tmp_path):
        ckpt = self._ckpt()
        save_checkpoint(tmp_path / "a.ckpt", ckpt)
        loaded = load_checkpoint(tmp_path / "a.ckpt")
        save_checkpoint(tmp_path / "b.ckpt", loaded)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert loaded.history == ckpt.history and loaded.epoch == 3
        assert loaded.rng_state == ckpt.rng_state
        np.testing.assert_array_equal(loaded.model.layers[1].generator, ckpt.model.layers[1].generator)

    def test_header(self):
        raw = to_bytes(self._ckpt())
        assert raw[:4] == b"FATQ"
        assert int.from_bytes(raw[4:8], "little") == 1

    @pytest.mark.parametrize("mutate", [lambda b: b"NOPE" + b[4:], lambda b: b[:-3], lambda b: b + b"\0"])
    def test_corrupt(self, mutate):
        with pytest.raises(CheckpointFormatError):
            from_bytes(mutate(to_bytes(self._ckpt())))

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "missing.ckpt")

    def test_no_temp_files_left(self, tmp_path):
        save_checkpoint(tmp_path / "c.ckpt", self._ckpt())
        assert [p.name for p in tmp_path.iterdir()] == ["c.ckpt"]


class TestCost:
    def test_bop_ratios(self):
        assert bop(32, 32, 1000) / bop(4, 4, 1000) == 64
        assert bop(4, 4, 7) / bop(3, 3, 7) == pytest.approx(16 / 9)

    def test_bop_resnet18_consistency(self):
        assert bop(32, 32, 1.8207e9) == pytest.approx(1.8637e12, rel=1e-3)

    def test_bop_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            bop(0, 4, 10)

    def test_overhead_reference_layer(self):
        delta, base, ratio = transform_overhead(256, 3, 3, 224, 224)
        assert abs(ratio - 0.0054) <= 2e-4
        n = 27
        assert ratio == pytest.approx((2 * np.log2(n) + 4 + 256) / (224 * 224), rel=1e-12)
        assert base == 224 * 224 * 256 * 27

    def test_overhead_unit_filter(self):
        delta, _, _ = transform_overhead(1, 1, 1, 5, 5)
        assert delta == 5

    def test_overhead_vanishes_with_resolution(self):
        ratios = [transform_overhead(64, 16, 3, s, s)[2] for s in (8, 64, 512, 4096)]
        assert all(b < a for a, b in zip(ratios, ratios[1:])) and ratios[-1] < 1e-4
