import numpy as np
import pytest

from pgrl.nn import (Adam, Affine, L2Normalize, Model, ModelConfig, Relu,
                     ce_loss, ce_per_sample, cosine_lr, softmax, wce_loss,
                     wce_value_grad)
from pgrl.seeding import stream

# Central finite differences are the gradient oracle: h=1e-5 with a relative
# tolerance of 1e-4 (absolute floor covers exactly-zero gradients).
FD_H = 1e-5


def numerical_grad(fn, arr, h=FD_H):
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        ix = it.multi_index
        old = arr[ix]
        arr[ix] = old + h
        lp = fn()
        arr[ix] = old - h
        lm = fn()
        arr[ix] = old
        g[ix] = (lp - lm) / (2.0 * h)
    return g


def assert_grad_close(analytic, numeric):
    diff = np.abs(analytic - numeric)
    bound = 1e-4 * np.maximum(np.abs(analytic), np.abs(numeric)) + 1e-7
    assert (diff <= bound).all(), f"max gradient mismatch {diff.max():.3e}"


def _away_from_kinks(x, margin=1e-3):
    x = x.copy()
    x[np.abs(x) < margin] = margin
    return x


class TestLayerGradients:
    def test_affine_param_and_input_grads(self, rng):
        layer = Affine(4, 3, rng)
        x = rng.normal(size=(5, 4))
        R = rng.normal(size=(5, 3))

        def loss():
            return float((layer.forward(x) * R).sum())

        loss()
        gin = layer.backward(R)
        assert_grad_close(layer.dW, numerical_grad(loss, layer.W))
        assert_grad_close(layer.db, numerical_grad(loss, layer.b))
        assert_grad_close(gin, numerical_grad(loss, x))

    def test_relu_input_grad(self, rng):
        layer = Relu()
        x = _away_from_kinks(rng.normal(size=(6, 5)))
        R = rng.normal(size=(6, 5))

        def loss():
            return float((layer.forward(x) * R).sum())

        loss()
        gin = layer.backward(R)
        assert_grad_close(gin, numerical_grad(loss, x))

    def test_l2_normalize_input_grad(self, rng):
        layer = L2Normalize()
        x = rng.normal(size=(6, 5)) + 0.5
        R = rng.normal(size=(6, 5))

        def loss():
            return float((layer.forward(x) * R).sum())

        loss()
        gin = layer.backward(R)
        assert_grad_close(gin, numerical_grad(loss, x))

    def test_softmax_ce_logit_grad(self, rng):
        logits = rng.normal(size=(7, 4))
        y = rng.integers(0, 4, size=7)
        w = np.ones(7)
        trusted = np.arange(7)

        def loss():
            return wce_value_grad(logits, y, w, trusted)[0]

        _, dlogits = wce_value_grad(logits, y, w, trusted)
        assert_grad_close(dlogits, numerical_grad(loss, logits))

    def test_wce_with_sgn_logit_grad(self, rng):
        # mixed weights incl. negative ones; generic logits keep sgn constant
        # within the FD step
        logits = rng.normal(size=(8, 4))
        y = rng.integers(0, 4, size=8)
        w = rng.uniform(-1, 1, size=8)
        trusted = np.array([0, 2, 3, 5, 6])

        def loss():
            return wce_value_grad(logits, y, w, trusted)[0]

        _, dlogits = wce_value_grad(logits, y, w, trusted)
        assert_grad_close(dlogits, numerical_grad(loss, logits))

    def test_full_model_grads_through_all_stages(self, rng):
        model = Model(ModelConfig(in_dim=5, k=3, d1=4, d2=3, f_hidden=6, s_hidden=5), seed=3)
        x = rng.uniform(0, 1, size=(6, 5))
        y = rng.integers(0, 3, size=6)
        w = rng.uniform(-1, 1, size=6)
        trusted = np.arange(6)

        def loss():
            model.forward(x)
            return wce_value_grad(model.last_logits, y, w, trusted)[0]

        wce_loss(model, x, y, w, trusted)
        grads = dict(model.named_grads())
        for name, p in model.named_params():
            assert_grad_close(grads[name], numerical_grad(loss, p))

    def test_backward_before_forward_raises(self):
        model = Model(ModelConfig(in_dim=4, k=2), seed=0)
        with pytest.raises(RuntimeError):
            model.backward(np.zeros((1, 2)))


class TestForwardContracts:
    def test_zero_classifier_gives_uniform_probs(self, small_model, rng):
        for name, p in small_model.l.named_params("l"):
            p[...] = 0.0
        probs = small_model.forward(rng.uniform(0, 1, size=(4, 16)))[2]
        assert np.allclose(probs, 1.0 / 3.0)

    def test_sphere_rows_unit_norm(self, small_model, rng):
        sphere = small_model.forward(rng.uniform(0, 1, size=(10, 16)))[1]
        assert np.abs(np.linalg.norm(sphere, axis=1) - 1.0).max() < 1e-9

    def test_features_nonnegative(self, small_model, rng):
        feats = small_model.forward(rng.uniform(0, 1, size=(10, 16)))[0]
        assert (feats >= 0).all()

    def test_duplicate_rows_identical_outputs(self, small_model, rng):
        row = rng.uniform(0, 1, size=16)
        f, s, p = small_model.forward(np.stack([row, row, row]))
        for out in (f, s, p):
            assert (out[0] == out[1]).all() and (out[1] == out[2]).all()

    def test_probs_sum_to_one(self, small_model, rng):
        probs = small_model.forward(rng.uniform(0, 1, size=(10, 16)))[2]
        assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-9

    def test_sphere_dot_products_bounded(self, small_model, rng):
        sphere = small_model.forward(rng.uniform(0, 1, size=(12, 16)))[1]
        dots = sphere @ sphere.T
        assert dots.max() <= 1.0 + 1e-9 and dots.min() >= -1.0 - 1e-9

    def test_shape_mismatch_rejected(self, small_model):
        with pytest.raises(ValueError):
            small_model.forward(np.zeros((3, 7)))

    def test_nonfinite_input_rejected(self, small_model):
        x = np.zeros((2, 16))
        x[0, 0] = np.nan
        with pytest.raises(ValueError):
            small_model.forward(x)


class TestWce:
    def test_unit_weights_reduce_to_plain_ce(self, small_model, rng):
        x = rng.uniform(0, 1, size=(9, 16))
        y = rng.integers(0, 3, size=9)
        loss = wce_loss(small_model, x, y, np.ones(9), np.arange(9))
        assert loss == pytest.approx(ce_per_sample(small_model, x, y).sum(), rel=1e-12)

    def test_negative_weight_correct_prediction_unlearns(self, small_model, rng):
        x = rng.uniform(0, 1, size=(1, 16))
        small_model.forward(x)
        y = np.array([int(small_model.last_logits.argmax())])  # predicted == label
        ce = ce_per_sample(small_model, x, y)[0]
        loss, _ = wce_value_grad(small_model.last_logits, y, np.array([-0.5]), [0])
        assert loss == pytest.approx(-0.5 * ce, rel=1e-12)

    def test_negative_weight_misclassified_contributes_zero(self, small_model, rng):
        x = rng.uniform(0, 1, size=(1, 16))
        small_model.forward(x)
        pred = int(small_model.last_logits.argmax())
        y = np.array([(pred + 1) % 3])  # force argmax != y
        loss, dlogits = wce_value_grad(small_model.last_logits, y, np.array([-0.5]), [0])
        assert loss == 0.0
        assert (dlogits == 0.0).all()

    def test_untrusted_rows_contribute_nothing(self, small_model, rng):
        x = rng.uniform(0, 1, size=(6, 16))
        y = rng.integers(0, 3, size=6)
        w = np.ones(6)
        small_model.forward(x)
        loss_all, d_all = wce_value_grad(small_model.last_logits, y, w, np.arange(6))
        loss_half, d_half = wce_value_grad(small_model.last_logits, y, w, np.array([0, 1, 2]))
        assert (d_half[3:] == 0.0).all()
        assert loss_half < loss_all

    def test_gated_sample_has_no_gradient_effect(self, rng):
        # acceptance-style: removing a gated sample changes no parameter grad
        model_a = Model(ModelConfig(in_dim=6, k=3, d1=5, d2=4, f_hidden=6, s_hidden=5), seed=8)
        model_b = Model(ModelConfig(in_dim=6, k=3, d1=5, d2=4, f_hidden=6, s_hidden=5), seed=8)
        x = rng.uniform(0, 1, size=(5, 6))
        y = rng.integers(0, 3, size=5)
        model_a.forward(x)
        pred = model_a.last_logits.argmax(axis=1)
        y[4] = (pred[4] + 1) % 3  # sample 4: misclassified
        w = np.ones(5)
        w[4] = -0.7  # and negatively weighted -> gated off
        wce_loss(model_a, x, y, w, np.arange(5))
        wce_loss(model_b, x[:4], y[:4], w[:4], np.arange(4))
        for (na, ga), (nb, gb) in zip(model_a.named_grads(), model_b.named_grads()):
            assert na == nb and np.array_equal(ga, gb)

    def test_empty_trusted_gives_zero_loss_and_grads(self, small_model, rng):
        x = rng.uniform(0, 1, size=(4, 16))
        y = rng.integers(0, 3, size=4)
        loss = wce_loss(small_model, x, y, np.ones(4), np.array([], dtype=int))
        assert loss == 0.0
        assert all((g == 0).all() for _, g in small_model.named_grads())

    def test_loss_scaling_scales_gradients(self, small_model, rng):
        x = rng.uniform(0, 1, size=(5, 16))
        y = rng.integers(0, 3, size=5)
        wce_loss(small_model, x, y, np.ones(5), np.arange(5))
        g1 = {n: g.copy() for n, g in small_model.named_grads()}
        wce_loss(small_model, x, y, np.full(5, 2.0), np.arange(5))
        for n, g in small_model.named_grads():
            assert np.array_equal(g, 2.0 * g1[n])

    def test_unused_input_column_gets_zero_gradient(self, rng):
        model = Model(ModelConfig(in_dim=4, k=2, d1=3, d2=3, f_hidden=4, s_hidden=4), seed=1)
        x = rng.uniform(0, 1, size=(6, 4))
        x[:, 2] = 0.0  # the loss cannot depend on first-layer weights of column 2
        ce_loss(model, x, rng.integers(0, 2, size=6))
        assert (dict(model.named_grads())["f.0.W"][2] == 0.0).all()


class TestOptimizer:
    def test_zero_gradients_leave_params_unchanged(self, small_model, rng):
        opt = Adam(small_model)
        small_model.forward(rng.uniform(0, 1, size=(3, 16)))
        small_model.backward(np.zeros((3, 3)))
        before = small_model.get_params()
        opt.step(small_model)
        after = small_model.get_params()
        assert all(np.array_equal(before[n], after[n]) for n in before)

    def test_nan_gradient_aborts(self, small_model, rng):
        opt = Adam(small_model)
        small_model.forward(rng.uniform(0, 1, size=(2, 16)))
        d = np.zeros((2, 3))
        d[0, 0] = np.nan
        small_model.backward(d)
        with pytest.raises(FloatingPointError):
            opt.step(small_model)

    def test_step_counter_increments(self, small_model, rng):
        opt = Adam(small_model)
        ce_loss(small_model, rng.uniform(0, 1, size=(4, 16)), rng.integers(0, 3, size=4))
        opt.step(small_model)
        assert opt.t == 1

    def test_schedule_endpoints(self):
        assert cosine_lr(0, 55, 0.01, 0.0001) == pytest.approx(0.01)
        assert cosine_lr(54, 55, 0.01, 0.0001) == pytest.approx(0.0001)

    def test_schedule_midpoint_formula(self):
        total, lr0, lr1 = 11, 0.01, 0.0001
        mid = (total - 1) // 2
        expect = lr1 + (lr0 - lr1) * (1 + np.cos(np.pi / 2)) / 2
        assert cosine_lr(mid, total, lr0, lr1) == pytest.approx(expect)

    def test_schedule_monotone_nonincreasing(self):
        lrs = [cosine_lr(e, 30, 0.01, 0.0001) for e in range(30)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


class TestDeterminism:
    def test_same_seed_bitwise_identical_training(self, rng):
        x = rng.uniform(0, 1, size=(32, 16))
        y = rng.integers(0, 3, size=32)

        def run():
            model = Model(ModelConfig(in_dim=16, k=3, d1=8, d2=6, f_hidden=12, s_hidden=8), seed=21)
            opt = Adam(model, total_epochs=5)
            for e in range(5):
                opt.set_epoch(e)
                order = stream(21, "order", e).permutation(32)
                ce_loss(model, x[order], y[order])
                opt.step(model)
            return model.get_params()

        a, b = run(), run()
        assert all(np.array_equal(a[n], b[n]) for n in a)
