import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rgcf.core import LengthMismatchError, param_vector
from rgcf.models import (
    AdamState,
    Architecture,
    LabeledBatch,
    ServerModel,
    ShapeMismatchError,
    adam_init,
    adam_step,
    apply_update,
    backward,
    finite_diff_gradient,
    forward_loss,
    init_params,
    logistic,
    mlp,
    mlp_forward,
    unflatten,
)
from tests.conftest import rng


class TestArchitecture:
    def test_param_counts(self):
        assert logistic(20, 5).param_count == 20 * 5 + 5
        assert mlp(20, (32,), 5).param_count == 20 * 32 + 32 + 32 * 5 + 5
        assert mlp(4, (3, 2), 2).param_count == (4 * 3 + 3) + (3 * 2 + 2) + (2 * 2 + 2)

    def test_layer_sizes(self):
        assert mlp(4, (3, 2), 2).layer_sizes == (4, 3, 2, 2)
        assert logistic(4, 2).layer_sizes == (4, 2)


def test_init_params_bounds_and_zero_biases():
    arch = mlp(10, (8,), 3)
    p = init_params(arch, rng(0))
    layers = unflatten(p, arch.layer_sizes)
    for (w, b), fan_in in zip(layers, arch.layer_sizes):
        assert np.all(np.abs(w) <= 1.0 / np.sqrt(fan_in))
        assert np.all(b == 0.0)


def test_unflatten_canonical_order():
    # Layer by layer: weight matrix (fan_in, fan_out) row-major, then bias.
    sizes = (2, 3, 1)
    flat = param_vector(np.arange(13, dtype=float))
    (w1, b1), (w2, b2) = unflatten(flat, sizes)
    assert np.array_equal(w1, [[0, 1, 2], [3, 4, 5]])
    assert np.array_equal(b1, [6, 7, 8])
    assert np.array_equal(w2, [[9], [10], [11]])
    assert np.array_equal(b2, [12])


def test_unflatten_rejects_wrong_length():
    with pytest.raises(ShapeMismatchError):
        unflatten(np.zeros(5), (2, 3))


class TestForwardLoss:
    def test_uniform_logits_give_log_classes(self):
        arch = logistic(4, 3)
        model = ServerModel(arch, param_vector(np.zeros(arch.param_count)))
        batch = LabeledBatch(inputs=rng(1).random((6, 4)), labels=np.array([0, 1, 2, 0, 1, 2]))
        assert forward_loss(model, batch) == pytest.approx(np.log(3.0), abs=1e-12)

    def test_hand_computed_binary_example(self):
        # in_dim=1, 2 classes: logits = [w0 x, w1 x] + [b0, b1]
        arch = logistic(1, 2)
        params = param_vector([2.0, -1.0, 0.5, 0.0])  # W=[[2,-1]], b=[0.5,0]
        model = ServerModel(arch, params)
        x, y = 1.5, 0
        logits = np.array([2.0 * x + 0.5, -1.0 * x])
        expected = -np.log(np.exp(logits[y]) / np.exp(logits).sum())
        batch = LabeledBatch(inputs=np.array([[x]]), labels=np.array([y]))
        assert forward_loss(model, batch) == pytest.approx(expected, rel=1e-12)

    def test_large_logits_stay_finite(self):
        arch = logistic(1, 2)
        model = ServerModel(arch, param_vector([500.0, -500.0, 0.0, 0.0]))
        batch = LabeledBatch(inputs=np.array([[2.0]]), labels=np.array([1]))
        assert np.isfinite(forward_loss(model, batch))

    def test_dim_mismatch(self):
        model = ServerModel(logistic(3, 2), param_vector(np.zeros(8)))
        with pytest.raises(ShapeMismatchError):
            forward_loss(model, LabeledBatch(inputs=np.zeros((2, 4)), labels=np.zeros(2, dtype=int)))


class TestBackward:
    @pytest.mark.parametrize(
        "arch", [logistic(5, 3), mlp(5, (4,), 3), mlp(3, (4, 3), 2)], ids=str
    )
    def test_matches_finite_differences(self, arch):
        r = rng(2)
        for _ in range(5):
            model = ServerModel(arch, init_params(arch, r))
            batch = LabeledBatch(
                inputs=r.random((7, arch.in_dim)),
                labels=r.integers(0, arch.classes, size=7),
            )
            report = backward(model, batch)
            fd = finite_diff_gradient(model, batch)
            denom = max(1.0, float(np.abs(fd).max()))
            assert np.abs(report.gradient - fd).max() / denom < 1e-6
            assert report.loss == pytest.approx(forward_loss(model, batch), rel=1e-12)

    def test_gradient_is_frozen(self, blobs):
        arch = logistic(blobs.in_dim, blobs.classes)
        model = ServerModel(arch, init_params(arch, rng(3)))
        batch = LabeledBatch(inputs=blobs.inputs[:8], labels=blobs.labels[:8])
        assert not backward(model, batch).gradient.flags.writeable


def test_mlp_forward_relu():
    # 1 -> 1 -> 1 with W=1, b per layer: hidden = relu(x + b1)
    sizes = (1, 1, 1)
    params = param_vector([1.0, -2.0, 1.0, 0.0])  # W1=1 b1=-2 W2=1 b2=0
    out, acts = mlp_forward(params, sizes, np.array([[1.0], [5.0]]))
    assert np.array_equal(out, [[0.0], [3.0]])
    assert np.array_equal(acts[1], [[0.0], [3.0]])


class TestApplyUpdate:
    def test_accept_applies_sgd(self):
        w = param_vector([1.0, 2.0])
        g = param_vector([0.5, -0.5])
        assert np.array_equal(apply_update(w, g, 0.1, 0), [0.95, 2.05])

    def test_reject_is_bit_identical(self):
        w = param_vector([1.0, np.pi, 1e-300])
        out = apply_update(w, param_vector([1e9, -1e9, 5.0]), 0.7, 1)
        assert out is w

    def test_validation(self):
        w = param_vector([1.0])
        with pytest.raises(LengthMismatchError):
            apply_update(w, param_vector([1.0, 2.0]), 0.1, 0)
        with pytest.raises(ValueError):
            apply_update(w, w, 0.0, 0)
        with pytest.raises(ValueError):
            apply_update(w, w, 0.1, 2)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_mask_property(self, seed):
        r = rng(seed, 77)
        w = param_vector(r.standard_normal(4))
        g = param_vector(r.standard_normal(4))
        alpha = float(r.uniform(1e-6, 10.0))
        assert apply_update(w, g, alpha, 1) is w
        assert np.array_equal(apply_update(w, g, alpha, 0), w - alpha * g)


class TestAdam:
    def test_first_step_hand_recurrence(self):
        s = adam_init(2, lr=0.1)
        p = param_vector([1.0, -1.0])
        g = param_vector([0.5, 0.2])
        s1, p1 = adam_step(s, p, g)
        # t=1: mhat = g, vhat = g^2, step = lr * g / (|g| + eps)
        expected = p - 0.1 * g / (np.abs(g) + 1e-8)
        assert np.allclose(p1, expected, atol=1e-12)
        assert s1.t == 1

    def test_two_steps_match_reference(self):
        # independent reimplementation of the bias-corrected recurrence
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        p = np.array([0.3, -0.7, 2.0])
        grads = [np.array([1.0, -2.0, 0.5]), np.array([-0.5, 0.25, 3.0])]
        m = np.zeros(3)
        v = np.zeros(3)
        ref = p.copy()
        for t, g in enumerate(grads, 1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            ref -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        state = adam_init(3, lr=lr)
        cur = param_vector(p)
        for g in grads:
            state, cur = adam_step(state, cur, param_vector(g))
        assert np.allclose(cur, ref, atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(LengthMismatchError):
            adam_step(adam_init(2), param_vector([1.0, 2.0]), param_vector([1.0]))

    def test_state_is_immutable_record(self):
        s = AdamState(m=np.zeros(1), v=np.zeros(1))
        with pytest.raises(AttributeError):
            s.t = 3


def test_server_model_validates_length():
    with pytest.raises(ShapeMismatchError):
        ServerModel(logistic(3, 2), param_vector(np.zeros(7)))
