import math

import numpy as np
import pytest

from fedcal.data import Dataset
from fedcal.errors import DimensionError, UsageError
from fedcal.nn import (
    MLPModel,
    backward,
    forward,
    forward_cached,
    init_mlp,
    nll_loss_and_grad,
    sgd_train,
    softmax,
)


def naive_forward(model, batch):
    out = []
    last = model.num_layers - 1
    for row in batch:
        h = list(row)
        for l, (w, b) in enumerate(zip(model.weights, model.biases)):
            nxt = []
            for j in range(w.shape[0]):
                s = b[j]
                for i in range(w.shape[1]):
                    s += w[j, i] * h[i]
                if l != last:
                    s = max(s, 0.0) if model.hidden_activation == "relu" else math.log1p(math.exp(s))
                nxt.append(s)
            h = nxt
        out.append(h)
    return np.array(out)


def flat_loss(model, x, y):
    return nll_loss_and_grad(forward(model, x), y)[0]


def numeric_grads(model, x, y, h=1e-5):
    grads = []
    for p in model.parameters():
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + h
            up = flat_loss(model, x, y)
            p[idx] = old - h
            down = flat_loss(model, x, y)
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def test_zero_model_gives_zero_logits():
    model = MLPModel((3, 4, 2), [np.zeros((4, 3)), np.zeros((2, 4))], [np.zeros(4), np.zeros(2)])
    x = np.random.default_rng(0).normal(size=(5, 3))
    assert np.array_equal(forward(model, x), np.zeros((5, 2)))


def test_identity_single_layer():
    model = MLPModel((3, 3), [np.eye(3)], [np.zeros(3)])
    x = np.random.default_rng(1).normal(size=(4, 3))
    assert np.array_equal(forward(model, x), x)


@pytest.mark.parametrize("act", ["relu", "softplus"])
def test_forward_matches_naive_loop(act):
    rng = np.random.default_rng(2)
    model = init_mlp((2, 4, 3), rng, act)
    model.biases = [rng.normal(size=b.shape) for b in model.biases]
    x = rng.normal(size=(6, 2))
    np.testing.assert_allclose(forward(model, x), naive_forward(model, x), rtol=0, atol=1e-14)


def test_forward_shape_error():
    model = init_mlp((3, 2), np.random.default_rng(0))
    with pytest.raises(DimensionError):
        forward(model, np.zeros((2, 4)))


def test_forward_is_pure():
    rng = np.random.default_rng(3)
    model = init_mlp((3, 5, 2), rng)
    before = model.flat().copy()
    x = rng.normal(size=(4, 3))
    a = forward(model, x)
    b = forward(model, x)
    assert np.array_equal(a, b)
    assert np.array_equal(model.flat(), before)


def test_model_shape_invariants():
    with pytest.raises(DimensionError):
        MLPModel((3, 2), [np.zeros((3, 2))], [np.zeros(2)])
    with pytest.raises(DimensionError):
        MLPModel((3, 2), [np.zeros((2, 3))], [])


def test_softmax_cases():
    p = softmax(np.array([[0.0, 0.0, 0.0], [1000.0, 0.0, 0.0], [2.0, 0.0, 0.0]]))
    np.testing.assert_allclose(p[0], [1 / 3] * 3, atol=1e-15)
    assert p[1, 0] == pytest.approx(1.0) and p[1, 1] < 1e-300 + 1e-400
    e2 = math.exp(2)
    np.testing.assert_allclose(softmax(np.array([[2.0, 0.0]]))[0], [e2 / (e2 + 1), 1 / (e2 + 1)], atol=1e-15)


def test_softmax_rows_sum_to_one_on_wide_range():
    rng = np.random.default_rng(4)
    x = rng.uniform(-1e6, 1e6, size=(500, 7))
    p = softmax(x)
    assert np.isfinite(p).all()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_nll_edge_cases():
    logits = np.array([[50.0, 0.0, 0.0], [0.0, 50.0, 0.0]])
    loss, _ = nll_loss_and_grad(logits, [0, 1])
    assert loss < 1e-20
    loss, _ = nll_loss_and_grad(np.zeros((3, 4)), [0, 1, 3])
    assert loss == pytest.approx(math.log(4), abs=1e-15)
    with pytest.raises(UsageError):
        nll_loss_and_grad(np.zeros((2, 3)), [0, 3])


def test_nll_gradient_finite_differences():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(7, 5))
    labels = rng.integers(0, 5, size=7)
    _, grad = nll_loss_and_grad(logits, labels)
    h = 1e-5
    num = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        up, down = logits.copy(), logits.copy()
        up[idx] += h
        down[idx] -= h
        num[idx] = (nll_loss_and_grad(up, labels)[0] - nll_loss_and_grad(down, labels)[0]) / (2 * h)
    rel = np.abs(num - grad).max() / np.abs(grad).max()
    assert rel < 1e-4


def test_backprop_matches_finite_differences():
    rng = np.random.default_rng(6)
    k = 4
    for probe in range(3):
        model = init_mlp((k, 8, 8, k), rng)
        model.biases = [rng.normal(scale=0.1, size=b.shape) for b in model.biases]
        x = rng.normal(size=(5, k))
        y = rng.integers(0, k, size=5)
        logits, cache = forward_cached(model, x)
        _, dl = nll_loss_and_grad(logits, y)
        gw, gb = backward(model, cache, dl)
        analytic = [g for pair in zip(gw, gb) for g in pair]
        for a, n in zip(analytic, numeric_grads(model, x, y)):
            assert np.abs(a - n).max() <= 1e-4 * max(np.abs(n).max(), 1e-8)


def _tiny_data():
    rng = np.random.default_rng(7)
    return Dataset(rng.uniform(size=(20, 3)), rng.integers(0, 2, size=20), 2)


def test_sgd_zero_lr_is_noop():
    model = init_mlp((3, 4, 2), np.random.default_rng(8))
    out = sgd_train(model, _tiny_data(), 3, 0.0, 4, np.random.default_rng(0))
    assert np.array_equal(out.flat(), model.flat())
    assert out is not model


def test_sgd_single_step_matches_hand_update():
    # 1-layer model, one sample: dL/dz = softmax(z) - onehot, dW = outer(dz, x)
    w = np.array([[0.5, -0.25], [0.1, 0.2]])
    b = np.array([0.0, 0.3])
    model = MLPModel((2, 2), [w.copy()], [b.copy()])
    x = np.array([[1.0, 2.0]])
    z = x @ w.T + b
    p = np.exp(z) / np.exp(z).sum()
    dz = p - np.array([[0.0, 1.0]])
    lr = 0.1
    out = sgd_train(model, Dataset(x, [1], 2), 1, lr, 1, np.random.default_rng(0))
    np.testing.assert_allclose(out.weights[0], w - lr * dz.T @ x, atol=1e-15)
    np.testing.assert_allclose(out.biases[0], b - lr * dz[0], atol=1e-15)


def test_prox_with_zero_mu_is_bitwise_identical():
    model = init_mlp((3, 4, 2), np.random.default_rng(9))
    data = _tiny_data()
    plain = sgd_train(model, data, 2, 0.1, 6, np.random.default_rng(42))
    prox = sgd_train(model, data, 2, 0.1, 6, np.random.default_rng(42), prox=(0.0, model))
    assert np.array_equal(plain.flat(), prox.flat())


def test_prox_pulls_towards_anchor():
    model = init_mlp((3, 4, 2), np.random.default_rng(10))
    data = _tiny_data()
    plain = sgd_train(model, data, 5, 0.2, 4, np.random.default_rng(1))
    prox = sgd_train(model, data, 5, 0.2, 4, np.random.default_rng(1), prox=(1.0, model))
    assert np.linalg.norm(prox.flat() - model.flat()) < np.linalg.norm(plain.flat() - model.flat())


def test_sgd_deterministic_and_validates():
    model = init_mlp((3, 4, 2), np.random.default_rng(11))
    data = _tiny_data()
    a = sgd_train(model, data, 2, 0.1, 3, np.random.default_rng(5))
    b = sgd_train(model, data, 2, 0.1, 3, np.random.default_rng(5))
    assert np.array_equal(a.flat(), b.flat())
    with pytest.raises(UsageError):
        sgd_train(model, Dataset(np.zeros((0, 3)), np.zeros(0, dtype=int), 2), 1, 0.1, 2, np.random.default_rng(0))
