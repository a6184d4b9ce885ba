import itertools

import numpy as np
import pytest

from fedcal.errors import DimensionError, UsageError
from fedcal.matching import (
    PermutationSet,
    alignment_objective,
    apply_permutation,
    identity_perms,
    interpolate,
    solve_lap,
    weight_matching,
)
from fedcal.nn import forward, init_mlp, nll_loss_and_grad


def brute_lap(score):
    n = len(score)
    best, best_p = -np.inf, None
    for p in itertools.permutations(range(n)):   # lexicographic order
        v = sum(score[i][p[i]] for i in range(n))
        if v > best + 1e-12:
            best, best_p = v, p
    return best, best_p


def _random_model(rng, sizes):
    m = init_mlp(sizes, rng)
    m.biases = [rng.normal(scale=0.1, size=b.shape) for b in m.biases]
    return m


def _random_perms(rng, model):
    return PermutationSet([rng.permutation(w) for w in model.layer_sizes[1:-1]])


def test_lap_small_fixture():
    assert solve_lap([[1.0, 2.0], [3.0, 1.0]]).tolist() == [1, 0]
    assert solve_lap(np.zeros((0, 0))).tolist() == []


def test_lap_matches_brute_force():
    rng = np.random.default_rng(0)
    for trial in range(150):
        n = int(rng.integers(1, 7))
        s = rng.normal(size=(n, n)) if trial % 2 else rng.integers(0, 3, size=(n, n)).astype(float)
        best, best_p = brute_lap(s)
        p = solve_lap(s)
        assert abs(s[np.arange(n), p].sum() - best) < 1e-9
        if trial % 2 == 0:
            # integer ties: lexicographically smallest optimum
            assert tuple(p) == best_p


def test_lap_all_equal_gives_identity():
    assert solve_lap(np.ones((5, 5))).tolist() == list(range(5))


def test_lap_rejects_non_square():
    with pytest.raises(DimensionError):
        solve_lap(np.zeros((2, 3)))


def test_lap_64_is_permutation():
    s = np.random.default_rng(1).normal(size=(64, 64))
    p = solve_lap(s)
    assert sorted(p.tolist()) == list(range(64))


def test_permutation_preserves_function():
    rng = np.random.default_rng(2)
    for _ in range(20):
        k = int(rng.integers(2, 8))
        model = _random_model(rng, (k, 16, 12, k))
        x = rng.normal(size=(100, k))
        permuted = apply_permutation(model, _random_perms(rng, model))
        assert np.abs(forward(model, x) - forward(permuted, x)).max() < 1e-9


def test_inverse_round_trip():
    rng = np.random.default_rng(3)
    model = _random_model(rng, (4, 8, 8, 4))
    perms = _random_perms(rng, model)
    back = apply_permutation(apply_permutation(model, perms), perms.inverse())
    assert np.array_equal(back.flat(), model.flat())


def test_apply_rejects_non_permutation():
    model = _random_model(np.random.default_rng(0), (3, 4, 3))
    with pytest.raises(UsageError):
        apply_permutation(model, PermutationSet([np.array([0, 0, 1, 2])]))
    with pytest.raises(UsageError):
        apply_permutation(model, PermutationSet([]))


def test_planted_permutation_recovered():
    rng = np.random.default_rng(4)
    for _ in range(5):
        k = 10
        ref = _random_model(rng, (k, 64, 64, k))
        hidden = _random_perms(rng, ref)
        cand = apply_permutation(ref, hidden)
        perms = weight_matching(ref, cand, seed=int(rng.integers(1 << 30)))
        self_dot = float(ref.flat() @ ref.flat())
        assert abs(alignment_objective(ref, cand, perms) - self_dot) < 1e-9 * max(1.0, self_dot)
        assert np.array_equal(apply_permutation(cand, perms).flat(), ref.flat())


def test_matching_objective_never_decreases():
    rng = np.random.default_rng(5)
    a = _random_model(rng, (6, 32, 32, 6))
    b = _random_model(rng, (6, 32, 32, 6))
    hist = []
    perms = weight_matching(a, b, seed=1, history=hist)
    start = alignment_objective(a, b, identity_perms(b))
    assert all(y >= x - 1e-12 for x, y in zip([start] + hist, hist))
    assert alignment_objective(a, b, perms) >= start


def test_matching_identical_models_is_identity():
    model = _random_model(np.random.default_rng(6), (5, 16, 16, 5))
    assert weight_matching(model, model.copy()).is_identity()


def test_matching_rejects_mismatch():
    rng = np.random.default_rng(7)
    with pytest.raises(UsageError):
        weight_matching(_random_model(rng, (3, 4, 3)), _random_model(rng, (3, 5, 3)))


def test_interpolate_endpoints_and_midpoint():
    rng = np.random.default_rng(8)
    a = _random_model(rng, (3, 5, 3))
    b = _random_model(rng, (3, 5, 3))
    assert np.array_equal(interpolate(a, b, 1.0).flat(), a.flat())
    assert np.array_equal(interpolate(a, b, 0.0).flat(), b.flat())
    np.testing.assert_allclose(interpolate(a, b, 0.5).flat(), 0.5 * (a.flat() + b.flat()), atol=1e-15)
    with pytest.raises(UsageError):
        interpolate(a, b, 1.5)


def test_alignment_lowers_interpolation_barrier():
    # a permuted copy interpolates perfectly once aligned, but not before
    rng = np.random.default_rng(9)
    k = 4
    ref = _random_model(rng, (k, 32, 32, k))
    cand = apply_permutation(ref, _random_perms(rng, ref))
    x = rng.normal(size=(200, k))
    y = forward(ref, x).argmax(1)

    def loss(m):
        return nll_loss_and_grad(forward(m, x), y)[0]

    aligned = apply_permutation(cand, weight_matching(ref, cand))
    naive_mid = loss(interpolate(ref, cand, 0.5))
    aligned_mid = loss(interpolate(ref, aligned, 0.5))
    assert aligned_mid == pytest.approx(loss(ref), abs=1e-9)
    assert naive_mid > aligned_mid
