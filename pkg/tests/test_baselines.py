import math

import numpy as np
import pytest

from fedcal.baselines import (
    LinearTempModel,
    avgt_apply,
    ens_apply,
    lrts_apply,
    lrts_average,
    lrts_fit_client,
    lrts_temperatures,
    val_ts_fit,
)
from fedcal.errors import UsageError
from fedcal.nn import softmax
from fedcal.scalers import TemperatureScaler, temp_apply, temp_fit


def test_ens_two_temperatures():
    logits = np.array([[4.0, 0.0]])
    p = ens_apply([TemperatureScaler(1.0), TemperatureScaler(20.0)], logits)
    s1 = 1 / (1 + math.exp(-4.0))
    s20 = 1 / (1 + math.exp(-0.2))
    np.testing.assert_allclose(p[0], [(s1 + s20) / 2, 1 - (s1 + s20) / 2], atol=1e-15)


def test_ens_identical_scalers_equals_single():
    x = np.random.default_rng(0).normal(size=(10, 3))
    one = temp_apply(TemperatureScaler(1.7), x)
    np.testing.assert_allclose(ens_apply([TemperatureScaler(1.7)] * 3, x), one, atol=1e-15)


def test_ens_keeps_argmax_on_shared_logits():
    # every member ranks classes the same way, so their average does too
    rng = np.random.default_rng(5)
    x = rng.normal(size=(300, 6))
    temps = [TemperatureScaler(t) for t in (0.05, 0.7, 3.0, 20.0)]
    assert np.array_equal(ens_apply(temps, x).argmax(1), x.argmax(1))


def test_ens_can_change_argmax():
    # per-client logits: the mean-logit prediction says class 0, the ensemble class 1
    a = np.array([[3.0, 0.0]])
    b = np.array([[0.0, 1.0]])
    p = ens_apply([TemperatureScaler(20.0), TemperatureScaler(0.05)], [a, b])
    assert ((a + b) / 2).argmax() == 0
    assert p.argmax() == 1
    with pytest.raises(UsageError):
        ens_apply([TemperatureScaler(1.0)], [a, b])


def test_avgt_mean_of_temperatures():
    x = np.random.default_rng(1).normal(size=(6, 4))
    np.testing.assert_allclose(avgt_apply([1.0, 3.0], x), temp_apply(TemperatureScaler(2.0), x), atol=1e-15)
    np.testing.assert_allclose(avgt_apply([1.0, 3.0], x, mode="sum"), temp_apply(TemperatureScaler(4.0), x), atol=1e-15)
    with pytest.raises(UsageError):
        avgt_apply([], x)
    with pytest.raises(UsageError):
        avgt_apply([1.0], x, mode="median")


def test_val_ts_is_temp_fit():
    rng = np.random.default_rng(2)
    x = rng.normal(scale=3, size=(200, 3))
    y = rng.integers(0, 3, size=200)
    assert val_ts_fit(x, y).temperature == temp_fit(x, y).temperature


def test_lrts_recovers_client_temperature():
    rng = np.random.default_rng(3)
    x = rng.normal(scale=3, size=(150, 4))
    y = rng.integers(0, 4, size=150)
    model = lrts_fit_client(x, y)
    t_c = temp_fit(x, y).temperature
    assert np.abs(lrts_temperatures(model, x) - t_c).max() < 1e-6
    np.testing.assert_allclose(lrts_apply(model, x), temp_apply(TemperatureScaler(t_c), x), atol=1e-6)


def test_lrts_average_and_clamp():
    a = LinearTempModel(np.array([1.0, 0.0]), 0.0)
    b = LinearTempModel(np.array([-1.0, 2.0]), 4.0)
    avg = lrts_average([a, b])
    assert avg.weight.tolist() == [0.0, 1.0] and avg.bias == 2.0
    x = np.array([[0.0, -100.0], [0.0, 100.0], [0.0, 1.0]])
    assert lrts_temperatures(avg, x).tolist() == [0.05, 20.0, 3.0]
    with pytest.raises(UsageError):
        lrts_average([])
    with pytest.raises(UsageError):
        LinearTempModel(np.array([np.nan]), 0.0)


def test_identical_temperatures_agree_across_baselines():
    x = np.random.default_rng(4).normal(size=(20, 5))
    t = 2.5
    ref = temp_apply(TemperatureScaler(t), x)
    np.testing.assert_allclose(ens_apply([TemperatureScaler(t)] * 4, x), ref, atol=1e-14)
    np.testing.assert_allclose(avgt_apply([t] * 4, x), ref, atol=1e-14)
    np.testing.assert_allclose(lrts_apply(LinearTempModel(np.zeros(5), t), x), ref, atol=1e-14)
    assert np.array_equal(softmax(x).argmax(1), ref.argmax(1))
