"""Comparison calibrators applied to a trained global model's logits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .nn import softmax
from .scalers import T_MAX, T_MIN, TemperatureScaler, calibrate, temp_apply, temp_fit

RIDGE = 1e-6


@dataclass
class LinearTempModel:
    """Per-sample temperature ``W . logits + b``."""

    weight: np.ndarray
    bias: float

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = float(self.bias)
        if not (np.isfinite(self.weight).all() and np.isfinite(self.bias)):
            raise UsageError("linear temperature model must be finite")


def ens_apply(local_scalers: list, logits) -> np.ndarray:
    """Average of the probabilities produced by each client's scaler.

    ``logits`` is either one array shared by every scaler or a list holding
    one array per scaler (each client's own model outputs).
    """
    if not local_scalers:
        raise UsageError("ensemble needs at least one scaler")
    if isinstance(logits, (list, tuple)):
        if len(logits) != len(local_scalers):
            raise UsageError("need one logits array per scaler")
        views = [np.asarray(x, dtype=np.float64) for x in logits]
    else:
        views = [np.asarray(logits, dtype=np.float64)] * len(local_scalers)
    total = np.zeros(views[0].shape, dtype=np.float64)
    for s, x in zip(local_scalers, views):
        total += calibrate(s, x)
    return total / len(local_scalers)


def avgt_apply(temps, logits: np.ndarray, mode: str = "mean") -> np.ndarray:
    """Softmax at the averaged client temperature.

    ``mode="sum"`` divides by the plain sum of temperatures instead.
    """
    temps = np.asarray(temps, dtype=np.float64)
    if temps.size == 0 or (temps <= 0).any():
        raise UsageError("temperatures must be positive and nonempty")
    if mode == "mean":
        t = temps.mean()
    elif mode == "sum":
        t = temps.sum()
    else:
        raise UsageError(f"unknown mode {mode!r}")
    return temp_apply(TemperatureScaler(float(t)), logits)


def val_ts_fit(logits: np.ndarray, labels) -> TemperatureScaler:
    """Temperature scaling on a pooled global validation set."""
    return temp_fit(logits, labels)


def lrts_fit_client(logits: np.ndarray, labels) -> LinearTempModel:
    """Regress the client's fitted temperature on its logits.

    Least squares with ridge damping on the weights only; since the target is
    the constant T_c the solution is W = 0, b = T_c.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if len(logits) == 0:
        raise UsageError("LR-TS needs client validation data")
    t_c = temp_fit(logits, labels).temperature
    n, k = logits.shape
    x = np.hstack([logits, np.ones((n, 1))])
    target = np.full(n, t_c)
    gram = x.T @ x
    gram[np.arange(k), np.arange(k)] += RIDGE
    theta = np.linalg.solve(gram, x.T @ target)
    return LinearTempModel(theta[:k], theta[k])


def lrts_average(models: list[LinearTempModel]) -> LinearTempModel:
    if not models:
        raise UsageError("nothing to average")
    return LinearTempModel(
        np.mean([m.weight for m in models], axis=0),
        float(np.mean([m.bias for m in models])),
    )


def lrts_temperatures(model: LinearTempModel, logits: np.ndarray) -> np.ndarray:
    t = np.asarray(logits, dtype=np.float64) @ model.weight + model.bias
    return np.clip(t, T_MIN, T_MAX)


def lrts_apply(model: LinearTempModel, logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    return softmax(logits / lrts_temperatures(model, logits)[:, None])
