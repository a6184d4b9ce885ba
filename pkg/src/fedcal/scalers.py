"""Post-hoc scalers: temperature scaling and the order-preserving MLP scaler."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, UsageError
from .nn import (
    MLPModel,
    backward,
    forward_cached,
    init_mlp,
    log_softmax,
    nll_loss_and_grad,
    sigmoid,
    softmax,
    softplus,
)

T_MIN = 0.05
T_MAX = 20.0
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
FULL_BATCH_LIMIT = 256


@dataclass
class TemperatureScaler:
    temperature: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise UsageError("temperature must be positive")


@dataclass
class OPScaler:
    """Order-preserving scaler; ``backbone`` maps K logits to K raw activations.

    With ``sorted_input`` the backbone sees the logits in descending order
    rather than in class order, which makes the map class-agnostic.
    """

    backbone: MLPModel
    num_classes: int
    sorted_input: bool = False

    def __post_init__(self):
        sizes = self.backbone.layer_sizes
        if sizes[0] != self.num_classes or sizes[-1] != self.num_classes:
            raise DimensionError(f"backbone {sizes} must map {self.num_classes} -> {self.num_classes}")

    def copy(self) -> "OPScaler":
        return OPScaler(self.backbone.copy(), self.num_classes, self.sorted_input)


# softplus(IDENTITY_BIAS) == 1, so a zero output layer leaves every gap unchanged
IDENTITY_BIAS = math.log(math.expm1(1.0))


def new_op_scaler(
    num_classes: int,
    hidden_width: int,
    rng: np.random.Generator,
    depth: int = 2,
    output_scale: float = 0.01,
    sorted_input: bool = False,
) -> OPScaler:
    """Fresh scaler that starts close to the identity map.

    Hidden layers get the usual Glorot init; the output layer is shrunk by
    ``output_scale`` and biased so each gap multiplier starts at ~1.
    """
    sizes = (num_classes,) + (hidden_width,) * depth + (num_classes,)
    backbone = init_mlp(sizes, rng, "relu")
    backbone.weights[-1] *= output_scale
    backbone.biases[-1][:] = IDENTITY_BIAS
    return OPScaler(backbone, num_classes, sorted_input)


# temperature scaling

def temp_apply(scaler: TemperatureScaler, logits: np.ndarray) -> np.ndarray:
    return softmax(np.asarray(logits, dtype=np.float64) / scaler.temperature)


def temperature_nll(logits: np.ndarray, labels, temperature: float) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    logp = log_softmax(logits / temperature)
    return float(-logp[np.arange(len(logp)), np.asarray(labels)].mean())


def temp_fit(logits: np.ndarray, labels, tol: float = 1e-5) -> TemperatureScaler:
    """Golden-section search for the NLL-minimising temperature in [0.05, 20].

    The search runs on log T. Because NLL is convex in 1/T the objective is
    unimodal there; T=1 is kept as a fallback so the result is never worse.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if len(logits) == 0:
        raise UsageError("temperature fit needs at least one sample")

    def f(log_t):
        return temperature_nll(logits, labels, math.exp(log_t))

    lo, hi = math.log(T_MIN), math.log(T_MAX)
    a = hi - GOLDEN * (hi - lo)
    b = lo + GOLDEN * (hi - lo)
    fa, fb = f(a), f(b)
    while hi - lo > tol:
        if fa <= fb:
            hi, b, fb = b, a, fa
            a = hi - GOLDEN * (hi - lo)
            fa = f(a)
        else:
            lo, a, fa = a, b, fb
            b = lo + GOLDEN * (hi - lo)
            fb = f(b)
    best_t = math.exp(0.5 * (lo + hi))
    candidates = [(f(math.log(best_t)), best_t), (f(0.0), 1.0), (f(math.log(T_MIN)), T_MIN), (f(math.log(T_MAX)), T_MAX)]
    _, t = min(candidates, key=lambda c: c[0])
    return TemperatureScaler(float(min(max(t, T_MIN), T_MAX)))


# order-preserving scaler

@dataclass
class _OPForward:
    order: np.ndarray      # per-row descending stable sort permutation
    gaps: np.ndarray       # y_i - y_{i+1}, shape (N, K-1)
    activations: np.ndarray
    cache: object
    logits: np.ndarray     # scaled logits z


def sort_descending(logits: np.ndarray) -> np.ndarray:
    """Per-row descending order; equal values keep the lower index first."""
    return np.argsort(-logits, axis=1, kind="stable")


def _op_forward(scaler: OPScaler, logits: np.ndarray) -> _OPForward:
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != scaler.num_classes:
        raise DimensionError(f"logits shape {x.shape} does not match K={scaler.num_classes}")
    order = sort_descending(x)
    y = np.take_along_axis(x, order, axis=1)
    gaps = y[:, :-1] - y[:, 1:]
    a, cache = forward_cached(scaler.backbone, y if scaler.sorted_input else x)
    w = np.empty_like(x)
    w[:, :-1] = softplus(a[:, :-1]) * gaps
    w[:, -1] = a[:, -1]
    z_sorted = np.cumsum(w[:, ::-1], axis=1)[:, ::-1]
    z = np.empty_like(x)
    np.put_along_axis(z, order, z_sorted, axis=1)
    return _OPForward(order, gaps, a, cache, z)


def op_scaler_logits(scaler: OPScaler, logits: np.ndarray) -> np.ndarray:
    """Rescaled logits z = S^-1 U w(x); their ranking and ties match ``logits``."""
    return _op_forward(scaler, logits).logits


def op_scaler_apply(scaler: OPScaler, logits: np.ndarray) -> np.ndarray:
    return softmax(op_scaler_logits(scaler, logits))


def op_scaler_loss_and_grad(scaler: OPScaler, logits: np.ndarray, labels):
    """Mean NLL of the scaled predictions and its gradient for the backbone.

    The sort permutation and tie pattern are held fixed for differentiation.
    Returns (loss, weight_grads, bias_grads).
    """
    fw = _op_forward(scaler, logits)
    loss, dz = nll_loss_and_grad(fw.logits, labels)
    dz_sorted = np.take_along_axis(dz, fw.order, axis=1)
    # z_sorted = U w, so dL/dw = U^T dL/dz_sorted (a running prefix sum)
    dw = np.cumsum(dz_sorted, axis=1)
    da = np.empty_like(dw)
    da[:, :-1] = dw[:, :-1] * sigmoid(fw.activations[:, :-1]) * fw.gaps
    da[:, -1] = dw[:, -1]
    gw, gb = backward(scaler.backbone, fw.cache, da)
    return loss, gw, gb


def op_scaler_nll(scaler: OPScaler, logits: np.ndarray, labels) -> float:
    z = op_scaler_logits(scaler, logits)
    logp = log_softmax(z)
    return float(-logp[np.arange(len(logp)), np.asarray(labels)].mean())


def op_scaler_fit(
    scaler: OPScaler,
    logits: np.ndarray,
    labels,
    epochs: int = 50,
    lr: float = 0.01,
    rng: np.random.Generator | None = None,
) -> OPScaler:
    """SGD on mean NLL of the scaled outputs; full batch below 256 samples."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0 or len(logits) != n:
        raise UsageError("scaler fit needs matching, nonempty logits and labels")
    scaler = scaler.copy()
    if rng is None:
        rng = np.random.default_rng(0)
    model = scaler.backbone
    for _ in range(epochs):
        if n < FULL_BATCH_LIMIT:
            batches = [np.arange(n)]
        else:
            order = rng.permutation(n)
            batches = [order[s:s + FULL_BATCH_LIMIT] for s in range(0, n, FULL_BATCH_LIMIT)]
        for idx in batches:
            _, gw, gb = op_scaler_loss_and_grad(scaler, logits[idx], labels[idx])
            for p, g in zip(model.weights, gw):
                p -= lr * g
            for p, g in zip(model.biases, gb):
                p -= lr * g
    if not all(np.isfinite(p).all() for p in model.parameters()):
        raise FloatingPointError("scaler training diverged")
    return scaler


def calibrate(scaler, logits: np.ndarray) -> np.ndarray:
    """Probabilities from any supported scaler (``None`` means plain softmax)."""
    if scaler is None:
        return softmax(logits)
    if isinstance(scaler, TemperatureScaler):
        return temp_apply(scaler, logits)
    if isinstance(scaler, OPScaler):
        return op_scaler_apply(scaler, logits)
    raise UsageError(f"unsupported scaler type {type(scaler).__name__}")
