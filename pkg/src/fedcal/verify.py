"""Oracle checks for the numerical core.

Every check compares the library against an independent reference: brute-force
binning, factorial LAP enumeration, naive finite differences or a dense grid
search. ``run_all`` is what ``fedcal verify`` executes.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np

from .matching import PermutationSet, alignment_objective, apply_permutation, solve_lap, weight_matching
from .metrics import ece, topk_accuracy
from .nn import backward, forward, forward_cached, init_mlp, nll_loss_and_grad, softmax
from .scalers import (
    new_op_scaler,
    op_scaler_apply,
    op_scaler_loss_and_grad,
    op_scaler_nll,
    temp_fit,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(name, fn) -> CheckResult:
    start = time.perf_counter()
    passed, detail = fn()
    return CheckResult(name, bool(passed), detail, time.perf_counter() - start)


def _random_simplex(rng, n, k):
    z = rng.normal(scale=rng.uniform(0.1, 6.0), size=(n, k))
    p = np.exp(z - z.max(axis=1, keepdims=True))
    return p / p.sum(axis=1, keepdims=True)


def brute_force_ece(probs, labels, num_bins) -> float:
    """Loop-per-bin reference; bins are (lo, hi] with 0 folded into the first."""
    n = len(labels)
    total = 0.0
    for m in range(num_bins):
        lo, hi = m / num_bins, (m + 1) / num_bins
        conf_sum = acc_sum = count = 0
        for i in range(n):
            row = list(probs[i])
            c = max(row)
            if (lo < c <= hi) or (m == 0 and c <= lo):
                count += 1
                conf_sum += c
                acc_sum += row.index(c) == labels[i]
        if count:
            total += count / n * abs(conf_sum / count - acc_sum / count)
    return total


def check_ece_oracle(trials: int = 1000, seed: int = 0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in range(trials):
        n = int(rng.integers(1, 501))
        k = int(rng.integers(2, 21))
        m = (1, 10, 15)[t % 3]
        p = _random_simplex(rng, n, k)
        y = rng.integers(0, k, size=n)
        worst = max(worst, abs(ece(p, y, m).ece - brute_force_ece(p, y, m)))
    return worst <= 1e-12, f"{trials} prediction sets, max |diff| = {worst:.2e}"


def check_order_preservation(rows: int = 10000, seed: int = 0):
    rng = np.random.default_rng(seed)
    violations = 0
    for k in (3, 10, 100):
        scaler = new_op_scaler(k, 64, rng)
        for w in scaler.backbone.weights:
            w *= 3.0
        x = rng.normal(size=(rows, k))
        x[::5, 1] = x[::5, 0]
        x[::13] = np.round(x[::13])
        p = op_scaler_apply(scaler, x)
        ox = np.argsort(-x, axis=1, kind="stable")
        op = np.argsort(-p, axis=1, kind="stable")
        violations += int((ox != op).any(axis=1).sum())
        y = rng.integers(0, k, size=rows)
        if topk_accuracy(p, y, 3) != topk_accuracy(softmax(x), y, 3):
            violations += 1
    out = op_scaler_apply(new_op_scaler(4, 64, rng), np.array([[3.0, 4.0, 2.0, 2.0]]))[0]
    fixture = out[1] > out[0] > out[2] and out[2] == out[3]
    return violations == 0 and fixture, f"{violations} ranking violations, [3,4,2,2] fixture {'ok' if fixture else 'broken'}"


def brute_force_lap(score) -> float:
    n = len(score)
    return max(sum(score[i][p[i]] for i in range(n)) for p in itertools.permutations(range(n)))


def check_lap(trials: int = 200, seed: int = 0):
    rng = np.random.default_rng(seed)
    mismatches = 0
    for t in range(trials):
        n = int(rng.integers(1, 7))
        s = rng.normal(size=(n, n)) if t % 2 else rng.integers(0, 4, size=(n, n)).astype(float)
        p = solve_lap(s)
        if sorted(p.tolist()) != list(range(n)) or abs(s[np.arange(n), p].sum() - brute_force_lap(s)) > 1e-9:
            mismatches += 1
    return mismatches == 0, f"{trials} matrices, {mismatches} objective mismatches"


def _random_perms(rng, model):
    return PermutationSet([rng.permutation(w) for w in model.layer_sizes[1:-1]])


def check_permutation_symmetry(pairs: int = 20, seed: int = 0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(pairs):
        k = int(rng.integers(2, 11))
        model = init_mlp((k, 64, 64, k), rng)
        model.biases = [rng.normal(scale=0.1, size=b.shape) for b in model.biases]
        x = rng.normal(size=(100, k))
        permuted = apply_permutation(model, _random_perms(rng, model))
        worst = max(worst, float(np.abs(forward(model, x) - forward(permuted, x)).max()))
    return worst < 1e-9, f"{pairs} pairs, max |diff| = {worst:.2e}"


def check_planted_recovery(instances: int = 10, seed: int = 0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        ref = new_op_scaler(10, 64, rng).backbone
        ref.weights = [w + rng.normal(scale=0.1, size=w.shape) for w in ref.weights]
        ref.biases = [b + rng.normal(scale=0.1, size=b.shape) for b in ref.biases]
        cand = apply_permutation(ref, _random_perms(rng, ref))
        perms = weight_matching(ref, cand, seed=int(rng.integers(1 << 31)))
        self_dot = float(ref.flat() @ ref.flat())
        worst = max(worst, abs(alignment_objective(ref, cand, perms) - self_dot))
    return worst <= 1e-9, f"{instances} K-64-64-K instances, max |dot - self dot| = {worst:.2e}"


def _numeric(params, loss, h):
    grads = []
    for p in params:
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = loss()
            p[idx] = old - h
            down = loss()
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def _rel_err(analytic, numeric) -> float:
    a = np.concatenate([g.ravel() for g in analytic])
    n = np.concatenate([g.ravel() for g in numeric])
    return float(np.abs(a - n).max() / max(np.abs(n).max(), 1e-12))


def check_gradients(probes: int = 20, seed: int = 0):
    rng = np.random.default_rng(seed)
    worst_clf = worst_op = 0.0
    for _ in range(probes):
        k = int(rng.integers(2, 6))
        model = init_mlp((k, 8, 8, k), rng)
        model.biases = [rng.normal(scale=0.1, size=b.shape) for b in model.biases]
        x = rng.normal(size=(6, k))
        y = rng.integers(0, k, size=6)
        logits, cache = forward_cached(model, x)
        gw, gb = backward(model, cache, nll_loss_and_grad(logits, y)[1])
        analytic = [g for pair in zip(gw, gb) for g in pair]
        numeric = _numeric(model.parameters(), lambda: nll_loss_and_grad(forward(model, x), y)[0], 1e-5)
        worst_clf = max(worst_clf, _rel_err(analytic, numeric))

        scaler = new_op_scaler(k, 8, rng)
        for w, b in zip(scaler.backbone.weights, scaler.backbone.biases):
            w += rng.normal(scale=0.3, size=w.shape)
            b += rng.normal(scale=0.3, size=b.shape)
        x = rng.normal(size=(6, k))  # continuous draws: tie-free almost surely
        _, gw, gb = op_scaler_loss_and_grad(scaler, x, y)
        analytic = [g for pair in zip(gw, gb) for g in pair]
        numeric = _numeric(scaler.backbone.parameters(), lambda: op_scaler_nll(scaler, x, y), 1e-6)
        worst_op = max(worst_op, _rel_err(analytic, numeric))
    ok = worst_clf < 1e-4 and worst_op < 1e-3
    return ok, f"{probes} probes each, classifier rel err {worst_clf:.1e}, scaler rel err {worst_op:.1e}"


def grid_temperature(logits, labels, step: float = 0.001) -> float:
    grid = np.arange(0.05, 20.0 + step / 2, step)
    logits = np.asarray(logits, dtype=np.float64)
    rows = np.arange(len(logits))
    nll = []
    for chunk in np.array_split(grid, max(1, len(grid) // 500)):
        z = logits[None, :, :] / chunk[:, None, None]
        zmax = z.max(axis=2, keepdims=True)
        lse = np.log(np.exp(z - zmax).sum(axis=2)) + zmax[..., 0]
        nll.append((lse - z[:, rows, labels]).mean(axis=1))
    return float(grid[int(np.argmin(np.concatenate(nll)))])


def check_temp_fit(sets: int = 50, seed: int = 0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(sets):
        n = int(rng.integers(50, 300))
        k = int(rng.integers(2, 10))
        z = rng.normal(scale=2.0, size=(n, k))
        p = softmax(z)
        y = np.array([rng.choice(k, p=row) for row in p])
        logits = z * rng.uniform(0.25, 5.0)
        worst = max(worst, abs(temp_fit(logits, y).temperature - grid_temperature(logits, y)))
    return worst <= 0.01, f"{sets} logit sets, max |T - T_grid| = {worst:.4f}"


CHECKS = {
    "ece_oracle": check_ece_oracle,
    "order_preservation": check_order_preservation,
    "lap_exactness": check_lap,
    "permutation_symmetry": check_permutation_symmetry,
    "planted_recovery": check_planted_recovery,
    "gradients": check_gradients,
    "temperature_fit": check_temp_fit,
}


def run_all(names=None) -> list[CheckResult]:
    names = list(CHECKS) if names is None else list(names)
    return [_timed(n, CHECKS[n]) for n in names]


if __name__ == "__main__":  # pragma: no cover
    for r in run_all():
        print(r.line())

