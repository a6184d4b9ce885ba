"""Permutation alignment of MLPs: LAP solver, weight matching, interpolation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, UsageError
from .nn import MLPModel

MAX_SWEEPS = 100


@dataclass
class PermutationSet:
    """One permutation per hidden layer.

    ``perms[l][i] = j`` means hidden unit ``j`` of the candidate takes slot
    ``i`` in the aligned model.
    """

    perms: list[np.ndarray]

    def inverse(self) -> "PermutationSet":
        return PermutationSet([np.argsort(p) for p in self.perms])

    def is_identity(self) -> bool:
        return all(np.array_equal(p, np.arange(len(p))) for p in self.perms)


def identity_perms(model: MLPModel) -> PermutationSet:
    return PermutationSet([np.arange(w) for w in model.layer_sizes[1:-1]])


def _hungarian(cost: np.ndarray):
    """Shortest-augmenting-path Hungarian method (minimisation).

    Returns (row -> col assignment, row potentials, column potentials) with
    ``u[i] + v[j] <= cost[i, j]`` and equality on the assignment.
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row (1-based) matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            done = np.flatnonzero(used)
            u[p[done]] += delta
            v[done] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assign = np.empty(n, dtype=np.int64)
    assign[p[1:] - 1] = np.arange(n)
    return assign, u[1:], v[1:]


def _lex_smallest(tight: np.ndarray, assign: np.ndarray) -> np.ndarray:
    """Lexicographically smallest perfect matching inside the tight-edge graph."""
    n = len(assign)
    row_to = assign.copy()
    col_to = np.empty(n, dtype=np.int64)
    col_to[row_to] = np.arange(n)
    adj = [np.flatnonzero(tight[i]) for i in range(n)]
    fixed_col = np.zeros(n, dtype=bool)

    def reroute(r, banned, target, seen):
        # alternating path: move row r off its column, ending on ``target``
        for c in adj[r]:
            if fixed_col[c] or c == banned or seen[c]:
                continue
            seen[c] = True
            if c == target or reroute(col_to[c], banned, target, seen):
                row_to[r] = c
                col_to[c] = r
                return True
        return False

    for i in range(n):
        for j in adj[i]:
            if fixed_col[j]:
                continue
            if j == row_to[i]:
                break
            old = row_to[i]
            r = col_to[j]
            seen = np.zeros(n, dtype=bool)
            seen[j] = True
            if reroute(r, j, old, seen):
                row_to[i] = j
                col_to[j] = i
                break
        fixed_col[row_to[i]] = True
    return row_to


def solve_lap(score) -> np.ndarray:
    """Permutation ``p`` maximising ``sum_i score[i, p[i]]``.

    Among optimal permutations the lexicographically smallest is returned.
    """
    s = np.asarray(score, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise DimensionError(f"score matrix must be square, got shape {s.shape}")
    n = s.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.int64)
    if not np.isfinite(s).all():
        raise UsageError("score matrix must be finite")
    cost = -s
    assign, u, v = _hungarian(cost)
    tol = 1e-10 * max(1.0, float(np.abs(cost).max()))
    tight = (cost - u[:, None] - v[None, :]) <= tol
    perm = _lex_smallest(tight, assign)
    rows = np.arange(n)
    if s[rows, perm].sum() < s[rows, assign].sum() - n * tol:
        return assign
    return perm


def _layer_score(ref: MLPModel, cand: MLPModel, perms, l):
    """LAP score for hidden layer ``l`` (0-based over hidden layers)."""
    # incoming weights with bias folded in as an extra column
    wa = np.hstack([ref.weights[l], ref.biases[l][:, None]])
    prev = perms[l - 1] if l > 0 else np.arange(cand.layer_sizes[0])
    wb = np.hstack([cand.weights[l][:, prev], cand.biases[l][:, None]])
    score = wa @ wb.T
    nxt = perms[l + 1] if l + 1 < len(perms) else np.arange(cand.layer_sizes[-1])
    score += ref.weights[l + 1].T @ cand.weights[l + 1][nxt, :]
    return score


def alignment_objective(ref: MLPModel, cand: MLPModel, perms: PermutationSet | None = None) -> float:
    """vec(ref) . vec(perms(cand))."""
    aligned = cand if perms is None else apply_permutation(cand, perms)
    return float(ref.flat() @ aligned.flat())


def weight_matching(
    reference: MLPModel,
    candidate: MLPModel,
    seed: int = 0,
    max_sweeps: int = MAX_SWEEPS,
    history: list | None = None,
) -> PermutationSet:
    """Coordinate ascent on per-layer permutations aligning ``candidate`` to ``reference``.

    Layers are visited in a seeded random order each sweep; the loop stops once
    a sweep changes nothing or after ``max_sweeps``. If ``history`` is given the
    objective after every sweep is appended to it.
    """
    if not reference.same_architecture(candidate):
        raise UsageError(
            f"architecture mismatch: {reference.layer_sizes} vs {candidate.layer_sizes}"
        )
    rng = np.random.default_rng(seed)
    perms = [p.copy() for p in identity_perms(reference).perms]
    for _ in range(max_sweeps):
        changed = False
        for l in rng.permutation(len(perms)):
            new = solve_lap(_layer_score(reference, candidate, perms, l))
            if not np.array_equal(new, perms[l]):
                perms[l] = new
                changed = True
        if history is not None:
            history.append(alignment_objective(reference, candidate, PermutationSet(perms)))
        if not changed:
            break
    return PermutationSet(perms)


def apply_permutation(model: MLPModel, perms: PermutationSet) -> MLPModel:
    """Reorder hidden units; the permuted network computes the same function."""
    hidden = model.layer_sizes[1:-1]
    if len(perms.perms) != len(hidden):
        raise UsageError(f"expected {len(hidden)} permutations, got {len(perms.perms)}")
    for p, width in zip(perms.perms, hidden):
        if len(p) != width or not np.array_equal(np.sort(p), np.arange(width)):
            raise UsageError(f"not a permutation of [0, {width})")
    weights = [w.copy() for w in model.weights]
    biases = [b.copy() for b in model.biases]
    for l, p in enumerate(perms.perms):
        weights[l] = weights[l][p, :]
        biases[l] = biases[l][p]
        weights[l + 1] = weights[l + 1][:, p]
    return MLPModel(model.layer_sizes, weights, biases, model.hidden_activation)


def interpolate(a: MLPModel, b_aligned: MLPModel, lam: float) -> MLPModel:
    """``lam * a + (1 - lam) * b_aligned``, parameter-wise."""
    if not 0.0 <= lam <= 1.0:
        raise UsageError("lambda must lie in [0, 1]")
    if not a.same_architecture(b_aligned):
        raise UsageError("cannot interpolate models with different architectures")
    if lam == 1.0:
        return a.copy()
    if lam == 0.0:
        return b_aligned.copy()
    return MLPModel(
        a.layer_sizes,
        [lam * x + (1.0 - lam) * y for x, y in zip(a.weights, b_aligned.weights)],
        [lam * x + (1.0 - lam) * y for x, y in zip(a.biases, b_aligned.biases)],
        a.hidden_activation,
    )
