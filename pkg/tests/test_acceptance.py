"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary
(and to stdout when the file is run as a script). Criteria 8 and 9 share one
beta x seed sweep of the acceptance config; it is the slow part (tens of
minutes on one core).
"""

import os
import subprocess
import sys
import time
from pathlib import Path

import pytest

from fedcal import harness, verify

try:
    from conftest import ACCEPTANCE_LINES
except ImportError:  # run as a script
    ACCEPTANCE_LINES = {}

ROOT = Path(__file__).resolve().parents[1]
ACCEPTANCE_CONFIG = ROOT / "configs" / "acceptance.json"
BETAS = [1.0, 0.5, 0.3, 0.1]
SEEDS = [0, 1, 2]
BUDGET_S = 30 * 60
REFERENCE_CORES = 4


def record(number: int, title: str, passed: bool, detail: str):
    line = f"criterion {number:>2} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    assert passed, line


def _oracle(number, title, check):
    res = verify.run_all([check])[0]
    record(number, title, res.passed, f"{res.detail}, {res.seconds:.1f}s")
    return res


def test_c01_ece_oracle():
    res = verify.run_all(["ece_oracle"])[0]
    ok = res.passed and res.seconds < 10
    record(1, "ECE equals brute-force binning", ok, f"{res.detail}, {res.seconds:.1f}s (limit 10s)")


def test_c02_order_preservation():
    _oracle(2, "order preservation", "order_preservation")


def test_c03_lap_exactness():
    _oracle(3, "LAP exactness", "lap_exactness")


def test_c04_permutation_symmetry():
    _oracle(4, "permutation symmetry", "permutation_symmetry")


def test_c05_planted_recovery():
    _oracle(5, "planted permutation recovery", "planted_recovery")


def test_c06_gradients():
    _oracle(6, "backprop vs finite differences", "gradients")


def test_c07_temperature_fit():
    _oracle(7, "temp_fit vs grid search", "temperature_fit")


@pytest.fixture(scope="module")
def acceptance_sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance")
    cfg = harness.load_config(ACCEPTANCE_CONFIG, {"out_dir": str(out)})
    threads = harness.thread_count()
    start = time.perf_counter()
    table, cells = harness.sweep(cfg, BETAS, SEEDS, threads=threads)
    elapsed = time.perf_counter() - start
    final = {key: harness.final_rows(rows) for key, rows in cells.items()}
    print("\n" + harness.format_table(table))
    return final, elapsed, threads


def _ece(final, beta, seed, method):
    return final[(beta, seed)][method]["global_ece"]


def _votes(final, beta, better):
    return sum(bool(better(seed)) for seed in SEEDS)


def test_c08_end_to_end_trend(acceptance_sweep):
    final, elapsed, threads = acceptance_sweep
    parts, ok = [], True

    a = _votes(final, 0.1, lambda s: _ece(final, 0.1, s, "uncal") > _ece(final, 1.0, s, "uncal"))
    parts.append(f"(a) uncal ECE beta=0.1 > beta=1 on {a}/3")
    ok &= a >= 2

    for beta in BETAS:
        b = _votes(final, beta, lambda s: _ece(final, beta, s, "fedcal") < _ece(final, beta, s, "uncal"))
        parts.append(f"(b) fedcal < uncal at beta={beta:g} on {b}/3")
        ok &= b >= 2

    c = _votes(final, 0.1, lambda s: _ece(final, 0.1, s, "fedcal") <= _ece(final, 0.1, s, "ens"))
    parts.append(f"(c) fedcal <= ens at beta=0.1 on {c}/3")
    ok &= c >= 2

    # the budget is stated for a 4-core machine; cells are independent, so scale by available workers
    cores = max(1, min(threads, os.cpu_count() or 1))
    estimate = elapsed * cores / REFERENCE_CORES
    parts.append(f"sweep {elapsed / 60:.1f} min on {cores} core(s), ~{estimate / 60:.1f} min on {REFERENCE_CORES}")
    ok &= estimate < BUDGET_S

    vals = "; ".join(
        f"beta={b:g}: " + ", ".join(
            f"{m} " + "/".join(f"{100 * _ece(final, b, s, m):.2f}" for s in SEEDS)
            for m in ("uncal", "ens", "val_ts", "fedcal"))
        for b in BETAS)
    record(8, "end-to-end trend", ok, "; ".join(parts) + f" | global ECE % per seed: {vals}")


def test_c09_ablation_direction(acceptance_sweep):
    final, _, _ = acceptance_sweep
    wm = _votes(final, 0.1, lambda s: _ece(final, 0.1, s, "fedcal_no_wm") >= _ece(final, 0.1, s, "fedcal"))
    strict = _votes(final, 0.1, lambda s: _ece(final, 0.1, s, "fedcal_no_wm") > _ece(final, 0.1, s, "fedcal"))
    small = _votes(final, 0.1, lambda s: _ece(final, 0.1, s, "fedcal_small") >= _ece(final, 0.1, s, "fedcal"))
    vals = ", ".join(
        f"{m} " + "/".join(f"{100 * _ece(final, 0.1, s, m):.2f}" for s in SEEDS)
        for m in ("fedcal", "fedcal_no_wm", "fedcal_small"))
    record(9, "ablation direction at beta=0.1", wm >= 2 and small >= 2,
           f"no_wm >= fedcal on {wm}/3 (strictly greater on {strict}/3), small >= fedcal on {small}/3 | {vals}")


def test_c10_determinism(tmp_path):
    cfg = ROOT / "configs" / "quick.json"
    outputs = []
    for threads in ("1", "4", "1"):
        out = tmp_path / f"t{threads}_{len(outputs)}"
        env = dict(os.environ, FEDCAL_THREADS=threads)
        res = subprocess.run([sys.executable, "-m", "fedcal", "run", "--config", str(cfg), "--seed", "5",
                              "--out", str(out)], env=env, capture_output=True, text=True)
        assert res.returncode == 0, res.stderr
        outputs.append((out / "metrics.csv").read_bytes())
    same = len(set(outputs)) == 1
    record(10, "byte-identical metrics.csv", same,
           f"3 runs (FEDCAL_THREADS=1,4,1), {len(outputs[0])} bytes, {'identical' if same else 'DIFFERENT'}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
