"""Experiment configuration, single runs, sweeps and ablations.

A run partitions one dataset, trains the federation once per method group and
writes three files into the output directory:

    metrics.csv       one row per evaluated round per method
    reliability.json  final-round reliability data per method (global test set)
    manifest.json     config hash, seed, version, metrics path, duration

Baselines (uncal, val_ts, ens, avgt, lrts) share a single scaler-free
federation and are evaluated through its round hook. fedcal, fedcal_no_wm and
fedcal_small each run their own federation. Method groups are independent and
may run in worker processes; results are always assembled in a fixed order.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import avgt_apply, ens_apply, lrts_apply, lrts_average, lrts_fit_client, val_ts_fit
from .data import ClientShard, Dataset, PartitionSpec, dirichlet_partition, generate_synthetic, parse_idx, split_holdout
from .errors import UsageError
from .fedsim import FedConfig, evaluate_calibrator, run_federation
from .matching import apply_permutation, interpolate, weight_matching
from .metrics import ece
from .nn import forward
from .scalers import OPScaler, calibrate, new_op_scaler, op_scaler_fit, temp_apply, temp_fit

BASELINES = ("uncal", "val_ts", "ens", "avgt", "lrts")
FEDCAL_METHODS = ("fedcal", "fedcal_no_wm", "fedcal_small")
METHODS = BASELINES + FEDCAL_METHODS
COLUMNS = ("round", "method", "beta", "global_ece", "mean_local_ece", "max_local_ece",
           "var_local_ece", "top1", "top3")
SUMMARY_METRICS = ("global_ece", "mean_local_ece", "max_local_ece", "top1")
# baselines a FedCal cell is compared against for the relative-reduction column
REFERENCE_BASELINES = ("uncal", "ens", "avgt", "lrts")


class ConfigError(UsageError):
    """Invalid experiment configuration (CLI exit code 2)."""


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    num_classes: int = 10
    dim: int = 20
    per_class: int = 3000
    spread: float = 0.4
    images: str | None = None
    labels: str | None = None
    test_fraction: float = 0.2

    def validate(self):
        if self.kind not in ("synthetic", "idx"):
            raise ConfigError("dataset.kind must be 'synthetic' or 'idx'")
        if self.kind == "idx":
            for p in (self.images, self.labels):
                if not p or not Path(p).is_file():
                    raise ConfigError(f"IDX file not found: {p}")
        elif self.num_classes < 2 or self.per_class < 1 or self.dim < 1:
            raise ConfigError("synthetic data needs num_classes >= 2, per_class >= 1, dim >= 1")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("dataset.test_fraction must lie in (0, 1)")


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    partition: PartitionSpec = field(default_factory=lambda: PartitionSpec(20, 0.5))
    fed: FedConfig = field(default_factory=FedConfig)
    methods: tuple[str, ...] = METHODS
    out_dir: str = "runs/default"
    small_width: int = 8

    def validate(self):
        self.dataset.validate()
        if not self.methods:
            raise ConfigError("method list must not be empty")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}; choose from {list(METHODS)}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("duplicate methods")
        if self.partition.num_clients != self.fed.num_clients:
            raise ConfigError("partition.num_clients must equal fed.num_clients")
        if self.small_width < 1:
            raise ConfigError("small_width must be >= 1")
        return self

    @property
    def seed(self) -> int:
        return self.fed.master_seed

    def to_dict(self) -> dict:
        d = {
            "dataset": asdict(self.dataset),
            "partition": asdict(self.partition),
            "fed": asdict(self.fed),
            "methods": list(self.methods),
            "out_dir": self.out_dir,
            "small_width": self.small_width,
        }
        d["fed"]["hidden_sizes"] = list(d["fed"]["hidden_sizes"])
        return d

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _build(cls, raw: dict, section: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"'{section}' must be a JSON object")
    known = {f.name for f in fields(cls)}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown keys in '{section}': {sorted(extra)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{section}': {exc}") from exc


def config_from_dict(raw: dict, overrides: dict | None = None) -> ExperimentConfig:
    """Build and validate a config; ``overrides`` mirrors the CLI flags.

    Recognised overrides: seed, beta, methods, out_dir, idx_images, idx_labels, bins.
    A seed override drives the partition, the data generator and the federation.
    """
    raw = json.loads(json.dumps(raw or {}))
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    extra = set(raw) - {"dataset", "partition", "fed", "methods", "out_dir", "small_width"}
    if extra:
        raise ConfigError(f"unknown top-level keys: {sorted(extra)}")
    ds = raw.get("dataset", {})
    part = raw.get("partition", {})
    fed = raw.get("fed", {})
    o = {k: v for k, v in (overrides or {}).items() if v is not None}
    if "seed" in o:
        part["seed"] = fed["master_seed"] = int(o["seed"])
    if "beta" in o:
        part["beta"] = float(o["beta"])
    if "bins" in o:
        fed["num_bins"] = int(o["bins"])
    if "idx_images" in o or "idx_labels" in o:
        ds.update(kind="idx", images=o.get("idx_images", ds.get("images")),
                  labels=o.get("idx_labels", ds.get("labels")))
    part.setdefault("num_clients", fed.get("num_clients", FedConfig.num_clients))
    part.setdefault("beta", 0.5)
    part.setdefault("seed", fed.get("master_seed", 0))
    methods = o.get("methods", raw.get("methods", list(METHODS)))
    if isinstance(methods, str):
        methods = [m.strip() for m in methods.split(",") if m.strip()]
    cfg = ExperimentConfig(
        dataset=_build(DatasetSpec, ds, "dataset"),
        partition=_build(PartitionSpec, part, "partition"),
        fed=_build(FedConfig, fed, "fed"),
        methods=tuple(methods),
        out_dir=str(o.get("out_dir", raw.get("out_dir", "runs/default"))),
        small_width=int(raw.get("small_width", 8)),
    )
    return cfg.validate()


def load_config(path: str | os.PathLike | None, overrides: dict | None = None) -> ExperimentConfig:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(raw, overrides)


# data

def build_data(cfg: ExperimentConfig) -> tuple[list[ClientShard], Dataset]:
    ds = cfg.dataset
    if ds.kind == "synthetic":
        data = generate_synthetic(ds.num_classes, ds.dim, ds.per_class, ds.spread, cfg.partition.seed)
    else:
        data = parse_idx(ds.images, ds.labels)
    rest, test, _ = split_holdout(data, ds.test_fraction, cfg.partition.seed)
    return dirichlet_partition(rest, cfg.partition), test


# baselines evaluated on a scaler-free federation

def _client_validation(model, shards):
    out = []
    for s in shards:
        if len(s.validation):
            out.append((forward(model, s.validation.features), s.validation.labels))
    if not out:
        raise UsageError("baselines need at least one client with validation data")
    return out


def baseline_probs(method: str, model, shards: list[ClientShard]):
    """``features -> probabilities`` for one baseline on the given global model.

    Client-side calibrators are fitted on each client's validation logits of
    the global model (the model they are later applied to).
    """
    if method == "uncal":
        return lambda x: calibrate(None, forward(model, x))
    val = _client_validation(model, shards)
    if method == "val_ts":
        pooled = val_ts_fit(np.vstack([v[0] for v in val]), np.concatenate([v[1] for v in val]))
        return lambda x: temp_apply(pooled, forward(model, x))
    if method in ("ens", "avgt"):
        scalers = [temp_fit(lg, y) for lg, y in val]
        if method == "ens":
            return lambda x: ens_apply(scalers, forward(model, x))
        temps = [s.temperature for s in scalers]
        return lambda x: avgt_apply(temps, forward(model, x))
    if method == "lrts":
        avg = lrts_average([lrts_fit_client(lg, y) for lg, y in val])
        return lambda x: lrts_apply(avg, forward(model, x))
    raise UsageError(f"not a baseline: {method}")


def _row(method, beta, rnd, rec) -> dict:
    row = {"round": rnd, "method": method, "beta": beta}
    row.update({k: rec[k] for k in COLUMNS[3:]})
    return row


def _run_baselines(cfg: ExperimentConfig, methods: tuple[str, ...]):
    shards, test = build_data(cfg)
    local_sets = [s.local_data() for s in shards]
    fed = replace(cfg.fed, scaler_kind="none")
    beta = cfg.partition.beta

    def hook(state):
        rows = []
        for m in methods:
            probs = baseline_probs(m, state.model, shards)
            rows.append(_row(m, beta, state.round, evaluate_calibrator(probs, test, local_sets, fed.num_bins)))
        return rows

    state, history = run_federation(shards, fed, test, hook=hook)
    rows = [r for r in history if "method" in r]
    reports = {m: ece(baseline_probs(m, state.model, shards)(test.features), test.labels, fed.num_bins).to_dict()
               for m in methods}
    return rows, reports


def fedcal_config(cfg: ExperimentConfig, method: str) -> FedConfig:
    fed = replace(cfg.fed, scaler_kind="op_mlp")
    if method == "fedcal_no_wm":
        fed = replace(fed, weight_matching=False)
    elif method == "fedcal_small":
        fed = replace(fed, scaler_hidden_width=cfg.small_width)
    return fed


def _run_fedcal(cfg: ExperimentConfig, method: str):
    shards, test = build_data(cfg)
    fed = fedcal_config(cfg, method)
    state, history = run_federation(shards, fed, test)
    rows = [_row(method, cfg.partition.beta, r["round"], r) for r in history]
    probs = calibrate(state.scaler, forward(state.model, test.features))
    return rows, {method: ece(probs, test.labels, fed.num_bins).to_dict()}


def _run_group(args):
    cfg, group = args
    if group == "baselines":
        return _run_baselines(cfg, tuple(m for m in cfg.methods if m in BASELINES))
    return _run_fedcal(cfg, group)


def thread_count() -> int:
    raw = os.environ.get("FEDCAL_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError as exc:
            raise ConfigError(f"FEDCAL_THREADS must be an integer, got {raw!r}") from exc
        if n < 1:
            raise ConfigError("FEDCAL_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def _map(fn, jobs, threads):
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def _groups(cfg: ExperimentConfig) -> list[str]:
    groups = ["baselines"] if any(m in BASELINES for m in cfg.methods) else []
    return groups + [m for m in cfg.methods if m in FEDCAL_METHODS]


def execute(cfg: ExperimentConfig, threads: int = 1) -> tuple[list[dict], dict]:
    """Run every method group; rows ordered by (method list position, round)."""
    results = _map(_run_group, [(cfg, g) for g in _groups(cfg)], threads)
    rows, reports = [], {}
    for r, rep in results:
        rows.extend(r)
        reports.update(rep)
    order = {m: i for i, m in enumerate(cfg.methods)}
    rows.sort(key=lambda r: (order[r["method"]], r["round"]))
    return rows, {m: reports[m] for m in cfg.methods}


# output

def format_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([format_value(r[c]) for c in COLUMNS])
    return buf.getvalue()


def atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class RunManifest:
    config_hash: str
    master_seed: int
    version: str
    metrics_path: str
    duration_s: float
    config: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def run_experiment(cfg: ExperimentConfig, threads: int | None = None) -> RunManifest:
    """Train every requested method and write metrics.csv, reliability.json, manifest.json."""
    cfg.validate()
    threads = thread_count() if threads is None else threads
    start = time.perf_counter()
    rows, reports = execute(cfg, threads)
    out = Path(cfg.out_dir)
    metrics_path = out / "metrics.csv"
    atomic_write(metrics_path, metrics_csv(rows))
    atomic_write(out / "reliability.json", json.dumps(reports, indent=2, sort_keys=True))
    manifest = RunManifest(
        config_hash=cfg.config_hash(),
        master_seed=cfg.seed,
        version=__version__,
        metrics_path=str(metrics_path),
        duration_s=round(time.perf_counter() - start, 3),
        config=cfg.to_dict(),
    )
    atomic_write(out / "manifest.json", manifest.to_json())
    return manifest


def read_metrics(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["round"] = int(r["round"])
        for c in COLUMNS[2:]:
            r[c] = float(r[c])
    return rows


def final_rows(rows: list[dict]) -> dict[str, dict]:
    """Last evaluated round per method."""
    out = {}
    for r in rows:
        if r["method"] not in out or r["round"] >= out[r["method"]]["round"]:
            out[r["method"]] = r
    return out


# sweep

def _cell_config(cfg: ExperimentConfig, beta: float, seed: int) -> ExperimentConfig:
    return replace(
        cfg,
        partition=replace(cfg.partition, beta=float(beta), seed=int(seed)),
        fed=replace(cfg.fed, master_seed=int(seed)),
        out_dir=str(Path(cfg.out_dir) / f"beta{beta:g}_seed{seed}"),
    )


def _sweep_cell(cell_cfg: ExperimentConfig):
    run_experiment(cell_cfg, threads=1)
    return read_metrics(Path(cell_cfg.out_dir) / "metrics.csv")


def summarize(cells: dict) -> list[dict]:
    """Mean and population std per (beta, method) over seeds, final round only.

    ``cells`` maps (beta, seed) to metric rows. FedCal rows gain a
    ``rel_reduction`` column: (best reference baseline - fedcal) / best, using
    mean global ECE.
    """
    by_key: dict[tuple, list[dict]] = {}
    for (beta, _seed), rows in sorted(cells.items()):
        for method, r in final_rows(rows).items():
            by_key.setdefault((beta, method), []).append(r)
    table = []
    for (beta, method), rs in by_key.items():
        rec = {"beta": beta, "method": method, "seeds": len(rs)}
        for m in SUMMARY_METRICS:
            vals = np.array([r[m] for r in rs])
            rec[f"{m}_mean"] = float(vals.mean())
            rec[f"{m}_std"] = float(vals.std())
        table.append(rec)
    for rec in table:
        rec["rel_reduction"] = ""
        if rec["method"] in FEDCAL_METHODS:
            refs = [t["global_ece_mean"] for t in table
                    if t["beta"] == rec["beta"] and t["method"] in REFERENCE_BASELINES]
            if refs and min(refs) > 0:
                best = min(refs)
                rec["rel_reduction"] = (best - rec["global_ece_mean"]) / best
    order = {m: i for i, m in enumerate(METHODS)}
    table.sort(key=lambda t: (-t["beta"], order[t["method"]]))
    return table


def sweep(cfg: ExperimentConfig, betas, seeds, threads: int | None = None) -> tuple[list[dict], dict]:
    """Run the (beta, seed) grid and write sweep.csv next to the per-cell folders."""
    betas, seeds = list(betas), list(seeds)
    if not betas or not seeds:
        raise ConfigError("sweep needs at least one beta and one seed")
    threads = thread_count() if threads is None else threads
    keys = [(float(b), int(s)) for b in betas for s in seeds]
    cell_cfgs = [_cell_config(cfg, b, s).validate() for b, s in keys]
    cells = dict(zip(keys, _map(_sweep_cell, cell_cfgs, threads)))
    table = summarize(cells)
    cols = ["beta", "method", "seeds"] + [f"{m}_{s}" for m in SUMMARY_METRICS for s in ("mean", "std")] + ["rel_reduction"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for t in table:
        w.writerow([format_value(t[c]) for c in cols])
    atomic_write(Path(cfg.out_dir) / "sweep.csv", buf.getvalue())
    return table, cells


def format_table(table: list[dict]) -> str:
    """Summary text: global and local ECE in percent, mean +- std over seeds."""
    lines = [f"{'beta':>6}  {'method':<14}{'global ECE %':>16}{'local ECE %':>16}{'top1 %':>9}{'rel.red.':>10}"]
    for t in table:
        g = f"{100 * t['global_ece_mean']:.2f} +- {100 * t['global_ece_std']:.2f}"
        loc = f"{100 * t['mean_local_ece_mean']:.2f} +- {100 * t['mean_local_ece_std']:.2f}"
        rel = "" if t["rel_reduction"] == "" else f"{100 * t['rel_reduction']:.1f}%"
        lines.append(f"{t['beta']:>6g}  {t['method']:<14}{g:>16}{loc:>16}{100 * t['top1_mean']:>9.2f}{rel:>10}")
    return "\n".join(lines)


# ablations

def ablate_widths(cfg: ExperimentConfig, widths, threads: int | None = None) -> list[dict]:
    """Final-round FedCal metrics for each scaler width (WM on)."""
    threads = thread_count() if threads is None else threads
    jobs = [replace(cfg, fed=replace(cfg.fed, scaler_hidden_width=int(w)), methods=("fedcal",)) for w in widths]
    out = []
    for w, (rows, _) in zip(widths, _map(_run_group, [(c, "fedcal") for c in jobs], threads)):
        r = final_rows(rows)["fedcal"]
        out.append({"width": int(w), **{k: r[k] for k in COLUMNS if k not in ("method",)}})
    return out


def lambda_sweep(cfg: ExperimentConfig, lambdas=None) -> list[dict]:
    """Interpolate two independently trained client scalers.

    Two clients share a FedAvg-trained classifier; each fits its own scaler
    (different initialisations) on its validation logits. Scaler B is either
    aligned to A by weight matching or used as is, then
    ``lam * A + (1 - lam) * B`` is scored on both clients and the test set.
    """
    lambdas = np.linspace(0.0, 1.0, 11) if lambdas is None else np.asarray(lambdas, dtype=float)
    two = replace(cfg, partition=replace(cfg.partition, num_clients=2),
                  fed=replace(cfg.fed, num_clients=2, clients_per_round=2, scaler_kind="none"))
    shards, test = build_data(two)
    state, _ = run_federation(shards, two.fed, test)
    k = test.num_classes
    fits = []
    for i, s in enumerate(shards):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 9000 + i]))
        init = new_op_scaler(k, cfg.fed.scaler_hidden_width, rng, sorted_input=cfg.fed.scaler_input == "sorted")
        logits = forward(state.model, s.validation.features)
        fits.append(op_scaler_fit(init, logits, s.validation.labels, cfg.fed.scaler_epochs, cfg.fed.scaler_lr, rng))
    a, b = fits
    perms = weight_matching(a.backbone, b.backbone, seed=cfg.seed)
    variants = {"aligned": apply_permutation(b.backbone, perms), "unaligned": b.backbone}
    local = [s.local_data() for s in shards]
    test_logits = forward(state.model, test.features)
    local_logits = [forward(state.model, d.features) for d in local]
    rows = []
    for name, bb in variants.items():
        for lam in lambdas:
            mixed = OPScaler(interpolate(a.backbone, bb, float(lam)), k, a.sorted_input)
            rec = {"lambda": float(lam), "variant": name,
                   "global_ece": ece(calibrate(mixed, test_logits), test.labels, cfg.fed.num_bins).ece}
            for i, (lg, d) in enumerate(zip(local_logits, local)):
                rec[f"local_ece_{i}"] = ece(calibrate(mixed, lg), d.labels, cfg.fed.num_bins).ece
            rows.append(rec)
    return rows


def write_rows(path: Path, rows: list[dict]):
    if not rows:
        raise UsageError("nothing to write")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = list(rows[0])
    w.writerow(cols)
    for r in rows:
        w.writerow([format_value(r[c]) for c in cols])
    atomic_write(path, buf.getvalue())


def partition_stats(cfg: ExperimentConfig) -> list[dict]:
    shards, test = build_data(cfg)
    k = test.num_classes
    out = []
    for s in shards:
        hist = np.bincount(s.local_data().labels, minlength=k) if s.num_samples else np.zeros(k, dtype=int)
        out.append({
            "client": s.client_id,
            "train": len(s.train),
            "validation": len(s.validation),
            "max_class_share": float(hist.max() / max(hist.sum(), 1)),
            "histogram": " ".join(str(int(c)) for c in hist),
        })
    return out


def percent(x: float) -> str:
    return "nan" if math.isnan(x) else f"{100 * x:.2f}"
