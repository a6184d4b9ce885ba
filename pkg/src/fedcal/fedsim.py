"""Single-process FedAvg simulator with federated scaler training and averaging.

Each round the server samples ``m`` clients. A client aligns its persistent
local scaler to the current global scaler by weight matching, trains the
classifier locally, then refits the scaler on its validation logits. The
server averages models (sample-weighted) and scalers (uniformly).

Randomness is keyed by (master_seed, purpose, round, client), so results do
not depend on the order in which client updates are computed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .data import ClientShard, Dataset
from .errors import UsageError
from .matching import apply_permutation, weight_matching
from .metrics import DEFAULT_BINS, ece, local_global_summary, topk_accuracy
from .nn import MLPModel, forward, init_mlp, sgd_train
from .scalers import (
    OPScaler,
    TemperatureScaler,
    calibrate,
    new_op_scaler,
    op_scaler_fit,
    temp_fit,
)

log = logging.getLogger(__name__)

SCALER_KINDS = ("none", "temperature", "op_mlp")

# stream tags
_MODEL_INIT, _SCALER_INIT, _SAMPLE, _TRAIN, _SCALER_FIT, _NOISE, _MATCH = range(7)


def stream(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def _seed_from(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


@dataclass
class FedConfig:
    num_clients: int = 20
    clients_per_round: int = 5
    rounds: int = 100
    local_epochs: int = 3
    lr: float = 0.01
    batch_size: int = 256
    scaler_kind: str = "op_mlp"
    scaler_hidden_width: int = 64
    fedprox_mu: float | None = None
    master_seed: int = 0
    hidden_sizes: tuple[int, ...] = (64,)
    scaler_epochs: int = 50
    scaler_lr: float = 0.01
    weight_matching: bool = True
    scaler_reset: bool = False
    scaler_source: str = "local"
    local_init: str = "global_noise"
    scaler_input: str = "raw"
    init_noise: float = 1e-3
    eval_every: int = 1
    num_bins: int = DEFAULT_BINS

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        if not 1 <= self.clients_per_round <= self.num_clients:
            raise UsageError("need 1 <= clients_per_round <= num_clients")
        if self.rounds < 1 or self.local_epochs < 1:
            raise UsageError("rounds and local_epochs must be >= 1")
        if self.scaler_kind not in SCALER_KINDS:
            raise UsageError(f"scaler_kind must be one of {SCALER_KINDS}")
        if self.scaler_source not in ("local", "global"):
            raise UsageError("scaler_source must be 'local' or 'global'")
        if self.local_init not in ("global_noise", "independent"):
            raise UsageError("local_init must be 'global_noise' or 'independent'")
        if self.scaler_input not in ("raw", "sorted"):
            raise UsageError("scaler_input must be 'raw' or 'sorted'")
        if self.eval_every < 1:
            raise UsageError("eval_every must be >= 1")


@dataclass
class RoundState:
    round: int
    model: MLPModel
    scaler: OPScaler | TemperatureScaler | None
    metrics: dict = field(default_factory=dict)
    local_scalers: dict = field(default_factory=dict)


@dataclass
class ClientResult:
    client_id: int
    model: MLPModel
    scaler: OPScaler | TemperatureScaler | None
    num_samples: int
    warnings: list[str] = field(default_factory=list)


def _noisy_copy(scaler: OPScaler, scale: float, rng) -> OPScaler:
    out = scaler.copy()
    for p in out.backbone.parameters():
        p += scale * rng.standard_normal(p.shape)
    return out


def client_update(
    client: ClientShard,
    global_model: MLPModel,
    global_scaler,
    cfg: FedConfig,
    round_index: int,
    local_scaler=None,
) -> ClientResult:
    """One client's round: align scaler, train classifier, refit scaler."""
    if client.num_samples == 0:
        raise UsageError(f"client {client.client_id} holds no data")
    keys = (cfg.master_seed, round_index, client.client_id)
    warnings = []

    scaler = None
    if cfg.scaler_kind == "op_mlp":
        if local_scaler is None and cfg.local_init == "independent":
            scaler = new_op_scaler(
                global_scaler.num_classes, cfg.scaler_hidden_width,
                stream(_SCALER_INIT, cfg.master_seed, client.client_id + 1),
                sorted_input=global_scaler.sorted_input,
            )
        elif local_scaler is None:
            scaler = _noisy_copy(global_scaler, cfg.init_noise, stream(_NOISE, *keys))
        elif cfg.scaler_reset:
            scaler = global_scaler.copy()
        else:
            scaler = local_scaler.copy()
        if cfg.weight_matching:
            perms = weight_matching(global_scaler.backbone, scaler.backbone, seed=_seed_from(_MATCH, *keys))
            scaler = OPScaler(apply_permutation(scaler.backbone, perms), scaler.num_classes, scaler.sorted_input)
    elif cfg.scaler_kind == "temperature":
        scaler = local_scaler if local_scaler is not None and not cfg.scaler_reset else global_scaler

    prox = None if cfg.fedprox_mu is None else (cfg.fedprox_mu, global_model)
    if len(client.train):
        model = sgd_train(
            global_model, client.train, cfg.local_epochs, cfg.lr, cfg.batch_size,
            stream(_TRAIN, *keys), prox=prox,
        )
    else:
        model = global_model.copy()
        warnings.append("empty train split; classifier step skipped")

    if scaler is not None:
        if len(client.validation) == 0:
            warnings.append("empty validation split; scaler step skipped")
        else:
            source = model if cfg.scaler_source == "local" else global_model
            logits = forward(source, client.validation.features)
            labels = client.validation.labels
            if isinstance(scaler, OPScaler):
                scaler = op_scaler_fit(
                    scaler, logits, labels, cfg.scaler_epochs, cfg.scaler_lr,
                    stream(_SCALER_FIT, *keys),
                )
            else:
                scaler = temp_fit(logits, labels)
    for w in warnings:
        log.warning("round %d client %d: %s", round_index, client.client_id, w)
    return ClientResult(client.client_id, model, scaler, len(client.train), warnings)


def _check_same(models):
    first = models[0]
    for m in models[1:]:
        if not first.same_architecture(m):
            raise UsageError("architecture mismatch during aggregation")


def _weighted_mean(models: list[MLPModel], weights: np.ndarray) -> MLPModel:
    out = models[0].copy()
    for p in out.parameters():
        p[...] = 0.0
    for m, w in zip(models, weights):
        for acc, p in zip(out.parameters(), m.parameters()):
            acc += w * p
    return out


def aggregate_models(clients: list[tuple[MLPModel, int]], client_ids=None) -> MLPModel:
    """FedAvg: parameters weighted by n_c / sum(n_c).

    With ``client_ids`` the inputs are first put in client-id order so the
    floating-point accumulation order is canonical.
    """
    if not clients:
        raise UsageError("nothing to aggregate")
    if client_ids is not None:
        order = np.argsort(np.asarray(client_ids), kind="stable")
        clients = [clients[i] for i in order]
    models = [m for m, _ in clients]
    _check_same(models)
    counts = np.array([n for _, n in clients], dtype=np.float64)
    if counts.sum() <= 0:
        raise UsageError("sample counts must sum to a positive number")
    if len(models) == 1:
        return models[0].copy()
    return _weighted_mean(models, counts / counts.sum())


def aggregate_scalers(scalers: list):
    """Uniform parameter mean of the (already aligned) client scalers."""
    if not scalers:
        raise UsageError("nothing to aggregate")
    if all(isinstance(s, TemperatureScaler) for s in scalers):
        return TemperatureScaler(float(np.mean([s.temperature for s in scalers])))
    if not all(isinstance(s, OPScaler) for s in scalers):
        raise UsageError("cannot mix scaler kinds")
    backbones = [s.backbone for s in scalers]
    _check_same(backbones)
    if len(scalers) == 1:
        return scalers[0].copy()
    mean = _weighted_mean(backbones, np.full(len(backbones), 1.0 / len(backbones)))
    return OPScaler(mean, scalers[0].num_classes, scalers[0].sorted_input)


def init_state(num_features: int, num_classes: int, cfg: FedConfig) -> RoundState:
    sizes = (num_features,) + cfg.hidden_sizes + (num_classes,)
    model = init_mlp(sizes, stream(_MODEL_INIT, cfg.master_seed))
    if cfg.scaler_kind == "op_mlp":
        scaler = new_op_scaler(
            num_classes, cfg.scaler_hidden_width, stream(_SCALER_INIT, cfg.master_seed),
            sorted_input=cfg.scaler_input == "sorted",
        )
    elif cfg.scaler_kind == "temperature":
        scaler = TemperatureScaler(1.0)
    else:
        scaler = None
    return RoundState(0, model, scaler)


def evaluate_calibrator(probs_fn, test_set: Dataset | None, local_sets: list[Dataset], num_bins: int) -> dict:
    """Global and per-client calibration of ``probs_fn(features) -> probabilities``."""
    reports = [ece(probs_fn(d.features), d.labels, num_bins) for d in local_sets if len(d)]
    rec = {}
    if test_set is not None:
        probs = probs_fn(test_set.features)
        glob = ece(probs, test_set.labels, num_bins)
        k = min(3, probs.shape[1])
        rec["top3"] = topk_accuracy(probs, test_set.labels, k)
    else:
        glob = reports[0]
    summary = local_global_summary(reports, glob)
    rec.update(
        global_ece=summary.global_ece,
        mean_local_ece=summary.mean_local_ece,
        max_local_ece=summary.max_local_ece,
        var_local_ece=summary.var_local_ece,
        top1=summary.global_top1,
    )
    if test_set is None:
        del rec["global_ece"], rec["top1"]
    return rec


def run_federation(
    shards: list[ClientShard],
    cfg: FedConfig,
    test_set: Dataset | None = None,
    hook=None,
) -> tuple[RoundState, list[dict]]:
    """Run ``cfg.rounds`` rounds of FedAvg (plus scaler averaging).

    Metrics are recorded every ``cfg.eval_every`` rounds and at the last
    round. ``hook(state)`` may return extra metric rows for that round.
    """
    if len(shards) != cfg.num_clients:
        raise UsageError(f"expected {cfg.num_clients} shards, got {len(shards)}")
    sample = next(s for s in shards if s.num_samples)
    k = sample.train.num_classes
    d = (sample.train if len(sample.train) else sample.validation).dim
    state = init_state(d, k, cfg)
    local_sets = [s.local_data() for s in shards]
    history = []
    local_scalers: dict[int, object] = {}
    for t in range(1, cfg.rounds + 1):
        rng = stream(_SAMPLE, cfg.master_seed, t)
        chosen = np.sort(rng.choice(cfg.num_clients, size=cfg.clients_per_round, replace=False))
        results = [
            client_update(shards[c], state.model, state.scaler, cfg, t, local_scalers.get(int(c)))
            for c in chosen
        ]
        results.sort(key=lambda r: r.client_id)
        model = aggregate_models([(r.model, r.num_samples) for r in results])
        scaler = state.scaler
        if cfg.scaler_kind != "none":
            for r in results:
                local_scalers[r.client_id] = r.scaler
            scaler = aggregate_scalers([r.scaler for r in results])
        state = RoundState(t, model, scaler, local_scalers=dict(local_scalers))
        if t % cfg.eval_every == 0 or t == cfg.rounds:
            rows = [_evaluate_round(state, cfg, test_set, local_sets)]
            if hook is not None:
                rows += list(hook(state) or [])
            state.metrics = rows[0]
            history.extend(rows)
    return state, history


def _evaluate_round(state: RoundState, cfg: FedConfig, test_set, local_sets) -> dict:
    def probs_fn(x):
        return calibrate(state.scaler, forward(state.model, x))

    rec = {"round": state.round, "scaler": cfg.scaler_kind}
    rec.update(evaluate_calibrator(probs_fn, test_set, local_sets, cfg.num_bins))
    if test_set is not None and state.scaler is not None:
        uncal = ece(calibrate(None, forward(state.model, test_set.features)), test_set.labels, cfg.num_bins)
        rec["uncal_global_ece"] = uncal.ece
    return rec


def with_kind(cfg: FedConfig, **changes) -> FedConfig:
    return replace(cfg, **changes)
