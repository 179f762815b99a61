"""Federated fine-tuning loop.

Per round ``t`` the coordinator samples a cohort, every cohort member runs
local SGD from the current global model, the server aggregates the client
deltas (optionally through :mod:`synfed.secagg`), evaluates, and appends a
:class:`RoundRecord`.

Seeding: the cohort of round ``t`` comes from ``mix_seed(seed, COHORT_TAG, t)``
and client ``i``'s batch order from ``mix_seed(seed, LOCAL_TAG, t, i)``, so
results don't depend on the order clients are processed in. Aggregation
always reduces in ascending client-id order.

Communication accounting counts model parameters: each round moves
``|S| * D`` down and ``|S| * D`` up (doubled under SCAFFOLD, which also ships
control variates). When ``count_initial_broadcast`` is set, round 1
additionally charges ``n_clients * D`` for handing the starting model to every
client; ``cumulative_params_fl`` always excludes that term.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import secagg
from .datakit import Dataset, Partition
from .errors import DivergenceError, ValidationError, ZeroSumError
from .nnkit import ModelArch, ParamVector, loss_and_grad_flat
from .prng import mix_seed, rng_for
from .trainer import Checkpoint, Metrics, evaluate

logger = logging.getLogger(__name__)

COHORT_TAG = 0x434F484F
LOCAL_TAG = 0x4C4F4341
SECAGG_TAG = 0x53454341

SERVER_OPTIMIZERS = ("fedavg", "fedopt_adam", "fedopt_sgd")
DIVERSITY_SENTINEL = -1.0
ZERO_SUM_THRESHOLD = 1e-24

CSV_SCHEMA_VERSION = "rounds-v1"
CSV_COLUMNS = (
    "round",
    "accuracy",
    "macro_f1",
    "loss",
    "gradient_diversity",
    "params_up",
    "params_down",
    "cumulative_params",
    "cumulative_params_fl",
    "cohort",
)


@dataclass(frozen=True)
class FLConfig:
    """Federated training settings.

    ``server_optimizer="fedopt_sgd"`` is plain server SGD on the pseudo-gradient,
    kept for checking FedOpt against FedAvg.
    """

    rounds: int = 50
    cohort_size: int = 5
    local_epochs: int = 1
    batch_size: int = 32
    local_lr: float = 0.05
    local_weight_decay: float = 0.0
    server_optimizer: str = "fedavg"
    server_lr: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    prox_mu: float = 0.0
    use_scaffold: bool = False
    weighted_aggregation: bool = True
    secure_aggregation: bool = False
    quant_bits: int = 32
    quant_clip: float = 8.0
    count_initial_broadcast: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1:
            raise ValidationError("rounds must be >= 1")
        if self.cohort_size < 1:
            raise ValidationError("cohort_size must be >= 1")
        if self.local_epochs < 0:
            raise ValidationError("local_epochs must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not self.local_lr > 0:
            raise ValidationError("local_lr must be positive")
        if self.local_weight_decay < 0:
            raise ValidationError("local_weight_decay must be >= 0")
        if self.server_optimizer not in SERVER_OPTIMIZERS:
            raise ValidationError(f"server_optimizer must be one of {SERVER_OPTIMIZERS}")
        if self.prox_mu < 0:
            raise ValidationError("prox_mu must be >= 0")
        if self.prox_mu > 0 and self.use_scaffold:
            raise ValidationError("FedProx (prox_mu > 0) and SCAFFOLD are mutually exclusive")
        if self.secure_aggregation:
            self.quant_config()

    def validate_for(self, n_clients: int) -> None:
        if self.cohort_size > n_clients:
            raise ValidationError(f"cohort_size {self.cohort_size} exceeds n_clients {n_clients}")

    def quant_config(self) -> secagg.QuantConfig:
        return secagg.QuantConfig(self.quant_bits, self.quant_clip)


@dataclass(frozen=True)
class ClientUpdate:
    delta: ParamVector
    n_samples: int
    client_id: int

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValidationError("n_samples must be >= 1")


@dataclass
class ScaffoldState:
    server_c: ParamVector
    client_c: dict[int, ParamVector] = field(default_factory=dict)

    @classmethod
    def zeros(cls, arch: ModelArch) -> "ScaffoldState":
        return cls(ParamVector.zeros(arch))

    def for_client(self, client_id: int) -> ParamVector:
        c = self.client_c.get(client_id)
        return c if c is not None else ParamVector.zeros(self.server_c.arch)


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, dim: int) -> "AdamState":
        return cls(np.zeros(dim), np.zeros(dim), 0)


@dataclass(frozen=True)
class RoundRecord:
    round: int
    metrics: Metrics
    gradient_diversity: float
    params_up: int
    params_down: int
    cumulative_params: int
    cumulative_params_fl: int
    cohort: tuple[int, ...]


@dataclass
class RunLog:
    records: list[RoundRecord]
    final: Checkpoint

    def curve(self, metric: str = "accuracy") -> np.ndarray:
        if metric == "diversity":
            return np.array([r.gradient_diversity for r in self.records])
        return np.array([getattr(r.metrics, metric) for r in self.records])


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def sample_cohort(t: int, cohort_size: int, n_clients: int, seed: int) -> tuple[int, ...]:
    """Uniform sample without replacement, returned in ascending id order."""
    if not 1 <= cohort_size <= n_clients:
        raise ValidationError(f"cohort_size {cohort_size} not in [1, {n_clients}]")
    if cohort_size == n_clients:
        return tuple(range(n_clients))
    picked = rng_for(seed, COHORT_TAG, t).choice(n_clients, size=cohort_size, replace=False)
    return tuple(sorted(int(i) for i in picked))


def local_steps(n_samples: int, cfg: FLConfig) -> int:
    return cfg.local_epochs * math.ceil(n_samples / cfg.batch_size)


def local_sgd(
    w_global: np.ndarray,
    grad_fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
    n_samples: int,
    cfg: FLConfig,
    t: int,
    client_id: int,
    correction: np.ndarray | None = None,
) -> np.ndarray:
    """Local SGD from ``w_global``; ``grad_fn(w, idx)`` returns the minibatch gradient.

    Each step uses ``grad + prox_mu * (w - w_global)`` plus ``correction``
    (``c - c_i`` under SCAFFOLD). Returns the final local weights.
    """
    w = np.array(w_global, dtype=np.float64, copy=True)
    rng = rng_for(cfg.seed, LOCAL_TAG, t, client_id)
    steps_per_epoch = math.ceil(n_samples / cfg.batch_size)
    mu = cfg.prox_mu
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n_samples)
        for b in range(steps_per_epoch):
            g = grad_fn(w, order[b * cfg.batch_size : (b + 1) * cfg.batch_size])
            if mu > 0:
                g = g + mu * (w - w_global)
            if correction is not None:
                g = g + correction
            w -= cfg.local_lr * g
    return w


def scaffold_variate(c: np.ndarray, c_i: np.ndarray, w_global: np.ndarray, w_final: np.ndarray, k: int, lr: float) -> np.ndarray:
    """Option-II control variate ``c_i - c + (w_global - w_final) / (k * lr)``."""
    if k == 0:
        return np.array(c_i, copy=True)
    return c_i - c + (w_global - w_final) / (k * lr)


def local_update(
    global_params: ParamVector,
    client_data: Dataset,
    cfg: FLConfig,
    t: int,
    client_id: int,
    scaffold: tuple[ParamVector, ParamVector] | None = None,
) -> tuple[ClientUpdate, ParamVector | None]:
    """Run local SGD on the client's data; returns the delta and the new SCAFFOLD variate."""
    if scaffold is not None and cfg.prox_mu > 0:
        raise ValidationError("FedProx and SCAFFOLD cannot be combined")
    arch = global_params.arch
    x, y = client_data.features, client_data.labels
    n = len(client_data)

    def grad_fn(w, idx):
        return loss_and_grad_flat(w, x[idx], y[idx], arch, cfg.local_weight_decay)[1]

    w_global = global_params.values
    correction = None if scaffold is None else scaffold[0].values - scaffold[1].values
    w = local_sgd(w_global, grad_fn, n, cfg, t, client_id, correction)
    if not np.all(np.isfinite(w)):
        raise DivergenceError(f"client {client_id} produced a non-finite update in round {t}")
    update = ClientUpdate(ParamVector(w - w_global, arch), n, client_id)
    new_ci = None
    if scaffold is not None:
        c, c_i = scaffold
        new_ci = ParamVector(scaffold_variate(c.values, c_i.values, w_global, w, local_steps(n, cfg), cfg.local_lr), arch)
    return update, new_ci


def _ordered(updates: Sequence[ClientUpdate]) -> list[ClientUpdate]:
    if not updates:
        raise ValidationError("need at least one client update")
    return sorted(updates, key=lambda u: u.client_id)


def aggregation_weights(updates: Sequence[ClientUpdate], weighted: bool) -> np.ndarray:
    w = np.array([u.n_samples if weighted else 1 for u in updates], dtype=np.float64)
    return w / w.sum()


def mean_delta(updates: Sequence[ClientUpdate], weighted: bool) -> np.ndarray:
    ups = _ordered(updates)
    weights = aggregation_weights(ups, weighted)
    total = np.zeros(len(ups[0].delta))
    for wi, u in zip(weights, ups):
        total += wi * u.delta.values
    return total


def fedavg_step(global_params: ParamVector, mean: np.ndarray) -> ParamVector:
    return ParamVector(global_params.values + mean, global_params.arch)


def fedopt_step(global_params: ParamVector, mean: np.ndarray, state: AdamState, cfg: FLConfig) -> tuple[ParamVector, AdamState]:
    """Server optimizer step on the pseudo-gradient ``-mean``."""
    g = -mean
    if cfg.server_optimizer == "fedopt_sgd":
        return ParamVector(global_params.values - cfg.server_lr * g, global_params.arch), replace(state, step=state.step + 1)
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    t = state.step + 1
    m = b1 * state.m + (1.0 - b1) * g
    v = b2 * state.v + (1.0 - b2) * g * g
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    step = cfg.server_lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return ParamVector(global_params.values - step, global_params.arch), AdamState(m, v, t)


def aggregate_fedavg(global_params: ParamVector, updates: Sequence[ClientUpdate], weighted: bool = True) -> ParamVector:
    """``global + sum_i (w_i / sum w) * delta_i`` with ``w_i = n_samples`` or 1."""
    return fedavg_step(global_params, mean_delta(updates, weighted))


def aggregate_fedopt(
    global_params: ParamVector, updates: Sequence[ClientUpdate], state: AdamState | None, cfg: FLConfig
) -> tuple[ParamVector, AdamState]:
    state = state if state is not None else AdamState.zeros(len(global_params))
    return fedopt_step(global_params, mean_delta(updates, weighted=False), state, cfg)


def gradient_diversity(updates) -> float:
    """``sum_i ||d_i||^2 / ||sum_i d_i||^2`` over the raw client deltas."""
    deltas = [u.delta.values if isinstance(u, ClientUpdate) else np.asarray(u, dtype=np.float64) for u in updates]
    if not deltas:
        raise ValidationError("need at least one update")
    total = np.zeros_like(deltas[0])
    sq = 0.0
    for d in deltas:
        total += d
        sq += float(d @ d)
    denom = float(total @ total)
    if denom < ZERO_SUM_THRESHOLD:
        raise ZeroSumError(f"||sum of updates||^2 = {denom:.3e} is below {ZERO_SUM_THRESHOLD}")
    return sq / denom


def smooth_ema(values: Sequence[float], factor: float = 0.9) -> np.ndarray:
    """Exponential moving average for plotting; sentinel entries carry the previous value."""
    out = np.empty(len(values))
    state = None
    for k, v in enumerate(values):
        if v != DIVERSITY_SENTINEL:
            state = v if state is None else factor * state + (1.0 - factor) * v
        out[k] = DIVERSITY_SENTINEL if state is None else state
    return out


def comm_per_round(cohort_size: int, dim: int, cfg: FLConfig) -> tuple[int, int]:
    mult = 2 if cfg.use_scaffold else 1
    return cohort_size * dim * mult, cohort_size * dim * mult


# ---------------------------------------------------------------------------
# Full loop
# ---------------------------------------------------------------------------


def client_datasets(train: Dataset, partition: Partition) -> list[Dataset]:
    partition.validate(len(train))
    return [train.subset(idx) for idx in partition.assignments]


def _secure_mean(updates: list[ClientUpdate], weights: np.ndarray, cfg: FLConfig, t: int) -> np.ndarray:
    # each client quantizes its own share w_i * delta_i so the masked sum is the aggregate itself
    shares = {u.client_id: wi * u.delta.values for wi, u in zip(weights, updates)}
    return secagg.secure_aggregate(shares, mix_seed(cfg.seed, SECAGG_TAG, t), cfg.quant_config())


def run_federation(
    init: Checkpoint,
    train: Dataset,
    partition: Partition,
    test: Dataset,
    cfg: FLConfig,
    clients: list[Dataset] | None = None,
) -> RunLog:
    arch = init.arch
    n_clients = partition.n_clients
    cfg.validate_for(n_clients)
    if clients is None:
        clients = client_datasets(train, partition)
    dim = arch.n_params
    global_params = init.params
    adam = AdamState.zeros(dim)
    scaffold = ScaffoldState.zeros(arch) if cfg.use_scaffold else None
    weighted = cfg.weighted_aggregation and cfg.server_optimizer == "fedavg"
    records: list[RoundRecord] = []
    cumulative = 0
    cumulative_fl = 0
    for t in range(1, cfg.rounds + 1):
        cohort = sample_cohort(t, cfg.cohort_size, n_clients, cfg.seed)
        updates: list[ClientUpdate] = []
        new_cs: dict[int, ParamVector] = {}
        for i in cohort:
            sc = (scaffold.server_c, scaffold.for_client(i)) if scaffold is not None else None
            try:
                upd, new_ci = local_update(global_params, clients[i], cfg, t, i, sc)
            except DivergenceError as exc:
                raise DivergenceError(f"round {t}: {exc}") from exc
            updates.append(upd)
            if new_ci is not None:
                new_cs[i] = new_ci

        try:
            diversity = gradient_diversity(updates)
        except ZeroSumError:
            logger.info("round %d: zero-sum client updates, diversity recorded as sentinel", t)
            diversity = DIVERSITY_SENTINEL

        weights = aggregation_weights(updates, weighted)
        if cfg.secure_aggregation:
            mean = _secure_mean(updates, weights, cfg, t)
        else:
            mean = mean_delta(updates, weighted)
        if cfg.server_optimizer == "fedavg":
            global_params = fedavg_step(global_params, mean)
        else:
            global_params, adam = fedopt_step(global_params, mean, adam, cfg)

        if scaffold is not None:
            dc = np.zeros(dim)
            for i in cohort:
                dc += new_cs[i].values - scaffold.for_client(i).values
            scaffold.server_c = ParamVector(scaffold.server_c.values + dc / n_clients, arch)
            scaffold.client_c.update(new_cs)

        up, down = comm_per_round(len(cohort), dim, cfg)
        cumulative_fl += up + down
        if t == 1 and cfg.count_initial_broadcast:
            down += n_clients * dim
        cumulative += up + down
        records.append(
            RoundRecord(t, evaluate(global_params, test), diversity, up, down, cumulative, cumulative_fl, cohort)
        )
    note = dict(init.note)
    note.update({"federated_rounds": cfg.rounds, "server_optimizer": cfg.server_optimizer})
    return RunLog(records, Checkpoint(global_params, arch, note))


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def write_rounds_csv(log: RunLog, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in log.records:
            w.writerow([
                r.round,
                repr(float(r.metrics.accuracy)),
                repr(float(r.metrics.macro_f1)),
                repr(float(r.metrics.mean_loss)),
                repr(float(r.gradient_diversity)),
                r.params_up,
                r.params_down,
                r.cumulative_params,
                r.cumulative_params_fl,
                " ".join(str(c) for c in r.cohort),
            ])
    return path


def read_rounds_csv(path) -> list[RoundRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValidationError(f"{path}: unexpected columns {reader.fieldnames}")
        for row in reader:
            out.append(
                RoundRecord(
                    int(row["round"]),
                    Metrics(float(row["accuracy"]), float(row["macro_f1"]), float(row["loss"])),
                    float(row["gradient_diversity"]),
                    int(row["params_up"]),
                    int(row["params_down"]),
                    int(row["cumulative_params"]),
                    int(row["cumulative_params_fl"]),
                    tuple(int(c) for c in row["cohort"].split()),
                )
            )
    return out
