"""Centralized training, evaluation metrics and checkpoint files.

Checkpoint byte layout (all little-endian)::

    offset  size  field
    0       8     magic  b"SYNFEDCK"
    8       4     u32 format version (1)
    12      4     u32 input_dim
    16      4     u32 hidden_dim
    20      4     u32 n_classes
    24      4     u32 activation code (0 = relu)
    28      8     u64 D, number of parameters
    36      4     u32 N, length of the UTF-8 note
    40      N     note (JSON text: data provenance, config digest)
    40+N    8*D   float64 parameters
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datakit import Dataset
from .errors import ArchMismatchError, CheckpointFormatError, DivergenceError, ShapeError, ValidationError
from .nnkit import ACTIVATIONS, ModelArch, ParamVector, init_params, logits_flat, loss_and_grad_flat
from .prng import mix_seed

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"SYNFEDCK"
CKPT_VERSION = 1
_HEADER = struct.Struct("<8sIIIIIQI")


@dataclass(frozen=True)
class TrainConfig:
    # defaults follow the synthetic-data recipe: heavy decay, small step
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.1
    lr_schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.epochs > 0 and not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError("momentum must lie in [0, 1)")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValidationError(f"unknown lr_schedule {self.lr_schedule!r}")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class Checkpoint:
    params: ParamVector
    arch: ModelArch
    note: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.params.arch != self.arch:
            raise ArchMismatchError("checkpoint params don't belong to its arch")

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return self.arch == other.arch and self.params == other.params and self.note == other.note


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    macro_f1: float
    mean_loss: float


def _check_dims(arch: ModelArch, dataset: Dataset) -> None:
    if dataset.dim != arch.input_dim:
        raise ShapeError(f"dataset dim {dataset.dim} != arch input_dim {arch.input_dim}")
    if dataset.n_classes != arch.n_classes:
        raise ShapeError(f"dataset has {dataset.n_classes} classes, arch expects {arch.n_classes}")


def lr_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    if cfg.lr_schedule == "constant" or total_steps <= 0:
        return cfg.learning_rate
    return 0.5 * cfg.learning_rate * (1.0 + math.cos(math.pi * step / total_steps))


def pretrain(arch: ModelArch, dataset: Dataset, cfg: TrainConfig, init: Checkpoint | None = None) -> Checkpoint:
    """Mini-batch SGD with momentum and L2 decay, reshuffling every epoch.

    Momentum follows the heavy-ball form ``v = m v + g; w -= lr v``.
    """
    _check_dims(arch, dataset)
    if init is not None and init.arch != arch:
        raise ArchMismatchError(f"init checkpoint arch {init.arch} != {arch}")
    start = init.params if init is not None else init_params(arch, mix_seed(cfg.seed, 0x494E4954))
    theta = start.values.copy()
    x, y = dataset.features, dataset.labels
    n = len(dataset)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    vel = np.zeros_like(theta)
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(mix_seed(cfg.seed, 0x45504F43, epoch)).permutation(n)
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            # overflow on a diverging run is reported below, not warned about
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grad = loss_and_grad_flat(theta, x[idx], y[idx], arch, cfg.weight_decay)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}")
            vel = cfg.momentum * vel + grad
            theta -= lr_at(cfg, step, total) * vel
            step += 1
        if not np.all(np.isfinite(theta)):
            raise DivergenceError(f"non-finite parameters after epoch {epoch}")
    note = {
        "data_provenance": dataset.provenance,
        "data_digest": dataset.digest()[:16],
        "config_digest": cfg.digest(),
        "warm_start": init is not None,
    }
    return Checkpoint(ParamVector(theta, arch), arch, note)


def full_batch_losses(arch: ModelArch, dataset: Dataset, lr: float, epochs: int, seed: int, weight_decay: float = 0.0):
    """Plain full-batch gradient descent; returns the loss before each epoch and the final params.

    Serves as the reference trainer in tests.
    """
    theta = init_params(arch, seed).values.copy()
    losses = []
    for _ in range(epochs):
        loss, grad = loss_and_grad_flat(theta, dataset.features, dataset.labels, arch, weight_decay)
        losses.append(loss)
        theta -= lr * grad
    losses.append(loss_and_grad_flat(theta, dataset.features, dataset.labels, arch, weight_decay, need_grad=False)[0])
    return losses, ParamVector(theta, arch)


def macro_f1(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> float:
    f1s = []
    for c in range(n_classes):
        tp = int(np.sum((y_pred == c) & (y_true == c)))
        fp = int(np.sum((y_pred == c) & (y_true != c)))
        fn = int(np.sum((y_pred != c) & (y_true == c)))
        denom = 2 * tp + fp + fn
        f1s.append(0.0 if denom == 0 else 2 * tp / denom)
    return float(np.mean(f1s))


def evaluate(params: ParamVector, dataset: Dataset) -> Metrics:
    arch = params.arch
    _check_dims(arch, dataset)
    loss, _ = loss_and_grad_flat(params.values, dataset.features, dataset.labels, arch, 0.0, need_grad=False)
    pred = np.argmax(logits_flat(params.values, dataset.features, arch), axis=1)
    acc = float(np.mean(pred == dataset.labels))
    return Metrics(acc, macro_f1(dataset.labels, pred, arch.n_classes), float(loss))


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arch = ckpt.arch
    note = json.dumps(ckpt.note, sort_keys=True).encode("utf-8")
    header = _HEADER.pack(
        CKPT_MAGIC,
        CKPT_VERSION,
        arch.input_dim,
        arch.hidden_dim,
        arch.n_classes,
        ACTIVATIONS.index(arch.activation),
        arch.n_params,
        len(note),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(note)
        fh.write(np.ascontiguousarray(ckpt.params.values, dtype="<f8").tobytes())
    return path


def load_checkpoint(path, arch: ModelArch | None = None) -> Checkpoint:
    """Read a checkpoint; when ``arch`` is given the file must match it."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, d_in, d_hid, k, act, n_params, note_len = _HEADER.unpack_from(raw, 0)
    if magic != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
    if act >= len(ACTIVATIONS):
        raise CheckpointFormatError(f"{path}: unknown activation code {act}")
    file_arch = ModelArch(d_in, d_hid, k, ACTIVATIONS[act])
    if file_arch.n_params != n_params:
        raise CheckpointFormatError(f"{path}: D={n_params} inconsistent with dims")
    expected = _HEADER.size + note_len + 8 * n_params
    if len(raw) != expected:
        raise CheckpointFormatError(f"{path}: expected {expected} bytes, found {len(raw)} (truncated or padded)")
    note_end = _HEADER.size + note_len
    try:
        note = json.loads(raw[_HEADER.size : note_end].decode("utf-8")) if note_len else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable note: {exc}") from exc
    values = np.frombuffer(raw, dtype="<f8", count=n_params, offset=note_end)
    if arch is not None and arch != file_arch:
        raise ArchMismatchError(f"{path}: checkpoint is {file_arch}, requested {arch}")
    return Checkpoint(ParamVector(values, file_arch), file_arch, note)
