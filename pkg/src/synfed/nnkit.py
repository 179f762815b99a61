"""One-hidden-layer ReLU classifier over flat float64 parameter vectors.

The flat layout is ``[W1 (input_dim x hidden_dim, row-major), b1,
W2 (hidden_dim x n_classes, row-major), b2]``. Every other module treats the
model only through the functions here plus the flat-array helpers
:func:`loss_and_grad_flat` and :func:`logits_flat`, which skip the
:class:`ParamVector` wrapping inside hot training loops.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArchMismatchError, ShapeError, ValidationError

ACTIVATIONS = ("relu",)


@dataclass(frozen=True)
class ModelArch:
    input_dim: int
    hidden_dim: int
    n_classes: int
    activation: str = "relu"

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden_dim < 1:
            raise ValidationError("input_dim and hidden_dim must be positive")
        if self.n_classes < 2:
            raise ValidationError("n_classes must be at least 2")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unsupported activation {self.activation!r}")

    @property
    def n_params(self) -> int:
        d, h, k = self.input_dim, self.hidden_dim, self.n_classes
        return d * h + h + h * k + k

    def slices(self) -> dict[str, slice]:
        d, h, k = self.input_dim, self.hidden_dim, self.n_classes
        o1 = d * h
        o2 = o1 + h
        o3 = o2 + h * k
        return {
            "W1": slice(0, o1),
            "b1": slice(o1, o2),
            "W2": slice(o2, o3),
            "b2": slice(o3, o3 + k),
        }

    def bias_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_params, dtype=bool)
        s = self.slices()
        mask[s["b1"]] = True
        mask[s["b2"]] = True
        return mask


class ParamVector:
    """Immutable flat parameter vector tagged with its architecture."""

    __slots__ = ("values", "arch")

    def __init__(self, values, arch: ModelArch):
        arr = np.array(values, dtype=np.float64, copy=True).reshape(-1)
        if arr.shape[0] != arch.n_params:
            raise ShapeError(f"expected {arch.n_params} parameters for {arch}, got {arr.shape[0]}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("parameter vector contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "arch", arch)

    def __setattr__(self, name, value):
        raise AttributeError("ParamVector is immutable")

    def __len__(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.arch == other.arch and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.arch, self.values.tobytes()))

    def __repr__(self) -> str:
        return f"ParamVector(D={len(self)}, arch={self.arch})"

    @classmethod
    def zeros(cls, arch: ModelArch) -> "ParamVector":
        return cls(np.zeros(arch.n_params), arch)

    def sq_norm(self) -> float:
        return float(self.values @ self.values)


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if x.ndim != 2:
            raise ShapeError("features must be a 2-D matrix")
        if x.shape[0] < 1:
            raise ShapeError("a batch needs at least one row")
        if y.shape[0] != x.shape[0]:
            raise ShapeError(f"{x.shape[0]} feature rows but {y.shape[0]} labels")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)


def init_params(arch: ModelArch, seed: int) -> ParamVector:
    """Scaled-uniform (Glorot) weights, bound ``sqrt(6 / (fan_in + fan_out))``; zero biases."""
    rng = np.random.default_rng(seed)
    s = arch.slices()
    theta = np.zeros(arch.n_params)
    for name, fan_in, fan_out in (
        ("W1", arch.input_dim, arch.hidden_dim),
        ("W2", arch.hidden_dim, arch.n_classes),
    ):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        theta[s[name]] = rng.uniform(-bound, bound, size=fan_in * fan_out)
    return ParamVector(theta, arch)


def _unpack(theta: np.ndarray, arch: ModelArch):
    s = arch.slices()
    W1 = theta[s["W1"]].reshape(arch.input_dim, arch.hidden_dim)
    b1 = theta[s["b1"]]
    W2 = theta[s["W2"]].reshape(arch.hidden_dim, arch.n_classes)
    b2 = theta[s["b2"]]
    return W1, b1, W2, b2


def _check_features(x: np.ndarray, arch: ModelArch) -> None:
    if x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise ShapeError(f"features of shape {x.shape} don't match input_dim={arch.input_dim}")


def logits_flat(theta: np.ndarray, x: np.ndarray, arch: ModelArch) -> np.ndarray:
    W1, b1, W2, b2 = _unpack(theta, arch)
    h = np.maximum(x @ W1 + b1, 0.0)
    return h @ W2 + b2


def loss_and_grad_flat(
    theta: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    arch: ModelArch,
    weight_decay: float = 0.0,
    need_grad: bool = True,
):
    """Mean cross-entropy plus ``weight_decay/2 * ||theta||^2`` and its gradient.

    Works on plain arrays; shapes are assumed already validated.
    """
    n = x.shape[0]
    W1, b1, W2, b2 = _unpack(theta, arch)
    pre = x @ W1 + b1
    h = np.maximum(pre, 0.0)
    z = h @ W2 + b2
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    expz = np.exp(shifted)
    sumexp = expz.sum(axis=1, keepdims=True)
    logp = shifted - np.log(sumexp)
    rows = np.arange(n)
    ce = -logp[rows, y].mean()
    loss = ce + 0.5 * weight_decay * float(theta @ theta)
    if not need_grad:
        return float(loss), None

    dz = expz / sumexp
    dz[rows, y] -= 1.0
    dz /= n
    dW2 = h.T @ dz
    db2 = dz.sum(axis=0)
    dh = dz @ W2.T
    dpre = dh * (pre > 0.0)
    dW1 = x.T @ dpre
    db1 = dpre.sum(axis=0)
    grad = np.concatenate([dW1.ravel(), db1, dW2.ravel(), db2])
    if weight_decay:
        grad += weight_decay * theta
    return float(loss), grad


def _check_batch(params: ParamVector, batch: Batch) -> None:
    _check_features(batch.features, params.arch)
    if batch.labels.min() < 0 or batch.labels.max() >= params.arch.n_classes:
        raise ShapeError(f"labels must lie in [0, {params.arch.n_classes})")


def loss_and_grad(params: ParamVector, batch: Batch, weight_decay: float = 0.0) -> tuple[float, ParamVector]:
    if weight_decay < 0:
        raise ValidationError("weight_decay must be non-negative")
    _check_batch(params, batch)
    loss, grad = loss_and_grad_flat(params.values, batch.features, batch.labels, params.arch, weight_decay)
    return loss, ParamVector(grad, params.arch)


def loss_only(params: ParamVector, batch: Batch, weight_decay: float = 0.0) -> float:
    _check_batch(params, batch)
    return loss_and_grad_flat(params.values, batch.features, batch.labels, params.arch, weight_decay, need_grad=False)[0]


def finite_diff_grad(params: ParamVector, batch: Batch, weight_decay: float = 0.0, h: float = 1e-5) -> ParamVector:
    """Central differences ``(L(theta + h e_k) - L(theta - h e_k)) / 2h`` for every coordinate."""
    if h <= 0:
        raise ValidationError("h must be positive")
    _check_batch(params, batch)
    theta = params.values.copy()
    x, y, arch = batch.features, batch.labels, params.arch
    out = np.empty_like(theta)
    for k in range(theta.shape[0]):
        orig = theta[k]
        theta[k] = orig + h
        up = loss_and_grad_flat(theta, x, y, arch, weight_decay, need_grad=False)[0]
        theta[k] = orig - h
        down = loss_and_grad_flat(theta, x, y, arch, weight_decay, need_grad=False)[0]
        theta[k] = orig
        out[k] = (up - down) / (2.0 * h)
    return ParamVector(out, arch)


def predict(params: ParamVector, features) -> np.ndarray:
    """Argmax class per row; ties go to the lowest class index."""
    x = np.asarray(features, dtype=np.float64)
    _check_features(x, params.arch)
    # np.argmax returns the first maximal index, which is the tie-break we want
    return np.argmax(logits_flat(params.values, x, params.arch), axis=1)


def axpy(dst: ParamVector, scale: float, src: ParamVector) -> ParamVector:
    """``dst + scale * src``."""
    if dst.arch != src.arch:
        raise ArchMismatchError(f"{dst.arch} vs {src.arch}")
    return ParamVector(dst.values + scale * src.values, dst.arch)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max over coordinates of ``|a - b| / max(|a|, |b|, floor)``.

    The floor keeps near-zero coordinates from turning rounding noise into
    large ratios.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
