"""Prompt templates and a label-conditioned Gaussian stand-in for a generator.

The oracle draws class ``c`` samples from ``N(mu_c + gap * u_c, sigma^2 (1 + rho) I)``
where ``u_c`` are fixed seed-derived unit vectors. ``gap = 0, rho = 0``
reproduces the real class-conditionals (an in-domain generator); growing the
gap moves the synthetic classes away from the real ones (out-of-domain).

Prompt files are line-oriented, ``label<TAB>guidance_scale<TAB>text``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import datakit
from .datakit import Dataset, LabelRegistry
from .errors import ShapeError, TemplateError, ValidationError
from .prng import mix_seed

LABEL_SLOT = "{label}"
GUIDANCE_RANGE = (1.0, 5.0)


@dataclass(frozen=True)
class PromptRecord:
    label: str
    text: str
    guidance_scale: float

    def __post_init__(self):
        lo, hi = GUIDANCE_RANGE
        if not lo <= self.guidance_scale <= hi:
            raise ValidationError(f"guidance_scale {self.guidance_scale} outside [{lo}, {hi}]")
        if "\t" in self.label or "\t" in self.text or "\n" in self.text:
            raise ValidationError("prompt label/text may not contain tabs or newlines")


def make_prompts(registry: LabelRegistry, template: str, n_per_label: int, seed: int) -> list[PromptRecord]:
    """``n_per_label`` prompts per label with guidance scale uniform on [1, 5]."""
    if template.count(LABEL_SLOT) != 1:
        raise TemplateError(f"template must contain {LABEL_SLOT} exactly once: {template!r}")
    if n_per_label < 0:
        raise ValidationError("n_per_label must be non-negative")
    rng = np.random.default_rng(mix_seed(seed, 0x50524F4D))
    lo, hi = GUIDANCE_RANGE
    out = []
    for name in registry.names:
        text = template.replace(LABEL_SLOT, name)
        for g in rng.uniform(lo, hi, size=n_per_label):
            out.append(PromptRecord(name, text, float(g)))
    return out


def write_prompts(prompts: Sequence[PromptRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for p in prompts:
            fh.write(f"{p.label}\t{p.guidance_scale!r}\t{p.text}\n")
    return path


def read_prompts(path) -> list[PromptRecord]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise datakit.DatasetFormatError("expected label<TAB>guidance<TAB>text", path, lineno)
        try:
            g = float(parts[1])
        except ValueError:
            raise datakit.DatasetFormatError(f"bad guidance scale {parts[1]!r}", path, lineno, 2) from None
        out.append(PromptRecord(parts[0], parts[2], g))
    return out


def shift_directions(n_classes: int, dim: int, seed: int) -> np.ndarray:
    """One unit vector per class, drawn isotropically from ``seed``."""
    rng = np.random.default_rng(mix_seed(seed, 0x53484946))
    u = rng.standard_normal((n_classes, dim))
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return u / norms


@dataclass(frozen=True)
class OracleConfig:
    registry: LabelRegistry
    base_means: np.ndarray
    within_class_std: float
    domain_gap: float = 0.0
    variance_inflation: float = 0.0
    shift_directions: np.ndarray | None = None
    direction_seed: int = 0

    def __post_init__(self):
        means = np.array(self.base_means, dtype=np.float64)
        if means.ndim != 2 or means.shape[0] != len(self.registry):
            raise ShapeError("base_means must be (n_classes, dim)")
        if self.domain_gap < 0 or self.variance_inflation < 0:
            raise ValidationError("domain_gap and variance_inflation must be non-negative")
        if not self.within_class_std > 0:
            raise ValidationError("within_class_std must be positive")
        u = self.shift_directions
        if u is None:
            u = shift_directions(means.shape[0], means.shape[1], self.direction_seed)
        u = np.array(u, dtype=np.float64)
        if u.shape != means.shape:
            raise ShapeError("shift_directions must match base_means")
        if np.any(np.abs(np.linalg.norm(u, axis=1) - 1.0) > 1e-9):
            raise ValidationError("shift directions must be unit vectors")
        means.setflags(write=False)
        u.setflags(write=False)
        object.__setattr__(self, "base_means", means)
        object.__setattr__(self, "shift_directions", u)

    @property
    def synthetic_means(self) -> np.ndarray:
        return self.base_means + self.domain_gap * self.shift_directions

    @property
    def synthetic_std(self) -> float:
        return self.within_class_std * float(np.sqrt(1.0 + self.variance_inflation))

    @classmethod
    def from_benchmark(cls, cfg: datakit.BlobBenchmarkConfig, registry: LabelRegistry | None = None, **kw):
        registry = registry or LabelRegistry.numbered(cfg.n_classes)
        return cls(registry, datakit.class_means(cfg), cfg.within_class_std, **kw)


@dataclass(frozen=True)
class SyntheticVolume:
    multiplier: float

    def __post_init__(self):
        if not self.multiplier > 0:
            raise ValidationError("volume multiplier must be positive")

    def total(self, real_train_size: int) -> int:
        return int(round(self.multiplier * real_train_size))


def per_class_counts(total: int, n_classes: int) -> np.ndarray:
    """Uniform split; the remainder goes to the lowest class ids."""
    counts = np.full(n_classes, total // n_classes, dtype=np.int64)
    counts[: total % n_classes] += 1
    return counts


def generate_synthetic(oracle: OracleConfig, volume: SyntheticVolume, real_train_size: int, seed: int) -> Dataset:
    if real_train_size < 1:
        raise ValidationError("real_train_size must be at least 1")
    total = volume.total(real_train_size)
    k = len(oracle.registry)
    counts = per_class_counts(total, k)
    rng = np.random.default_rng(mix_seed(seed, 0x53594E54))
    means = oracle.synthetic_means
    std = oracle.synthetic_std
    xs, ys = [], []
    for c in range(k):
        xs.append(means[c] + std * rng.standard_normal((counts[c], means.shape[1])))
        ys.append(np.full(counts[c], c, dtype=np.int64))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    perm = rng.permutation(x.shape[0])
    return Dataset(x[perm], y[perm], oracle.registry, "synthetic")


def ingest_external(path, registry: LabelRegistry, input_dim: int | None = None) -> Dataset:
    """Load generator output written in the dataset file format.

    Labels are matched to ``registry`` by name: integer ids are translated
    through the file's manifest when one exists, otherwise the label column
    must hold names (or ids valid for ``registry``).
    """
    manifest = datakit.read_manifest(path)
    tokens, feats = datakit.read_table(path)
    if not tokens:
        raise ValidationError(f"{path}: no data rows (a dataset needs at least one sample)")
    file_names = manifest["labels"] if manifest is not None else None
    labels = datakit.resolve_labels(tokens, registry, file_names)
    if input_dim is not None and feats.shape[1] != input_dim:
        raise ShapeError(f"{path}: feature dimension {feats.shape[1]} != model input_dim {input_dim}")
    return Dataset(feats, labels, registry, "external")
