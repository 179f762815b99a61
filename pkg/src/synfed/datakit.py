"""Datasets, Gaussian-blob benchmarks, Dirichlet partitioning and dataset files.

File format
-----------
A dataset is a comma-separated text file with one header line
``label,f0,f1,...,f{d-1}`` followed by one row per sample. Labels are
integer class ids (names are also accepted when reading external files).
Features are written with 17 significant digits so reading them back is
bit-exact.

Next to ``data.csv`` lives ``data.csv.manifest.json`` with the fields

``format``       always ``"synfed-dataset"``
``version``      integer, currently 1
``labels``       ordered list of label names; index is the class id
``provenance``   ``"real"``, ``"synthetic"`` or ``"external"``
``n_samples``    row count
``feature_dim``  ``d``
``generation``   free-form object describing how the data was made (may be ``{}``)
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DatasetFormatError, InfeasibleError, ShapeError, ValidationError

PROVENANCES = ("real", "synthetic", "external")
MANIFEST_FORMAT = "synfed-dataset"
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class LabelRegistry:
    names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.names)
        if len(names) < 2:
            raise ValidationError("a label registry needs at least two labels")
        if any(not isinstance(n, str) or not n for n in names):
            raise ValidationError("label names must be non-empty strings")
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValidationError(f"duplicate label names: {dupes}")
        object.__setattr__(self, "names", names)

    @classmethod
    def numbered(cls, n_classes: int, prefix: str = "class_") -> "LabelRegistry":
        return cls(tuple(f"{prefix}{i}" for i in range(n_classes)))

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


class Dataset:
    """Labeled feature matrix. Arrays are read-only after construction."""

    __slots__ = ("features", "labels", "registry", "provenance")

    def __init__(self, features, labels, registry: LabelRegistry, provenance: str = "real"):
        x = np.array(features, dtype=np.float64, copy=True)
        y = np.array(labels, dtype=np.int64, copy=True).reshape(-1)
        if x.ndim != 2:
            raise ShapeError("features must be a 2-D matrix")
        if x.shape[0] < 1:
            raise ValidationError("a dataset needs at least one sample")
        if y.shape[0] != x.shape[0]:
            raise ShapeError(f"{x.shape[0]} feature rows but {y.shape[0]} labels")
        if np.any(y < 0) or np.any(y >= len(registry)):
            bad = sorted(set(int(v) for v in y[(y < 0) | (y >= len(registry))]))
            raise ValidationError(f"label ids {bad} outside registry of size {len(registry)}")
        if not np.all(np.isfinite(x)):
            raise ValidationError("features contain non-finite values")
        if provenance not in PROVENANCES:
            raise ValidationError(f"unknown provenance {provenance!r}")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "registry", registry)
        object.__setattr__(self, "provenance", provenance)

    def __setattr__(self, name, value):
        raise AttributeError("Dataset is immutable")

    def __len__(self) -> int:
        return self.features.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.registry == other.registry
            and self.provenance == other.provenance
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.features, other.features)
        )

    def __repr__(self) -> str:
        return f"Dataset(n={len(self)}, d={self.dim}, classes={len(self.registry)}, provenance={self.provenance})"

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.registry)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.registry, self.provenance)

    def with_provenance(self, provenance: str) -> "Dataset":
        return Dataset(self.features, self.labels, self.registry, provenance)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update("\x1f".join(self.registry.names).encode())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.features, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class Partition:
    assignments: tuple[np.ndarray, ...]
    alpha: float
    seed: int

    @property
    def n_clients(self) -> int:
        return len(self.assignments)

    def sizes(self) -> np.ndarray:
        return np.array([len(a) for a in self.assignments], dtype=np.int64)

    def validate(self, n_samples: int) -> None:
        """Raise unless the index lists are a disjoint, non-empty cover of ``range(n_samples)``."""
        if any(len(a) == 0 for a in self.assignments):
            raise ValidationError("partition has an empty client")
        allidx = np.concatenate(self.assignments) if self.assignments else np.array([], dtype=np.int64)
        if allidx.shape[0] != n_samples or not np.array_equal(np.sort(allidx), np.arange(n_samples)):
            raise ValidationError("partition is not a disjoint cover of the dataset indices")


@dataclass(frozen=True)
class BlobBenchmarkConfig:
    n_classes: int = 10
    feature_dim: int = 32
    samples_per_class: int = 1200
    within_class_std: float = 1.0
    test_fraction: float = 1.0 / 6.0
    # pairwise distance between auto-placed means, in units of within_class_std
    mean_separation: float = 3.0
    class_means: tuple | None = None

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValidationError("n_classes must be at least 2")
        if self.feature_dim < 1 or self.samples_per_class < 1:
            raise ValidationError("feature_dim and samples_per_class must be positive")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValidationError("test_fraction must lie strictly between 0 and 1")
        if not self.within_class_std > 0:
            raise ValidationError("within_class_std must be positive")
        if self.class_means is None and self.feature_dim < self.n_classes:
            raise ValidationError("auto-placed simplex means need feature_dim >= n_classes")
        if self.class_means is not None:
            m = np.asarray(self.class_means, dtype=np.float64)
            if m.shape != (self.n_classes, self.feature_dim):
                raise ShapeError(f"class_means must have shape ({self.n_classes}, {self.feature_dim})")


def simplex_means(n_classes: int, feature_dim: int, pairwise_distance: float) -> np.ndarray:
    """Centered regular simplex with the given pairwise distance.

    Vertex ``c`` is ``s * (e_c - 1/K)`` over the first ``K`` coordinates with
    ``s = distance / sqrt(2)``.
    """
    s = pairwise_distance / math.sqrt(2.0)
    means = np.zeros((n_classes, feature_dim))
    means[:, :n_classes] = s * (np.eye(n_classes) - 1.0 / n_classes)
    return means


def class_means(cfg: BlobBenchmarkConfig) -> np.ndarray:
    if cfg.class_means is not None:
        return np.asarray(cfg.class_means, dtype=np.float64)
    return simplex_means(cfg.n_classes, cfg.feature_dim, cfg.mean_separation * cfg.within_class_std)


def make_blob_benchmark(
    cfg: BlobBenchmarkConfig, seed: int, registry: LabelRegistry | None = None
) -> tuple[Dataset, Dataset]:
    """Sample ``N(mu_c, sigma^2 I)`` blobs and split each class into train and test."""
    registry = registry or LabelRegistry.numbered(cfg.n_classes)
    if len(registry) != cfg.n_classes:
        raise ValidationError("registry size differs from n_classes")
    rng = np.random.default_rng(seed)
    means = class_means(cfg)
    n = cfg.samples_per_class
    n_test = min(max(int(round(n * cfg.test_fraction)), 1), n - 1) if n > 1 else 0
    n_train = n - n_test
    tr_x, tr_y, te_x, te_y = [], [], [], []
    for c in range(cfg.n_classes):
        pts = means[c] + cfg.within_class_std * rng.standard_normal((n, cfg.feature_dim))
        tr_x.append(pts[:n_train])
        te_x.append(pts[n_train:])
        tr_y.append(np.full(n_train, c))
        te_y.append(np.full(n_test, c))
    # interleave classes so that prefixes of the data are not single-class
    tr_perm = rng.permutation(n_train * cfg.n_classes)
    te_perm = rng.permutation(n_test * cfg.n_classes)
    train = Dataset(np.concatenate(tr_x)[tr_perm], np.concatenate(tr_y)[tr_perm], registry, "real")
    if n_test == 0:
        return train, train
    test = Dataset(np.concatenate(te_x)[te_perm], np.concatenate(te_y)[te_perm], registry, "real")
    return train, test


def dirichlet_partition(dataset: Dataset, n_clients: int, alpha: float, seed: int) -> Partition:
    """Per-class ``Dir(alpha * 1)`` split of sample indices over clients.

    Clients left empty by the draw are filled by repeatedly moving the last
    index of the currently largest client (lowest id on ties) to the lowest-id
    empty client.
    """
    n = len(dataset)
    if n_clients < 1:
        raise ValidationError("n_clients must be at least 1")
    if not alpha > 0:
        raise ValidationError("alpha must be positive")
    if n_clients > n:
        raise InfeasibleError(f"cannot give {n_clients} clients a sample each from {n} samples")
    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[] for _ in range(n_clients)]
    for c in range(dataset.n_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size == 0:
            continue
        props = rng.dirichlet(np.full(n_clients, alpha))
        # tiny alpha can underflow every component to zero
        if not np.all(np.isfinite(props)) or props.sum() <= 0:
            props = np.zeros(n_clients)
            props[rng.integers(n_clients)] = 1.0
        counts = rng.multinomial(idx.size, props / props.sum())
        idx = rng.permutation(idx)
        start = 0
        for k, cnt in enumerate(counts):
            buckets[k].extend(idx[start : start + cnt].tolist())
            start += cnt
    for k in range(n_clients):
        buckets[k].sort()
    while True:
        empty = [k for k in range(n_clients) if not buckets[k]]
        if not empty:
            break
        donor = max(range(n_clients), key=lambda k: (len(buckets[k]), -k))
        buckets[empty[0]].append(buckets[donor].pop())
    part = Partition(tuple(np.array(sorted(b), dtype=np.int64) for b in buckets), float(alpha), int(seed))
    part.validate(n)
    return part


def label_entropy(counts) -> float:
    """Shannon entropy in nats of a count vector, with ``0 ln 0 = 0``."""
    c = np.asarray(counts, dtype=np.float64)
    total = c.sum()
    if total <= 0:
        return 0.0
    p = c[c > 0] / total
    return float(-(p * np.log(p)).sum())


@dataclass(frozen=True)
class PartitionStats:
    sizes: tuple[int, ...]
    entropies: tuple[float, ...]
    mean_entropy: float


def partition_stats(partition: Partition, dataset: Dataset) -> PartitionStats:
    sizes, ents = [], []
    for idx in partition.assignments:
        counts = np.bincount(dataset.labels[idx], minlength=dataset.n_classes)
        sizes.append(int(len(idx)))
        ents.append(label_entropy(counts))
    return PartitionStats(tuple(sizes), tuple(ents), float(np.mean(ents)))


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def save_dataset(dataset: Dataset, path, generation: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = dataset.dim
    with open(path, "w", newline="") as fh:
        fh.write("label," + ",".join(f"f{j}" for j in range(d)) + "\n")
        for y, row in zip(dataset.labels, dataset.features):
            fh.write(str(int(y)) + "," + ",".join(format(float(v), ".17g") for v in row) + "\n")
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "labels": list(dataset.registry.names),
        "provenance": dataset.provenance,
        "n_samples": len(dataset),
        "feature_dim": d,
        "generation": generation or {},
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict | None:
    mpath = manifest_path(path)
    if not mpath.exists():
        return None
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"manifest is not valid JSON: {exc.msg}", mpath, exc.lineno, exc.colno) from exc
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DatasetFormatError("manifest has wrong 'format' field", mpath)
    if manifest.get("version") != MANIFEST_VERSION:
        raise DatasetFormatError(f"unsupported manifest version {manifest.get('version')!r}", mpath)
    for key in ("labels", "provenance"):
        if key not in manifest:
            raise DatasetFormatError(f"manifest missing {key!r}", mpath)
    return manifest


def read_table(path) -> tuple[list[str], np.ndarray]:
    """Parse the CSV body: raw label tokens and the feature matrix.

    Raises :class:`DatasetFormatError` naming line and column on malformed input.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    labels: list[str] = []
    rows: list[list[float]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError("file is empty, expected a header line", path, 1) from None
        if not header or header[0].strip() != "label":
            raise DatasetFormatError("header must start with 'label'", path, 1, 1)
        d = len(header) - 1
        for j, name in enumerate(header[1:]):
            if name.strip() != f"f{j}":
                raise DatasetFormatError(f"expected header field 'f{j}', got {name!r}", path, 1, j + 2)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 1:
                raise DatasetFormatError(
                    f"row has {len(row)} fields but header declares {d + 1}",
                    path,
                    lineno,
                    min(len(row), d + 1) + 1,
                )
            labels.append(row[0].strip())
            vals = []
            for j, tok in enumerate(row[1:]):
                try:
                    vals.append(float(tok))
                except ValueError:
                    raise DatasetFormatError(f"cannot parse {tok!r} as a number", path, lineno, j + 2) from None
            rows.append(vals)
    feats = np.array(rows, dtype=np.float64).reshape(len(rows), d)
    return labels, feats


def resolve_labels(tokens: Sequence[str], registry: LabelRegistry, file_names: Sequence[str] | None = None) -> np.ndarray:
    """Map label tokens to ids of ``registry``.

    Integer tokens are ids into ``file_names`` when given (and then looked up
    by name in ``registry``) or direct ids otherwise; other tokens are names.
    """
    ids = np.empty(len(tokens), dtype=np.int64)
    unknown: list[str] = []
    bad_ids: list[int] = []
    lookup = {name: i for i, name in enumerate(registry.names)}
    for k, tok in enumerate(tokens):
        try:
            as_int = int(tok)
        except ValueError:
            as_int = None
        if as_int is not None:
            if file_names is not None:
                if not 0 <= as_int < len(file_names):
                    bad_ids.append(as_int)
                    continue
                name = file_names[as_int]
                if name not in lookup:
                    unknown.append(name)
                    continue
                ids[k] = lookup[name]
            else:
                if not 0 <= as_int < len(registry):
                    bad_ids.append(as_int)
                    continue
                ids[k] = as_int
        else:
            if tok not in lookup:
                unknown.append(tok)
                continue
            ids[k] = lookup[tok]
    if bad_ids:
        raise ValidationError(f"label ids {sorted(set(bad_ids))} outside registry of size "
                              f"{len(file_names) if file_names is not None else len(registry)}")
    if unknown:
        raise ValidationError(f"unknown label names: {sorted(set(unknown))}")
    return ids


def load_dataset(path) -> Dataset:
    path = Path(path)
    manifest = read_manifest(path)
    if manifest is None:
        raise DatasetFormatError("missing manifest " + manifest_path(path).name, path)
    registry = LabelRegistry(tuple(manifest["labels"]))
    tokens, feats = read_table(path)
    if not tokens:
        raise ValidationError(f"{path}: no data rows (a dataset needs at least one sample)")
    labels = resolve_labels(tokens, registry)
    return Dataset(feats, labels, registry, manifest["provenance"])
