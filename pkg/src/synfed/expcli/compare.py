"""Rounds-to-target and parameters-to-target across finished runs."""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ComparabilityError, ConfigError
from ..fedengine import DIVERSITY_SENTINEL, RoundRecord, read_rounds_csv

METRICS = ("accuracy", "macro_f1", "diversity")
NOT_REACHED = "not reached"


@dataclass
class RunData:
    path: Path
    summary: dict
    seeds: list[list[RoundRecord]]


@dataclass
class ComparisonRow:
    run: str
    reached_round: int | None
    params_to_target: int | None
    params_to_target_fl: int | None
    final_mean: float
    final_std: float

    def cells(self) -> list[str]:
        if self.reached_round is None:
            reach = [NOT_REACHED, NOT_REACHED, NOT_REACHED]
        else:
            reach = [str(self.reached_round), str(self.params_to_target), str(self.params_to_target_fl)]
        return [self.run, *reach, f"{self.final_mean:.4f} ± {self.final_std:.4f}"]


def load_run(path) -> RunData:
    path = Path(path)
    spath = path / "summary.json"
    if not spath.is_file():
        raise ConfigError(f"{path}: no summary.json, not a run directory")
    summary = json.loads(spath.read_text())
    seeds = [read_rounds_csv(path / s["rounds_csv"]) for s in summary["per_seed"]]
    return RunData(path, summary, seeds)


def metric_values(records: list[RoundRecord], metric: str) -> np.ndarray:
    if metric == "diversity":
        return np.array([r.gradient_diversity for r in records], dtype=float)
    return np.array([getattr(r.metrics, metric) for r in records], dtype=float)


def mean_curve(run: RunData, metric: str) -> np.ndarray:
    curves = [metric_values(recs, metric) for recs in run.seeds]
    n = min(len(c) for c in curves)
    stack = np.stack([c[:n] for c in curves])
    if metric == "diversity":
        stack = np.where(stack == DIVERSITY_SENTINEL, np.nan, stack)
        with np.errstate(invalid="ignore"):
            return np.nanmean(stack, axis=0) if np.isfinite(stack).any() else np.full(n, np.nan)
    return stack.mean(axis=0)


def first_reach(curve: np.ndarray, target: float, metric: str) -> int | None:
    """1-based round at which ``curve`` first meets ``target`` (``<=`` for diversity)."""
    with np.errstate(invalid="ignore"):
        hits = curve <= target if metric == "diversity" else curve >= target
    idx = np.flatnonzero(hits)
    return int(idx[0]) + 1 if idx.size else None


def compare_runs(paths, metric: str, target: float) -> list[ComparisonRow]:
    if metric not in METRICS:
        raise ConfigError(f"metric must be one of {METRICS}")
    runs = [load_run(p) for p in paths]
    digests = {r.summary["benchmark_digest"] for r in runs}
    if len(digests) > 1:
        detail = ", ".join(f"{r.path}={r.summary['benchmark_digest']}" for r in runs)
        raise ComparabilityError(f"runs use different test benchmarks: {detail}")
    rows = []
    for run in runs:
        curve = mean_curve(run, metric)
        t = first_reach(curve, target, metric)
        first = run.seeds[0]
        finals = [float(metric_values(recs, metric)[-1]) for recs in run.seeds]
        rows.append(ComparisonRow(
            run=str(run.path),
            reached_round=t,
            params_to_target=first[t - 1].cumulative_params if t else None,
            params_to_target_fl=first[t - 1].cumulative_params_fl if t else None,
            final_mean=statistics.fmean(finals),
            final_std=statistics.stdev(finals) if len(finals) > 1 else 0.0,
        ))
    return rows


HEADER = ["run", "round_to_target", "params_to_target", "params_to_target_fl", "final (mean ± std)"]


def format_table(rows: list[ComparisonRow]) -> str:
    table = [HEADER] + [r.cells() for r in rows]
    widths = [max(len(row[k]) for row in table) for k in range(len(HEADER))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
