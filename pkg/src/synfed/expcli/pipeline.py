"""generate -> pretrain -> federate, per seed, plus on-disk artifacts.

Layout of an output directory::

    summary.json           RunSummary (no wall-clock fields; byte-stable)
    config.toml            the resolved config
    seed_<s>/rounds.csv    one row per round, columns fedengine.CSV_COLUMNS
    seed_<s>/manifest.json config digest, seeds, dataset digests, init metrics, timing
    seed_<s>/final.ckpt    final global model
    seed_<s>/prompts.tsv   prompts accompanying the synthetic set (pretrain modes)
"""

from __future__ import annotations

import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .. import datakit, fedengine, syngen, trainer
from ..datakit import Dataset, Partition
from ..fedengine import RunLog
from ..nnkit import ModelArch, init_params
from ..prng import mix_seed
from ..trainer import Checkpoint, Metrics
from .config import ExperimentConfig, dump_toml

logger = logging.getLogger(__name__)

SUMMARY_VERSION = "summary-v1"
MANIFEST_VERSION = "run-manifest-v1"
PROMPT_TEMPLATE = "a sample of {label}"

PARTITION_TAG = 0x50415254
INIT_TAG = 0x494E4954
SYNTH_TAG = 0x53594E47
PRETRAIN_TAG = 0x50524554
FL_TAG = 0x464C524E


@dataclass(frozen=True)
class Benchmark:
    train: Dataset
    test: Dataset
    arch: ModelArch
    oracle: syngen.OracleConfig

    def digest(self) -> str:
        return self.test.digest()[:16]


@dataclass
class SeedResult:
    seed: int
    init_metrics: Metrics
    log: RunLog
    partition: Partition
    synthetic_digest: str | None

    @property
    def final(self) -> Metrics:
        return self.log.records[-1].metrics

    def best(self, metric: str) -> float:
        return max(getattr(r.metrics, metric) for r in self.log.records)


def build_benchmark(cfg: ExperimentConfig) -> Benchmark:
    bcfg = cfg.benchmark
    train, test = datakit.make_blob_benchmark(bcfg, cfg.experiment.benchmark_seed)
    arch = ModelArch(bcfg.feature_dim, cfg.experiment.hidden_dim, bcfg.n_classes)
    oracle = syngen.OracleConfig.from_benchmark(
        bcfg,
        train.registry,
        domain_gap=cfg.oracle.domain_gap,
        variance_inflation=cfg.oracle.variance_inflation,
        direction_seed=cfg.experiment.benchmark_seed,
    )
    return Benchmark(train, test, arch, oracle)


def make_synthetic(cfg: ExperimentConfig, bench: Benchmark, seed: int) -> Dataset:
    return syngen.generate_synthetic(
        bench.oracle, syngen.SyntheticVolume(cfg.oracle.volume), len(bench.train), mix_seed(seed, SYNTH_TAG)
    )


def initial_model(cfg: ExperimentConfig, bench: Benchmark, seed: int) -> tuple[Checkpoint, Dataset | None]:
    mode = cfg.experiment.init_mode
    arch = bench.arch
    if mode == "random":
        params = init_params(arch, mix_seed(seed, INIT_TAG))
        return Checkpoint(params, arch, {"init": "random"}), None
    start = None
    if mode == "checkpoint":
        start = trainer.load_checkpoint(cfg.experiment.checkpoint, arch)
    synthetic = make_synthetic(cfg, bench, seed)
    pcfg = replace(cfg.pretrain, seed=mix_seed(seed, PRETRAIN_TAG))
    ckpt = trainer.pretrain(arch, synthetic, pcfg, init=start)
    return ckpt, synthetic


def run_seed(cfg: ExperimentConfig, bench: Benchmark, seed: int) -> SeedResult:
    exp = cfg.experiment
    partition = datakit.dirichlet_partition(bench.train, exp.n_clients, exp.alpha, mix_seed(seed, PARTITION_TAG))
    init, synthetic = initial_model(cfg, bench, seed)
    init_metrics = trainer.evaluate(init.params, bench.test)
    fl = replace(cfg.fl, seed=mix_seed(seed, FL_TAG))
    log = fedengine.run_federation(init, bench.train, partition, bench.test, fl)
    return SeedResult(seed, init_metrics, log, partition, synthetic.digest()[:16] if synthetic is not None else None)


def _mean_std(values: list[float]) -> dict:
    mean = statistics.fmean(values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return {"mean": mean, "std": std}


def summarize(cfg: ExperimentConfig, bench: Benchmark, results: list[SeedResult]) -> dict:
    per_seed = []
    for r in results:
        per_seed.append({
            "seed": r.seed,
            "init": asdict(r.init_metrics),
            "final": asdict(r.final),
            "best_accuracy": r.best("accuracy"),
            "best_macro_f1": r.best("macro_f1"),
            "rounds_csv": f"seed_{r.seed}/rounds.csv",
        })
    agg = {}
    for key, getter in (
        ("init_accuracy", lambda s: s["init"]["accuracy"]),
        ("final_accuracy", lambda s: s["final"]["accuracy"]),
        ("final_macro_f1", lambda s: s["final"]["macro_f1"]),
        ("best_accuracy", lambda s: s["best_accuracy"]),
        ("best_macro_f1", lambda s: s["best_macro_f1"]),
    ):
        agg[key] = _mean_std([getter(s) for s in per_seed])
    return {
        "version": SUMMARY_VERSION,
        "config_digest": cfg.digest(),
        "benchmark_digest": bench.digest(),
        "init_mode": cfg.experiment.init_mode,
        "n_seeds": len(results),
        "rounds": cfg.fl.rounds,
        "cohort_size": cfg.fl.cohort_size,
        "n_params": bench.arch.n_params,
        "n_clients": cfg.experiment.n_clients,
        "count_initial_broadcast": cfg.fl.count_initial_broadcast,
        "aggregate": agg,
        "per_seed": per_seed,
    }


def write_seed_artifacts(out: Path, cfg: ExperimentConfig, bench: Benchmark, r: SeedResult, elapsed: float) -> None:
    sdir = out / f"seed_{r.seed}"
    sdir.mkdir(parents=True, exist_ok=True)
    fedengine.write_rounds_csv(r.log, sdir / "rounds.csv")
    trainer.save_checkpoint(r.log.final, sdir / "final.ckpt")
    if r.synthetic_digest is not None:
        counts = syngen.per_class_counts(syngen.SyntheticVolume(cfg.oracle.volume).total(len(bench.train)), bench.arch.n_classes)
        prompts = syngen.make_prompts(bench.train.registry, PROMPT_TEMPLATE, int(counts.max()), r.seed)
        syngen.write_prompts(prompts, sdir / "prompts.tsv")
    manifest = {
        "version": MANIFEST_VERSION,
        "config_digest": cfg.digest(),
        "seed": r.seed,
        "derived_seeds": {
            "partition": mix_seed(r.seed, PARTITION_TAG),
            "init": mix_seed(r.seed, INIT_TAG),
            "synthetic": mix_seed(r.seed, SYNTH_TAG),
            "pretrain": mix_seed(r.seed, PRETRAIN_TAG),
            "fl": mix_seed(r.seed, FL_TAG),
        },
        "datasets": {
            "train": bench.train.digest()[:16],
            "test": bench.test.digest()[:16],
            "synthetic": r.synthetic_digest,
        },
        "partition_sizes": [int(s) for s in r.partition.sizes()],
        "init_metrics": asdict(r.init_metrics),
        "best_metric_rule": "best = max over rounds of test accuracy / macro-F1",
        "wall_clock_seconds": round(elapsed, 3),
    }
    (sdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def run_experiment(cfg: ExperimentConfig, out_dir=None, write: bool = True) -> tuple[dict, list[SeedResult]]:
    cfg.validate()
    bench = build_benchmark(cfg)
    results = []
    out = Path(out_dir or cfg.experiment.output_dir)
    for seed in cfg.experiment.seeds:
        t0 = time.perf_counter()
        r = run_seed(cfg, bench, seed)
        results.append(r)
        logger.info("seed %d: init acc %.4f -> final acc %.4f", seed, r.init_metrics.accuracy, r.final.accuracy)
        if write:
            write_seed_artifacts(out, cfg, bench, r, time.perf_counter() - t0)
    summary = summarize(cfg, bench, results)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.toml").write_text(dump_toml(cfg))
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary, results
