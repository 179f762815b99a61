"""Acceptance suite: one function per criterion, each with its config and seeds pinned.

Each check returns its measured values plus a ``passed`` flag;
:func:`evaluate_criterion` wraps that in a :class:`CriterionResult` and only
passes a criterion that also finished inside its time budget.
"""

from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .. import datakit, fedengine, nnkit, secagg, syngen, trainer
from ..datakit import BlobBenchmarkConfig
from ..fedengine import ClientUpdate, FLConfig
from ..nnkit import Batch, ModelArch, ParamVector
from ..prng import mix_seed
from ..trainer import TrainConfig
from . import pipeline
from .config import ExperimentConfig, ExperimentSettings, OracleSettings

SEEDS = (0, 1, 2, 3, 4)
N_CLIENTS = 50
HIDDEN = 64

# 10 classes, d = 32, 10,000 train / 2,000 test, sigma = 1, simplex means 3 sigma apart
STANDARD_BENCHMARK = BlobBenchmarkConfig(
    n_classes=10, feature_dim=32, samples_per_class=1200, within_class_std=1.0, test_fraction=1 / 6, mean_separation=3.0
)
PRETRAIN = TrainConfig(epochs=20, batch_size=64, learning_rate=0.01, momentum=0.9, weight_decay=0.1, lr_schedule="cosine")
FL_BASE = FLConfig(rounds=30, cohort_size=10, local_epochs=1, batch_size=32, local_lr=0.05)

# Diversity / communication criteria: pretrain without decay so the starting
# model has full-size weights, and fine-tune with local decay 0.05.
DIVERSITY_PRETRAIN = replace(PRETRAIN, weight_decay=0.0)
DIVERSITY_FL = replace(FL_BASE, cohort_size=5, local_weight_decay=0.05)


@dataclass
class CriterionResult:
    cid: str
    title: str
    passed: bool
    measured: dict = field(default_factory=dict)
    seconds: float = 0.0
    budget: float = 0.0

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        vals = ", ".join(f"{k}={_fmt(v)}" for k, v in self.measured.items())
        return f"[{verdict}] {self.cid} {self.title} ({self.seconds:.1f}s / {self.budget:.0f}s) {vals}"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


def experiment(init_mode="gptfl_pretrain", *, alpha=0.1, gap=0.0, volume=3.0, pretrain=PRETRAIN,
               fl=FL_BASE, seeds=SEEDS, checkpoint="", benchmark=STANDARD_BENCHMARK) -> ExperimentConfig:
    return ExperimentConfig(
        experiment=ExperimentSettings(
            seeds=tuple(seeds), init_mode=init_mode, checkpoint=checkpoint, n_clients=N_CLIENTS,
            alpha=alpha, hidden_dim=HIDDEN, benchmark_seed=0, output_dir="",
        ),
        benchmark=benchmark,
        oracle=OracleSettings(domain_gap=gap, variance_inflation=0.0, volume=volume),
        pretrain=pretrain,
        fl=fl,
    )


def run(cfg: ExperimentConfig):
    return pipeline.run_experiment(cfg, write=False)[1]


# ---------------------------------------------------------------------------
# Criteria
# ---------------------------------------------------------------------------


def a_eq1() -> dict:
    """Identical updates give 1/|S|, pairwise-orthogonal equal-norm updates give 1."""
    rng = np.random.default_rng(7)
    errs_ident, errs_orth = [], []
    for s in (2, 4, 8):
        u = rng.standard_normal(64)
        errs_ident.append(abs(fedengine.gradient_diversity([u.copy() for _ in range(s)]) - 1.0 / s))
        q, _ = np.linalg.qr(rng.standard_normal((64, s)))
        errs_orth.append(abs(fedengine.gradient_diversity([3.0 * q[:, k] for k in range(s)]) - 1.0))
    worst = max(errs_ident + errs_orth)
    return {"passed": worst <= 1e-12, "max_abs_err": worst}


def a_grad() -> dict:
    worst = 0.0
    for k in range(20):
        rng = np.random.default_rng(100 + k)
        arch = ModelArch(4, 5, 3)
        base = nnkit.init_params(arch, k).values
        p = ParamVector(base + rng.normal(0.0, 0.1, arch.n_params), arch)
        batch = Batch(rng.standard_normal((8, 4)), rng.integers(0, 3, 8))
        wd = float(rng.uniform(0.0, 0.1))
        _, g = nnkit.loss_and_grad(p, batch, wd)
        fd = nnkit.finite_diff_grad(p, batch, wd, h=1e-5)
        worst = max(worst, nnkit.relative_error(g.values, fd.values))
    return {"passed": worst <= 1e-6, "max_rel_err": worst}


def a_secagg() -> dict:
    q = secagg.QuantConfig(bits=32, clip=8.0)
    mismatches = 0
    for case in range(100):
        rng = np.random.default_rng(1000 + case)
        size = int(rng.integers(1, 17))
        cohort = sorted(rng.choice(64, size=size, replace=False).tolist())
        round_seed = int(rng.integers(0, 2**63))
        qs = {c: secagg.quantize(rng.uniform(-1.0, 1.0, 4096), q) for c in cohort}
        masked = [secagg.mask_update(qs[c], c, cohort, round_seed, q) for c in cohort]
        if not np.array_equal(secagg.secure_sum(masked, cohort, q), secagg.plain_sum(list(qs.values()), q)):
            mismatches += 1
    fl = replace(FL_BASE, rounds=20, cohort_size=5)
    plain = run(experiment(fl=fl, seeds=(0, 1)))
    secure = run(experiment(fl=replace(fl, secure_aggregation=True, quant_bits=32), seeds=(0, 1)))
    diffs = [abs(a.final.accuracy - b.final.accuracy) for a, b in zip(plain, secure)]
    return {"passed": mismatches == 0 and max(diffs) <= 0.01, "mismatches": mismatches, "acc_diff": max(diffs)}


def a_hetero() -> dict:
    train, _ = datakit.make_blob_benchmark(STANDARD_BENCHMARK, 0)
    means = {}
    for alpha in (0.1, 0.5, 10.0):
        ents = [datakit.partition_stats(datakit.dirichlet_partition(train, N_CLIENTS, alpha, s), train).mean_entropy
                for s in range(20)]
        means[alpha] = float(np.mean(ents))
    ok = means[0.1] < means[0.5] < means[10.0]
    return {"passed": ok, "H(0.1)": means[0.1], "H(0.5)": means[0.5], "H(10)": means[10.0]}


def _early_diversity(results, n_rounds: int) -> list[float]:
    out = []
    for r in results:
        vals = [d for d in r.log.curve("diversity")[:n_rounds] if d != fedengine.DIVERSITY_SENTINEL]
        out.append(float(np.mean(vals)))
    return out


def a_diversity() -> dict:
    fl = replace(DIVERSITY_FL, rounds=10)
    gpt = _early_diversity(run(experiment("gptfl_pretrain", pretrain=DIVERSITY_PRETRAIN, fl=fl)), 10)
    rnd = _early_diversity(run(experiment("random", pretrain=DIVERSITY_PRETRAIN, fl=fl)), 10)
    wins = sum(g < r for g, r in zip(gpt, rnd))
    return {"passed": wins >= 4, "wins": wins, "gptfl_div": gpt, "random_div": rnd}


def _first_reach(curve, target) -> int | None:
    hits = np.flatnonzero(np.asarray(curve) >= target)
    return int(hits[0]) + 1 if hits.size else None


def a_comm() -> dict:
    fl = replace(DIVERSITY_FL, rounds=100)
    gpt = run(experiment("gptfl_pretrain", pretrain=DIVERSITY_PRETRAIN, fl=fl))
    rnd = run(experiment("random", pretrain=DIVERSITY_PRETRAIN, fl=fl))
    wins = 0
    rounds_g, rounds_r, saved = [], [], []
    for g, r in zip(gpt, rnd):
        target = 0.9 * r.final.accuracy
        tg, tr = _first_reach(g.log.curve(), target), _first_reach(r.log.curve(), target)
        rounds_g.append(tg)
        rounds_r.append(tr)
        if tg is None or tr is None:
            saved.append(None)
            continue
        pg = g.log.records[tg - 1].cumulative_params_fl
        pr = r.log.records[tr - 1].cumulative_params_fl
        saved.append(1.0 - pg / pr)
        wins += (2 * tg <= tr) and pg <= 0.5 * pr
    return {"passed": wins >= 4, "wins": wins, "rounds_gptfl": rounds_g, "rounds_random": rounds_r,
            "param_saving": saved}


def a_volume() -> dict:
    cfgs = {m: experiment(volume=m) for m in (1.0, 2.0, 3.0)}
    accs = {}
    for m, cfg in cfgs.items():
        bench = pipeline.build_benchmark(cfg)
        accs[m] = [trainer.evaluate(pipeline.initial_model(cfg, bench, s)[0].params, bench.test).accuracy for s in SEEDS]
    means = [float(np.mean(accs[m])) for m in (1.0, 2.0, 3.0)]
    ok = means[1] >= means[0] - 0.02 and means[2] >= means[1] - 0.02
    return {"passed": ok, "acc_1x": means[0], "acc_2x": means[1], "acc_3x": means[2]}


def a_ood() -> dict:
    gap = 3.0 * STANDARD_BENCHMARK.within_class_std
    gpt = run(experiment("gptfl_pretrain", gap=gap))
    rnd = run(experiment("random", gap=gap))
    pre_only = float(np.mean([r.init_metrics.accuracy for r in gpt]))
    fl_only = float(np.mean([r.final.accuracy for r in rnd]))
    gptfl = float(np.mean([r.final.accuracy for r in gpt]))
    ok = pre_only < fl_only and gptfl >= max(pre_only, fl_only) + 0.02
    return {"passed": ok, "pretrain_only": pre_only, "fl_only": fl_only, "gptfl": gptfl,
            "delta_metric": gptfl - max(pre_only, fl_only)}


def a_sampling() -> dict:
    fl = replace(FL_BASE, rounds=200)
    one = run(experiment(fl=replace(fl, cohort_size=1)))
    ten = run(experiment(fl=replace(fl, cohort_size=10)))
    m1 = float(np.mean([r.final.accuracy for r in one]))
    m10 = float(np.mean([r.final.accuracy for r in ten]))
    return {"passed": abs(m10 - m1) <= 0.05, "acc_cohort1": m1, "acc_cohort10": m10}


def a_identities() -> dict:
    rng = np.random.default_rng(3)
    arch = ModelArch(8, 6, 3)
    glob = nnkit.init_params(arch, 1)
    ups = [ClientUpdate(ParamVector(rng.normal(0, 0.1, arch.n_params), arch), int(rng.integers(1, 50)), i)
           for i in range(5)]
    sgd = FLConfig(server_optimizer="fedopt_sgd", server_lr=1.0)
    opt, _ = fedengine.aggregate_fedopt(glob, ups, None, sgd)
    avg = fedengine.aggregate_fedavg(glob, ups, weighted=False)
    fedopt_ok = opt == avg

    x = rng.standard_normal((40, 8))
    y = rng.integers(0, 3, 40)
    ds = datakit.Dataset(x, y, datakit.LabelRegistry.numbered(3))
    one_step = FLConfig(local_epochs=1, batch_size=64, local_lr=0.1, seed=5)  # K = 1 step
    plain, _ = fedengine.local_update(glob, ds, one_step, 1, 0)
    zero = ParamVector.zeros(arch)
    scaf, _ = fedengine.local_update(glob, ds, replace(one_step, use_scaffold=True), 1, 0, (zero, zero))
    scaffold_ok = plain.delta == scaf.delta
    multi = FLConfig(local_epochs=2, batch_size=8, local_lr=0.1, seed=5)
    p0, _ = fedengine.local_update(glob, ds, multi, 1, 0)
    p1, _ = fedengine.local_update(glob, ds, replace(multi, prox_mu=0.0), 1, 0)
    prox_ok = p0.delta == p1.delta
    return {"passed": fedopt_ok and scaffold_ok and prox_ok, "fedopt_sgd==fedavg": fedopt_ok,
            "scaffold0==plain": scaffold_ok, "prox0==plain": prox_ok}


def a_comm_counters() -> dict:
    bench = BlobBenchmarkConfig(n_classes=3, feature_dim=4, samples_per_class=60, test_fraction=0.25)
    train, test = datakit.make_blob_benchmark(bench, 0)
    arch = ModelArch(4, 5, 3)
    dim = arch.n_params
    cases = [
        (10, FLConfig(rounds=5, cohort_size=10, local_lr=0.05, count_initial_broadcast=False)),
        (10, FLConfig(rounds=7, cohort_size=1, local_lr=0.05, count_initial_broadcast=True)),
        (12, FLConfig(rounds=3, cohort_size=4, local_lr=0.05, server_optimizer="fedopt_adam", server_lr=0.01)),
    ]
    ok = True
    got = []
    for n_clients, cfg in cases:
        part = datakit.dirichlet_partition(train, n_clients, 0.5, 1)
        log = fedengine.run_federation(trainer.Checkpoint(nnkit.init_params(arch, 0), arch), train, part, test, cfg)
        expected_fl = 2 * cfg.cohort_size * cfg.rounds * dim
        expected = expected_fl + (n_clients * dim if cfg.count_initial_broadcast else 0)
        last = log.records[-1]
        ok &= last.cumulative_params_fl == expected_fl and last.cumulative_params == expected
        got.append(last.cumulative_params)
    return {"passed": bool(ok), "cumulative_params": got}


def a_warm_start() -> dict:
    # auxiliary task: same shape, class means at fresh random positions
    rng = np.random.default_rng(2024)
    aux_means = rng.normal(0.0, 1.5, (STANDARD_BENCHMARK.n_classes, STANDARD_BENCHMARK.feature_dim))
    aux_cfg = replace(STANDARD_BENCHMARK, class_means=tuple(map(tuple, aux_means)))
    arch = ModelArch(STANDARD_BENCHMARK.feature_dim, HIDDEN, STANDARD_BENCHMARK.n_classes)
    warm, cold = [], []
    with tempfile.TemporaryDirectory() as tmp:
        for s in SEEDS:
            aux_train, _ = datakit.make_blob_benchmark(aux_cfg, mix_seed(77, s))
            ck = trainer.pretrain(arch, aux_train, replace(PRETRAIN, seed=mix_seed(78, s)))
            path = trainer.save_checkpoint(ck, Path(tmp) / f"aux_{s}.ckpt")
            warm += run(experiment("checkpoint", checkpoint=str(path), seeds=(s,)))
        cold = run(experiment("gptfl_pretrain"))
    mw = float(np.mean([r.final.accuracy for r in warm]))
    mc = float(np.mean([r.final.accuracy for r in cold]))
    return {"passed": mw >= mc - 0.02, "acc_warm": mw, "acc_cold": mc}


@dataclass(frozen=True)
class Criterion:
    cid: str
    title: str
    budget: float
    check: Callable[[], dict]


CRITERIA: tuple[Criterion, ...] = (
    Criterion("A-EQ1", "gradient diversity anchors", 1.0, a_eq1),
    Criterion("A-GRAD", "analytic vs finite-difference gradient", 5.0, a_grad),
    Criterion("A-SECAGG", "secure aggregation exactness", 30.0, a_secagg),
    Criterion("A-HETERO", "Dirichlet heterogeneity ordering", 10.0, a_hetero),
    Criterion("A-DIVERSITY", "pretrained init lowers early diversity", 120.0, a_diversity),
    Criterion("A-COMM", "communication efficiency", 180.0, a_comm),
    Criterion("A-VOLUME", "synthetic volume scaling", 120.0, a_volume),
    Criterion("A-OOD", "out-of-domain fine-tuning gain", 240.0, a_ood),
    Criterion("A-SAMPLING", "client sampling robustness", 180.0, a_sampling),
    Criterion("A-IDENT", "aggregator identities", 30.0, a_identities),
    Criterion("A-COUNTERS", "communication counter exactness", 10.0, a_comm_counters),
    Criterion("A-WARM", "warm start from checkpoint", 240.0, a_warm_start),
)


def evaluate_criterion(c: Criterion) -> CriterionResult:
    t0 = time.perf_counter()
    out = dict(c.check())
    elapsed = time.perf_counter() - t0
    ok = bool(out.pop("passed")) and elapsed < c.budget
    return CriterionResult(c.cid, c.title, ok, out, elapsed, c.budget)


def run_all(only: list[str] | None = None, echo: Callable[[str], None] | None = print) -> list[CriterionResult]:
    results = []
    for c in CRITERIA:
        if only and c.cid not in only:
            continue
        res = evaluate_criterion(c)
        results.append(res)
        if echo is not None:
            echo(res.line())
    return results
