"""Assemble data, model and clients from a RunConfig and run them."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, dump_config
from .datagen import gen_classification, gen_synthetic, ingest_matrix, partition_noniid
from .fedsim import build_clients, run
from .masking import theta
from .metrics import MetricsRecord, MetricsWriter
from .nn import Dataset
from .store import save_checkpoint
from .tasks import CnnTask, MlpTask
from .theory import envelope_check, ntk_infty, theory_run


@dataclass
class Setup:
    task: object
    train: Dataset
    test: Dataset | None
    shards: dict
    clients: list


def _split(data: Dataset, test_n: int, rng) -> tuple[Dataset, Dataset | None]:
    if test_n == 0:
        return data, None
    order = rng.permutation(len(data))
    return data.subset(np.sort(order[test_n:])), data.subset(np.sort(order[:test_n]))


def build_setup(cfg: RunConfig) -> Setup:
    data_seq, model_seq, split_seq, shard_seq = np.random.SeedSequence(cfg.seed).spawn(4)
    if cfg.model == "cnn":
        if cfg.source == "ingest":
            raw = ingest_matrix(cfg.ingest_path, cfg.ingest_format, kind="regression")
            data = Dataset(raw.flat().reshape(len(raw), cfg.d_hat, cfg.p), raw.labels,
                           "regression", bound=raw.bound)
        else:
            data = gen_synthetic(cfg.n + cfg.test_n, cfg.d_hat, cfg.p, cfg.q, cfg.bound,
                                 np.random.default_rng(data_seq))
        task = CnnTask.create(cfg.width, cfg.d_hat, cfg.p, cfg.q, cfg.kappa, cfg.scale,
                              np.random.default_rng(model_seq))
    else:
        if cfg.source == "ingest":
            data = ingest_matrix(cfg.ingest_path, cfg.ingest_format)
        else:
            data = gen_classification(cfg.n + cfg.test_n, cfg.dim, cfg.classes, cfg.separation,
                                      cfg.noise, np.random.default_rng(data_seq))
        outputs = data.num_classes if data.kind == "classification" else 1
        task = MlpTask.create(data.flat().shape[1], cfg.hidden, outputs, cfg.loss,
                              np.random.default_rng(model_seq))
    train, test = _split(data, min(cfg.test_n, len(data) - 1), np.random.default_rng(split_seq))
    clients = build_clients(cfg.sim_config())
    plan = partition_noniid(train, clients, cfg.bias, np.random.default_rng(shard_seq),
                            cfg.classes_per_level)
    shards = {c.shard_id: train.subset(plan.shards[c.id]) for c in clients}
    return Setup(task, train, test, shards, clients)


def simulate(cfg: RunConfig, on_record=None):
    setup = build_setup(cfg)
    return run(cfg.sim_config(), cfg.strategy_spec(), setup.task, setup.train, setup.shards,
               setup.test, setup.clients, on_record=on_record)


def theory_lr(cfg: RunConfig, lambda0: float) -> float:
    return cfg.theory_lr if cfg.theory_lr is not None else lambda0 / (4.0 * cfg.n ** 2)


def run_theory(cfg: RunConfig, on_record=None):
    """Delayed-gradient CNN run; returns the trace and the envelope report."""
    data = gen_synthetic(cfg.n, cfg.d_hat, cfg.p, cfg.q, cfg.bound, cfg.seed)
    ntk = ntk_infty(data, cfg.q)
    lr = theory_lr(cfg, ntk.lambda0)
    merges = cfg.max_merges if cfg.max_merges is not None else 2000
    trace = theory_run(data, cfg.q, cfg.width, cfg.keep_rate, cfg.subnetworks,
                       cfg.max_staleness, lr, merges, cfg.kappa, cfg.seed + 1, cfg.mask_mode)
    per_round = cfg.width * cfg.q * cfg.d_hat
    if on_record is not None:
        for t, loss in enumerate(trace.losses[1:]):
            moved = per_round * (t + 1) * cfg.subnetworks
            on_record(MetricsRecord(float(t + 1), t, t + 1, 0, 1, float(loss), None, None,
                                    moved, moved, int(trace.staleness[t])))
    report = envelope_check(trace.losses, theta(cfg.keep_rate, cfg.subnetworks), lr, ntk.lambda0)
    return trace, report, ntk


def run_experiment(cfg: RunConfig, out_dir=None) -> int:
    """Run one configuration and write its artifacts to ``out_dir``.

    Writes ``metrics.csv``, ``checkpoint.adrp``, ``config.effective`` and,
    for theory runs, ``theory_report.txt``. Returns 0; module errors
    propagate to the caller.
    """
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.effective").write_text(dump_config(cfg), encoding="utf-8")
    with MetricsWriter(out / "metrics.csv") as writer:
        if cfg.mode == "theory":
            trace, report, ntk = run_theory(cfg, writer.append)
            save_checkpoint(out / "checkpoint.adrp", {"W": trace.model.W})
            lines = [
                "[theory-report]",
                f"lambda0 = {ntk.lambda0!r}",
                f"lr = {trace.lr!r}",
                f"theta = {trace.theta!r}",
                f"initial_loss = {trace.losses[0]!r}",
                f"final_loss = {trace.losses[-1]!r}",
                f"final_ratio = {trace.losses[-1] / trace.losses[0]!r}",
                f"floor = {report.floor!r}",
                f"compliant = {str(report.compliant).lower()}",
                f"violations = {len(report.violations)}",
                f"max_staleness_seen = {int(trace.staleness.max()) if len(trace.staleness) else 0}",
            ]
            (out / "theory_report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
            if not math.isfinite(trace.losses[-1]):
                return 2
        else:
            result = simulate(cfg, writer.append)
            save_checkpoint(out / "checkpoint.adrp", result.store.snapshot())
    return 0
